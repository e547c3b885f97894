//! Minimal PLY reader/writer for point clouds and triangle meshes.
//!
//! Supports `ascii` and `binary_little_endian` encodings. Vertex positions are
//! written as `double`; an optional per-vertex scalar is stored as `channel`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use super::PointCloud;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PlyFormat {
    Ascii,
    #[default]
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn read_le(self, r: &mut impl Read) -> std::io::Result<f64> {
        let mut b = [0u8; 8];
        Ok(match self {
            Scalar::I8 => {
                r.read_exact(&mut b[..1])?;
                b[0] as i8 as f64
            }
            Scalar::U8 => {
                r.read_exact(&mut b[..1])?;
                b[0] as f64
            }
            Scalar::I16 => {
                r.read_exact(&mut b[..2])?;
                i16::from_le_bytes([b[0], b[1]]) as f64
            }
            Scalar::U16 => {
                r.read_exact(&mut b[..2])?;
                u16::from_le_bytes([b[0], b[1]]) as f64
            }
            Scalar::I32 => {
                r.read_exact(&mut b[..4])?;
                i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64
            }
            Scalar::U32 => {
                r.read_exact(&mut b[..4])?;
                u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64
            }
            Scalar::F32 => {
                r.read_exact(&mut b[..4])?;
                f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64
            }
            Scalar::F64 => {
                r.read_exact(&mut b)?;
                f64::from_le_bytes(b)
            }
        })
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { name: String, count: Scalar, item: Scalar },
}

impl Property {
    fn name(&self) -> &str {
        match self {
            Property::Scalar { name, .. } | Property::List { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

/// Raw element data: one row per element instance, one `Vec<f64>` per property.
type Rows = Vec<Vec<Vec<f64>>>;

struct PlyData {
    elements: Vec<(Element, Rows)>,
}

impl PlyData {
    fn element(&self, name: &str) -> Option<&(Element, Rows)> {
        self.elements.iter().find(|(e, _)| e.name == name)
    }
}

fn read_ply(path: &Path) -> Result<PlyData> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let pname = path.display().to_string();
    let mut line = String::new();
    let mut line_no = 0usize;
    let mut next_line = |reader: &mut BufReader<File>, line: &mut String| -> Result<()> {
        line.clear();
        line_no += 1;
        let n = reader
            .read_line(line)
            .map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(Error::parse(&pname, line_no, "unexpected end of header"));
        }
        Ok(())
    };

    next_line(&mut reader, &mut line)?;
    if line.trim() != "ply" {
        return Err(Error::parse(&pname, 1, "missing 'ply' magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    let mut header_lines = 1;
    loop {
        next_line(&mut reader, &mut line)?;
        header_lines += 1;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLittleEndian),
            ["format", other, ..] => {
                return Err(Error::parse(
                    &pname,
                    header_lines,
                    format!("unsupported format {other}"),
                ))
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| Error::parse(&pname, header_lines, "bad element count"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            ["property", "list", c, i, name] => {
                let (Some(count), Some(item)) = (Scalar::parse(c), Scalar::parse(i)) else {
                    return Err(Error::parse(&pname, header_lines, "bad list property type"));
                };
                elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(&pname, header_lines, "property before element"))?
                    .props
                    .push(Property::List {
                        name: name.to_string(),
                        count,
                        item,
                    });
            }
            ["property", ty, name] => {
                let ty = Scalar::parse(ty)
                    .ok_or_else(|| Error::parse(&pname, header_lines, "bad property type"))?;
                elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(&pname, header_lines, "property before element"))?
                    .props
                    .push(Property::Scalar {
                        name: name.to_string(),
                        ty,
                    });
            }
            ["end_header"] => break,
            _ => {
                return Err(Error::parse(
                    &pname,
                    header_lines,
                    format!("unrecognized header line '{}'", line.trim()),
                ))
            }
        }
    }
    let format =
        format.ok_or_else(|| Error::parse(&pname, header_lines, "missing format line"))?;

    let mut out = Vec::with_capacity(elements.len());
    match format {
        PlyFormat::Ascii => {
            let mut body_line = header_lines;
            for el in elements {
                let mut rows = Vec::with_capacity(el.count);
                for _ in 0..el.count {
                    line.clear();
                    body_line += 1;
                    reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
                    let mut toks = line.split_whitespace().map(|t| {
                        t.parse::<f64>()
                            .map_err(|_| Error::parse(&pname, body_line, format!("bad number '{t}'")))
                    });
                    let mut next = || {
                        toks.next()
                            .unwrap_or_else(|| Err(Error::parse(&pname, body_line, "too few values")))
                    };
                    let mut row = Vec::with_capacity(el.props.len());
                    for p in &el.props {
                        match p {
                            Property::Scalar { .. } => row.push(vec![next()?]),
                            Property::List { .. } => {
                                let n = next()? as usize;
                                let mut items = Vec::with_capacity(n);
                                for _ in 0..n {
                                    items.push(next()?);
                                }
                                row.push(items);
                            }
                        }
                    }
                    rows.push(row);
                }
                out.push((el, rows));
            }
        }
        PlyFormat::BinaryLittleEndian => {
            for el in elements {
                let mut rows = Vec::with_capacity(el.count);
                for k in 0..el.count {
                    let mut row = Vec::with_capacity(el.props.len());
                    for p in &el.props {
                        let err = |e| {
                            Error::parse(&pname, header_lines, format!("{} #{k}: {e}", el.name))
                        };
                        match p {
                            Property::Scalar { ty, .. } => {
                                row.push(vec![ty.read_le(&mut reader).map_err(err)?])
                            }
                            Property::List { count, item, .. } => {
                                let n = count.read_le(&mut reader).map_err(err)? as usize;
                                let mut items = Vec::with_capacity(n);
                                for _ in 0..n {
                                    items.push(item.read_le(&mut reader).map_err(err)?);
                                }
                                row.push(items);
                            }
                        }
                    }
                    rows.push(row);
                }
                out.push((el, rows));
            }
        }
    }
    Ok(PlyData { elements: out })
}

fn positions(data: &PlyData, pname: &str) -> Result<(Vec<Vector3<f64>>, Option<Vec<f64>>)> {
    let Some((el, rows)) = data.element("vertex") else {
        return Ok((Vec::new(), None));
    };
    let find = |n: &str| el.props.iter().position(|p| p.name() == n);
    let (Some(ix), Some(iy), Some(iz)) = (find("x"), find("y"), find("z")) else {
        return Err(Error::parse(pname, 0, "vertex element lacks x/y/z"));
    };
    let ic = find("channel");
    let pts = rows
        .iter()
        .map(|r| Vector3::new(r[ix][0], r[iy][0], r[iz][0]))
        .collect();
    let channel = ic.map(|c| rows.iter().map(|r| r[c][0]).collect());
    Ok((pts, channel))
}

pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let data = read_ply(path)?;
    let (pts, channel) = positions(&data, &path.display().to_string())?;
    match channel {
        Some(c) => PointCloud::with_channel(pts, c),
        None => PointCloud::new(pts),
    }
}

/// Reads vertices and faces; polygons are fan-triangulated.
pub fn read_mesh(path: impl AsRef<Path>) -> Result<(Vec<Vector3<f64>>, Vec<[usize; 3]>)> {
    let path = path.as_ref();
    let pname = path.display().to_string();
    let data = read_ply(path)?;
    let (pts, _) = positions(&data, &pname)?;
    let mut tris = Vec::new();
    if let Some((el, rows)) = data.element("face") {
        let idx = el
            .props
            .iter()
            .position(|p| matches!(p, Property::List { name, .. } if name == "vertex_indices" || name == "vertex_index"))
            .ok_or_else(|| Error::parse(&pname, 0, "face element lacks vertex_indices"))?;
        for r in rows {
            let f = &r[idx];
            for k in 1..f.len().saturating_sub(1) {
                tris.push([f[0] as usize, f[k] as usize, f[k + 1] as usize]);
            }
        }
    }
    Ok((pts, tris))
}

fn header(w: &mut impl Write, format: PlyFormat, n_vertices: usize) -> std::io::Result<()> {
    writeln!(w, "ply")?;
    match format {
        PlyFormat::Ascii => writeln!(w, "format ascii 1.0")?,
        PlyFormat::BinaryLittleEndian => writeln!(w, "format binary_little_endian 1.0")?,
    }
    writeln!(w, "element vertex {n_vertices}")?;
    writeln!(w, "property double x")?;
    writeln!(w, "property double y")?;
    writeln!(w, "property double z")
}

pub fn write_cloud(path: impl AsRef<Path>, cloud: &PointCloud, format: PlyFormat) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    header(&mut w, format, cloud.len()).map_err(io)?;
    if cloud.channel().is_some() {
        writeln!(w, "property double channel").map_err(io)?;
    }
    writeln!(w, "end_header").map_err(io)?;
    for (i, p) in cloud.points().iter().enumerate() {
        let c = cloud.channel().map(|c| c[i]);
        match format {
            PlyFormat::Ascii => {
                match c {
                    Some(c) => writeln!(w, "{} {} {} {}", p.x, p.y, p.z, c),
                    None => writeln!(w, "{} {} {}", p.x, p.y, p.z),
                }
                .map_err(io)?;
            }
            PlyFormat::BinaryLittleEndian => {
                for v in [p.x, p.y, p.z].into_iter().chain(c) {
                    w.write_all(&v.to_le_bytes()).map_err(io)?;
                }
            }
        }
    }
    w.flush().map_err(io)
}

/// Writes a triangle mesh with per-vertex RGB colors.
pub fn write_mesh(
    path: impl AsRef<Path>,
    vertices: &[Vector3<f64>],
    triangles: &[[usize; 3]],
    colors: Option<&[[u8; 3]]>,
    format: PlyFormat,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    header(&mut w, format, vertices.len()).map_err(io)?;
    if colors.is_some() {
        for c in ["red", "green", "blue"] {
            writeln!(w, "property uchar {c}").map_err(io)?;
        }
    }
    writeln!(w, "element face {}", triangles.len()).map_err(io)?;
    writeln!(w, "property list uchar int vertex_indices").map_err(io)?;
    writeln!(w, "end_header").map_err(io)?;
    for (i, p) in vertices.iter().enumerate() {
        let c = colors.map(|c| c[i]);
        match format {
            PlyFormat::Ascii => match c {
                Some([r, g, b]) => writeln!(w, "{} {} {} {r} {g} {b}", p.x, p.y, p.z),
                None => writeln!(w, "{} {} {}", p.x, p.y, p.z),
            }
            .map_err(io)?,
            PlyFormat::BinaryLittleEndian => {
                for v in [p.x, p.y, p.z] {
                    w.write_all(&v.to_le_bytes()).map_err(io)?;
                }
                if let Some(rgb) = c {
                    w.write_all(&rgb).map_err(io)?;
                }
            }
        }
    }
    for t in triangles {
        match format {
            PlyFormat::Ascii => writeln!(w, "3 {} {} {}", t[0], t[1], t[2]).map_err(io)?,
            PlyFormat::BinaryLittleEndian => {
                w.write_all(&[3u8]).map_err(io)?;
                for &i in t {
                    w.write_all(&(i as i32).to_le_bytes()).map_err(io)?;
                }
            }
        }
    }
    w.flush().map_err(io)
}
