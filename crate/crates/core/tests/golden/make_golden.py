"""Regenerates room.pgm and room.yaml for the acceptance format test.

Standalone rasteriser for the synthetic room cloud: 4 m x 3 m floor with an
unobserved corner, perimeter walls sampled up to 2 m and a table top at 1 m.
Floor band |z - 0| <= 0.5, obstacle slice |z - 1| <= 0.2, 5 cm cells,
obstacles win, row 0 is the largest y.
"""
import math
import pathlib

RES = 0.05
X0, Y0 = -1.3, 2.7
NX, NY = 80, 60


def room_cloud():
    pts = []
    for j in range(NY):
        for i in range(NX):
            if i < 10 and j < 10:
                continue
            pts.append((X0 + (i + 0.5) * RES, Y0 + (j + 0.5) * RES, 0.0))
    for k in range(21):
        z = k * 0.1
        for i in range(NX + 1):
            pts.append((X0 + i * RES, Y0, z))
            pts.append((X0 + i * RES, Y0 + NY * RES, z))
        for j in range(1, NY):
            pts.append((X0, Y0 + j * RES, z))
            pts.append((X0 + NX * RES, Y0 + j * RES, z))
    for j in range(11):
        for i in range(11):
            pts.append((X0 + (40 + i) * RES, Y0 + (20 + j) * RES, 1.0))
    return pts


def rasterise(pts, floor_z=0.0):
    lox = min(p[0] for p in pts)
    loy = min(p[1] for p in pts)
    hix = max(p[0] for p in pts)
    hiy = max(p[1] for p in pts)
    w = math.floor((hix - lox) / RES) + 1
    h = math.floor((hiy - loy) / RES) + 1
    cells = [205] * (w * h)
    for x, y, z in pts:
        occ = abs(z - (floor_z + 1.0)) <= 0.2
        free = abs(z - floor_z) <= 0.5
        if not (occ or free):
            continue
        cx = min(math.floor((x - lox) / RES), w - 1)
        cy = min(math.floor((y - loy) / RES), h - 1)
        idx = (h - 1 - cy) * w + cx
        if occ:
            cells[idx] = 0
        elif cells[idx] == 205:
            cells[idx] = 254
    return w, h, lox, loy, bytes(cells)


def main():
    out = pathlib.Path(__file__).resolve().parent
    w, h, lox, loy, cells = rasterise(room_cloud())
    (out / "room.pgm").write_bytes(b"P5\n%d %d\n255\n" % (w, h) + cells)
    yaml = (
        "image: room.pgm\n"
        "resolution: %.6f\n"
        "origin: [%.6f, %.6f, %.6f]\n"
        "negate: 0\n"
        "occupied_thresh: 0.65\n"
        "free_thresh: 0.196\n\n" % (RES, lox, loy, 0.0)
    )
    (out / "room.yaml").write_text(yaml)


if __name__ == "__main__":
    main()
