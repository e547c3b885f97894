//! Exact k-d tree over points of any fixed dimension.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Vector3;

use crate::error::{Error, Result};

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance_squared: f64,
}

impl Neighbor {
    pub fn distance(&self) -> f64 {
        self.distance_squared.sqrt()
    }
}

// Max-heap ordering by (distance, index) so that ties resolve to the lowest index.
#[derive(PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0
            .total_cmp(&other.0)
            .then_with(|| self.1.cmp(&other.1))
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    // coordinates stored in leaf order; `order[k]` is the caller index of slot k
    data: Vec<f64>,
    order: Vec<usize>,
    slot: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    /// Builds a tree over `data`, a row-major array of `dim`-dimensional points.
    pub fn build(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if data.len() % dim != 0 {
            return Err(Error::InvalidParameter(format!(
                "data length {} is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        let n = data.len() / dim;
        let mut tree = KdTree {
            dim,
            data,
            order: (0..n).collect(),
            slot: Vec::new(),
            nodes: Vec::with_capacity(2 * n / LEAF_SIZE + 1),
        };
        tree.build_node(0, n);
        let mut sorted = Vec::with_capacity(tree.data.len());
        for &i in &tree.order {
            sorted.extend_from_slice(&tree.data[i * dim..(i + 1) * dim]);
        }
        tree.data = sorted;
        tree.slot = vec![0; n];
        for (k, &i) in tree.order.iter().enumerate() {
            tree.slot[i] = k;
        }
        Ok(tree)
    }

    fn coord(&self, index: usize, d: usize) -> f64 {
        self.data[index * self.dim + d]
    }

    pub fn point(&self, index: usize) -> &[f64] {
        self.at(self.slot[index])
    }

    fn at(&self, slot: usize) -> &[f64] {
        &self.data[slot * self.dim..(slot + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        // split along the axis of largest spread
        let mut best_dim = 0;
        let mut best_spread = -1.0;
        for d in 0..self.dim {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &i in &self.order[start..end] {
                let v = self.coord(i, d);
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if hi - lo > best_spread {
                best_spread = hi - lo;
                best_dim = d;
            }
        }
        if best_spread <= 0.0 {
            // all points coincide
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let dim = self.dim;
        let data = &self.data;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            data[a * dim + best_dim].total_cmp(&data[b * dim + best_dim])
        });
        let value = self.coord(self.order[mid], best_dim);
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            dim: best_dim,
            value,
            left,
            right,
        };
        id
    }

    fn dist2(&self, slot: usize, q: &[f64]) -> f64 {
        self.at(slot)
            .iter()
            .zip(q)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// The `k` nearest points, sorted by increasing distance (ties by index).
    pub fn knn(&self, q: &[f64], k: usize) -> Vec<Neighbor> {
        debug_assert_eq!(q.len(), self.dim);
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_node(0, q, k, &mut heap);
        let mut out: Vec<Neighbor> = heap
            .into_iter()
            .map(|HeapItem(d, i)| Neighbor {
                index: i,
                distance_squared: d,
            })
            .collect();
        sort_neighbors(&mut out);
        out
    }

    fn knn_node(&self, node: usize, q: &[f64], k: usize, heap: &mut BinaryHeap<HeapItem>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for s in start..end {
                    let item = HeapItem(self.dist2(s, q), self.order[s]);
                    if heap.len() < k {
                        heap.push(item);
                    } else if item < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(item);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.knn_node(near, q, k, heap);
                let worst = heap.peek().map_or(f64::INFINITY, |h| h.0);
                if heap.len() < k || diff * diff <= worst {
                    self.knn_node(far, q, k, heap);
                }
            }
        }
    }

    pub fn nearest(&self, q: &[f64]) -> Neighbor {
        self.nearest_within(q, f64::INFINITY)
            .expect("tree is non-empty")
    }

    /// Nearest point no farther than `r`, ties by index.
    pub fn nearest_within(&self, q: &[f64], r: f64) -> Option<Neighbor> {
        let mut best = (r * r, usize::MAX);
        self.nearest_node(0, q, &mut best);
        (best.1 != usize::MAX).then_some(Neighbor {
            index: best.1,
            distance_squared: best.0,
        })
    }

    fn nearest_node(&self, node: usize, q: &[f64], best: &mut (f64, usize)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for s in start..end {
                    let (i, d) = (self.order[s], self.dist2(s, q));
                    if d < best.0 || (d == best.0 && i < best.1) {
                        *best = (d, i);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.nearest_node(near, q, best);
                if diff * diff <= best.0 {
                    self.nearest_node(far, q, best);
                }
            }
        }
    }

    /// All points within Euclidean distance `r` (inclusive), sorted by distance.
    pub fn radius(&self, q: &[f64], r: f64) -> Vec<Neighbor> {
        let mut out = Vec::new();
        if r < 0.0 {
            return out;
        }
        self.radius_node(0, q, r * r, &mut out);
        sort_neighbors(&mut out);
        out
    }

    fn radius_node(&self, node: usize, q: &[f64], r2: f64, out: &mut Vec<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for s in start..end {
                    let (i, d) = (self.order[s], self.dist2(s, q));
                    if d <= r2 {
                        out.push(Neighbor {
                            index: i,
                            distance_squared: d,
                        });
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.radius_node(near, q, r2, out);
                if diff * diff <= r2 {
                    self.radius_node(far, q, r2, out);
                }
            }
        }
    }
}

fn sort_neighbors(v: &mut [Neighbor]) {
    v.sort_by(|a, b| {
        a.distance_squared
            .total_cmp(&b.distance_squared)
            .then_with(|| a.index.cmp(&b.index))
    });
}

/// Spatial index over 3-D points.
#[derive(Debug, Clone)]
pub struct NnIndex {
    tree: KdTree,
}

impl NnIndex {
    pub fn build(points: &[Vector3<f64>]) -> Result<Self> {
        let data = points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        Ok(Self {
            tree: KdTree::build(3, data)?,
        })
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    pub fn point(&self, index: usize) -> Vector3<f64> {
        let p = self.tree.point(index);
        Vector3::new(p[0], p[1], p[2])
    }

    pub fn knn(&self, q: &Vector3<f64>, k: usize) -> Vec<Neighbor> {
        self.tree.knn(q.as_slice(), k)
    }

    pub fn nearest(&self, q: &Vector3<f64>) -> Neighbor {
        self.tree.nearest(q.as_slice())
    }

    pub fn radius(&self, q: &Vector3<f64>, r: f64) -> Vec<Neighbor> {
        self.tree.radius(q.as_slice(), r)
    }

    pub fn nearest_within(&self, q: &Vector3<f64>, r: f64) -> Option<Neighbor> {
        self.tree.nearest_within(q.as_slice(), r)
    }
}
