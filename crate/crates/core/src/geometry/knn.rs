use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use super::cloud::{PointCloud, Vec3};
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 16;

/// Candidate ordered by (squared distance, index); the heap top is the worst.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    idx: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then_with(|| self.idx.cmp(&other.idx))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Static 3-d tree over a borrowed point set.
#[derive(Debug)]
pub struct KdTree<'a> {
    points: &'a [Vec3],
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [Vec3]) -> Self {
        let mut tree = Self {
            points,
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let axis = (hi - lo).imax();
        if hi[axis] - lo[axis] <= 0.0 {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let points = self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis])
        });
        let value = points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// The `k` nearest points to `q` ordered by (distance, index), skipping `exclude`.
    pub fn knn(&self, q: &Vec3, k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, q, k, exclude, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.idx, c.d2.sqrt())).collect()
    }

    pub fn nearest(&self, q: &Vec3) -> Option<usize> {
        self.knn(q, 1, None).first().map(|&(i, _)| i)
    }

    fn search(
        &self,
        node: usize,
        q: &Vec3,
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let c = Candidate {
                        d2: (self.points[i] - q).norm_squared(),
                        idx: i,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, exclude, heap);
                // Equal-distance candidates may still win on index, so only strictly farther planes are pruned.
                if heap.len() < k || diff * diff <= heap.peek().unwrap().d2 {
                    self.search(far, q, k, exclude, heap);
                }
            }
        }
    }
}

/// k-nearest-neighbor lists for every point, excluding the point itself.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    k: usize,
    row_len: usize,
    indices: Vec<usize>,
    distances: Vec<f64>,
}

impl NeighborGraph {
    /// Requested k; rows hold `min(k, n - 1)` entries.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row_len(&self) -> usize {
        self.row_len
    }

    pub fn len(&self) -> usize {
        if self.row_len == 0 {
            0
        } else {
            self.indices.len() / self.row_len
        }
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.indices[i * self.row_len..(i + 1) * self.row_len]
    }

    pub fn distances(&self, i: usize) -> &[f64] {
        &self.distances[i * self.row_len..(i + 1) * self.row_len]
    }
}

/// Exact kNN graph. Ties in distance are broken by the lower point index.
pub fn knn_graph(cloud: &PointCloud, k: usize) -> Result<NeighborGraph> {
    let n = cloud.len();
    if n < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: n });
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let row_len = k.min(n - 1);
    let tree = KdTree::new(cloud.positions());
    let rows: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| tree.knn(&cloud.position(i), row_len, Some(i)))
        .collect();
    let mut indices = Vec::with_capacity(n * row_len);
    let mut distances = Vec::with_capacity(n * row_len);
    for row in rows {
        for (j, d) in row {
            indices.push(j);
            distances.push(d);
        }
    }
    Ok(NeighborGraph {
        k,
        row_len,
        indices,
        distances,
    })
}
