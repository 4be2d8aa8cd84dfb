//! Exact k-nearest-neighbor search with a kd-tree.
//!
//! Distance ties break toward the lower reference index, which makes results
//! comparable index-for-index with a brute-force scan.

use crate::math::{self, Vec3};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    /// Euclidean distance (not squared).
    pub dist: f64,
}

struct Node {
    /// Splitting axis; points in [start, end) sorted ranges live in leaves.
    axis: usize,
    split: f64,
    left: usize,
    right: usize,
    /// Leaf payload: range into `order`.
    range: Option<(usize, usize)>,
}

pub struct KdTree {
    points: Vec<Vec3>,
    order: Vec<u32>,
    nodes: Vec<Node>,
    root: usize,
}

const LEAF_SIZE: usize = 16;

impl KdTree {
    pub fn build(points: &[Vec3]) -> KdTree {
        assert!(!points.is_empty());
        let mut tree = KdTree {
            points: points.to_vec(),
            order: (0..points.len() as u32).collect(),
            nodes: Vec::new(),
            root: 0,
        };
        let n = points.len();
        tree.root = tree.build_node(0, n);
        tree
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node {
                axis: 0,
                split: 0.0,
                left: usize::MAX,
                right: usize::MAX,
                range: Some((start, end)),
            });
            return self.nodes.len() - 1;
        }
        // split on the widest axis at the median
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            let p = self.points[i as usize];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).partial_cmp(&(hi[b] - lo[b])).unwrap())
            .unwrap();
        let mid = (start + end) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            (points[a as usize][axis], a)
                .partial_cmp(&(points[b as usize][axis], b))
                .unwrap()
        });
        let split = self.points[self.order[mid] as usize][axis];
        let node_idx = self.nodes.len();
        self.nodes.push(Node {
            axis,
            split,
            left: usize::MAX,
            right: usize::MAX,
            range: None,
        });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[node_idx].left = left;
        self.nodes[node_idx].right = right;
        node_idx
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Exact k nearest neighbors sorted by (distance, index).
    pub fn knn(&self, query: Vec3, k: usize) -> Vec<Neighbor> {
        let k = k.min(self.points.len());
        if k == 0 {
            return Vec::new();
        }
        // bounded worst-first list; (d2, index) lexicographic order
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        self.search(self.root, query, k, &mut best);
        best.into_iter()
            .map(|(d2, index)| Neighbor {
                index,
                dist: d2.sqrt(),
            })
            .collect()
    }

    /// Nearest single neighbor.
    pub fn nearest(&self, query: Vec3) -> Neighbor {
        self.knn(query, 1)[0]
    }

    fn search(&self, node_idx: usize, query: Vec3, k: usize, best: &mut Vec<(f64, usize)>) {
        let node = &self.nodes[node_idx];
        if let Some((start, end)) = node.range {
            for &i in &self.order[start..end] {
                let cand = (math::dist2(query, self.points[i as usize]), i as usize);
                if best.len() < k {
                    let pos = best.partition_point(|&b| b < cand);
                    best.insert(pos, cand);
                } else if cand < best[k - 1] {
                    let pos = best.partition_point(|&b| b < cand);
                    best.insert(pos, cand);
                    best.pop();
                }
            }
            return;
        }
        let delta = query[node.axis] - node.split;
        let (near, far) = if delta < 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        self.search(near, query, k, best);
        // visit the far side unless it provably cannot contain a better
        // candidate; equality must still be visited because a tied distance
        // can win on index
        if best.len() < k || delta * delta <= best[k - 1].0 {
            self.search(far, query, k, best);
        }
    }

    /// All reference indices within `radius` of the query (unsorted).
    pub fn within_radius(&self, query: Vec3, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        let r2 = radius * radius;
        self.radius_search(self.root, query, r2, radius, &mut out);
        out
    }

    fn radius_search(&self, node_idx: usize, query: Vec3, r2: f64, r: f64, out: &mut Vec<usize>) {
        let node = &self.nodes[node_idx];
        if let Some((start, end)) = node.range {
            for &i in &self.order[start..end] {
                if math::dist2(query, self.points[i as usize]) <= r2 {
                    out.push(i as usize);
                }
            }
            return;
        }
        let delta = query[node.axis] - node.split;
        if delta - r <= 0.0 {
            self.radius_search(node.left, query, r2, r, out);
        }
        if delta + r >= 0.0 {
            self.radius_search(node.right, query, r2, r, out);
        }
    }
}
