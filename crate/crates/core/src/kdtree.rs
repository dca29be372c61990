//! Static 3-d tree for radius and nearest-neighbor queries.

use crate::se3::Vec3;

const LEAF_SIZE: usize = 12;

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

/// Balanced k-d tree over a copy of the input points. Query results refer to
/// indices in the original slice.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut tree = KdTree {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        // Split on the widest extent.
        let (mut lo, mut hi) = (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY));
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let dim = (hi - lo).imax();
        let mid = start + (end - start) / 2;
        let pts = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| pts[a][dim].total_cmp(&pts[b][dim]));
        let value = self.points[self.order[mid]][dim];
        self.nodes.push(Node::Leaf { start, end }); // placeholder
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split {
            dim,
            value,
            left,
            right,
        };
        id
    }

    /// Indices of all points with `|p - q| <= radius`, sorted ascending.
    pub fn within_radius(&self, q: &Vec3, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.within_radius_into(q, radius, &mut out);
        out
    }

    /// Like [`within_radius`](Self::within_radius), reusing `out`.
    pub fn within_radius_into(&self, q: &Vec3, radius: f64, out: &mut Vec<usize>) {
        self.within_radius_unsorted_into(q, radius, out);
        out.sort_unstable();
    }

    /// Radius query in tree order (deterministic for a given tree, but not
    /// sorted by index).
    pub fn within_radius_unsorted_into(&self, q: &Vec3, radius: f64, out: &mut Vec<usize>) {
        out.clear();
        if self.nodes.is_empty() || !(radius >= 0.0) {
            return;
        }
        let r2 = radius * radius;
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            match self.nodes[id] {
                Node::Leaf { start, end } => {
                    for &i in &self.order[start..end] {
                        if (self.points[i] - q).norm_squared() <= r2 {
                            out.push(i);
                        }
                    }
                }
                Node::Split {
                    dim,
                    value,
                    left,
                    right,
                } => {
                    let d = q[dim] - value;
                    if d <= radius {
                        stack.push(left);
                    }
                    if d >= -radius {
                        stack.push(right);
                    }
                }
            }
        }
    }

    /// Number of points with `|p - q| <= radius`.
    pub fn count_within_radius(&self, q: &Vec3, radius: f64) -> usize {
        let mut buf = Vec::new();
        self.within_radius_unsorted_into(q, radius, &mut buf);
        buf.len()
    }

    /// Nearest point as `(index, distance)`; ties go to the lower index.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.nearest_rec(0, q, &mut best);
        Some((best.0, best.1.sqrt()))
    }

    fn nearest_rec(&self, id: usize, q: &Vec3, best: &mut (usize, f64)) {
        match self.nodes[id] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d2 = (self.points[i] - q).norm_squared();
                    if d2 < best.1 || (d2 == best.1 && i < best.0) {
                        *best = (i, d2);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let d = q[dim] - value;
                let (near, far) = if d <= 0.0 { (left, right) } else { (right, left) };
                self.nearest_rec(near, q, best);
                if d * d <= best.1 {
                    self.nearest_rec(far, q, best);
                }
            }
        }
    }
}
