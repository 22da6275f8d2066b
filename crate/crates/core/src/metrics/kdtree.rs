use crate::geometry::{dot, sub, Vec3};

#[derive(Debug, Clone)]
struct Node {
    point: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

/// Balanced 3-d tree for exact Euclidean nearest-neighbour queries.
#[derive(Debug, Clone)]
pub struct NearestNeighborIndex {
    points: Vec<Vec3>,
    nodes: Vec<Node>,
    root: Option<usize>,
}

impl NearestNeighborIndex {
    /// Builds the tree by recursive median splits on the widest axis.
    pub fn build(points: &[Vec3]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::with_capacity(points.len());
        let root = build_rec(points, &mut order, &mut nodes);
        NearestNeighborIndex { points: points.to_vec(), nodes, root }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> Vec3 {
        self.points[i]
    }

    /// Index of and distance to the nearest stored point, or `None` when the
    /// index is empty.
    pub fn nearest(&self, q: Vec3) -> Option<(usize, f64)> {
        let root = self.root?;
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(root, q, &mut best);
        Some((best.0, best.1.sqrt()))
    }

    fn search(&self, node: usize, q: Vec3, best: &mut (usize, f64)) {
        let n = &self.nodes[node];
        let p = self.points[n.point];
        let d = sub(q, p);
        let d2 = dot(d, d);
        if d2 < best.1 || (d2 == best.1 && n.point < best.0) {
            *best = (n.point, d2);
        }
        let diff = q[n.axis] - p[n.axis];
        let (near, far) = if diff < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        if let Some(c) = near {
            self.search(c, q, best);
        }
        if let Some(c) = far {
            if diff * diff <= best.1 {
                self.search(c, q, best);
            }
        }
    }
}

fn build_rec(points: &[Vec3], order: &mut [usize], nodes: &mut Vec<Node>) -> Option<usize> {
    if order.is_empty() {
        return None;
    }
    let axis = widest_axis(points, order);
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
    let id = nodes.len();
    nodes.push(Node { point: order[mid], axis, left: None, right: None });
    let (lo, rest) = order.split_at_mut(mid);
    let left = build_rec(points, lo, nodes);
    let right = build_rec(points, &mut rest[1..], nodes);
    nodes[id].left = left;
    nodes[id].right = right;
    Some(id)
}

fn widest_axis(points: &[Vec3], order: &[usize]) -> usize {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in order {
        for a in 0..3 {
            lo[a] = lo[a].min(points[i][a]);
            hi[a] = hi[a].max(points[i][a]);
        }
    }
    (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b]))).unwrap_or(0)
}
