//! The symmetric Chamfer functional, its batch gradient, and the exact
//! nearest-neighbor engine shared by both refinement levels.

use ndarray::{Array2, ArrayView1};

use crate::error::{BcrError, Result};

/// A finite point multiset in representation space. The spatial index is
/// exact: with or without it, lookups return bit-identical results.
#[derive(Debug, Clone)]
pub struct PointSet {
    points: Array2<f64>,
    index: Option<KdTree>,
}

const KDTREE_MAX_DIM: usize = 16;
const KDTREE_MIN_POINTS: usize = 256;

impl PointSet {
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(BcrError::Empty("point set must contain at least one point".into()));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(BcrError::numeric("point set contains non-finite entries"));
        }
        let index = if points.ncols() <= KDTREE_MAX_DIM && points.nrows() >= KDTREE_MIN_POINTS {
            Some(KdTree::build(&points))
        } else {
            None
        };
        Ok(PointSet { points, index })
    }

    /// Brute-force-only construction, used by the index-equivalence tests.
    pub fn new_unindexed(points: Array2<f64>) -> Result<Self> {
        let mut ps = PointSet::new(points)?;
        ps.index = None;
        Ok(ps)
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    /// Euclidean nearest neighbor; ties broken by lowest index.
    pub fn nearest(&self, query: ArrayView1<f64>) -> Result<(usize, f64)> {
        if query.len() != self.dim() {
            return Err(BcrError::DimMismatch { expected: self.dim(), got: query.len() });
        }
        let (idx, d2) = match &self.index {
            Some(tree) => tree.nearest(&self.points, query),
            None => brute_nearest(&self.points, query),
        };
        Ok((idx, d2.sqrt()))
    }
}

fn dist_sq(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

fn brute_nearest(points: &Array2<f64>, query: ArrayView1<f64>) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_d2 = f64::INFINITY;
    for (i, row) in points.rows().into_iter().enumerate() {
        let d2 = dist_sq(row, query);
        if d2 < best_d2 {
            best_d2 = d2;
            best = i;
        }
    }
    (best, best_d2)
}

#[derive(Debug, Clone)]
struct KdNode {
    axis: usize,
    split: f64,
    point: usize,
    left: Option<Box<KdNode>>,
    right: Option<Box<KdNode>>,
}

#[derive(Debug, Clone)]
struct KdTree {
    root: Option<Box<KdNode>>,
}

impl KdTree {
    fn build(points: &Array2<f64>) -> Self {
        let mut idx: Vec<usize> = (0..points.nrows()).collect();
        let root = Self::build_node(points, &mut idx, 0);
        KdTree { root }
    }

    fn build_node(points: &Array2<f64>, idx: &mut [usize], depth: usize) -> Option<Box<KdNode>> {
        if idx.is_empty() {
            return None;
        }
        let axis = depth % points.ncols();
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| {
            points[[a, axis]]
                .partial_cmp(&points[[b, axis]])
                .unwrap()
                .then(a.cmp(&b))
        });
        let point = idx[mid];
        let split = points[[point, axis]];
        let (left_idx, rest) = idx.split_at_mut(mid);
        let right_idx = &mut rest[1..];
        Some(Box::new(KdNode {
            axis,
            split,
            point,
            left: Self::build_node(points, left_idx, depth + 1),
            right: Self::build_node(points, right_idx, depth + 1),
        }))
    }

    fn nearest(&self, points: &Array2<f64>, query: ArrayView1<f64>) -> (usize, f64) {
        let mut best = usize::MAX;
        let mut best_d2 = f64::INFINITY;
        if let Some(root) = &self.root {
            Self::search(root, points, query, &mut best, &mut best_d2);
        }
        (best, best_d2)
    }

    fn search(
        node: &KdNode,
        points: &Array2<f64>,
        query: ArrayView1<f64>,
        best: &mut usize,
        best_d2: &mut f64,
    ) {
        let d2 = dist_sq(points.row(node.point), query);
        if d2 < *best_d2 || (d2 == *best_d2 && node.point < *best) {
            *best_d2 = d2;
            *best = node.point;
        }
        let diff = query[node.axis] - node.split;
        let (near, far) = if diff < 0.0 {
            (&node.left, &node.right)
        } else {
            (&node.right, &node.left)
        };
        if let Some(n) = near {
            Self::search(n, points, query, best, best_d2);
        }
        // Visit the far side on equality too, so the lowest-index tie rule
        // matches brute force exactly.
        if let Some(f) = far {
            if diff * diff <= *best_d2 {
                Self::search(f, points, query, best, best_d2);
            }
        }
    }
}

/// Fidelity (A-to-B) and coverage (B-to-A) terms of the symmetric Chamfer
/// functional, plus their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChamferBreakdown {
    pub fidelity: f64,
    pub coverage: f64,
    pub total: f64,
}

/// C(A, B) = mean_a min_b ||a - b|| + mean_b min_a ||a - b||.
pub fn chamfer(a: &PointSet, b: &PointSet) -> Result<ChamferBreakdown> {
    if a.dim() != b.dim() {
        return Err(BcrError::DimMismatch { expected: a.dim(), got: b.dim() });
    }
    let mut fidelity = 0.0;
    for row in a.points().rows() {
        fidelity += b.nearest(row)?.1;
    }
    fidelity /= a.len() as f64;

    let mut coverage = 0.0;
    for row in b.points().rows() {
        coverage += a.nearest(row)?.1;
    }
    coverage /= b.len() as f64;

    Ok(ChamferBreakdown { fidelity, coverage, total: fidelity + coverage })
}

/// Per-point Jacobian supplier for a non-identity representation map:
/// given the index of a point of A, returns the d x D Jacobian of the map
/// at that point's pre-image.
pub type JacobianSupplier<'a> = dyn Fn(usize) -> Array2<f64> + 'a;

/// Subgradient of `chamfer(a, b).total` with respect to the pre-map
/// coordinates of A, holding argmin matches fixed. Contributions at zero
/// pairwise distance are the zero vector.
pub fn chamfer_grad(
    a: &PointSet,
    b: &PointSet,
    phi_jacobian: Option<&JacobianSupplier>,
    pre_dim: usize,
) -> Result<Array2<f64>> {
    if a.dim() != b.dim() {
        return Err(BcrError::DimMismatch { expected: a.dim(), got: b.dim() });
    }
    if phi_jacobian.is_none() && pre_dim != a.dim() {
        return Err(BcrError::DimMismatch { expected: a.dim(), got: pre_dim });
    }
    let n = a.len();
    let d = a.dim();
    // Gradient in phi-space first, then chain through the Jacobian per point.
    let mut phi_grad = Array2::<f64>::zeros((n, d));

    let inv_n = 1.0 / n as f64;
    for (i, row) in a.points().rows().into_iter().enumerate() {
        let (j, dist) = b.nearest(row)?;
        if dist > 0.0 {
            for k in 0..d {
                phi_grad[[i, k]] += inv_n * (row[k] - b.points()[[j, k]]) / dist;
            }
        }
    }
    let inv_m = 1.0 / b.len() as f64;
    for row_b in b.points().rows() {
        let (i, dist) = a.nearest(row_b)?;
        if dist > 0.0 {
            for k in 0..d {
                phi_grad[[i, k]] += inv_m * (a.points()[[i, k]] - row_b[k]) / dist;
            }
        }
    }

    match phi_jacobian {
        None => Ok(phi_grad),
        Some(supplier) => {
            let mut out = Array2::<f64>::zeros((n, pre_dim));
            for i in 0..n {
                let jac = supplier(i); // d x pre_dim
                if jac.nrows() != d || jac.ncols() != pre_dim {
                    return Err(BcrError::DimMismatch { expected: d * pre_dim, got: jac.len() });
                }
                for k in 0..pre_dim {
                    let mut acc = 0.0;
                    for r in 0..d {
                        acc += phi_grad[[i, r]] * jac[[r, k]];
                    }
                    out[[i, k]] = acc;
                }
            }
            Ok(out)
        }
    }
}
