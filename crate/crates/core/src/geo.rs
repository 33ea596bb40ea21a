//! Ball-query neighborhood search, multi-scale geometric features, and the
//! context projector producing the shared context bank.
//!
//! Coordinates are normalized to the unit bounding box of the initial frame
//! before any query, so fixed radii keep their meaning across samples.
//! Anchor selection runs farthest-point sampling over lexicographically
//! sorted coordinates, which makes the context bank invariant to point
//! ordering.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::graph::{Graph, NodeId};
use crate::numcore::nn::{Mlp, ParamStore};
use crate::numcore::tensor::Tensor;
use crate::scalar::Scalar;

/// One crash configuration's initial geometry: positions plus per-point
/// design features.
pub struct PointCloud<T: Scalar> {
    /// `[n x 3]` positions.
    pub positions: Tensor<T>,
    /// `[n x f]` per-point design features (e.g. thickness scale).
    pub features: Tensor<T>,
}

impl<T: Scalar> PointCloud<T> {
    pub fn new(positions: Tensor<T>, features: Tensor<T>) -> Result<Self> {
        let (n, d) = positions.dims2()?;
        if d != 3 || n == 0 {
            return Err(Error::Shape(format!("positions must be [n>=1 x 3], got {n}x{d}")));
        }
        if !positions.is_finite() {
            return Err(Error::Numeric("non-finite point positions".into()));
        }
        if features.dims2()?.0 != n {
            return Err(Error::Shape("feature rows must match point count".into()));
        }
        Ok(PointCloud { positions, features })
    }

    pub fn len(&self) -> usize {
        self.positions.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_width(&self) -> usize {
        self.features.shape()[1]
    }
}

/// Map positions into the unit bounding box: shift the minimum corner to the
/// origin and scale uniformly by the largest extent (shape-preserving).
pub fn unit_box_positions<T: Scalar>(positions: &Tensor<T>) -> Vec<[f64; 3]> {
    let n = positions.shape()[0];
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for i in 0..n {
        for a in 0..3 {
            let v = positions.at2(i, a).to_real();
            lo[a] = lo[a].min(v);
            hi[a] = hi[a].max(v);
        }
    }
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max).max(1e-12);
    (0..n)
        .map(|i| {
            [
                (positions.at2(i, 0).to_real() - lo[0]) / extent,
                (positions.at2(i, 1).to_real() - lo[1]) / extent,
                (positions.at2(i, 2).to_real() - lo[2]) / extent,
            ]
        })
        .collect()
}

/// Capped fixed-radius neighborhoods, one list per point, nearest-first.
pub struct BallQueryResult {
    /// Per point: neighbor indices within the radius, nearest-first,
    /// ties broken by ascending index, at most `cap` entries.
    pub neighbors: Vec<Vec<u32>>,
    pub radius: f64,
    pub cap: usize,
}

impl BallQueryResult {
    pub fn count(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Fixed-radius neighbor search over unit-box coordinates.
///
/// Uses uniform grid hashing with cell size equal to the radius, so only the
/// 27 surrounding cells are scanned per query. The point itself qualifies as
/// a neighbor (distance zero); an isolated point ends up with `{self}`.
pub fn ball_query(points: &[[f64; 3]], radius: f64, cap: usize) -> Result<BallQueryResult> {
    if radius <= 0.0 {
        return Err(Error::Config("ball query radius must be positive".into()));
    }
    if cap < 1 {
        return Err(Error::Config("ball query cap must be at least 1".into()));
    }
    let cell = |p: &[f64; 3]| -> (i64, i64, i64) {
        (
            (p[0] / radius).floor() as i64,
            (p[1] / radius).floor() as i64,
            (p[2] / radius).floor() as i64,
        )
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(cell(p)).or_default().push(i as u32);
    }
    let r2 = radius * radius;
    let mut neighbors = Vec::with_capacity(points.len());
    let mut candidates: Vec<(f64, u32)> = Vec::new();
    for p in points.iter() {
        candidates.clear();
        let (cx, cy, cz) = cell(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = grid.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &j in bucket {
                            let d2 = dist2(p, &points[j as usize]);
                            if d2 <= r2 {
                                candidates.push((d2, j));
                            }
                        }
                    }
                }
            }
        }
        candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite").then(a.1.cmp(&b.1)));
        neighbors.push(candidates.iter().take(cap).map(|&(_, j)| j).collect());
    }
    Ok(BallQueryResult {
        neighbors,
        radius,
        cap,
    })
}

/// Width of the augmented feature vector for `f` raw features and `s` scales:
/// raw position (3) + raw features (f) + per scale (centroid offset 3,
/// mean distance 1, count fraction 1, pooled features f).
pub fn augmented_width(feature_width: usize, num_scales: usize) -> usize {
    3 + feature_width + num_scales * (5 + feature_width)
}

/// Multi-scale geometric feature augmentation.
///
/// For every point and scale: neighbor-centroid offset, mean neighbor
/// distance, neighbor count over cap, and the mean-pooled neighbor feature
/// vector, concatenated after the raw position and features.
pub fn multiscale_features<T: Scalar>(
    cloud: &PointCloud<T>,
    scales: &[(f64, usize)],
) -> Result<Tensor<T>> {
    if scales.is_empty() {
        return Err(Error::Config("need at least one query scale".into()));
    }
    let n = cloud.len();
    let f = cloud.feature_width();
    let unit = unit_box_positions(&cloud.positions);
    let width = augmented_width(f, scales.len());
    let mut out = Tensor::zeros(&[n, width]);
    let queries: Vec<BallQueryResult> = scales
        .iter()
        .map(|&(r, cap)| ball_query(&unit, r, cap))
        .collect::<Result<_>>()?;
    for i in 0..n {
        let row = &mut out.data_mut()[i * width..(i + 1) * width];
        for a in 0..3 {
            row[a] = T::from_real(unit[i][a]);
        }
        for j in 0..f {
            row[3 + j] = cloud.features.at2(i, j);
        }
        let mut off = 3 + f;
        for (q, &(_, cap)) in queries.iter().zip(scales) {
            let nbrs = &q.neighbors[i];
            let count = nbrs.len().max(1) as f64;
            let mut centroid = [0.0f64; 3];
            let mut mean_dist = 0.0f64;
            let mut pooled = vec![0.0f64; f];
            for &jn in nbrs {
                let pj = &unit[jn as usize];
                for a in 0..3 {
                    centroid[a] += pj[a];
                }
                mean_dist += dist2(&unit[i], pj).sqrt();
                for (k, pv) in pooled.iter_mut().enumerate() {
                    *pv += cloud.features.at2(jn as usize, k).to_real();
                }
            }
            for a in 0..3 {
                row[off + a] = T::from_real(centroid[a] / count - unit[i][a]);
            }
            row[off + 3] = T::from_real(mean_dist / count);
            row[off + 4] = T::from_real(nbrs.len() as f64 / cap as f64);
            for (k, pv) in pooled.iter().enumerate() {
                row[off + 5 + k] = T::from_real(pv / count);
            }
            off += 5 + f;
        }
    }
    Ok(out)
}

/// Farthest-point sampling over lexicographically sorted coordinates.
///
/// The walk starts from the lexicographically smallest point (it seeds the
/// distance field but is not itself an anchor) and greedily picks the point
/// farthest from everything selected so far, `count` times. Ties break by
/// ascending sorted position. Returned indices refer to the original point
/// order.
pub fn farthest_point_anchors(points: &[[f64; 3]], count: usize) -> Vec<usize> {
    let n = points.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let pa = &points[a];
        let pb = &points[b];
        pa.partial_cmp(pb).expect("finite coordinates")
    });
    let seed = order[0];
    let mut min_d2: Vec<f64> = order.iter().map(|&i| dist2(&points[i], &points[seed])).collect();
    let mut anchors = Vec::with_capacity(count);
    for _ in 0..count {
        let mut best = 0;
        for (k, &d) in min_d2.iter().enumerate() {
            if d > min_d2[best] {
                best = k;
            }
        }
        let chosen = order[best];
        anchors.push(chosen);
        for (k, d) in min_d2.iter_mut().enumerate() {
            let nd = dist2(&points[order[k]], &points[chosen]);
            if nd < *d {
                *d = nd;
            }
        }
    }
    anchors
}

/// Where a context token came from.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ContextSource {
    Geometry,
    GlobalParams,
    BoundaryCondition,
}

/// Context tokens for one sample, living inside a graph.
pub struct ContextBank {
    pub tokens: NodeId,
    pub provenance: Vec<ContextSource>,
}

/// Encodes geometry anchors, global parameters, and boundary conditions into
/// a bank of `anchors + 2` context tokens shared by every block.
pub struct ContextProjector {
    pub anchor_mlp: Mlp,
    pub globals_mlp: Mlp,
    pub bc_mlp: Mlp,
    pub anchors: usize,
    projections: AtomicUsize,
}

impl ContextProjector {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        augmented_width: usize,
        globals_dim: usize,
        bc_dim: usize,
        channels: usize,
        anchors: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if anchors < 1 {
            return Err(Error::Config("context needs at least one anchor".into()));
        }
        Ok(ContextProjector {
            anchor_mlp: Mlp::new(
                store,
                &format!("{name}.anchor"),
                &[augmented_width, channels, channels],
                rng,
            ),
            globals_mlp: Mlp::new(
                store,
                &format!("{name}.globals"),
                &[globals_dim, channels, channels],
                rng,
            ),
            bc_mlp: Mlp::new(store, &format!("{name}.bc"), &[bc_dim, channels, channels], rng),
            anchors,
            projections: AtomicUsize::new(0),
        })
    }

    /// How many times a context bank has been projected (one per trajectory
    /// forward pass is the contract).
    pub fn projection_count(&self) -> usize {
        self.projections.load(Ordering::Relaxed)
    }

    pub fn reset_projection_count(&self) {
        self.projections.store(0, Ordering::Relaxed);
    }

    /// Build the context bank inside `g` from precomputed augmented features.
    ///
    /// `anchor_rows` must hold the augmented feature rows of the anchors
    /// chosen by [`farthest_point_anchors`]; `globals`/`bc` are `[1 x dim]`.
    pub fn project<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        anchor_rows: &Tensor<T>,
        globals: &Tensor<T>,
        bc: &Tensor<T>,
    ) -> Result<ContextBank> {
        self.projections.fetch_add(1, Ordering::Relaxed);
        let anchor_leaf = g.leaf(anchor_rows.clone());
        let anchor_tokens = self.anchor_mlp.apply(g, store, anchor_leaf)?;
        let g_leaf = g.leaf(globals.clone());
        let g_token = self.globals_mlp.apply(g, store, g_leaf)?;
        let bc_leaf = g.leaf(bc.clone());
        let bc_token = self.bc_mlp.apply(g, store, bc_leaf)?;
        let tokens = g.concat_rows(&[anchor_tokens, g_token, bc_token])?;
        let mut provenance = vec![ContextSource::Geometry; self.anchors];
        provenance.push(ContextSource::GlobalParams);
        provenance.push(ContextSource::BoundaryCondition);
        Ok(ContextBank { tokens, provenance })
    }
}

/// Gather rows of a tensor by index into a new tensor.
pub fn gather_rows<T: Scalar>(t: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
    let (_, c) = t.dims2().expect("2-D");
    let mut out = Tensor::zeros(&[rows.len(), c]);
    for (k, &i) in rows.iter().enumerate() {
        let src = &t.data()[i * c..(i + 1) * c];
        out.data_mut()[k * c..(k + 1) * c].copy_from_slice(src);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud_from(points: &[[f64; 3]]) -> PointCloud<f64> {
        let n = points.len();
        let flat: Vec<f64> = points.iter().flatten().copied().collect();
        PointCloud::new(
            Tensor::from_vec(&[n, 3], flat).unwrap(),
            Tensor::zeros(&[n, 1]),
        )
        .unwrap()
    }

    #[test]
    fn collinear_points_nearest_first_with_self() {
        // already unit-box scale invariant: use raw coords in [0,1]
        let pts = [[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let q = ball_query(&pts, 0.75, 8).unwrap();
        assert_eq!(q.neighbors[1], vec![1, 0, 2]);
    }

    #[test]
    fn huge_radius_reaches_everyone() {
        let pts = [[0.0, 0.0, 0.0], [0.3, 0.1, 0.0], [0.9, 0.4, 0.2], [0.2, 0.8, 0.7]];
        let q = ball_query(&pts, 1e9, 10).unwrap();
        for nb in &q.neighbors {
            assert_eq!(nb.len(), 4);
        }
    }

    #[test]
    fn isolated_point_keeps_itself() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]];
        let q = ball_query(&pts, 0.1, 4).unwrap();
        assert_eq!(q.neighbors[0], vec![0]);
        assert_eq!(q.neighbors[1], vec![1]);
    }

    #[test]
    fn single_point_features_are_degenerate() {
        let cloud = cloud_from(&[[0.3, 0.4, 0.5]]);
        let feats = multiscale_features(&cloud, &[(0.1, 8)]).unwrap();
        let w = augmented_width(1, 1);
        assert_eq!(feats.shape(), &[1, w]);
        // centroid offset zero, mean distance zero, count 1/cap
        assert_eq!(feats.at2(0, 4), 0.0);
        assert_eq!(feats.at2(0, 5), 0.0);
        assert_eq!(feats.at2(0, 6), 0.0);
        assert_eq!(feats.at2(0, 7), 0.0);
        assert!((feats.at2(0, 8) - 1.0 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn two_point_cloud_single_anchor_is_farthest_from_seed() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let anchors = farthest_point_anchors(&pts, 1);
        assert_eq!(anchors, vec![1]);
    }

    #[test]
    fn anchors_invariant_to_permutation() {
        let pts = [
            [0.1, 0.2, 0.3],
            [0.9, 0.1, 0.5],
            [0.4, 0.8, 0.2],
            [0.7, 0.6, 0.9],
            [0.0, 0.5, 0.1],
        ];
        let perm = [3usize, 0, 4, 1, 2];
        let permuted: Vec<[f64; 3]> = perm.iter().map(|&i| pts[i]).collect();
        let a0 = farthest_point_anchors(&pts, 3);
        let a1 = farthest_point_anchors(&permuted, 3);
        // map permuted indices back to original identity
        let a1_orig: Vec<usize> = a1.iter().map(|&i| perm[i]).collect();
        assert_eq!(a0, a1_orig);
    }
}
