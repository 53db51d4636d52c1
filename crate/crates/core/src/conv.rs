//! Rigid kernel point convolution with per-kernel outputs, the kernel
//! attention gate, and the focused variant (plain and strided) built from
//! both.
//!
//! Geometry (kernel dispositions, correlations) is computed outside the
//! autodiff graph; only features and weights are differentiated.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph, Value};
use crate::spatial::NeighborTable;
use crate::{Error, Result};

/// Offset placed in shadow slots of relative-position tables; far enough
/// that every kernel correlation evaluates to exactly zero.
pub const SHADOW_OFFSET: f64 = 1e9;

/// Fixed kernel point geometry for one convolution.
#[derive(Clone, Debug)]
pub struct KernelDisposition {
    /// K offsets in meters, point 0 at the origin.
    pub kernel_points: Vec<[f64; 3]>,
    pub kernel_radius: f64,
    /// Influence distance of each kernel point (sigma).
    pub influence: f64,
    pub seed: u64,
}

/// Place K kernel points inside a ball: point 0 pinned at the origin, the
/// rest spread by seeded repulsive relaxation (inverse-square pairwise
/// repulsion, radial clamp, 100 iterations, step decay 0.99).
///
/// Relaxation runs on the unit ball and is scaled by `kernel_radius`
/// afterwards, so dispositions at different radii share the same shape.
pub fn make_disposition(k: usize, kernel_radius: f64, seed: u64) -> Result<KernelDisposition> {
    if k < 2 {
        return Err(Error::Config(format!("kernel point count must be at least 2, got {}", k)));
    }
    if kernel_radius <= 0.0 {
        return Err(Error::Config(format!("kernel radius must be positive, got {}", kernel_radius)));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut pts = vec![[0.0f64; 3]; k];
    for p in pts.iter_mut().skip(1) {
        // Rejection sample the unit ball.
        loop {
            let c = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let n2: f64 = c.iter().map(|v| v * v).sum();
            if n2 <= 1.0 && n2 > 1e-4 {
                *p = c;
                break;
            }
        }
    }
    let mut step = 0.02;
    for _ in 0..100 {
        let mut forces = vec![[0.0f64; 3]; k];
        for i in 1..k {
            for j in 0..k {
                if i == j {
                    continue;
                }
                let d = [
                    pts[i][0] - pts[j][0],
                    pts[i][1] - pts[j][1],
                    pts[i][2] - pts[j][2],
                ];
                let n2: f64 = d.iter().map(|v| v * v).sum::<f64>().max(1e-6);
                let inv = 1.0 / (n2 * n2.sqrt());
                for a in 0..3 {
                    forces[i][a] += d[a] * inv;
                }
            }
        }
        for i in 1..k {
            let mut disp = [forces[i][0] * step, forces[i][1] * step, forces[i][2] * step];
            let dn: f64 = disp.iter().map(|v| v * v).sum::<f64>().sqrt();
            if dn > 0.1 {
                for a in &mut disp {
                    *a *= 0.1 / dn;
                }
            }
            for a in 0..3 {
                pts[i][a] += disp[a];
            }
            let n: f64 = pts[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1.0 {
                for a in &mut pts[i] {
                    *a /= n;
                }
            }
        }
        step *= 0.99;
    }
    for p in &mut pts {
        for a in p.iter_mut() {
            *a *= kernel_radius;
        }
    }
    Ok(KernelDisposition {
        kernel_points: pts,
        kernel_radius,
        influence: kernel_radius / 2.0,
        seed,
    })
}

/// Neighbor-minus-query offsets as an `[M, H, 3]` array; shadow slots carry
/// [`SHADOW_OFFSET`] so their correlations vanish.
pub fn relative_positions(
    queries: &[[f64; 3]],
    supports: &[[f64; 3]],
    table: &NeighborTable,
) -> Array {
    let mut data = vec![SHADOW_OFFSET; table.rows * table.width * 3];
    for r in 0..table.rows {
        for (slot, &idx) in table.row(r).iter().enumerate() {
            if idx != table.shadow {
                let s = &supports[idx as usize];
                let q = &queries[r];
                let base = (r * table.width + slot) * 3;
                data[base] = s[0] - q[0];
                data[base + 1] = s[1] - q[1];
                data[base + 2] = s[2] - q[2];
            }
        }
    }
    Array::from_vec(vec![table.rows, table.width, 3], data)
}

/// Linear correlation of each offset with each kernel point:
/// `h = max(0, 1 - dist / influence)`; output `[M, H, K]`.
pub fn kp_correlation(rel: &Array, disp: &KernelDisposition) -> Array {
    let shape = rel.shape();
    assert_eq!(shape.len(), 3);
    assert_eq!(shape[2], 3);
    let (m, h) = (shape[0], shape[1]);
    let k = disp.kernel_points.len();
    let inv = 1.0 / disp.influence;
    let rd = rel.data();
    let mut out = vec![0.0; m * h * k];
    for slot in 0..m * h {
        let o = &rd[slot * 3..slot * 3 + 3];
        for (ki, kp) in disp.kernel_points.iter().enumerate() {
            let dx = o[0] - kp[0];
            let dy = o[1] - kp[1];
            let dz = o[2] - kp[2];
            let d = (dx * dx + dy * dy + dz * dz).sqrt();
            let c = 1.0 - d * inv;
            if c > 0.0 {
                out[slot * k + ki] = c;
            }
        }
    }
    Array::from_vec(vec![m, h, k], out)
}

/// Attention MLP weights bound into a graph for one pass.
#[derive(Clone, Copy, Debug)]
pub struct AttentionMlp {
    pub w1: Value,
    pub b1: Value,
    pub w2: Value,
    pub b2: Value,
}

/// FKP weights bound into a graph for one pass. `per_kernel` is
/// `[K, D_in, D_out]`; attention is absent when the convolution runs as a
/// plain kernel point convolution.
#[derive(Clone, Copy, Debug)]
pub struct FkpWeights {
    pub per_kernel: Value,
    pub attention: Option<AttentionMlp>,
}

/// Which pooled maps feed the attention gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    None,
    MaxOnly,
    MeanOnly,
    MaxMean,
}

impl AttentionMode {
    /// Attention MLP input width for feature width d.
    pub fn input_width(self, d: usize) -> usize {
        match self {
            AttentionMode::MaxMean => 2 * d,
            _ => d,
        }
    }
}

/// Per-kernel convolution: `F[k,m] = sum_j h[m,j,k] * (x_j @ W_k)`,
/// shadow neighbors contributing nothing. Output `[K, M, D_out]`.
pub fn per_kernel_conv(
    g: &mut Graph,
    features: Value,
    table: &NeighborTable,
    correlations: Rc<Array>,
    per_kernel_weights: Value,
) -> Result<Value> {
    let ws = g.shape(per_kernel_weights).to_vec();
    if ws.len() != 3 {
        return Err(Error::Dim(format!("per-kernel weights must be [K,D_in,D_out], got {:?}", ws)));
    }
    let cs = correlations.shape();
    if cs.len() != 3 || cs[0] != table.rows || cs[1] != table.width || cs[2] != ws[0] {
        return Err(Error::Dim(format!(
            "correlations {:?} inconsistent with table {}x{} and {} kernels",
            cs, table.rows, table.width, ws[0]
        )));
    }
    let fs = g.shape(features).to_vec();
    if fs.len() != 2 || fs[1] != ws[1] {
        return Err(Error::Dim(format!(
            "features {:?} inconsistent with weight input width {}",
            fs, ws[1]
        )));
    }
    let gathered = g.gather_rows(features, &table.as_index_table())?;
    let summed = g.kernel_weighted_sum(gathered, correlations)?;
    g.batched_matmul(summed, per_kernel_weights)
}

/// Attention gate over per-kernel outputs `F: [K, M, D]`: pool over the
/// kernel axis, run the shared two-layer MLP, squash with a sigmoid.
/// Output `[M, D]`, entries strictly inside (0, 1).
pub fn kernel_attention(
    g: &mut Graph,
    f: Value,
    mlp: &AttentionMlp,
    mode: AttentionMode,
) -> Result<Value> {
    if mode == AttentionMode::None {
        return Err(Error::Config("kernel_attention called with attention disabled".into()));
    }
    let fs = g.shape(f).to_vec();
    if fs.len() != 3 {
        return Err(Error::Dim(format!("attention input must be [K,M,D], got {:?}", fs)));
    }
    let pooled = match mode {
        AttentionMode::MaxOnly => g.max(f, 0)?,
        AttentionMode::MeanOnly => g.mean(f, 0)?,
        AttentionMode::MaxMean => {
            let f_mean = g.mean(f, 0)?;
            let f_max = g.max(f, 0)?;
            g.concat(&[f_mean, f_max], 1)?
        }
        AttentionMode::None => unreachable!(),
    };
    let h1 = g.matmul(pooled, mlp.w1)?;
    let h1 = g.add(h1, mlp.b1)?;
    let h1 = g.relu(h1);
    let h2 = g.matmul(h1, mlp.w2)?;
    let h2 = g.add(h2, mlp.b2)?;
    Ok(g.sigmoid(h2))
}

/// Focused kernel point convolution: per-kernel outputs, optional attention
/// gain broadcast over the kernel axis, then summation across kernels.
/// Output `[M, D_out]`.
pub fn fkp_conv(
    g: &mut Graph,
    features: Value,
    table: &NeighborTable,
    correlations: Rc<Array>,
    weights: &FkpWeights,
    mode: AttentionMode,
) -> Result<Value> {
    let f = per_kernel_conv(g, features, table, correlations, weights.per_kernel)?;
    let gated = if mode == AttentionMode::None {
        f
    } else {
        let mlp = weights.attention.as_ref().ok_or_else(|| {
            Error::Config("attention mode requires attention MLP weights".into())
        })?;
        let mask = kernel_attention(g, f, mlp, mode)?;
        g.mul(f, mask)?
    };
    g.sum(gated, 0)
}

/// FKP over a pooling table: queries are the coarse level's points, supports
/// the fine level's. Identical math to [`fkp_conv`]; output has one row per
/// coarse point.
pub fn strided_fkp_conv(
    g: &mut Graph,
    fine_features: Value,
    pool_table: &NeighborTable,
    correlations: Rc<Array>,
    weights: &FkpWeights,
    mode: AttentionMode,
) -> Result<Value> {
    fkp_conv(g, fine_features, pool_table, correlations, weights, mode)
}

#[cfg(test)]
mod tests {
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::grad_check;
    use crate::spatial::radius_neighbors;

    fn norm(p: &[f64; 3]) -> f64 {
        p.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    // ---- disposition ----

    #[test]
    fn two_point_disposition_has_origin_and_one_inside_ball() {
        let d = make_disposition(2, 0.5, 1).unwrap();
        assert_eq!(d.kernel_points[0], [0.0, 0.0, 0.0]);
        let n = norm(&d.kernel_points[1]);
        assert!(n <= 0.5 + 1e-12 && n > 0.0);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = make_disposition(15, 1.2, 77).unwrap();
        let b = make_disposition(15, 1.2, 77).unwrap();
        assert_eq!(a.kernel_points, b.kernel_points);
    }

    #[test]
    fn disposition_scales_linearly_with_radius() {
        let a = make_disposition(10, 1.0, 5).unwrap();
        let b = make_disposition(10, 2.5, 5).unwrap();
        for (pa, pb) in a.kernel_points.iter().zip(b.kernel_points.iter()) {
            for t in 0..3 {
                assert!((pa[t] * 2.5 - pb[t]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fifteen_points_stay_well_separated() {
        for seed in 0..5 {
            let d = make_disposition(15, 1.0, seed).unwrap();
            let mut min_dist = f64::INFINITY;
            for i in 0..15 {
                for j in i + 1..15 {
                    let dx = d.kernel_points[i][0] - d.kernel_points[j][0];
                    let dy = d.kernel_points[i][1] - d.kernel_points[j][1];
                    let dz = d.kernel_points[i][2] - d.kernel_points[j][2];
                    min_dist = min_dist.min((dx * dx + dy * dy + dz * dz).sqrt());
                }
            }
            assert!(min_dist > 0.3, "seed {} min pairwise distance {}", seed, min_dist);
        }
    }

    #[test]
    fn kernel_points_never_leave_the_ball() {
        for seed in 0..5 {
            let d = make_disposition(15, 0.8, seed).unwrap();
            for p in &d.kernel_points {
                assert!(norm(p) <= 0.8 + 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_kernel_count_is_rejected() {
        assert!(matches!(make_disposition(1, 1.0, 0), Err(Error::Config(_))));
    }

    // ---- correlation ----

    fn single_offset_corr(offset: [f64; 3], disp: &KernelDisposition) -> Vec<f64> {
        let rel = Array::from_vec(vec![1, 1, 3], offset.to_vec());
        kp_correlation(&rel, disp).data().to_vec()
    }

    #[test]
    fn offset_on_kernel_point_correlates_fully() {
        let disp = make_disposition(5, 1.0, 3).unwrap();
        let target = disp.kernel_points[2];
        let h = single_offset_corr(target, &disp);
        assert!((h[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn offset_at_half_influence_correlates_half() {
        let disp = make_disposition(3, 1.0, 3).unwrap();
        // Relative to kernel point 0 at the origin.
        let h = single_offset_corr([disp.influence / 2.0, 0.0, 0.0], &disp);
        assert!((h[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn offset_beyond_influence_correlates_zero() {
        let disp = make_disposition(3, 1.0, 3).unwrap();
        let h = single_offset_corr([disp.influence * 1.01, 0.0, 0.0], &disp);
        assert_eq!(h[0], 0.0);
    }

    #[test]
    fn shadow_slots_correlate_zero_with_every_kernel() {
        let disp = make_disposition(7, 1.0, 9).unwrap();
        let queries = [[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        // Second query has no support in radius: all-shadow row.
        let table = radius_neighbors(&queries, &[[0.1, 0.0, 0.0]], 1.0, 4).unwrap();
        let rel = relative_positions(&queries, &[[0.1, 0.0, 0.0]], &table);
        let corr = kp_correlation(&rel, &disp);
        let k = 7;
        for slot in 0..table.width {
            for ki in 0..k {
                assert_eq!(corr.data()[(table.width + slot) * k + ki], 0.0);
            }
        }
    }

    #[test]
    fn translating_the_cloud_leaves_correlations_unchanged() {
        // Dyadic coordinates and a dyadic shift keep every subtraction
        // exact, so equality is bitwise.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = |rng: &mut ChaCha8Rng| -> Vec<[f64; 3]> {
            (0..30)
                .map(|_| {
                    [
                        rng.gen_range(-64..64) as f64 / 64.0,
                        rng.gen_range(-64..64) as f64 / 64.0,
                        rng.gen_range(-64..64) as f64 / 64.0,
                    ]
                })
                .collect()
        };
        let pts = grid(&mut rng);
        let shifted: Vec<[f64; 3]> = pts.iter().map(|p| [p[0] + 512.0, p[1] - 64.0, p[2] + 8.0]).collect();
        let disp = make_disposition(9, 0.6, 2).unwrap();
        let t1 = radius_neighbors(&pts, &pts, 0.6, 10).unwrap();
        let t2 = radius_neighbors(&shifted, &shifted, 0.6, 10).unwrap();
        assert_eq!(*t1.indices, *t2.indices);
        let c1 = kp_correlation(&relative_positions(&pts, &pts, &t1), &disp);
        let c2 = kp_correlation(&relative_positions(&shifted, &shifted, &t2), &disp);
        assert_eq!(c1.data(), c2.data());
    }

    // ---- per-kernel conv ----

    struct Instance {
        supports: Vec<[f64; 3]>,
        queries: Vec<[f64; 3]>,
        table: NeighborTable,
        corr: Rc<Array>,
        disp: KernelDisposition,
        features: Array,
        d_in: usize,
    }

    fn random_instance(seed: u64, n: usize, m: usize, k: usize, d_in: usize) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pt = |rng: &mut ChaCha8Rng| {
            [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]
        };
        let supports: Vec<[f64; 3]> = (0..n).map(|_| pt(&mut rng)).collect();
        let queries: Vec<[f64; 3]> = (0..m).map(|_| pt(&mut rng)).collect();
        let disp = make_disposition(k, 0.9, seed).unwrap();
        let table = radius_neighbors(&queries, &supports, 0.9, 6).unwrap();
        let rel = relative_positions(&queries, &supports, &table);
        let corr = Rc::new(kp_correlation(&rel, &disp));
        let features = Array::from_vec(
            vec![n, d_in],
            (0..n * d_in).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        Instance { supports, queries, table, corr, disp, features, d_in }
    }

    /// Brute-force oracle: the literal triple loop over queries, neighbor
    /// slots, and kernels, including the shadow skip.
    fn kpconv_oracle(inst: &Instance, w: &Array, d_out: usize) -> Vec<f64> {
        let k = inst.disp.kernel_points.len();
        let m = inst.queries.len();
        let mut out = vec![0.0; k * m * d_out];
        for ki in 0..k {
            for (mi, _q) in inst.queries.iter().enumerate() {
                for (slot, &idx) in inst.table.row(mi).iter().enumerate() {
                    if idx == inst.table.shadow {
                        continue;
                    }
                    let h = inst.corr.data()[(mi * inst.table.width + slot) * k + ki];
                    if h == 0.0 {
                        continue;
                    }
                    let x = &inst.features.data()
                        [idx as usize * inst.d_in..(idx as usize + 1) * inst.d_in];
                    for o in 0..d_out {
                        let mut dot = 0.0;
                        for t in 0..inst.d_in {
                            dot += x[t] * w.data()[(ki * inst.d_in + t) * d_out + o];
                        }
                        out[(ki * m + mi) * d_out + o] += h * dot;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn zero_correlations_give_zero_output() {
        let inst = random_instance(1, 6, 4, 3, 2);
        let zero_corr = Rc::new(Array::zeros(vec![inst.table.rows, inst.table.width, 3]));
        let mut g = Graph::new();
        let feats = g.constant(inst.features.clone());
        let w = g.constant(Array::filled(vec![3, 2, 2], 0.7));
        let out = per_kernel_conv(&mut g, feats, &inst.table, zero_corr, w).unwrap();
        assert!(g.data(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_kernel_identity_weight_reproduces_neighbor_features() {
        // One query, one support at the kernel-0 origin offset, W = identity.
        let supports = vec![[0.3, 0.3, 0.3]];
        let queries = vec![[0.3, 0.3, 0.3]];
        let table = radius_neighbors(&queries, &supports, 0.5, 2).unwrap();
        let disp = KernelDisposition {
            kernel_points: vec![[0.0, 0.0, 0.0], [0.4, 0.0, 0.0]],
            kernel_radius: 0.5,
            influence: 0.25,
            seed: 0,
        };
        let rel = relative_positions(&queries, &supports, &table);
        let corr = Rc::new(kp_correlation(&rel, &disp));
        // Offset is exactly on kernel 0, so h[0]=1; kernel 1 is 0.4 away
        // with influence 0.25, so h[1]=0.
        let mut g = Graph::new();
        let feats = g.constant(Array::from_vec(vec![1, 2], vec![5.0, -3.0]));
        let eye = g.constant(Array::from_vec(
            vec![2, 2, 2],
            vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0],
        ));
        let out = per_kernel_conv(&mut g, feats, &table, corr, eye).unwrap();
        assert_eq!(g.shape(out), &[2, 1, 2]);
        assert_eq!(&g.data(out)[0..2], &[5.0, -3.0]);
        assert_eq!(&g.data(out)[2..4], &[0.0, 0.0]);
    }

    #[test]
    fn per_kernel_conv_matches_triple_loop_oracle() {
        let inst = random_instance(7, 6, 5, 4, 3);
        let d_out = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let w = Array::from_vec(
            vec![4, 3, d_out],
            (0..4 * 3 * d_out).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let oracle = kpconv_oracle(&inst, &w, d_out);
        let mut g = Graph::new();
        let feats = g.constant(inst.features.clone());
        let wv = g.constant(w);
        let out = per_kernel_conv(&mut g, feats, &inst.table, inst.corr.clone(), wv).unwrap();
        for (a, b) in g.data(out).iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }
    }

    // ---- attention ----

    fn random_mlp(g: &mut Graph, rng: &mut ChaCha8Rng, d: usize, mode: AttentionMode) -> AttentionMlp {
        let input = mode.input_width(d);
        let hidden = (d / 4).max(1);
        let arr = |shape: Vec<usize>, rng: &mut ChaCha8Rng| {
            let n: usize = shape.iter().product();
            Array::from_vec(shape, (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect())
        };
        AttentionMlp {
            w1: g.leaf(arr(vec![input, hidden], rng), true),
            b1: g.leaf(arr(vec![hidden], rng), true),
            w2: g.leaf(arr(vec![hidden, d], rng), true),
            b2: g.leaf(arr(vec![d], rng), true),
        }
    }

    #[test]
    fn attention_mask_lies_strictly_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let f = g.constant(Array::from_vec(
            vec![4, 10, 8],
            (0..320).map(|_| rng.gen_range(-5.0..5.0)).collect(),
        ));
        let mlp = random_mlp(&mut g, &mut rng, 8, AttentionMode::MaxMean);
        let mask = kernel_attention(&mut g, f, &mlp, AttentionMode::MaxMean).unwrap();
        assert_eq!(g.shape(mask), &[10, 8]);
        for &v in g.data(mask) {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn single_kernel_collapses_max_and_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let d = 4;
        let f0: Vec<f64> = (0..3 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let f = g.constant(Array::from_vec(vec![1, 3, d], f0.clone()));
        let mlp = random_mlp(&mut g, &mut rng, d, AttentionMode::MaxMean);
        let mask = kernel_attention(&mut g, f, &mlp, AttentionMode::MaxMean).unwrap();

        // Oracle: mask = sigmoid(W2 relu(W1 [f0, f0] + b1) + b2), row-wise.
        let w1 = g.data(mlp.w1).to_vec();
        let b1 = g.data(mlp.b1).to_vec();
        let w2 = g.data(mlp.w2).to_vec();
        let b2 = g.data(mlp.b2).to_vec();
        let hidden = b1.len();
        for row in 0..3 {
            let x: Vec<f64> = f0[row * d..(row + 1) * d]
                .iter()
                .chain(f0[row * d..(row + 1) * d].iter())
                .cloned()
                .collect();
            let mut h = vec![0.0; hidden];
            for j in 0..hidden {
                let mut acc = b1[j];
                for (t, &xv) in x.iter().enumerate() {
                    acc += xv * w1[t * hidden + j];
                }
                h[j] = acc.max(0.0);
            }
            for o in 0..d {
                let mut acc = b2[o];
                for (j, &hv) in h.iter().enumerate() {
                    acc += hv * w2[j * d + o];
                }
                let expect = 1.0 / (1.0 + (-acc).exp());
                let got = g.data(mask)[row * d + o];
                assert!((got - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_input_and_zero_biases_give_half_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut g = Graph::new();
        let f = g.constant(Array::zeros(vec![3, 5, 4]));
        let mut mlp = random_mlp(&mut g, &mut rng, 4, AttentionMode::MaxMean);
        mlp.b1 = g.constant(Array::zeros(vec![1]));
        mlp.b2 = g.constant(Array::zeros(vec![4]));
        let mask = kernel_attention(&mut g, f, &mlp, AttentionMode::MaxMean).unwrap();
        assert!(g.data(mask).iter().all(|&v| v == 0.5));
    }

    // ---- fkp ----

    #[test]
    fn mode_none_equals_brute_force_kpconv_sum() {
        for seed in 0..8 {
            let inst = random_instance(20 + seed, 7, 5, 3, 2);
            let d_out = 3;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = Array::from_vec(
                vec![3, 2, d_out],
                (0..3 * 2 * d_out).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            );
            let oracle_perk = kpconv_oracle(&inst, &w, d_out);
            let m = inst.queries.len();
            let mut oracle = vec![0.0; m * d_out];
            for ki in 0..3 {
                for t in 0..m * d_out {
                    oracle[t] += oracle_perk[ki * m * d_out + t];
                }
            }
            let mut g = Graph::new();
            let feats = g.constant(inst.features.clone());
            let wv = g.constant(w);
            let weights = FkpWeights { per_kernel: wv, attention: None };
            let out = fkp_conv(
                &mut g,
                feats,
                &inst.table,
                inst.corr.clone(),
                &weights,
                AttentionMode::None,
            )
            .unwrap();
            assert_eq!(g.shape(out), &[m, d_out]);
            for (a, b) in g.data(out).iter().zip(oracle.iter()) {
                assert!((a - b).abs() < 1e-10, "seed {}: {} vs {}", seed, a, b);
            }
        }
    }

    #[test]
    fn all_ones_mask_reduces_to_plain_convolution() {
        let inst = random_instance(31, 6, 4, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let w = Array::from_vec(
            vec![3, 2, 2],
            (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let mut g = Graph::new();
        let feats = g.constant(inst.features.clone());
        let wv = g.constant(w);
        let weights = FkpWeights { per_kernel: wv, attention: None };
        let plain = fkp_conv(&mut g, feats, &inst.table, inst.corr.clone(), &weights, AttentionMode::None).unwrap();
        // Same computation with the gate applied explicitly as all-ones.
        let perk = per_kernel_conv(&mut g, feats, &inst.table, inst.corr.clone(), wv).unwrap();
        let ones = g.constant(Array::filled(vec![4, 2], 1.0));
        let gated = g.mul(perk, ones).unwrap();
        let summed = g.sum(gated, 0).unwrap();
        assert_eq!(g.data(plain), g.data(summed));
    }

    #[test]
    fn neighbor_order_within_rows_does_not_matter() {
        let inst = random_instance(41, 8, 5, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let w = Array::from_vec(
            vec![4, 3, 2],
            (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let run = |table: &NeighborTable| -> Vec<f64> {
            let rel = relative_positions(&inst.queries, &inst.supports, table);
            let corr = Rc::new(kp_correlation(&rel, &inst.disp));
            let mut g = Graph::new();
            let feats = g.constant(inst.features.clone());
            let wv = g.constant(w.clone());
            let weights = FkpWeights { per_kernel: wv, attention: None };
            let out = fkp_conv(&mut g, feats, table, corr, &weights, AttentionMode::None).unwrap();
            g.data(out).to_vec()
        };
        let base = run(&inst.table);
        // Reverse every row's slots.
        let mut reversed = Vec::with_capacity(inst.table.indices.len());
        for r in 0..inst.table.rows {
            let mut row: Vec<u32> = inst.table.row(r).to_vec();
            row.reverse();
            reversed.extend(row);
        }
        let permuted = NeighborTable {
            indices: Rc::new(reversed),
            rows: inst.table.rows,
            width: inst.table.width,
            shadow: inst.table.shadow,
            counts: inst.table.counts.clone(),
            radius: inst.table.radius,
        };
        let out = run(&permuted);
        for (a, b) in base.iter().zip(out.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn strided_with_identical_levels_equals_plain_fkp() {
        let inst = random_instance(51, 6, 6, 3, 2);
        // Self-table: queries == supports by construction.
        let table = radius_neighbors(&inst.supports, &inst.supports, 0.9, 6).unwrap();
        let rel = relative_positions(&inst.supports, &inst.supports, &table);
        let corr = Rc::new(kp_correlation(&rel, &inst.disp));
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let w = Array::from_vec(
            vec![3, 2, 2],
            (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let mut g = Graph::new();
        let feats = g.constant(inst.features.clone());
        let wv = g.constant(w);
        let weights = FkpWeights { per_kernel: wv, attention: None };
        let a = fkp_conv(&mut g, feats, &table, corr.clone(), &weights, AttentionMode::None).unwrap();
        let b = strided_fkp_conv(&mut g, feats, &table, corr, &weights, AttentionMode::None).unwrap();
        assert_eq!(g.data(a), g.data(b));
        assert_eq!(g.shape(b)[0], inst.supports.len());
    }

    #[test]
    fn strided_output_rows_match_coarse_count() {
        let inst = random_instance(61, 12, 0, 3, 2);
        let coarse: Vec<[f64; 3]> = vec![[0.0, 0.0, 0.0], [0.5, 0.5, 0.5]];
        let table = radius_neighbors(&coarse, &inst.supports, 0.9, 8).unwrap();
        let rel = relative_positions(&coarse, &inst.supports, &table);
        let corr = Rc::new(kp_correlation(&rel, &inst.disp));
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let w = Array::from_vec(
            vec![3, 2, 4],
            (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let mut g = Graph::new();
        let feats = g.constant(inst.features.clone());
        let wv = g.constant(w);
        let weights = FkpWeights { per_kernel: wv, attention: None };
        let out = strided_fkp_conv(&mut g, feats, &table, corr, &weights, AttentionMode::None).unwrap();
        assert_eq!(g.shape(out), &[2, 4]);
    }

    #[test]
    fn strided_matches_brute_force_on_two_level_instance() {
        let inst = random_instance(71, 9, 0, 3, 2);
        let coarse: Vec<[f64; 3]> = vec![[0.2, 0.0, 0.0], [-0.4, 0.3, 0.1], [0.0, -0.5, 0.4]];
        let table = radius_neighbors(&coarse, &inst.supports, 0.9, 6).unwrap();
        let rel = relative_positions(&coarse, &inst.supports, &table);
        let corr = Rc::new(kp_correlation(&rel, &inst.disp));
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let d_out = 2;
        let w = Array::from_vec(
            vec![3, 2, d_out],
            (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        // Brute-force oracle over the coarse queries.
        let k = 3;
        let mut oracle = vec![0.0; coarse.len() * d_out];
        for ki in 0..k {
            for mi in 0..coarse.len() {
                for (slot, &idx) in table.row(mi).iter().enumerate() {
                    if idx == table.shadow {
                        continue;
                    }
                    let h = corr.data()[(mi * table.width + slot) * k + ki];
                    let x = &inst.features.data()[idx as usize * 2..idx as usize * 2 + 2];
                    for o in 0..d_out {
                        let mut dot = 0.0;
                        for t in 0..2 {
                            dot += x[t] * w.data()[(ki * 2 + t) * d_out + o];
                        }
                        oracle[mi * d_out + o] += h * dot;
                    }
                }
            }
        }
        let mut g = Graph::new();
        let feats = g.constant(inst.features.clone());
        let wv = g.constant(w);
        let weights = FkpWeights { per_kernel: wv, attention: None };
        let out = strided_fkp_conv(&mut g, feats, &table, corr, &weights, AttentionMode::None).unwrap();
        for (a, b) in g.data(out).iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn full_fkp_gradient_matches_finite_differences() {
        // 5 support points, K=3, D=2, attention enabled: gradients flow
        // through features, per-kernel weights, and the attention MLP.
        let inst = random_instance(81, 5, 4, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let d_out = 2;
        let hidden = 1usize;
        let rand_arr = |shape: Vec<usize>, rng: &mut ChaCha8Rng| {
            let n: usize = shape.iter().product();
            Array::from_vec(shape, (0..n).map(|_| rng.gen_range(-0.8..0.8)).collect())
        };
        let inputs = [
            inst.features.clone(),
            rand_arr(vec![3, 2, d_out], &mut rng),
            rand_arr(vec![2 * d_out, hidden], &mut rng),
            rand_arr(vec![hidden], &mut rng),
            rand_arr(vec![hidden, d_out], &mut rng),
            rand_arr(vec![d_out], &mut rng),
        ];
        let table = inst.table.clone();
        let corr = inst.corr.clone();
        let err = grad_check(
            move |g, v| {
                let weights = FkpWeights {
                    per_kernel: v[1],
                    attention: Some(AttentionMlp { w1: v[2], b1: v[3], w2: v[4], b2: v[5] }),
                };
                let out = fkp_conv(g, v[0], &table, corr.clone(), &weights, AttentionMode::MaxMean)?;
                let sq = g.mul(out, out)?;
                g.sum_all(sq)
            },
            &inputs,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "err {}", err);
    }

    #[test]
    fn attention_mode_requires_mlp_weights() {
        let inst = random_instance(91, 5, 3, 3, 2);
        let mut g = Graph::new();
        let feats = g.constant(inst.features.clone());
        let wv = g.constant(Array::zeros(vec![3, 2, 2]));
        let weights = FkpWeights { per_kernel: wv, attention: None };
        let err = fkp_conv(
            &mut g,
            feats,
            &inst.table,
            inst.corr.clone(),
            &weights,
            AttentionMode::MaxMean,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
