//! Gradient verification over registered parameters, and the named check
//! suites behind the command-line `gradcheck` subcommand.
//!
//! Suites check at jittered (generic) parameter points: zero-initialized
//! biases sit exactly on relu kinks, where finite differences blend the two
//! one-sided slopes and stop being a valid oracle.

use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::{ChaCha20Rng, ChaCha8Rng};

use crate::autodiff::{grad_check, Array, Graph, IndexTable, Value};
use crate::blocks::{
    recurrent_fkp, DecoderStage, FwdCtx, Normalization, RfkpBottleneck, StridedBottleneck,
    UnaryConv,
};
use crate::conv::{
    fkp_conv, kp_correlation, make_disposition, relative_positions, AttentionMode, FkpWeights,
};
use crate::net::{assemble_features, build_network, make_level_set, NetworkConfig};
use crate::params::{jitter_trainable, Binding, ParamStore};
use crate::spatial::{radius_neighbors, NeighborTable, PointCloud};
use crate::{derive_seed, Error, Result};

/// One named check with its measured worst error and pass threshold.
#[derive(Clone, Debug)]
pub struct CheckItem {
    pub name: String,
    pub max_err: f64,
    pub threshold: f64,
}

impl CheckItem {
    pub fn passed(&self) -> bool {
        self.max_err < self.threshold
    }
}

/// Worst-coordinate report from a parameter gradient check.
#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_err: f64,
    /// Parameter name, flat coordinate, analytic and numeric values at the
    /// worst coordinate; absent when there are no trainable coordinates.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compare analytic parameter gradients of a scalar objective against
/// central finite differences over every coordinate of every trainable
/// parameter in the store.
///
/// The closure must rebuild the forward pass from the store each call; no
/// state may leak between calls other than the store itself (running
/// batch-norm statistics may drift, they do not affect objectives).
pub fn grad_check_report<F>(store: &mut ParamStore, f: F, eps: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph, &mut ParamStore, &mut Binding) -> Result<Value>,
{
    let mut graph = Graph::new();
    let mut binding = Binding::new();
    let y = f(&mut graph, store, &mut binding)?;
    if graph.array(y).numel() != 1 {
        return Err(Error::Dim(format!(
            "objective must be scalar, got {:?}",
            graph.shape(y)
        )));
    }
    if !graph.array(y).item().is_finite() {
        return Err(Error::Numeric("non-finite objective".into()));
    }
    graph.backward(y)?;
    // A parameter may be bound more than once (weight sharing); gradients
    // accumulate across bindings.
    let mut analytic: HashMap<String, Vec<f64>> = HashMap::new();
    for &(id, v) in &binding.pairs {
        if !store.trainable(id) {
            continue;
        }
        let entry = analytic
            .entry(store.name(id).to_string())
            .or_insert_with(|| vec![0.0; store.value(id).numel()]);
        if let Some(g) = graph.grad(v) {
            for (e, &gv) in entry.iter_mut().zip(g.iter()) {
                *e += gv;
            }
        }
    }

    let eval = |store: &mut ParamStore| -> Result<f64> {
        let mut graph = Graph::new();
        let mut binding = Binding::new();
        let y = f(&mut graph, store, &mut binding)?;
        let v = graph.array(y).item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite objective {}", v)));
        }
        Ok(v)
    };

    let ids: Vec<_> = store.ids().filter(|&id| store.trainable(id)).collect();
    let mut report = GradReport::default();
    for id in ids {
        let name = store.name(id).to_string();
        let n = store.value(id).numel();
        for j in 0..n {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + eps;
            let up = eval(store)?;
            store.value_mut(id).data_mut()[j] = orig - eps;
            let down = eval(store)?;
            store.value_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite finite difference for {} coord {}",
                    name, j
                )));
            }
            let a = analytic.get(&name).map_or(0.0, |g| g[j]);
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            if err > report.max_err || report.worst.is_none() {
                report.max_err = err.max(report.max_err);
                report.worst = Some((name.clone(), j, a, numeric));
            }
        }
    }
    Ok(report)
}

/// As `grad_check_report`, returning only the worst relative error.
pub fn grad_check_params<F>(store: &mut ParamStore, f: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &mut ParamStore, &mut Binding) -> Result<Value>,
{
    grad_check_report(store, f, eps).map(|r| r.max_err)
}

// ---- instance sampling ----

const OP_EPS: f64 = 1e-4;
const OP_THRESHOLD: f64 = 1e-4;
const OP_SEEDS: u64 = 3;
const BLOCK_EPS: f64 = 1e-4;
const BLOCK_THRESHOLD: f64 = 1e-4;
const NET_EPS: f64 = 1e-5;
const NET_THRESHOLD: f64 = 1e-3;

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Array {
    let n: usize = shape.iter().product();
    Array::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Samples with |v| >= `min_abs`, for activation kinks at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>, min_abs: f64) -> Array {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(min_abs..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Array::from_vec(shape, data)
}

/// Samples pairwise separated by at least `gap`, so max reductions cannot
/// flip argmax inside the probe window.
fn separated(rng: &mut ChaCha8Rng, shape: Vec<usize>, gap: f64) -> Array {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = Vec::with_capacity(n);
    while data.len() < n {
        let v = rng.gen_range(-1.0..1.0);
        if data.iter().all(|&u| (u - v).abs() >= gap) {
            data.push(v);
        }
    }
    Array::from_vec(shape, data)
}

fn random_table(rng: &mut ChaCha8Rng, rows: usize, width: usize, support: usize) -> IndexTable {
    let shadow = support as u32;
    let indices: Vec<u32> = (0..rows * width)
        .map(|_| {
            if rng.gen_bool(0.25) {
                shadow
            } else {
                rng.gen_range(0..support) as u32
            }
        })
        .collect();
    IndexTable::new(Rc::new(indices), rows, width, shadow)
}

/// Worst error over `OP_SEEDS` runs of one seeded check.
fn worst_over_seeds<F>(seed: u64, name: &str, run: F) -> Result<CheckItem>
where
    F: Fn(&mut ChaCha8Rng) -> Result<f64>,
{
    let mut worst = 0.0f64;
    for k in 0..OP_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, name).wrapping_add(k));
        worst = worst.max(run(&mut rng)?);
    }
    Ok(CheckItem { name: name.to_string(), max_err: worst, threshold: OP_THRESHOLD })
}

/// Scalar objective with non-uniform output weights, so transposed or
/// misrouted adjoints cannot cancel out.
fn weighted_sum(g: &mut Graph, y: Value, w: Array) -> Result<Value> {
    let wv = g.constant(w);
    let prod = g.mul(y, wv)?;
    g.sum_all(prod)
}

// ---- op suite ----

/// Finite-difference checks for every differentiable operation.
pub fn check_ops(seed: u64) -> Result<Vec<CheckItem>> {
    let mut items = Vec::new();

    items.push(worst_over_seeds(seed, "matmul", |rng| {
        let a = uniform(rng, vec![3, 4], -1.0, 1.0);
        let b = uniform(rng, vec![4, 2], -1.0, 1.0);
        let w = uniform(rng, vec![3, 2], -1.0, 1.0);
        grad_check(
            |g, vs| {
                let y = g.matmul(vs[0], vs[1])?;
                weighted_sum(g, y, w.clone())
            },
            &[a, b],
            OP_EPS,
        )
    })?);

    items.push(worst_over_seeds(seed, "batched_matmul", |rng| {
        let a = uniform(rng, vec![2, 3, 4], -1.0, 1.0);
        let b = uniform(rng, vec![2, 4, 2], -1.0, 1.0);
        let w = uniform(rng, vec![2, 3, 2], -1.0, 1.0);
        grad_check(
            |g, vs| {
                let y = g.batched_matmul(vs[0], vs[1])?;
                weighted_sum(g, y, w.clone())
            },
            &[a, b],
            OP_EPS,
        )
    })?);

    for (name, op) in [
        ("elementwise_add", 0usize),
        ("elementwise_sub", 1),
        ("elementwise_mul", 2),
    ] {
        items.push(worst_over_seeds(seed, name, move |rng| {
            let mut worst = 0.0f64;
            // Equal shapes, then leading and trailing broadcasts.
            for b_shape in [vec![3usize, 4], vec![4], vec![3]] {
                let a = uniform(rng, vec![3, 4], -1.0, 1.0);
                let b = uniform(rng, b_shape, -1.0, 1.0);
                let w = uniform(rng, vec![3, 4], -1.0, 1.0);
                let err = grad_check(
                    |g, vs| {
                        let y = match op {
                            0 => g.add(vs[0], vs[1])?,
                            1 => g.sub(vs[0], vs[1])?,
                            _ => g.mul(vs[0], vs[1])?,
                        };
                        weighted_sum(g, y, w.clone())
                    },
                    &[a, b],
                    OP_EPS,
                )?;
                worst = worst.max(err);
            }
            Ok(worst)
        })?);
    }

    for (name, kind) in [
        ("reduce_sum", 0usize),
        ("reduce_max", 1),
        ("reduce_mean", 2),
    ] {
        items.push(worst_over_seeds(seed, name, move |rng| {
            let mut worst = 0.0f64;
            for axis in 0..2 {
                let x = if kind == 1 {
                    separated(rng, vec![3, 4], 5e-3)
                } else {
                    uniform(rng, vec![3, 4], -1.0, 1.0)
                };
                let w_shape = if axis == 0 { vec![4] } else { vec![3] };
                let w = uniform(rng, w_shape, -1.0, 1.0);
                let err = grad_check(
                    |g, vs| {
                        let y = match kind {
                            0 => g.sum(vs[0], axis)?,
                            1 => g.max(vs[0], axis)?,
                            _ => g.mean(vs[0], axis)?,
                        };
                        weighted_sum(g, y, w.clone())
                    },
                    &[x],
                    OP_EPS,
                )?;
                worst = worst.max(err);
            }
            Ok(worst)
        })?);
    }

    items.push(worst_over_seeds(seed, "sigmoid", |rng| {
        let x = uniform(rng, vec![3, 4], -2.0, 2.0);
        let w = uniform(rng, vec![3, 4], -1.0, 1.0);
        grad_check(
            |g, vs| {
                let y = g.sigmoid(vs[0]);
                weighted_sum(g, y, w.clone())
            },
            &[x],
            OP_EPS,
        )
    })?);

    items.push(worst_over_seeds(seed, "leaky_relu", |rng| {
        let x = away_from_zero(rng, vec![3, 4], 0.2);
        let w = uniform(rng, vec![3, 4], -1.0, 1.0);
        grad_check(
            |g, vs| {
                let y = g.leaky_relu(vs[0], 0.1);
                weighted_sum(g, y, w.clone())
            },
            &[x],
            OP_EPS,
        )
    })?);

    items.push(worst_over_seeds(seed, "gather_rows", |rng| {
        let x = uniform(rng, vec![6, 3], -1.0, 1.0);
        let table = random_table(rng, 4, 3, 6);
        let w = uniform(rng, vec![4, 3, 3], -1.0, 1.0);
        grad_check(
            |g, vs| {
                let y = g.gather_rows(vs[0], &table)?;
                weighted_sum(g, y, w.clone())
            },
            &[x],
            OP_EPS,
        )
    })?);

    items.push(worst_over_seeds(seed, "concat", |rng| {
        let mut worst = 0.0f64;
        for (sa, sb, axis, ws) in [
            (vec![2usize, 3], vec![2usize, 2], 1usize, vec![2usize, 5]),
            (vec![2, 3], vec![1, 3], 0, vec![3, 3]),
        ] {
            let a = uniform(rng, sa, -1.0, 1.0);
            let b = uniform(rng, sb, -1.0, 1.0);
            let w = uniform(rng, ws, -1.0, 1.0);
            let err = grad_check(
                |g, vs| {
                    let y = g.concat(&[vs[0], vs[1]], axis)?;
                    weighted_sum(g, y, w.clone())
                },
                &[a, b],
                OP_EPS,
            )?;
            worst = worst.max(err);
        }
        Ok(worst)
    })?);

    items.push(worst_over_seeds(seed, "reshape", |rng| {
        let x = uniform(rng, vec![2, 6], -1.0, 1.0);
        let w = uniform(rng, vec![3, 4], -1.0, 1.0);
        grad_check(
            |g, vs| {
                let y = g.reshape(vs[0], vec![3, 4])?;
                weighted_sum(g, y, w.clone())
            },
            &[x],
            OP_EPS,
        )
    })?);

    items.push(worst_over_seeds(seed, "kernel_weighted_sum", |rng| {
        let gathered = uniform(rng, vec![4, 3, 2], -1.0, 1.0);
        // Sparse non-negative correlations, like real kernel responses.
        let corr_data: Vec<f64> = (0..4 * 3 * 5)
            .map(|_| if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(0.1..1.0) })
            .collect();
        let corr = Rc::new(Array::from_vec(vec![4, 3, 5], corr_data));
        let w = uniform(rng, vec![5, 4, 2], -1.0, 1.0);
        grad_check(
            |g, vs| {
                let y = g.kernel_weighted_sum(vs[0], corr.clone())?;
                weighted_sum(g, y, w.clone())
            },
            &[gathered],
            OP_EPS,
        )
    })?);

    items.push(worst_over_seeds(seed, "masked_row_max", |rng| {
        let x = separated(rng, vec![6, 3], 5e-3);
        let table = random_table(rng, 4, 2, 6);
        let w = uniform(rng, vec![4, 3], -1.0, 1.0);
        grad_check(
            |g, vs| {
                let y = g.masked_row_max(vs[0], &table)?;
                weighted_sum(g, y, w.clone())
            },
            &[x],
            OP_EPS,
        )
    })?);

    items.push(worst_over_seeds(seed, "rsqrt_shift", |rng| {
        let x = uniform(rng, vec![3, 4], 0.3, 2.0);
        let w = uniform(rng, vec![3, 4], -1.0, 1.0);
        grad_check(
            |g, vs| {
                let y = g.rsqrt_shift(vs[0], 0.01);
                weighted_sum(g, y, w.clone())
            },
            &[x],
            OP_EPS,
        )
    })?);

    items.push(worst_over_seeds(seed, "softmax_cross_entropy", |rng| {
        let logits = uniform(rng, vec![4, 3], -1.5, 1.5);
        let labels = Rc::new(vec![0usize, 1, 2, 9]);
        let weights = Rc::new(vec![1.0, 2.0, 0.5]);
        grad_check(
            |g, vs| g.softmax_cross_entropy(vs[0], labels.clone(), Some(weights.clone()), Some(9)),
            &[logits],
            OP_EPS,
        )
    })?);

    Ok(items)
}

// ---- block suite ----

struct ConvInstance {
    table: NeighborTable,
    corr: Rc<Array>,
    n: usize,
}

fn conv_instance(rng: &mut ChaCha8Rng, n: usize, k: usize, disp_seed: u64) -> Result<ConvInstance> {
    let points: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]
        })
        .collect();
    let table = radius_neighbors(&points, &points, 1.0, 8)?;
    let disp = make_disposition(k, 1.0, disp_seed)?;
    let rel = relative_positions(&points, &points, &table);
    let corr = Rc::new(kp_correlation(&rel, &disp));
    Ok(ConvInstance { table, corr, n })
}

fn pool_instance(
    rng: &mut ChaCha8Rng,
    n_fine: usize,
    n_coarse: usize,
    k: usize,
    disp_seed: u64,
) -> Result<(NeighborTable, Rc<Array>)> {
    let sample = |rng: &mut ChaCha8Rng, n: usize| -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect()
    };
    let fine_pts = sample(rng, n_fine);
    let coarse = sample(rng, n_coarse);
    let pool = radius_neighbors(&coarse, &fine_pts, 1.3, 8)?;
    let disp = make_disposition(k, 1.3, disp_seed + 1)?;
    let rel = relative_positions(&coarse, &fine_pts, &pool);
    let corr = Rc::new(kp_correlation(&rel, &disp));
    Ok((pool, corr))
}

fn block_item<F>(seed: u64, name: &str, build_and_check: F) -> Result<CheckItem>
where
    F: Fn(u64) -> Result<f64>,
{
    let err = build_and_check(derive_seed(seed, name))?;
    Ok(CheckItem { name: name.to_string(), max_err: err, threshold: BLOCK_THRESHOLD })
}

/// Finite-difference checks through every block, frozen-statistics
/// normalization per the checking contract, plus one training-mode pass.
pub fn check_blocks(seed: u64) -> Result<Vec<CheckItem>> {
    let mut items = Vec::new();

    items.push(block_item(seed, "unary_conv_frozen_norm", |s| {
        let mut rng = ChaCha20Rng::seed_from_u64(s);
        let mut store = ParamStore::new();
        let u = UnaryConv::register(&mut store, &mut rng, "u", 3, 4, Normalization::Batch, true)?;
        jitter_trainable(&mut store, &mut rng, 0.05);
        let mut drng = ChaCha8Rng::seed_from_u64(s);
        let x = uniform(&mut drng, vec![6, 3], -1.0, 1.0);
        grad_check_params(
            &mut store,
            move |g, store, binding| {
                let xv = g.constant(x.clone());
                let mut ctx = FwdCtx { graph: g, store, binding, training: false };
                let y = u.forward(&mut ctx, xv)?;
                let sq = g.mul(y, y)?;
                g.sum_all(sq)
            },
            BLOCK_EPS,
        )
    })?);

    items.push(block_item(seed, "unary_conv_batch_stats", |s| {
        let mut rng = ChaCha20Rng::seed_from_u64(s);
        let mut store = ParamStore::new();
        let u = UnaryConv::register(&mut store, &mut rng, "u", 3, 4, Normalization::Batch, true)?;
        jitter_trainable(&mut store, &mut rng, 0.05);
        let mut drng = ChaCha8Rng::seed_from_u64(s);
        let x = uniform(&mut drng, vec![6, 3], -1.0, 1.0);
        grad_check_params(
            &mut store,
            move |g, store, binding| {
                let xv = g.constant(x.clone());
                let mut ctx = FwdCtx { graph: g, store, binding, training: true };
                let y = u.forward(&mut ctx, xv)?;
                let sq = g.mul(y, y)?;
                g.sum_all(sq)
            },
            BLOCK_EPS,
        )
    })?);

    items.push(block_item(seed, "fkp_conv_max_mean", |s| {
        let mut drng = ChaCha8Rng::seed_from_u64(s);
        let inst = conv_instance(&mut drng, 5, 3, s)?;
        let mut rng = ChaCha20Rng::seed_from_u64(s);
        let mut store = ParamStore::new();
        let fkp = crate::blocks::FkpParams::register(
            &mut store,
            &mut rng,
            "fkp",
            3,
            2,
            2,
            AttentionMode::MaxMean,
        )?;
        jitter_trainable(&mut store, &mut rng, 0.05);
        let x = uniform(&mut drng, vec![inst.n, 2], -1.0, 1.0);
        grad_check_params(
            &mut store,
            move |g, store, binding| {
                let xv = g.constant(x.clone());
                let mut ctx = FwdCtx { graph: g, store, binding, training: false };
                let weights: FkpWeights = fkp.bind(&mut ctx);
                let y = fkp_conv(g, xv, &inst.table, inst.corr.clone(), &weights, AttentionMode::MaxMean)?;
                let sq = g.mul(y, y)?;
                g.sum_all(sq)
            },
            BLOCK_EPS,
        )
    })?);

    items.push(block_item(seed, "recurrent_fkp_h2", |s| {
        let mut drng = ChaCha8Rng::seed_from_u64(s);
        let inst = conv_instance(&mut drng, 6, 4, s)?;
        let mut rng = ChaCha20Rng::seed_from_u64(s);
        let mut store = ParamStore::new();
        let f = crate::blocks::FkpParams::register(&mut store, &mut rng, "f", 4, 2, 2, AttentionMode::MaxMean)?;
        let r = crate::blocks::FkpParams::register(&mut store, &mut rng, "r", 4, 2, 2, AttentionMode::MaxMean)?;
        jitter_trainable(&mut store, &mut rng, 0.05);
        let x = uniform(&mut drng, vec![inst.n, 2], -1.0, 1.0);
        grad_check_params(
            &mut store,
            move |g, store, binding| {
                let xv = g.constant(x.clone());
                let mut ctx = FwdCtx { graph: g, store, binding, training: false };
                let fw = f.bind(&mut ctx);
                let rw = r.bind(&mut ctx);
                let y = recurrent_fkp(
                    g,
                    xv,
                    &inst.table,
                    inst.corr.clone(),
                    &fw,
                    &rw,
                    AttentionMode::MaxMean,
                    2,
                )?;
                let sq = g.mul(y, y)?;
                g.sum_all(sq)
            },
            BLOCK_EPS,
        )
    })?);

    items.push(block_item(seed, "rfkp_bottleneck", |s| {
        let mut drng = ChaCha8Rng::seed_from_u64(s);
        let inst = conv_instance(&mut drng, 6, 4, s)?;
        let mut rng = ChaCha20Rng::seed_from_u64(s);
        let mut store = ParamStore::new();
        let block = RfkpBottleneck::register(
            &mut store,
            &mut rng,
            "b",
            4,
            3,
            4,
            2,
            AttentionMode::MaxMean,
            Normalization::Batch,
        )?;
        jitter_trainable(&mut store, &mut rng, 0.05);
        let x = uniform(&mut drng, vec![inst.n, 3], -1.0, 1.0);
        grad_check_params(
            &mut store,
            move |g, store, binding| {
                let xv = g.constant(x.clone());
                let mut ctx = FwdCtx { graph: g, store, binding, training: false };
                let y = block.forward(&mut ctx, xv, &inst.table, inst.corr.clone())?;
                let sq = g.mul(y, y)?;
                g.sum_all(sq)
            },
            BLOCK_EPS,
        )
    })?);

    items.push(block_item(seed, "strided_bottleneck", |s| {
        let mut drng = ChaCha8Rng::seed_from_u64(s);
        let (pool, pool_corr) = pool_instance(&mut drng, 10, 4, 4, s)?;
        let mut rng = ChaCha20Rng::seed_from_u64(s);
        let mut store = ParamStore::new();
        let block = StridedBottleneck::register(
            &mut store,
            &mut rng,
            "s",
            4,
            2,
            4,
            AttentionMode::MaxOnly,
            Normalization::Batch,
        )?;
        jitter_trainable(&mut store, &mut rng, 0.05);
        let x = uniform(&mut drng, vec![10, 2], -1.0, 1.0);
        grad_check_params(
            &mut store,
            move |g, store, binding| {
                let xv = g.constant(x.clone());
                let mut ctx = FwdCtx { graph: g, store, binding, training: false };
                let y = block.forward(&mut ctx, xv, &pool, pool_corr.clone())?;
                let sq = g.mul(y, y)?;
                g.sum_all(sq)
            },
            BLOCK_EPS,
        )
    })?);

    items.push(block_item(seed, "decoder_stage", |s| {
        let mut rng = ChaCha20Rng::seed_from_u64(s);
        let mut store = ParamStore::new();
        let stage = DecoderStage::register(&mut store, &mut rng, "d", 2 + 3, 4, Normalization::Batch)?;
        jitter_trainable(&mut store, &mut rng, 0.05);
        let mut drng = ChaCha8Rng::seed_from_u64(s);
        let coarse = uniform(&mut drng, vec![2, 2], -1.0, 1.0);
        let side = uniform(&mut drng, vec![4, 3], -1.0, 1.0);
        let up = Rc::new(vec![0u32, 1, 1, 0]);
        grad_check_params(
            &mut store,
            move |g, store, binding| {
                let cv = g.constant(coarse.clone());
                let sv = g.constant(side.clone());
                let mut ctx = FwdCtx { graph: g, store, binding, training: false };
                let y = stage.forward(&mut ctx, cv, up.clone(), &[sv])?;
                let sq = g.mul(y, y)?;
                g.sum_all(sq)
            },
            BLOCK_EPS,
        )
    })?);

    Ok(items)
}

// ---- network suite ----

/// End-to-end finite differences through a 12-point, 3-level pyramid with
/// dims 4/8/16 and frozen normalization.
pub fn check_network(seed: u64) -> Result<Vec<CheckItem>> {
    let config = NetworkConfig {
        levels: 3,
        feature_dims: vec![4, 8, 16],
        pyramid_start: 2,
        class_count: 3,
        hidden_layers: 2,
        attention: AttentionMode::MaxMean,
        kernel_points: 5,
        radius_factor: 2.5,
        influence_factor: 0.5,
        base_cell: 0.25,
        input_sphere_radius: 2.0,
        input_features: vec!["one".into(), "height".into()],
        neighbor_cap: 12,
        seed: derive_seed(seed, "toy_net"),
    };
    let mut store = ParamStore::new();
    let net = build_network(&config, &mut store)?;
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "toy_jitter"));
    jitter_trainable(&mut store, &mut rng, 0.05);
    let mut drng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "toy_cloud"));
    let positions: Vec<[f64; 3]> = (0..12)
        .map(|_| {
            [
                drng.gen_range(0.0..1.2),
                drng.gen_range(0.0..1.2),
                drng.gen_range(0.0..1.2),
            ]
        })
        .collect();
    let cloud = PointCloud::from_positions(positions)?;
    let levels = make_level_set(&config, &cloud)?;
    let feats = assemble_features(&config.input_features, &levels.levels[0])?;
    let err = grad_check_params(
        &mut store,
        move |g, store, binding| {
            let input = g.constant(feats.clone());
            let logits = {
                let mut ctx = FwdCtx { graph: g, store, binding, training: false };
                net.forward(&mut ctx, &levels, input)?
            };
            let sq = g.mul(logits, logits)?;
            g.sum_all(sq)
        },
        NET_EPS,
    )?;
    Ok(vec![CheckItem {
        name: "pyramid_l3_12pt".into(),
        max_err: err,
        threshold: NET_THRESHOLD,
    }])
}

/// Deliberately inconsistent probe: the analytic pass evaluates sum(x*x),
/// every finite-difference probe evaluates sum(x*x + x). The measured
/// disagreement (~1.0) must blow the threshold, proving the harness cannot
/// silently bless a broken backward.
pub fn broken_backward_item() -> Result<CheckItem> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let x0 = crate::params::uniform_init(&mut rng, vec![3, 2], 1.0);
    store.register("probe.x", x0)?;
    let calls = Cell::new(0usize);
    let err = grad_check_params(
        &mut store,
        move |g, store, binding| {
            let first = calls.get() == 0;
            calls.set(calls.get() + 1);
            let id = store.lookup("probe.x").expect("registered above");
            let x = binding.bind(store, g, id);
            let sq = g.mul(x, x)?;
            if first {
                g.sum_all(sq)
            } else {
                let shifted = g.add(sq, x)?;
                g.sum_all(shifted)
            }
        },
        OP_EPS,
    )?;
    Ok(CheckItem {
        name: "self_test_inconsistent_backward".into(),
        max_err: err,
        threshold: OP_THRESHOLD,
    })
}
