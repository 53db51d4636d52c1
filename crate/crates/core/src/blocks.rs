//! Network building blocks: unary convolution with optional batch
//! normalization, the recurrent FKP bottleneck, the strided FKP bottleneck,
//! and the decoder stage.
//!
//! Blocks own parameter ids; every forward binds fresh leaves into the
//! caller's graph, so one block instance can run any number of passes.

use std::rc::Rc;

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph, IndexTable, Value};
use crate::conv::{fkp_conv, strided_fkp_conv, AttentionMlp, AttentionMode, FkpWeights};
use crate::params::{
    kernel_weight_init, linear_weight_init, Binding, ParamId, ParamStore,
};
use crate::spatial::NeighborTable;
use crate::Result;

pub const LEAKY_SLOPE: f64 = 0.1;
pub const BN_EPS: f64 = 1e-6;
pub const BN_MOMENTUM: f64 = 0.99;
/// Width reduction of bottleneck middles and attention hidden layers.
pub const BOTTLENECK_RATIO: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Batch,
    None,
}

/// Everything a forward pass threads through the blocks. `training`
/// selects batch statistics (with running updates) over frozen statistics.
pub struct FwdCtx<'a> {
    pub graph: &'a mut Graph,
    pub store: &'a mut ParamStore,
    pub binding: &'a mut Binding,
    pub training: bool,
}

/// Batch normalization over the point axis.
pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    run_mean: ParamId,
    run_var: ParamId,
}

impl BatchNorm {
    pub fn register(store: &mut ParamStore, prefix: &str, width: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.register(&format!("{}.gamma", prefix), Array::filled(vec![width], 1.0))?,
            beta: store.register(&format!("{}.beta", prefix), Array::zeros(vec![width]))?,
            run_mean: store
                .register_buffer(&format!("{}.run_mean", prefix), Array::zeros(vec![width]))?,
            run_var: store
                .register_buffer(&format!("{}.run_var", prefix), Array::filled(vec![width], 1.0))?,
        })
    }

    pub fn forward(&self, ctx: &mut FwdCtx, x: Value) -> Result<Value> {
        let gamma = ctx.binding.bind(ctx.store, ctx.graph, self.gamma);
        let beta = ctx.binding.bind(ctx.store, ctx.graph, self.beta);
        let g = &mut *ctx.graph;
        let (centered, inv) = if ctx.training {
            let mean = g.mean(x, 0)?;
            let centered = g.sub(x, mean)?;
            let sq = g.mul(centered, centered)?;
            let var = g.mean(sq, 0)?;
            let batch_mean = g.data(mean).to_vec();
            let batch_var = g.data(var).to_vec();
            for (r, b) in ctx
                .store
                .value_mut(self.run_mean)
                .data_mut()
                .iter_mut()
                .zip(batch_mean.iter())
            {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
            for (r, b) in ctx
                .store
                .value_mut(self.run_var)
                .data_mut()
                .iter_mut()
                .zip(batch_var.iter())
            {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
            let inv = g.rsqrt_shift(var, BN_EPS);
            (centered, inv)
        } else {
            let mean = g.constant(ctx.store.value(self.run_mean).clone());
            let var = g.constant(ctx.store.value(self.run_var).clone());
            let centered = g.sub(x, mean)?;
            let inv = g.rsqrt_shift(var, BN_EPS);
            (centered, inv)
        };
        let xhat = g.mul(centered, inv)?;
        let scaled = g.mul(xhat, gamma)?;
        g.add(scaled, beta)
    }
}

/// Pointwise linear map, optional batch norm, optional leaky ReLU.
pub struct UnaryConv {
    w: ParamId,
    b: ParamId,
    norm: Option<BatchNorm>,
    activation: bool,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl UnaryConv {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha20Rng,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        norm: Normalization,
        activation: bool,
    ) -> Result<Self> {
        let w = store.register(&format!("{}.w", prefix), linear_weight_init(rng, in_dim, out_dim))?;
        let b = store.register(&format!("{}.b", prefix), Array::zeros(vec![out_dim]))?;
        let norm = match norm {
            Normalization::Batch => Some(BatchNorm::register(store, &format!("{}.bn", prefix), out_dim)?),
            Normalization::None => None,
        };
        Ok(UnaryConv { w, b, norm, activation, in_dim, out_dim })
    }

    pub fn forward(&self, ctx: &mut FwdCtx, x: Value) -> Result<Value> {
        let w = ctx.binding.bind(ctx.store, ctx.graph, self.w);
        let b = ctx.binding.bind(ctx.store, ctx.graph, self.b);
        let y = ctx.graph.matmul(x, w)?;
        let mut y = ctx.graph.add(y, b)?;
        if let Some(bn) = &self.norm {
            y = bn.forward(ctx, y)?;
        }
        if self.activation {
            y = ctx.graph.leaky_relu(y, LEAKY_SLOPE);
        }
        Ok(y)
    }
}

/// Parameter ids backing one FKP convolution; bound per pass.
pub struct FkpParams {
    per_kernel: ParamId,
    attention: Option<(ParamId, ParamId, ParamId, ParamId)>,
    pub mode: AttentionMode,
    pub d_in: usize,
    pub d_out: usize,
}

impl FkpParams {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha20Rng,
        prefix: &str,
        kernel_points: usize,
        d_in: usize,
        d_out: usize,
        mode: AttentionMode,
    ) -> Result<Self> {
        let per_kernel = store.register(
            &format!("{}.kernels", prefix),
            kernel_weight_init(rng, kernel_points, d_in, d_out),
        )?;
        let attention = if mode == AttentionMode::None {
            None
        } else {
            let input = mode.input_width(d_out);
            let hidden = (d_out / BOTTLENECK_RATIO).max(1);
            let w1 = store.register(
                &format!("{}.attn.w1", prefix),
                linear_weight_init(rng, input, hidden),
            )?;
            let b1 = store.register(&format!("{}.attn.b1", prefix), Array::zeros(vec![hidden]))?;
            let w2 = store.register(
                &format!("{}.attn.w2", prefix),
                linear_weight_init(rng, hidden, d_out),
            )?;
            let b2 = store.register(&format!("{}.attn.b2", prefix), Array::zeros(vec![d_out]))?;
            Some((w1, b1, w2, b2))
        };
        Ok(FkpParams { per_kernel, attention, mode, d_in, d_out })
    }

    pub fn bind(&self, ctx: &mut FwdCtx) -> FkpWeights {
        FkpWeights {
            per_kernel: ctx.binding.bind(ctx.store, ctx.graph, self.per_kernel),
            attention: self.attention.map(|(w1, b1, w2, b2)| AttentionMlp {
                w1: ctx.binding.bind(ctx.store, ctx.graph, w1),
                b1: ctx.binding.bind(ctx.store, ctx.graph, b1),
                w2: ctx.binding.bind(ctx.store, ctx.graph, w2),
                b2: ctx.binding.bind(ctx.store, ctx.graph, b2),
            }),
        }
    }
}

/// Recurrent FKP: `z_0 = FKP_f(x)`, `z_t = FKP_f(x) + FKP_r(z_{t-1})`.
/// The feed-forward term is one shared graph node across all steps; both
/// weight sets are shared across steps.
pub fn recurrent_fkp(
    g: &mut Graph,
    x: Value,
    table: &NeighborTable,
    correlations: Rc<Array>,
    forward_weights: &FkpWeights,
    recurrent_weights: &FkpWeights,
    mode: AttentionMode,
    hidden_layers: usize,
) -> Result<Value> {
    let feed = fkp_conv(g, x, table, correlations.clone(), forward_weights, mode)?;
    let mut z = feed;
    for _ in 0..hidden_layers {
        let rec = fkp_conv(g, z, table, correlations.clone(), recurrent_weights, mode)?;
        z = g.add(feed, rec)?;
    }
    Ok(z)
}

/// Residual bottleneck around a recurrent FKP at one level.
pub struct RfkpBottleneck {
    pub unary_in: UnaryConv,
    pub fkp_f: FkpParams,
    pub fkp_r: FkpParams,
    pub unary_out: UnaryConv,
    pub shortcut: Option<UnaryConv>,
    pub hidden_layers: usize,
    pub mode: AttentionMode,
}

impl RfkpBottleneck {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha20Rng,
        prefix: &str,
        kernel_points: usize,
        in_dim: usize,
        out_dim: usize,
        hidden_layers: usize,
        mode: AttentionMode,
        norm: Normalization,
    ) -> Result<Self> {
        let mid = (out_dim / BOTTLENECK_RATIO).max(1);
        let unary_in = UnaryConv::register(store, rng, &format!("{}.in", prefix), in_dim, mid, norm, true)?;
        let fkp_f =
            FkpParams::register(store, rng, &format!("{}.fkp_f", prefix), kernel_points, mid, mid, mode)?;
        let fkp_r =
            FkpParams::register(store, rng, &format!("{}.fkp_r", prefix), kernel_points, mid, mid, mode)?;
        let unary_out =
            UnaryConv::register(store, rng, &format!("{}.out", prefix), mid, out_dim, norm, false)?;
        let shortcut = if in_dim == out_dim {
            None
        } else {
            Some(UnaryConv::register(
                store,
                rng,
                &format!("{}.shortcut", prefix),
                in_dim,
                out_dim,
                norm,
                false,
            )?)
        };
        Ok(RfkpBottleneck { unary_in, fkp_f, fkp_r, unary_out, shortcut, hidden_layers, mode })
    }

    pub fn forward(
        &self,
        ctx: &mut FwdCtx,
        x: Value,
        table: &NeighborTable,
        correlations: Rc<Array>,
    ) -> Result<Value> {
        let u = self.unary_in.forward(ctx, x)?;
        let fw = self.fkp_f.bind(ctx);
        let rw = self.fkp_r.bind(ctx);
        let z = recurrent_fkp(
            ctx.graph,
            u,
            table,
            correlations,
            &fw,
            &rw,
            self.mode,
            self.hidden_layers,
        )?;
        let v = ctx.graph.leaky_relu(z, LEAKY_SLOPE);
        let w = self.unary_out.forward(ctx, v)?;
        let s = match &self.shortcut {
            Some(sc) => sc.forward(ctx, x)?,
            None => x,
        };
        let sum = ctx.graph.add(w, s)?;
        Ok(ctx.graph.leaky_relu(sum, LEAKY_SLOPE))
    }
}

/// Residual bottleneck whose middle convolution is strided onto the next
/// coarser level; the shortcut is a masked neighborhood max-pool followed
/// by a width-matching unary map.
pub struct StridedBottleneck {
    pub unary_in: UnaryConv,
    pub fkp: FkpParams,
    pub unary_out: UnaryConv,
    pub shortcut: UnaryConv,
    pub mode: AttentionMode,
}

impl StridedBottleneck {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha20Rng,
        prefix: &str,
        kernel_points: usize,
        in_dim: usize,
        out_dim: usize,
        mode: AttentionMode,
        norm: Normalization,
    ) -> Result<Self> {
        let mid = (out_dim / BOTTLENECK_RATIO).max(1);
        let unary_in = UnaryConv::register(store, rng, &format!("{}.in", prefix), in_dim, mid, norm, true)?;
        let fkp =
            FkpParams::register(store, rng, &format!("{}.fkp", prefix), kernel_points, mid, mid, mode)?;
        let unary_out =
            UnaryConv::register(store, rng, &format!("{}.out", prefix), mid, out_dim, norm, false)?;
        let shortcut = UnaryConv::register(
            store,
            rng,
            &format!("{}.shortcut", prefix),
            in_dim,
            out_dim,
            norm,
            false,
        )?;
        Ok(StridedBottleneck { unary_in, fkp, unary_out, shortcut, mode })
    }

    pub fn forward(
        &self,
        ctx: &mut FwdCtx,
        x_fine: Value,
        pool_table: &NeighborTable,
        pool_correlations: Rc<Array>,
    ) -> Result<Value> {
        let u = self.unary_in.forward(ctx, x_fine)?;
        let fw = self.fkp.bind(ctx);
        let z = strided_fkp_conv(ctx.graph, u, pool_table, pool_correlations, &fw, self.mode)?;
        let v = ctx.graph.leaky_relu(z, LEAKY_SLOPE);
        let w = self.unary_out.forward(ctx, v)?;
        let pooled = ctx.graph.masked_row_max(x_fine, &pool_table.as_index_table())?;
        let s = self.shortcut.forward(ctx, pooled)?;
        let sum = ctx.graph.add(w, s)?;
        Ok(ctx.graph.leaky_relu(sum, LEAKY_SLOPE))
    }
}

/// Nearest upsampling of coarse features followed by a unary convolution
/// over the concatenation with same-level side inputs.
pub struct DecoderStage {
    pub unary: UnaryConv,
    pub in_width: usize,
}

impl DecoderStage {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha20Rng,
        prefix: &str,
        in_width: usize,
        out_dim: usize,
        norm: Normalization,
    ) -> Result<Self> {
        let unary = UnaryConv::register(store, rng, &format!("{}.unary", prefix), in_width, out_dim, norm, true)?;
        Ok(DecoderStage { unary, in_width })
    }

    pub fn forward(
        &self,
        ctx: &mut FwdCtx,
        coarse: Value,
        upsample_index: Rc<Vec<u32>>,
        side_inputs: &[Value],
    ) -> Result<Value> {
        let n_fine = upsample_index.len();
        let n_coarse = ctx.graph.shape(coarse)[0];
        let d = ctx.graph.shape(coarse)[1];
        let table = IndexTable::new(upsample_index, n_fine, 1, n_coarse as u32);
        let g = &mut *ctx.graph;
        let gathered = g.gather_rows(coarse, &table)?;
        let up = g.reshape(gathered, vec![n_fine, d])?;
        let mut parts = vec![up];
        parts.extend_from_slice(side_inputs);
        let cat = g.concat(&parts, 1)?;
        self.unary.forward(ctx, cat)
    }
}
