//! The full pyramid network: an encoder ladder of recurrent FKP bottlenecks
//! joined by strided bottlenecks, one decoder chain spawned from every
//! encoder level >= `pyramid_start`, and a two-layer segmentation head over
//! the concatenated chain outputs at the finest level.
//!
//! Chains are built deepest-first; a chain's stage at level r consumes the
//! upsampled previous stage, the encoder output at r, and every
//! deeper chain's stage output at r.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::rc::Rc;

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Value};
use crate::blocks::{
    DecoderStage, FwdCtx, Normalization, RfkpBottleneck, StridedBottleneck, UnaryConv,
};
use crate::conv::{kp_correlation, make_disposition, relative_positions, AttentionMode, KernelDisposition};
use crate::params::ParamStore;
use crate::spatial::{build_levels, nearest_upsample_index, LevelSet, PointCloud};
use crate::{derive_seed, Error, Result};

use rand::SeedableRng;

pub const HEAD_HIDDEN: usize = 64;

fn default_levels() -> usize {
    5
}
fn default_feature_dims() -> Vec<usize> {
    vec![64, 128, 256, 512, 1024]
}
fn default_pyramid_start() -> usize {
    3
}
fn default_class_count() -> usize {
    8
}
fn default_hidden_layers() -> usize {
    3
}
fn default_attention() -> AttentionMode {
    AttentionMode::MaxMean
}
fn default_kernel_points() -> usize {
    15
}
fn default_radius_factor() -> f64 {
    2.5
}
fn default_influence_factor() -> f64 {
    0.5
}
fn default_base_cell() -> f64 {
    0.25
}
fn default_input_sphere_radius() -> f64 {
    15.0
}
fn default_input_features() -> Vec<String> {
    vec!["one".into(), "height".into()]
}
fn default_neighbor_cap() -> usize {
    40
}

/// Architecture and geometry settings for one network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Pyramid depth L; level 1 is the finest.
    #[serde(default = "default_levels")]
    pub levels: usize,
    /// Encoder output width per level, strictly increasing.
    #[serde(default = "default_feature_dims")]
    pub feature_dims: Vec<usize>,
    /// First level that spawns a decoder chain (2..=levels). `levels`
    /// collapses the pyramid to a single U chain.
    #[serde(default = "default_pyramid_start")]
    pub pyramid_start: usize,
    #[serde(default = "default_class_count")]
    pub class_count: usize,
    /// Recurrent steps inside each encoder bottleneck.
    #[serde(default = "default_hidden_layers")]
    pub hidden_layers: usize,
    #[serde(default = "default_attention")]
    pub attention: AttentionMode,
    #[serde(default = "default_kernel_points")]
    pub kernel_points: usize,
    /// Convolution radius = factor * cell size of the level.
    #[serde(default = "default_radius_factor")]
    pub radius_factor: f64,
    /// Kernel point influence = factor * convolution radius.
    #[serde(default = "default_influence_factor")]
    pub influence_factor: f64,
    /// Level-1 voxel size in meters; doubles per level.
    #[serde(default = "default_base_cell")]
    pub base_cell: f64,
    /// Radius of the spherical crops batches are drawn from.
    #[serde(default = "default_input_sphere_radius")]
    pub input_sphere_radius: f64,
    /// Per-point input columns: "one", "height", "rgb", "intensity".
    #[serde(default = "default_input_features")]
    pub input_features: Vec<String>,
    /// Neighbor count cap per query in all tables.
    #[serde(default = "default_neighbor_cap")]
    pub neighbor_cap: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            levels: default_levels(),
            feature_dims: default_feature_dims(),
            pyramid_start: default_pyramid_start(),
            class_count: default_class_count(),
            hidden_layers: default_hidden_layers(),
            attention: default_attention(),
            kernel_points: default_kernel_points(),
            radius_factor: default_radius_factor(),
            influence_factor: default_influence_factor(),
            base_cell: default_base_cell(),
            input_sphere_radius: default_input_sphere_radius(),
            input_features: default_input_features(),
            neighbor_cap: default_neighbor_cap(),
            seed: 0,
        }
    }
}

const FEATURE_TOKENS: [&str; 4] = ["one", "height", "rgb", "intensity"];

impl NetworkConfig {
    /// Check every invariant and report all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut faults = Vec::new();
        if self.levels < 2 {
            faults.push(format!("levels must be at least 2, got {}", self.levels));
        }
        if self.feature_dims.len() != self.levels {
            faults.push(format!(
                "feature_dims has {} entries for {} levels",
                self.feature_dims.len(),
                self.levels
            ));
        }
        if self.feature_dims.windows(2).any(|w| w[1] <= w[0]) || self.feature_dims.contains(&0) {
            faults.push(format!(
                "feature_dims must be strictly increasing and positive, got {:?}",
                self.feature_dims
            ));
        }
        if self.pyramid_start < 2 || self.pyramid_start > self.levels {
            faults.push(format!(
                "pyramid_start must lie in [2, levels={}], got {}",
                self.levels, self.pyramid_start
            ));
        }
        if self.class_count < 2 {
            faults.push(format!("class_count must be at least 2, got {}", self.class_count));
        }
        if self.kernel_points < 2 {
            faults.push(format!("kernel_points must be at least 2, got {}", self.kernel_points));
        }
        for (name, v) in [
            ("radius_factor", self.radius_factor),
            ("influence_factor", self.influence_factor),
            ("base_cell", self.base_cell),
            ("input_sphere_radius", self.input_sphere_radius),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                faults.push(format!("{} must be positive and finite, got {}", name, v));
            }
        }
        if self.input_features.is_empty() {
            faults.push("input_features must not be empty".into());
        }
        for tok in &self.input_features {
            if !FEATURE_TOKENS.contains(&tok.as_str()) {
                faults.push(format!(
                    "unknown input feature {:?}; expected one of {:?}",
                    tok, FEATURE_TOKENS
                ));
            }
        }
        if self.neighbor_cap == 0 {
            faults.push("neighbor_cap must be at least 1".into());
        }
        if faults.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(faults.join("; ")))
        }
    }

    /// Width of the assembled input feature matrix.
    pub fn input_width(&self) -> usize {
        self.input_features
            .iter()
            .map(|t| if t == "rgb" { 3 } else { 1 })
            .sum()
    }

    pub fn cell_size(&self, level: usize) -> f64 {
        self.base_cell * (1u64 << (level - 1)) as f64
    }

    pub fn conv_radius(&self, level: usize) -> f64 {
        self.radius_factor * self.cell_size(level)
    }
}

/// Build the per-point input columns named by the recipe. "height" is
/// relative to the cloud's own minimum z so inputs stay translation
/// invariant; "rgb" and "intensity" are pulled from the cloud's features.
pub fn assemble_features(recipe: &[String], cloud: &PointCloud) -> Result<Array> {
    let n = cloud.len();
    let width: usize = recipe.iter().map(|t| if t == "rgb" { 3 } else { 1 }).sum();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for tok in recipe {
        match tok.as_str() {
            "one" => cols.push(vec![1.0; n]),
            "height" => {
                let min_z = cloud
                    .positions
                    .iter()
                    .map(|p| p[2])
                    .fold(f64::INFINITY, f64::min);
                cols.push(cloud.positions.iter().map(|p| p[2] - min_z).collect());
            }
            "rgb" => {
                for channel in ["red", "green", "blue"] {
                    cols.push(feature_column(cloud, channel)?);
                }
            }
            "intensity" => cols.push(feature_column(cloud, "intensity")?),
            other => {
                return Err(Error::Config(format!("unknown input feature {:?}", other)));
            }
        }
    }
    let mut data = vec![0.0; n * width];
    for (c, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            data[i * width + c] = v;
        }
    }
    Ok(Array::from_vec(vec![n, width], data))
}

fn feature_column(cloud: &PointCloud, name: &str) -> Result<Vec<f64>> {
    let idx = cloud
        .feature_names
        .iter()
        .position(|f| f == name)
        .ok_or_else(|| {
            Error::Config(format!(
                "input recipe needs feature {:?} but the cloud has {:?}",
                name, cloud.feature_names
            ))
        })?;
    Ok((0..cloud.len()).map(|i| cloud.feature_row(i)[idx]).collect())
}

/// One decoder chain: stages from `start_level` down to level 1.
pub struct DecoderChain {
    pub start_level: usize,
    /// `stages[j]` maps into level `start_level - 1 - j`.
    pub stages: Vec<DecoderStage>,
}

/// The assembled network. Blocks hold parameter ids into the store used at
/// build time; forward passes bind them into a fresh graph.
pub struct PyramidNet {
    pub config: NetworkConfig,
    /// `encoders[l]` consumes level l+1 features (width D_l) and emits D_{l+1}.
    pub encoders: Vec<RfkpBottleneck>,
    /// `strides[l]` pools encoder output l to level l+2.
    pub strides: Vec<StridedBottleneck>,
    /// Deepest chain first.
    pub chains: Vec<DecoderChain>,
    pub head_hidden: UnaryConv,
    pub head_logits: UnaryConv,
    /// One disposition per level, scaled to that level's conv radius; the
    /// strided conv out of level l reuses `dispositions[l]`.
    pub dispositions: Vec<KernelDisposition>,
}

/// Register every block of the pyramid in deterministic order. Two builds
/// from the same config produce identical registries.
pub fn build_network(config: &NetworkConfig, store: &mut ParamStore) -> Result<PyramidNet> {
    config.validate()?;
    let l_count = config.levels;
    let dims = &config.feature_dims;
    let norm = Normalization::Batch;
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(config.seed, "params"));

    let mut dispositions = Vec::with_capacity(l_count);
    for level in 1..=l_count {
        let radius = config.conv_radius(level);
        let mut disp = make_disposition(
            config.kernel_points,
            radius,
            derive_seed(config.seed, &format!("disposition.l{}", level)),
        )?;
        disp.influence = config.influence_factor * radius;
        dispositions.push(disp);
    }

    let mut encoders = Vec::with_capacity(l_count);
    let mut strides = Vec::with_capacity(l_count - 1);
    for level in 1..=l_count {
        let in_dim = if level == 1 { config.input_width() } else { dims[level - 2] };
        encoders.push(RfkpBottleneck::register(
            store,
            &mut rng,
            &format!("enc.l{}.rfkp", level),
            config.kernel_points,
            in_dim,
            dims[level - 1],
            config.hidden_layers,
            config.attention,
            norm,
        )?);
        if level < l_count {
            strides.push(StridedBottleneck::register(
                store,
                &mut rng,
                &format!("enc.l{}.strided", level),
                config.kernel_points,
                dims[level - 1],
                dims[level - 1],
                config.attention,
                norm,
            )?);
        }
    }

    let mut chains = Vec::new();
    for s in (config.pyramid_start..=l_count).rev() {
        let deeper = l_count - s;
        let mut stages = Vec::with_capacity(s - 1);
        for r in (1..s).rev() {
            let prev_width = if r == s - 1 { dims[s - 1] } else { dims[r] };
            let in_width = prev_width + dims[r - 1] * (1 + deeper);
            stages.push(DecoderStage::register(
                store,
                &mut rng,
                &format!("chain{}.to{}", s, r),
                in_width,
                dims[r - 1],
                norm,
            )?);
        }
        chains.push(DecoderChain { start_level: s, stages });
    }

    let head_width = (l_count - config.pyramid_start + 1) * dims[0];
    let head_hidden = UnaryConv::register(
        store,
        &mut rng,
        "head.hidden",
        head_width,
        HEAD_HIDDEN,
        norm,
        true,
    )?;
    let head_logits = UnaryConv::register(
        store,
        &mut rng,
        "head.logits",
        HEAD_HIDDEN,
        config.class_count,
        Normalization::None,
        false,
    )?;

    Ok(PyramidNet {
        config: config.clone(),
        encoders,
        strides,
        chains,
        head_hidden,
        head_logits,
        dispositions,
    })
}

/// Subsample and index a cloud exactly as this config's forward expects.
pub fn make_level_set(config: &NetworkConfig, cloud: &PointCloud) -> Result<LevelSet> {
    build_levels(
        cloud,
        config.base_cell,
        config.levels,
        config.radius_factor,
        config.neighbor_cap,
    )
}

impl PyramidNet {
    fn check_levels(&self, levels: &LevelSet) -> Result<()> {
        let l_count = self.config.levels;
        if levels.levels.len() != l_count {
            return Err(Error::Config(format!(
                "level set has {} levels, network expects {}",
                levels.levels.len(),
                l_count
            )));
        }
        for (i, &cell) in levels.cell_sizes.iter().enumerate() {
            let want = self.config.cell_size(i + 1);
            if (cell - want).abs() > 1e-12 * want {
                return Err(Error::Config(format!(
                    "level {} cell size {} does not match config value {}",
                    i + 1,
                    cell,
                    want
                )));
            }
        }
        Ok(())
    }

    /// Per-point class logits `[N_1, class_count]` for an indexed cloud.
    pub fn forward(&self, ctx: &mut FwdCtx, levels: &LevelSet, input: Value) -> Result<Value> {
        self.check_levels(levels)?;
        let l_count = self.config.levels;
        let shape = ctx.graph.shape(input).to_vec();
        if shape != [levels.levels[0].len(), self.config.input_width()] {
            return Err(Mismatch(levels.levels[0].len(), self.config.input_width(), shape).into());
        }

        // Encoder ladder: rfkp at the level, strided pool to the next.
        let mut enc_outs = Vec::with_capacity(l_count);
        let mut x = input;
        for l in 0..l_count {
            let pts = &levels.levels[l].positions;
            let rel = relative_positions(pts, pts, &levels.conv[l]);
            let corr = Rc::new(kp_correlation(&rel, &self.dispositions[l]));
            let e = self.encoders[l].forward(ctx, x, &levels.conv[l], corr)?;
            enc_outs.push(e);
            if l + 1 < l_count {
                let rel = relative_positions(
                    &levels.levels[l + 1].positions,
                    &levels.levels[l].positions,
                    &levels.pool[l],
                );
                let pool_corr = Rc::new(kp_correlation(&rel, &self.dispositions[l]));
                x = self.strides[l].forward(ctx, e, &levels.pool[l], pool_corr)?;
            }
        }

        // Chains, deepest first; `outputs[c][r-1]` is chain c's feature at
        // level r once built.
        let mut outputs: Vec<Vec<Option<Value>>> = Vec::with_capacity(self.chains.len());
        for (ci, chain) in self.chains.iter().enumerate() {
            let s = chain.start_level;
            let mut per_level = vec![None; l_count];
            let mut prev = enc_outs[s - 1];
            for (j, r) in (1..s).rev().enumerate() {
                let up = Rc::new(levels.upsample[r - 1].clone());
                let mut sides = vec![enc_outs[r - 1]];
                for deeper in outputs.iter().take(ci) {
                    sides.push(deeper[r - 1].expect("deeper chains cover every shallower level"));
                }
                prev = chain.stages[j].forward(ctx, prev, up, &sides)?;
                per_level[r - 1] = Some(prev);
            }
            outputs.push(per_level);
        }

        let fused: Vec<Value> = outputs
            .iter()
            .map(|per_level| per_level[0].expect("every chain reaches level 1"))
            .collect();
        let cat = ctx.graph.concat(&fused, 1)?;
        let hidden = self.head_hidden.forward(ctx, cat)?;
        self.head_logits.forward(ctx, hidden)
    }
}

struct Mismatch(usize, usize, Vec<usize>);

impl From<Mismatch> for Error {
    fn from(m: Mismatch) -> Error {
        Error::Dim(format!(
            "input features must be [{}, {}] for this level set, got {:?}",
            m.0, m.1, m.2
        ))
    }
}

/// Argmax class per finest-level point, propagated to the raw cloud by
/// nearest level-1 neighbor. Ties take the lowest class index.
pub fn predict_labels(logits: &Array, levels: &LevelSet, raw: &[[f64; 3]]) -> Result<Vec<u32>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != levels.levels[0].len() {
        return Err(Error::Dim(format!(
            "logits must be [{}, C], got {:?}",
            levels.levels[0].len(),
            shape
        )));
    }
    let classes = shape[1];
    let data = logits.data();
    let level_labels: Vec<u32> = (0..shape[0])
        .map(|i| {
            let row = &data[i * classes..(i + 1) * classes];
            let mut best = 0usize;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best as u32
        })
        .collect();
    let nearest = nearest_upsample_index(raw, &levels.levels[0].positions)?;
    Ok(nearest.iter().map(|&i| level_labels[i as usize]).collect())
}

/// Human-readable block table. The final line's totals equal the registry
/// totals exactly; every registered name belongs to exactly one block row.
pub fn summarize(net: &PyramidNet, store: &ParamStore) -> String {
    let mut rows: Vec<(String, String)> = Vec::new();
    let dims = &net.config.feature_dims;
    let input_w = net.config.input_width();
    for level in 1..=net.config.levels {
        let in_dim = if level == 1 { input_w } else { dims[level - 2] };
        rows.push((
            format!("enc.l{}.rfkp", level),
            format!("{} -> {}", in_dim, dims[level - 1]),
        ));
        if level < net.config.levels {
            rows.push((
                format!("enc.l{}.strided", level),
                format!("{0} -> {0}", dims[level - 1]),
            ));
        }
    }
    for chain in &net.chains {
        let s = chain.start_level;
        for (j, r) in (1..s).rev().enumerate() {
            rows.push((
                format!("chain{}.to{}", s, r),
                format!("{} -> {}", chain.stages[j].in_width, dims[r - 1]),
            ));
        }
    }
    rows.push((
        "head.hidden".into(),
        format!("{} -> {}", net.head_hidden.in_dim, HEAD_HIDDEN),
    ));
    rows.push((
        "head.logits".into(),
        format!("{} -> {}", HEAD_HIDDEN, net.config.class_count),
    ));

    let mut out = String::new();
    out.push_str(&format!("{:<18} {:>14} {:>10} {:>9}\n", "block", "width", "params", "buffers"));
    let (mut tp, mut tb) = (0usize, 0usize);
    for (prefix, width) in &rows {
        let (mut p, mut b) = (0usize, 0usize);
        let dotted = format!("{}.", prefix);
        for id in store.ids() {
            if store.name(id).starts_with(&dotted) {
                if store.trainable(id) {
                    p += store.value(id).numel();
                } else {
                    b += store.value(id).numel();
                }
            }
        }
        tp += p;
        tb += b;
        out.push_str(&format!("{:<18} {:>14} {:>10} {:>9}\n", prefix, width, p, b));
    }
    out.push_str(&format!("{:<18} {:>14} {:>10} {:>9}\n", "total", "", tp, tb));
    out
}

// ---- checkpoint format ----
//
// magic "PYRPTCK1", then length-prefixed config JSON, then the registry in
// registration order (name, trainable flag, shape, value and momentum blobs
// as little-endian f64), then length-prefixed trainer-state JSON.

const CKPT_MAGIC: &[u8; 8] = b"PYRPTCK1";

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_bytes(w: &mut impl Write, b: &[u8]) -> Result<()> {
    write_u64(w, b.len() as u64)?;
    w.write_all(b)?;
    Ok(())
}

fn write_f64s(w: &mut impl Write, vs: &[f64]) -> Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read, cap: u64) -> Result<Vec<u8>> {
    let n = read_u64(r)?;
    if n > cap {
        return Err(Error::Checkpoint(format!("section length {} exceeds cap {}", n, cap)));
    }
    let mut buf = vec![0u8; n as usize];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Write config, every parameter and buffer with momentum, and an opaque
/// trainer-state JSON document.
pub fn save_checkpoint(
    path: &Path,
    config: &NetworkConfig,
    store: &ParamStore,
    state_json: &str,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    let cfg = serde_json::to_vec(config)
        .map_err(|e| Error::Checkpoint(format!("config does not serialize: {}", e)))?;
    write_bytes(&mut w, &cfg)?;
    write_u64(&mut w, store.len() as u64)?;
    for id in store.ids() {
        write_bytes(&mut w, store.name(id).as_bytes())?;
        w.write_all(&[store.trainable(id) as u8])?;
        let value = store.value(id);
        write_u64(&mut w, value.shape().len() as u64)?;
        for &d in value.shape() {
            write_u64(&mut w, d as u64)?;
        }
        write_f64s(&mut w, value.data())?;
        write_f64s(&mut w, store.momentum(id))?;
    }
    write_bytes(&mut w, state_json.as_bytes())?;
    w.flush()?;
    Ok(())
}

/// A restored network with its parameter store and trainer state.
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub net: PyramidNet,
    pub store: ParamStore,
    pub state_json: String,
}

/// Rebuild the network from the embedded config and load every entry,
/// verifying names and shapes against the fresh registry in order.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}; not a checkpoint file",
            String::from_utf8_lossy(&magic)
        )));
    }
    let cfg_bytes = read_bytes(&mut r, 1 << 20)?;
    let config: NetworkConfig = serde_json::from_slice(&cfg_bytes)
        .map_err(|e| Error::Checkpoint(format!("embedded config does not parse: {}", e)))?;
    let mut store = ParamStore::new();
    let net = build_network(&config, &mut store)?;

    let count = read_u64(&mut r)? as usize;
    if count != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} entries, network registers {}",
            count,
            store.len()
        )));
    }
    for id in store.ids().collect::<Vec<_>>() {
        let name = String::from_utf8(read_bytes(&mut r, 1 << 16)?)
            .map_err(|e| Error::Checkpoint(format!("entry name is not utf-8: {}", e)))?;
        if name != store.name(id) {
            return Err(Error::Checkpoint(format!(
                "entry {:?} does not match registry entry {:?}",
                name,
                store.name(id)
            )));
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        if (flag[0] != 0) != store.trainable(id) {
            return Err(Error::Checkpoint(format!(
                "entry {:?} trainable flag {} does not match registry",
                name, flag[0]
            )));
        }
        let ndim = read_u64(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        if shape != store.value(id).shape() {
            return Err(Error::Checkpoint(format!(
                "entry {:?} has shape {:?}, registry expects {:?}",
                name,
                shape,
                store.value(id).shape()
            )));
        }
        let n = store.value(id).numel();
        let value = read_f64s(&mut r, n)?;
        let momentum = read_f64s(&mut r, n)?;
        store.value_mut(id).data_mut().copy_from_slice(&value);
        store.momentum_mut(id).copy_from_slice(&momentum);
    }
    let state_json = String::from_utf8(read_bytes(&mut r, 1 << 20)?)
        .map_err(|e| Error::Checkpoint(format!("trainer state is not utf-8: {}", e)))?;
    Ok(Checkpoint { config, net, store, state_json })
}
