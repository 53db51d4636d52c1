//! Grid subsampling, fixed-radius neighbor search, and the pooling and
//! upsampling index tables that tie pyramid levels together.
//!
//! Everything here is deterministic: voxel outputs follow lexicographic
//! voxel-key order, neighbor rows are sorted by (distance, index), and
//! nearest-point ties break to the lowest index. The accelerated searches
//! are contractually identical to brute-force scans.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::rc::Rc;

use crate::autodiff::IndexTable;
use crate::{Error, Result};

/// A point set with per-point features and optional class labels.
#[derive(Clone, Debug)]
pub struct PointCloud {
    pub positions: Vec<[f64; 3]>,
    /// Row-major N x feature_width.
    pub features: Vec<f64>,
    pub feature_width: usize,
    pub feature_names: Vec<String>,
    pub labels: Option<Vec<u32>>,
    pub class_count: usize,
}

impl PointCloud {
    pub fn new(
        positions: Vec<[f64; 3]>,
        features: Vec<f64>,
        feature_width: usize,
        feature_names: Vec<String>,
        labels: Option<Vec<u32>>,
        class_count: usize,
    ) -> Result<Self> {
        let cloud = PointCloud { positions, features, feature_width, feature_names, labels, class_count };
        cloud.validate()?;
        Ok(cloud)
    }

    /// Positions only; features default to a single all-ones column.
    pub fn from_positions(positions: Vec<[f64; 3]>) -> Result<Self> {
        let n = positions.len();
        PointCloud::new(positions, vec![1.0; n], 1, vec!["one".to_string()], None, 0)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_width..(i + 1) * self.feature_width]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if self.features.len() != n * self.feature_width {
            return Err(Error::Dim(format!(
                "{} feature values for {} points of width {}",
                self.features.len(),
                n,
                self.feature_width
            )));
        }
        if self.feature_names.len() != self.feature_width {
            return Err(Error::Dim(format!(
                "{} feature names for width {}",
                self.feature_names.len(),
                self.feature_width
            )));
        }
        for (i, p) in self.positions.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::Degenerate(format!("non-finite position at point {}", i)));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(Error::Dim(format!("{} labels for {} points", labels.len(), n)));
            }
        }
        Ok(())
    }
}

/// Per-query neighbor indices into a support cloud, padded with the shadow
/// index (== support size). Rows are sorted nearest-first.
#[derive(Clone, Debug)]
pub struct NeighborTable {
    pub indices: Rc<Vec<u32>>,
    pub rows: usize,
    pub width: usize,
    /// Shadow index, equal to the support point count.
    pub shadow: u32,
    pub counts: Vec<u32>,
    /// Query radius the table was built with.
    pub radius: f64,
}

impl NeighborTable {
    pub fn row(&self, i: usize) -> &[u32] {
        &self.indices[i * self.width..(i + 1) * self.width]
    }

    pub fn as_index_table(&self) -> IndexTable {
        IndexTable::new(self.indices.clone(), self.rows, self.width, self.shadow)
    }
}

/// All per-level structure the network consumes. Level indices are
/// 1-based in the docs; vectors here are 0-based with `levels[0]` = level 1.
#[derive(Clone, Debug)]
pub struct LevelSet {
    pub levels: Vec<PointCloud>,
    pub cell_sizes: Vec<f64>,
    /// Self-neighborhoods per level, radius = factor * cell.
    pub conv: Vec<NeighborTable>,
    /// `pool[l]`: queries at level l+2 (1-based), supports at level l+1.
    pub pool: Vec<NeighborTable>,
    /// `upsample[l][i]`: nearest coarse-level point for fine point i.
    pub upsample: Vec<Vec<u32>>,
}

fn voxel_key(p: &[f64; 3], cell: f64) -> (i64, i64, i64) {
    (
        (p[0] / cell).floor() as i64,
        (p[1] / cell).floor() as i64,
        (p[2] / cell).floor() as i64,
    )
}

/// Collapse the cloud onto a voxel grid: one point per occupied cell at the
/// member barycenter, mean features, majority label (ties to the smallest
/// class index). Output follows lexicographic voxel-key order.
pub fn grid_subsample(cloud: &PointCloud, cell_size: f64) -> Result<PointCloud> {
    if cell_size <= 0.0 {
        return Err(Error::Config(format!("cell size must be positive, got {}", cell_size)));
    }
    if cloud.is_empty() {
        return Err(Error::Degenerate("grid_subsample of an empty cloud".into()));
    }
    let mut buckets: BTreeMap<(i64, i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.positions.iter().enumerate() {
        buckets.entry(voxel_key(p, cell_size)).or_default().push(i);
    }
    let f = cloud.feature_width;
    let mut positions = Vec::with_capacity(buckets.len());
    let mut features = Vec::with_capacity(buckets.len() * f);
    let mut labels = cloud.labels.as_ref().map(|_| Vec::with_capacity(buckets.len()));
    for members in buckets.values() {
        let inv = 1.0 / members.len() as f64;
        let mut pos = [0.0; 3];
        let mut feat = vec![0.0; f];
        for &i in members {
            for a in 0..3 {
                pos[a] += cloud.positions[i][a];
            }
            for (fv, &v) in feat.iter_mut().zip(cloud.feature_row(i)) {
                *fv += v;
            }
        }
        for a in &mut pos {
            *a *= inv;
        }
        for v in &mut feat {
            *v *= inv;
        }
        positions.push(pos);
        features.extend_from_slice(&feat);
        if let (Some(out), Some(src)) = (labels.as_mut(), cloud.labels.as_ref()) {
            let mut votes: BTreeMap<u32, usize> = BTreeMap::new();
            for &i in members {
                *votes.entry(src[i]).or_insert(0) += 1;
            }
            // BTreeMap iterates labels ascending, so > keeps the smallest
            // class on tied counts.
            let mut best = (0u32, 0usize);
            for (&label, &count) in &votes {
                if count > best.1 {
                    best = (label, count);
                }
            }
            out.push(best.0);
        }
    }
    PointCloud::new(positions, features, f, cloud.feature_names.clone(), labels, cloud.class_count)
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// For each query, the support points within `radius`, nearest-first,
/// truncated to `cap`. Accelerated with a voxel grid of cell = radius; the
/// result is identical to a full O(M*N) scan.
pub fn radius_neighbors(
    queries: &[[f64; 3]],
    supports: &[[f64; 3]],
    radius: f64,
    cap: usize,
) -> Result<NeighborTable> {
    if radius <= 0.0 {
        return Err(Error::Config(format!("radius must be positive, got {}", radius)));
    }
    if cap == 0 {
        return Err(Error::Config("neighbor cap must be at least 1".into()));
    }
    let mut grid: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
    for (i, p) in supports.iter().enumerate() {
        grid.entry(voxel_key(p, radius)).or_default().push(i as u32);
    }
    let r2 = radius * radius;
    let mut rows: Vec<Vec<(f64, u32)>> = Vec::with_capacity(queries.len());
    let mut max_count = 0usize;
    for q in queries {
        let (kx, ky, kz) = voxel_key(q, radius);
        let mut found: Vec<(f64, u32)> = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(cell) = grid.get(&(kx + dx, ky + dy, kz + dz)) {
                        for &i in cell {
                            let d2 = dist2(q, &supports[i as usize]);
                            if d2 <= r2 {
                                found.push((d2, i));
                            }
                        }
                    }
                }
            }
        }
        found.sort_by(|a, b| a.partial_cmp(b).unwrap());
        found.truncate(cap);
        max_count = max_count.max(found.len());
        rows.push(found);
    }
    let width = max_count.max(1).min(cap);
    let shadow = supports.len() as u32;
    let mut indices = vec![shadow; queries.len() * width];
    let mut counts = vec![0u32; queries.len()];
    for (r, found) in rows.iter().enumerate() {
        counts[r] = found.len() as u32;
        for (slot, &(_, i)) in found.iter().enumerate() {
            indices[r * width + slot] = i;
        }
    }
    Ok(NeighborTable {
        indices: Rc::new(indices),
        rows: queries.len(),
        width,
        shadow,
        counts,
        radius,
    })
}

/// Index of the nearest coarse point for every fine point, ties to the
/// lowest index. Grid-accelerated ring search, identical to a brute scan.
pub fn nearest_upsample_index(fine: &[[f64; 3]], coarse: &[[f64; 3]]) -> Result<Vec<u32>> {
    if coarse.is_empty() {
        return Err(Error::Degenerate("nearest_upsample_index with no coarse points".into()));
    }
    // Cell size from the coarse bounding box keeps ring counts small for
    // both clustered and spread-out inputs.
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in coarse {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(hi[2] - lo[2]);
    let cell = if extent > 0.0 {
        (extent / (coarse.len() as f64).cbrt().max(1.0)).max(extent * 1e-9)
    } else {
        1.0
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
    for (i, p) in coarse.iter().enumerate() {
        grid.entry(voxel_key(p, cell)).or_default().push(i as u32);
    }
    let mut out = Vec::with_capacity(fine.len());
    for q in fine {
        let (kx, ky, kz) = voxel_key(q, cell);
        let mut best = (f64::INFINITY, u32::MAX);
        let mut ring = 0i64;
        loop {
            // Any point in ring k lies at least (k-1)*cell away, so once
            // that bound exceeds the best distance the search is complete.
            if best.1 != u32::MAX && ((ring - 1).max(0) as f64) * cell > best.0.sqrt() {
                break;
            }
            let mut visited_any = false;
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        if let Some(cellv) = grid.get(&(kx + dx, ky + dy, kz + dz)) {
                            visited_any = true;
                            for &i in cellv {
                                let d2 = dist2(q, &coarse[i as usize]);
                                if (d2, i) < best {
                                    best = (d2, i);
                                }
                            }
                        }
                    }
                }
            }
            // Rings beyond the grid's occupied extent hold nothing; once a
            // candidate exists, emptiness past it cannot improve the answer.
            ring += 1;
            if !visited_any && best.1 != u32::MAX && ((ring - 1) as f64) * cell > best.0.sqrt() {
                break;
            }
            if ring > 4 && best.1 == u32::MAX {
                // Far query: fall back to a direct scan instead of walking
                // many empty rings.
                for (i, p) in coarse.iter().enumerate() {
                    let d2 = dist2(q, p);
                    if (d2, i as u32) < best {
                        best = (d2, i as u32);
                    }
                }
                break;
            }
        }
        out.push(best.1);
    }
    Ok(out)
}

/// Build the full level pyramid: subsample with doubling cells, then wire
/// self-neighborhoods, pooling tables, and upsampling indices.
///
/// `pool[l]` uses the fine level's conv radius; with factor >= sqrt(3) every
/// coarse barycenter is guaranteed at least one support (its own voxel
/// members are within half the voxel diagonal).
pub fn build_levels(
    cloud: &PointCloud,
    base_cell: f64,
    level_count: usize,
    conv_radius_factor: f64,
    cap: usize,
) -> Result<LevelSet> {
    if level_count < 2 {
        return Err(Error::Config(format!("need at least 2 levels, got {}", level_count)));
    }
    if base_cell <= 0.0 {
        return Err(Error::Config(format!("base cell must be positive, got {}", base_cell)));
    }
    if cloud.is_empty() {
        return Err(Error::Degenerate("level 1 would be empty".into()));
    }
    let mut levels = Vec::with_capacity(level_count);
    let mut cell_sizes = Vec::with_capacity(level_count);
    for l in 0..level_count {
        let cell = base_cell * (1u64 << l) as f64;
        let src = if l == 0 { cloud } else { &levels[l - 1] };
        let sub = grid_subsample(src, cell)?;
        if sub.is_empty() {
            return Err(Error::Degenerate(format!("level {} collapsed to 0 points", l + 1)));
        }
        levels.push(sub);
        cell_sizes.push(cell);
    }
    let mut conv = Vec::with_capacity(level_count);
    for l in 0..level_count {
        let radius = conv_radius_factor * cell_sizes[l];
        conv.push(radius_neighbors(&levels[l].positions, &levels[l].positions, radius, cap)?);
    }
    let mut pool = Vec::with_capacity(level_count - 1);
    let mut upsample = Vec::with_capacity(level_count - 1);
    for l in 0..level_count - 1 {
        let radius = conv_radius_factor * cell_sizes[l];
        pool.push(radius_neighbors(&levels[l + 1].positions, &levels[l].positions, radius, cap)?);
        upsample.push(nearest_upsample_index(&levels[l].positions, &levels[l + 1].positions)?);
    }
    Ok(LevelSet { levels, cell_sizes, conv, pool, upsample })
}
