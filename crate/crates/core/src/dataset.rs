//! PLY ingestion and emission, a deterministic synthetic scene generator,
//! sphere sampling, and batch assembly for training and evaluation.
//!
//! PLY support covers ascii and binary-little-endian files. Recognized
//! vertex properties: x/y/z (required), red/green/blue and intensity
//! (features), class/scalar_class/label (labels). Any other float or
//! double scalar property is kept as a named feature column, so clouds
//! written by [`write_ply`] read back with every column intact; other
//! unknown properties are skipped with a warning on stderr.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::net::{assemble_features, make_level_set, NetworkConfig};
use crate::spatial::{LevelSet, PointCloud};
use crate::{Error, Result};

/// Surface noise added to every synthetic point, in meters.
pub const SCENE_NOISE_SIGMA: f64 = 0.02;
/// Augmentation jitter, in meters.
pub const JITTER_SIGMA: f64 = 0.01;
/// Effective sampling width of a wire, in meters: point count per wire is
/// length * width * density.
pub const WIRE_WIDTH: f64 = 0.1;
/// Pole radius as a fraction of pole height.
const POLE_ASPECT: f64 = 0.1;

// ---- PLY ----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyMode {
    Ascii,
    Binary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(tok: &str) -> Option<Scalar> {
        Some(match tok {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn is_float(self) -> bool {
        matches!(self, Scalar::F32 | Scalar::F64)
    }

    fn read(self, bytes: &[u8]) -> f64 {
        match self {
            Scalar::I8 => bytes[0] as i8 as f64,
            Scalar::U8 => bytes[0] as f64,
            Scalar::I16 => i16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
        }
    }

    /// Normalization divisor applied to color and intensity columns.
    fn color_scale(self) -> f64 {
        match self {
            Scalar::U8 => 255.0,
            Scalar::U16 => 65535.0,
            _ => 1.0,
        }
    }
}

#[derive(Clone, Debug)]
enum PropKind {
    Scalar(Scalar),
    List(Scalar, Scalar),
}

#[derive(Clone, Debug)]
struct Prop {
    name: String,
    kind: PropKind,
}

#[derive(Clone, Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Prop>,
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { offset: self.pos, msg: msg.into() }
    }

    /// Next line without its terminator; supports \n and \r\n.
    fn line(&mut self) -> Result<&'a str> {
        if self.pos >= self.data.len() {
            return Err(self.err("unexpected end of file"));
        }
        let start = self.pos;
        let end = self.data[start..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| start + i)
            .unwrap_or(self.data.len());
        self.pos = (end + 1).min(self.data.len());
        let mut line = &self.data[start..end];
        if line.last() == Some(&b'\r') {
            line = &line[..line.len() - 1];
        }
        std::str::from_utf8(line).map_err(|_| Error::Parse {
            offset: start,
            msg: "line is not valid utf-8".into(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(self.err(format!(
                "truncated payload: need {} bytes, {} remain",
                n,
                self.data.len() - self.pos
            )));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

fn parse_header(cur: &mut Cursor) -> Result<(bool, Vec<Element>)> {
    if cur.line()? != "ply" {
        return Err(Error::Parse { offset: 0, msg: "missing 'ply' magic line".into() });
    }
    let mut binary = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let line_start = cur.pos;
        let line = cur.line()?;
        let mut toks = line.split_ascii_whitespace();
        match toks.next() {
            Some("comment") | Some("obj_info") | None => {}
            Some("format") => {
                let kind = toks.next().unwrap_or("");
                binary = Some(match kind {
                    "ascii" => false,
                    "binary_little_endian" => true,
                    other => {
                        return Err(Error::Parse {
                            offset: line_start,
                            msg: format!("unsupported format {:?}", other),
                        })
                    }
                });
            }
            Some("element") => {
                let name = toks.next().unwrap_or("").to_string();
                let count: usize = toks
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or(Error::Parse {
                        offset: line_start,
                        msg: "element line needs a name and a count".into(),
                    })?;
                elements.push(Element { name, count, props: Vec::new() });
            }
            Some("property") => {
                let element = elements.last_mut().ok_or(Error::Parse {
                    offset: line_start,
                    msg: "property before any element".into(),
                })?;
                let first = toks.next().unwrap_or("");
                let kind = if first == "list" {
                    let count = Scalar::parse(toks.next().unwrap_or(""));
                    let item = Scalar::parse(toks.next().unwrap_or(""));
                    match (count, item) {
                        (Some(c), Some(i)) => PropKind::List(c, i),
                        _ => {
                            return Err(Error::Parse {
                                offset: line_start,
                                msg: "malformed list property".into(),
                            })
                        }
                    }
                } else {
                    match Scalar::parse(first) {
                        Some(s) => PropKind::Scalar(s),
                        None => {
                            return Err(Error::Parse {
                                offset: line_start,
                                msg: format!("unknown property type {:?}", first),
                            })
                        }
                    }
                };
                let name = toks.next().unwrap_or("").to_string();
                if name.is_empty() {
                    return Err(Error::Parse {
                        offset: line_start,
                        msg: "property without a name".into(),
                    });
                }
                element.props.push(Prop { name, kind });
            }
            Some("end_header") => break,
            Some(other) => {
                return Err(Error::Parse {
                    offset: line_start,
                    msg: format!("unexpected header keyword {:?}", other),
                })
            }
        }
    }
    let binary = binary.ok_or(Error::Parse { offset: 0, msg: "header has no format line".into() })?;
    Ok((binary, elements))
}

/// Where each recognized vertex column lands.
enum Slot {
    Position(usize),
    Feature { column: usize, scale: f64 },
    Label,
    Skip,
}

fn classify_props(props: &[Prop], offset: usize) -> Result<(Vec<Slot>, Vec<String>)> {
    let mut slots = Vec::with_capacity(props.len());
    let mut feature_names = Vec::new();
    let mut have_label = false;
    let mut seen = [false; 3];
    for prop in props {
        let scalar = match prop.kind {
            PropKind::Scalar(s) => s,
            PropKind::List(..) => {
                return Err(Error::Parse {
                    offset,
                    msg: format!("list property {:?} on vertex element", prop.name),
                })
            }
        };
        let slot = match prop.name.as_str() {
            "x" | "y" | "z" => {
                let axis = (prop.name.as_bytes()[0] - b'x') as usize;
                seen[axis] = true;
                Slot::Position(axis)
            }
            "red" | "green" | "blue" | "intensity" => {
                feature_names.push(prop.name.clone());
                Slot::Feature { column: feature_names.len() - 1, scale: scalar.color_scale() }
            }
            "class" | "scalar_class" | "label" => {
                if have_label {
                    eprintln!("warning: ignoring extra label property '{}'", prop.name);
                    Slot::Skip
                } else {
                    have_label = true;
                    Slot::Label
                }
            }
            other if scalar.is_float() => {
                feature_names.push(other.to_string());
                Slot::Feature { column: feature_names.len() - 1, scale: 1.0 }
            }
            other => {
                eprintln!("warning: ignoring unknown PLY property '{}'", other);
                Slot::Skip
            }
        };
        slots.push(slot);
    }
    if !(seen[0] && seen[1] && seen[2]) {
        return Err(Error::Parse { offset, msg: "vertex element lacks x/y/z properties".into() });
    }
    Ok((slots, feature_names))
}

/// Read an ascii or binary-little-endian PLY file into a point cloud.
pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let data = fs::read(path)?;
    let mut cur = Cursor { data: &data, pos: 0 };
    let (binary, elements) = parse_header(&mut cur)?;
    let header_end = cur.pos;
    let mut cloud = None;
    for element in &elements {
        if element.name == "vertex" {
            if cloud.is_some() {
                return Err(Error::Parse {
                    offset: header_end,
                    msg: "duplicate vertex element".into(),
                });
            }
            cloud = Some(read_vertices(&mut cur, element, binary, header_end)?);
        } else {
            skip_element(&mut cur, element, binary)?;
        }
    }
    cloud.ok_or(Error::Parse { offset: header_end, msg: "file has no vertex element".into() })
}

fn read_vertices(
    cur: &mut Cursor,
    element: &Element,
    binary: bool,
    header_end: usize,
) -> Result<PointCloud> {
    let (slots, feature_names) = classify_props(&element.props, header_end)?;
    let width = feature_names.len();
    let n = element.count;
    let mut positions = vec![[0.0f64; 3]; n];
    let mut features = vec![0.0f64; n * width];
    let has_label = slots.iter().any(|s| matches!(s, Slot::Label));
    let mut labels: Vec<u32> = Vec::with_capacity(if has_label { n } else { 0 });
    for i in 0..n {
        let row_start = cur.pos;
        let mut raw = Vec::with_capacity(element.props.len());
        if binary {
            for prop in &element.props {
                let s = match prop.kind {
                    PropKind::Scalar(s) => s,
                    PropKind::List(..) => unreachable!("rejected by classify_props"),
                };
                raw.push(s.read(cur.take(s.size())?));
            }
        } else {
            let line = cur.line()?;
            for tok in line.split_ascii_whitespace() {
                let v: f64 = tok.parse().map_err(|_| Error::Parse {
                    offset: row_start,
                    msg: format!("bad numeric token {:?}", tok),
                })?;
                raw.push(v);
            }
            if raw.len() != element.props.len() {
                return Err(Error::Parse {
                    offset: row_start,
                    msg: format!(
                        "vertex row has {} values, header declares {}",
                        raw.len(),
                        element.props.len()
                    ),
                });
            }
        }
        for (slot, &v) in slots.iter().zip(raw.iter()) {
            match slot {
                Slot::Position(axis) => positions[i][*axis] = v,
                Slot::Feature { column, scale } => features[i * width + column] = v / scale,
                Slot::Label => {
                    if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
                        return Err(Error::Parse {
                            offset: row_start,
                            msg: format!("label value {} is not a small non-negative integer", v),
                        });
                    }
                    labels.push(v as u32);
                }
                Slot::Skip => {}
            }
        }
    }
    let class_count = labels.iter().max().map_or(0, |&m| m as usize + 1);
    PointCloud::new(
        positions,
        features,
        width,
        feature_names,
        if has_label { Some(labels) } else { None },
        class_count,
    )
}

fn skip_element(cur: &mut Cursor, element: &Element, binary: bool) -> Result<()> {
    if !binary {
        for _ in 0..element.count {
            cur.line()?;
        }
        return Ok(());
    }
    let fixed: Option<usize> = element
        .props
        .iter()
        .map(|p| match p.kind {
            PropKind::Scalar(s) => Some(s.size()),
            PropKind::List(..) => None,
        })
        .sum();
    if let Some(record) = fixed {
        cur.take(element.count * record)?;
        return Ok(());
    }
    for _ in 0..element.count {
        for prop in &element.props {
            match prop.kind {
                PropKind::Scalar(s) => {
                    cur.take(s.size())?;
                }
                PropKind::List(count_ty, item_ty) => {
                    let c = count_ty.read(cur.take(count_ty.size())?);
                    if c < 0.0 || c.fract() != 0.0 {
                        return Err(cur.err(format!("bad list count {}", c)));
                    }
                    cur.take(c as usize * item_ty.size())?;
                }
            }
        }
    }
    Ok(())
}

/// Write a point cloud as PLY. Positions and feature columns are stored as
/// doubles (so a read round-trips bit-exactly), labels as uint "class".
/// With a palette, per-label uchar red/green/blue columns are appended;
/// this requires labels and feature names that do not clash.
pub fn write_ply(
    cloud: &PointCloud,
    path: &Path,
    mode: PlyMode,
    palette: Option<&[[u8; 3]]>,
) -> Result<()> {
    cloud.validate()?;
    if palette.is_some() {
        if cloud.labels.is_none() {
            return Err(Error::Config("palette output requires labels".into()));
        }
        for name in &cloud.feature_names {
            if ["red", "green", "blue"].contains(&name.as_str()) {
                return Err(Error::Config(format!(
                    "palette output clashes with feature column {:?}",
                    name
                )));
            }
        }
    }
    let mut header = String::new();
    header.push_str("ply\n");
    header.push_str(match mode {
        PlyMode::Ascii => "format ascii 1.0\n",
        PlyMode::Binary => "format binary_little_endian 1.0\n",
    });
    let _ = writeln!(header, "element vertex {}", cloud.len());
    for axis in ["x", "y", "z"] {
        let _ = writeln!(header, "property double {}", axis);
    }
    for name in &cloud.feature_names {
        let _ = writeln!(header, "property double {}", name);
    }
    if cloud.labels.is_some() {
        header.push_str("property uint class\n");
    }
    if palette.is_some() {
        for channel in ["red", "green", "blue"] {
            let _ = writeln!(header, "property uchar {}", channel);
        }
    }
    header.push_str("end_header\n");

    let palette_color = |label: u32| -> Result<[u8; 3]> {
        let palette = palette.expect("checked above");
        palette.get(label as usize).copied().ok_or_else(|| {
            Error::Config(format!("palette has {} colors, label {} seen", palette.len(), label))
        })
    };

    let mut out: Vec<u8> = header.into_bytes();
    match mode {
        PlyMode::Ascii => {
            let mut line = String::new();
            for i in 0..cloud.len() {
                line.clear();
                for axis in 0..3 {
                    if axis > 0 {
                        line.push(' ');
                    }
                    let _ = write!(line, "{}", cloud.positions[i][axis]);
                }
                for &v in cloud.feature_row(i) {
                    let _ = write!(line, " {}", v);
                }
                if let Some(labels) = &cloud.labels {
                    let _ = write!(line, " {}", labels[i]);
                    if palette.is_some() {
                        let [r, g, b] = palette_color(labels[i])?;
                        let _ = write!(line, " {} {} {}", r, g, b);
                    }
                }
                line.push('\n');
                out.extend_from_slice(line.as_bytes());
            }
        }
        PlyMode::Binary => {
            for i in 0..cloud.len() {
                for axis in 0..3 {
                    out.extend_from_slice(&cloud.positions[i][axis].to_le_bytes());
                }
                for &v in cloud.feature_row(i) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                if let Some(labels) = &cloud.labels {
                    out.extend_from_slice(&labels[i].to_le_bytes());
                    if palette.is_some() {
                        out.extend_from_slice(&palette_color(labels[i])?);
                    }
                }
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

// ---- synthetic scenes ----

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeRange {
    pub min: f64,
    pub max: f64,
}

impl SizeRange {
    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            rng.gen_range(self.min..self.max)
        }
    }
}

fn default_true() -> bool {
    true
}
fn default_box_size() -> SizeRange {
    SizeRange { min: 2.0, max: 5.0 }
}
fn default_cylinder_size() -> SizeRange {
    SizeRange { min: 3.0, max: 6.0 }
}
fn default_sphere_size() -> SizeRange {
    SizeRange { min: 0.8, max: 2.0 }
}
fn default_wire_size() -> SizeRange {
    SizeRange { min: 4.0, max: 10.0 }
}

/// Recipe for one synthetic scene. Classes by generating primitive:
/// 0 ground, 1 box, 2 cylinder, 3 sphere, 4 wire.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecipe {
    pub seed: u64,
    /// Square ground extent in meters.
    pub extent: f64,
    /// Surface sampling density in points per square meter.
    pub density: f64,
    #[serde(default = "default_true")]
    pub ground: bool,
    #[serde(default)]
    pub boxes: usize,
    /// Box edge and height range, meters.
    #[serde(default = "default_box_size")]
    pub box_size: SizeRange,
    #[serde(default)]
    pub cylinders: usize,
    /// Cylinder height range, meters; radius is height / 10.
    #[serde(default = "default_cylinder_size")]
    pub cylinder_size: SizeRange,
    #[serde(default)]
    pub spheres: usize,
    /// Sphere radius range, meters.
    #[serde(default = "default_sphere_size")]
    pub sphere_size: SizeRange,
    #[serde(default)]
    pub wires: usize,
    /// Wire length range, meters.
    #[serde(default = "default_wire_size")]
    pub wire_size: SizeRange,
}

pub const SCENE_CLASS_NAMES: [&str; 5] = ["ground", "building", "pole", "vegetation", "wire"];

impl SceneRecipe {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.extent > 0.0) {
            problems.push(format!("extent must be positive, got {}", self.extent));
        }
        if !(self.density > 0.0) {
            problems.push(format!("density must be positive, got {}", self.density));
        }
        for (name, range) in [
            ("box_size", self.box_size),
            ("cylinder_size", self.cylinder_size),
            ("sphere_size", self.sphere_size),
            ("wire_size", self.wire_size),
        ] {
            if !(range.min > 0.0 && range.max >= range.min) {
                problems.push(format!(
                    "{} must satisfy 0 < min <= max, got {}..{}",
                    name, range.min, range.max
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

fn surface_count(area: f64, density: f64) -> usize {
    (area * density).round() as usize
}

/// Generate a labeled scene, deterministic in the recipe seed. Every point
/// is surface-sampled from its primitive plus isotropic Gaussian noise.
pub fn synth_scene(recipe: &SceneRecipe) -> Result<PointCloud> {
    recipe.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let noise = Normal::new(0.0, SCENE_NOISE_SIGMA).expect("positive sigma");
    let e = recipe.extent;
    let mut positions: Vec<[f64; 3]> = Vec::new();
    let mut labels: Vec<u32> = Vec::new();
    let mut push = |rng: &mut ChaCha8Rng, p: [f64; 3], label: u32| {
        let n = [noise.sample(rng), noise.sample(rng), noise.sample(rng)];
        positions.push([p[0] + n[0], p[1] + n[1], p[2] + n[2]]);
        labels.push(label);
    };

    if recipe.ground {
        for _ in 0..surface_count(e * e, recipe.density) {
            let p = [rng.gen_range(0.0..e), rng.gen_range(0.0..e), 0.0];
            push(&mut rng, p, 0);
        }
    }

    for _ in 0..recipe.boxes {
        let w = recipe.box_size.draw(&mut rng);
        let d = recipe.box_size.draw(&mut rng);
        let h = recipe.box_size.draw(&mut rng);
        let cx = rng.gen_range(0.0..e);
        let cy = rng.gen_range(0.0..e);
        // Top face, then the four sides.
        for _ in 0..surface_count(w * d, recipe.density) {
            let p = [cx + rng.gen_range(-w / 2.0..w / 2.0), cy + rng.gen_range(-d / 2.0..d / 2.0), h];
            push(&mut rng, p, 1);
        }
        for (along_x, sign) in [(true, -1.0), (true, 1.0), (false, -1.0), (false, 1.0)] {
            let span = if along_x { w } else { d };
            for _ in 0..surface_count(span * h, recipe.density) {
                let t = rng.gen_range(-span / 2.0..span / 2.0);
                let z = rng.gen_range(0.0..h);
                let p = if along_x {
                    [cx + t, cy + sign * d / 2.0, z]
                } else {
                    [cx + sign * w / 2.0, cy + t, z]
                };
                push(&mut rng, p, 1);
            }
        }
    }

    for _ in 0..recipe.cylinders {
        let h = recipe.cylinder_size.draw(&mut rng);
        let r = h * POLE_ASPECT;
        let cx = rng.gen_range(0.0..e);
        let cy = rng.gen_range(0.0..e);
        let lateral = std::f64::consts::TAU * r * h;
        for _ in 0..surface_count(lateral, recipe.density) {
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let p = [cx + r * theta.cos(), cy + r * theta.sin(), rng.gen_range(0.0..h)];
            push(&mut rng, p, 2);
        }
    }

    for _ in 0..recipe.spheres {
        let r = recipe.sphere_size.draw(&mut rng);
        let cx = rng.gen_range(0.0..e);
        let cy = rng.gen_range(0.0..e);
        let cz = r;
        let area = 4.0 * std::f64::consts::PI * r * r;
        let unit = Normal::<f64>::new(0.0, 1.0).expect("positive sigma");
        for _ in 0..surface_count(area, recipe.density) {
            let v = loop {
                let c = [unit.sample(&mut rng), unit.sample(&mut rng), unit.sample(&mut rng)];
                let norm = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
                if norm > 1e-9 {
                    break [c[0] * r / norm, c[1] * r / norm, c[2] * r / norm];
                }
            };
            push(&mut rng, [cx + v[0], cy + v[1], cz + v[2]], 3);
        }
    }

    for _ in 0..recipe.wires {
        let len = recipe.wire_size.draw(&mut rng);
        let cx = rng.gen_range(0.0..e);
        let cy = rng.gen_range(0.0..e);
        let z = rng.gen_range(3.0..6.0);
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let (dx, dy) = (theta.cos(), theta.sin());
        for _ in 0..surface_count(len * WIRE_WIDTH, recipe.density) {
            let t = rng.gen_range(-len / 2.0..len / 2.0);
            push(&mut rng, [cx + t * dx, cy + t * dy, z], 4);
        }
    }

    let n = positions.len();
    PointCloud::new(
        positions,
        vec![1.0; n],
        1,
        vec!["one".to_string()],
        Some(labels),
        SCENE_CLASS_NAMES.len(),
    )
}

// ---- sphere sampling ----

/// Indices of the points within `radius` of `center`, in cloud order.
pub fn sphere_indices(cloud: &PointCloud, center: [f64; 3], radius: f64) -> Result<Vec<u32>> {
    if !(radius > 0.0) {
        return Err(Error::Config(format!("sphere radius must be positive, got {}", radius)));
    }
    let r2 = radius * radius;
    Ok(cloud
        .positions
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
            d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= r2
        })
        .map(|(i, _)| i as u32)
        .collect())
}

fn subset(cloud: &PointCloud, indices: &[u32], center: [f64; 3]) -> Result<PointCloud> {
    let w = cloud.feature_width;
    let mut positions = Vec::with_capacity(indices.len());
    let mut features = Vec::with_capacity(indices.len() * w);
    let mut labels = cloud.labels.as_ref().map(|_| Vec::with_capacity(indices.len()));
    for &i in indices {
        let p = cloud.positions[i as usize];
        positions.push([p[0] - center[0], p[1] - center[1], p[2] - center[2]]);
        features.extend_from_slice(cloud.feature_row(i as usize));
        if let (Some(out), Some(src)) = (&mut labels, &cloud.labels) {
            out.push(src[i as usize]);
        }
    }
    PointCloud::new(
        positions,
        features,
        w,
        cloud.feature_names.clone(),
        labels,
        cloud.class_count,
    )
}

/// All points within `radius` of `center`, order-preserving, positions
/// left in the source frame.
pub fn sample_sphere(cloud: &PointCloud, center: [f64; 3], radius: f64) -> Result<PointCloud> {
    let indices = sphere_indices(cloud, center, radius)?;
    subset(cloud, &indices, [0.0, 0.0, 0.0])
}

// ---- augmentation ----

/// Rotate positions around the vertical axis through the origin.
pub fn rotate_z(positions: &mut [[f64; 3]], theta: f64) {
    let (s, c) = theta.sin_cos();
    for p in positions {
        let (x, y) = (p[0], p[1]);
        p[0] = c * x - s * y;
        p[1] = s * x + c * y;
    }
}

/// Training augmentation: random z-rotation, uniform scale in [0.9, 1.1),
/// and isotropic Gaussian jitter.
pub fn augment_positions(positions: &mut [[f64; 3]], rng: &mut ChaCha8Rng) {
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let scale = rng.gen_range(0.9..1.1);
    rotate_z(positions, theta);
    let jitter = Normal::new(0.0, JITTER_SIGMA).expect("positive sigma");
    for p in positions.iter_mut() {
        for c in p.iter_mut() {
            *c = *c * scale + jitter.sample(rng);
        }
    }
}

// ---- dataset description ----

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFiles {
    #[serde(default)]
    pub train: Vec<PathBuf>,
    #[serde(default)]
    pub val: Vec<PathBuf>,
    #[serde(default)]
    pub test: Vec<PathBuf>,
}

fn default_min_points() -> usize {
    100
}

/// A dataset: named classes, geometry constants, and PLY files per split.
/// Relative paths are resolved against the JSON file's directory by
/// [`DatasetSpec::load`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub class_names: Vec<String>,
    #[serde(default)]
    pub ignore_index: Option<usize>,
    pub base_cell: f64,
    pub input_sphere_radius: f64,
    pub files: SplitFiles,
    /// Training spheres below this level-1 point count are redrawn.
    #[serde(default = "default_min_points")]
    pub min_points: usize,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.class_names.is_empty() {
            problems.push("class_names must not be empty".to_string());
        }
        for (i, a) in self.class_names.iter().enumerate() {
            if self.class_names[..i].contains(a) {
                problems.push(format!("duplicate class name {:?}", a));
            }
        }
        if !(self.base_cell > 0.0) {
            problems.push(format!("base_cell must be positive, got {}", self.base_cell));
        }
        if !(self.input_sphere_radius > 0.0) {
            problems.push(format!(
                "input_sphere_radius must be positive, got {}",
                self.input_sphere_radius
            ));
        }
        if let Some(ignore) = self.ignore_index {
            if ignore >= self.class_names.len() {
                problems.push(format!(
                    "ignore_index {} out of range for {} classes",
                    ignore,
                    self.class_names.len()
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Parse from JSON and resolve relative file paths against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut spec: DatasetSpec =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        spec.validate()?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for list in [&mut spec.files.train, &mut spec.files.val, &mut spec.files.test] {
            for file in list.iter_mut() {
                if file.is_relative() {
                    *file = dir.join(&file);
                }
            }
        }
        Ok(spec)
    }

    pub fn files_for(&self, mode: Mode) -> &[PathBuf] {
        match mode {
            Mode::Train => &self.files.train,
            Mode::Val => &self.files.val,
            Mode::Test => &self.files.test,
        }
    }
}

// ---- batching ----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Val,
    Test,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Train => "train",
            Mode::Val => "val",
            Mode::Test => "test",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Mode::Train),
            "val" => Ok(Mode::Val),
            "test" => Ok(Mode::Test),
            other => Err(Error::Config(format!("unknown split {:?}", other))),
        }
    }
}

/// One network input: a sphere of points in its local frame with the
/// pyramid structure already built.
pub struct SphereSample {
    /// Which source cloud the sphere came from.
    pub cloud_index: usize,
    /// Source-cloud indices of the raw points, in order.
    pub original_indices: Vec<u32>,
    /// Raw (pre-subsampling) positions, recentered and, in train mode,
    /// augmented. Row i corresponds to original_indices[i].
    pub raw_positions: Vec<[f64; 3]>,
    pub levels: LevelSet,
    /// Level-1 input features per the network's feature recipe.
    pub features: Array,
    /// Level-1 labels (for the loss); None when the source has no labels.
    pub labels: Option<Vec<u32>>,
}

/// How spheres are drawn from the loaded clouds.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Strategy {
    /// Class-balanced random centers with augmentation; endless.
    Weighted,
    /// Deterministic covering tile grid, no augmentation; finite.
    Tiled,
}

pub struct BatchIterator {
    clouds: Vec<PointCloud>,
    config: NetworkConfig,
    strategy: Strategy,
    batch_size: usize,
    radius: f64,
    min_points: usize,
    rng: ChaCha8Rng,
    /// Weighted strategy: flat (cloud, point) list and its class-balanced picker.
    centers: Vec<(u32, u32)>,
    picker: Option<WeightedIndex<f64>>,
    /// Tiled strategy: deterministic tile centers.
    tiles: Vec<(usize, [f64; 3])>,
    cursor: usize,
}

impl BatchIterator {
    /// The split's native iteration: train draws class-balanced augmented
    /// spheres forever; val/test walk a deterministic tile grid once.
    pub fn new(
        spec: &DatasetSpec,
        config: &NetworkConfig,
        mode: Mode,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let strategy = match mode {
            Mode::Train => Strategy::Weighted,
            Mode::Val | Mode::Test => Strategy::Tiled,
        };
        Self::with_strategy(spec, config, mode, strategy, batch_size, seed)
    }

    /// Deterministic tiling over any split's files, for evaluation.
    pub fn new_tiled(
        spec: &DatasetSpec,
        config: &NetworkConfig,
        split: Mode,
        batch_size: usize,
    ) -> Result<Self> {
        Self::with_strategy(spec, config, split, Strategy::Tiled, batch_size, 0)
    }

    fn with_strategy(
        spec: &DatasetSpec,
        config: &NetworkConfig,
        mode: Mode,
        strategy: Strategy,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        config.validate()?;
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let agree = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
        if !agree(spec.base_cell, config.base_cell) {
            return Err(Error::Config(format!(
                "dataset base_cell {} disagrees with network base_cell {}",
                spec.base_cell, config.base_cell
            )));
        }
        if !agree(spec.input_sphere_radius, config.input_sphere_radius) {
            return Err(Error::Config(format!(
                "dataset input_sphere_radius {} disagrees with network {}",
                spec.input_sphere_radius, config.input_sphere_radius
            )));
        }
        let files = spec.files_for(mode);
        if files.is_empty() {
            return Err(Error::Dataset(format!("no files in the {} split", mode.name())));
        }
        let mut clouds = Vec::with_capacity(files.len());
        for file in files {
            let cloud = read_ply(file)
                .map_err(|e| Error::Dataset(format!("{}: {}", file.display(), e)))?;
            if cloud.is_empty() {
                return Err(Error::Dataset(format!("{}: empty cloud", file.display())));
            }
            clouds.push(cloud);
        }
        let radius = spec.input_sphere_radius;
        let mut it = BatchIterator {
            clouds,
            config: config.clone(),
            strategy,
            batch_size,
            radius,
            min_points: spec.min_points,
            rng: ChaCha8Rng::seed_from_u64(seed),
            centers: Vec::new(),
            picker: None,
            tiles: Vec::new(),
            cursor: 0,
        };
        match strategy {
            Strategy::Weighted => it.prepare_train(spec)?,
            Strategy::Tiled => it.prepare_tiles(),
        }
        Ok(it)
    }

    fn prepare_train(&mut self, spec: &DatasetSpec) -> Result<()> {
        let class_count = spec.class_names.len();
        let mut freq = vec![0u64; class_count];
        for (ci, cloud) in self.clouds.iter().enumerate() {
            let labels = cloud.labels.as_ref().ok_or_else(|| {
                Error::Dataset(format!("train cloud {} has no labels", ci))
            })?;
            for &l in labels {
                if l as usize >= class_count {
                    return Err(Error::Dataset(format!(
                        "train cloud {} label {} exceeds {} classes",
                        ci, l, class_count
                    )));
                }
                freq[l as usize] += 1;
            }
        }
        let mut weights: Vec<f64> = Vec::new();
        for (ci, cloud) in self.clouds.iter().enumerate() {
            let labels = cloud.labels.as_ref().expect("checked above");
            for (pi, &l) in labels.iter().enumerate() {
                let w = if Some(l as usize) == spec.ignore_index {
                    0.0
                } else {
                    1.0 / freq[l as usize] as f64
                };
                self.centers.push((ci as u32, pi as u32));
                weights.push(w);
            }
        }
        let picker = WeightedIndex::new(&weights)
            .map_err(|e| Error::Dataset(format!("cannot balance classes: {}", e)))?;
        self.picker = Some(picker);
        Ok(())
    }

    /// A 3D center grid per cloud with spacing equal to the sphere radius,
    /// so adjacent spheres overlap by half and every point falls within
    /// sqrt(3)/2 * radius of some center. Empty tiles are dropped.
    fn prepare_tiles(&mut self) {
        let r = self.radius;
        for (ci, cloud) in self.clouds.iter().enumerate() {
            let mut lo = [f64::INFINITY; 3];
            let mut hi = [f64::NEG_INFINITY; 3];
            for p in &cloud.positions {
                for a in 0..3 {
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a]);
                }
            }
            let steps: Vec<usize> =
                (0..3).map(|a| ((hi[a] - lo[a]) / r).ceil().max(1.0) as usize).collect();
            for kz in 0..steps[2] {
                for ky in 0..steps[1] {
                    for kx in 0..steps[0] {
                        let center = [
                            lo[0] + r / 2.0 + kx as f64 * r,
                            lo[1] + r / 2.0 + ky as f64 * r,
                            lo[2] + r / 2.0 + kz as f64 * r,
                        ];
                        let occupied = cloud.positions.iter().any(|p| {
                            let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
                            d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= r * r
                        });
                        if occupied {
                            self.tiles.push((ci, center));
                        }
                    }
                }
            }
        }
    }

    fn build_sample(
        &mut self,
        cloud_index: usize,
        center: [f64; 3],
        indices: Vec<u32>,
        augment: bool,
    ) -> Result<SphereSample> {
        let mut sub = subset(&self.clouds[cloud_index], &indices, center)?;
        if augment {
            augment_positions(&mut sub.positions, &mut self.rng);
        }
        let raw_positions = sub.positions.clone();
        let levels = make_level_set(&self.config, &sub)?;
        let features = assemble_features(&self.config.input_features, &levels.levels[0])?;
        let labels = levels.levels[0].labels.clone();
        Ok(SphereSample {
            cloud_index,
            original_indices: indices,
            raw_positions,
            levels,
            features,
            labels,
        })
    }

    fn next_train_sample(&mut self) -> Result<SphereSample> {
        for _ in 0..1000 {
            let idx = self.picker.as_ref().expect("train mode").sample(&mut self.rng);
            let (ci, pi) = self.centers[idx];
            let center = self.clouds[ci as usize].positions[pi as usize];
            // Cheap reject: the raw count bounds the level-1 count.
            let raw = sphere_indices(&self.clouds[ci as usize], center, self.radius)?;
            if raw.len() < self.min_points {
                continue;
            }
            let sample = self.build_sample(ci as usize, center, raw, true)?;
            if sample.levels.levels[0].len() >= self.min_points {
                return Ok(sample);
            }
        }
        Err(Error::Dataset(format!(
            "could not draw a training sphere with at least {} level-1 points",
            self.min_points
        )))
    }

    /// Next group of samples. The weighted stream never ends; tiled
    /// iteration returns None once every tile has been emitted.
    pub fn next_batch(&mut self) -> Result<Option<Vec<SphereSample>>> {
        match self.strategy {
            Strategy::Weighted => {
                let mut out = Vec::with_capacity(self.batch_size);
                for _ in 0..self.batch_size {
                    out.push(self.next_train_sample()?);
                }
                Ok(Some(out))
            }
            Strategy::Tiled => {
                if self.cursor >= self.tiles.len() {
                    return Ok(None);
                }
                let mut out = Vec::with_capacity(self.batch_size);
                while out.len() < self.batch_size && self.cursor < self.tiles.len() {
                    let (ci, center) = self.tiles[self.cursor];
                    self.cursor += 1;
                    let indices = sphere_indices(&self.clouds[ci], center, self.radius)?;
                    out.push(self.build_sample(ci, center, indices, false)?);
                }
                Ok(Some(out))
            }
        }
    }

    pub fn tile_count(&self) -> usize {
        self.tiles.len()
    }

    pub fn clouds(&self) -> &[PointCloud] {
        &self.clouds
    }
}

/// Per-class point counts across clouds; labels must fall in range.
pub fn class_histogram(clouds: &[PointCloud], class_count: usize) -> Result<Vec<u64>> {
    let mut freq = vec![0u64; class_count];
    for (ci, cloud) in clouds.iter().enumerate() {
        if let Some(labels) = &cloud.labels {
            for &l in labels {
                *freq.get_mut(l as usize).ok_or_else(|| {
                    Error::Label(format!(
                        "cloud {} label {} exceeds {} classes",
                        ci, l, class_count
                    ))
                })? += 1;
            }
        }
    }
    Ok(freq)
}
