//! Synthetic maturity dataset, PPM codec, directory indexing, group-aware
//! splitting and batch loading.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rcmp_core::train::LabeledSet;
use rcmp_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class names in maturity order.
pub const CLASSES: [&str; 6] = ["Green", "Breaker", "Pink", "LightRed", "Red", "OverMature"];
pub const LABELS_FILE: &str = "labels.json";
pub const MANIFEST_FILE: &str = "dataset_manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Frontal,
    Dorsal,
    Up,
    Down,
    Left,
    Right,
}

impl Orientation {
    pub const ALL: [Orientation; 6] = [
        Orientation::Frontal,
        Orientation::Dorsal,
        Orientation::Up,
        Orientation::Down,
        Orientation::Left,
        Orientation::Right,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Orientation::Frontal => "frontal",
            Orientation::Dorsal => "dorsal",
            Orientation::Up => "up",
            Orientation::Down => "down",
            Orientation::Left => "left",
            Orientation::Right => "right",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.as_str() == s)
    }

    /// Ellipse rotation (radians) and centre offset (fraction of the side).
    fn pose(self) -> (f64, f64, f64) {
        use std::f64::consts::FRAC_PI_2;
        match self {
            Orientation::Frontal => (0.0, 0.0, 0.0),
            Orientation::Dorsal => (FRAC_PI_2, 0.0, 0.0),
            Orientation::Up => (0.3, 0.0, -0.08),
            Orientation::Down => (-0.3, 0.0, 0.08),
            Orientation::Left => (0.6, -0.08, 0.0),
            Orientation::Right => (-0.6, 0.08, 0.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lighting {
    On,
    Off,
}

impl Lighting {
    pub const ALL: [Lighting; 2] = [Lighting::On, Lighting::Off];

    pub fn as_str(self) -> &'static str {
        match self {
            Lighting::On => "on",
            Lighting::Off => "off",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.as_str() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub path: PathBuf,
    pub class_index: usize,
    pub class_name: String,
    /// Physical specimen, `<class>/<group>`; the path itself for files whose
    /// names do not follow the convention.
    pub group_id: String,
    pub orientation: Option<Orientation>,
    pub lighting: Option<Lighting>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub records: Vec<SampleRecord>,
    pub classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.class_index).collect()
    }

    fn subset(&self, records: Vec<SampleRecord>) -> DatasetIndex {
        DatasetIndex { records, classes: self.classes.clone(), warnings: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub groups_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub lighting_off_factor: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { groups_per_class: 25, image_size: 64, seed: 0, noise_sigma: 8.0 / 255.0, lighting_off_factor: 0.6 }
    }
}

/// Fruit colour of each class along the green→red→dark-red ramp.
const BASE_RGB: [[f64; 3]; 6] = [
    [0.24, 0.58, 0.16],
    [0.56, 0.64, 0.20],
    [0.86, 0.52, 0.42],
    [0.90, 0.32, 0.22],
    [0.78, 0.10, 0.08],
    [0.40, 0.07, 0.06],
];
const BACKGROUND: [f64; 3] = [0.72, 0.72, 0.70];

/// Deterministic per-image seed, independent of generation order.
fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &p in parts {
        for b in p.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

fn render(cfg: &GeneratorConfig, class: usize, group: usize, orientation: Orientation, lighting: Lighting) -> Result<RgbImage> {
    let s = cfg.image_size;
    let mut grng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, class as u64, group as u64]));
    let mut color = BASE_RGB[class];
    for c in &mut color {
        *c = (*c * (1.0 + grng.random_range(-0.06..0.06))).clamp(0.0, 1.0);
    }
    let radius = grng.random_range(0.28..0.36);
    let aspect = grng.random_range(0.78..0.92);
    let (angle, dx, dy) = orientation.pose();
    let brightness = if lighting == Lighting::On { 1.0 } else { cfg.lighting_off_factor };
    let mut irng = ChaCha8Rng::seed_from_u64(mix_seed(&[
        cfg.seed,
        class as u64,
        group as u64,
        orientation as u64,
        lighting as u64,
        1,
    ]));
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Data(e.to_string()))?;
    let (cx, cy) = (0.5 + dx, 0.5 + dy);
    let (sin, cos) = (angle.sin(), angle.cos());
    let mut data = Vec::with_capacity(s * s * 3);
    for y in 0..s {
        for x in 0..s {
            let px = (x as f64 + 0.5) / s as f64 - cx;
            let py = (y as f64 + 0.5) / s as f64 - cy;
            let u = (px * cos + py * sin) / radius;
            let v = (-px * sin + py * cos) / (radius * aspect);
            let r2 = u * u + v * v;
            let rgb = if r2 <= 1.0 {
                // Mild shading towards the rim.
                let shade = 1.0 - 0.25 * r2;
                color.map(|c| c * shade)
            } else {
                BACKGROUND
            };
            for c in rgb {
                let val = c * brightness + noise.sample(&mut irng);
                data.push((val.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(RgbImage { width: s, height: s, data })
}

pub fn file_name(group: usize, orientation: Orientation, lighting: Lighting) -> String {
    format!("g{group:02}_{}_{}.ppm", orientation.as_str(), lighting.as_str())
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), message: e.to_string() }
}

/// Writes `6 × groups × 6 orientations × 2 lightings` PPM images plus the
/// label order and a manifest echoing `cfg`.
pub fn generate_synthetic(out_dir: &Path, cfg: &GeneratorConfig) -> Result<DatasetIndex> {
    if cfg.groups_per_class == 0 || cfg.image_size < 8 {
        return Err(Error::Data("groups_per_class must be ≥1 and image_size ≥8".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let labels: BTreeMap<&str, usize> = CLASSES.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    write_json(&out_dir.join(LABELS_FILE), &labels)?;
    write_json(&out_dir.join(MANIFEST_FILE), cfg)?;
    for (class, name) in CLASSES.iter().enumerate() {
        let dir = out_dir.join(name);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        for group in 0..cfg.groups_per_class {
            for o in Orientation::ALL {
                for l in Lighting::ALL {
                    let img = render(cfg, class, group, o, l)?;
                    let path = dir.join(file_name(group, o, l));
                    fs::write(&path, encode_ppm(&img)).map_err(|e| io_err(&path, e))?;
                }
            }
        }
    }
    load_index(out_dir)
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| io_err(path, e))
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Decodes a binary (P6) PPM with maxval ≤ 255.
pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err("not a binary PPM (P6)".into());
    }
    let mut num = |what: &str| -> std::result::Result<usize, String> {
        let t = token()?;
        t.parse::<usize>().map_err(|_| format!("bad {what} `{t}`"))
    };
    let (width, height, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if width == 0 || height == 0 {
        return Err("zero image extent".into());
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = width * height * 3;
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() < need {
        return Err(format!("raster holds {} bytes, expected {need}", raster.len()));
    }
    let mut data = raster[..need].to_vec();
    if maxval != 255 {
        for v in &mut data {
            *v = ((*v as u32 * 255 + maxval as u32 / 2) / maxval as u32).min(255) as u8;
        }
    }
    Ok(RgbImage { width, height, data })
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    decode_ppm(&bytes).map_err(|m| Error::Image { path: path.to_path_buf(), message: m })
}

/// Parses `gNN_<orientation>_<lighting>.ppm`.
fn parse_name(stem: &str) -> Option<(String, Orientation, Lighting)> {
    let mut parts = stem.split('_');
    let (g, o, l) = (parts.next()?, parts.next()?, parts.next()?);
    if parts.next().is_some() || g.is_empty() {
        return None;
    }
    Some((g.to_string(), Orientation::parse(o)?, Lighting::parse(l)?))
}

/// Indexes `root/<Class>/*.ppm`. Classes are numbered by `labels.json` when
/// present, else in lexicographic order. Records are sorted by path.
pub fn load_index(root: &Path) -> Result<DatasetIndex> {
    let entries = fs::read_dir(root).map_err(|e| io_err(root, e))?;
    let mut dirs = BTreeSet::new();
    for e in entries {
        let e = e.map_err(|e| io_err(root, e))?;
        if e.path().is_dir() {
            dirs.insert(e.file_name().to_string_lossy().into_owned());
        }
    }
    if dirs.is_empty() {
        return Err(Error::Data(format!("{} contains no class directories", root.display())));
    }
    let labels_path = root.join(LABELS_FILE);
    let classes: Vec<String> = if labels_path.exists() {
        let text = fs::read_to_string(&labels_path).map_err(|e| io_err(&labels_path, e))?;
        let map: BTreeMap<String, usize> =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", labels_path.display())))?;
        let mut classes = vec![String::new(); map.len()];
        for (name, &i) in &map {
            let slot = classes
                .get_mut(i)
                .ok_or_else(|| Error::Data(format!("{}: index {i} out of range", labels_path.display())))?;
            *slot = name.clone();
        }
        if classes.iter().any(String::is_empty) {
            return Err(Error::Data(format!("{}: indices are not contiguous", labels_path.display())));
        }
        if let Some(d) = dirs.iter().find(|d| !map.contains_key(*d)) {
            return Err(Error::Data(format!("directory `{d}` is missing from {}", labels_path.display())));
        }
        classes
    } else {
        dirs.iter().cloned().collect()
    };
    let mut index = DatasetIndex { records: Vec::new(), classes: classes.clone(), warnings: Vec::new() };
    for (class_index, name) in classes.iter().enumerate() {
        let dir = root.join(name);
        if !dir.is_dir() {
            continue;
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| io_err(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
            .collect();
        files.sort();
        for path in files {
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let rec = match parse_name(&stem) {
                Some((g, o, l)) => SampleRecord {
                    path,
                    class_index,
                    class_name: name.clone(),
                    group_id: format!("{name}/{g}"),
                    orientation: Some(o),
                    lighting: Some(l),
                },
                None => {
                    let msg = format!("{}: name does not follow <group>_<orientation>_<lighting>.ppm", path.display());
                    log::warn!("{msg}");
                    index.warnings.push(msg);
                    SampleRecord {
                        group_id: path.display().to_string(),
                        path,
                        class_index,
                        class_name: name.clone(),
                        orientation: None,
                        lighting: None,
                    }
                }
            };
            index.records.push(rec);
        }
    }
    if index.records.is_empty() {
        return Err(Error::Data(format!("{} contains no images", root.display())));
    }
    index.records.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(index)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train: 0.8, val: 0.1, test: 0.1, seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|v| !(0.0..=1.0).contains(v)) || ((f.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::Data(format!("split fractions {f:?} must lie in [0, 1] and sum to 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: DatasetIndex,
    pub val: DatasetIndex,
    pub test: DatasetIndex,
}

impl Splits {
    pub fn get(&self, name: &str) -> Option<&DatasetIndex> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Shuffles each class's groups with the seed and cuts them at the
/// cumulative fractions (rounded half up), so whole groups move together.
pub fn group_split(index: &DatasetIndex, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut assignment: BTreeMap<&str, usize> = BTreeMap::new();
    for class in 0..index.classes.len() {
        let groups: BTreeSet<&str> =
            index.records.iter().filter(|r| r.class_index == class).map(|r| r.group_id.as_str()).collect();
        if groups.is_empty() {
            continue;
        }
        let mut groups: Vec<&str> = groups.into_iter().collect();
        groups.shuffle(&mut rng);
        let n = groups.len() as f64;
        let cut1 = (spec.train * n + 0.5).floor() as usize;
        let cut2 = (((spec.train + spec.val) * n + 0.5).floor() as usize).max(cut1).min(groups.len());
        let counts = [cut1, cut2 - cut1, groups.len() - cut2];
        for (k, (&frac, &count)) in [spec.train, spec.val, spec.test].iter().zip(&counts).enumerate() {
            if frac > 0.0 && count == 0 {
                let split = ["train", "val", "test"][k];
                return Err(Error::Data(format!(
                    "class `{}` has {} groups; the {split} fraction {frac} receives none",
                    index.classes[class],
                    groups.len()
                )));
            }
        }
        for (i, g) in groups.into_iter().enumerate() {
            assignment.insert(g, if i < cut1 { 0 } else if i < cut2 { 1 } else { 2 });
        }
    }
    let mut parts: [Vec<SampleRecord>; 3] = Default::default();
    for r in &index.records {
        parts[assignment[r.group_id.as_str()]].push(r.clone());
    }
    let [train, val, test] = parts;
    Ok(Splits { train: index.subset(train), val: index.subset(val), test: index.subset(test) })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization { mean: [0.5; 3], std: [0.5; 3] }
    }
}

/// Nearest-neighbour resize of an RGB image into a normalised CHW slice.
pub fn preprocess(img: &RgbImage, size: usize, norm: &Normalization, out: &mut [f32]) {
    for c in 0..3 {
        for y in 0..size {
            let sy = y * img.height / size;
            for x in 0..size {
                let sx = x * img.width / size;
                let v = img.data[(sy * img.width + sx) * 3 + c] as f32 / 255.0;
                out[(c * size + y) * size + x] = (v - norm.mean[c]) / norm.std[c];
            }
        }
    }
}

pub fn load_batch(records: &[SampleRecord], input_size: usize, norm: &Normalization) -> Result<Tensor<f32>> {
    if records.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let per = 3 * input_size * input_size;
    let mut data = vec![0.0f32; records.len() * per];
    for (r, out) in records.iter().zip(data.chunks_exact_mut(per)) {
        preprocess(&read_ppm(&r.path)?, input_size, norm, out);
    }
    Ok(Tensor::new(&[records.len(), 3, input_size, input_size], data)?)
}

/// Loads every record of `index` into memory with its labels.
pub fn load_set(index: &DatasetIndex, input_size: usize, norm: &Normalization) -> Result<LabeledSet> {
    let images = load_batch(&index.records, input_size, norm)?;
    Ok(LabeledSet::new(images, index.labels())?)
}

impl fmt::Display for DatasetIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let groups: BTreeSet<&str> = self.records.iter().map(|r| r.group_id.as_str()).collect();
        write!(f, "{} images, {} groups, {} classes", self.records.len(), groups.len(), self.classes.len())
    }
}
