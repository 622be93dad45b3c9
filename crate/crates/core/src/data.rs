//! Dataset ingestion, preprocessing, stratified k-fold splitting and the
//! synthetic lesion generator.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample::{resize_bilinear, resize_nearest};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LesionClass {
    Benign,
    Malignant,
    Normal,
}

impl LesionClass {
    pub const ALL: [LesionClass; 3] = [LesionClass::Benign, LesionClass::Malignant, LesionClass::Normal];

    pub fn as_str(self) -> &'static str {
        match self {
            LesionClass::Benign => "benign",
            LesionClass::Malignant => "malignant",
            LesionClass::Normal => "normal",
        }
    }
}

impl fmt::Display for LesionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LesionClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "benign" => Ok(LesionClass::Benign),
            "malignant" => Ok(LesionClass::Malignant),
            "normal" => Ok(LesionClass::Normal),
            other => Err(Error::Invalid(format!("unknown lesion class '{other}'"))),
        }
    }
}

/// One grayscale image (`1 × H × W`, values in `[0, 1]`) with its binary
/// mask of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    pub id: String,
    pub image: Tensor,
    pub mask: Tensor,
    pub class: LesionClass,
}

impl SegmentationSample {
    pub fn extent(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// `images/NAME.png` + `masks/NAME.png`, optional `classes.csv`.
    Flat,
    /// `<class>/NAME.png` with `NAME_mask.png` / `NAME_mask_K.png` companions.
    Busi,
    /// `original/NAME.png` + `GT/NAME.png`, optional `classes.csv`.
    Busis,
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "flat" => Ok(Layout::Flat),
            "busi" => Ok(Layout::Busi),
            "busis" => Ok(Layout::Busis),
            other => Err(Error::Invalid(format!("unknown layout '{other}'"))),
        }
    }
}

/// Reads a PNG as luminance scaled to `[0, 1]`, shape `1 × H × W`.
pub fn read_gray_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::data(path, e.to_string()))?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    let data = gray.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    Tensor::new(vec![1, h as usize, w as usize], data)
}

/// Reads a mask PNG and binarises it at pixel value > 127.
pub fn read_mask_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::data(path, e.to_string()))?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    let data = gray
        .as_raw()
        .iter()
        .map(|&v| if v > 127 { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(vec![1, h as usize, w as usize], data)
}

/// Writes a `1 × H × W` (or `H × W`-plane) tensor with values in `[0, 1]`
/// as an 8-bit grayscale PNG.
pub fn write_gray_png(path: &Path, t: &Tensor) -> Result<()> {
    let (h, w) = match t.shape() {
        [1, h, w] | [1, 1, h, w] => (*h, *w),
        other => return Err(Error::shape("write_gray_png", format!("shape {other:?}"))),
    };
    let bytes: Vec<u8> = t
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::data(path, "buffer size mismatch"))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    buf.save(path).map_err(|e| Error::data(path, e.to_string()))
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn read_classes(root: &Path) -> Result<BTreeMap<String, LesionClass>> {
    let path = root.join("classes.csv");
    let mut map = BTreeMap::new();
    if !path.exists() {
        return Ok(map);
    }
    let mut reader = csv::Reader::from_path(&path).map_err(|e| Error::data(&path, e.to_string()))?;
    for row in reader.records() {
        let row = row.map_err(|e| Error::data(&path, e.to_string()))?;
        let (id, class) = (row.get(0), row.get(1));
        match (id, class) {
            (Some(id), Some(class)) => {
                map.insert(id.to_string(), class.parse()?);
            }
            _ => return Err(Error::data(&path, "expected columns id,class")),
        }
    }
    Ok(map)
}

fn union_masks(masks: &[PathBuf]) -> Result<Tensor> {
    let mut acc = read_mask_png(&masks[0])?;
    for p in &masks[1..] {
        let m = read_mask_png(p)?;
        if m.shape() != acc.shape() {
            return Err(Error::data(p, "mask extent differs from sibling mask"));
        }
        acc = acc.zip_map(&m, f64::max)?;
    }
    Ok(acc)
}

fn pair_sample(id: String, image: &Path, masks: &[PathBuf], class: LesionClass) -> Result<SegmentationSample> {
    let img = read_gray_png(image)?;
    let mask = union_masks(masks)?;
    if img.shape() != mask.shape() {
        return Err(Error::data(
            image,
            format!("image {:?} and mask {:?} extents differ", img.shape(), mask.shape()),
        ));
    }
    Ok(SegmentationSample {
        id,
        image: img,
        mask,
        class,
    })
}

fn reject_unpaired(root: &Path, unpaired: Vec<PathBuf>) -> Result<()> {
    if unpaired.is_empty() {
        return Ok(());
    }
    let list: Vec<String> = unpaired.iter().map(|p| p.display().to_string()).collect();
    Err(Error::data(
        root,
        format!("images without masks: {}", list.join(", ")),
    ))
}

fn load_paired_dirs(root: &Path, image_dir: &str, mask_dir: &str) -> Result<Vec<SegmentationSample>> {
    let images = root.join(image_dir);
    let masks = root.join(mask_dir);
    for dir in [&images, &masks] {
        if !dir.is_dir() {
            return Err(Error::data(dir.as_path(), "directory not found"));
        }
    }
    let classes = read_classes(root)?;
    let mut samples = Vec::new();
    let mut unpaired = Vec::new();
    for path in png_files(&images)? {
        let id = stem(&path);
        let mask = masks.join(format!("{id}.png"));
        if !mask.is_file() {
            unpaired.push(path);
            continue;
        }
        let class = classes.get(&id).copied().unwrap_or(LesionClass::Benign);
        samples.push(pair_sample(id, &path, &[mask], class)?);
    }
    reject_unpaired(root, unpaired)?;
    Ok(samples)
}

fn is_busi_mask_of(image_stem: &str, candidate: &str) -> bool {
    let Some(rest) = candidate.strip_prefix(image_stem) else {
        return false;
    };
    let Some(rest) = rest.strip_prefix("_mask") else {
        return false;
    };
    rest.is_empty() || rest.strip_prefix('_').is_some_and(|n| !n.is_empty() && n.chars().all(|c| c.is_ascii_digit()))
}

fn load_busi(root: &Path) -> Result<Vec<SegmentationSample>> {
    let mut samples = Vec::new();
    let mut unpaired = Vec::new();
    let mut found_any = false;
    for class in LesionClass::ALL {
        let dir = root.join(class.as_str());
        if !dir.is_dir() {
            continue;
        }
        found_any = true;
        let files = png_files(&dir)?;
        let stems: Vec<String> = files.iter().map(|p| stem(p)).collect();
        for (path, s) in files.iter().zip(&stems) {
            if s.contains("_mask") {
                continue;
            }
            let masks: Vec<PathBuf> = files
                .iter()
                .zip(&stems)
                .filter(|(_, m)| is_busi_mask_of(s, m))
                .map(|(p, _)| p.clone())
                .collect();
            if masks.is_empty() {
                unpaired.push(path.clone());
                continue;
            }
            samples.push(pair_sample(format!("{}/{}", class.as_str(), s), path, &masks, class)?);
        }
    }
    if !found_any {
        return Err(Error::data(root, "no benign/malignant/normal subdirectories"));
    }
    reject_unpaired(root, unpaired)?;
    Ok(samples)
}

pub fn load_dataset(root: &Path, layout: Layout) -> Result<Vec<SegmentationSample>> {
    if !root.is_dir() {
        return Err(Error::data(root, "dataset directory not found"));
    }
    let samples = match layout {
        Layout::Flat => load_paired_dirs(root, "images", "masks")?,
        Layout::Busis => load_paired_dirs(root, "original", "GT")?,
        Layout::Busi => load_busi(root)?,
    };
    if samples.is_empty() {
        return Err(Error::data(root, "no samples found"));
    }
    Ok(samples)
}

/// Per-image min-max normalisation to `[0, 1]`; constant images map to 0.
pub fn normalize_min_max(image: &Tensor) -> Tensor {
    let (lo, hi) = image
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi <= lo {
        return Tensor::zeros(image.shape());
    }
    image.map(|v| (v - lo) / (hi - lo))
}

fn as_batch(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    t.clone().reshape(vec![1, s[0], s[1], s[2]])
}

fn from_batch(t: Tensor) -> Result<Tensor> {
    let s = t.shape().to_vec();
    t.reshape(vec![s[1], s[2], s[3]])
}

/// Bilinear image resize followed by min-max normalisation; nearest
/// neighbour mask resize.
pub fn preprocess(sample: &SegmentationSample, target: (usize, usize)) -> Result<SegmentationSample> {
    let (h, w) = target;
    if h == 0 || w == 0 {
        return Err(Error::Invalid("preprocess: zero target extent".into()));
    }
    let image = from_batch(resize_bilinear(&as_batch(&sample.image)?, h, w)?)?;
    let mask = from_batch(resize_nearest(&as_batch(&sample.mask)?, h, w)?)?;
    Ok(SegmentationSample {
        id: sample.id.clone(),
        image: normalize_min_max(&image),
        mask,
        class: sample.class,
    })
}

/// `k` disjoint folds of sample ids with per-fold class tallies.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldSplit {
    pub folds: Vec<Vec<String>>,
    pub tallies: Vec<BTreeMap<LesionClass, usize>>,
}

impl FoldSplit {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.folds.iter().position(|f| f.iter().any(|x| x == id))
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.folds.iter().map(Vec::len).collect()
    }
}

/// Stratified split: each class is shuffled with `seed` and dealt
/// round-robin onto the folds, the dealing position carrying over from one
/// class to the next. Returns warnings for classes smaller than `k`.
pub fn make_folds(samples: &[SegmentationSample], k: usize, seed: u64) -> Result<(FoldSplit, Vec<String>)> {
    if k < 2 {
        return Err(Error::Invalid(format!("need at least 2 folds, got {k}")));
    }
    if samples.is_empty() {
        return Err(Error::Invalid("cannot split an empty dataset".into()));
    }
    let mut seen = BTreeSet::new();
    for s in samples {
        if !seen.insert(s.id.as_str()) {
            return Err(Error::Invalid(format!("duplicate sample id '{}'", s.id)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut tallies = vec![BTreeMap::new(); k];
    let mut warnings = Vec::new();
    let mut next = 0;
    for class in LesionClass::ALL {
        let mut ids: Vec<&str> = samples
            .iter()
            .filter(|s| s.class == class)
            .map(|s| s.id.as_str())
            .collect();
        if ids.is_empty() {
            continue;
        }
        if ids.len() < k {
            warnings.push(format!(
                "class {class} has {} samples, fewer than {k} folds",
                ids.len()
            ));
        }
        ids.shuffle(&mut rng);
        for id in ids {
            folds[next].push(id.to_string());
            *tallies[next].entry(class).or_insert(0) += 1;
            next = (next + 1) % k;
        }
    }
    Ok((FoldSplit { folds, tallies }, warnings))
}

/// Writes `id,fold,class` rows.
pub fn write_manifest(path: &Path, split: &FoldSplit, samples: &[SegmentationSample]) -> Result<()> {
    let classes: BTreeMap<&str, LesionClass> = samples.iter().map(|s| (s.id.as_str(), s.class)).collect();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(path, e.to_string()))?;
    let io = |e: csv::Error| Error::data(path, e.to_string());
    w.write_record(["id", "fold", "class"]).map_err(io)?;
    for (fold, ids) in split.folds.iter().enumerate() {
        for id in ids {
            let class = classes
                .get(id.as_str())
                .ok_or_else(|| Error::Invalid(format!("id '{id}' not among samples")))?;
            w.write_record([id.as_str(), &fold.to_string(), class.as_str()])
                .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub fold: usize,
    pub class: LesionClass,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::data(path, e.to_string()))?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::data(path, e.to_string()))?;
        if rec.len() < 3 {
            return Err(Error::data(path, "expected columns id,fold,class"));
        }
        let fold = rec[1]
            .trim()
            .parse()
            .map_err(|_| Error::data(path, format!("bad fold '{}'", &rec[1])))?;
        rows.push(ManifestRow {
            id: rec[0].to_string(),
            fold,
            class: rec[2].parse()?,
        });
    }
    Ok(rows)
}

/// Parameters of the synthetic lesion generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub noise_level: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 80,
            size: 64,
            seed: 0,
            noise_level: 0.4,
        }
    }
}

struct Lesion {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
    lobes: f64,
    amplitude: f64,
    phase: f64,
}

impl Lesion {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = (c * dx + s * dy) / self.a;
        let v = (-s * dx + c * dy) / self.b;
        let rho = (u * u + v * v).sqrt();
        let boundary = 1.0 + self.amplitude * (self.lobes * v.atan2(u) + self.phase).sin();
        rho <= boundary
    }
}

fn box_blur3(field: &[f64], n: usize) -> Vec<f64> {
    let at = |r: isize, c: isize| {
        let r = r.clamp(0, n as isize - 1) as usize;
        let c = c.clamp(0, n as isize - 1) as usize;
        field[r * n + c]
    };
    let mut out = vec![0.0; n * n];
    for r in 0..n as isize {
        for c in 0..n as isize {
            let mut s = 0.0;
            for dr in -1..=1 {
                for dc in -1..=1 {
                    s += at(r + dr, c + dc);
                }
            }
            out[r as usize * n + c as usize] = s / 9.0;
        }
    }
    out
}

/// Bright elliptical lesions on a darker background with multiplicative,
/// spatially blurred speckle. Even indices are benign (smooth ellipse), odd
/// indices malignant (lobulated boundary).
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<SegmentationSample>> {
    if cfg.count == 0 {
        return Err(Error::Invalid("synthetic count must be at least 1".into()));
    }
    if cfg.size < 8 {
        return Err(Error::Invalid(format!("synthetic size {} is below 8", cfg.size)));
    }
    if !(0.0..1.0).contains(&cfg.noise_level) {
        return Err(Error::Invalid(format!(
            "noise level {} not in [0, 1)",
            cfg.noise_level
        )));
    }
    let n = cfg.size;
    let size = n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.count);
    for idx in 0..cfg.count {
        let malignant = idx % 2 == 1;
        let a = rng.random_range(0.10..0.35) * size;
        let b = rng.random_range(0.10..0.35) * size;
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let (lobes, amplitude, phase) = if malignant {
            (
                rng.random_range(3..=7) as f64,
                rng.random_range(0.10..0.20),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        } else {
            (0.0, 0.0, 0.0)
        };
        let reach = a.max(b) * (1.0 + amplitude) + 1.0;
        // Tiny images cannot hold the lesion clear of the border; centre it.
        let mut centre = || {
            if size > 2.0 * reach {
                rng.random_range(reach..size - reach)
            } else {
                let _: f64 = rng.random();
                size / 2.0
            }
        };
        let cx = centre();
        let cy = centre();
        let lesion = Lesion {
            cx,
            cy,
            a,
            b,
            angle,
            lobes,
            amplitude,
            phase,
        };
        let background = rng.random_range(0.20..0.35);
        let lesion_level = background + rng.random_range(0.30..0.45);
        let speckle: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let speckle = box_blur3(&speckle, n);

        let mut image = Vec::with_capacity(n * n);
        let mut mask = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                let inside = lesion.contains(c as f64 + 0.5, r as f64 + 0.5);
                let base = if inside { lesion_level } else { background };
                let factor = 1.0 + cfg.noise_level * speckle[r * n + c];
                image.push((base * factor).clamp(0.0, 1.0));
                mask.push(if inside { 1.0 } else { 0.0 });
            }
        }
        out.push(SegmentationSample {
            id: format!("synth_{idx:04}"),
            image: Tensor::new(vec![1, n, n], image)?,
            mask: Tensor::new(vec![1, n, n], mask)?,
            class: if malignant {
                LesionClass::Malignant
            } else {
                LesionClass::Benign
            },
        });
    }
    Ok(out)
}

/// Writes samples in the flat layout (`images/`, `masks/`, `classes.csv`).
pub fn write_flat(dir: &Path, samples: &[SegmentationSample]) -> Result<()> {
    fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    fs::create_dir_all(dir.join("masks")).map_err(|e| Error::io(dir, e))?;
    let classes = dir.join("classes.csv");
    let mut w = csv::Writer::from_path(&classes).map_err(|e| Error::data(&classes, e.to_string()))?;
    w.write_record(["id", "class"])
        .map_err(|e| Error::data(&classes, e.to_string()))?;
    for s in samples {
        write_gray_png(&dir.join("images").join(format!("{}.png", s.id)), &s.image)?;
        write_gray_png(&dir.join("masks").join(format!("{}.png", s.id)), &s.mask)?;
        w.write_record([s.id.as_str(), s.class.as_str()])
            .map_err(|e| Error::data(&classes, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&classes, e))
}

/// Stacks sample images and masks into `B × 1 × H × W` tensors.
pub fn batch_tensors(samples: &[&SegmentationSample]) -> Result<(Tensor, Tensor)> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let masks: Vec<&Tensor> = samples.iter().map(|s| &s.mask).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}
