//! iHarmony4-layout loading, splits, foreground-ratio buckets and paired augmentation.
//!
//! A subset directory holds `composite_images/`, `masks/` and `real_images/`.
//! Composite files are named `<real>_<maskid>_<compid>.<ext>`, masks
//! `<real>_<maskid>.png` and real images `<real>.<ext>`. Split files list one
//! composite per line, either as a bare file name or as a path whose first
//! component may name the subset (`HCOCO/composite_images/x_1_1.jpg`).

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::imaging::{Mask, RgbImage};

pub const OFFICIAL_TRAIN_COUNT: usize = 65_742;
pub const OFFICIAL_TEST_COUNT: usize = 7_404;

const IMAGE_EXTENSIONS: [&str; 4] = ["jpg", "png", "jpeg", "JPG"];
const MASK_EXTENSIONS: [&str; 2] = ["png", "jpg"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Subset {
    HCOCO,
    HAdobe5k,
    HFlickr,
    Hday2night,
    #[serde(rename = "synthetic")]
    Synthetic,
}

impl Subset {
    pub const OFFICIAL: [Subset; 4] = [Subset::HCOCO, Subset::HAdobe5k, Subset::HFlickr, Subset::Hday2night];

    pub fn name(self) -> &'static str {
        match self {
            Subset::HCOCO => "HCOCO",
            Subset::HAdobe5k => "HAdobe5k",
            Subset::HFlickr => "HFlickr",
            Subset::Hday2night => "Hday2night",
            Subset::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Subset::HCOCO,
            Subset::HAdobe5k,
            Subset::HFlickr,
            Subset::Hday2night,
            Subset::Synthetic,
        ]
        .into_iter()
        .find(|v| v.name().eq_ignore_ascii_case(s))
        .ok_or_else(|| param_err!("unknown subset `{s}`"))
    }
}

/// Foreground-ratio bucket with half-open boundaries `[0, .05)`, `[.05, .15)`, `[.15, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Bucket {
    Small,
    Medium,
    Large,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::Small, Bucket::Medium, Bucket::Large];

    pub fn label(self) -> &'static str {
        match self {
            Bucket::Small => "0–5%",
            Bucket::Medium => "5–15%",
            Bucket::Large => "15–100%",
        }
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

pub fn bucket_of(ratio: f64) -> Result<Bucket> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(param_err!("foreground ratio must lie in (0, 1], got {ratio}"));
    }
    Ok(if ratio < 0.05 {
        Bucket::Small
    } else if ratio < 0.15 {
        Bucket::Medium
    } else {
        Bucket::Large
    })
}

/// On-pixel fraction of `mask`; an empty mask is not a valid sample.
pub fn foreground_ratio(mask: &Mask) -> Result<f64> {
    let on = mask.count_on();
    if on == 0 {
        return Err(Error::Validation("mask has no foreground pixels".into()));
    }
    Ok(on as f64 / mask.len() as f64)
}

/// One composite / mask / real-image triple on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonySample {
    /// Composite file stem, unique within the dataset.
    pub id: String,
    pub subset: Subset,
    pub composite_path: PathBuf,
    pub mask_path: PathBuf,
    pub real_path: PathBuf,
    pub foreground_ratio: f64,
}

impl HarmonySample {
    pub fn bucket(&self) -> Result<Bucket> {
        bucket_of(self.foreground_ratio)
    }

    pub fn load(&self) -> Result<Triplet> {
        let triplet = Triplet {
            composite: RgbImage::load(&self.composite_path)?,
            mask: Mask::load(&self.mask_path)?,
            real: RgbImage::load(&self.real_path)?,
        };
        triplet.validate()?;
        Ok(triplet)
    }
}

/// In-memory composite, mask and ground truth of equal size.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub composite: RgbImage,
    pub mask: Mask,
    pub real: RgbImage,
}

impl Triplet {
    pub fn validate(&self) -> Result<()> {
        let d = self.composite.dims();
        if self.real.dims() != d || self.mask.dims() != d {
            return Err(Error::Validation(format!(
                "triplet sizes differ: composite {:?}, mask {:?}, real {:?}",
                d,
                self.mask.dims(),
                self.real.dims()
            )));
        }
        Ok(())
    }

    /// Square resize: bicubic for images, nearest for the mask.
    pub fn resize(&self, size: usize) -> Triplet {
        Triplet {
            composite: self.composite.resize_square(size),
            mask: self.mask.resize_nearest(size, size),
            real: self.real.resize_square(size),
        }
    }
}

/// Per-sample metadata needed to group evaluation results.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMeta {
    pub subset: Subset,
    pub foreground_ratio: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<HarmonySample>,
    pub test: Vec<HarmonySample>,
    /// Split-file entries skipped because their names did not parse.
    pub malformed: usize,
}

impl SplitManifest {
    /// `(train, test)` counts per subset.
    pub fn counts(&self) -> BTreeMap<Subset, (usize, usize)> {
        let mut out = BTreeMap::new();
        for s in &self.train {
            out.entry(s.subset).or_insert((0, 0)).0 += 1;
        }
        for s in &self.test {
            out.entry(s.subset).or_insert((0, 0)).1 += 1;
        }
        out
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let train: HashSet<(Subset, &str)> = self.train.iter().map(|s| (s.subset, s.id.as_str())).collect();
        if let Some(s) = self.test.iter().find(|s| train.contains(&(s.subset, s.id.as_str()))) {
            return Err(Error::Validation(format!(
                "sample {}/{} is in both train and test",
                s.subset, s.id
            )));
        }
        Ok(())
    }

    /// Lookup table keyed by sample id.
    pub fn index<'a>(samples: impl IntoIterator<Item = &'a HarmonySample>) -> BTreeMap<String, SampleMeta> {
        samples
            .into_iter()
            .map(|s| {
                (
                    s.id.clone(),
                    SampleMeta {
                        subset: s.subset,
                        foreground_ratio: s.foreground_ratio,
                    },
                )
            })
            .collect()
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Parsed composite name `<real>_<maskid>_<compid>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompositeName {
    pub real: String,
    pub mask_id: String,
    pub comp_id: String,
}

pub fn parse_composite_name(stem: &str) -> Option<CompositeName> {
    let mut parts = stem.rsplitn(3, '_');
    let comp_id = parts.next()?;
    let mask_id = parts.next()?;
    let real = parts.next()?;
    let numeric = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
    if real.is_empty() || !numeric(mask_id) || !numeric(comp_id) {
        return None;
    }
    Some(CompositeName {
        real: real.to_string(),
        mask_id: mask_id.to_string(),
        comp_id: comp_id.to_string(),
    })
}

fn find_with_ext(dir: &Path, stem: &str, exts: &[&str]) -> Option<PathBuf> {
    exts.iter()
        .map(|e| dir.join(format!("{stem}.{e}")))
        .find(|p| p.is_file())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn suffix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Split entries `(subset, composite file name)` for one split. Uses the
/// combined `IHD_<split>.txt` at the root when present, otherwise one
/// `<Subset>/<Subset>_<split>.txt` per subset directory found.
fn split_entries(root: &Path, split: Split) -> Result<Vec<(Subset, String)>> {
    let combined = root.join(format!("IHD_{}.txt", split.suffix()));
    let mut files: Vec<(Option<Subset>, PathBuf)> = Vec::new();
    if combined.is_file() {
        files.push((None, combined.clone()));
    } else {
        for subset in Subset::OFFICIAL.into_iter().chain([Subset::Synthetic]) {
            let f = root
                .join(subset.name())
                .join(format!("{}_{}.txt", subset.name(), split.suffix()));
            if f.is_file() {
                files.push((Some(subset), f));
            }
        }
    }
    if files.is_empty() {
        return Err(Error::MissingFiles(vec![combined]));
    }
    let mut out = Vec::new();
    for (subset, file) in files {
        for line in std::fs::read_to_string(&file)?.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let path = Path::new(line);
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let from_path = path
                .components()
                .next()
                .and_then(|c| c.as_os_str().to_str())
                .and_then(|c| c.parse::<Subset>().ok());
            match subset.or(from_path) {
                Some(s) => out.push((s, name)),
                None => out.push((Subset::Synthetic, format!("\0{line}"))),
            }
        }
    }
    Ok(out)
}

/// Resolves both splits under `root`. Missing files are collected and
/// reported together; entries with unparsable names are skipped, logged
/// and counted in [`SplitManifest::malformed`].
pub fn load_iharmony4(root: impl AsRef<Path>) -> Result<SplitManifest> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::MissingFiles(vec![root.to_path_buf()]));
    }
    let mut manifest = SplitManifest::default();
    let mut missing = Vec::new();
    for split in [Split::Train, Split::Test] {
        for (subset, name) in split_entries(root, split)? {
            if let Some(line) = name.strip_prefix('\0') {
                log::warn!("split entry `{line}` names no known subset; skipped");
                manifest.malformed += 1;
                continue;
            }
            let stem = Path::new(&name)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let Some(parsed) = parse_composite_name(&stem) else {
                log::warn!("malformed composite name `{name}` in {subset}; skipped");
                manifest.malformed += 1;
                continue;
            };
            let dir = root.join(subset.name());
            let composite_path = dir.join("composite_images").join(&name);
            let mask_stem = format!("{}_{}", parsed.real, parsed.mask_id);
            let mask_path = find_with_ext(&dir.join("masks"), &mask_stem, &MASK_EXTENSIONS);
            let real_path = find_with_ext(&dir.join("real_images"), &parsed.real, &IMAGE_EXTENSIONS);
            let mut ok = true;
            if !composite_path.is_file() {
                missing.push(composite_path.clone());
                ok = false;
            }
            if mask_path.is_none() {
                missing.push(dir.join("masks").join(format!("{mask_stem}.png")));
                ok = false;
            }
            if real_path.is_none() {
                missing.push(dir.join("real_images").join(format!("{}.jpg", parsed.real)));
                ok = false;
            }
            if !ok {
                continue;
            }
            let (mask_path, real_path) = (mask_path.unwrap(), real_path.unwrap());
            let size = image::image_dimensions(&composite_path)?;
            for other in [&mask_path, &real_path] {
                let s = image::image_dimensions(other)?;
                if s != size {
                    return Err(Error::Validation(format!(
                        "{} is {}x{}, composite {} is {}x{}",
                        other.display(),
                        s.0,
                        s.1,
                        composite_path.display(),
                        size.0,
                        size.1
                    )));
                }
            }
            let mask = Mask::load(&mask_path)?;
            let foreground_ratio = foreground_ratio(&mask)
                .map_err(|_| Error::Validation(format!("mask {} has no foreground", mask_path.display())))?;
            let sample = HarmonySample {
                id: stem,
                subset,
                composite_path,
                mask_path,
                real_path,
                foreground_ratio,
            };
            match split {
                Split::Train => manifest.train.push(sample),
                Split::Test => manifest.test.push(sample),
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    manifest.check_disjoint()?;
    let counts = manifest.counts();
    if Subset::OFFICIAL.iter().all(|s| counts.contains_key(s)) {
        let (tr, te) = (manifest.train.len(), manifest.test.len());
        if tr != OFFICIAL_TRAIN_COUNT || te != OFFICIAL_TEST_COUNT {
            log::warn!(
                "all four subsets present but split sizes are {tr}/{te}, expected {OFFICIAL_TRAIN_COUNT}/{OFFICIAL_TEST_COUNT}"
            );
        }
    }
    Ok(manifest)
}

/// Random-resized-crop and flip parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub scale: (f64, f64),
    pub aspect: (f64, f64),
    pub flip_probability: f64,
    pub max_tries: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale: (0.5, 1.0),
            aspect: (3.0 / 4.0, 4.0 / 3.0),
            flip_probability: 0.5,
            max_tries: 10,
        }
    }
}

/// Crop window followed by a square resize and an optional horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeometricTransform {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    pub flip: bool,
    pub output_size: usize,
}

impl GeometricTransform {
    pub fn identity(width: usize, height: usize, output_size: usize) -> Self {
        Self {
            x0: 0,
            y0: 0,
            width,
            height,
            flip: false,
            output_size,
        }
    }

    pub fn apply_image(&self, img: &RgbImage) -> Result<RgbImage> {
        let out = img
            .crop(self.x0, self.y0, self.width, self.height)?
            .resize_square(self.output_size);
        Ok(if self.flip { out.flip_horizontal() } else { out })
    }

    pub fn apply_mask(&self, mask: &Mask) -> Result<Mask> {
        let out = mask
            .crop(self.x0, self.y0, self.width, self.height)?
            .resize_nearest(self.output_size, self.output_size);
        Ok(if self.flip { out.flip_horizontal() } else { out })
    }

    pub fn apply(&self, t: &Triplet) -> Result<Triplet> {
        Ok(Triplet {
            composite: self.apply_image(&t.composite)?,
            mask: self.apply_mask(&t.mask)?,
            real: self.apply_image(&t.real)?,
        })
    }
}

/// Draws a crop window whose resized mask keeps foreground. After
/// `max_tries` rejections the full frame is used.
pub fn sample_transform<R: Rng + ?Sized>(
    mask: &Mask,
    output_size: usize,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<GeometricTransform> {
    let (h, w) = mask.dims();
    if mask.count_on() == 0 {
        return Err(Error::Validation("cannot augment a sample without foreground".into()));
    }
    let area = (h * w) as f64;
    let (la, lb) = (config.aspect.0.ln(), config.aspect.1.ln());
    let mut chosen = None;
    for _ in 0..config.max_tries {
        let target = area * rng.random_range(config.scale.0..=config.scale.1);
        let aspect = rng.random_range(la..=lb).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw == 0 || ch == 0 || cw > w || ch > h {
            continue;
        }
        let x0 = rng.random_range(0..=w - cw);
        let y0 = rng.random_range(0..=h - ch);
        let t = GeometricTransform {
            x0,
            y0,
            width: cw,
            height: ch,
            flip: false,
            output_size,
        };
        if t.apply_mask(mask)?.count_on() > 0 {
            chosen = Some(t);
            break;
        }
    }
    let mut t = chosen.unwrap_or_else(|| GeometricTransform::identity(w, h, output_size));
    t.flip = rng.random_bool(config.flip_probability);
    Ok(t)
}

/// Applies one random geometric transform identically to all three images.
pub fn augment<R: Rng + ?Sized>(
    sample: &Triplet,
    output_size: usize,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<(Triplet, GeometricTransform)> {
    sample.validate()?;
    let t = sample_transform(&sample.mask, output_size, config, rng)?;
    Ok((t.apply(sample)?, t))
}
