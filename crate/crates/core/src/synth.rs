//! Procedural composites for training and testing without iHarmony4.
//!
//! Scenes, masks and appearance shifts are described in unit coordinates, so
//! the same sample can be rendered at any resolution. Every generator
//! parameter is kept in [`SyntheticSpec`] for exact reproduction.

use std::f32::consts::PI;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, SplitManifest, Subset, Triplet};
use crate::error::{param_err, Error, Result};
use crate::imaging::{Mask, RgbImage};
use crate::util::seeded_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ShapeKind {
    Ellipse,
    Rect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneShape {
    pub kind: ShapeKind,
    pub center: [f32; 2],
    pub half_size: [f32; 2],
    pub rotation: f32,
    pub color: [f32; 3],
}

impl SceneShape {
    fn contains(&self, u: f32, v: f32) -> bool {
        let (s, c) = self.rotation.sin_cos();
        let (du, dv) = (u - self.center[0], v - self.center[1]);
        let a = (c * du + s * dv) / self.half_size[0];
        let b = (-s * du + c * dv) / self.half_size[1];
        match self.kind {
            ShapeKind::Ellipse => a * a + b * b <= 1.0,
            ShapeKind::Rect => a.abs() <= 1.0 && b.abs() <= 1.0,
        }
    }
}

/// Gradient background, a few flat shapes, a sinusoidal texture and a tint.
/// Colours are in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub colors: [[f32; 3]; 2],
    pub gradient_angle: f32,
    pub shapes: Vec<SceneShape>,
    pub texture_amplitude: f32,
    pub texture_frequency: f32,
    pub texture_angle: f32,
    pub texture_phase: f32,
    pub tint: [f32; 3],
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

impl SceneParams {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let n = rng.random_range(1..=3);
        let shapes = (0..n)
            .map(|_| SceneShape {
                kind: if rng.random_bool(0.5) {
                    ShapeKind::Ellipse
                } else {
                    ShapeKind::Rect
                },
                center: [rng.random(), rng.random()],
                half_size: [rng.random_range(0.15..0.4), rng.random_range(0.15..0.4)],
                rotation: rng.random_range(0.0..PI),
                color: random_color(rng),
            })
            .collect();
        Self {
            colors: [random_color(rng), random_color(rng)],
            gradient_angle: rng.random_range(0.0..2.0 * PI),
            shapes,
            texture_amplitude: rng.random_range(0.0..0.05),
            texture_frequency: rng.random_range(1.0..3.0),
            texture_angle: rng.random_range(0.0..PI),
            texture_phase: rng.random_range(0.0..2.0 * PI),
            tint: [
                rng.random_range(0.85..1.15),
                rng.random_range(0.85..1.15),
                rng.random_range(0.85..1.15),
            ],
        }
    }

    fn color_at(&self, u: f32, v: f32) -> [f32; 3] {
        let (gs, gc) = self.gradient_angle.sin_cos();
        let t = (0.5 + (u - 0.5) * gc + (v - 0.5) * gs).clamp(0.0, 1.0);
        let mut rgb = [0f32; 3];
        for c in 0..3 {
            rgb[c] = self.colors[0][c] * (1.0 - t) + self.colors[1][c] * t;
        }
        for shape in &self.shapes {
            if shape.contains(u, v) {
                rgb = shape.color;
            }
        }
        let (ts, tc) = self.texture_angle.sin_cos();
        let tex =
            self.texture_amplitude * (2.0 * PI * self.texture_frequency * (u * tc + v * ts) + self.texture_phase).sin();
        for c in 0..3 {
            rgb[c] = ((rgb[c] + tex) * self.tint[c]).clamp(0.0, 1.0);
        }
        rgb
    }

    /// Renders with 2×2 supersampling per pixel.
    pub fn render(&self, width: usize, height: usize) -> RgbImage {
        let mut img = RgbImage::filled(width, height, [0.0; 3]);
        let offsets = [0.25f32, 0.75];
        for y in 0..height {
            for x in 0..width {
                let mut acc = [0f32; 3];
                for oy in offsets {
                    for ox in offsets {
                        let u = (x as f32 + ox) / width as f32;
                        let v = (y as f32 + oy) / height as f32;
                        let rgb = self.color_at(u, v);
                        for c in 0..3 {
                            acc[c] += rgb[c];
                        }
                    }
                }
                for (c, a) in acc.iter().enumerate() {
                    img.set(c, y, x, a / 2.0 - 1.0);
                }
            }
        }
        img
    }
}

/// A ground-truth source: a procedural scene or a raster image.
#[derive(Debug, Clone, PartialEq)]
pub enum BaseImage {
    Scene(SceneParams),
    Raster(RgbImage),
}

impl BaseImage {
    pub fn render(&self, size: usize) -> RgbImage {
        match self {
            BaseImage::Scene(s) => s.render(size, size),
            BaseImage::Raster(img) => img.resize_square(size),
        }
    }
}

/// Foreground region in unit coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MaskShape {
    Ellipse {
        center: [f32; 2],
        radii: [f32; 2],
        rotation: f32,
    },
    /// Star-shaped polygon; vertex `k` sits at angle `rotation + 2πk/n` and
    /// distance `radii[k]` from the centre.
    Polygon {
        center: [f32; 2],
        radii: Vec<f32>,
        rotation: f32,
    },
}

fn point_in_polygon(pts: &[(f32, f32)], u: f32, v: f32) -> bool {
    let mut inside = false;
    let mut j = pts.len() - 1;
    for i in 0..pts.len() {
        let (xi, yi) = pts[i];
        let (xj, yj) = pts[j];
        if (yi > v) != (yj > v) && u < (xj - xi) * (v - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

impl MaskShape {
    /// Random ellipse or polygon whose nominal area is `ratio` of the frame.
    pub fn random<R: Rng + ?Sized>(ratio: f32, rng: &mut R) -> Self {
        let rotation = rng.random_range(0.0..PI);
        if rng.random_bool(0.5) {
            let aspect: f32 = rng.random_range(0.6..1.6);
            let ab = ratio / PI;
            let radii = [(ab * aspect).sqrt(), (ab / aspect).sqrt()];
            let extent = radii[0].max(radii[1]);
            MaskShape::Ellipse {
                center: random_center(extent, rng),
                radii,
                rotation,
            }
        } else {
            let n = rng.random_range(5..=9);
            let raw: Vec<f32> = (0..n).map(|_| rng.random_range(0.6..1.0)).collect();
            let step = 2.0 * PI / n as f32;
            let unit_area: f32 = (0..n).map(|k| 0.5 * raw[k] * raw[(k + 1) % n] * step.sin()).sum();
            let scale = (ratio / unit_area).sqrt();
            let radii: Vec<f32> = raw.iter().map(|r| r * scale).collect();
            let extent = radii.iter().cloned().fold(0.0, f32::max);
            MaskShape::Polygon {
                center: random_center(extent, rng),
                radii,
                rotation,
            }
        }
    }

    pub fn contains(&self, u: f32, v: f32) -> bool {
        match self {
            MaskShape::Ellipse {
                center,
                radii,
                rotation,
            } => {
                let (s, c) = rotation.sin_cos();
                let (du, dv) = (u - center[0], v - center[1]);
                let a = (c * du + s * dv) / radii[0];
                let b = (-s * du + c * dv) / radii[1];
                a * a + b * b <= 1.0
            }
            MaskShape::Polygon {
                center,
                radii,
                rotation,
            } => {
                let step = 2.0 * PI / radii.len() as f32;
                let pts: Vec<(f32, f32)> = radii
                    .iter()
                    .enumerate()
                    .map(|(k, r)| {
                        let a = rotation + step * k as f32;
                        (center[0] + r * a.cos(), center[1] + r * a.sin())
                    })
                    .collect();
                point_in_polygon(&pts, u, v)
            }
        }
    }

    /// Samples the shape at pixel centres.
    pub fn rasterize(&self, width: usize, height: usize) -> Mask {
        Mask::from_fn(width, height, |x, y| {
            self.contains((x as f32 + 0.5) / width as f32, (y as f32 + 0.5) / height as f32)
        })
    }
}

fn random_center<R: Rng + ?Sized>(extent: f32, rng: &mut R) -> [f32; 2] {
    let lo = extent.min(0.5);
    let hi = (1.0 - extent).max(0.5);
    if hi - lo < 1e-6 {
        return [0.5, 0.5];
    }
    [rng.random_range(lo..=hi), rng.random_range(lo..=hi)]
}

/// Foreground appearance change applied in `[0, 1]`:
/// `((v − ½)(1 + contrast) + ½)(1 + brightness)(1 + gain_c)`, clamped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AppearanceShift {
    pub brightness: f32,
    pub contrast: f32,
    pub gains: [f32; 3],
}

impl AppearanceShift {
    pub fn random<R: Rng + ?Sized>(ranges: &ShiftRanges, rng: &mut R) -> Self {
        let mut sym = |r: f32| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        Self {
            brightness: sym(ranges.brightness),
            contrast: sym(ranges.contrast),
            gains: [sym(ranges.gain), sym(ranges.gain), sym(ranges.gain)],
        }
    }

    pub fn apply(&self, img: &RgbImage) -> RgbImage {
        let mut out = img.clone();
        let plane = img.width() * img.height();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i / plane;
            let u = (*v + 1.0) * 0.5;
            let s = ((u - 0.5) * (1.0 + self.contrast) + 0.5) * (1.0 + self.brightness) * (1.0 + self.gains[c]);
            *v = s.clamp(0.0, 1.0) * 2.0 - 1.0;
        }
        out
    }
}

/// Half-widths of the uniform shift distributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftRanges {
    pub brightness: f32,
    pub contrast: f32,
    pub gain: f32,
}

impl Default for ShiftRanges {
    fn default() -> Self {
        Self {
            brightness: 0.5,
            contrast: 0.5,
            gain: 0.3,
        }
    }
}

/// Nominal foreground-ratio ranges, one per bucket; a bucket is drawn
/// uniformly, then a ratio uniformly within it.
pub const RATIO_RANGES: [(f32, f32); 3] = [(0.02, 0.05), (0.05, 0.15), (0.15, 0.45)];

/// Everything needed to re-render one synthetic sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub id: String,
    pub base: usize,
    pub nominal_ratio: f32,
    pub mask: MaskShape,
    pub shift: AppearanceShift,
}

impl SyntheticSpec {
    /// Composite, mask and ground truth at `size`×`size`. The composite
    /// equals the ground truth outside the mask bit-exactly.
    pub fn render(&self, bases: &[BaseImage], size: usize) -> Result<Triplet> {
        let base = bases
            .get(self.base)
            .ok_or_else(|| param_err!("spec {} references missing base {}", self.id, self.base))?;
        let real = base.render(size);
        let mask = self.mask.rasterize(size, size);
        if mask.count_on() == 0 {
            return Err(Error::Validation(format!(
                "sample {} has an empty mask at {size}px",
                self.id
            )));
        }
        let composite = RgbImage::blend(&self.shift.apply(&real), &real, &mask)?;
        Ok(Triplet { composite, mask, real })
    }
}

/// `count` samples over `bases`, cycling through bases so each is used
/// roughly equally. Ids follow the `<real>_<maskid>_<compid>` convention.
pub fn make_synthetic_set(
    bases: &[BaseImage],
    base_offset: usize,
    count: usize,
    ranges: &ShiftRanges,
    seed: u64,
) -> Result<Vec<SyntheticSpec>> {
    if bases.is_empty() {
        return Err(param_err!("synthetic set needs at least one base image"));
    }
    let mut rng = seeded_rng(seed);
    let mut per_base = vec![0usize; bases.len()];
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let b = i % bases.len();
        per_base[b] += 1;
        let (lo, hi) = RATIO_RANGES[rng.random_range(0..RATIO_RANGES.len())];
        let ratio = rng.random_range(lo..hi);
        out.push(SyntheticSpec {
            id: format!("s{:05}_{}_1", base_offset + b, per_base[b]),
            base: base_offset + b,
            nominal_ratio: ratio,
            mask: MaskShape::random(ratio, &mut rng),
            shift: AppearanceShift::random(ranges, &mut rng),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub train_bases: usize,
    pub test_bases: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub shift: ShiftRanges,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            train_bases: 2000,
            test_bases: 200,
            train_count: 2000,
            test_count: 200,
            shift: ShiftRanges::default(),
            seed: 0,
        }
    }
}

/// Train and test samples drawn from disjoint procedural base scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSplit {
    pub config: SyntheticConfig,
    pub bases: Vec<BaseImage>,
    pub train: Vec<SyntheticSpec>,
    pub test: Vec<SyntheticSpec>,
}

#[derive(Serialize, Deserialize)]
struct GeneratorRecord {
    config: SyntheticConfig,
    scenes: Vec<SceneParams>,
    train: Vec<SyntheticSpec>,
    test: Vec<SyntheticSpec>,
}

impl SyntheticSplit {
    pub fn generate(config: &SyntheticConfig) -> Result<Self> {
        if config.train_bases == 0 || config.test_bases == 0 {
            return Err(param_err!("synthetic split needs train and test base scenes"));
        }
        let mut rng = seeded_rng(config.seed);
        let bases: Vec<BaseImage> = (0..config.train_bases + config.test_bases)
            .map(|_| BaseImage::Scene(SceneParams::random(&mut rng)))
            .collect();
        let (tr, te) = bases.split_at(config.train_bases);
        let train = make_synthetic_set(tr, 0, config.train_count, &config.shift, config.seed.wrapping_add(1))?;
        let test = make_synthetic_set(
            te,
            config.train_bases,
            config.test_count,
            &config.shift,
            config.seed.wrapping_add(2),
        )?;
        Ok(Self {
            config: config.clone(),
            bases,
            train,
            test,
        })
    }

    pub fn render_train(&self, size: usize) -> Result<Vec<Triplet>> {
        self.train.iter().map(|s| s.render(&self.bases, size)).collect()
    }

    pub fn render_test(&self, size: usize) -> Result<Vec<Triplet>> {
        self.test.iter().map(|s| s.render(&self.bases, size)).collect()
    }

    /// Writes the split in iHarmony4 layout under `root/synthetic/` together
    /// with `generator.json`, then loads it back.
    pub fn write_layout(&self, root: impl AsRef<Path>, size: usize) -> Result<SplitManifest> {
        let root = root.as_ref();
        let dir = root.join(Subset::Synthetic.name());
        for sub in ["composite_images", "masks", "real_images"] {
            std::fs::create_dir_all(dir.join(sub))?;
        }
        let mut written = vec![false; self.bases.len()];
        for (split, specs) in [("train", &self.train), ("test", &self.test)] {
            let mut lines = String::new();
            for spec in specs {
                let t = spec.render(&self.bases, size)?;
                let name = format!("{}.png", spec.id);
                let stem = spec.id.rsplitn(2, '_').nth(1).unwrap_or(&spec.id);
                t.composite.save_png(dir.join("composite_images").join(&name))?;
                t.mask.save_png(dir.join("masks").join(format!("{stem}.png")))?;
                if !written[spec.base] {
                    t.real
                        .save_png(dir.join("real_images").join(format!("s{:05}.png", spec.base)))?;
                    written[spec.base] = true;
                }
                lines.push_str(&name);
                lines.push('\n');
            }
            std::fs::write(dir.join(format!("synthetic_{split}.txt")), lines)?;
        }
        let record = GeneratorRecord {
            config: self.config.clone(),
            scenes: self
                .bases
                .iter()
                .filter_map(|b| match b {
                    BaseImage::Scene(s) => Some(s.clone()),
                    BaseImage::Raster(_) => None,
                })
                .collect(),
            train: self.train.clone(),
            test: self.test.clone(),
        };
        std::fs::write(dir.join("generator.json"), serde_json::to_vec_pretty(&record)?)?;
        dataset::load_iharmony4(root)
    }
}
