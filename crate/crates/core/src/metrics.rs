//! MSE, PSNR and foreground MSE on the 0–255 scale, plus grouped reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{bucket_of, Bucket, SampleMeta, Subset};
use crate::error::{param_err, Error, Result};
use crate::imaging::{Mask, RgbImage};

/// PSNR reported for (near-)identical images.
pub const PSNR_CAP: f64 = 100.0;

/// Pixel values fed to the metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelMode {
    /// Unrounded `(v + 1)·127.5`.
    #[default]
    Float,
    /// Rounded to the nearest integer after clamping, as an 8-bit file would store.
    Rounded,
}

impl PixelMode {
    pub fn label(self) -> &'static str {
        match self {
            PixelMode::Float => "float",
            PixelMode::Rounded => "rounded",
        }
    }

    fn map(self, v: f32) -> f64 {
        let x = (v as f64 + 1.0) * 127.5;
        match self {
            PixelMode::Float => x,
            PixelMode::Rounded => x.clamp(0.0, 255.0).round(),
        }
    }
}

fn check_shapes(pred: &RgbImage, gt: &RgbImage) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(param_err!(
            "metric inputs differ in size: {:?} vs {:?}",
            pred.dims(),
            gt.dims()
        ));
    }
    Ok(())
}

pub fn mse_with(pred: &RgbImage, gt: &RgbImage, mode: PixelMode) -> Result<f64> {
    check_shapes(pred, gt)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&a, &b)| {
            let d = mode.map(a) - mode.map(b);
            d * d
        })
        .sum();
    Ok(sum / pred.data().len() as f64)
}

pub fn mse(pred: &RgbImage, gt: &RgbImage) -> Result<f64> {
    mse_with(pred, gt, PixelMode::Float)
}

/// `10·log10(255² / mse)`, capped at [`PSNR_CAP`] when `mse < 255²·1e-10`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    let peak = 255.0f64 * 255.0;
    if mse < peak * 1e-10 {
        PSNR_CAP
    } else {
        10.0 * (peak / mse).log10()
    }
}

pub fn psnr_with(pred: &RgbImage, gt: &RgbImage, mode: PixelMode) -> Result<f64> {
    Ok(psnr_from_mse(mse_with(pred, gt, mode)?))
}

pub fn psnr(pred: &RgbImage, gt: &RgbImage) -> Result<f64> {
    psnr_with(pred, gt, PixelMode::Float)
}

/// Squared error summed over foreground pixels and channels, divided by
/// `3·|foreground|`.
pub fn fmse_with(pred: &RgbImage, gt: &RgbImage, mask: &Mask, mode: PixelMode) -> Result<f64> {
    check_shapes(pred, gt)?;
    if mask.dims() != pred.dims() {
        return Err(param_err!(
            "mask {:?} does not match image {:?}",
            mask.dims(),
            pred.dims()
        ));
    }
    let on = mask.count_on();
    if on == 0 {
        return Err(Error::Validation("fMSE is undefined for an empty mask".into()));
    }
    let plane = mask.len();
    let (p, g) = (pred.data(), gt.data());
    let mut sum = 0f64;
    // Channel-major like `mse_with`, so a full mask reproduces it exactly.
    for c in 0..3 {
        for (i, &m) in mask.data().iter().enumerate() {
            if m == 1 {
                let d = mode.map(p[c * plane + i]) - mode.map(g[c * plane + i]);
                sum += d * d;
            }
        }
    }
    Ok(sum / (3 * on) as f64)
}

pub fn fmse(pred: &RgbImage, gt: &RgbImage, mask: &Mask) -> Result<f64> {
    fmse_with(pred, gt, mask, PixelMode::Float)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub psnr: f64,
    pub mse: f64,
    pub fmse: f64,
    pub foreground_ratio: f64,
    pub seed: u64,
}

impl EvalRecord {
    /// Scores `pred` against `gt`. All three inputs are first brought to
    /// `eval_resolution` (bicubic for images, nearest for the mask); the
    /// recorded foreground ratio is that of the resized mask.
    pub fn score(
        sample_id: impl Into<String>,
        pred: &RgbImage,
        gt: &RgbImage,
        mask: &Mask,
        eval_resolution: usize,
        mode: PixelMode,
        seed: u64,
    ) -> Result<Self> {
        let p = pred.resize_square(eval_resolution);
        let g = gt.resize_square(eval_resolution);
        let m = mask.resize_nearest(eval_resolution, eval_resolution);
        let mse = mse_with(&p, &g, mode)?;
        Ok(Self {
            sample_id: sample_id.into(),
            psnr: psnr_from_mse(mse),
            mse,
            fmse: fmse_with(&p, &g, &m, mode)?,
            foreground_ratio: crate::dataset::foreground_ratio(&m)?,
            seed,
        })
    }
}

pub fn write_records(records: &[EvalRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<EvalRecord>> {
    let mut r = csv::ReaderBuilder::new().delimiter(b'\t').from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Mean and, across two or more seeds, the sample standard deviation of
/// per-seed means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: Option<f64>,
}

impl Stat {
    fn from_seed_means(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std =
            (values.len() > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Self { mean, std }
    }

    /// `37.66` or `37.66 ± 0.02`.
    pub fn format(&self, decimals: usize) -> String {
        match self.std {
            Some(s) => format!("{:.*} ± {:.*}", decimals, self.mean, decimals, s),
            None => format!("{:.*}", decimals, self.mean),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    /// Distinct samples in the group.
    pub count: usize,
    pub psnr: Stat,
    pub mse: Stat,
    pub fmse: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seeds: Vec<u64>,
    pub pixel_mode: PixelMode,
    /// Free-form labels carried into the rendered tables (e.g. blend mode).
    pub notes: Vec<String>,
    pub overall: GroupStats,
    pub per_subset: BTreeMap<Subset, GroupStats>,
    pub per_bucket: BTreeMap<Bucket, GroupStats>,
}

#[derive(Default, Clone, Copy)]
struct Acc {
    n: usize,
    psnr: f64,
    mse: f64,
    fmse: f64,
}

impl Acc {
    fn add(&mut self, r: &EvalRecord) {
        self.n += 1;
        self.psnr += r.psnr;
        self.mse += r.mse;
        self.fmse += r.fmse;
    }

    fn means(&self) -> [f64; 3] {
        let n = self.n as f64;
        [self.psnr / n, self.mse / n, self.fmse / n]
    }
}

fn group_stats(per_seed: &[Acc]) -> Option<GroupStats> {
    let used: Vec<&Acc> = per_seed.iter().filter(|a| a.n > 0).collect();
    if used.is_empty() {
        return None;
    }
    let col = |k: usize| Stat::from_seed_means(&used.iter().map(|a| a.means()[k]).collect::<Vec<_>>());
    Some(GroupStats {
        count: used.iter().map(|a| a.n).max().unwrap_or(0),
        psnr: col(0),
        mse: col(1),
        fmse: col(2),
    })
}

/// Groups records by subset and by foreground-ratio bucket. Within a seed,
/// group values are unweighted per-sample means; across seeds the report
/// gives the mean and sample standard deviation of those per-seed means.
/// Buckets use the manifest ratio of each sample.
pub fn aggregate(
    records: &[EvalRecord],
    index: &BTreeMap<String, SampleMeta>,
    pixel_mode: PixelMode,
    notes: Vec<String>,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Aggregation("no records to aggregate".into()));
    }
    let seeds: Vec<u64> = {
        let mut s: Vec<u64> = records.iter().map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    let slot = |seed: u64| seeds.binary_search(&seed).unwrap();
    let mut overall = vec![Acc::default(); seeds.len()];
    let mut subsets: BTreeMap<Subset, Vec<Acc>> = BTreeMap::new();
    let mut buckets: BTreeMap<Bucket, Vec<Acc>> = BTreeMap::new();
    for r in records {
        let meta = index
            .get(&r.sample_id)
            .ok_or_else(|| Error::Aggregation(format!("record for unknown sample `{}`", r.sample_id)))?;
        let bucket = bucket_of(meta.foreground_ratio)
            .map_err(|e| Error::Aggregation(format!("sample `{}`: {e}", r.sample_id)))?;
        let s = slot(r.seed);
        overall[s].add(r);
        subsets
            .entry(meta.subset)
            .or_insert_with(|| vec![Acc::default(); seeds.len()])[s]
            .add(r);
        buckets
            .entry(bucket)
            .or_insert_with(|| vec![Acc::default(); seeds.len()])[s]
            .add(r);
    }
    Ok(EvalReport {
        overall: group_stats(&overall).expect("records are nonempty"),
        per_subset: subsets
            .into_iter()
            .filter_map(|(k, v)| group_stats(&v).map(|g| (k, g)))
            .collect(),
        per_bucket: buckets
            .into_iter()
            .filter_map(|(k, v)| group_stats(&v).map(|g| (k, g)))
            .collect(),
        seeds,
        pixel_mode,
        notes,
    })
}

impl EvalReport {
    fn rows(&self) -> Vec<(&'static str, String, &GroupStats)> {
        let mut rows = vec![("overall", "All".to_string(), &self.overall)];
        for (k, g) in &self.per_subset {
            rows.push(("subset", k.to_string(), g));
        }
        for (k, g) in &self.per_bucket {
            rows.push(("bucket", k.to_string(), g));
        }
        rows
    }

    /// Human-readable table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "pixels: {}; seeds: {}",
            self.pixel_mode.label(),
            self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
        );
        for n in &self.notes {
            let _ = writeln!(out, "{n}");
        }
        let _ = writeln!(
            out,
            "{:<8} {:<12} {:>6} {:>18} {:>20} {:>20}",
            "group", "name", "n", "PSNR", "MSE", "fMSE"
        );
        for (kind, name, g) in self.rows() {
            let _ = writeln!(
                out,
                "{:<8} {:<12} {:>6} {:>18} {:>20} {:>20}",
                kind,
                name,
                g.count,
                g.psnr.format(2),
                g.mse.format(2),
                g.fmse.format(2)
            );
        }
        out
    }

    /// Tab-separated table with one row per group.
    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(path)?;
        w.write_record([
            "group", "name", "count", "psnr", "psnr_std", "mse", "mse_std", "fmse", "fmse_std",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (kind, name, g) in self.rows() {
            w.write_record([
                kind.to_string(),
                name,
                g.count.to_string(),
                g.psnr.mean.to_string(),
                opt(g.psnr.std),
                g.mse.mean.to_string(),
                opt(g.mse.std),
                g.fmse.mean.to_string(),
                opt(g.fmse.std),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
