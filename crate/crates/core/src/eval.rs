//! Image-similarity metrics, the paired t-test and test-set evaluation of a
//! trained generator pair.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Zip};
use rand::Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::artifacts;
use crate::error::{Error, Result};
use crate::generator::{generator_forward, Generator};
use crate::grid::{self, ImageGrid, CT_WIDTH};
use crate::phantom::SliceDataset;
use crate::rng::stream_rng;

/// Reported PSNR when the two images are identical.
pub const PSNR_CAP: f64 = 100.0;
/// Number of bootstrap passes behind the reported standard deviations.
pub const EVAL_REPEATS: usize = 5;
/// Display range used for MR metrics.
pub const MR_DATA_RANGE: f64 = 255.0;

fn check_pair(gt: &ImageGrid, pred: &ImageGrid) -> Result<()> {
    if gt.shape() != pred.shape() {
        return Err(Error::ShapeMismatch(
            vec![gt.shape().0, gt.shape().1],
            vec![pred.shape().0, pred.shape().1],
        ));
    }
    if gt.value_range != pred.value_range {
        return Err(Error::RangeMismatch(gt.value_range, pred.value_range));
    }
    Ok(())
}

/// Mean absolute pixel difference, in the units of the inputs.
pub fn mae(gt: &ImageGrid, pred: &ImageGrid) -> Result<f64> {
    check_pair(gt, pred)?;
    let sum = Zip::from(&gt.pixels)
        .and(&pred.pixels)
        .fold(0.0, |acc, &a, &b| acc + (a - b).abs());
    Ok(sum / gt.pixels.len() as f64)
}

pub fn mse(gt: &ImageGrid, pred: &ImageGrid) -> Result<f64> {
    check_pair(gt, pred)?;
    let sum = Zip::from(&gt.pixels)
        .and(&pred.pixels)
        .fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b));
    Ok(sum / gt.pixels.len() as f64)
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP`].
pub fn psnr(gt: &ImageGrid, pred: &ImageGrid, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(Error::Config(format!("data range must be positive, got {data_range}")));
    }
    let m = mse(gt, pred)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (data_range * data_range / m).log10()).min(PSNR_CAP))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl SsimParams {
    pub fn with_range(data_range: f64) -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range,
        }
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Weighted sums over every fully contained window, rows then columns.
fn filter_valid(img: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let n = k.len();
    let rows = Array2::from_shape_fn((h, w - n + 1), |(i, j)| {
        k.iter().enumerate().map(|(t, c)| c * img[[i, j + t]]).sum::<f64>()
    });
    Array2::from_shape_fn((h - n + 1, w - n + 1), |(i, j)| {
        k.iter().enumerate().map(|(t, c)| c * rows[[i + t, j]]).sum::<f64>()
    })
}

/// Mean structural similarity over all valid Gaussian windows.
pub fn ssim(gt: &ImageGrid, pred: &ImageGrid, p: &SsimParams) -> Result<f64> {
    check_pair(gt, pred)?;
    let (h, w) = gt.shape();
    if p.window == 0 || p.window > h || p.window > w {
        return Err(Error::WindowTooLarge {
            window: p.window,
            h,
            w,
        });
    }
    let k = gaussian_window(p.window, p.sigma);
    let (x, y) = (&gt.pixels, &pred.pixels);
    let mx = filter_valid(x, &k);
    let my = filter_valid(y, &k);
    let sxx = filter_valid(&(x * x), &k);
    let syy = filter_valid(&(y * y), &k);
    let sxy = filter_valid(&(x * y), &k);
    let c1 = (p.k1 * p.data_range).powi(2);
    let c2 = (p.k2 * p.data_range).powi(2);
    let mut total = 0.0;
    for idx in ndarray::indices(mx.dim()) {
        let (ux, uy) = (mx[idx], my[idx]);
        let vx = sxx[idx] - ux * ux;
        let vy = syy[idx] - uy * uy;
        let cov = sxy[idx] - ux * uy;
        total += (2.0 * ux * uy + c1) * (2.0 * cov + c2)
            / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

/// Per-pixel absolute difference.
pub fn error_map(gt: &ImageGrid, pred: &ImageGrid) -> Result<ImageGrid> {
    check_pair(gt, pred)?;
    let pixels = Zip::from(&gt.pixels)
        .and(&pred.pixels)
        .map_collect(|&a, &b| (a - b).abs());
    Ok(ImageGrid {
        pixels,
        modality: gt.modality,
        value_range: (0.0, gt.value_range.1 - gt.value_range.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub n: usize,
}

/// Two-sided paired t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(vec![a.len()], vec![b.len()]));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::DegenerateSample(format!("{n} paired values")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Err(Error::DegenerateSample("differences have zero variance".into()));
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("n >= 2");
    let p = 2.0 * dist.cdf(-t.abs());
    Ok(TTest { t, p, n })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceMetrics {
    pub mae: f64,
    pub psnr: f64,
    /// Fraction in [-1, 1]; reports multiply by 100.
    pub ssim: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

/// Metrics of one translation direction.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionReport {
    pub label: &'static str,
    /// Units of the MAE column.
    pub domain: &'static str,
    pub per_slice: Vec<SliceMetrics>,
    pub mae: Aggregate,
    pub psnr: Aggregate,
    pub ssim: Aggregate,
}

impl DirectionReport {
    /// Means over all slices; the spread is the std of [`EVAL_REPEATS`]
    /// seeded bootstrap means.
    pub fn from_slices(label: &'static str, domain: &'static str, per_slice: Vec<SliceMetrics>, seed: u64) -> Self {
        let n = per_slice.len();
        let column = |f: fn(&SliceMetrics) -> f64| -> Aggregate {
            let values: Vec<f64> = per_slice.iter().map(f).collect();
            let boot: Vec<f64> = (0..EVAL_REPEATS)
                .map(|r| {
                    let mut rng = stream_rng(seed, "eval-bootstrap", r as u64);
                    let draw: Vec<f64> = (0..n).map(|_| values[rng.gen_range(0..n)]).collect();
                    mean(&draw)
                })
                .collect();
            Aggregate {
                mean: mean(&values),
                std: sample_std(&boot),
            }
        };
        Self {
            label,
            domain,
            mae: column(|m| m.mae),
            psnr: column(|m| m.psnr),
            ssim: column(|m| m.ssim),
            per_slice,
        }
    }

    pub fn maes(&self) -> Vec<f64> {
        self.per_slice.iter().map(|m| m.mae).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// MR to CT, MAE in HU.
    pub to_ct: DirectionReport,
    /// CT to MR, MAE on the 0..255 display scale.
    pub to_mr: DirectionReport,
    pub n: usize,
    pub t_test: Option<(String, TTest)>,
}

/// Synthesized images of one direction together with the references.
pub struct Translations {
    pub inputs: Vec<ImageGrid>,
    pub outputs: Vec<ImageGrid>,
    pub backgrounds: Vec<Array2<f64>>,
}

/// Runs `net` on every normalized slice.
pub fn translate(net: &Generator, slices: &[ImageGrid]) -> Result<Translations> {
    let mut t = Translations {
        inputs: Vec::new(),
        outputs: Vec::new(),
        backgrounds: Vec::new(),
    };
    for s in slices {
        let x = grid::normalize(s)?;
        let out = generator_forward(net, &x)?;
        t.backgrounds.push(out.masks.background());
        t.outputs.push(out.output);
        t.inputs.push(x);
    }
    Ok(t)
}

fn direction_metrics(gts: &[ImageGrid], preds: &[ImageGrid]) -> Result<Vec<SliceMetrics>> {
    gts.iter()
        .zip(preds)
        .map(|(gt, pred)| {
            let g = grid::normalize(gt)?.to_intensity_domain();
            let p = pred.to_intensity_domain();
            let range = if g.modality.is_ct() { CT_WIDTH } else { MR_DATA_RANGE };
            Ok(SliceMetrics {
                mae: mae(&g, &p)?,
                psnr: psnr(&g, &p, range)?,
                ssim: ssim(&g, &p, &SsimParams::with_range(range))?,
            })
        })
        .collect()
}

/// Evaluates both generators on a paired test set in intensity units.
pub fn evaluate(g_ct: &Generator, g_mr: &Generator, test: &SliceDataset, seed: u64) -> Result<MetricsReport> {
    if !test.paired || test.mr.len() != test.ct.len() || test.mr.is_empty() {
        return Err(Error::UnpairedDataset);
    }
    let to_ct = translate(g_ct, &test.mr)?;
    let to_mr = translate(g_mr, &test.ct)?;
    Ok(MetricsReport {
        to_ct: DirectionReport::from_slices("mr_to_ct", "HU", direction_metrics(&test.ct, &to_ct.outputs)?, seed),
        to_mr: DirectionReport::from_slices("ct_to_mr", "0-255", direction_metrics(&test.mr, &to_mr.outputs)?, seed),
        n: test.mr.len(),
        t_test: None,
    })
}

/// Loads a checkpoint (directory, manifest or run directory) and evaluates it.
pub fn evaluate_checkpoint(checkpoint: &Path, test: &SliceDataset) -> Result<MetricsReport> {
    let dir = crate::train::resolve_checkpoint(checkpoint)?;
    let (g_ct, g_mr, cfg) = crate::train::load_generators(&dir)?;
    evaluate(&g_ct, &g_mr, test, cfg.seed)
}

pub const SLICE_CSV_HEADER: &str = "slice,ct_mae,ct_psnr,ct_ssim,mr_mae,mr_psnr,mr_ssim";
pub const SUMMARY_CSV_HEADER: &str = "method,n,ct_mae,ct_mae_std,ct_psnr,ct_psnr_std,ct_ssim_pct,ct_ssim_pct_std,mr_mae,mr_mae_std,mr_psnr,mr_psnr_std,mr_ssim_pct,mr_ssim_pct_std,ct_domain,mr_domain,t,p,compared_to";

impl MetricsReport {
    pub fn slice_csv(&self) -> String {
        let mut s = format!("{SLICE_CSV_HEADER}\n");
        for (i, (c, m)) in self.to_ct.per_slice.iter().zip(&self.to_mr.per_slice).enumerate() {
            writeln!(
                s,
                "{i},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
                c.mae, c.psnr, c.ssim, m.mae, m.psnr, m.ssim
            )
            .expect("string write");
        }
        s
    }

    /// One summary row with MAE, PSNR and SSIM (as a percentage) for both directions.
    pub fn summary_row(&self, method: &str) -> String {
        let mut row = format!("{method},{}", self.n);
        for d in [&self.to_ct, &self.to_mr] {
            for (a, scale) in [(d.mae, 1.0), (d.psnr, 1.0), (d.ssim, 100.0)] {
                write!(row, ",{:.6},{:.6}", a.mean * scale, a.std * scale).expect("string write");
            }
        }
        write!(row, ",{},{}", self.to_ct.domain, self.to_mr.domain).expect("string write");
        match &self.t_test {
            Some((label, t)) => write!(row, ",{:.6},{:.6e},{label}", t.t, t.p),
            None => write!(row, ",,,"),
        }
        .expect("string write");
        row
    }

    pub fn summary_line(&self) -> String {
        let fmt = |d: &DirectionReport| {
            format!(
                "{}: MAE {:.2}±{:.2} {} | PSNR {:.2}±{:.2} dB | SSIM {:.2}±{:.2} %",
                d.label,
                d.mae.mean,
                d.mae.std,
                d.domain,
                d.psnr.mean,
                d.psnr.std,
                d.ssim.mean * 100.0,
                d.ssim.std * 100.0
            )
        };
        format!("{}\n{}", fmt(&self.to_ct), fmt(&self.to_mr))
    }

    /// Attaches a paired test of this report's MR to CT MAE against `other`.
    pub fn compare_with(&mut self, label: &str, other: &MetricsReport) -> Result<()> {
        let t = paired_t_test(&self.to_ct.maes(), &other.to_ct.maes())?;
        self.t_test = Some((label.to_string(), t));
        Ok(())
    }

    /// Writes the per-slice CSV at `path` and the summary next to it
    /// (`<stem>_summary.csv`).
    pub fn write(&self, path: &Path, method: &str) -> Result<(PathBuf, PathBuf)> {
        artifacts::write_atomic(path, self.slice_csv().as_bytes())?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
        let summary = path.with_file_name(format!("{stem}_summary.csv"));
        let text = format!("{SUMMARY_CSV_HEADER}\n{}\n", self.summary_row(method));
        artifacts::write_atomic(&summary, text.as_bytes())?;
        Ok((path.to_path_buf(), summary))
    }
}

/// Color error maps of the MR to CT direction, one PNG per test slice, scaled
/// so that white means 500 HU or more.
pub fn write_error_maps(g_ct: &Generator, test: &SliceDataset, dir: &Path) -> Result<Vec<PathBuf>> {
    let to_ct = translate(g_ct, &test.mr)?;
    let mut paths = Vec::new();
    for (i, (gt, pred)) in test.ct.iter().zip(&to_ct.outputs).enumerate() {
        let g = grid::normalize(gt)?.to_intensity_domain();
        let e = error_map(&g, &pred.to_intensity_domain())?;
        let p = dir.join(format!("error_{i:04}.png"));
        artifacts::save_heatmap_png(&p, &e.pixels, 500.0)?;
        paths.push(p);
    }
    Ok(paths)
}
