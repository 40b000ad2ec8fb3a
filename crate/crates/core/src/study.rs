//! Experiment drivers: the three compared loss configurations, reusable
//! training runs, the mask-deformation robustness sweep and per-slice figure panels.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::artifacts;
use crate::config::{LossWeights, RunConfig};
use crate::error::{Error, IoContext, Result};
use crate::eval::{self, MetricsReport};
use crate::grid::{self, CT_MAX, CT_MIN, CT_WIDTH};
use crate::mask::{deform_mask, extract_coarse_mask, sample_displacement, CoarseMask, DEFAULT_SMOOTHING};
use crate::phantom::SliceDataset;
use crate::rng::derive_seed;
use crate::train::{self, RunOptions, TrainingData};

/// The compared loss configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Adversarial and cycle terms only.
    CycleGan,
    /// Adds the coarse-mask term.
    WithoutShape,
    /// Adds the mask and cycle shape-consistency terms.
    MaskGan,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::CycleGan, Method::WithoutShape, Method::MaskGan];

    pub fn weights(self) -> LossWeights {
        match self {
            Method::CycleGan => LossWeights::cyclegan(),
            Method::WithoutShape => LossWeights::without_shape(),
            Method::MaskGan => LossWeights::default(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::CycleGan => "cyclegan",
            Method::WithoutShape => "maskgan_wo_shape",
            Method::MaskGan => "maskgan",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }

    pub fn config(self, base: &RunConfig, seed: u64) -> RunConfig {
        RunConfig {
            loss_weights: self.weights(),
            seed,
            ..base.clone()
        }
    }
}

/// True when `dir` holds a finished run of exactly `cfg`.
pub fn is_complete_run(cfg: &RunConfig, dir: &Path) -> Result<bool> {
    if !dir.join("losses.csv").exists() {
        return Ok(false);
    }
    let Some(ckpt) = train::latest_checkpoint(dir)? else {
        return Ok(false);
    };
    let info = train::read_checkpoint_info(&ckpt)?;
    Ok(info.config_hash == cfg.hash() && info.epoch == cfg.epochs)
}

/// Trains `cfg` into `dir` unless a finished identical run is already there,
/// resuming an interrupted one, then evaluates the final checkpoint.
pub fn run_or_reuse(
    cfg: &RunConfig,
    data: &TrainingData,
    test: &SliceDataset,
    dir: &Path,
    progress: bool,
) -> Result<MetricsReport> {
    if !is_complete_run(cfg, dir)? {
        if dir.exists() && !dir.join("config.txt").exists() {
            fs::remove_dir_all(dir).at(dir)?;
        }
        if dir.join("config.txt").exists() && RunConfig::load(&dir.join("config.txt"))?.hash() != cfg.hash() {
            fs::remove_dir_all(dir).at(dir)?;
        }
        let opts = RunOptions {
            resume: true,
            progress,
            ..Default::default()
        };
        train::train_run(cfg, data, dir, &opts)?;
    }
    eval::evaluate_checkpoint(dir, test)
}

/// Replaces every coarse mask with an elastically deformed copy; `sigma = 0`
/// leaves the data unchanged.
pub fn deformed_data(data: &TrainingData, sigma: f64, seed: u64) -> Result<TrainingData> {
    let warp = |masks: &[CoarseMask], stream: &str| -> Result<Vec<CoarseMask>> {
        masks
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let field = sample_displacement(m.shape(), sigma, DEFAULT_SMOOTHING, derive_seed(seed, stream, i as u64))?;
                deform_mask(m, &field)
            })
            .collect()
    };
    Ok(TrainingData {
        mr: data.mr.clone(),
        ct: data.ct.clone(),
        mr_masks: warp(&data.mr_masks, "deform-mr")?,
        ct_masks: warp(&data.ct_masks, "deform-ct")?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeformRow {
    pub sigma: f64,
    pub seed: u64,
    pub method: &'static str,
    /// Mean MR to CT test MAE in HU.
    pub mae: f64,
}

pub const DEFORM_CSV_HEADER: &str = "sigma,seed,method,mae";

pub fn deform_csv(rows: &[DeformRow]) -> String {
    let mut s = format!("{DEFORM_CSV_HEADER}\n");
    for r in rows {
        writeln!(s, "{},{},{},{:.6}", r.sigma, r.seed, r.method, r.mae).expect("string write");
    }
    s
}

/// Evaluates `run(sigma, seed)` over the full grid of settings.
pub fn sweep<F>(sigmas: &[f64], seeds: &[u64], method: Method, mut run: F) -> Result<Vec<DeformRow>>
where
    F: FnMut(f64, u64) -> Result<f64>,
{
    if let Some(&s) = sigmas.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::InvalidSigma(s));
    }
    let mut rows = Vec::new();
    for &sigma in sigmas {
        for &seed in seeds {
            rows.push(DeformRow {
                sigma,
                seed,
                method: method.name(),
                mae: run(sigma, seed)?,
            });
        }
    }
    Ok(rows)
}

/// Directory of one training run inside a study.
pub fn run_dir(root: &Path, method: Method, sigma: f64, seed: u64) -> PathBuf {
    root.join(method.name()).join(format!("sigma_{sigma}")).join(format!("seed_{seed}"))
}

/// Trains each shape-aware method on deformed masks for every
/// `(sigma, seed)` and writes `deform_study.csv` under `root`.
pub fn deform_study(
    base: &RunConfig,
    data: &TrainingData,
    test: &SliceDataset,
    sigmas: &[f64],
    seeds: &[u64],
    methods: &[Method],
    root: &Path,
    progress: bool,
) -> Result<Vec<DeformRow>> {
    let mut rows = Vec::new();
    for &method in methods {
        rows.extend(sweep(sigmas, seeds, method, |sigma, seed| {
            let cfg = method.config(base, seed);
            let deformed = deformed_data(data, sigma, seed)?;
            let dir = run_dir(root, method, sigma, seed);
            if progress {
                eprintln!("deform-study {} sigma {sigma} seed {seed}", method.name());
            }
            Ok(run_or_reuse(&cfg, &deformed, test, &dir, progress)?.to_ct.mae.mean)
        })?);
    }
    artifacts::write_atomic(&root.join("deform_study.csv"), deform_csv(&rows).as_bytes())?;
    Ok(rows)
}

/// Names of the panels written per slice.
pub const FIGURE_PANELS: [&str; 5] = ["input", "synthetic", "error_map", "coarse_mask", "attention_bg"];

/// For every test slice writes the MR input, synthetic CT, error map,
/// extracted coarse mask and learned background attention under
/// `out/slice_NNNN/`. The error map is a 16-bit gray PNG spanning 0..3000 HU.
pub fn emit_figure_bundle(checkpoint: &Path, test: &SliceDataset, out: &Path) -> Result<Vec<PathBuf>> {
    let dir = train::resolve_checkpoint(checkpoint)?;
    let (g_ct, _, _) = train::load_generators(&dir)?;
    if !test.paired || test.mr.len() != test.ct.len() {
        return Err(Error::UnpairedDataset);
    }
    let to_ct = eval::translate(&g_ct, &test.mr)?;
    let tmp = artifacts::partial_path(out);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).at(&tmp)?;
    }
    let mut slices = Vec::new();
    for (i, gt) in test.ct.iter().enumerate() {
        let name = format!("slice_{i:04}");
        let d = tmp.join(&name);
        let input = &to_ct.inputs[i];
        let pred = to_ct.outputs[i].to_intensity_domain();
        let truth = grid::normalize(gt)?.to_intensity_domain();
        let err = eval::error_map(&truth, &pred)?;
        artifacts::save_png8(&d.join("input.png"), &input.pixels, (-1.0, 1.0))?;
        artifacts::save_png8(&d.join("synthetic.png"), &pred.pixels, (CT_MIN, CT_MAX))?;
        artifacts::save_png16(&d.join("error_map.png"), &err.pixels, (0.0, CT_WIDTH))?;
        let mask = match extract_coarse_mask(input) {
            Ok(m) => m.pixels,
            Err(Error::EmptyForeground) => ndarray::Array2::from_elem(input.shape(), false),
            Err(e) => return Err(e),
        };
        artifacts::save_mask_png(&d.join("coarse_mask.png"), &mask)?;
        artifacts::save_png8(&d.join("attention_bg.png"), &to_ct.backgrounds[i], (0.0, 1.0))?;
        slices.push(out.join(name));
    }
    fs::create_dir_all(&tmp).at(&tmp)?;
    artifacts::finish_dir(out)?;
    Ok(slices)
}
