//! Alternating generator/discriminator optimization over unpaired batches,
//! with the epoch learning-rate schedule, checkpoints and resume.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;

use crate::artifacts::{self, LossTrace};
use crate::config::{LossWeights, RunConfig, ShapeGradient};
use crate::error::{Error, IoContext, Result};
use crate::generator::{Discriminator, Generator};
use crate::grid::ImageGrid;
use crate::losses::{self, LossBundle, LossTerms};
use crate::mask::{extract_coarse_mask, CoarseMask};
use crate::nn::{self, scalar, ParamSet};
use crate::phantom::{Meta, SliceDataset};
use crate::rng::stream_rng;

/// Adam with bias correction and no weight decay. Moments are plain
/// tensors so they can be checkpointed.
pub struct Adam {
    vars: Vec<Var>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

impl Adam {
    pub fn new(vars: Vec<Var>, beta1: f64, beta2: f64) -> Result<Self> {
        let first = vars
            .iter()
            .map(|v| v.as_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let second = first.clone();
        Ok(Self {
            vars,
            first,
            second,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
        })
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update; variables without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 / (1.0 - self.beta1.powi(t));
        let c2 = 1.0 / (1.0 - self.beta2.powi(t));
        for (i, var) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m = (self.first[i].affine(self.beta1, 0.0)? + g.affine(1.0 - self.beta1, 0.0)?)?;
            let v = (self.second[i].affine(self.beta2, 0.0)? + g.sqr()?.affine(1.0 - self.beta2, 0.0)?)?;
            let update = m.affine(c1, 0.0)?.div(&(v.affine(c2, 0.0)?.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor() - update.affine(lr, 0.0)?)?)?;
            self.first[i] = m;
            self.second[i] = v;
        }
        Ok(())
    }

    fn state(&self) -> HashMap<String, Tensor> {
        let mut s = HashMap::new();
        for (i, (m, v)) in self.first.iter().zip(&self.second).enumerate() {
            s.insert(format!("m.{i}"), m.clone());
            s.insert(format!("v.{i}"), v.clone());
        }
        s
    }

    fn load_state(&mut self, stored: &HashMap<String, Tensor>, step: u64) -> Result<()> {
        for i in 0..self.vars.len() {
            let get = |k: String| {
                stored
                    .get(&k)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("optimizer state lacks {k}")))
            };
            self.first[i] = get(format!("m.{i}"))?;
            self.second[i] = get(format!("v.{i}"))?;
        }
        self.step = step;
        Ok(())
    }
}

/// Pool of earlier synthetic images fed to the discriminator.
pub struct HistoryPool {
    capacity: usize,
    images: Vec<Tensor>,
}

impl HistoryPool {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            images: Vec::new(),
        }
    }

    /// Returns a batch mixing `batch` and pooled images; each slot swaps in an
    /// older image with probability 1/2 once the pool is full.
    fn query(&mut self, batch: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
        if self.capacity == 0 {
            return Ok(batch.clone());
        }
        let mut out = Vec::with_capacity(batch.dim(0)?);
        for i in 0..batch.dim(0)? {
            let img = batch.narrow(0, i, 1)?;
            if self.images.len() < self.capacity {
                self.images.push(img.clone());
                out.push(img);
            } else if rng.gen_bool(0.5) {
                let k = rng.gen_range(0..self.capacity);
                out.push(std::mem::replace(&mut self.images[k], img));
            } else {
                out.push(img);
            }
        }
        Ok(Tensor::cat(&out, 0)?)
    }

    fn state(&self, prefix: &str, s: &mut HashMap<String, Tensor>) {
        for (i, t) in self.images.iter().enumerate() {
            s.insert(format!("{prefix}.{i}"), t.clone());
        }
    }

    fn load_state(&mut self, prefix: &str, stored: &HashMap<String, Tensor>) {
        self.images = (0..)
            .map_while(|i| stored.get(&format!("{prefix}.{i}")).cloned())
            .collect();
    }
}

/// Images with their coarse background targets, both `(B, 1, H, W)`.
pub struct Batch {
    pub images: Tensor,
    pub backgrounds: Tensor,
}

/// Normalized training slices with one coarse mask each, stacked per domain.
pub struct TrainingData {
    pub mr: Vec<ImageGrid>,
    pub ct: Vec<ImageGrid>,
    pub mr_masks: Vec<CoarseMask>,
    pub ct_masks: Vec<CoarseMask>,
}

impl TrainingData {
    /// Normalizes every slice and extracts its coarse mask. Slices with no
    /// foreground are dropped.
    pub fn from_dataset(ds: &SliceDataset) -> Result<Self> {
        let prep = |slices: &[ImageGrid]| -> Result<(Vec<ImageGrid>, Vec<CoarseMask>)> {
            let mut imgs = Vec::new();
            let mut masks = Vec::new();
            for s in slices {
                let n = crate::grid::normalize(s)?;
                match extract_coarse_mask(&n) {
                    Ok(m) => {
                        imgs.push(n);
                        masks.push(m);
                    }
                    Err(Error::EmptyForeground) => continue,
                    Err(e) => return Err(e),
                }
            }
            Ok((imgs, masks))
        };
        let (mr, mr_masks) = prep(&ds.mr)?;
        let (ct, ct_masks) = prep(&ds.ct)?;
        if mr.is_empty() || ct.is_empty() {
            return Err(Error::Config("training needs at least one MR and one CT slice".into()));
        }
        Ok(Self {
            mr,
            ct,
            mr_masks,
            ct_masks,
        })
    }

    pub fn len(&self) -> usize {
        self.mr.len().max(self.ct.len())
    }

    /// `(mr, ct)` stacks for batch assembly.
    pub fn stacked(&self, dtype: DType) -> Result<(Stacked, Stacked)> {
        Ok((
            Stacked::new(&self.mr, &self.mr_masks, dtype)?,
            Stacked::new(&self.ct, &self.ct_masks, dtype)?,
        ))
    }

    pub fn is_empty(&self) -> bool {
        self.mr.is_empty() || self.ct.is_empty()
    }
}

/// All slices of one domain stacked as `(N, 1, H, W)` tensors.
pub struct Stacked {
    pub images: Tensor,
    pub backgrounds: Tensor,
}

impl Stacked {
    pub fn new(imgs: &[ImageGrid], masks: &[CoarseMask], dtype: DType) -> Result<Self> {
        let refs: Vec<&ImageGrid> = imgs.iter().collect();
        let bgs: Vec<_> = masks.iter().map(CoarseMask::background).collect();
        let bg_refs: Vec<_> = bgs.iter().collect();
        Ok(Self {
            images: nn::grids_to_tensor(&refs, dtype, &Device::Cpu)?,
            backgrounds: nn::arrays_to_tensor(&bg_refs, dtype, &Device::Cpu)?,
        })
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        let ids: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
        let ids = Tensor::new(ids.as_slice(), &Device::Cpu)?;
        Ok(Batch {
            images: self.images.index_select(&ids, 0)?,
            backgrounds: self.backgrounds.index_select(&ids, 0)?,
        })
    }
}

/// Networks, optimizers and counters. `g_ct` maps MR to CT, `g_mr` maps CT to MR.
pub struct TrainState {
    pub cfg: RunConfig,
    pub g_ct: Generator,
    pub g_mr: Generator,
    pub d_ct: Discriminator,
    pub d_mr: Discriminator,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub pool_ct: HistoryPool,
    pub pool_mr: HistoryPool,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimization steps.
    pub step: u64,
}

impl TrainState {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        Self::with_dtype(cfg, DType::F32)
    }

    pub fn with_dtype(cfg: &RunConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let g_ct = Generator::new(&cfg.net, cfg.n_masks, cfg.seed, "g_ct", dtype)?;
        let g_mr = Generator::new(&cfg.net, cfg.n_masks, cfg.seed, "g_mr", dtype)?;
        let d_ct = Discriminator::new(&cfg.net, cfg.seed, "d_ct", dtype)?;
        let d_mr = Discriminator::new(&cfg.net, cfg.seed, "d_mr", dtype)?;
        let gen_vars = [g_ct.params().vars(), g_mr.params().vars()].concat();
        let disc_vars = [d_ct.params().vars(), d_mr.params().vars()].concat();
        Ok(Self {
            opt_g: Adam::new(gen_vars, cfg.beta1, cfg.beta2)?,
            opt_d: Adam::new(disc_vars, cfg.beta1, cfg.beta2)?,
            pool_ct: HistoryPool::new(cfg.history_size),
            pool_mr: HistoryPool::new(cfg.history_size),
            cfg: cfg.clone(),
            g_ct,
            g_mr,
            d_ct,
            d_mr,
            epoch: 0,
            step: 0,
        })
    }

    pub fn networks(&self) -> [(&'static str, &ParamSet); 4] {
        [
            ("g_ct", self.g_ct.params()),
            ("g_mr", self.g_mr.params()),
            ("d_ct", self.d_ct.params()),
            ("d_mr", self.d_mr.params()),
        ]
    }

    pub fn dtype(&self) -> DType {
        self.g_ct.dtype()
    }
}

/// Synthetic images from a generator update, detached from the graph.
pub struct Fakes {
    pub ct: Tensor,
    pub mr: Tensor,
}

/// Raw (unweighted) generator-side terms of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorTerms {
    pub adv_g: f64,
    pub cycle: f64,
    pub mask: f64,
    pub shape: f64,
}

/// Forward passes of both generators, the weighted objective, and one Adam
/// step on the generator parameters only.
pub fn generator_update(
    state: &mut TrainState,
    mr: &Batch,
    ct: &Batch,
    weights: &LossWeights,
    lr: f64,
) -> Result<(GeneratorTerms, Fakes)> {
    let mode = state.cfg.adversarial_mode;
    let (x, y) = (&mr.images, &ct.images);

    let to_ct = state.g_ct.forward(x)?;
    let back_to_mr = state.g_mr.forward(&to_ct.output)?;
    let to_mr = state.g_mr.forward(y)?;
    let back_to_ct = state.g_ct.forward(&to_mr.output)?;

    let adv_g = (losses::generator_adversarial(&state.d_ct.forward(&to_ct.output)?, mode)?
        + losses::generator_adversarial(&state.d_mr.forward(&to_mr.output)?, mode)?)?;
    let cycle = losses::cycle_loss(x, &back_to_mr.output, y, &back_to_ct.output)?;
    let a_mr = to_ct.background()?;
    let a_ct = to_mr.background()?;
    let mask = losses::mask_loss(&a_mr, &mr.backgrounds, &a_ct, &ct.backgrounds)?;
    let (tilde_ct, tilde_mr) = match state.cfg.shape_gradient {
        ShapeGradient::Full => (back_to_mr.background()?, back_to_ct.background()?),
        ShapeGradient::Detached => (
            state.g_mr.forward(&to_ct.output.detach())?.background()?,
            state.g_ct.forward(&to_mr.output.detach())?.background()?,
        ),
    };
    let shape = losses::csc_loss(&a_mr, &tilde_ct, &a_ct, &tilde_mr)?;
    let terms = LossTerms {
        adv_g,
        cycle,
        mask,
        shape,
    };
    let total = losses::total_loss(&terms, weights)?;
    let grads = total.backward()?;
    state.opt_g.step(&grads, lr)?;
    Ok((
        GeneratorTerms {
            adv_g: scalar(&terms.adv_g)?,
            cycle: scalar(&terms.cycle)?,
            mask: scalar(&terms.mask)?,
            shape: scalar(&terms.shape)?,
        },
        Fakes {
            ct: to_ct.output.detach(),
            mr: to_mr.output.detach(),
        },
    ))
}

/// One Adam step on the discriminator parameters only, on real images and
/// the given (optionally pooled) synthetic images. Returns the halved sum of
/// both discriminator objectives.
pub fn discriminator_update(state: &mut TrainState, mr: &Batch, ct: &Batch, fakes: &Fakes, lr: f64) -> Result<f64> {
    let mode = state.cfg.adversarial_mode;
    let mut rng = stream_rng(state.cfg.seed, "history-pool", state.step);
    let fake_ct = state.pool_ct.query(&fakes.ct, &mut rng)?;
    let fake_mr = state.pool_mr.query(&fakes.mr, &mut rng)?;
    let d_ct = losses::discriminator_adversarial(
        &state.d_ct.forward(&ct.images)?,
        &state.d_ct.forward(&fake_ct)?,
        mode,
    )?;
    let d_mr = losses::discriminator_adversarial(
        &state.d_mr.forward(&mr.images)?,
        &state.d_mr.forward(&fake_mr)?,
        mode,
    )?;
    let adv_d = ((d_ct + d_mr)? * 0.5)?;
    let grads = adv_d.backward()?;
    state.opt_d.step(&grads, lr)?;
    scalar(&adv_d)
}

/// One generator update on the weighted objective followed by one
/// discriminator update on the adversarial terms.
pub fn train_step(
    state: &mut TrainState,
    mr: &Batch,
    ct: &Batch,
    weights: &LossWeights,
    lr: f64,
) -> Result<LossBundle> {
    let (g, fakes) = generator_update(state, mr, ct, weights, lr)?;
    let adv_d = discriminator_update(state, mr, ct, &fakes, lr)?;
    state.step += 1;
    LossBundle::from_raw(g.adv_g, adv_d, g.cycle, g.mask, g.shape, weights)
}

/// Knobs that are not part of the run identity.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from the newest checkpoint under the run directory.
    pub resume: bool,
    /// Stop after this epoch as if interrupted (the trace stays `.partial`).
    pub stop_after_epoch: Option<usize>,
    /// Print one progress line per epoch to stderr.
    pub progress: bool,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub checkpoint: PathBuf,
    pub trace: PathBuf,
    pub completed: bool,
    pub epoch: usize,
    pub step: u64,
}

pub const MANIFEST: &str = "manifest.txt";

fn checkpoint_root(run_dir: &Path) -> PathBuf {
    run_dir.join("checkpoints")
}

/// Writes the four networks, optimizer state and manifest under
/// `<run>/checkpoints/epoch_NNNN`, renaming into place when complete.
pub fn save_checkpoint(state: &TrainState, run_dir: &Path) -> Result<PathBuf> {
    let dir = checkpoint_root(run_dir).join(format!("epoch_{:04}", state.epoch));
    let tmp = artifacts::partial_path(&dir);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).at(&tmp)?;
    }
    fs::create_dir_all(&tmp).at(&tmp)?;
    for (name, params) in state.networks() {
        params.save(&tmp.join(format!("{name}.safetensors")))?;
    }
    nn::save_tensors(&tmp.join("optim_g.safetensors"), &state.opt_g.state())?;
    nn::save_tensors(&tmp.join("optim_d.safetensors"), &state.opt_d.state())?;
    let mut pools = HashMap::new();
    state.pool_ct.state("ct", &mut pools);
    state.pool_mr.state("mr", &mut pools);
    if !pools.is_empty() {
        nn::save_tensors(&tmp.join("pools.safetensors"), &pools)?;
    }
    fs::write(tmp.join("config.txt"), state.cfg.to_text()).at(&tmp)?;
    let manifest = format!(
        "epoch = {}\nstep = {}\nconfig_hash = {}\nnetworks = g_ct,g_mr,d_ct,d_mr\n",
        state.epoch,
        state.step,
        state.cfg.hash()
    );
    fs::write(tmp.join(MANIFEST), manifest).at(&tmp)?;
    artifacts::finish_dir(&dir)?;
    Ok(dir)
}

/// Newest complete checkpoint directory of a run, if any.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>> {
    let root = checkpoint_root(run_dir);
    if !root.exists() {
        return Ok(None);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(&root)
        .at(&root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir()
                && p.join(MANIFEST).exists()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("epoch_") && !n.ends_with(artifacts::PARTIAL_SUFFIX))
        })
        .collect();
    dirs.sort();
    Ok(dirs.pop())
}

/// Accepts a checkpoint directory, its manifest file, or a run directory.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.is_file() && path.file_name().is_some_and(|n| n == MANIFEST) {
        return Ok(path.parent().unwrap_or(Path::new(".")).to_path_buf());
    }
    if path.join(MANIFEST).exists() {
        return Ok(path.to_path_buf());
    }
    latest_checkpoint(path)?.ok_or_else(|| Error::MissingCheckpoint(path.to_path_buf()))
}

pub struct CheckpointInfo {
    pub epoch: usize,
    pub step: u64,
    pub config_hash: String,
    pub config: RunConfig,
}

pub fn read_checkpoint_info(dir: &Path) -> Result<CheckpointInfo> {
    let manifest = dir.join(MANIFEST);
    if !manifest.exists() {
        return Err(Error::MissingCheckpoint(dir.to_path_buf()));
    }
    let meta = Meta::read(&manifest)?;
    let field = |k: &str| {
        meta.get(k)
            .map(str::to_string)
            .ok_or_else(|| Error::Config(format!("manifest lacks {k}")))
    };
    let parse_err = |k: &str| Error::Config(format!("manifest field {k} malformed"));
    Ok(CheckpointInfo {
        epoch: field("epoch")?.parse().map_err(|_| parse_err("epoch"))?,
        step: field("step")?.parse().map_err(|_| parse_err("step"))?,
        config_hash: field("config_hash")?,
        config: RunConfig::load(&dir.join("config.txt"))?,
    })
}

/// Restores every tensor of `state` from a checkpoint; the config hash must match.
pub fn load_checkpoint(state: &mut TrainState, dir: &Path) -> Result<()> {
    let info = read_checkpoint_info(dir)?;
    let expected = state.cfg.hash();
    if info.config_hash != expected {
        return Err(Error::ResumeMismatch {
            expected,
            found: info.config_hash,
        });
    }
    for (name, params) in state.networks() {
        params.load(&dir.join(format!("{name}.safetensors")))?;
    }
    let load = |f: &str| candle_core::safetensors::load(dir.join(f), &Device::Cpu);
    let dtype = state.dtype();
    let cast = |m: HashMap<String, Tensor>| -> Result<HashMap<String, Tensor>> {
        m.into_iter()
            .map(|(k, v)| Ok((k, v.to_dtype(dtype)?)))
            .collect()
    };
    state.opt_g.load_state(&cast(load("optim_g.safetensors")?)?, info.step)?;
    state.opt_d.load_state(&cast(load("optim_d.safetensors")?)?, info.step)?;
    let pools = dir.join("pools.safetensors");
    if pools.exists() {
        let stored = cast(load("pools.safetensors")?)?;
        state.pool_ct.load_state("ct", &stored);
        state.pool_mr.load_state("mr", &stored);
    }
    state.epoch = info.epoch;
    state.step = info.step;
    Ok(())
}

/// Loads the two generators of a checkpoint for inference.
pub fn load_generators(dir: &Path) -> Result<(Generator, Generator, RunConfig)> {
    let info = read_checkpoint_info(dir)?;
    let cfg = info.config;
    let g_ct = Generator::new(&cfg.net, cfg.n_masks, cfg.seed, "g_ct", DType::F32)?;
    let g_mr = Generator::new(&cfg.net, cfg.n_masks, cfg.seed, "g_mr", DType::F32)?;
    g_ct.params().load(&dir.join("g_ct.safetensors"))?;
    g_mr.params().load(&dir.join("g_mr.safetensors"))?;
    Ok((g_ct, g_mr, cfg))
}

/// Batch index lists for one epoch: independent MR and CT permutations,
/// the shorter stream wrapping around.
pub fn epoch_batches(n_mr: usize, n_ct: usize, batch: usize, seed: u64, epoch: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    let perm = |n: usize, stream: &str| {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut stream_rng(seed, stream, epoch as u64));
        idx
    };
    let (mr, ct) = (perm(n_mr, "order-mr"), perm(n_ct, "order-ct"));
    let n = n_mr.max(n_ct);
    (0..n)
        .step_by(batch)
        .map(|start| {
            let end = (start + batch).min(n);
            (
                (start..end).map(|k| mr[k % n_mr]).collect(),
                (start..end).map(|k| ct[k % n_ct]).collect(),
            )
        })
        .collect()
}

/// Trains for `cfg.epochs` epochs (or resumes), appending the loss trace and
/// checkpointing every `cfg.checkpoint_every` epochs and at the end.
pub fn train_run(cfg: &RunConfig, data: &TrainingData, out_dir: &Path, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("empty training data".into()));
    }
    fs::create_dir_all(out_dir).at(out_dir)?;
    let mut state = TrainState::new(cfg)?;
    let mut last_ckpt = None;
    if opts.resume {
        if let Some(dir) = latest_checkpoint(out_dir)? {
            load_checkpoint(&mut state, &dir)?;
            last_ckpt = Some(dir);
        }
    }
    cfg.save(&out_dir.join("config.txt"))?;
    let mut trace = LossTrace::open(out_dir, state.step)?;
    let dtype = state.dtype();
    let (mr, ct) = data.stacked(dtype)?;
    let weights = cfg.loss_weights;

    while state.epoch < cfg.epochs {
        let epoch = state.epoch + 1;
        let lr = cfg.lr_at_epoch(epoch)?;
        let mut sums = LossBundle::default();
        let batches = epoch_batches(data.mr.len(), data.ct.len(), cfg.batch_size, cfg.seed, epoch);
        for (mr_idx, ct_idx) in &batches {
            let b = train_step(&mut state, &mr.batch(mr_idx)?, &ct.batch(ct_idx)?, &weights, lr)?;
            trace.append(state.step, epoch, &b)?;
            sums.total += b.total;
            sums.mask += b.mask;
            sums.cycle += b.cycle;
        }
        state.epoch = epoch;
        if opts.progress {
            let k = batches.len() as f64;
            eprintln!(
                "epoch {epoch}/{} lr {lr:.3e} total {:.4} cycle {:.4} mask {:.4}",
                cfg.epochs,
                sums.total / k,
                sums.cycle / k,
                sums.mask / k
            );
        }
        if epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs {
            last_ckpt = Some(save_checkpoint(&state, out_dir)?);
        }
        if opts.stop_after_epoch == Some(epoch) && epoch < cfg.epochs {
            return Ok(RunSummary {
                checkpoint: last_ckpt.ok_or_else(|| Error::MissingCheckpoint(out_dir.to_path_buf()))?,
                trace: artifacts::partial_path(&out_dir.join("losses.csv")),
                completed: false,
                epoch,
                step: state.step,
            });
        }
    }
    let checkpoint = match last_ckpt {
        Some(c) => c,
        None => save_checkpoint(&state, out_dir)?,
    };
    Ok(RunSummary {
        checkpoint,
        trace: trace.finish()?,
        completed: true,
        epoch: state.epoch,
        step: state.step,
    })
}
