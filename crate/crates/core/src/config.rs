//! Run configuration, its flat `key = value` file format and the learning-rate schedule.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};

/// Coefficients of the weighted objective. All zero except `lambda_cycle`
/// gives plain CycleGAN; `lambda_shape = 0` alone gives the mask-only ablation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_mask: f64,
    pub lambda_shape: f64,
    pub lambda_cycle: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_mask: 1.0,
            lambda_shape: 1.0,
            lambda_cycle: 10.0,
        }
    }
}

impl LossWeights {
    pub fn cyclegan() -> Self {
        Self {
            lambda_mask: 0.0,
            lambda_shape: 0.0,
            ..Self::default()
        }
    }

    pub fn without_shape() -> Self {
        Self {
            lambda_shape: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_mask", self.lambda_mask),
            ("lambda_shape", self.lambda_shape),
            ("lambda_cycle", self.lambda_cycle),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdversarialMode {
    LeastSquares,
    VanillaLog,
}

impl AdversarialMode {
    fn as_str(self) -> &'static str {
        match self {
            AdversarialMode::LeastSquares => "LEAST_SQUARES",
            AdversarialMode::VanillaLog => "VANILLA_LOG",
        }
    }
}

/// Whether the shape-consistency term backpropagates through the synthetic
/// image into the generator that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeGradient {
    Full,
    Detached,
}

impl ShapeGradient {
    fn as_str(self) -> &'static str {
        match self {
            ShapeGradient::Full => "full",
            ShapeGradient::Detached => "detached",
        }
    }
}

/// Network sizes. The generator trunk (stem, downsampling, residual blocks)
/// is shared by the mask and content decoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkSpec {
    pub width: usize,
    pub n_down: usize,
    pub n_res: usize,
    pub outer_kernel: usize,
    pub disc_width: usize,
    pub disc_layers: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            width: 64,
            n_down: 2,
            n_res: 9,
            outer_kernel: 7,
            disc_width: 64,
            disc_layers: 3,
        }
    }
}

impl NetworkSpec {
    /// Reduced-width networks for 32x32 slices on a CPU.
    pub fn desk() -> Self {
        Self {
            width: 8,
            n_down: 2,
            n_res: 2,
            outer_kernel: 5,
            disc_width: 8,
            disc_layers: 2,
        }
    }

    /// Receptive field of one discriminator score, in input pixels.
    pub fn disc_receptive_field(&self) -> usize {
        // Two stride-1 4x4 layers followed (outward) by `disc_layers` stride-2 4x4 layers.
        let mut rf = 1;
        for _ in 0..2 {
            rf += 3;
        }
        for _ in 0..self.disc_layers {
            rf = (rf - 1) * 2 + 4;
        }
        rf
    }

    /// Patch-score grid size for an `h x w` input.
    pub fn disc_output_shape(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |mut n: usize| {
            for _ in 0..self.disc_layers {
                n /= 2;
            }
            n.saturating_sub(2)
        };
        (f(h), f(w))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub n_masks: usize,
    pub epochs: usize,
    pub decay_start_epoch: usize,
    pub base_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub adversarial_mode: AdversarialMode,
    pub beta1: f64,
    pub beta2: f64,
    pub shape_gradient: ShapeGradient,
    /// Size of the synthetic-image pool for discriminator updates; 0 disables it.
    pub history_size: usize,
    pub checkpoint_every: usize,
    pub net: NetworkSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_masks: 10,
            epochs: 100,
            decay_start_epoch: 50,
            base_lr: 2e-4,
            batch_size: 16,
            seed: 0,
            loss_weights: LossWeights::default(),
            adversarial_mode: AdversarialMode::LeastSquares,
            beta1: 0.5,
            beta2: 0.999,
            shape_gradient: ShapeGradient::Full,
            history_size: 0,
            checkpoint_every: 10,
            net: NetworkSpec::default(),
        }
    }
}

impl RunConfig {
    /// The small-image configuration used for CPU experiments on phantoms.
    pub fn desk() -> Self {
        Self {
            epochs: 20,
            decay_start_epoch: 10,
            batch_size: 4,
            checkpoint_every: 5,
            net: NetworkSpec::desk(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_weights.validate()?;
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_masks < 2 {
            return fail(format!("n_masks = {} must be >= 2", self.n_masks));
        }
        if self.decay_start_epoch == 0 || self.decay_start_epoch > self.epochs {
            return fail(format!(
                "decay_start_epoch = {} must lie in [1, epochs = {}]",
                self.decay_start_epoch, self.epochs
            ));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return fail(format!("base_lr = {} must be finite and >= 0", self.base_lr));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)".into());
        }
        if self.checkpoint_every == 0 {
            return fail("checkpoint_every must be >= 1".into());
        }
        let n = &self.net;
        if n.width == 0 || n.disc_width == 0 || n.outer_kernel % 2 == 0 || n.disc_layers == 0 {
            return fail(format!("invalid network spec {n:?}"));
        }
        Ok(())
    }

    /// Learning rate for a 1-based epoch: constant through `decay_start_epoch`,
    /// then a linear ramp that would reach zero at `epochs + 1`.
    pub fn lr_at_epoch(&self, epoch: usize) -> Result<f64> {
        lr_at_epoch(self, epoch)
    }

    pub fn to_text(&self) -> String {
        let w = &self.loss_weights;
        let n = &self.net;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("n_masks", self.n_masks.to_string());
        kv("epochs", self.epochs.to_string());
        kv("decay_start_epoch", self.decay_start_epoch.to_string());
        kv("base_lr", format!("{:e}", self.base_lr));
        kv("batch_size", self.batch_size.to_string());
        kv("seed", self.seed.to_string());
        kv("lambda_mask", format!("{:?}", w.lambda_mask));
        kv("lambda_shape", format!("{:?}", w.lambda_shape));
        kv("lambda_cycle", format!("{:?}", w.lambda_cycle));
        kv("adversarial_mode", self.adversarial_mode.as_str().to_string());
        kv("beta1", format!("{:?}", self.beta1));
        kv("beta2", format!("{:?}", self.beta2));
        kv("shape_gradient", self.shape_gradient.as_str().to_string());
        kv("history_size", self.history_size.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("net_width", n.width.to_string());
        kv("net_n_down", n.n_down.to_string());
        kv("net_n_res", n.n_res.to_string());
        kv("net_outer_kernel", n.outer_kernel.to_string());
        kv("disc_width", n.disc_width.to_string());
        kv("disc_layers", n.disc_layers.to_string());
        s
    }

    /// Parses `key = value` lines on top of the defaults. Blank lines and
    /// `#` comments are skipped; unknown keys are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "n_masks" => self.n_masks = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "decay_start_epoch" => self.decay_start_epoch = num(key, value)?,
            "base_lr" => self.base_lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "lambda_mask" => self.loss_weights.lambda_mask = num(key, value)?,
            "lambda_shape" => self.loss_weights.lambda_shape = num(key, value)?,
            "lambda_cycle" => self.loss_weights.lambda_cycle = num(key, value)?,
            "adversarial_mode" => {
                self.adversarial_mode = match value.to_ascii_uppercase().as_str() {
                    "LEAST_SQUARES" => AdversarialMode::LeastSquares,
                    "VANILLA_LOG" => AdversarialMode::VanillaLog,
                    _ => return Err(Error::Config(format!("adversarial_mode: {value:?}"))),
                }
            }
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "shape_gradient" => {
                self.shape_gradient = match value.to_ascii_lowercase().as_str() {
                    "full" => ShapeGradient::Full,
                    "detached" => ShapeGradient::Detached,
                    _ => return Err(Error::Config(format!("shape_gradient: {value:?}"))),
                }
            }
            "history_size" => self.history_size = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "net_width" => self.net.width = num(key, value)?,
            "net_n_down" => self.net.n_down = num(key, value)?,
            "net_n_res" => self.net.n_res = num(key, value)?,
            "net_outer_kernel" => self.net.outer_kernel = num(key, value)?,
            "disc_width" => self.net.disc_width = num(key, value)?,
            "disc_layers" => self.net.disc_layers = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::artifacts::write_atomic(path, self.to_text().as_bytes())
    }

    /// Short content hash of the canonical text form, stored in checkpoints.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn lr_at_epoch(cfg: &RunConfig, epoch: usize) -> Result<f64> {
    if epoch == 0 || epoch > cfg.epochs {
        return Err(Error::OutOfRange {
            epoch,
            epochs: cfg.epochs,
        });
    }
    if epoch <= cfg.decay_start_epoch {
        return Ok(cfg.base_lr);
    }
    let remaining = (cfg.epochs + 1 - epoch) as f64;
    let span = (cfg.epochs + 1 - cfg.decay_start_epoch) as f64;
    Ok(cfg.base_lr * remaining / span)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_matches_reference_points() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.lr_at_epoch(1).unwrap(), 2e-4);
        assert_eq!(cfg.lr_at_epoch(50).unwrap(), 2e-4);
        assert!((cfg.lr_at_epoch(100).unwrap() - 2e-4 / 51.0).abs() < 1e-15);
        assert!((cfg.lr_at_epoch(100).unwrap() - 3.92e-6).abs() < 1e-8);
        assert!((cfg.lr_at_epoch(75).unwrap() - 1e-4).abs() < 5e-6);
        assert!(matches!(cfg.lr_at_epoch(0), Err(Error::OutOfRange { .. })));
        assert!(matches!(cfg.lr_at_epoch(101), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn schedule_is_non_increasing_and_continuous() {
        let cfg = RunConfig::default();
        let lrs: Vec<f64> = (1..=100).map(|e| cfg.lr_at_epoch(e).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!(lrs[99] > 0.0);
        // One ramp step past the knee equals the ramp slope.
        let step = 2e-4 / 51.0;
        assert!((lrs[49] - lrs[50] - step).abs() < 1e-15);
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::desk();
        cfg.seed = 42;
        cfg.loss_weights.lambda_shape = 0.0;
        cfg.adversarial_mode = AdversarialMode::VanillaLog;
        cfg.shape_gradient = ShapeGradient::Detached;
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn parse_rejects_bad_input() {
        assert!(RunConfig::from_text("bogus = 1").is_err());
        assert!(RunConfig::from_text("n_masks = 1").is_err());
        assert!(RunConfig::from_text("epochs = 10\ndecay_start_epoch = 11").is_err());
        assert!(RunConfig::from_text("lambda_mask = -1").is_err());
        assert!(RunConfig::from_text("no equals sign").is_err());
        let cfg = RunConfig::from_text("# comment\n\nseed = 9 # trailing\n").unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn patchgan_geometry() {
        let net = NetworkSpec::default();
        assert_eq!(net.disc_receptive_field(), 70);
        assert_eq!(net.disc_output_shape(256, 256), (30, 30));
        assert_eq!(net.disc_output_shape(224, 224), (26, 26));
        let desk = NetworkSpec::desk();
        assert_eq!(desk.disc_receptive_field(), 34);
        assert_eq!(desk.disc_output_shape(32, 32), (6, 6));
    }
}
