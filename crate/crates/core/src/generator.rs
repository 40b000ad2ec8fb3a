//! Dual-branch generator and patch discriminator.
//!
//! A generator runs one shared encoder trunk, then two decoders: the mask
//! branch emits `N` attention maps normalized over channels (the last one is
//! the background map `A_N`), the content branch emits `N - 1` content images
//! bounded by `tanh`. The output is
//!
//! ```text
//! O = A_N * input + sum_{i < N} A_i * C_i
//! ```

use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3, Axis};

use crate::config::NetworkSpec;
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, Modality};
use crate::nn::{self, Conv, ParamBuilder, ParamSet};
use crate::rng::stream_rng;

/// Tolerance on per-pixel channel sums accepted by [`compose`].
pub const SIMPLEX_TOLERANCE: f64 = 1e-3;

/// `N x H x W` attention maps; channel `N - 1` (0-based) is the background map.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaskSet {
    pub maps: Array3<f64>,
}

impl AttentionMaskSet {
    pub fn new(maps: Array3<f64>) -> Result<Self> {
        if maps.dim().0 < 2 {
            return Err(Error::Config("attention set needs at least 2 channels".into()));
        }
        Ok(Self { maps })
    }

    pub fn n(&self) -> usize {
        self.maps.dim().0
    }

    pub fn shape(&self) -> (usize, usize) {
        let (_, h, w) = self.maps.dim();
        (h, w)
    }

    pub fn background(&self) -> Array2<f64> {
        self.maps.index_axis(Axis(0), self.n() - 1).to_owned()
    }

    /// Largest per-pixel deviation of the channel sum from one.
    pub fn simplex_deviation(&self) -> f64 {
        self.maps
            .sum_axis(Axis(0))
            .iter()
            .fold(0.0f64, |m, &s| m.max((s - 1.0).abs()))
    }
}

/// `(N - 1) x H x W` foreground contents.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentStack {
    pub contents: Array3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorOutput {
    pub output: ImageGrid,
    pub masks: AttentionMaskSet,
    pub contents: ContentStack,
}

/// Mixes background input and foreground contents with attention weights.
pub fn compose(
    input: &ImageGrid,
    masks: &AttentionMaskSet,
    contents: &ContentStack,
) -> Result<ImageGrid> {
    let (n, h, w) = masks.maps.dim();
    if input.shape() != (h, w) {
        return Err(Error::ShapeMismatch(
            vec![h, w],
            vec![input.shape().0, input.shape().1],
        ));
    }
    if contents.contents.dim() != (n - 1, h, w) {
        return Err(Error::ShapeMismatch(
            vec![n - 1, h, w],
            contents.contents.shape().to_vec(),
        ));
    }
    let dev = masks.simplex_deviation();
    if !(dev <= SIMPLEX_TOLERANCE) {
        return Err(Error::SimplexViolation(dev));
    }
    let a = &masks.maps;
    let c = &contents.contents;
    let pixels = Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = a[[n - 1, y, x]] * input.pixels[[y, x]];
        for i in 0..n - 1 {
            acc += a[[i, y, x]] * c[[i, y, x]];
        }
        acc
    });
    Ok(ImageGrid {
        pixels,
        modality: counterpart(input.modality),
        value_range: input.value_range,
    })
}

/// The modality a generator produces from `m`.
pub fn counterpart(m: Modality) -> Modality {
    match m {
        Modality::Mr => Modality::Ct,
        Modality::Ct => Modality::Mr,
        Modality::PhantomMr => Modality::PhantomCt,
        Modality::PhantomCt => Modality::PhantomMr,
    }
}

/// Batched composition over `(B, 1, H, W)` input, `(B, N, H, W)` masks and
/// `(B, N-1, H, W)` contents.
pub fn compose_tensors(input: &Tensor, masks: &Tensor, contents: &Tensor) -> Result<Tensor> {
    let n = masks.dim(1)?;
    let bg = masks.narrow(1, n - 1, 1)?;
    let fg = masks.narrow(1, 0, n - 1)?;
    let background = (bg * input)?;
    let foreground = (fg * contents)?.sum_keepdim(1)?;
    Ok((background + foreground)?)
}

/// Shared trunk: stem, strided downsampling, residual blocks.
pub struct Encoder {
    stem: Conv,
    downs: Vec<Conv>,
    res: Vec<(Conv, Conv)>,
}

impl Encoder {
    fn new(pb: &mut ParamBuilder, spec: &NetworkSpec) -> Result<Self> {
        let k = spec.outer_kernel;
        let stem = pb.conv("stem", 1, spec.width, k, 1, k / 2)?;
        let mut downs = Vec::new();
        let mut c = spec.width;
        for i in 0..spec.n_down {
            downs.push(pb.conv(&format!("down{i}"), c, c * 2, 3, 2, 1)?);
            c *= 2;
        }
        let mut res = Vec::new();
        for i in 0..spec.n_res {
            let a = pb.conv(&format!("res{i}.a"), c, c, 3, 1, 1)?;
            let b = pb.conv(&format!("res{i}.b"), c, c, 3, 1, 1)?;
            res.push((a, b));
        }
        Ok(Self { stem, downs, res })
    }

    pub fn out_channels(&self) -> usize {
        self.res
            .last()
            .map(|(_, b)| b.out_channels())
            .or_else(|| self.downs.last().map(Conv::out_channels))
            .unwrap_or_else(|| self.stem.out_channels())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = nn::instance_norm(&self.stem.forward(x)?)?.relu()?;
        for d in &self.downs {
            h = nn::instance_norm(&d.forward(&h)?)?.relu()?;
        }
        for (a, b) in &self.res {
            let r = nn::instance_norm(&a.forward(&h)?)?.relu()?;
            let r = nn::instance_norm(&b.forward(&r)?)?;
            h = (h + r)?;
        }
        Ok(h)
    }
}

/// Upsampling path ending in a raw (pre-activation) output convolution.
pub struct Decoder {
    ups: Vec<Conv>,
    out: Conv,
}

impl Decoder {
    fn new(pb: &mut ParamBuilder, spec: &NetworkSpec, c_in: usize, c_out: usize) -> Result<Self> {
        let mut ups = Vec::new();
        let mut c = c_in;
        for i in 0..spec.n_down {
            ups.push(pb.conv(&format!("up{i}"), c, c / 2, 3, 1, 1)?);
            c /= 2;
        }
        let k = spec.outer_kernel;
        let out = pb.conv("out", c, c_out, k, 1, k / 2)?;
        Ok(Self { ups, out })
    }

    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let mut h = features.clone();
        for u in &self.ups {
            h = nn::upsample2x(&h)?;
            h = nn::instance_norm(&u.forward(&h)?)?.relu()?;
        }
        self.out.forward(&h)
    }
}

/// One head of the generator: the shared encoder plus its own decoder.
pub struct Branch {
    pub encoder: Arc<Encoder>,
    pub decoder: Decoder,
}

/// Batched forward results. `masks` is `(B, N, H, W)`, `contents` is `(B, N-1, H, W)`.
pub struct GeneratorTensors {
    pub output: Tensor,
    pub masks: Tensor,
    pub contents: Tensor,
}

impl GeneratorTensors {
    /// Background attention map `A_N` as `(B, 1, H, W)`.
    pub fn background(&self) -> Result<Tensor> {
        let n = self.masks.dim(1)?;
        Ok(self.masks.narrow(1, n - 1, 1)?)
    }
}

pub struct Generator {
    pub mask_branch: Branch,
    pub content_branch: Branch,
    n_masks: usize,
    params: ParamSet,
    dtype: DType,
    device: Device,
}

impl Generator {
    pub fn new(spec: &NetworkSpec, n_masks: usize, seed: u64, name: &str, dtype: DType) -> Result<Self> {
        Self::with_init(spec, n_masks, seed, name, dtype, nn::INIT_STD)
    }

    pub fn with_init(
        spec: &NetworkSpec,
        n_masks: usize,
        seed: u64,
        name: &str,
        dtype: DType,
        init_std: f64,
    ) -> Result<Self> {
        if n_masks < 2 {
            return Err(Error::Config(format!("n_masks = {n_masks} must be >= 2")));
        }
        let device = Device::Cpu;
        let mut params = ParamSet::default();
        let mut rng = stream_rng(seed, name, 0);
        let mut pb = ParamBuilder::new(&mut params, &mut rng, dtype, device.clone(), init_std);
        let old = pb.push_prefix("enc");
        let encoder = Arc::new(Encoder::new(&mut pb, spec)?);
        pb.restore_prefix(old);
        let c = encoder.out_channels();
        let old = pb.push_prefix("mask");
        let mask_decoder = Decoder::new(&mut pb, spec, c, n_masks)?;
        pb.restore_prefix(old);
        let old = pb.push_prefix("content");
        let content_decoder = Decoder::new(&mut pb, spec, c, n_masks - 1)?;
        pb.restore_prefix(old);
        Ok(Self {
            mask_branch: Branch {
                encoder: encoder.clone(),
                decoder: mask_decoder,
            },
            content_branch: Branch {
                encoder,
                decoder: content_decoder,
            },
            n_masks,
            params,
            dtype,
            device,
        })
    }

    pub fn n_masks(&self) -> usize {
        self.n_masks
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// True when both heads hold the same encoder instance.
    pub fn encoder_is_shared(&self) -> bool {
        Arc::ptr_eq(&self.mask_branch.encoder, &self.content_branch.encoder)
    }

    /// Raw mask logits and content pre-activations share one encoder pass.
    pub fn forward(&self, input: &Tensor) -> Result<GeneratorTensors> {
        let features = self.mask_branch.encoder.forward(input)?;
        let masks = nn::channel_softmax(&self.mask_branch.decoder.forward(&features)?)?;
        let contents = self.content_branch.decoder.forward(&features)?.tanh()?;
        let output = compose_tensors(input, &masks, &contents)?;
        Ok(GeneratorTensors {
            output,
            masks,
            contents,
        })
    }

    /// Runs the generator on one normalized slice; the returned output is
    /// assembled by [`compose`] from the returned masks and contents.
    pub fn forward_grid(&self, input: &ImageGrid) -> Result<GeneratorOutput> {
        generator_forward(self, input)
    }
}

pub fn generator_forward(net: &Generator, input: &ImageGrid) -> Result<GeneratorOutput> {
    if !input.is_normalized() {
        return Err(Error::Config("generator input must be normalized to [-1, 1]".into()));
    }
    let x = nn::grids_to_tensor(&[input], net.dtype, &net.device)?;
    let t = net.forward(&x)?;
    let masks = AttentionMaskSet::new(nn::tensor_to_array3(&t.masks, 0)?)?;
    let contents = ContentStack {
        contents: nn::tensor_to_array3(&t.contents, 0)?,
    };
    let output = compose(input, &masks, &contents)?;
    Ok(GeneratorOutput {
        output,
        masks,
        contents,
    })
}

/// Patch discriminator: `disc_layers` stride-2 4x4 convolutions, then two
/// stride-1 4x4 convolutions, LeakyReLU(0.2) between layers, no normalization.
pub struct Discriminator {
    layers: Vec<Conv>,
    params: ParamSet,
    dtype: DType,
    device: Device,
}

impl Discriminator {
    pub fn new(spec: &NetworkSpec, seed: u64, name: &str, dtype: DType) -> Result<Self> {
        let device = Device::Cpu;
        let mut params = ParamSet::default();
        let mut rng = stream_rng(seed, name, 0);
        let mut pb = ParamBuilder::new(&mut params, &mut rng, dtype, device.clone(), nn::INIT_STD);
        let mut layers = Vec::new();
        let mut c_in = 1;
        let mut c = spec.disc_width;
        for i in 0..spec.disc_layers {
            layers.push(pb.conv(&format!("conv{i}"), c_in, c, 4, 2, 1)?);
            c_in = c;
            c = (c * 2).min(spec.disc_width * 8);
        }
        layers.push(pb.conv("conv_s1", c_in, c, 4, 1, 1)?);
        layers.push(pb.conv("score", c, 1, 4, 1, 1)?);
        Ok(Self {
            layers,
            params,
            dtype,
            device,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// `(B, 1, H, W)` images to `(B, 1, h, w)` raw patch scores.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i < last {
                h = nn::leaky_relu(&h, 0.2)?;
            }
        }
        Ok(h)
    }

    pub fn forward_grid(&self, img: &ImageGrid) -> Result<Array2<f64>> {
        discriminator_forward(self, img)
    }

    /// `(stride, padding, kernel)` of each layer, input side first.
    pub fn geometry(&self) -> Vec<(usize, usize, usize)> {
        self.layers
            .iter()
            .map(|l| (l.stride, l.padding, l.weight.dims()[2]))
            .collect()
    }
}

pub fn discriminator_forward(net: &Discriminator, img: &ImageGrid) -> Result<Array2<f64>> {
    let x = nn::grids_to_tensor(&[img], net.dtype, &net.device)?;
    nn::tensor_to_array2(&net.forward(&x)?, 0)
}
