//! Minimal layer toolkit over candle tensors: seeded parameter creation,
//! convolutions, instance normalization and tensor/grid conversion.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

/// Standard deviation of the normal weight initialization.
pub const INIT_STD: f64 = 0.02;

/// Named trainable parameters of one network, in creation order.
#[derive(Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Var)>,
}

impl ParamSet {
    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a Var> + 'a {
        self.entries
            .iter()
            .filter(move |(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn tensors(&self) -> HashMap<String, Tensor> {
        self.entries
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_tensors(path, &self.tensors())
    }

    /// Overwrites every parameter from a safetensors file; names and shapes must match.
    pub fn load(&self, path: &Path) -> Result<()> {
        let device = self
            .entries
            .first()
            .map(|(_, v)| v.device().clone())
            .unwrap_or(Device::Cpu);
        let stored = candle_core::safetensors::load(path, &device)?;
        self.assign(&stored)
    }

    pub fn assign(&self, stored: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.entries {
            let t = stored
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::ShapeMismatch(var.dims().to_vec(), t.dims().to_vec()));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    /// Deep copy of the current values, for snapshot comparisons.
    pub fn snapshot(&self) -> Result<Vec<Tensor>> {
        self.entries
            .iter()
            .map(|(_, v)| Ok(v.as_tensor().copy()?))
            .collect()
    }
}

/// Writes tensors to a safetensors file through a `.partial` temp file.
pub fn save_tensors(path: &Path, tensors: &HashMap<String, Tensor>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|source| Error::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    let tmp = crate::artifacts::partial_path(path);
    candle_core::safetensors::save(tensors, &tmp)?;
    std::fs::rename(&tmp, path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Creates parameters under a name prefix from a seeded stream.
pub struct ParamBuilder<'a> {
    params: &'a mut ParamSet,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    pub dtype: DType,
    pub device: Device,
    pub init_std: f64,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(
        params: &'a mut ParamSet,
        rng: &'a mut ChaCha8Rng,
        dtype: DType,
        device: Device,
        init_std: f64,
    ) -> Self {
        Self {
            params,
            rng,
            prefix: String::new(),
            dtype,
            device,
            init_std,
        }
    }

    pub fn push_prefix(&mut self, p: &str) -> String {
        let old = self.prefix.clone();
        self.prefix = format!("{}{}.", self.prefix, p);
        old
    }

    pub fn restore_prefix(&mut self, old: String) {
        self.prefix = old;
    }

    fn var(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = if std == 0.0 {
            vec![0.0; n]
        } else {
            let normal = Normal::new(0.0, std).expect("valid std");
            (0..n).map(|_| normal.sample(&mut *self.rng)).collect()
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.params
            .entries
            .push((format!("{}{}", self.prefix, name), var.clone()));
        Ok(var)
    }

    pub fn conv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Conv> {
        let std = self.init_std;
        let weight = self.var(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], std)?;
        let bias = self.var(&format!("{name}.bias"), &[c_out], 0.0)?;
        Ok(Conv {
            weight,
            bias,
            stride,
            padding,
        })
    }
}

pub struct Conv {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d_im2col(x, self.weight.as_tensor(), self.padding, self.stride)?;
        let c = self.bias.dims()[0];
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, c, 1, 1))?)?)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// Geometry shared by the patch-unfolding op and its adjoint.
#[derive(Debug, Clone, Copy)]
struct Patches {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Patches {
    fn cols_shape(&self) -> (usize, usize, usize) {
        (self.b, self.c * self.kh * self.kw, self.oh * self.ow)
    }

    /// Visits every (image offset, column offset) pair that reads inside the image.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let (rows, cols) = (self.c * self.kh * self.kw, self.oh * self.ow);
        for b in 0..self.b {
            for ci in 0..self.c {
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let row = (ci * self.kh + ky) * self.kw + kx;
                        let col_base = (b * rows + row) * cols;
                        let img_base = (b * self.c + ci) * self.h * self.w;
                        for oy in 0..self.oh {
                            let y = (oy * self.stride + ky) as isize - self.pad as isize;
                            if y < 0 || y >= self.h as isize {
                                continue;
                            }
                            let img_row = img_base + y as usize * self.w;
                            for ox in 0..self.ow {
                                let x = (ox * self.stride + kx) as isize - self.pad as isize;
                                if x >= 0 && x < self.w as isize {
                                    f(img_row + x as usize, col_base + oy * self.ow + ox);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn unfold<T: Copy + Default>(&self, img: &[T]) -> Vec<T> {
        let (b, r, l) = self.cols_shape();
        let mut out = vec![T::default(); b * r * l];
        self.for_each(|i, o| out[o] = img[i]);
        out
    }

    fn fold<T: Copy + Default + std::ops::AddAssign>(&self, cols: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); self.b * self.c * self.h * self.w];
        self.for_each(|i, o| out[i] += cols[o]);
        out
    }
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &candle_core::Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => Err(candle_core::Error::Msg("patch op expects a contiguous tensor".into())),
    }
}

/// `(B, C, H, W)` to `(B, C*kh*kw, OH*OW)` columns of zero-padded patches.
struct Im2Col(Patches);

/// Adjoint of [`Im2Col`]: scatters columns back, summing overlaps.
struct Col2Im(Patches);

impl candle_core::CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let out = match storage {
            S::F32(v) => S::F32(self.0.unfold(contiguous_slice(v, layout)?)),
            S::F64(v) => S::F64(self.0.unfold(contiguous_slice(v, layout)?)),
            _ => return Err(candle_core::Error::Msg("im2col supports f32 and f64".into())),
        };
        Ok((out, self.0.cols_shape().into()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl candle_core::CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let out = match storage {
            S::F32(v) => S::F32(self.0.fold(contiguous_slice(v, layout)?)),
            S::F64(v) => S::F64(self.0.fold(contiguous_slice(v, layout)?)),
            _ => return Err(candle_core::Error::Msg("col2im supports f32 and f64".into())),
        };
        let p = self.0;
        Ok((out, (p.b, p.c, p.h, p.w).into()))
    }
}

/// Zero-padded 2-D cross-correlation as patch unfolding plus one matrix
/// product. Equal to `Tensor::conv2d`; its backward pass is a pair of matrix
/// products and a fold, far cheaper on CPU than the direct kernel's.
pub fn conv2d_im2col(x: &Tensor, weight: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (c_out, c_in, kh, kw) = weight.dims4()?;
    if c != c_in {
        return Err(Error::ShapeMismatch(vec![c_in], vec![c]));
    }
    let (hp, wp) = (h + 2 * padding, w + 2 * padding);
    if hp < kh || wp < kw || stride == 0 {
        return Err(Error::ShapeMismatch(vec![kh, kw], vec![hp, wp]));
    }
    let p = Patches {
        b,
        c,
        h,
        w,
        kh,
        kw,
        stride,
        pad: padding,
        oh: (hp - kh) / stride + 1,
        ow: (wp - kw) / stride + 1,
    };
    let cols = x.contiguous()?.apply_op1(Im2Col(p))?;
    let k = c * kh * kw;
    let wm = weight.reshape((1, c_out, k))?.broadcast_as((b, c_out, k))?;
    let y = wm.contiguous()?.matmul(&cols)?;
    Ok(y.reshape((b, c_out, p.oh, p.ow))?)
}

/// Per-sample, per-channel normalization without affine parameters.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let y = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    Ok(y.reshape((b, c, h, w))?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Nearest-neighbour 2x upsampling of `(B, C, H, W)`.
struct Upsample2x;

/// Adjoint of [`Upsample2x`]: sums each 2x2 block.
struct BlockSum2x;

fn upsample_plane<T: Copy + Default>(src: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::default(); src.len() * 4];
    for p in 0..planes {
        for y in 0..2 * h {
            let s_row = p * h * w + (y / 2) * w;
            let o_row = p * 4 * h * w + y * 2 * w;
            for x in 0..2 * w {
                out[o_row + x] = src[s_row + x / 2];
            }
        }
    }
    out
}

fn block_sum_plane<T: Copy + Default + std::ops::AddAssign>(src: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::default(); planes * h * w];
    for p in 0..planes {
        for y in 0..2 * h {
            let s_row = p * 4 * h * w + y * 2 * w;
            let o_row = p * h * w + (y / 2) * w;
            for x in 0..2 * w {
                out[o_row + x / 2] += src[s_row + x];
            }
        }
    }
    out
}

impl candle_core::CustomOp1 for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample2x"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let (b, c, h, w) = layout.shape().dims4()?;
        let out = match storage {
            S::F32(v) => S::F32(upsample_plane(contiguous_slice(v, layout)?, b * c, h, w)),
            S::F64(v) => S::F64(upsample_plane(contiguous_slice(v, layout)?, b * c, h, w)),
            _ => return Err(candle_core::Error::Msg("upsample2x supports f32 and f64".into())),
        };
        Ok((out, (b, c, 2 * h, 2 * w).into()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&BlockSum2x)?))
    }
}

impl candle_core::CustomOp1 for BlockSum2x {
    fn name(&self) -> &'static str {
        "block_sum2x"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let (b, c, h2, w2) = layout.shape().dims4()?;
        let (h, w) = (h2 / 2, w2 / 2);
        let out = match storage {
            S::F32(v) => S::F32(block_sum_plane(contiguous_slice(v, layout)?, b * c, h, w)),
            S::F64(v) => S::F64(block_sum_plane(contiguous_slice(v, layout)?, b * c, h, w)),
            _ => return Err(candle_core::Error::Msg("block_sum2x supports f32 and f64".into())),
        };
        Ok((out, (b, c, h, w).into()))
    }
}

/// Nearest-neighbour 2x upsampling with an exact block-sum gradient.
/// candle's own op drops gradient when one tensor is upsampled twice.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Upsample2x)?)
}

/// Softmax over the channel axis (dim 1).
pub fn channel_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Stacks grids into a `(B, 1, H, W)` tensor.
pub fn grids_to_tensor(grids: &[&ImageGrid], dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = grids
        .first()
        .map(|g| g.shape())
        .ok_or_else(|| Error::Config("empty batch".into()))?;
    let mut data = Vec::with_capacity(grids.len() * h * w);
    for g in grids {
        if g.shape() != (h, w) {
            return Err(Error::ShapeMismatch(vec![h, w], vec![g.shape().0, g.shape().1]));
        }
        data.extend(g.pixels.iter().copied());
    }
    Ok(Tensor::from_vec(data, (grids.len(), 1, h, w), device)?.to_dtype(dtype)?)
}

/// Stacks 2-D arrays into a `(B, 1, H, W)` tensor.
pub fn arrays_to_tensor(arrays: &[&Array2<f64>], dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = arrays[0].dim();
    let mut data = Vec::with_capacity(arrays.len() * h * w);
    for a in arrays {
        if a.dim() != (h, w) {
            return Err(Error::ShapeMismatch(vec![h, w], a.shape().to_vec()));
        }
        data.extend(a.iter().copied());
    }
    Ok(Tensor::from_vec(data, (arrays.len(), 1, h, w), device)?.to_dtype(dtype)?)
}

/// Sample `index` of a `(B, C, H, W)` tensor as a `(C, H, W)` array.
pub fn tensor_to_array3(t: &Tensor, index: usize) -> Result<Array3<f64>> {
    let (_, c, h, w) = t.dims4()?;
    let v: Vec<f64> = t
        .get(index)?
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1()?;
    Ok(Array3::from_shape_vec((c, h, w), v).expect("shape matches element count"))
}

/// Channel 0 of sample `index` as an `(H, W)` array.
pub fn tensor_to_array2(t: &Tensor, index: usize) -> Result<Array2<f64>> {
    let a = tensor_to_array3(t, index)?;
    Ok(a.index_axis(ndarray::Axis(0), 0).to_owned())
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
