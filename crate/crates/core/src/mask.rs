//! Coarse foreground masks from thresholding and morphology, plus the
//! elastic corruption applied to them in the robustness study.

use std::collections::VecDeque;

use ndarray::{Array2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

pub type BinaryGrid = Array2<bool>;

pub const DEFAULT_THRESHOLD: f64 = 0.1;
pub const DEFAULT_RADIUS: usize = 1;
pub const DEFAULT_SMOOTHING: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSource {
    Extracted,
    Deformed,
    Manual,
}

/// Binary anatomy map: `true` is foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoarseMask {
    pub pixels: BinaryGrid,
    pub source: MaskSource,
}

impl CoarseMask {
    pub fn new(pixels: BinaryGrid, source: MaskSource) -> Self {
        Self { pixels, source }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }

    /// The background map `1 - foreground` used as the supervision target.
    pub fn background(&self) -> Array2<f64> {
        self.pixels.mapv(|p| if p { 0.0 } else { 1.0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        const FOUR: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
        const EIGHT: [(isize, isize); 8] = [
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ];
        match self {
            Connectivity::Four => &FOUR,
            Connectivity::Eight => &EIGHT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractionParams {
    pub threshold: f64,
    pub radius: usize,
    pub connectivity: Connectivity,
}

impl Default for ExtractionParams {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            radius: DEFAULT_RADIUS,
            connectivity: Connectivity::Eight,
        }
    }
}

/// Sets pixels whose intensity, mapped from the declared range onto `[0, 1]`,
/// is strictly above `threshold`.
pub fn binarize(img: &ImageGrid, threshold: f64) -> Result<BinaryGrid> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidThreshold(threshold));
    }
    let (lo, hi) = img.value_range;
    Ok(img.pixels.mapv(|v| (v - lo) / (hi - lo) > threshold))
}

/// Stretches the observed intensities onto `[0, 1]`. A constant slice maps to zeros.
pub fn unit_normalize(img: &ImageGrid) -> ImageGrid {
    let (lo, hi) = img.min_max();
    let pixels = if hi > lo {
        img.pixels.mapv(|v| (v - lo) / (hi - lo))
    } else {
        Array2::zeros(img.pixels.dim())
    };
    ImageGrid {
        pixels,
        modality: img.modality,
        value_range: (0.0, 1.0),
    }
}

/// Square-window min (erosion) or max (dilation), computed separably.
/// Pixels outside the grid count as background.
fn square_filter(mask: &BinaryGrid, radius: usize, erode: bool) -> BinaryGrid {
    let (h, w) = mask.dim();
    let pass = |src: &BinaryGrid, along_rows: bool| {
        Array2::from_shape_fn((h, w), |(i, j)| {
            let (c, n) = if along_rows { (j, w) } else { (i, h) };
            let lo = c as isize - radius as isize;
            let hi = c + radius;
            if erode && (lo < 0 || hi >= n) {
                return false;
            }
            let range = lo.max(0) as usize..=hi.min(n - 1);
            let mut vals = range.map(|k| if along_rows { src[[i, k]] } else { src[[k, j]] });
            if erode {
                vals.all(|v| v)
            } else {
                vals.any(|v| v)
            }
        })
    };
    pass(&pass(mask, true), false)
}

pub fn erode(mask: &BinaryGrid, radius: usize) -> BinaryGrid {
    square_filter(mask, radius, true)
}

pub fn dilate(mask: &BinaryGrid, radius: usize) -> BinaryGrid {
    square_filter(mask, radius, false)
}

/// Erosion then dilation with a `(2r+1)^2` square element.
pub fn morphological_open(mask: &BinaryGrid, radius: usize) -> BinaryGrid {
    assert!(radius >= 1, "opening radius must be >= 1");
    dilate(&erode(mask, radius), radius)
}

/// Label image (0 = background, labels from 1 in row-major discovery order)
/// and per-label pixel counts.
pub fn label_components(mask: &BinaryGrid, connectivity: Connectivity) -> (Array2<u32>, Vec<usize>) {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for i in 0..h {
        for j in 0..w {
            if !mask[[i, j]] || labels[[i, j]] != 0 {
                continue;
            }
            sizes.push(0);
            let label = sizes.len() as u32;
            labels[[i, j]] = label;
            queue.push_back((i, j));
            while let Some((y, x)) = queue.pop_front() {
                sizes[label as usize - 1] += 1;
                for &(dy, dx) in connectivity.offsets() {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if mask[[ny, nx]] && labels[[ny, nx]] == 0 {
                        labels[[ny, nx]] = label;
                        queue.push_back((ny, nx));
                    }
                }
            }
        }
    }
    (labels, sizes)
}

/// Keeps the component with the most pixels; ties go to the component whose
/// first pixel comes earliest in row-major order.
pub fn largest_component(mask: &BinaryGrid, connectivity: Connectivity) -> Result<BinaryGrid> {
    let (labels, sizes) = label_components(mask, connectivity);
    let mut best: Option<(u32, usize)> = None;
    for (k, &size) in sizes.iter().enumerate() {
        if best.map_or(true, |(_, s)| size > s) {
            best = Some((k as u32 + 1, size));
        }
    }
    let (keep, _) = best.ok_or(Error::EmptyForeground)?;
    Ok(labels.mapv(|l| l == keep))
}

/// Unit-normalize, threshold, open, keep the largest component.
pub fn extract_coarse_mask(img: &ImageGrid) -> Result<CoarseMask> {
    extract_coarse_mask_with(img, &ExtractionParams::default())
}

pub fn extract_coarse_mask_with(img: &ImageGrid, params: &ExtractionParams) -> Result<CoarseMask> {
    img.check_finite()?;
    let unit = unit_normalize(img);
    let binary = binarize(&unit, params.threshold)?;
    let opened = morphological_open(&binary, params.radius);
    let kept = largest_component(&opened, params.connectivity)?;
    Ok(CoarseMask::new(kept, MaskSource::Extracted))
}

/// Per-pixel displacement in pixels; `dx` along columns, `dy` along rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub dx: Array2<f64>,
    pub dy: Array2<f64>,
    pub sigma: f64,
}

impl DisplacementField {
    pub fn zeros(shape: (usize, usize)) -> Self {
        Self {
            dx: Array2::zeros(shape),
            dy: Array2::zeros(shape),
            sigma: 0.0,
        }
    }

    pub fn mean_magnitude(&self) -> f64 {
        let n = self.dx.len() as f64;
        Zip::from(&self.dx)
            .and(&self.dy)
            .fold(0.0, |acc, &x, &y| acc + x.hypot(y))
            / n
    }
}

fn gaussian_kernel(bandwidth: f64) -> Vec<f64> {
    let r = (3.0 * bandwidth).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * bandwidth * bandwidth)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable convolution with edge-clamped indexing.
fn smooth(field: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = field.dim();
    let r = (kernel.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let rows = Array2::from_shape_fn((h, w), |(i, j)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, &c)| c * field[[i, clamp(j as isize + k as isize - r, w)]])
            .sum::<f64>()
    });
    Array2::from_shape_fn((h, w), |(i, j)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, &c)| c * rows[[clamp(i as isize + k as isize - r, h), j]])
            .sum::<f64>()
    })
}

/// Draws i.i.d. `N(0, sigma^2)` displacements and smooths them with a Gaussian
/// of the given bandwidth. The smoothed field is rescaled by the kernel's
/// L2 norm so that each component keeps marginal standard deviation `sigma`.
pub fn sample_displacement(
    shape: (usize, usize),
    sigma: f64,
    smoothing: f64,
    seed: u64,
) -> Result<DisplacementField> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidSigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(DisplacementField::zeros(shape));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma is positive and finite");
    let mut draw = || Array2::from_shape_simple_fn(shape, || normal.sample(&mut rng));
    let (raw_x, raw_y) = (draw(), draw());
    if smoothing <= 0.0 {
        return Ok(DisplacementField {
            dx: raw_x,
            dy: raw_y,
            sigma,
        });
    }
    let kernel = gaussian_kernel(smoothing);
    let gain = 1.0 / kernel.iter().map(|k| k * k).sum::<f64>();
    Ok(DisplacementField {
        dx: smooth(&raw_x, &kernel) * gain,
        dy: smooth(&raw_y, &kernel) * gain,
        sigma,
    })
}

/// Backward warp with nearest-neighbour sampling: output `(i, j)` reads the
/// input at `(i + dy, j + dx)`; samples outside the grid are background.
pub fn deform_mask(mask: &CoarseMask, field: &DisplacementField) -> Result<CoarseMask> {
    let shape = mask.shape();
    for d in [&field.dx, &field.dy] {
        if d.dim() != shape {
            return Err(Error::ShapeMismatch(
                vec![shape.0, shape.1],
                d.shape().to_vec(),
            ));
        }
    }
    let (h, w) = shape;
    let pixels = Array2::from_shape_fn(shape, |(i, j)| {
        let y = (i as f64 + field.dy[[i, j]]).round();
        let x = (j as f64 + field.dx[[i, j]]).round();
        y >= 0.0 && x >= 0.0 && y < h as f64 && x < w as f64 && mask.pixels[[y as usize, x as usize]]
    });
    Ok(CoarseMask::new(pixels, MaskSource::Deformed))
}
