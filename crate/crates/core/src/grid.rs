//! Image slices and the intensity preprocessing applied before training.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Lower end of the CT intensity window, in HU.
pub const CT_MIN: f64 = -1000.0;
/// Upper end of the CT intensity window, in HU.
pub const CT_MAX: f64 = 2000.0;
/// Width of the CT window; the default PSNR data range and the scale
/// between normalized units and HU (`CT_WIDTH / 2` HU per unit).
pub const CT_WIDTH: f64 = CT_MAX - CT_MIN;

pub const NORMALIZED_RANGE: (f64, f64) = (-1.0, 1.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Mr,
    Ct,
    PhantomMr,
    PhantomCt,
}

impl Modality {
    pub fn is_ct(self) -> bool {
        matches!(self, Modality::Ct | Modality::PhantomCt)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Mr => "MR",
            Modality::Ct => "CT",
            Modality::PhantomMr => "PHANTOM_MR",
            Modality::PhantomCt => "PHANTOM_CT",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "MR" | "MRI" => Ok(Modality::Mr),
            "CT" => Ok(Modality::Ct),
            "PHANTOM_MR" => Ok(Modality::PhantomMr),
            "PHANTOM_CT" => Ok(Modality::PhantomCt),
            other => Err(Error::UnsupportedModality(other.to_string())),
        }
    }
}

/// A single 2-D slice with its modality and declared dynamic range.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub pixels: Array2<f64>,
    pub modality: Modality,
    pub value_range: (f64, f64),
}

impl ImageGrid {
    pub fn new(pixels: Array2<f64>, modality: Modality, value_range: (f64, f64)) -> Result<Self> {
        if !(value_range.0 < value_range.1) {
            return Err(Error::Config(format!(
                "value range {value_range:?} must satisfy lo < hi"
            )));
        }
        let img = Self {
            pixels,
            modality,
            value_range,
        };
        img.check_finite()?;
        Ok(img)
    }

    /// Wraps pixels that are already in normalized `[-1, 1]` units.
    pub fn normalized(pixels: Array2<f64>, modality: Modality) -> Self {
        Self {
            pixels,
            modality,
            value_range: NORMALIZED_RANGE,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub fn is_normalized(&self) -> bool {
        self.value_range == NORMALIZED_RANGE
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.pixels.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("{} image", self.modality.as_str())))
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.pixels
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Maps normalized CT back to clipped HU; other modalities map to `[0, 255]`.
    pub fn to_intensity_domain(&self) -> ImageGrid {
        let (lo, hi) = if self.modality.is_ct() {
            (CT_MIN, CT_MAX)
        } else {
            (0.0, 255.0)
        };
        let pixels = self.pixels.mapv(|v| lo + (v + 1.0) * 0.5 * (hi - lo));
        ImageGrid {
            pixels,
            modality: self.modality,
            value_range: (lo, hi),
        }
    }
}

/// Maps a slice to `[-1, 1]`.
///
/// CT is clipped to the fixed HU window first; MR has no physical scale and is
/// stretched from its observed min/max. A slice whose range is already
/// `(-1, 1)` is only clipped, which makes the operation idempotent.
pub fn normalize(img: &ImageGrid) -> Result<ImageGrid> {
    img.check_finite()?;
    if img.is_normalized() {
        return Ok(ImageGrid::normalized(
            img.pixels.mapv(|v| v.clamp(-1.0, 1.0)),
            img.modality,
        ));
    }
    let pixels = if img.modality.is_ct() {
        img.pixels
            .mapv(|v| (v.clamp(CT_MIN, CT_MAX) - CT_MIN) / CT_WIDTH * 2.0 - 1.0)
    } else {
        let (lo, hi) = img.min_max();
        if lo == hi {
            return Err(Error::DegenerateRange(lo));
        }
        img.pixels.mapv(|v| ((v - lo) / (hi - lo) * 2.0 - 1.0).clamp(-1.0, 1.0))
    };
    Ok(ImageGrid::normalized(pixels, img.modality))
}

/// Scales the longer side to the target with bilinear sampling and pads the
/// remainder symmetrically with the range minimum.
pub fn resize_pad(img: &ImageGrid, target: (usize, usize)) -> Result<ImageGrid> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::InvalidTarget(th, tw));
    }
    let (h, w) = img.shape();
    if (h, w) == (th, tw) {
        return Ok(img.clone());
    }
    let scale = (th as f64 / h as f64).min(tw as f64 / w as f64);
    let nh = ((h as f64 * scale).round() as usize).clamp(1, th);
    let nw = ((w as f64 * scale).round() as usize).clamp(1, tw);
    let content = bilinear(&img.pixels, nh, nw);
    let top = (th - nh) / 2;
    let left = (tw - nw) / 2;
    let mut out = Array2::from_elem((th, tw), img.value_range.0);
    out.slice_mut(ndarray::s![top..top + nh, left..left + nw])
        .assign(&content);
    Ok(ImageGrid {
        pixels: out,
        modality: img.modality,
        value_range: img.value_range,
    })
}

/// Half-pixel-centred bilinear resampling with edge clamping.
pub(crate) fn bilinear(src: &Array2<f64>, nh: usize, nw: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let sy = h as f64 / nh as f64;
    let sx = w as f64 / nw as f64;
    Array2::from_shape_fn((nh, nw), |(i, j)| {
        let y = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let x = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}
