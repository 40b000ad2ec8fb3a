//! Training objectives: adversarial, cycle reconstruction, mask supervision,
//! cycle shape consistency, and their weighted sum.
//!
//! Every L1 term is a mean over all elements of one domain; the two domains
//! are then summed.

use candle_core::Tensor;

use crate::config::{AdversarialMode, LossWeights};
use crate::error::{Error, Result};
use crate::nn::scalar;

/// Scalar values of one step. The raw terms are unweighted; `total` is the
/// generator objective `adv_g + l_cycle*cycle + l_mask*mask + l_shape*shape`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBundle {
    pub adv_g: f64,
    pub adv_d: f64,
    pub cycle: f64,
    pub mask: f64,
    pub shape: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn from_raw(
        adv_g: f64,
        adv_d: f64,
        cycle: f64,
        mask: f64,
        shape: f64,
        w: &LossWeights,
    ) -> Result<Self> {
        let total = weighted_sum(adv_g, &[(w.lambda_cycle, cycle), (w.lambda_mask, mask), (w.lambda_shape, shape)]);
        let b = Self {
            adv_g,
            adv_d,
            cycle,
            mask,
            shape,
            total,
        };
        b.check_finite()?;
        Ok(b)
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !v.is_finite() {
                return Err(Error::NonFinite(name.to_string()));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("adv_g", self.adv_g),
            ("adv_d", self.adv_d),
            ("cycle", self.cycle),
            ("mask", self.mask),
            ("shape", self.shape),
            ("total", self.total),
        ]
    }
}

fn weighted_sum(base: f64, terms: &[(f64, f64)]) -> f64 {
    terms
        .iter()
        .filter(|(w, _)| *w != 0.0)
        .fold(base, |acc, (w, v)| acc + w * v)
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(a.dims().to_vec(), b.dims().to_vec()));
    }
    Ok(())
}

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b)?;
    Ok((a - b)?.abs()?.mean_all()?)
}

/// `log(1 + exp(z))`, stable for large `|z|`.
fn softplus(z: &Tensor) -> Result<Tensor> {
    let tail = (z.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((z.relu()? + tail)?)
}

fn finite_or(name: &str, t: Tensor) -> Result<Tensor> {
    if scalar(&t)?.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

/// Generator side of the adversarial objective on raw patch scores of
/// synthetic images.
///
/// Least squares: `mean((s - 1)^2)`. Log form: the non-saturating
/// `-mean(log D)` with `D = sigmoid(s)`.
pub fn generator_adversarial(fake_scores: &Tensor, mode: AdversarialMode) -> Result<Tensor> {
    let t = match mode {
        AdversarialMode::LeastSquares => (fake_scores - 1.0)?.sqr()?.mean_all()?,
        AdversarialMode::VanillaLog => softplus(&fake_scores.neg()?)?.mean_all()?,
    };
    finite_or("adv_g", t)
}

/// Discriminator side. Least squares: `mean((r - 1)^2) + mean(f^2)`.
/// Log form: `-(mean log D(r) + mean log(1 - D(f)))`, the negated two-expectation objective.
pub fn discriminator_adversarial(
    real_scores: &Tensor,
    fake_scores: &Tensor,
    mode: AdversarialMode,
) -> Result<Tensor> {
    let t = match mode {
        AdversarialMode::LeastSquares => {
            ((real_scores - 1.0)?.sqr()?.mean_all()? + fake_scores.sqr()?.mean_all()?)?
        }
        AdversarialMode::VanillaLog => {
            (softplus(&real_scores.neg()?)?.mean_all()? + softplus(fake_scores)?.mean_all()?)?
        }
    };
    finite_or("adv_d", t)
}

/// Both adversarial terms from one pair of score grids: `(gen_term, disc_term)`.
pub fn adversarial_loss(
    real_scores: &Tensor,
    fake_scores: &Tensor,
    mode: AdversarialMode,
) -> Result<(Tensor, Tensor)> {
    let g = generator_adversarial(fake_scores, mode)?;
    let d = discriminator_adversarial(real_scores, &fake_scores.detach(), mode)?;
    Ok((g, d))
}

/// `mean|x - G(F(x))| + mean|y - F(G(y))|`.
pub fn cycle_loss(x: &Tensor, recon_x: &Tensor, y: &Tensor, recon_y: &Tensor) -> Result<Tensor> {
    Ok((mean_abs_diff(x, recon_x)? + mean_abs_diff(y, recon_y)?)?)
}

fn check_binary(t: &Tensor) -> Result<()> {
    // b * (1 - b) vanishes exactly on {0, 1}.
    let off = scalar(&(t * (1.0 - t)?)?.abs()?.sum_all()?)?;
    if off == 0.0 {
        Ok(())
    } else {
        Err(Error::NotBinary)
    }
}

/// L1 between learned background maps and coarse background masks, both domains.
pub fn mask_loss(
    a_mr_bg: &Tensor,
    b_mr_bg: &Tensor,
    a_ct_bg: &Tensor,
    b_ct_bg: &Tensor,
) -> Result<Tensor> {
    check_same_shape(a_mr_bg, b_mr_bg)?;
    check_same_shape(a_ct_bg, b_ct_bg)?;
    check_binary(b_mr_bg)?;
    check_binary(b_ct_bg)?;
    Ok((mean_abs_diff(a_mr_bg, b_mr_bg)? + mean_abs_diff(a_ct_bg, b_ct_bg)?)?)
}

/// L1 between the background map of a real input and the background map the
/// opposite generator computes on its translation, both directions.
pub fn csc_loss(
    a_mr_bg: &Tensor,
    a_tilde_ct_bg: &Tensor,
    a_ct_bg: &Tensor,
    a_tilde_mr_bg: &Tensor,
) -> Result<Tensor> {
    Ok((mean_abs_diff(a_mr_bg, a_tilde_ct_bg)? + mean_abs_diff(a_ct_bg, a_tilde_mr_bg)?)?)
}

/// Generator-side terms of one step, each a scalar tensor.
pub struct LossTerms {
    pub adv_g: Tensor,
    pub cycle: Tensor,
    pub mask: Tensor,
    pub shape: Tensor,
}

/// `adv_g + l_cycle*cycle + l_mask*mask + l_shape*shape`; zero-weighted
/// terms are left out of the graph entirely.
pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> Result<Tensor> {
    let mut total = terms.adv_g.clone();
    for (lambda, t) in [
        (w.lambda_cycle, &terms.cycle),
        (w.lambda_mask, &terms.mask),
        (w.lambda_shape, &terms.shape),
    ] {
        if lambda != 0.0 {
            total = (total + (t * lambda)?)?;
        }
    }
    finite_or("total", total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, DType};

    fn full(v: f64, shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::full(v, shape, &Device::Cpu).unwrap()
    }

    fn s(t: &Tensor) -> f64 {
        scalar(t).unwrap()
    }

    const SHAPE: (usize, usize, usize, usize) = (2, 1, 4, 4);

    #[test]
    fn least_squares_closed_forms() {
        let ones = full(1.0, SHAPE);
        assert_eq!(s(&generator_adversarial(&ones, AdversarialMode::LeastSquares).unwrap()), 0.0);
        let half = full(0.5, SHAPE);
        let g = s(&generator_adversarial(&half, AdversarialMode::LeastSquares).unwrap());
        assert!((g - 0.25).abs() < 1e-12);
        let zeros = full(0.0, SHAPE);
        let d = s(&discriminator_adversarial(&ones, &zeros, AdversarialMode::LeastSquares).unwrap());
        assert_eq!(d, 0.0);
    }

    #[test]
    fn log_form_at_even_odds() {
        // Raw score 0 means D = sigmoid(0) = 0.5.
        let z = full(0.0, SHAPE);
        let d = s(&discriminator_adversarial(&z, &z, AdversarialMode::VanillaLog).unwrap());
        let objective = -d;
        assert!((objective - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        let g = s(&generator_adversarial(&z, AdversarialMode::VanillaLog).unwrap());
        assert!((g - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn log_form_is_stable_for_large_scores() {
        let big = full(80.0, SHAPE);
        let g = s(&generator_adversarial(&big, AdversarialMode::VanillaLog).unwrap());
        assert!(g >= 0.0 && g < 1e-30);
        let d = s(&discriminator_adversarial(&big, &big.neg().unwrap(), AdversarialMode::VanillaLog).unwrap());
        assert!(d.is_finite() && d < 1e-30);
    }

    #[test]
    fn non_finite_scores_are_rejected() {
        let bad = full(f64::NAN, SHAPE);
        assert!(matches!(
            generator_adversarial(&bad, AdversarialMode::LeastSquares),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn cycle_closed_forms() {
        let x = Tensor::randn(0.0, 1.0, SHAPE, &Device::Cpu).unwrap().to_dtype(DType::F64).unwrap();
        let y = (x.clone() * 0.5).unwrap();
        assert_eq!(s(&cycle_loss(&x, &x, &y, &y).unwrap()), 0.0);
        let off = (&x + 0.1).unwrap();
        assert!((s(&cycle_loss(&x, &off, &y, &y).unwrap()) - 0.1).abs() < 1e-12);
        let up = (&x + 0.2).unwrap();
        let down = (&y - 0.2).unwrap();
        assert!((s(&cycle_loss(&x, &up, &y, &down).unwrap()) - 0.4).abs() < 1e-12);
        let other = full(0.0, (2, 1, 4, 5));
        assert!(matches!(cycle_loss(&x, &other, &y, &y), Err(Error::ShapeMismatch(..))));
    }

    fn half_mask() -> Tensor {
        let v: Vec<f64> = (0..32).map(|i| if i % 2 == 0 { 0.0 } else { 1.0 }).collect();
        Tensor::from_vec(v, SHAPE, &Device::Cpu).unwrap()
    }

    #[test]
    fn mask_closed_forms() {
        let b = half_mask();
        assert_eq!(s(&mask_loss(&b, &b, &b, &b).unwrap()), 0.0);
        let half = full(0.5, SHAPE);
        assert!((s(&mask_loss(&half, &b, &b, &b).unwrap()) - 0.5).abs() < 1e-12);
        let inv = (1.0 - &b).unwrap();
        assert!((s(&mask_loss(&inv, &b, &inv, &b).unwrap()) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn mask_requires_binary_target() {
        let half = full(0.5, SHAPE);
        let b = half_mask();
        assert!(matches!(mask_loss(&b, &half, &b, &b), Err(Error::NotBinary)));
    }

    #[test]
    fn csc_closed_forms() {
        let a = half_mask();
        assert_eq!(s(&csc_loss(&a, &a, &a, &a).unwrap()), 0.0);
        // Disagree on 10 of 100 pixels in each direction.
        let base: Vec<f64> = (0..100).map(|i| if i < 50 { 1.0 } else { 0.0 }).collect();
        let moved: Vec<f64> = (0..100).map(|i| if (5..55).contains(&i) { 1.0 } else { 0.0 }).collect();
        let t = |v: Vec<f64>| Tensor::from_vec(v, (1, 1, 10, 10), &Device::Cpu).unwrap();
        let (a, at) = (t(base), t(moved));
        let one_way = s(&csc_loss(&a, &at, &a, &a).unwrap());
        assert!((one_way - 0.1).abs() < 1e-12);
        assert!((s(&csc_loss(&a, &at, &a, &at).unwrap()) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn weighted_total() {
        let w = LossWeights::default();
        let b = LossBundle::from_raw(0.25, 0.0, 0.3, 0.1, 0.05, &w).unwrap();
        assert!((b.total - 3.4).abs() < 1e-12);
        let c = LossBundle::from_raw(0.25, 0.0, 0.3, 0.1, 0.05, &LossWeights::cyclegan()).unwrap();
        assert_eq!(c.total, 0.25 + 10.0 * 0.3);
        let m = LossBundle::from_raw(0.25, 0.0, 0.3, 0.1, 0.05, &LossWeights::without_shape()).unwrap();
        assert_eq!(m.total, 0.25 + 10.0 * 0.3 + 0.1);
        assert!(matches!(
            LossBundle::from_raw(f64::INFINITY, 0.0, 0.0, 0.0, 0.0, &w),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn tensor_total_matches_scalar_total() {
        let mk = |v: f64| Tensor::new(v, &Device::Cpu).unwrap();
        let terms = LossTerms {
            adv_g: mk(0.25),
            cycle: mk(0.3),
            mask: mk(0.1),
            shape: mk(0.05),
        };
        for w in [LossWeights::default(), LossWeights::cyclegan(), LossWeights::without_shape()] {
            let t = s(&total_loss(&terms, &w).unwrap());
            let b = LossBundle::from_raw(0.25, 0.0, 0.3, 0.1, 0.05, &w).unwrap();
            assert_eq!(t, b.total);
        }
    }
}
