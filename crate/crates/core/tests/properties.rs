use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use proptest::prelude::*;

use maskgan::artifacts::load_png16;
use maskgan::eval::{self, SsimParams};
use maskgan::generator::{compose, AttentionMaskSet, ContentStack, Generator};
use maskgan::grid::{normalize, ImageGrid, Modality, CT_WIDTH};
use maskgan::losses;
use maskgan::mask::{
    binarize, deform_mask, extract_coarse_mask, label_components, morphological_open, unit_normalize, CoarseMask,
    Connectivity, DisplacementField, MaskSource,
};
use maskgan::nn::scalar;
use maskgan::phantom::make_dataset;
use maskgan::study::emit_figure_bundle;
use maskgan::train::{self, RunOptions, TrainingData};
use maskgan::{AdversarialMode, NetworkSpec, RunConfig};

fn grid_strategy(max: usize) -> impl Strategy<Value = Array2<f64>> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| {
        prop::collection::vec(-1.0f64..1.0, h * w).prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
    })
}

fn mask_strategy(max: usize) -> impl Strategy<Value = Array2<bool>> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| {
        prop::collection::vec(any::<bool>(), h * w).prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
    })
}

/// Two real grids of one random shape.
fn grid_pair(max: usize) -> impl Strategy<Value = (Array2<f64>, Array2<f64>)> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| {
        let g = move || prop::collection::vec(-1.0f64..1.0, h * w).prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap());
        (g(), g())
    })
}

/// Two real grids and two binary grids of one random shape.
fn mixed_quad(max: usize) -> impl Strategy<Value = (Array2<f64>, Array2<f64>, Array2<bool>, Array2<bool>)> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| {
        let g = move || prop::collection::vec(-1.0f64..1.0, h * w).prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap());
        let m = move || prop::collection::vec(any::<bool>(), h * w).prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap());
        (g(), g(), m(), m())
    })
}

fn t4(a: &Array2<f64>) -> Tensor {
    let (h, w) = a.dim();
    Tensor::from_vec(a.iter().copied().collect::<Vec<_>>(), (1, 1, h, w), &Device::Cpu).unwrap()
}

fn ct(pixels: Array2<f64>) -> ImageGrid {
    ImageGrid::new(pixels, Modality::Ct, (-1000.0, 2000.0)).unwrap()
}

fn s(t: Tensor) -> f64 {
    scalar(&t).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 200,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn extracted_mask_is_binary_and_single_component(img in grid_strategy(20)) {
        let g = ImageGrid::new(img.mapv(|v| 500.0 * (v + 1.0)), Modality::PhantomMr, (0.0, 1000.0)).unwrap();
        if let Ok(m) = extract_coarse_mask(&g) {
            let (_, sizes) = label_components(&m.pixels, Connectivity::Eight);
            prop_assert_eq!(sizes.len(), 1);
            prop_assert_eq!(m.source, MaskSource::Extracted);
        }
    }

    #[test]
    fn binarize_after_normalize_ignores_affine_rescaling(
        v in prop::collection::vec(0u32..1000, 1..200),
        k in -4i32..8,
        offset in -5000i32..5000,
        th in 0.01f64..0.99,
    ) {
        // Dyadic scales and integer offsets keep the rescaling exact in floating point.
        let n = v.len();
        let a = Array2::from_shape_vec((1, n), v.iter().map(|&x| x as f64).collect()).unwrap();
        let scale = 2f64.powi(k);
        let b = a.mapv(|x| x * scale + offset as f64);
        let g = |p: Array2<f64>| ImageGrid { pixels: p, modality: Modality::PhantomMr, value_range: (0.0, 1.0) };
        let ba = binarize(&unit_normalize(&g(a)), th).unwrap();
        let bb = binarize(&unit_normalize(&g(b)), th).unwrap();
        prop_assert_eq!(ba, bb);
    }

    #[test]
    fn opening_is_idempotent(m in mask_strategy(16), r in 1usize..3) {
        let once = morphological_open(&m, r);
        prop_assert_eq!(morphological_open(&once, r), once);
    }

    #[test]
    fn zero_field_deformation_is_identity(m in mask_strategy(16)) {
        let mask = CoarseMask::new(m.clone(), MaskSource::Extracted);
        let out = deform_mask(&mask, &DisplacementField::zeros(m.dim())).unwrap();
        prop_assert_eq!(out.pixels, m);
    }

    #[test]
    fn compose_is_convex_in_contents(
        n in 2usize..6,
        side in 1usize..8,
        alpha in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut maps = Array3::from_shape_fn((n, side, side), |_| rng.gen_range(0.01..1.0));
        let sums = maps.sum_axis(ndarray::Axis(0));
        for mut ch in maps.outer_iter_mut() {
            ch /= &sums;
        }
        let masks = AttentionMaskSet::new(maps).unwrap();
        let input = ImageGrid::normalized(Array2::from_shape_fn((side, side), |_| rng.gen_range(-1.0..1.0)), Modality::PhantomMr);
        let c1 = Array3::from_shape_fn((n - 1, side, side), |_| rng.gen_range(-1.0..1.0));
        let c2 = Array3::from_shape_fn((n - 1, side, side), |_| rng.gen_range(-1.0..1.0));
        let f = |c: Array3<f64>| compose(&input, &masks, &ContentStack { contents: c }).unwrap().pixels;
        let lhs = f(&c1 * alpha + &c2 * (1.0 - alpha));
        let rhs = f(c1) * alpha + f(c2) * (1.0 - alpha);
        for (x, y) in lhs.iter().zip(rhs.iter()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn losses_are_nonnegative_and_vanish_at_their_fixed_points((a, b) in grid_pair(6)) {
        let (ta, tb) = (t4(&a), t4(&b));
        for mode in [AdversarialMode::LeastSquares, AdversarialMode::VanillaLog] {
            prop_assert!(s(losses::generator_adversarial(&ta, mode).unwrap()) >= 0.0);
            prop_assert!(s(losses::discriminator_adversarial(&ta, &tb, mode).unwrap()) >= 0.0);
        }
        let ones = ta.ones_like().unwrap();
        prop_assert_eq!(s(losses::generator_adversarial(&ones, AdversarialMode::LeastSquares).unwrap()), 0.0);
        prop_assert!(s(losses::cycle_loss(&ta, &tb, &tb, &ta).unwrap()) >= 0.0);
        prop_assert_eq!(s(losses::cycle_loss(&ta, &ta, &tb, &tb).unwrap()), 0.0);
        prop_assert_eq!(s(losses::csc_loss(&ta, &ta, &tb, &tb).unwrap()), 0.0);
        let bin = t4(&a.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
        prop_assert_eq!(s(losses::mask_loss(&bin, &bin, &bin, &bin).unwrap()), 0.0);
    }

    #[test]
    fn mask_and_csc_are_symmetric_in_domains((a, b, ma, mb) in mixed_quad(6)) {
        let (ta, tb) = (t4(&a.mapv(|v| 0.5 * (v + 1.0))), t4(&b.mapv(|v| 0.5 * (v + 1.0))));
        let bin = |m: &Array2<bool>| t4(&m.mapv(|v| if v { 1.0 } else { 0.0 }));
        let (ba, bb) = (bin(&ma), bin(&mb));
        prop_assert_eq!(
            s(losses::mask_loss(&ta, &ba, &tb, &bb).unwrap()),
            s(losses::mask_loss(&tb, &bb, &ta, &ba).unwrap())
        );
        prop_assert_eq!(
            s(losses::csc_loss(&ta, &tb, &tb, &ta).unwrap()),
            s(losses::csc_loss(&tb, &ta, &ta, &tb).unwrap())
        );
    }

    #[test]
    fn mask_loss_grows_as_pixels_flip(m in mask_strategy(8)) {
        let target = m.mapv(|v| if v { 1.0 } else { 0.0 });
        let tt = t4(&target);
        let mut pred = target.clone();
        let mut last = s(losses::mask_loss(&t4(&pred), &tt, &tt, &tt).unwrap());
        for idx in ndarray::indices(pred.dim()) {
            pred[idx] = 1.0 - pred[idx];
            let now = s(losses::mask_loss(&t4(&pred), &tt, &tt, &tt).unwrap());
            prop_assert!(now >= last);
            last = now;
        }
    }

    #[test]
    fn metrics_are_symmetric((a, b) in grid_pair(16)) {
        let (ga, gb) = (ct(a.mapv(|v| 1500.0 * v + 500.0)), ct(b.mapv(|v| 1500.0 * v + 500.0)));
        prop_assert_eq!(eval::mae(&ga, &gb).unwrap(), eval::mae(&gb, &ga).unwrap());
        if a.dim().0 >= 11 && a.dim().1 >= 11 {
            let p = SsimParams::with_range(3000.0);
            let (x, y) = (eval::ssim(&ga, &gb, &p).unwrap(), eval::ssim(&gb, &ga, &p).unwrap());
            prop_assert!((x - y).abs() <= 1e-12);
            prop_assert!((-1.0..=1.0).contains(&x));
        }
    }

    #[test]
    fn normalized_mae_scales_to_hounsfield((a, b) in grid_pair(16)) {
        let (ga, gb) = (ct(a.mapv(|v| 1500.0 * v + 500.0)), ct(b.mapv(|v| 1500.0 * v + 500.0)));
        let hu = eval::mae(&ga, &gb).unwrap();
        let norm = eval::mae(&normalize(&ga).unwrap(), &normalize(&gb).unwrap()).unwrap();
        prop_assert!((norm * CT_WIDTH / 2.0 - hu).abs() <= 1e-6);
    }

    #[test]
    fn error_map_mean_equals_mae((a, b) in grid_pair(16)) {
        let (ga, gb) = (ct(a.mapv(|v| 1500.0 * v + 500.0)), ct(b.mapv(|v| 1500.0 * v + 500.0)));
        let map = eval::error_map(&ga, &gb).unwrap();
        let mean = map.pixels.iter().fold(0.0, |acc, v| acc + v) / map.pixels.len() as f64;
        prop_assert_eq!(mean, eval::mae(&ga, &gb).unwrap());
    }

    #[test]
    fn t_test_ignores_a_common_shift(
        d in prop::collection::vec(-10.0f64..10.0, 3..20),
        base in prop::collection::vec(-10.0f64..10.0, 20),
        shift in -100.0f64..100.0,
    ) {
        let a: Vec<f64> = d.iter().zip(&base).map(|(x, y)| x + y).collect();
        let b: Vec<f64> = base[..d.len()].to_vec();
        let (sa, sb): (Vec<f64>, Vec<f64>) = (a.iter().map(|v| v + shift).collect(), b.iter().map(|v| v + shift).collect());
        if let (Ok(x), Ok(y)) = (eval::paired_t_test(&a, &b), eval::paired_t_test(&sa, &sb)) {
            prop_assert!((x.t - y.t).abs() <= 1e-6 * x.t.abs().max(1.0));
            prop_assert!((x.p - y.p).abs() <= 1e-6);
        }
    }
}

#[test]
fn psnr_strictly_decreases_along_an_mse_ladder() {
    let gt = ct(Array2::from_shape_fn((16, 16), |(i, j)| (i * 16 + j) as f64));
    let mut last = f64::INFINITY;
    for step in 1..60 {
        let pred = ct(gt.pixels.mapv(|v| v + step as f64 * 7.5));
        let p = eval::psnr(&gt, &pred, 3000.0).unwrap();
        assert!(p < last, "step {step}: {p} !< {last}");
        last = p;
    }
}

#[test]
fn fuzz_corpus_masks_are_binary_and_connected() {
    let (train, test) = make_dataset(1000, 2.0, 31).unwrap();
    let mut seen = 0;
    for img in train.mr.iter().chain(&train.ct).chain(&test.mr).take(1000) {
        let m = extract_coarse_mask(img).unwrap();
        let (_, sizes) = label_components(&m.pixels, Connectivity::Eight);
        assert_eq!(sizes.len(), 1);
        seen += 1;
    }
    assert_eq!(seen, 1000);
}

#[test]
fn generator_masks_stay_on_the_simplex() {
    let spec = NetworkSpec {
        width: 4,
        n_down: 1,
        n_res: 1,
        outer_kernel: 3,
        disc_width: 4,
        disc_layers: 1,
    };
    for (k, n) in [2, 4, 10].into_iter().enumerate() {
        let g = Generator::with_init(&spec, n, k as u64, "g", DType::F32, 0.5).unwrap();
        let x = Tensor::randn(0f32, 1.0, (3, 1, 16, 16), &Device::Cpu).unwrap();
        let sums = g.forward(&x).unwrap().masks.sum(1).unwrap();
        let dev = (sums - 1.0)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(dev <= 1e-5, "N = {n}: {dev}");
    }
}

#[test]
fn figure_error_map_mean_matches_reported_mae() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        epochs: 1,
        decay_start_epoch: 1,
        net: NetworkSpec {
            width: 4,
            n_down: 1,
            n_res: 1,
            outer_kernel: 3,
            disc_width: 4,
            disc_layers: 1,
        },
        n_masks: 3,
        ..RunConfig::desk()
    };
    let (train_set, test) = make_dataset(30, 2.0, 12).unwrap();
    let data = TrainingData::from_dataset(&train_set).unwrap();
    let run = dir.path().join("run");
    train::train_run(&cfg, &data, &run, &RunOptions::default()).unwrap();
    let report = eval::evaluate_checkpoint(&run, &test).unwrap();
    let out = dir.path().join("figs");
    let slices = emit_figure_bundle(&run, &test, &out).unwrap();
    assert_eq!(slices.len(), test.len());
    for (i, slice) in slices.iter().enumerate() {
        let map = load_png16(&slice.join("error_map.png"), (0.0, CT_WIDTH)).unwrap();
        let mean = map.mean().unwrap();
        let mae = report.to_ct.per_slice[i].mae;
        assert!((mean - mae).abs() <= 0.05, "slice {i}: map mean {mean} vs mae {mae}");
    }
}
