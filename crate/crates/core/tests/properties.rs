use mcfrcl::bnn::{Architecture, HeadMode, VariationalParams};
use mcfrcl::data::{encode_idx_images, parse_idx_images, ImageSet};
use mcfrcl::distributions::{
    fit_moments, w2_gaussian_multivariate, Divergence, Family, GaussianMultivariate, UnivariateFit,
};
use mcfrcl::metrics::{average_accuracy, backward_transfer, emit, RunReport};
use mcfrcl::trainer::{architecture_for, TrainConfig, Trainer};
use mcfrcl::{DiffArray, Tape};
use proptest::prelude::*;

fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

fn composite(a: &DiffArray, b: &DiffArray) -> DiffArray {
    // (rows, 3) x (3, 2) -> softplus -> exp/log mix -> scalar
    let h = a.matmul(b).unwrap().softplus();
    let g = h.mul(&h.add_scalar(1.0).log().unwrap()).unwrap();
    g.sum_axis(1).unwrap().square().mean()
}

fn fit(family: Family, loc: f64, scale: f64) -> UnivariateFit {
    UnivariateFit::new(family, loc, scale)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn smooth_composite_gradients_match_finite_differences(
        a in prop::collection::vec(-2.0f64..2.0, 6),
        b in prop::collection::vec(-2.0f64..2.0, 6),
    ) {
        let tape = Tape::new();
        let la = tape.leaf(&[2, 3], a.clone()).unwrap();
        let lb = tape.leaf(&[3, 2], b.clone()).unwrap();
        let grads = composite(&la, &lb).backward().unwrap();
        let ga = grads.wrt(&la);
        let bc = DiffArray::constant(&[3, 2], b.clone()).unwrap();
        let fd = central_difference(|x| composite(&DiffArray::constant(&[2, 3], x.to_vec()).unwrap(), &bc).item(), &a, 1e-6);
        for (g, f) in ga.iter().zip(&fd) {
            prop_assert!((g - f).abs() <= 1e-6 * (1.0 + f.abs()), "{g} vs {f}");
        }
    }

    #[test]
    fn divergences_are_non_negative_and_vanish_on_identity(
        l1 in -5.0f64..5.0, s1 in 0.05f64..5.0, l2 in -5.0f64..5.0, s2 in 0.05f64..5.0,
    ) {
        for d in Divergence::ALL {
            let f = d.family();
            let v = d.evaluate(&fit(f, l1, s1), &fit(f, l2, s2)).unwrap().item();
            prop_assert!(v >= -1e-12, "{d:?} gave {v}");
            let same = d.evaluate(&fit(f, l1, s1), &fit(f, l1, s1)).unwrap().item();
            prop_assert!(same.abs() < 1e-12);
        }
    }

    #[test]
    fn wasserstein_and_cauchy_kl_are_symmetric(
        l1 in -5.0f64..5.0, s1 in 0.05f64..5.0, l2 in -5.0f64..5.0, s2 in 0.05f64..5.0,
    ) {
        for d in [Divergence::Gw, Divergence::Ckl] {
            let f = d.family();
            let pq = d.evaluate(&fit(f, l1, s1), &fit(f, l2, s2)).unwrap().item();
            let qp = d.evaluate(&fit(f, l2, s2), &fit(f, l1, s1)).unwrap().item();
            prop_assert!((pq - qp).abs() <= 1e-12 * (1.0 + pq.abs()));
        }
    }

    #[test]
    fn multivariate_wasserstein_symmetric_on_full_covariances(
        dim in 1usize..5,
        seed in prop::collection::vec(-1.0f64..1.0, 50),
    ) {
        let gauss = |offset: usize| {
            let mean: Vec<f64> = seed[offset..offset + dim].to_vec();
            // A Aᵀ + 0.1 I is symmetric positive definite
            let a: Vec<f64> = (0..dim * dim).map(|i| seed[(offset + 5 + i) % seed.len()]).collect();
            let mut cov = vec![0.0; dim * dim];
            for i in 0..dim {
                for j in 0..dim {
                    cov[i * dim + j] = (0..dim).map(|k| a[i * dim + k] * a[j * dim + k]).sum::<f64>()
                        + if i == j { 0.1 } else { 0.0 };
                }
            }
            GaussianMultivariate::new(mean, cov).unwrap()
        };
        let (p, q) = (gauss(0), gauss(20));
        let pq = w2_gaussian_multivariate(&p, &q).unwrap();
        let qp = w2_gaussian_multivariate(&q, &p).unwrap();
        prop_assert!(pq >= -1e-9);
        prop_assert!((pq - qp).abs() <= 1e-8 * (1.0 + pq));
        prop_assert!(w2_gaussian_multivariate(&p, &p).unwrap().abs() < 1e-8);
    }

    #[test]
    fn fits_are_equivariant_under_shift_and_scale(
        xs in prop::collection::vec(-3.0f64..3.0, 2..40), shift in -10.0f64..10.0, scale in 0.1f64..10.0,
    ) {
        let n = xs.len();
        let base = DiffArray::constant(&[n, 1], xs.clone()).unwrap();
        let moved = DiffArray::constant(&[n, 1], xs.iter().map(|x| x * scale + shift).collect()).unwrap();
        for family in [Family::Gaussian, Family::Laplace, Family::Cauchy] {
            let a = fit_moments(&base, family).unwrap();
            let b = fit_moments(&moved, family).unwrap();
            let (la, sa) = (a.location.item(), a.scale.item());
            prop_assert!((b.location.item() - (la * scale + shift)).abs() < 1e-9);
            if sa > 1e-5 {
                prop_assert!((b.scale.item() - sa * scale).abs() < 1e-9 * (1.0 + sa * scale));
            }
        }
    }

    #[test]
    fn idx_images_survive_encoding(
        rows in 1usize..6, cols in 1usize..6, count in 0usize..4, bytes in prop::collection::vec(any::<u8>(), 150),
    ) {
        let pixels: Vec<f64> = bytes.iter().take(rows * cols * count).map(|&b| b as f64 / 255.0).collect();
        prop_assume!(pixels.len() == rows * cols * count);
        let set = ImageSet { rows, cols, pixels };
        prop_assert_eq!(parse_idx_images(&encode_idx_images(&set)).unwrap(), set);
    }

    #[test]
    fn report_metrics_are_bounded_and_match_emitted_files(
        cells in prop::collection::vec(0.0f64..=1.0, 10), tasks in 2usize..5,
    ) {
        let mut it = cells.iter().copied().cycle();
        let accuracy: Vec<Vec<f64>> = (0..tasks).map(|t| (0..=t).map(|_| it.next().unwrap()).collect()).collect();
        let report = RunReport { accuracy, epochs: vec![], config_echo: "{}".into(), seed: 0 };
        let bt = backward_transfer(&report).unwrap();
        prop_assert!((-1.0..=1.0).contains(&bt));

        let dir = tempfile::tempdir().unwrap();
        let files = emit(&report, dir.path(), false).unwrap();
        let matrix = std::fs::read_to_string(&files.accuracy_matrix).unwrap();
        let last: Vec<f64> = matrix
            .lines()
            .skip(1)
            .filter_map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                (f[0] == tasks.to_string()).then(|| f[2].parse::<f64>().unwrap())
            })
            .collect();
        let recomputed = last.iter().sum::<f64>() / last.len() as f64;
        let summary = std::fs::read_to_string(&files.summary).unwrap();
        let avg: f64 = summary.lines().nth(1).unwrap().split(',').next().unwrap().parse().unwrap();
        prop_assert!((avg - recomputed).abs() <= 1e-12);
        prop_assert!((avg - average_accuracy(&report).unwrap() * 100.0).abs() <= 1e-12);
    }
}

#[test]
fn frozen_model_has_zero_backward_transfer() {
    let diag = [0.7, 0.9, 0.85];
    let accuracy = (0..3).map(|t| diag[..=t].to_vec()).collect();
    let report = RunReport {
        accuracy,
        epochs: vec![],
        config_echo: "{}".into(),
        seed: 0,
    };
    assert_eq!(backward_transfer(&report).unwrap(), 0.0);
}

#[test]
fn heads_are_isolated_without_regularisation() {
    let tasks = mcfrcl::data::make_synthetic_split(&mcfrcl::data::SyntheticSpec {
        tasks: 2,
        train_per_task: 16,
        test_per_task: 4,
        ..Default::default()
    })
    .unwrap()
    .tasks;
    let config = TrainConfig {
        lambda: 0.0,
        head_mode: HeadMode::Multi,
        hidden: vec![8],
        likelihood_samples: 2,
        ..Default::default()
    };
    let arch = architecture_for(&tasks, &config.hidden, HeadMode::Multi).unwrap();
    let trainer = Trainer::new(arch, config).unwrap();
    let inputs = tasks[1].train.input_array();
    let (_, grads) = trainer
        .loss_and_gradients(&inputs, &tasks[1].train.labels, 1, 3)
        .unwrap();
    let names: Vec<&str> = trainer.params().blocks().iter().map(|b| b.name.as_str()).collect();
    for (name, g) in names.iter().zip(&grads) {
        let touched = g.iter().any(|v| *v != 0.0);
        if name.starts_with("head0") {
            assert!(!touched, "{name} received gradient from task 1");
        } else {
            assert!(touched, "{name} received no gradient");
        }
    }
}

#[test]
fn parameters_round_trip_through_files() {
    let arch = Architecture::new(3, vec![4, 5], vec![2, 2]).unwrap();
    let params = VariationalParams::init(&arch, 0.05, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("model");
    params.save(&stem).unwrap();
    assert_eq!(VariationalParams::load(&stem).unwrap(), params);
}

#[test]
fn same_seed_same_initialisation_and_predictions() {
    let arch = Architecture::new(2, vec![6], vec![3]).unwrap();
    let a = VariationalParams::init(&arch, 0.05, 4).unwrap();
    let b = VariationalParams::init(&arch, 0.05, 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, VariationalParams::init(&arch, 0.05, 5).unwrap());
    let x = DiffArray::constant(&[2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let pa = a.constant_view().predict_mc(&x, 0, 4, 11).unwrap();
    let pb = b.constant_view().predict_mc(&x, 0, 4, 11).unwrap();
    assert_eq!(pa, pb);
}
