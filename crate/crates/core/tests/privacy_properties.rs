use biasdp::autodiff::PerSampleGradients;
use biasdp::bias::{bias_vector, decompose};
use biasdp::dp::{clip, poisson_sample, private_oracle, PrivacyConfig, Purpose, RngStream};
use biasdp::models::{init_model, make_loss, Activation, LossKind, ModelSpec};
use biasdp::optim::{bao_loss, z_loss};
use biasdp::tensor::{norm2, Tensor};
use proptest::prelude::*;

fn rows_strategy(max_rows: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), 1..max_rows)
}

proptest! {
    #[test]
    fn clip_never_exceeds_bound(g in prop::collection::vec(-1e3f64..1e3, 1..20), c in 1e-3f64..10.0) {
        prop_assert!(norm2(&clip(&g, c)) <= c * (1.0 + 1e-12));
    }

    #[test]
    fn clip_keeps_direction_and_short_vectors(g in prop::collection::vec(-1.0f64..1.0, 1..10), c in 0.1f64..5.0) {
        let out = clip(&g, c);
        if norm2(&g) <= c {
            prop_assert_eq!(out, g);
        } else {
            let s = out[0] / g[0];
            for (a, b) in out.iter().zip(&g) {
                if b.abs() > 1e-9 {
                    prop_assert!((a / b - s).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn clipped_norm_is_monotone_in_bound(g in prop::collection::vec(-3.0f64..3.0, 1..10), c1 in 0.01f64..3.0, dc in 0.0f64..3.0) {
        prop_assert!(norm2(&clip(&g, c1)) <= norm2(&clip(&g, c1 + dc)) + 1e-12);
    }

    #[test]
    fn decomposition_reconstructs(rows in rows_strategy(8, 3), noise in prop::collection::vec(-1.0f64..1.0, 3)) {
        let psg = PerSampleGradients::from_rows(3, &rows).unwrap();
        let dec = decompose(&psg, 1.0, &noise, rows.len()).unwrap();
        prop_assume!(!dec.degenerate);
        let recon = dec.reconstruct().unwrap();
        let mut sum = [0.0; 3];
        for r in &rows {
            for (s, v) in sum.iter_mut().zip(clip(r, 1.0)) {
                *s += v;
            }
        }
        let priv_: Vec<f64> = sum.iter().zip(&noise).map(|(s, z)| (s + z) / rows.len() as f64).collect();
        let diff: Vec<f64> = recon.iter().zip(&priv_).map(|(a, b)| a - b).collect();
        prop_assert!(norm2(&diff) <= 1e-10 * norm2(&priv_).max(1e-300));
    }

    #[test]
    fn bias_is_zero_without_clipping(rows in prop::collection::vec(prop::collection::vec(-0.5f64..0.5, 2), 1..10)) {
        let psg = PerSampleGradients::from_rows(2, &rows).unwrap();
        prop_assert!(bias_vector(&psg, 1.0).unwrap().bias_norm <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn bao_upper_bounds_z(seed in 0u64..1000, lambda in 0.0f64..2.0, n in 1usize..6) {
        let spec = ModelSpec::new(vec![3, 4, 3], Activation::Tanh, seed);
        let theta = init_model(&spec).unwrap();
        let model = make_loss(&spec, LossKind::CrossEntropySoftmax).unwrap();
        let data: Vec<f64> = (0..n * 3).map(|i| ((seed as f64 + 1.0) * (i as f64 + 0.5)).sin()).collect();
        let y: Vec<usize> = (0..n).map(|i| (i + seed as usize) % 3).collect();
        let x = Tensor::new(vec![n, 3], data).unwrap();
        let b = bao_loss(&model, theta.values(), &x, &y, lambda).unwrap();
        let z = z_loss(&model, theta.values(), &x, &y, lambda).unwrap();
        prop_assert!(b >= z - 1e-12 * b.abs());
    }
}

#[test]
fn noise_is_unbiased_on_fixed_batch() {
    let d = 10;
    let l = 16;
    let rows: Vec<Vec<f64>> = (0..l).map(|i| (0..d).map(|j| ((i * d + j) as f64).cos() * 2.0).collect()).collect();
    let psg = PerSampleGradients::from_rows(d, &rows).unwrap();
    let cfg = PrivacyConfig::new(1.0, 1.0, l as f64 / 1000.0, 1000, 1e-5).unwrap();
    let draws = 20_000u64;
    let mut acc = vec![0.0; d];
    let mut clip_mean = Vec::new();
    for k in 0..draws {
        let est = private_oracle(&psg, &cfg, RngStream::new(3, k, Purpose::Noise)).unwrap();
        for (a, g) in acc.iter_mut().zip(&est.g_priv) {
            *a += g;
        }
        clip_mean = est.g_clip;
    }
    let tol = 4.0 / (l as f64 * (draws as f64).sqrt());
    for (a, c) in acc.iter().zip(&clip_mean) {
        assert!((a / draws as f64 - c).abs() <= tol);
    }
}

#[test]
fn poisson_batch_size_concentrates() {
    let (n, q) = (10_000, 0.05);
    let mut sizes = Vec::new();
    for t in 0..200 {
        let b = poisson_sample(n, q, RngStream::new(8, t, Purpose::Sampling)).unwrap();
        assert!(b.windows(2).all(|w| w[0] < w[1]));
        sizes.push(b.len() as f64);
    }
    let mean = sizes.iter().sum::<f64>() / sizes.len() as f64;
    let sd = (n as f64 * q * (1.0 - q)).sqrt();
    assert!((mean - n as f64 * q).abs() < 4.0 * sd / (sizes.len() as f64).sqrt());
}
