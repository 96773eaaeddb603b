mod common;

use catnerf::image::Image;
use catnerf::losses::*;
use common::*;
use numgrad::{fd_check, Graph, Tensor, TensorMap};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn m(n: usize, d: usize, v: &[f64]) -> Tensor {
    Tensor::matrix(n, d, v.to_vec()).unwrap()
}

#[test]
fn rgb_fixtures() {
    let a = m(2, 3, &[0.1, 0.2, 0.3, 0.9, 0.8, 0.7]);
    assert_eq!(l_rgb(&a, &a).unwrap(), 0.0);
    assert_eq!(l_rgb(&m(1, 3, &[1.0, 0.0, 0.0]), &m(1, 3, &[0.0; 3])).unwrap(), 1.0);
    assert_eq!(l_rgb(&a, &m(1, 3, &[0.0; 3])).unwrap_err().kind(), "invalid");
}

#[test]
fn nsf_fixtures() {
    assert_eq!(l_nsf(&m(1, 2, &[1.0, 0.0]), &m(1, 2, &[0.0, 1.0])).unwrap(), 2.0);
    let w = m(2, 2, &[0.3, 0.7, 0.5, 0.5]);
    assert_eq!(l_nsf(&w, &w).unwrap(), 0.0);
    assert!(l_nsf(&w, &m(2, 3, &[0.0; 6])).is_err());
}

#[test]
fn cov_fixtures() {
    assert_eq!(l_cov(&m(2, 2, &[1.0, 2.0, 1.0, 2.0])).unwrap(), 1.0);
    assert_eq!(l_cov(&m(2, 3, &[0.3, -1.0, 2.0, 4.0, 4.0, 4.0])).unwrap(), 0.0);
    assert_eq!(l_cov(&m(1, 3, &[0.0; 3])).unwrap_err().kind(), "invalid");
    assert!(l_cov(&m(3, 1, &[0.0; 3])).is_err());
}

#[test]
fn cov_vanishes_on_orthogonal_centered_rows() {
    // rows already centered and mutually orthogonal
    let psi = m(3, 4, &[1.0, -1.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0, 1.0]);
    assert!(l_cov(&psi).unwrap().abs() < 1e-15);
    // shifting a row keeps it orthogonal after centering
    let shifted = m(3, 4, &[4.0, 2.0, 4.0, 2.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0, 1.0]);
    assert!(l_cov(&shifted).unwrap().abs() < 1e-15);
    // any nonzero covariance shows up
    let bent = m(3, 4, &[1.0, -1.0, 1.0, -0.9, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0, 1.0]);
    assert!(l_cov(&bent).unwrap() > 0.0);
}

#[test]
fn cov_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let psi = random_matrix(&mut rng, 5, 16, -2.0, 2.0);
    assert!((l_cov(&psi).unwrap() - cov_oracle(&psi)).abs() < 1e-12);
}

#[test]
fn corr_fixtures() {
    let a = [0.5, -1.0, 2.0, 0.1];
    let same = m(2, 4, &[a, a].concat());
    let f = l_corr(&same).unwrap();
    assert!(!f.flagged && (f.value - 1.0).abs() < 1e-12);
    let c = [1.0, -2.0, 3.0, -2.0];
    let neg: Vec<f64> = c.iter().map(|v| -v).collect();
    assert!((l_corr(&m(2, 4, &[c.to_vec(), neg].concat())).unwrap().value + 1.0).abs() < 1e-12);
    let flat = l_corr(&m(2, 3, &[1.0, 2.0, 3.0, 5.0, 5.0, 5.0])).unwrap();
    assert_eq!(flat, Flagged { value: 0.0, flagged: true });
}

#[test]
fn corr_two_rows_is_pearson() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let d = rng.gen_range(2..16);
        let psi = random_matrix(&mut rng, 2, d, -3.0, 3.0);
        let (x, y) = (psi.row_slice(0), psi.row_slice(1));
        let (mx, my) = (x.iter().sum::<f64>() / d as f64, y.iter().sum::<f64>() / d as f64);
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        // the ε under the root moves the score by about r·ε/(2·sxx·syy)
        if sxx * syy < 1.0 {
            continue;
        }
        let r = sxy / (sxx * syy).sqrt();
        assert!((l_corr(&psi).unwrap().value - r).abs() < 1e-12);
    }
}

#[test]
fn corr_three_rows_matches_literal_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let psi = random_matrix(&mut rng, 3, 7, -1.0, 1.0);
    assert!((l_corr(&psi).unwrap().value - corr_oracle(&psi)).abs() < 1e-12);
}

#[test]
fn kld_fixtures() {
    // per column the rows are ±1 around the mean, so the fitted variance is 1
    let std = m(2, 3, &[1.0, -1.0, 1.0, -1.0, 1.0, -1.0]);
    assert!(l_kld(&std).unwrap().value.abs() < 1e-15);
    let shifted = m(2, 3, &[2.0, 0.0, 2.0, 0.0, 2.0, 0.0]);
    assert!((l_kld(&shifted).unwrap().value - 0.5).abs() < 1e-15);
    let flat = l_kld(&m(2, 2, &[1.0, 2.0, 1.0, 3.0])).unwrap();
    assert!(flat.flagged && flat.value.is_finite());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let psi = random_matrix(&mut rng, 8, 4, -2.0, 2.0);
    assert!((l_kld(&psi).unwrap().value - kld_oracle(&psi)).abs() < 1e-12);
}

#[test]
fn random_instances_match_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let (n, d) = (rng.gen_range(2..=8), rng.gen_range(2..=16));
        let psi = random_matrix(&mut rng, n, d, -2.0, 2.0);
        assert!((l_cov(&psi).unwrap() - cov_oracle(&psi)).abs() < 1e-10);
        assert!((l_corr(&psi).unwrap().value - corr_oracle(&psi)).abs() < 1e-10);
        assert!((l_kld(&psi).unwrap().value - kld_oracle(&psi)).abs() < 1e-10);
        let (p, t) = (random_matrix(&mut rng, n, 3, 0.0, 1.0), random_matrix(&mut rng, n, 3, 0.0, 1.0));
        assert!((l_rgb(&p, &t).unwrap() - rgb_oracle(&p, &t)).abs() < 1e-10);
        let (a, b) = (random_simplex(&mut rng, n, d), random_simplex(&mut rng, n, d));
        assert!((l_nsf(&a, &b).unwrap() - nsf_oracle(&a, &b)).abs() < 1e-10);
    }
}

#[test]
fn total_fixtures() {
    let w = LossWeights::default();
    let r = total(0.2, 0.3, 0.5, LossVariant::Cov, w).unwrap();
    assert!((r.total - 1.0).abs() < 1e-12);
    let none = total(0.2, 0.3, 0.5, LossVariant::None, w).unwrap();
    assert_eq!(none.total, 0.2 + 0.3);
    assert_eq!(none.decor, 0.0);
    let custom = LossWeights { rgb: 2.0, nsf: 0.5, decor: 3.0 };
    let r = total(0.2, 0.3, 0.5, LossVariant::Kld, custom).unwrap();
    assert!((r.total - (0.4 + 0.15 + 1.5)).abs() < 1e-12);
    assert!(total(-0.1, 0.0, 0.0, LossVariant::Cov, w).is_err());
    assert!(total(f64::NAN, 0.0, 0.0, LossVariant::Cov, w).is_err());
}

#[test]
fn variant_names_round_trip() {
    for v in LossVariant::ALL {
        assert_eq!(v.as_str().parse::<LossVariant>().unwrap(), v);
    }
    assert_eq!("l2".parse::<LossVariant>().unwrap_err().kind(), "unknown");
}

fn stand_alone_fd(build: impl Fn(&Graph, numgrad::Var) -> numgrad::Var, psi: Tensor) -> f64 {
    let mut params = TensorMap::new();
    params.insert("psi".into(), psi.with_grad());
    fd_check(|g| Ok(build(g, g.input("psi"))), &params, 1e-6).unwrap().max_rel_error
}

#[test]
fn loss_gradients_pass_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let psi = random_matrix(&mut rng, 4, 6, -1.0, 1.0);
    assert!(stand_alone_fd(|g, x| l_cov_graph(g, x, 4, 6), psi.clone()) < 1e-6);
    assert!(stand_alone_fd(l_corr_graph, psi.clone()) < 1e-6);
    assert!(stand_alone_fd(l_kld_graph, psi.clone()) < 1e-6);
    let truth = random_matrix(&mut rng, 5, 3, 0.0, 1.0);
    let pred = random_matrix(&mut rng, 5, 3, 0.0, 1.0);
    assert!(stand_alone_fd(|g, x| l_rgb_graph(g, x, g.constant(truth.clone())), pred) < 1e-6);
    let can = random_simplex(&mut rng, 5, 4);
    let obs = random_simplex(&mut rng, 5, 4);
    assert!(stand_alone_fd(|g, x| l_nsf_graph(g, x, g.constant(can.clone())), obs) < 1e-6);
}

fn image(w: usize, h: usize, f: impl Fn(usize, usize, usize) -> f64) -> Image {
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data.push(f(x, y, c));
            }
        }
    }
    Image::new(w, h, data).unwrap()
}

#[test]
fn psnr_fixtures() {
    let a = image(4, 4, |x, y, c| ((x + 2 * y + c) % 5) as f64 / 5.0);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), 99.0);
    let b = Image { data: a.data.iter().map(|v| v + 0.1).collect(), ..a.clone() };
    assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
    assert!(psnr(&a, &b, 0.0).is_err());
    assert!(psnr(&a, &image(2, 2, |_, _, _| 0.0), 1.0).is_err());
}

#[test]
fn psnr_matches_loop_and_drops_with_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = image(8, 6, |_, _, _| 0.5);
    let noise: Vec<f64> = (0..8 * 6 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut last = f64::INFINITY;
    for amp in [0.01, 0.02, 0.05, 0.1, 0.2, 0.4] {
        let b = Image { data: a.data.iter().zip(&noise).map(|(v, n)| v + amp * n).collect(), ..a.clone() };
        let mse: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data.len() as f64;
        let p = psnr(&a, &b, 1.0).unwrap();
        assert!((p - 10.0 * (1.0 / mse).log10()).abs() < 1e-9);
        assert!(p < last);
        last = p;
    }
}

/// Windowed SSIM written out in the luminance and contrast-structure form.
fn ssim_oracle(a: &Image, b: &Image) -> f64 {
    let (c1, c2) = (1e-4, 9e-4);
    let mut win = [[0.0; 11]; 11];
    let mut z = 0.0;
    for (j, row) in win.iter_mut().enumerate() {
        for (i, w) in row.iter_mut().enumerate() {
            let (dx, dy) = (i as f64 - 5.0, j as f64 - 5.0);
            *w = (-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5)).exp();
            z += *w;
        }
    }
    let mut total = 0.0;
    let (ow, oh) = (a.width - 10, a.height - 10);
    for c in 0..3 {
        for y in 0..oh {
            for x in 0..ow {
                let at = |img: &Image, i: usize, j: usize| img.pixel(x + i, y + j)[c];
                let mut mu = (0.0, 0.0);
                for j in 0..11 {
                    for i in 0..11 {
                        mu.0 += win[j][i] / z * at(a, i, j);
                        mu.1 += win[j][i] / z * at(b, i, j);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for j in 0..11 {
                    for i in 0..11 {
                        let (da, db) = (at(a, i, j) - mu.0, at(b, i, j) - mu.1);
                        va += win[j][i] / z * da * da;
                        vb += win[j][i] / z * db * db;
                        cov += win[j][i] / z * da * db;
                    }
                }
                let l = (2.0 * mu.0 * mu.1 + c1) / (mu.0 * mu.0 + mu.1 * mu.1 + c1);
                let cs = (2.0 * cov + c2) / (va + vb + c2);
                total += l * cs;
            }
        }
    }
    total / (3 * ow * oh) as f64
}

#[test]
fn ssim_fixtures() {
    let a = image(16, 16, |x, y, c| (0.5 + 0.4 * ((x as f64 * 0.7 + c as f64).sin() * (y as f64 * 0.3).cos())).clamp(0.0, 1.0));
    let b = image(16, 16, |x, y, c| (0.45 + 0.35 * ((x as f64 * 0.6 + 0.2 * c as f64).sin() * (y as f64 * 0.35).cos())).clamp(0.0, 1.0));
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let shifted = Image { data: a.data.iter().map(|v| v + 0.05).collect(), ..a.clone() };
    let s = ssim(&a, &shifted).unwrap();
    assert!(s < 1.0 && s > 0.0);
    assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-6);
    let small = image(10, 16, |_, _, _| 0.0);
    assert!(ssim(&small, &small).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cov_is_row_permutation_invariant(seed in 0u64..u64::MAX, n in 2usize..7, d in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let psi = random_matrix(&mut rng, n, d, -2.0, 2.0);
        let mut order: Vec<usize> = (0..n).collect();
        order.reverse();
        order.rotate_left(seed as usize % n);
        let permuted = Tensor::matrix(n, d, order.iter().flat_map(|&i| psi.row_slice(i).to_vec()).collect()).unwrap();
        prop_assert!((l_cov(&psi).unwrap() - l_cov(&permuted).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn cov_scales_quadratically(seed in 0u64..u64::MAX, alpha in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let psi = random_matrix(&mut rng, 4, 6, -1.0, 1.0);
        let scaled = Tensor::matrix(4, 6, psi.data().iter().map(|v| v * alpha).collect()).unwrap();
        let base = l_cov(&psi).unwrap();
        prop_assert!((l_cov(&scaled).unwrap() - alpha * alpha * base).abs() < 1e-12 * (1.0 + base));
    }

    #[test]
    fn report_terms_are_consistent(a in 0.0f64..10.0, b in 0.0f64..10.0, c in 0.0f64..10.0, v in 0usize..4) {
        let w = LossWeights { rgb: 0.7, nsf: 1.3, decor: 2.1 };
        let r = total(a, b, c, LossVariant::ALL[v], w).unwrap();
        prop_assert!((r.total - (w.rgb * r.l_rgb + w.nsf * r.l_nsf + w.decor * r.decor)).abs() < 1e-12);
        prop_assert!(r.l_rgb >= 0.0 && r.l_nsf >= 0.0 && r.decor >= 0.0);
    }
}
