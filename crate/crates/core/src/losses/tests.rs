use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{numerical_gradient, relative_error, FD_STEP};

fn rnd(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn ising_hand_enumerated_cases() {
    let pair = Tensor::new([1, 1, 2], vec![0.0, 1.0]).unwrap();
    assert_eq!(ising_loss(&pair, Neighborhood::FourConnected).unwrap(), 1.0);
    let checker = Tensor::new([1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    assert!((ising_loss(&checker, Neighborhood::FourConnected).unwrap() - 2.0).abs() < 1e-12);
    assert_eq!(ising_loss_oracle(&checker, Neighborhood::FourConnected).unwrap(), 2.0);
    // Eight-connected adds the two diagonal pairs, whose values agree.
    assert_eq!(ising_loss(&checker, Neighborhood::EightConnected).unwrap(), 2.0);
    for nb in [Neighborhood::FourConnected, Neighborhood::EightConnected] {
        assert_eq!(ising_loss(&Tensor::full([3, 5, 4], 0.7), nb).unwrap(), 0.0);
        assert_eq!(ising_loss_oracle(&Tensor::full([3, 1, 1], 0.7), nb).unwrap(), 0.0);
        assert_eq!(ising_loss(&rnd(&[3, 1, 1], 1), nb).unwrap(), 0.0);
    }
}

#[test]
fn ising_matches_oracle_on_random_inputs() {
    for seed in 0..20 {
        for nb in [Neighborhood::FourConnected, Neighborhood::EightConnected] {
            let img = rnd(&[3, 16, 16], seed);
            let fast = ising_loss(&img, nb).unwrap();
            let slow = ising_loss_oracle(&img, nb).unwrap();
            assert!((fast - slow).abs() <= 1e-6 * slow.abs(), "{fast} vs {slow}");
            let (with_grad, _) = ising_loss_grad(&img, nb).unwrap();
            assert!((with_grad - fast).abs() <= 1e-12 * fast);
        }
    }
    // Non-square images exercise the boundary handling of each offset.
    let img = rnd(&[2, 3, 7], 99);
    for nb in [Neighborhood::FourConnected, Neighborhood::EightConnected] {
        let (a, b) = (ising_loss(&img, nb).unwrap(), ising_loss_oracle(&img, nb).unwrap());
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn ising_shift_invariance_and_homogeneity() {
    let img = rnd(&[2, 6, 5], 3);
    let base = ising_loss(&img, Neighborhood::EightConnected).unwrap();
    let shifted = ising_loss(&img.map(|v| v + 3.5), Neighborhood::EightConnected).unwrap();
    let scaled = ising_loss(&img.scale(2.5), Neighborhood::EightConnected).unwrap();
    assert!((shifted - base).abs() < 1e-12);
    assert!((scaled - 2.5 * base).abs() < 1e-12);
}

#[test]
fn ising_rejects_non_finite() {
    let mut img = Tensor::zeros([1, 2, 2]);
    img.data_mut()[3] = f64::INFINITY;
    assert!(matches!(ising_loss(&img, Neighborhood::FourConnected), Err(Error::Numeric { .. })));
}

#[test]
fn charbonnier_cases() {
    let a = rnd(&[3, 4, 4], 4);
    assert!((charbonnier_loss(&a, &a, 0.001).unwrap() - 0.001).abs() < 1e-15);
    let b = a.map(|v| v + 0.1);
    let want = (0.01f64 + 1e-6).sqrt();
    assert!((charbonnier_loss(&a, &b, 0.001).unwrap() - want).abs() < 1e-12);
    let (_, g) = charbonnier_loss_grad(&a, &a, 0.001).unwrap();
    assert!(g.data().iter().all(|&v| v == 0.0));
    let c = rnd(&[3, 4, 4], 5);
    assert_eq!(charbonnier_loss(&a, &c, 0.01).unwrap(), charbonnier_loss(&c, &a, 0.01).unwrap());
    assert!(matches!(charbonnier_loss(&a, &rnd(&[3, 4, 5], 6), 0.001), Err(Error::Config(_))));
}

/// Laplacian via an explicitly padded copy and a 3×3 kernel loop.
fn laplacian_oracle(img: &Tensor) -> Tensor {
    let (c, h, w) = img.dims3().unwrap();
    let kernel = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];
    let mut out = Tensor::zeros([c, h, w]);
    for ch in 0..c {
        let mut padded = vec![vec![0.0; w + 2]; h + 2];
        for (py, row) in padded.iter_mut().enumerate() {
            for (px, v) in row.iter_mut().enumerate() {
                let y = (py as isize - 1).clamp(0, h as isize - 1) as usize;
                let x = (px as isize - 1).clamp(0, w as isize - 1) as usize;
                *v = img.get3(ch, y, x);
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (ky, krow) in kernel.iter().enumerate() {
                    for (kx, k) in krow.iter().enumerate() {
                        s += k * padded[y + ky][x + kx];
                    }
                }
                out.set3(ch, y, x, s);
            }
        }
    }
    out
}

#[test]
fn edge_cases_and_loop_oracle() {
    let a = rnd(&[3, 5, 6], 7);
    assert!((edge_loss(&a, &a, 0.001).unwrap() - 0.001).abs() < 1e-15);
    let k1 = Tensor::full([3, 5, 6], 0.2);
    let k2 = Tensor::full([3, 5, 6], 0.9);
    assert!((edge_loss(&k1, &k2, 0.001).unwrap() - 0.001).abs() < 1e-15);
    let b = rnd(&[3, 5, 6], 8);
    let la = laplacian_oracle(&a);
    let lb = laplacian_oracle(&b);
    let n = la.len() as f64;
    let want: f64 = la.data().iter().zip(lb.data()).map(|(x, y)| ((x - y).powi(2) + 1e-6).sqrt()).sum::<f64>() / n;
    assert!((edge_loss(&a, &b, 0.001).unwrap() - want).abs() < 1e-12);
}

/// Direct `O(N²)` DFT of `a − b` per channel; returns the mean magnitude.
fn naive_frequency_loss(a: &Tensor, b: &Tensor) -> f64 {
    let (c, h, w) = a.dims3().unwrap();
    let tau = std::f64::consts::TAU;
    let mut total = 0.0;
    for ch in 0..c {
        for u in 0..h {
            for v in 0..w {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let d = a.get3(ch, y, x) - b.get3(ch, y, x);
                        let theta = tau * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                        re += d * theta.cos();
                        im -= d * theta.sin();
                    }
                }
                total += re.hypot(im);
            }
        }
    }
    total / (c * h * w) as f64
}

#[test]
fn frequency_cases_and_naive_dft_oracle() {
    let a = rnd(&[3, 8, 8], 9);
    assert_eq!(frequency_loss(&a, &a).unwrap(), 0.0);
    let shifted = a.map(|v| v - 0.25);
    assert!((frequency_loss(&shifted, &a).unwrap() - 0.25).abs() < 1e-12);
    let b = rnd(&[3, 8, 8], 10);
    let fast = frequency_loss(&a, &b).unwrap();
    let slow = naive_frequency_loss(&a, &b);
    assert!((fast - slow).abs() <= 1e-6 * slow);
    assert!((fast - frequency_loss(&b, &a).unwrap()).abs() < 1e-12);
    // Non-power-of-two sizes.
    let (c, d) = (rnd(&[2, 5, 3], 11), rnd(&[2, 5, 3], 12));
    assert!((frequency_loss(&c, &d).unwrap() - naive_frequency_loss(&c, &d)).abs() < 1e-10);
}

#[test]
fn total_loss_cases() {
    let w = LossWeights::default();
    // The Ising term depends on the prediction alone, so it vanishes only on
    // a constant image.
    let flat = Tensor::full([3, 8, 8], 0.4);
    let r = total_loss(&flat, &flat, &w).unwrap();
    assert!((r.total - 0.00105).abs() < 1e-9);
    let a = rnd(&[3, 8, 8], 13);
    let r = total_loss(&a, &a, &w).unwrap();
    assert!((r.total - (0.00105 + r.ising)).abs() < 1e-9 && r.ising > 0.0);

    let only_c = LossWeights {
        lambda_freq: 0.0,
        delta_edge: 0.0,
        ising_weight: 0.0,
        ..w
    };
    let b = rnd(&[3, 8, 8], 14);
    let r = total_loss(&a, &b, &only_c).unwrap();
    assert_eq!(r.total, r.charbonnier);

    let r = total_loss(&a, &b, &w).unwrap();
    let recomputed = r.charbonnier + 0.05 * r.edge + 0.1 * r.frequency + r.ising;
    assert!((r.total - recomputed).abs() <= 1e-12 * r.total);
    let (rg, _) = total_loss_grad(&a, &b, &w).unwrap();
    assert!((rg.total - r.total).abs() <= 1e-12 * r.total);

    assert!(LossWeights { epsilon: 0.0, ..w }.validate().is_err());
    assert!(LossWeights { lambda_freq: -1.0, ..w }.validate().is_err());
}

fn assert_grad(f: impl Fn(&Tensor) -> f64, analytic: &Tensor, x: &Tensor) {
    let num = numerical_gradient(x, FD_STEP, |t| Ok(f(t))).unwrap();
    let err = relative_error(analytic.data(), num.data());
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn loss_gradients_match_finite_differences() {
    let a = rnd(&[3, 8, 8], 15).scale(0.3);
    let b = rnd(&[3, 8, 8], 16).scale(0.3);
    let eps = 0.001;
    assert_grad(|t| charbonnier_loss(t, &b, eps).unwrap(), &charbonnier_loss_grad(&a, &b, eps).unwrap().1, &a);
    assert_grad(|t| edge_loss(t, &b, eps).unwrap(), &edge_loss_grad(&a, &b, eps).unwrap().1, &a);
    assert_grad(|t| frequency_loss(t, &b).unwrap(), &frequency_loss_grad(&a, &b).unwrap().1, &a);
    for nb in [Neighborhood::FourConnected, Neighborhood::EightConnected] {
        assert_grad(|t| ising_loss(t, nb).unwrap(), &ising_loss_grad(&a, nb).unwrap().1, &a);
    }
    let w = LossWeights::default();
    assert_grad(|t| total_loss(t, &b, &w).unwrap().total, &total_loss_grad(&a, &b, &w).unwrap().1, &a);
}
