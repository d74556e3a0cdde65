use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vadet_core::losses::{
    composite_fp, composite_fr, gradient_loss, motion_diff_loss, motion_diff_loss_masked, prediction_loss,
    recon_loss, ssim, ssim_loss, MOTION_EPS, MOTION_WEIGHT,
};
use vadet_core::Error;
use vadet_tensor::gradcheck::GradCheck;
use vadet_tensor::{Tape, Tensor};

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn eval2(f: impl Fn(&Tape<f64>, vadet_tensor::Var, vadet_tensor::Var) -> vadet_core::Result<vadet_tensor::Var>, a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let t = Tape::new();
    let v = f(&t, t.constant(a.clone()), t.constant(b.clone())).unwrap();
    t.value(v).item()
}

#[test]
fn prediction_loss_closed_forms() {
    let i = rand(&[1, 1, 6, 7], 1);
    assert_eq!(eval2(prediction_loss, &i, &i), 0.0);
    let zero = Tensor::zeros(&[1, 1, 6, 7]);
    let half = Tensor::full(&[1, 1, 6, 7], 0.5);
    assert!((eval2(prediction_loss, &zero, &half) - 0.5 * 42f64.sqrt()).abs() < 1e-12);
}

#[test]
fn batched_losses_average_per_sample_values() {
    let a = rand(&[3, 2, 12, 12], 2);
    let b = rand(&[3, 2, 12, 12], 3);
    let item = |t: &Tensor<f64>, i: usize| {
        let n = t.numel() / 3;
        Tensor::new(vec![1, 2, 12, 12], t.data()[i * n..(i + 1) * n].to_vec()).unwrap()
    };
    for f in [prediction_loss::<f64>, recon_loss::<f64>, gradient_loss::<f64>] {
        let whole = eval2(f, &a, &b);
        let mean = (0..3).map(|i| eval2(f, &item(&a, i), &item(&b, i))).sum::<f64>() / 3.0;
        assert!((whole - mean).abs() < 1e-10);
    }
}

#[test]
fn recon_loss_cases() {
    let o = rand(&[1, 2, 5, 5], 4);
    assert_eq!(eval2(recon_loss, &o, &o), 0.0);
    let mut p = o.clone();
    p.data_mut()[17] += 1.0;
    assert!((eval2(recon_loss, &o, &p) - 1.0).abs() < 1e-12);
    let q = rand(&[1, 2, 5, 5], 5);
    let oracle = o.data().iter().zip(q.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    assert!((eval2(recon_loss, &o, &q) - oracle).abs() < 1e-12);
}

#[test]
fn gradient_loss_cases() {
    let i = rand(&[1, 1, 4, 5], 6);
    assert_eq!(eval2(gradient_loss, &i, &i), 0.0);
    let c1 = Tensor::full(&[1, 1, 4, 4], 0.3);
    let c2 = Tensor::full(&[1, 1, 4, 4], -0.8);
    assert_eq!(eval2(gradient_loss, &c1, &c2), 0.0);

    // 2×2 by hand: vertical pairs (0,0)-(1,0) and (0,1)-(1,1); horizontal
    // pairs (0,0)-(0,1) and (1,0)-(1,1).
    let a = [0.1, -0.4, 0.7, 0.2];
    let b = [0.5, 0.5, -0.3, 0.9];
    let term = |x: [f64; 2], y: [f64; 2]| ((x[0] - x[1]).abs() - (y[0] - y[1]).abs()).abs();
    let want = term([a[2], a[0]], [b[2], b[0]])
        + term([a[3], a[1]], [b[3], b[1]])
        + term([a[0], a[1]], [b[0], b[1]])
        + term([a[2], a[3]], [b[2], b[3]]);
    let ta = Tensor::new(vec![1, 1, 2, 2], a.to_vec()).unwrap();
    let tb = Tensor::new(vec![1, 1, 2, 2], b.to_vec()).unwrap();
    assert!((eval2(gradient_loss, &ta, &tb) - want).abs() < 1e-14);

    let t = Tape::<f64>::new();
    let thin = t.constant(Tensor::zeros(&[1, 1, 1, 5]));
    assert!(matches!(gradient_loss(&t, thin, thin), Err(Error::TooSmall { .. })));
}

/// Direct-summation SSIM: every window evaluated explicitly with a 2-D
/// Gaussian built from the radial formula.
fn ssim_oracle(x: &Tensor<f64>, y: &Tensor<f64>, range: f64) -> f64 {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let k = 11;
    let mut g = vec![0.0; k * k];
    for a in 0..k {
        for b in 0..k {
            let (da, db) = (a as f64 - 5.0, b as f64 - 5.0);
            g[a * k + b] = (-(da * da + db * db) / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    let total: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
    let mut acc = 0.0;
    let mut count = 0.0;
    for img in 0..n * c {
        let px = |t: &Tensor<f64>, i: usize, j: usize| t.data()[(img * h + i) * w + j];
        for i in 0..=h - k {
            for j in 0..=w - k {
                let (mut mx, mut my) = (0.0, 0.0);
                for a in 0..k {
                    for b in 0..k {
                        mx += g[a * k + b] * px(x, i + a, j + b);
                        my += g[a * k + b] * px(y, i + a, j + b);
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for a in 0..k {
                    for b in 0..k {
                        let (dx, dy) = (px(x, i + a, j + b) - mx, px(y, i + a, j + b) - my);
                        vx += g[a * k + b] * dx * dx;
                        vy += g[a * k + b] * dy * dy;
                        cov += g[a * k + b] * dx * dy;
                    }
                }
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1.0;
            }
        }
    }
    acc / count
}

#[test]
fn ssim_cases() {
    let o = rand(&[1, 2, 14, 13], 7);
    let l = |a: &Tensor<f64>, b: &Tensor<f64>| eval2(|t, x, y| ssim_loss(t, x, y, 2.0), a, b);
    assert!(l(&o, &o).abs() <= 1e-6);
    // zero-mean pattern against its negation
    let zm = Tensor::from_fn(&[1, 1, 16, 16], |i| if (i / 16 + i % 16) % 2 == 0 { 0.5 } else { -0.5 });
    assert!(l(&zm, &zm.map(|v| -v)) > 1.0);

    let p = rand(&[2, 2, 14, 13], 8);
    let o2 = rand(&[2, 2, 14, 13], 9);
    let got = eval2(|t, x, y| ssim(t, x, y, 2.0), &o2, &p);
    assert!((got - ssim_oracle(&o2, &p, 2.0)).abs() <= 1e-6);

    let t = Tape::<f64>::new();
    let small = t.constant(Tensor::zeros(&[1, 1, 10, 20]));
    assert!(matches!(ssim_loss(&t, small, small, 2.0), Err(Error::TooSmall { min: 11, .. })));
}

#[test]
fn motion_difference_cases() {
    let o = rand(&[1, 2, 4, 4], 10);
    let prev = rand(&[1, 2, 4, 4], 11);
    let t = Tape::new();
    let (ov, pv) = (t.constant(o.clone()), t.constant(prev.clone()));
    let exact = motion_diff_loss(&t, ov, ov, pv).unwrap();
    assert_eq!(t.value(exact).item(), 0.001);
    assert_eq!(MOTION_EPS, 0.001);

    // ‖M‖ = 3 (one element differs by 3 from prev), ‖M̂‖ = 0 (prediction equals prev)
    let zero = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
    let mut target = zero.clone();
    target.data_mut()[5] = 3.0;
    let v = motion_diff_loss(&t, t.constant(target), t.constant(zero.clone()), t.constant(zero)).unwrap();
    assert!((t.value(v).item() - (9.0f64 + 1e-6).sqrt()).abs() < 1e-14);

    // finite gradient exactly at the kink
    let leaf = t.leaf(o.clone());
    let kink = motion_diff_loss(&t, ov, leaf, pv).unwrap();
    let g = t.backward(kink).unwrap();
    assert!(g.wrt(leaf).unwrap().all_finite());
}

#[test]
fn motion_difference_mask_skips_clip_starts() {
    let o = rand(&[2, 2, 4, 4], 12);
    let p = rand(&[2, 2, 4, 4], 13);
    let prev = rand(&[2, 2, 4, 4], 14);
    let t = Tape::new();
    let (ov, pv, qv) = (t.constant(o), t.constant(p), t.constant(prev));
    assert!(motion_diff_loss_masked(&t, ov, pv, qv, &[false, false]).unwrap().is_none());
    let both = t.value(motion_diff_loss(&t, ov, pv, qv).unwrap()).item();
    let first = t.value(motion_diff_loss_masked(&t, ov, pv, qv, &[true, false]).unwrap().unwrap()).item();
    let second = t.value(motion_diff_loss_masked(&t, ov, pv, qv, &[false, true]).unwrap().unwrap()).item();
    assert!(((first + second) / 2.0 - both).abs() < 1e-14);
}

#[test]
fn composite_weights() {
    let t = Tape::<f64>::new();
    let z = t.constant(Tensor::scalar(0.0));
    let md = t.constant(Tensor::scalar(0.001));
    let (total, report) = composite_fr(&t, z, z, z, Some(md)).unwrap();
    assert!((t.value(total).item() - 1e-5).abs() < 1e-18);
    assert_eq!(MOTION_WEIGHT, 0.01);
    let weights: Vec<f64> = report.terms.iter().map(|x| x.1).collect();
    assert_eq!(weights, vec![1.0, 1.0, 1.0, 0.01]);

    let vals = [0.7, 0.2, 1.3, 4.0];
    let v: Vec<_> = vals.iter().map(|&x| t.constant(Tensor::scalar(x))).collect();
    let (_, fr) = composite_fr(&t, v[0], v[1], v[2], Some(v[3])).unwrap();
    assert_eq!(fr.total, ((0.7 + 0.2) + 1.3) + 0.01 * 4.0);
    let (_, fp) = composite_fp(&t, v[0], v[1], v[2]).unwrap();
    assert_eq!(fp.total, (0.7 + 0.2) + 1.3);
    assert_eq!(fp.terms.iter().map(|x| x.1).collect::<Vec<_>>(), vec![1.0, 1.0, 1.0]);
    assert_eq!(fp.get("l_gd"), Some(1.3));
    let (_, start) = composite_fr(&t, v[0], v[1], v[2], None).unwrap();
    assert_eq!(start.terms.len(), 3);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let gc = GradCheck::default();
    let a = rand(&[2, 1, 5, 6], 20);
    let b = rand(&[2, 1, 5, 6], 21);
    for (name, f) in [
        ("prediction", prediction_loss::<f64> as fn(&Tape<f64>, _, _) -> _),
        ("recon", recon_loss::<f64>),
        ("gradient", gradient_loss::<f64>),
    ] {
        let r = gc.run(&[a.clone(), b.clone()], |t, v| Ok(f(t, v[0], v[1]).unwrap())).unwrap();
        assert!(r.max_rel_err <= 1e-4, "{name}: {r:?}");
    }
    let fa = rand(&[1, 2, 12, 13], 22);
    let fb = rand(&[1, 2, 12, 13], 23);
    let r = gc
        .run(&[fa, fb], |t, v| Ok(ssim_loss(t, v[0], v[1], 2.0).unwrap()))
        .unwrap();
    assert!(r.max_rel_err <= 1e-4, "ssim: {r:?}");
}

#[test]
fn motion_gradient_w_r_t_prediction() {
    let o = rand(&[1, 2, 6, 6], 25);
    let prev = rand(&[1, 2, 6, 6], 26);
    let p = rand(&[1, 2, 6, 6], 27);
    let r = GradCheck::default()
        .run(&[p], |t, v| {
            Ok(motion_diff_loss(t, t.constant(o.clone()), v[0], t.constant(prev.clone())).unwrap())
        })
        .unwrap();
    assert!(r.max_rel_err <= 1e-4, "{r:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn losses_are_bounded_and_symmetric(seed: u64, h in 11usize..15, w in 11usize..15) {
        let a = rand(&[1, 2, h, w], seed);
        let b = rand(&[1, 2, h, w], seed.wrapping_add(1));
        let prev = rand(&[1, 2, h, w], seed.wrapping_add(2));
        for f in [prediction_loss::<f64> as fn(&Tape<f64>, _, _) -> _, recon_loss::<f64>, gradient_loss::<f64>] {
            let ab = eval2(f, &a, &b);
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - eval2(f, &b, &a)).abs() < 1e-12);
        }
        let sim = eval2(|t, x, y| ssim_loss(t, x, y, 2.0), &a, &b);
        prop_assert!((0.0..=2.0).contains(&sim));
        let t = Tape::new();
        let md = motion_diff_loss(&t, t.constant(a), t.constant(b), t.constant(prev)).unwrap();
        prop_assert!(t.value(md).item() >= MOTION_EPS);
    }
}
