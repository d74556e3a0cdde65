use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vadet_tensor::checkpoint::{load, save};
use vadet_tensor::{ParamStore, Tape, Tensor, TensorError};

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -2.0, 2.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Triple-loop reference.
fn matmul_ref(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_reference(m in 1usize..12, k in 1usize..12, n in 1usize..12, seed: u64) {
        let a = rand_tensor(&[m, k], seed);
        let b = rand_tensor(&[k, n], seed ^ 1);
        let t = Tape::new();
        let y = t.value(t.matmul(t.constant(a.clone()), t.constant(b.clone())).unwrap());
        prop_assert_eq!(y.shape(), &[m, n]);
        for (got, want) in y.data().iter().zip(matmul_ref(&a, &b)) {
            prop_assert!((got - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn permute_then_inverse_is_identity(d0 in 1usize..5, d1 in 1usize..5, d2 in 1usize..5, seed: u64) {
        let x = rand_tensor(&[d0, d1, d2], seed);
        let t = Tape::new();
        let p = t.permute(t.constant(x.clone()), &[2, 0, 1]).unwrap();
        prop_assert_eq!(t.shape(p), vec![d2, d0, d1]);
        let back = t.value(t.permute(p, &[1, 2, 0]).unwrap());
        prop_assert_eq!(back.data(), x.data());
    }

    #[test]
    fn broadcast_add_commutes(rows in 1usize..6, cols in 1usize..6, seed: u64) {
        let a = rand_tensor(&[rows, cols], seed);
        let b = rand_tensor(&[cols], seed ^ 2);
        let t = Tape::new();
        let (av, bv) = (t.constant(a), t.constant(b));
        let ab = t.value(t.add(av, bv).unwrap());
        let ba = t.value(t.add(bv, av).unwrap());
        prop_assert_eq!(ab.data(), ba.data());
    }

    #[test]
    fn pad_then_slice_recovers_input(len in 1usize..20, lo in 0usize..4, hi in 0usize..4, seed: u64) {
        let x = rand_tensor(&[2, len], seed);
        let t = Tape::new();
        let p = t.pad(t.constant(x.clone()), &[(0, 0), (lo, hi)]).unwrap();
        prop_assert_eq!(t.shape(p), vec![2, len + lo + hi]);
        let s = t.value(t.slice(p, 1, lo, lo + len).unwrap());
        prop_assert_eq!(s.data(), x.data());
    }
}

#[test]
fn checkpoint_file_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("params.vadet");
    let mut src = ParamStore::<f64>::new();
    src.add("w", rand_tensor(&[3, 4], 1));
    src.add_buffer("stats", rand_tensor(&[4], 2));
    save(&src, &path).unwrap();

    let mut dst = ParamStore::<f64>::new();
    dst.add("w", Tensor::zeros(&[3, 4]));
    dst.add_buffer("stats", Tensor::zeros(&[4]));
    load(&mut dst, &path).unwrap();
    for ((_, a), (_, b)) in src.iter().zip(dst.iter()) {
        assert_eq!(a.value, b.value);
    }

    let mut other = ParamStore::<f32>::new();
    other.add("w", Tensor::zeros(&[3, 4]));
    assert!(matches!(load(&mut other, &path), Err(TensorError::DtypeMismatch { .. })));
    assert!(matches!(load(&mut dst, &dir.path().join("absent.vadet")), Err(TensorError::Io(_))));
}
