use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vadet_core::net::{NeBlock, NvssBlock, PatchEmbed, PatchExpand, PatchMerge, VqMau, VqMauConfig, VssBlock};
use vadet_core::nn::Ctx;
use vadet_core::Error;
use vadet_tensor::gradcheck::GradCheck;
use vadet_tensor::{ParamStore, Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small(blocks: Vec<usize>) -> VqMauConfig {
    VqMauConfig {
        in_channels: 3,
        out_channels: 2,
        base_channels: 8,
        blocks,
        height: 32,
        width: 32,
        codes: 16,
        ssm_state: 4,
        ..VqMauConfig::default()
    }
}

fn block_cfg(c: usize) -> VqMauConfig {
    VqMauConfig {
        base_channels: c,
        ssm_state: 3,
        ..VqMauConfig::default()
    }
}

/// Value of a unary module applied to a constant input.
fn run<F>(store: &ParamStore<f64>, x: &Tensor<f64>, train: bool, f: F) -> Tensor<f64>
where
    F: Fn(&Ctx<f64>, vadet_tensor::Var) -> vadet_core::Result<vadet_tensor::Var>,
{
    let tape = Tape::new();
    let cx = Ctx::new(&tape, store, train);
    let y = f(&cx, tape.constant(x.clone())).unwrap();
    tape.value(y)
}

#[test]
fn patch_embed_shapes_and_linearity() {
    let mut store = ParamStore::<f64>::new();
    let e = PatchEmbed::new(&mut store, "e", 16, 64, &mut rng(1));
    let x = Tensor::randn(&[1, 16, 32, 32], 1.0, &mut rng(2));
    assert_eq!(run(&store, &x, false, |cx, v| e.forward(cx, v)).shape(), &[1, 8, 8, 64]);

    let mut store = ParamStore::<f64>::new();
    let e = PatchEmbed::new(&mut store, "e", 1, 64, &mut rng(1));
    let zero = Tensor::zeros(&[2, 1, 64, 64]);
    let y = run(&store, &zero, false, |cx, v| e.forward(cx, v));
    assert_eq!(y.shape(), &[2, 16, 16, 64]);
    assert!(y.data().iter().all(|&v| v == 0.0));

    // one output vector is the dot product of its own 4×4 patch with the kernel
    let x = Tensor::randn(&[1, 1, 8, 8], 1.0, &mut rng(3));
    let y = run(&store, &x, false, |cx, v| e.forward(cx, v));
    let w = store.value(e.proj.weight);
    for ch in [0, 17, 63] {
        let mut want = 0.0;
        for r in 0..4 {
            for c in 0..4 {
                want += w.data()[ch * 16 + r * 4 + c] * x.data()[(4 + r) * 8 + 4 + c];
            }
        }
        let got = y.data()[(2 + 1) * 64 + ch];
        assert!((got - want).abs() < 1e-12);
    }

    let bad = Tensor::zeros(&[1, 1, 10, 8]);
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store, false);
    assert!(matches!(
        e.forward(&cx, tape.constant(bad)),
        Err(Error::Indivisible { extent: 10, divisor: 4 })
    ));
}

#[test]
fn merge_and_expand_shapes() {
    let mut store = ParamStore::<f32>::new();
    let m = PatchMerge::new(&mut store, "m", 64, &mut rng(1));
    let ex = PatchExpand::new(&mut store, "x", 128, &mut rng(2));
    let big = PatchExpand::new(&mut store, "big", 512, &mut rng(3));
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store, false);
    let x = tape.constant(Tensor::randn(&[1, 64, 64, 64], 1.0, &mut rng(4)));
    let merged = m.forward(&cx, x).unwrap();
    assert_eq!(tape.shape(merged), vec![1, 32, 32, 128]);
    let back = ex.forward(&cx, merged).unwrap();
    assert_eq!(tape.shape(back), vec![1, 64, 64, 64]);
    let deep = tape.constant(Tensor::zeros(&[1, 8, 8, 512]));
    assert_eq!(tape.shape(big.forward(&cx, deep).unwrap()), vec![1, 16, 16, 256]);

    let odd = tape.constant(Tensor::zeros(&[1, 5, 4, 64]));
    assert!(matches!(m.forward(&cx, odd), Err(Error::OddExtent(5, 4))));
    let mut s3 = ParamStore::<f32>::new();
    let e3 = PatchExpand::new(&mut s3, "e", 3, &mut rng(5));
    let t3 = Tape::new();
    let c3 = Ctx::new(&t3, &s3, false);
    assert!(matches!(
        e3.forward(&c3, t3.constant(Tensor::zeros(&[1, 2, 2, 3]))),
        Err(Error::OddChannels(3))
    ));
}

fn transpose_hw(x: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    Tensor::from_fn(&[n, w, h, c], |i| {
        let (b, rest) = (i / (w * h * c), i % (w * h * c));
        let (r, rest) = (rest / (h * c), rest % (h * c));
        let (col, ch) = (rest / c, rest % c);
        x.data()[((b * h + col) * w + r) * c + ch]
    })
}

#[test]
fn merge_commutes_with_transpose_under_tied_weights() {
    let c = 3;
    let mut store = ParamStore::<f64>::new();
    let m = PatchMerge::new(&mut store, "m", c, &mut rng(6));
    // tie the weight rows of the two off-diagonal neighbours so that swapping them is a no-op
    let mut w = store.value(m.reduce.weight).clone();
    let out = 2 * c;
    let d = w.data_mut();
    for k in 0..c {
        for o in 0..out {
            d[(2 * c + k) * out + o] = d[(c + k) * out + o];
        }
    }
    store.set_value(m.reduce.weight, w);

    let x = Tensor::randn(&[2, 4, 6, c], 1.0, &mut rng(8));
    let a = run(&store, &x, false, |cx, v| m.forward(cx, v));
    let b = run(&store, &transpose_hw(&x), false, |cx, v| m.forward(cx, v));
    assert!(transpose_hw(&a).max_abs_diff(&b) < 1e-12);

    // untied weights break the symmetry, so the oracle is not vacuous
    let mut store2 = ParamStore::<f64>::new();
    let m2 = PatchMerge::new(&mut store2, "m", c, &mut rng(6));
    let a = run(&store2, &x, false, |cx, v| m2.forward(cx, v));
    let b = run(&store2, &transpose_hw(&x), false, |cx, v| m2.forward(cx, v));
    assert!(transpose_hw(&a).max_abs_diff(&b) > 1e-3);
}

#[test]
fn expand_places_channel_groups_on_a_two_by_two_block() {
    let mut store = ParamStore::<f64>::new();
    let ex = PatchExpand::new(&mut store, "x", 4, &mut rng(9));
    let x = Tensor::randn(&[1, 2, 3, 4], 1.0, &mut rng(10));
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store, false);
    let lin = tape.value(ex.expand.forward(&cx, tape.constant(x.clone())).unwrap());
    let y = run(&store, &x, false, |cx, v| ex.forward(cx, v));
    assert_eq!(y.shape(), &[1, 4, 6, 2]);
    // output pixel (2i+a, 2j+b) holds layer-normed group a*2+b of input pixel (i, j)
    for i in 0..2 {
        for j in 0..3 {
            for a in 0..2 {
                for b in 0..2 {
                    let g = &lin.data()[(i * 3 + j) * 8 + (a * 2 + b) * 2..][..2];
                    let mean = (g[0] + g[1]) / 2.0;
                    let var = ((g[0] - mean).powi(2) + (g[1] - mean).powi(2)) / 2.0;
                    let want0 = (g[0] - mean) / (var + 1e-5).sqrt();
                    let got = y.data()[((2 * i + a) * 6 + 2 * j + b) * 2];
                    assert!((got - want0).abs() < 1e-9, "{got} vs {want0}");
                }
            }
        }
    }
}

fn probe_sum(t: &Tape<f64>, y: vadet_tensor::Var, seed: u64) -> vadet_tensor::Result<vadet_tensor::Var> {
    let p = t.constant(Tensor::randn(&t.shape(y), 1.0, &mut rng(seed)));
    Ok(t.sum(t.mul(y, p)?))
}

#[test]
fn merge_and_expand_gradcheck() {
    let mut store = ParamStore::<f64>::new();
    let m = PatchMerge::new(&mut store, "m", 3, &mut rng(11));
    let ex = PatchExpand::new(&mut store, "x", 4, &mut rng(12));
    let gc = GradCheck::default();
    let x = Tensor::randn(&[1, 4, 4, 3], 1.0, &mut rng(13));
    let r = gc
        .run(&[x], |t, v| {
            let cx = Ctx::new(t, &store, true);
            probe_sum(t, m.forward(&cx, v[0]).unwrap(), 1)
        })
        .unwrap();
    assert!(r.max_rel_err <= 1e-4, "merge {}", r.max_rel_err);
    let x = Tensor::randn(&[1, 3, 2, 4], 1.0, &mut rng(14));
    let r = gc
        .run(&[x], |t, v| {
            let cx = Ctx::new(t, &store, true);
            probe_sum(t, ex.forward(&cx, v[0]).unwrap(), 2)
        })
        .unwrap();
    assert!(r.max_rel_err <= 1e-4, "expand {}", r.max_rel_err);
}

#[test]
fn nvss_block_preserves_shape_and_passes_gradcheck() {
    for (h, w, c) in [(4, 4, 4), (3, 5, 6), (8, 2, 2)] {
        let mut store = ParamStore::<f64>::new();
        let b = NvssBlock::new(&mut store, "b", c, &block_cfg(c), &mut rng(15));
        let x = Tensor::randn(&[2, h, w, c], 1.0, &mut rng(16));
        assert_eq!(run(&store, &x, true, |cx, v| b.forward(cx, v)).shape(), &[2, h, w, c]);
    }
    let mut store = ParamStore::<f64>::new();
    let b = NvssBlock::new(&mut store, "b", 4, &block_cfg(4), &mut rng(17));
    let x = Tensor::randn(&[2, 3, 3, 4], 1.0, &mut rng(18));
    let r = GradCheck::default()
        .run(&[x], |t, v| {
            let cx = Ctx::new(t, &store, true);
            probe_sum(t, b.forward(&cx, v[0]).unwrap(), 3)
        })
        .unwrap();
    assert!(r.max_rel_err <= 1e-4, "block {}", r.max_rel_err);
}

fn silence(store: &mut ParamStore<f64>, vss: &VssBlock) {
    for id in [vss.in_gate.weight, vss.out_norm.gamma, vss.out_norm.beta] {
        let z = Tensor::zeros(store.value(id).shape());
        store.set_value(id, z);
    }
}

#[test]
fn block_without_scan_and_gate_is_the_enhancement_path() {
    let c = 4;
    let mut store = ParamStore::<f64>::new();
    let b = NvssBlock::new(&mut store, "b", c, &block_cfg(c), &mut rng(19));
    for (vss, _) in &b.passes {
        silence(&mut store, vss);
    }
    let x = Tensor::randn(&[2, 4, 4, c], 1.0, &mut rng(20));
    for (vss, _) in &b.passes {
        assert_eq!(run(&store, &x, true, |cx, v| vss.forward(cx, v)).data(), x.data());
    }
    let [(_, ne1), (_, ne2)]: &[(VssBlock, NeBlock); 2] = &b.passes;
    let p1 = run(&store, &x, true, |cx, v| ne1.forward(cx, v));
    let p2 = run(&store, &p1, true, |cx, v| ne2.forward(cx, v));
    let got = run(&store, &x, true, |cx, v| b.forward(cx, v));
    for ((g, a), b) in got.data().iter().zip(p1.data()).zip(p2.data()) {
        assert!((g - (a + b)).abs() < 1e-12);
    }
}

#[test]
fn enhancement_path_is_relu_conv_bn() {
    // training-mode batch norm maps each channel of the conv output to zero
    // mean and variance v / (v + eps)
    let c = 3;
    let mut store = ParamStore::<f64>::new();
    let ne = NeBlock::new(&mut store, "ne", c, &mut rng(21));
    let x = Tensor::randn(&[2, 5, 5, c], 1.0, &mut rng(22));
    let pre = run(&store, &x, true, |cx, v| {
        let t = cx.tape;
        let h = t.relu(ne.linear.forward(cx, ne.norm.forward(cx, v)?)?);
        vadet_core::nn::to_nhwc(t, ne.conv.forward(cx, vadet_core::nn::to_nchw(t, h)?)?)
    });
    let y = run(&store, &x, true, |cx, v| ne.forward(cx, v));
    let moments = |t: &Tensor<f64>, ch: usize| {
        let vals: Vec<f64> = t.data().iter().skip(ch).step_by(c).cloned().collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        (mean, var)
    };
    for ch in 0..c {
        let (_, v) = moments(&pre, ch);
        let (mean, var) = moments(&y, ch);
        assert!(mean.abs() < 1e-10, "{mean}");
        assert!((var - v / (v + 1e-5)).abs() < 1e-9, "{var} vs {}", v / (v + 1e-5));
    }
}

#[test]
fn forward_shape_trace() {
    let cfg = VqMauConfig {
        in_channels: 16,
        out_channels: 1,
        height: 64,
        width: 64,
        ..VqMauConfig::default()
    };
    assert_eq!(
        cfg.stage_shapes(),
        vec![(64, 16, 16), (128, 8, 8), (256, 4, 4), (512, 2, 2)]
    );
    assert_eq!(cfg.code_dim(), 512);
    let mut store = ParamStore::<f32>::new();
    let model = VqMau::new(cfg, &mut store, 0).unwrap();
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store, false);
    let x = tape.constant(Tensor::randn(&[1, 16, 64, 64], 0.5, &mut rng(23)));
    let out = model.forward(&cx, x).unwrap();
    assert_eq!(tape.shape(out.y), vec![1, 1, 64, 64]);
    assert_eq!(out.indices.len(), 4);
    assert!(tape.value(out.y).all_finite());
    assert!(tape.value(out.vq_loss).item() >= 0.0);
}

#[test]
fn both_block_schedules_run_and_keep_resolution() {
    for blocks in [vec![1, 1, 1, 1], vec![2, 2, 2, 2]] {
        let cfg = small(blocks);
        let mut store = ParamStore::<f32>::new();
        let model = VqMau::new(cfg, &mut store, 1).unwrap();
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store, true);
        let x = tape.leaf(Tensor::randn(&[2, 3, 32, 32], 0.5, &mut rng(24)));
        let out = model.forward(&cx, x).unwrap();
        assert_eq!(tape.shape(out.y), vec![2, 2, 32, 32]);
        assert_eq!(out.indices.len(), 2);
    }
    // shallower models keep the same contract
    let mut cfg = small(vec![1, 2]);
    cfg.height = 24;
    cfg.width = 40;
    let mut store = ParamStore::<f32>::new();
    let model = VqMau::new(cfg, &mut store, 1).unwrap();
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store, false);
    let out = model
        .forward(&cx, tape.constant(Tensor::zeros(&[1, 3, 24, 40])))
        .unwrap();
    assert_eq!(tape.shape(out.y), vec![1, 2, 24, 40]);
    assert_eq!(out.indices.len(), 3 * 5);
}

#[test]
fn every_parameter_receives_a_gradient() {
    let mut store = ParamStore::<f32>::new();
    let model = VqMau::new(small(vec![1, 1, 1, 1]), &mut store, 2).unwrap();
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store, true);
    let x = tape.constant(Tensor::randn(&[2, 3, 32, 32], 0.5, &mut rng(25)));
    let out = model.forward(&cx, x).unwrap();
    let loss = tape.add(tape.sum(tape.square(out.y).unwrap()), out.vq_loss).unwrap();
    let grads = tape.backward(loss).unwrap();
    store.accumulate(&grads);
    for (_, p) in store.iter() {
        if p.buffer {
            continue;
        }
        let g = p.grad.as_ref().unwrap_or_else(|| panic!("{} has no gradient", p.name));
        assert!(g.all_finite(), "{}", p.name);
    }
}

#[test]
fn parameter_count_grows_with_blocks_per_stage() {
    let counts: Vec<usize> = (1..=3)
        .map(|k| {
            let mut store = ParamStore::<f32>::new();
            VqMau::new(VqMauConfig { blocks: vec![k; 4], ..VqMauConfig::default() }, &mut store, 0).unwrap();
            VqMau::num_params(&store)
        })
        .collect();
    assert!(counts[0] < counts[1] && counts[1] < counts[2], "{counts:?}");
    let r2 = counts[1] as f64 / counts[0] as f64;
    let r3 = counts[2] as f64 / counts[0] as f64;
    assert!((1.7..=2.0).contains(&r2) && (2.4..=3.0).contains(&r3), "{r2} {r3}");
}

#[test]
fn same_seed_same_model() {
    let build = |seed| {
        let mut store = ParamStore::<f32>::new();
        let m = VqMau::new(small(vec![1, 1, 1, 1]), &mut store, seed).unwrap();
        (m, store)
    };
    let (m1, s1) = build(5);
    let (_, s2) = build(5);
    let (_, s3) = build(6);
    let values = |s: &ParamStore<f32>| s.iter().flat_map(|(_, p)| p.value.to_vec()).collect::<Vec<_>>();
    assert_eq!(values(&s1), values(&s2));
    assert_ne!(values(&s1), values(&s3));
    let x = Tensor::randn(&[1, 3, 32, 32], 0.5, &mut rng(26));
    let a = vadet_core::net::infer(&m1, &s1, x.clone()).unwrap();
    let b = vadet_core::net::infer(&m1, &s2, x).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.vadet");
    let mut store = ParamStore::<f32>::new();
    let model = VqMau::new(small(vec![1, 1, 1, 1]), &mut store, 7).unwrap();
    // move the batch-norm buffers away from their initial values
    {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store, true);
        let x = tape.constant(Tensor::randn(&[2, 3, 32, 32], 1.0, &mut rng(27)));
        model.forward(&cx, x).unwrap();
        let updates = cx.take_updates();
        vadet_core::nn::apply_updates(&mut store, updates);
    }
    model.save(&store, &path).unwrap();
    assert!(vadet_core::net::config_path(&path).exists());
    let (loaded, loaded_store) = VqMau::load::<f32>(&path).unwrap();
    assert_eq!(loaded.config, model.config);
    let x = Tensor::randn(&[1, 3, 32, 32], 1.0, &mut rng(28));
    let a = vadet_core::net::infer(&model, &store, x.clone()).unwrap();
    let b = vadet_core::net::infer(&loaded, &loaded_store, x).unwrap();
    assert_eq!(a.data(), b.data());

    // weights of a differently shaped model are rejected
    let mut other = ParamStore::<f32>::new();
    let m2 = VqMau::new(small(vec![2, 1, 1, 1]), &mut other, 0).unwrap();
    assert!(matches!(m2.load_weights(&mut other, &path), Err(Error::CheckpointMismatch(_))));
    std::fs::remove_file(vadet_core::net::config_path(&path)).unwrap();
    assert!(matches!(VqMau::load::<f32>(&path), Err(Error::MissingComponent(_))));
}

#[test]
fn config_and_input_errors() {
    let mut cfg = small(vec![1, 1, 1, 1]);
    cfg.height = 48;
    assert!(matches!(cfg.validate(), Err(Error::Indivisible { extent: 48, divisor: 32 })));
    assert!(matches!(small(vec![]).validate(), Err(Error::Config(_))));
    assert!(matches!(small(vec![1, 0, 1, 1]).validate(), Err(Error::Config(_))));
    let mut odd = small(vec![1]);
    odd.base_channels = 6;
    assert!(matches!(odd.validate(), Err(Error::Config(_))));

    let mut store = ParamStore::<f32>::new();
    let model = VqMau::new(small(vec![1, 1, 1, 1]), &mut store, 0).unwrap();
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store, false);
    for shape in [[1, 2, 32, 32], [1, 3, 64, 32]] {
        let x = tape.constant(Tensor::zeros(&shape));
        assert!(matches!(model.forward(&cx, x), Err(Error::ConfigMismatch(_))));
    }
}
