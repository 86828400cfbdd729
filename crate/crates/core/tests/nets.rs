mod common;

use common::{grad_check, jitter_offsets, project, randn, rng};
use ctpseg::autograd::{Graph, ParamKind, Tensor, VarStore};
use ctpseg::nets::*;

fn standardize_brute(x: &Tensor<f64>, groups: impl Fn(usize, usize) -> usize, n_groups: usize) -> Vec<f64> {
    let (n, c, h, w) = x.dims4();
    let mut sum = vec![0.0; n_groups];
    let mut cnt = vec![0.0; n_groups];
    for b in 0..n {
        for k in 0..c {
            for p in 0..h * w {
                sum[groups(b, k)] += x.data()[(b * c + k) * h * w + p];
                cnt[groups(b, k)] += 1.0;
            }
        }
    }
    let mean: Vec<f64> = sum.iter().zip(&cnt).map(|(s, c)| s / c).collect();
    let mut var = vec![0.0; n_groups];
    for b in 0..n {
        for k in 0..c {
            for p in 0..h * w {
                let gi = groups(b, k);
                var[gi] += (x.data()[(b * c + k) * h * w + p] - mean[gi]).powi(2) / cnt[gi];
            }
        }
    }
    let mut out = vec![0.0; x.numel()];
    for b in 0..n {
        for k in 0..c {
            for p in 0..h * w {
                let i = (b * c + k) * h * w + p;
                let gi = groups(b, k);
                out[i] = (x.data()[i] - mean[gi]) / (var[gi] + NORM_EPS).sqrt();
            }
        }
    }
    out
}

fn one_hot_logits(k: usize) -> Tensor<f64> {
    let mut v = vec![-1000.0; 3];
    v[k] = 1000.0;
    Tensor::from_vec(&[1, 3, 1, 1], v)
}

fn run_sn(sn: &SwitchNorm, vs: &VarStore<f64>, x: &Tensor<f64>, training: bool) -> Tensor<f64> {
    let mut g = Graph::new(training);
    let xv = g.constant(x.clone());
    let y = sn.forward(&mut g, vs, xv);
    g.value(y).clone()
}

#[test]
fn switchnorm_instance_one_hot_is_instance_norm() {
    let mut vs = VarStore::new();
    let sn = SwitchNorm::new(&mut vs, "sn", 3);
    vs.set(sn.mean_weight, one_hot_logits(0));
    vs.set(sn.var_weight, one_hot_logits(0));
    let x = randn(&[2, 3, 4, 4], &mut rng(1));
    let y = run_sn(&sn, &vs, &x, true);
    let want = standardize_brute(&x, |b, k| b * 3 + k, 6);
    for (a, b) in y.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn switchnorm_batch_one_hot_is_batch_norm() {
    let mut vs = VarStore::new();
    let sn = SwitchNorm::new(&mut vs, "sn", 3);
    vs.set(sn.mean_weight, one_hot_logits(2));
    vs.set(sn.var_weight, one_hot_logits(2));
    let x = randn(&[2, 3, 4, 4], &mut rng(2));
    let y = run_sn(&sn, &vs, &x, true);
    let want = standardize_brute(&x, |_, k| k, 3);
    for (a, b) in y.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn switchnorm_layer_one_hot_is_layer_norm() {
    let mut vs = VarStore::new();
    let sn = SwitchNorm::new(&mut vs, "sn", 3);
    vs.set(sn.mean_weight, one_hot_logits(1));
    vs.set(sn.var_weight, one_hot_logits(1));
    let x = randn(&[2, 3, 4, 4], &mut rng(3));
    let y = run_sn(&sn, &vs, &x, true);
    let want = standardize_brute(&x, |b, _| b, 2);
    for (a, b) in y.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn switchnorm_constant_input_gives_beta() {
    let mut vs = VarStore::new();
    let sn = SwitchNorm::new(&mut vs, "sn", 2);
    vs.set(sn.affine.beta, Tensor::from_vec(&[1, 2, 1, 1], vec![0.3, -0.7]));
    let x = Tensor::full(&[2, 2, 4, 4], 5.0);
    let y = run_sn(&sn, &vs, &x, true);
    for (i, v) in y.data().iter().enumerate() {
        let want = if (i / 16) % 2 == 0 { 0.3 } else { -0.7 };
        assert!((v - want).abs() < 1e-12);
    }
}

#[test]
fn switchnorm_batch_of_one_is_finite() {
    let mut vs = VarStore::new();
    let sn = SwitchNorm::new(&mut vs, "sn", 2);
    vs.set(sn.mean_weight, one_hot_logits(2));
    vs.set(sn.var_weight, one_hot_logits(2));
    let x = randn(&[1, 2, 4, 4], &mut rng(4));
    let y = run_sn(&sn, &vs, &x, true);
    let want = standardize_brute(&x, |b, k| b * 2 + k, 2);
    for (a, b) in y.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn running_stats_follow_ema() {
    let mut vs = VarStore::<f64>::new();
    let bn = BatchNorm::new(&mut vs, "bn", 1);
    let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    let mut g = Graph::new(true);
    let xv = g.constant(x);
    bn.forward(&mut g, &vs, xv);
    for (id, t) in g.take_buffer_updates() {
        vs.set(id, t);
    }
    // mean 2.5, unbiased variance 5/3
    assert!((vs.get(bn.running_mean).item() - 0.25).abs() < 1e-12);
    assert!((vs.get(bn.running_var).item() - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
}

#[test]
fn se_zero_excitation_halves() {
    let mut vs = VarStore::new();
    let se = SeBlock::new(&mut vs, "se", 8, &mut rng(5));
    for id in vs.ids().collect::<Vec<_>>() {
        let s = vs.get(id).shape().to_vec();
        vs.set(id, Tensor::zeros(&s));
    }
    let x = randn(&[2, 8, 4, 4], &mut rng(6));
    let mut g = Graph::new(false);
    let xv = g.constant(x.clone());
    let y = se.forward(&mut g, &vs, xv);
    assert_eq!(g.shape(y), x.shape());
    for (a, b) in g.value(y).data().iter().zip(x.data()) {
        assert_eq!(*a, b / 2.0);
    }
}

#[test]
fn se_gate_can_suppress_a_channel() {
    let mut vs = VarStore::<f64>::new();
    let se = SeBlock::new(&mut vs, "se", 2, &mut rng(7));
    for id in vs.ids().collect::<Vec<_>>() {
        let s = vs.get(id).shape().to_vec();
        vs.set(id, Tensor::zeros(&s));
    }
    vs.set(se.fc2.bias.unwrap(), Tensor::from_vec(&[1, 2, 1, 1], vec![40.0, -40.0]));
    let x = Tensor::ones(&[1, 2, 3, 3]);
    let mut g = Graph::new(false);
    let xv = g.constant(x);
    let y = se.forward(&mut g, &vs, xv);
    let d = g.value(y).data();
    assert!(d[..9].iter().all(|&v| (v - 1.0).abs() < 1e-12));
    assert!(d[9..].iter().all(|&v| v < 1e-12));
}

#[test]
fn se_hidden_width_has_floor() {
    assert_eq!(SeBlock::hidden(512), 32);
    assert_eq!(SeBlock::hidden(32), 4);
    assert_eq!(SeBlock::hidden(8), 4);
}

fn tiny_unet(in_ch: usize, out_ch: usize, norm: NormKind, se: bool) -> UNetConfig {
    UNetConfig { in_ch, out_ch, base_ch: 4, depth: 2, use_se: se, norm_kind: norm }
}

#[test]
fn unet_shapes_and_ladder() {
    let cfg = UNetConfig {
        in_ch: 6,
        out_ch: 1,
        base_ch: 32,
        depth: 4,
        use_se: false,
        norm_kind: NormKind::Batch,
    };
    assert_eq!(cfg.encoder_ladder(), vec![32, 64, 128, 256, 512]);

    let mut vs = VarStore::<f32>::new();
    let net = UNet::new(&mut vs, "u", tiny_unet(6, 1, NormKind::Batch, false), &mut rng(8));
    let mut g = Graph::new(false);
    let x = g.constant(Tensor::zeros(&[2, 6, 16, 16]));
    let y = net.forward(&mut g, &vs, x).unwrap();
    assert_eq!(g.shape(y), &[2, 1, 16, 16]);
    let bad = g.constant(Tensor::zeros(&[1, 6, 18, 16]));
    assert!(net.forward(&mut g, &vs, bad).is_err());
    let wrong_ch = g.constant(Tensor::zeros(&[1, 5, 16, 16]));
    assert!(net.forward(&mut g, &vs, wrong_ch).is_err());
}

#[test]
fn full_size_slice_shapes() {
    let arch = ArchConfig { base_ch: 4, depth: 4, ..ArchConfig::default() };
    let mut vs = VarStore::<f32>::new();
    let model = Model::new(arch, &mut vs, &mut rng(9));
    let mut g = Graph::new(false);
    let i_star = g.constant(Tensor::full(&[1, 6, 256, 256], 0.3));
    let f_h = model.extract(&mut g, &vs, i_star).unwrap();
    assert_eq!(g.shape(f_h), &[1, 1, 256, 256]);
    assert!(g.value(f_h).data().iter().all(|&v| v > 0.0 && v < 1.0));
    let (logits, probs) = model.segment(&mut g, &vs, f_h).unwrap();
    assert_eq!(g.shape(logits), &[1, 2, 256, 256]);
    let p = g.value(probs).data();
    for i in 0..256 * 256 {
        assert!((p[i] + p[i + 256 * 256] - 1.0).abs() < 1e-6);
    }
    let v = model.context(&mut g, &vs, f_h).unwrap();
    assert_eq!(g.shape(v), &[1, CONTEXT_DIM, 1, 1]);
}

#[test]
fn extractor_with_zero_parameters_outputs_half() {
    let arch = ArchConfig { base_ch: 4, depth: 2, ..ArchConfig::default() };
    let mut vs = VarStore::<f64>::new();
    let model = Model::new(arch, &mut vs, &mut rng(10));
    for id in vs.ids().collect::<Vec<_>>() {
        if vs.name(id).starts_with(PREFIX_E) && vs.kind(id) == ParamKind::Weight {
            let s = vs.get(id).shape().to_vec();
            vs.set(id, Tensor::zeros(&s));
        }
    }
    let mut g = Graph::new(false);
    let x = g.constant(randn(&[1, 6, 16, 16], &mut rng(11)));
    let y = model.extract(&mut g, &vs, x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.5));
}

#[test]
fn generator_is_sensitive_to_channel_order() {
    let arch = ArchConfig { base_ch: 4, depth: 2, ..ArchConfig::default() };
    let mut vs = VarStore::<f64>::new();
    let model = Model::new(arch, &mut vs, &mut rng(12));
    let x = randn(&[1, 6, 16, 16], &mut rng(13));
    let run = |x: &Tensor<f64>| {
        let mut g = Graph::new(false);
        let f_o = g.constant(x.slice_channels(0, 4));
        let f_l = g.constant(x.slice_channels(4, 1));
        let f_h = g.constant(x.slice_channels(5, 1));
        let y = model.generate(&mut g, &vs, f_o, f_l, f_h).unwrap();
        let out = g.value(y).clone();
        assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
        out
    };
    let a = run(&x);
    let parts: Vec<Tensor<f64>> = [1, 0, 2, 3, 4, 5].iter().map(|&c| x.slice_channels(c, 1)).collect();
    let refs: Vec<&Tensor<f64>> = parts.iter().collect();
    let b = run(&Tensor::concat_channels(&refs));
    assert!(a.data().iter().zip(b.data()).any(|(p, q)| (p - q).abs() > 1e-9));
}

#[test]
fn context_encoder_contracts() {
    let mut vs = VarStore::<f64>::new();
    let ctx = ContextEncoder::new(&mut vs, "c", &mut rng(14));
    let mut g = Graph::new(false);
    let z = g.constant(Tensor::zeros(&[1, 1, 32, 32]));
    let v = ctx.forward(&mut g, &vs, z);
    assert!(g.value(v).data().iter().all(|&x| x == 0.0));
    let img = randn(&[2, 1, 32, 32], &mut rng(15));
    let a = g.constant(img.clone());
    let b = g.constant(img);
    let va = ctx.forward(&mut g, &vs, a);
    let vb = ctx.forward(&mut g, &vs, b);
    assert_eq!(g.value(va).shape(), &[2, 16, 1, 1]);
    assert_eq!(g.value(va).data(), g.value(vb).data());
}

#[test]
fn eval_forward_is_deterministic() {
    let arch = ArchConfig { base_ch: 4, depth: 2, ..ArchConfig::default() };
    let mut vs = VarStore::<f32>::new();
    let model = Model::new(arch, &mut vs, &mut rng(16));
    let run = || {
        let mut g = Graph::new(false);
        let inp = PipelineInputs {
            f_o: Some(g.constant(Tensor::full(&[1, 4, 16, 16], 0.2))),
            f_l: Some(g.constant(Tensor::full(&[1, 1, 16, 16], 0.4))),
            i_star: Some(g.constant(Tensor::full(&[1, 6, 16, 16], 0.6))),
            dwi: None,
        };
        let out = model.forward(&mut g, &vs, &inp).unwrap();
        g.value(out.probs).clone()
    };
    assert_eq!(run().data(), run().data());
}

#[test]
fn slnet_parameter_audit() {
    let mut sl = VarStore::<f32>::new();
    let mut plain = VarStore::<f32>::new();
    let cfg = UNetConfig {
        in_ch: 1,
        out_ch: 2,
        base_ch: 16,
        depth: 4,
        use_se: true,
        norm_kind: NormKind::Switchable,
    };
    UNet::new(&mut sl, "s", cfg, &mut rng(17));
    UNet::new(
        &mut plain,
        "s",
        UNetConfig { use_se: false, norm_kind: NormKind::Batch, ..cfg },
        &mut rng(17),
    );
    let se: usize = sl.ids().filter(|&id| sl.name(id).contains(".se.")).map(|id| sl.get(id).numel()).sum();
    let imp: usize = sl
        .ids()
        .filter(|&id| sl.name(id).ends_with("_weight"))
        .map(|id| sl.get(id).numel())
        .sum();
    let total = sl.weight_count("");
    assert!(se > 0 && imp > 0);
    assert_eq!(total - se - imp, plain.weight_count(""));
    assert!(total - imp > plain.weight_count(""));
}

#[test]
fn variants_wire_segmenter_inputs() {
    for (v, ch, synth) in [
        (Variant::CtaOnly, 6, false),
        (Variant::FoOnly, 4, false),
        (Variant::PseudoDwiFull, 1, true),
        (Variant::FoPlusPseudo, 5, true),
        (Variant::RealDwi, 1, false),
    ] {
        let arch = ArchConfig { variant: v, base_ch: 4, depth: 1, ..ArchConfig::default() };
        assert_eq!(arch.segmenter().in_ch, ch);
        let mut vs = VarStore::<f32>::new();
        let m = Model::new(arch, &mut vs, &mut rng(18));
        assert_eq!(m.extractor.is_some(), synth);
        assert_eq!(m.generator.is_some(), synth);
        assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
    }
}

#[test]
fn grad_conv_block_batchnorm() {
    let mut vs = VarStore::new();
    let blk = ConvBlock::new(&mut vs, "b", 2, 3, NormKind::Batch, false, &mut rng(20));
    jitter_offsets(&mut vs, 41);
    let x = randn(&[2, 2, 8, 8], &mut rng(21));
    let err = grad_check(
        &vs,
        &x,
        |g, vs, x| {
            let y = blk.forward(g, vs, x);
            project(g, y, 22)
        },
        1e-4,
        30,
        23,
    );
    assert!(err < 1e-3, "rel err {err}");
}

#[test]
fn grad_switchnorm() {
    let mut vs = VarStore::new();
    let sn = SwitchNorm::new(&mut vs, "sn", 3);
    let mut r = rng(24);
    vs.set(sn.mean_weight, randn(&[1, 3, 1, 1], &mut r));
    vs.set(sn.var_weight, randn(&[1, 3, 1, 1], &mut r));
    vs.set(sn.affine.gamma, randn(&[1, 3, 1, 1], &mut r));
    let x = randn(&[2, 3, 8, 8], &mut r);
    let err = grad_check(
        &vs,
        &x,
        |g, vs, x| {
            let y = sn.forward(g, vs, x);
            project(g, y, 25)
        },
        1e-4,
        40,
        26,
    );
    assert!(err < 1e-3, "rel err {err}");
}

#[test]
fn grad_se_block() {
    let mut vs = VarStore::new();
    let se = SeBlock::new(&mut vs, "se", 8, &mut rng(27));
    jitter_offsets(&mut vs, 42);
    let x = randn(&[2, 8, 8, 8], &mut rng(28));
    let err = grad_check(
        &vs,
        &x,
        |g, vs, x| {
            let y = se.forward(g, vs, x);
            project(g, y, 29)
        },
        1e-4,
        40,
        30,
    );
    assert!(err < 1e-3, "rel err {err}");
}

#[test]
fn grad_context_encoder() {
    let mut vs = VarStore::new();
    let ctx = ContextEncoder::new(&mut vs, "c", &mut rng(31));
    jitter_offsets(&mut vs, 39);
    let x = randn(&[2, 1, 16, 16], &mut rng(32));
    let err = grad_check(
        &vs,
        &x,
        |g, vs, x| {
            let y = ctx.forward(g, vs, x);
            project(g, y, 33)
        },
        1e-6,
        30,
        34,
    );
    assert!(err < 1e-3, "rel err {err}");
}

#[test]
fn grad_slnet_unet_sum() {
    let mut vs = VarStore::new();
    let net = UNet::new(&mut vs, "s", tiny_unet(1, 2, NormKind::Switchable, true), &mut rng(35));
    jitter_offsets(&mut vs, 40);
    let x = randn(&[2, 1, 16, 16], &mut rng(36));
    let err = grad_check(
        &vs,
        &x,
        |g, vs, x| {
            let y = net.forward(g, vs, x).unwrap();
            project(g, y, 37)
        },
        1e-6,
        8,
        38,
    );
    assert!(err < 1e-3, "rel err {err}");
}

#[test]
fn bundle_round_trip_is_bit_exact() {
    let arch = ArchConfig { base_ch: 4, depth: 2, ..ArchConfig::default() };
    let mut b = ModelBundle::init(arch, 3);
    b.epoch = 7;
    b.losses.insert("val_dice".into(), 0.5);
    b.hyperparams.insert("lr".into(), "0.002".into());
    let mut opt = ctpseg::autograd::RmsProp::new(0.002, 0.99, 1e-8);
    let id = b.store.ids().next().unwrap();
    opt.set_state(id, b.store.get(id).map(|v| v * v));
    b.optimizer = Some(opt);
    let dir = tempfile::tempdir().unwrap();
    b.save(dir.path()).unwrap();
    let back = ModelBundle::load(dir.path()).unwrap();
    assert_eq!(back.manifest(), b.manifest());
    for id in b.store.ids() {
        let (x, y) = (b.store.get(id).data(), back.store.get(id).data());
        assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    let st = back.optimizer.unwrap();
    assert_eq!(st.state()[&id].data(), b.optimizer.unwrap().state()[&id].data());
}
