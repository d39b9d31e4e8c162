use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stripeclean_core::attention::COMBINATIONS;
use stripeclean_core::layers::LRELU_SLOPE;
use stripeclean_core::model::{Checkpoint, Model, ModelConfig, LAYOUTS, RHDWT_VARIANTS};
use stripeclean_core::tensor::gradcheck::check_params;
use stripeclean_core::tensor::{Graph, Tensor};
use stripeclean_core::Error;

fn image(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
}

fn zero_head<T: stripeclean_core::tensor::Scalar>(m: &mut Model<T>) {
    for n in ["head.weight", "head.bias"] {
        let id = m.store().find_param(n).unwrap();
        let p = m.store_mut().param_mut(id);
        p.value = Tensor::zeros(p.value.shape());
    }
}

#[test]
fn default_layout_maps_image_to_same_shape() {
    let cfg = ModelConfig::toy().with_layout("A2").unwrap();
    let m = Model::<f32>::build(&cfg, 1).unwrap();
    for (h, w) in [(64, 64), (96, 64), (64, 128)] {
        let y = m.predict(&image(&[1, 1, h, w], 2)).unwrap();
        assert_eq!(y.shape(), &[1, 1, h, w]);
    }
}

#[test]
fn every_layout_builds_with_same_contract() {
    let x = image(&[2, 1, 32, 32], 3);
    for l in LAYOUTS {
        let m = Model::<f32>::build(&ModelConfig::toy().with_layout(l).unwrap(), 1).unwrap();
        assert_eq!(m.predict(&x).unwrap().shape(), x.shape(), "{l}");
    }
}

#[test]
fn indivisible_extent_is_a_dimension_error() {
    let m = Model::<f32>::build(&ModelConfig::toy(), 1).unwrap();
    match m.predict(&image(&[1, 1, 36, 32], 4)) {
        Err(Error::Dimension { axis, .. }) => assert_eq!(axis, "height"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn zero_head_restores_input_exactly() {
    let mut m = Model::<f32>::build(&ModelConfig::toy(), 5).unwrap();
    zero_head(&mut m);
    let x = image(&[2, 1, 16, 32], 6);
    let mut g = Graph::new(false);
    let v = g.constant(x.clone());
    let (noise, restored) = m.forward(&mut g, v).unwrap();
    assert!(g.value(noise).data().iter().all(|&v| v == 0.0));
    assert_eq!(g.value(restored), &x);
}

#[test]
fn residual_is_bounded_and_consistent() {
    let m = Model::<f32>::build(&ModelConfig::toy(), 7).unwrap();
    let x = image(&[1, 1, 32, 32], 8);
    let mut g = Graph::new(false);
    let v = g.constant(x.clone());
    let (noise, restored) = m.forward(&mut g, v).unwrap();
    let (n, r) = (g.value(noise), g.value(restored));
    for i in 0..x.len() {
        assert!(n.data()[i] > -1.0 && n.data()[i] < 1.0);
        assert_eq!(r.data()[i], x.data()[i] - n.data()[i]);
    }
}

#[test]
fn init_is_seed_deterministic() {
    let cfg = ModelConfig::toy();
    let a = Model::<f32>::build(&cfg, 9).unwrap();
    let b = Model::<f32>::build(&cfg, 9).unwrap();
    let c = Model::<f32>::build(&cfg, 10).unwrap();
    assert_eq!(a.store(), b.store());
    let x = image(&[1, 1, 16, 16], 11);
    assert_ne!(a.predict(&x).unwrap(), c.predict(&x).unwrap());
}

#[test]
fn init_scale_matches_fan_in() {
    let m = Model::<f64>::build(&ModelConfig::desk(), 12).unwrap();
    let mut checked = 0;
    for p in m.store().params() {
        let s = p.value.shape();
        // the correction-module output fusions and the head use their own init
        let special = p.name.ends_with("cncm.out.weight") || p.name == "head.weight";
        if s.len() != 4 || p.value.len() < 2000 || special {
            continue;
        }
        let fan_in = (s[1] * s[2] * s[3]) as f64;
        let want = (2.0 / ((1.0 + LRELU_SLOPE * LRELU_SLOPE) * fan_in)).sqrt();
        let n = p.value.len() as f64;
        let mean = p.value.sum() / n;
        let std = (p
            .value
            .data()
            .iter()
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / n)
            .sqrt();
        assert!(
            (std / want - 1.0).abs() < 0.1,
            "{}: {std} vs {want}",
            p.name
        );
        checked += 1;
    }
    assert!(checked > 5);
    for p in m.store().params() {
        if p.name.ends_with(".bias") || p.name.ends_with(".beta") {
            assert!(p.value.data().iter().all(|&v| v == 0.0));
        }
        if p.name.ends_with(".gamma") {
            assert!(p.value.data().iter().all(|&v| v == 1.0));
        }
    }
}

#[test]
fn halving_width_quarters_parameter_count() {
    let full = Model::<f32>::empty(&ModelConfig::arcnet())
        .unwrap()
        .num_params();
    let light = Model::<f32>::empty(&ModelConfig::light())
        .unwrap()
        .num_params();
    let ratio = full as f64 / light as f64;
    assert!((3.5..=4.2).contains(&ratio), "{full} / {light} = {ratio}");
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = Model::<f32>::build(&ModelConfig::toy().with_layout("S2").unwrap(), 13).unwrap();
    m.save(&path).unwrap();
    let back = Model::<f32>::load(&path).unwrap();
    assert_eq!(back.config(), m.config());
    assert_eq!(back.store(), m.store());
    let x = image(&[1, 1, 32, 48], 14);
    let (a, b) = (m.predict(&x).unwrap(), back.predict(&x).unwrap());
    assert!(a
        .data()
        .iter()
        .zip(b.data())
        .all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn checkpoint_errors_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = Model::<f32>::build(&ModelConfig::toy(), 15).unwrap();
    m.save(&path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();

    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    match Model::<f32>::load(&path) {
        Err(Error::Format { field, .. }) => assert_eq!(field, "magic"),
        other => panic!("{other:?}"),
    }

    bytes[0] = b'A';
    bytes.truncate(bytes.len() - 7);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        Model::<f32>::load(&path),
        Err(Error::Format { .. })
    ));

    // a checkpoint for another layout lacks this layout's parameters
    let mut ck = m.to_checkpoint(Vec::new());
    ck.config = ModelConfig::toy().with_layout("S3").unwrap();
    let err = Model::<f32>::from_checkpoint(&ck).unwrap_err().to_string();
    assert!(
        err.contains("missing") && err.contains("dec0.up.expand.weight"),
        "{err}"
    );
}

#[test]
fn checkpoint_preserves_metadata() {
    let m = Model::<f32>::build(&ModelConfig::toy(), 16).unwrap();
    let ck = m.to_checkpoint(vec![
        ("epoch".into(), "3".into()),
        ("seed".into(), "7".into()),
    ]);
    let mut buf = Vec::new();
    ck.write_to(&mut buf).unwrap();
    let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.meta("epoch"), Some("3"));
}

#[test]
fn ablation_variants_run_forward_and_backward() {
    let mut cfgs = Vec::new();
    for l in LAYOUTS {
        cfgs.push(ModelConfig::toy().with_layout(l).unwrap());
    }
    for v in RHDWT_VARIANTS {
        cfgs.push(ModelConfig::toy().with_rhdwt(v).unwrap());
    }
    for k in COMBINATIONS {
        cfgs.push(ModelConfig::toy().with_branches(k).unwrap());
    }
    let x = image(&[1, 1, 64, 64], 17);
    for cfg in cfgs {
        let mut m = Model::<f32>::build(&cfg, 18).unwrap();
        let mut g = Graph::new(true);
        let v = g.constant(x.clone());
        let (_, r) = m.forward(&mut g, v).unwrap();
        assert_eq!(g.value(r).shape(), x.shape());
        let t = g.constant(x.clone());
        let loss = g.mse(r, t).unwrap();
        g.backward_into(loss, m.store_mut()).unwrap();
        let gsum: f32 = m
            .store()
            .params()
            .iter()
            .map(|p| p.grad.max_abs())
            .fold(0.0, f32::max);
        assert!(gsum.is_finite() && gsum > 0.0);
    }
}

#[test]
fn toy_network_passes_end_to_end_gradcheck() {
    let cfg = ModelConfig::toy();
    let mut m = Model::<f64>::build(&cfg, 19).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let x = Tensor::<f64>::from_fn(&[2, 1, 16, 16], |_| rng.random_range(0.0..1.0));
    let clean = x.map(|v| (v * 0.8 + 0.1).clamp(0.0, 1.0));
    let probe = m.clone();
    let report = check_params(
        m.store_mut(),
        |g, store| {
            let inp = g.constant(x.clone());
            let (_, r) = probe.forward_with(g, store, inp)?;
            let t = g.constant(clean.clone());
            g.mse(r, t)
        },
        1e-5,
        1e-3,
        Some(4),
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}
