use alloc::vec;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::autograd::Tape;
use crate::Tensor;

fn small() -> ArchitectureConfig {
    ArchitectureConfig {
        generator: GeneratorConfig { base_width: 4, ..Default::default() },
        discriminator: DiscriminatorConfig { base_width: 4, ..Default::default() },
        segmenter: SegmenterConfig { base_width: 2, ..Default::default() },
        heads: HeadsConfig { hidden: 16, out: 16, ..Default::default() },
    }
}

fn image(seed: u64, n: usize, h: usize, w: usize) -> Tensor<f64> {
    let mut rng = rng::derive(seed, 77);
    Tensor::from_fn(&[n, 1, h, w], |_| rng.random_range(-1.0..1.0))
}

fn bundle(seed: u64) -> ModelBundle<f64> {
    ModelBundle::init(&small(), seed).unwrap()
}

#[test]
fn generator_preserves_shape_and_range() {
    let b = bundle(0);
    for (h, w) in [(64, 64), (30, 22)] {
        let mut t = Tape::inference();
        let x = t.constant(image(1, 1, h, w));
        let y = b.generator.forward(&mut t, x).unwrap();
        assert_eq!(t.shape(y), [1, 1, h, w]);
        assert!(t.value(y).data().iter().all(|v| v.abs() < 1.0));
    }
}

#[test]
fn forwards_are_deterministic() {
    let b = bundle(0);
    let run = || {
        let mut t = Tape::inference();
        let x = t.constant(image(2, 1, 32, 32));
        let y = b.generator.forward(&mut t, x).unwrap();
        let s = b.segmenter.forward(&mut t, y).unwrap();
        let d = b.discriminator.forward(&mut t, y).unwrap();
        (t.value(y).clone(), t.value(s).clone(), t.value(d).clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn default_taps_on_64() {
    let b = bundle(0);
    let mut t = Tape::inference();
    let x = t.constant(image(3, 1, 64, 64));
    let feats = b.generator.encode(&mut t, x, &DEFAULT_TAPS).unwrap();
    let sizes: Vec<usize> = feats.iter().map(|&f| t.shape(f)[2]).collect();
    assert_eq!(sizes, [64, 64, 32, 16, 16]);
    let audit = ModelBundle::<f32>::init(&ArchitectureConfig::default(), 0).unwrap().audit(64).unwrap();
    let audited: Vec<(usize, usize, usize)> = audit.taps.iter().map(|s| (s.channels, s.height, s.width)).collect();
    assert_eq!(audited, [(64, 64, 64), (128, 64, 64), (256, 32, 32), (256, 16, 16), (256, 16, 16)]);
    assert_eq!(audit.residual_blocks, 9);
    assert_eq!(audit.encoder_residual_blocks, 5);
    assert_eq!(audit.generator_widths, [64, 128, 256]);
    assert_eq!(audit.discriminator_widths, [64, 128, 256]);
    assert_eq!(audit.segmenter_widths.len(), 5);
    assert_eq!(audit.scse_blocks, 9);
    assert_eq!((audit.head_hidden, audit.head_out), (256, 256));
}

#[test]
fn invalid_tap_lists_valid_ones() {
    let b = bundle(0);
    let mut t = Tape::inference();
    let x = t.constant(image(3, 1, 16, 16));
    match b.generator.encode(&mut t, x, &[0, 8]) {
        Err(Error::InvalidTap { requested, valid }) => {
            assert_eq!(requested, 8);
            assert_eq!(valid, (0..TAP_NAMES.len()).collect::<Vec<_>>());
        }
        other => panic!("unexpected {other:?}"),
    }
    let one = b.generator.encode(&mut t, x, &[0]).unwrap();
    assert_eq!(one.len(), 1);
}

#[test]
fn taps_agree_with_full_forward() {
    let b = bundle(4);
    let mut t = Tape::inference();
    let x = t.constant(image(4, 1, 32, 32));
    let (y, taps) = b.generator.forward_with_taps(&mut t, x, &DEFAULT_TAPS).unwrap();
    let enc = b.generator.encode(&mut t, x, &DEFAULT_TAPS).unwrap();
    for (a, e) in taps.iter().zip(&enc) {
        assert_eq!(t.value(*a), t.value(*e));
    }
    let y2 = b.generator.forward(&mut t, x).unwrap();
    assert_eq!(t.value(y), t.value(y2));
}

#[test]
fn parameter_count_tracks_residual_plan() {
    let b = bundle(0);
    let audit = b.audit(32).unwrap();
    assert_eq!(audit.parameters.generator, b.generator.params.num_scalars());
    let res_params: usize = (0..b.generator.params.len())
        .filter(|&i| b.generator.params.name(i).starts_with("res"))
        .map(|i| b.generator.params.tensor(i).numel())
        .sum();
    // Each residual block holds two 3x3 convolutions at the bottleneck width.
    let w = small().generator.widths()[2];
    assert!(res_params >= 9 * 2 * w * w * 9, "{res_params}");
    assert!(res_params < 9 * 2 * (w * w * 9 + 4 * w));
}

#[test]
fn head_vectors_are_unit_and_deterministic() {
    let b = bundle(5);
    let mut t = Tape::inference();
    let x = t.constant(image(5, 2, 32, 32));
    let feats = b.generator.encode(&mut t, x, &DEFAULT_TAPS).unwrap();
    for (layer, &f) in feats.iter().enumerate() {
        let hw = t.shape(f)[2] * t.shape(f)[3];
        let locs: Vec<usize> = (0..hw).step_by(7).collect();
        let p = b.heads.project(&mut t, layer, f, 1, &locs).unwrap();
        assert_eq!(t.shape(p), [locs.len(), 16]);
        for row in t.value(p).data().chunks(16) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5, "layer {layer}: {n}");
        }
        let again = b.heads.project(&mut t, layer, f, 1, &locs).unwrap();
        assert_eq!(t.value(p), t.value(again));
        let err = b.heads.project(&mut t, layer, f, 0, &[hw]).unwrap_err();
        assert!(matches!(err, Error::LocationOutOfRange { .. }));
    }
    assert!(b.heads.project(&mut t, 0, feats[0], 2, &[0]).is_err());
}

#[test]
fn default_head_plan() {
    let h = HeadsConfig::default();
    assert_eq!((h.hidden, h.out), (256, 256));
    assert_eq!(h.taps, DEFAULT_TAPS);
    assert!(HeadsConfig { taps: vec![0, 0], ..Default::default() }.validate().is_err());
    assert!(HeadsConfig { taps: vec![9], ..Default::default() }.validate().is_err());
}

#[test]
fn discriminator_emits_smaller_logit_map() {
    let mut b = bundle(6);
    let mut t = Tape::inference();
    let x = t.constant(image(6, 1, 64, 64));
    let d = b.discriminator.forward(&mut t, x).unwrap();
    let s = t.shape(d).to_vec();
    assert_eq!(s[..2], [1, 1]);
    assert!(s[2] < 64 && s[3] < 64);
    b.discriminator.params.fill(0.0);
    let mut t = Tape::inference();
    let x = t.constant(image(6, 1, 64, 64));
    let d = b.discriminator.forward(&mut t, x).unwrap();
    assert!(t.value(d).data().iter().all(|&v| v == 0.0));
}

#[test]
fn segmenter_outputs_probabilities() {
    let b = bundle(7);
    assert_eq!(b.segmenter.levels(), 5);
    assert_eq!(b.segmenter.scse_blocks(), 9);
    for (h, w) in [(64, 64), (20, 36)] {
        let mut t = Tape::inference();
        let x = t.constant(image(7, 1, h, w));
        let p = b.segmenter.forward(&mut t, x).unwrap();
        assert_eq!(t.shape(p), [1, 1, h, w]);
        assert!(t.value(p).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
    let plain = SegmenterConfig { kind: SegmenterKind::Unet, base_width: 2, ..Default::default() };
    let m = Segmenter::<f64>::new(&plain, &mut rng::derive(0, 0)).unwrap();
    assert_eq!(m.scse_blocks(), 0);
}

#[test]
fn scse_gate_cases() {
    let mut rng = rng::derive(8, 8);
    let x = Tensor::from_fn(&[1, 3, 10, 6], |_| rng.random_range(-1.0..1.0));
    let ones_c = Tensor::full(&[1, 3, 1, 1], 1.0);
    let ones_s = Tensor::full(&[1, 1, 10, 6], 1.0);
    for combine in [ScseCombine::Max, ScseCombine::Mean] {
        let mut t = Tape::inference();
        let (xv, c, s) = (t.constant(x.clone()), t.constant(ones_c.clone()), t.constant(ones_s.clone()));
        let y = scse_combine(&mut t, xv, c, s, combine);
        assert_eq!(t.value(y), &x);
    }
    // Sum with both gates at 1 doubles the input.
    let mut t = Tape::inference();
    let (xv, c, s) = (t.constant(x.clone()), t.constant(ones_c.clone()), t.constant(ones_s));
    let y = scse_combine(&mut t, xv, c, s, ScseCombine::Sum);
    assert_eq!(t.value(y), &x.map(|v| 2.0 * v));
    // Spatial gate 0 leaves the channel-excited branch.
    let gate = Tensor::new(&[1, 3, 1, 1], vec![0.2, 0.5, 0.9]).unwrap();
    let mut t = Tape::inference();
    let xv = t.constant(x.clone());
    let c = t.constant(gate.clone());
    let s = t.constant(Tensor::zeros(&[1, 1, 10, 6]));
    let y = scse_combine(&mut t, xv, c, s, ScseCombine::Sum);
    let expected = Tensor::from_fn(&[1, 3, 10, 6], |i| x.data()[i] * gate.data()[i / 60]);
    assert!(t.value(y).max_abs_diff(&expected) < 1e-15);
}

#[test]
fn init_is_seeded() {
    let (a, b, c) = (bundle(9), bundle(9), bundle(10));
    for ((_, x), ((_, y), (_, z))) in a.stores().iter().zip(b.stores().iter().zip(c.stores().iter())) {
        let xs: Vec<_> = x.iter().map(|(_, t)| t.clone()).collect();
        let ys: Vec<_> = y.iter().map(|(_, t)| t.clone()).collect();
        let zs: Vec<_> = z.iter().map(|(_, t)| t.clone()).collect();
        assert_eq!(xs, ys);
        assert_ne!(xs, zs);
    }
}

#[test]
fn load_params_round_trips_and_rejects_other_widths() {
    let a = bundle(11);
    let mut b = bundle(12);
    let dump: Vec<(String, Vec<(String, Tensor<f64>)>)> = a
        .stores()
        .iter()
        .map(|(g, s)| (g.to_string(), s.iter().map(|(n, t)| (n.into(), t.clone())).collect()))
        .collect();
    b.load_params(&dump).unwrap();
    let probe = image(13, 1, 16, 16);
    let out = |m: &ModelBundle<f64>| {
        let mut t = Tape::inference();
        let x = t.constant(probe.clone());
        let y = m.generator.forward(&mut t, x).unwrap();
        t.value(y).clone()
    };
    assert_eq!(out(&a), out(&b));
    let mut wide_cfg = small();
    wide_cfg.generator.base_width = 6;
    let mut wide = ModelBundle::<f64>::init(&wide_cfg, 0).unwrap();
    let err = wide.load_params(&dump).unwrap_err();
    assert!(matches!(err, Error::Architecture(ref m) if m.contains("generator")), "{err}");
}

#[test]
fn segmentation_gradient_reaches_generator() {
    let b = bundle(14);
    let mut t = Tape::new();
    let x = t.constant(image(14, 1, 16, 16));
    let y = b.generator.forward(&mut t, x).unwrap();
    let p = b.segmenter.forward(&mut t, y).unwrap();
    let l = t.mean(p);
    let g = t.backward(l);
    let norm = |grads: Vec<Option<Vec<f64>>>| grads.into_iter().flatten().flatten().map(|v| v * v).sum::<f64>();
    assert!(norm(g.for_store(&b.generator.params)) > 0.0);
    assert!(norm(g.for_store(&b.segmenter.params)) > 0.0);
    assert_eq!(norm(g.for_store(&b.discriminator.params)), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scse_preserves_shape(n in 1usize..3, c in 1usize..5, h in 1usize..7, w in 1usize..7) {
        let mut rng = rng::derive(1, 1);
        let mut t = Tape::<f64>::inference();
        let x = t.constant(Tensor::from_fn(&[n, c, h, w], |_| rng.random_range(-1.0..1.0)));
        let cg = t.constant(Tensor::from_fn(&[n, c, 1, 1], |_| rng.random_range(0.0..1.0)));
        let sg = t.constant(Tensor::from_fn(&[n, 1, h, w], |_| rng.random_range(0.0..1.0)));
        for combine in [ScseCombine::Sum, ScseCombine::Max, ScseCombine::Mean] {
            let y = scse_combine(&mut t, x, cg, sg, combine);
            prop_assert_eq!(t.shape(y), &[n, c, h, w][..]);
        }
    }
}
