mod oracles;

use oracles::{random_tensor, rng, sigmoid};
use rand::Rng;
use rfga_core::backbone::{
    self, forward_classify, predict, schedule_loss, top1_accuracy, train_epoch, BackboneParams, Example,
    ModelConfig, Sgd, TrainConfig, Variant,
};
use rfga_core::rfga::RfgaParams;
use rfga_core::{Mode, Tape, Tensor};

#[derive(Clone)]
struct Ex {
    image: Tensor,
    label: usize,
}

impl Example for Ex {
    fn image(&self) -> &Tensor {
        &self.image
    }

    fn label(&self) -> usize {
        self.label
    }
}

fn model(variant: Variant, n_classes: usize, image_size: usize, seed: u64) -> BackboneParams {
    let cfg = ModelConfig {
        n_classes,
        image_size,
        rfga: variant.rfga_config(3),
    };
    BackboneParams::init(cfg, seed).unwrap()
}

/// A coloured square whose colour channel encodes the label.
fn toy_data(n_classes: usize, per_class: usize, size: usize, seed: u64) -> Vec<Ex> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    for i in 0..n_classes * per_class {
        let label = i % n_classes;
        let (y0, x0) = (r.random_range(0..size / 2), r.random_range(0..size / 2));
        let image = Tensor::from_fn(&[3, size, size], |j| {
            let inside = (y0..y0 + size / 2).contains(&j[1]) && (x0..x0 + size / 2).contains(&j[2]);
            let on = j[0] == label % 3 && inside;
            let bias = if inside { 0.3 * (label / 3) as f64 } else { 0.0 };
            if on { 1.0 } else { bias + 0.05 * r.random::<f64>() }
        });
        out.push(Ex { image, label });
    }
    out
}

#[test]
fn logits_are_spatial_means_of_score_maps() {
    for seed in 0..4 {
        for variant in Variant::ALL {
            let p = model(variant, 5, 16, seed);
            let x = random_tensor(&[3, 3, 16, 16], 0.0, 1.0, &mut rng(seed));
            for mode in [Mode::Train, Mode::Eval] {
                let (logits, maps) = forward_classify(&x, &p, mode).unwrap();
                assert_eq!(maps.shape(), &[3, 5, 2, 2]);
                for n in 0..3 {
                    for k in 0..5 {
                        let mean: f64 = (0..4).map(|i| maps.data()[(n * 5 + k) * 4 + i]).sum::<f64>() / 4.0;
                        assert!((logits.at(&[n, k]) - mean).abs() <= 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn zero_head_gives_zero_logits() {
    let mut p = model(Variant::RfgaResidual, 4, 16, 1);
    p.head = Tensor::zeros(p.head.shape());
    let x = random_tensor(&[2, 3, 16, 16], 0.0, 1.0, &mut rng(1));
    let (logits, _) = forward_classify(&x, &p, Mode::Eval).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
}

#[test]
fn neutral_attention_scales_score_maps_by_constant_gate() {
    let gate = 1.0 + sigmoid(1.5);
    for seed in 0..5 {
        let mut with = model(Variant::RfgaResidual, 6, 24, seed);
        with.rfga = Some(RfgaParams::zeroed(3, 64, 3, 3).unwrap());
        let mut without = with.clone();
        without.rfga = None;
        without.config.rfga = None;
        let x = random_tensor(&[2, 3, 24, 24], 0.0, 1.0, &mut rng(seed));
        let (_, a) = forward_classify(&x, &with, Mode::Eval).unwrap();
        let (_, b) = forward_classify(&x, &without, Mode::Eval).unwrap();
        assert!(a.max_abs_diff(&b.scale(gate)) <= 1e-12);
    }
}

fn features_and_maps(p: &BackboneParams, x: &Tensor) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let vars = p.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let t = p.forward_on_tape(&mut tape, &vars, xv, Mode::Eval).unwrap();
    (tape.value(t.calibrated).clone(), tape.value(t.score_maps).clone())
}

#[test]
fn cam_is_the_head_row_dotted_with_each_feature_vector() {
    for seed in 0..5 {
        for variant in [Variant::CamBaseline, Variant::RfgaResidual] {
            let p = model(variant, 4, 16, seed);
            let x = random_tensor(&[2, 3, 16, 16], 0.0, 1.0, &mut rng(seed + 10));
            let (feat, maps) = features_and_maps(&p, &x);
            for n in 0..2 {
                let sm = maps.index_axis0(n).unwrap();
                for k in 0..4 {
                    let c = backbone::cam(&sm, k).unwrap();
                    for y in 0..2 {
                        for xx in 0..2 {
                            let dot: f64 = (0..64).map(|ch| p.head.at(&[k, ch, 0, 0]) * feat.at(&[n, ch, y, xx])).sum();
                            assert!((c.at(&[y, xx]) - dot).abs() <= 1e-12);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn selector_head_and_linearity() {
    let mut p = model(Variant::CamBaseline, 3, 16, 2);
    let x = random_tensor(&[1, 3, 16, 16], 0.0, 1.0, &mut rng(2));
    let (feat, _) = features_and_maps(&p, &x);
    let j = 17;
    p.head = Tensor::from_fn(&[3, 64, 1, 1], |i| if i[0] == 1 && i[1] == j { 1.0 } else { 0.0 });
    let (_, maps) = features_and_maps(&p, &x);
    let c = backbone::cam(&maps.index_axis0(0).unwrap(), 1).unwrap();
    let channel = feat.index_axis0(0).unwrap().index_axis0(j).unwrap();
    assert_eq!(c, channel);

    let ha = random_tensor(&[3, 64, 1, 1], -1.0, 1.0, &mut rng(3));
    let hb = random_tensor(&[3, 64, 1, 1], -1.0, 1.0, &mut rng(4));
    let mut sum = ha.clone();
    for (s, b) in sum.data_mut().iter_mut().zip(hb.data()) {
        *s += b;
    }
    let mut run = |h: &Tensor| {
        p.head = h.clone();
        let (_, m) = features_and_maps(&p, &x);
        backbone::cam(&m.index_axis0(0).unwrap(), 2).unwrap()
    };
    let (ca, cb, cs) = (run(&ha), run(&hb), run(&sum));
    for i in 0..4 {
        assert!((cs.data()[i] - ca.data()[i] - cb.data()[i]).abs() <= 1e-12);
    }
}

#[test]
fn shifting_by_one_stride_shifts_the_cam_by_one_cell() {
    let mut p = model(Variant::CamBaseline, 3, 64, 5);
    for b in &mut p.blocks {
        let mut r = rng(b.weight.len() as u64);
        b.norm.running_mean = random_tensor(b.norm.running_mean.shape(), -0.2, 0.2, &mut r);
        b.norm.beta = random_tensor(b.norm.beta.shape(), -0.3, 0.3, &mut r);
    }
    let mut r = rng(6);
    let content = random_tensor(&[3, 24, 24], 0.0, 1.0, &mut r);
    let place = |oy: usize, ox: usize| {
        Tensor::from_fn(&[1, 3, 64, 64], |i| {
            let (y, x) = (i[2] as isize - oy as isize, i[3] as isize - ox as isize);
            if (0..24).contains(&y) && (0..24).contains(&x) {
                content.at(&[i[1], y as usize, x as usize])
            } else {
                0.0
            }
        })
    };
    let (_, a) = forward_classify(&place(16, 16), &p, Mode::Eval).unwrap();
    let (_, b) = forward_classify(&place(24, 16), &p, Mode::Eval).unwrap();
    let (_, c) = forward_classify(&place(16, 24), &p, Mode::Eval).unwrap();
    for k in 0..3 {
        for y in 1..6 {
            for x in 1..6 {
                let v = a.at(&[0, k, y, x]);
                assert!((b.at(&[0, k, y + 1, x]) - v).abs() <= 1e-9);
                assert!((c.at(&[0, k, y, x + 1]) - v).abs() <= 1e-9);
            }
        }
    }
}

fn run(variant: Variant, data: &[Ex], cfg: &TrainConfig) -> (Vec<f64>, BackboneParams) {
    let mut p = model(variant, 4, 16, cfg.seed);
    let mut sgd = Sgd::new(&mut p, cfg.momentum);
    let losses = (0..cfg.epochs)
        .map(|e| train_epoch(data, &mut p, &mut sgd, cfg, e).unwrap().mean_loss)
        .collect();
    (losses, p)
}

#[test]
fn training_is_deterministic() {
    let data = toy_data(4, 6, 16, 1);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 5,
        seed: 9,
        ..TrainConfig::default()
    };
    for variant in [Variant::CamBaseline, Variant::RfgaResidual] {
        let (la, pa) = run(variant, &data, &cfg);
        let (lb, pb) = run(variant, &data, &cfg);
        assert_eq!(la.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), lb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(pa, pb);
    }
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let data = toy_data(4, 5, 16, 2);
    let cfg = TrainConfig {
        lr: 0.0,
        epochs: 1,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let mut p = model(Variant::RfgaResidual, 4, 16, 0);
    let before = p.clone();
    let expected = schedule_loss(&data, &p, &cfg, 0).unwrap();
    let mut sgd = Sgd::new(&mut p, cfg.momentum);
    let stats = train_epoch(&data, &mut p, &mut sgd, &cfg, 0).unwrap();
    assert!((stats.mean_loss - expected).abs() <= 1e-12);
    let mut a = p.clone();
    let mut b = before;
    for (x, y) in a.parameters_mut().into_iter().zip(b.parameters_mut()) {
        assert_eq!(x, y);
    }
}

#[test]
fn duplicated_single_sample_loss_strictly_decreases() {
    let base = toy_data(4, 1, 16, 3);
    let data: Vec<Ex> = (0..8).flat_map(|_| base.iter().cloned()).collect();
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 8,
        ..TrainConfig::default()
    };
    for variant in [Variant::CamBaseline, Variant::RfgaResidual] {
        let (losses, _) = run(variant, &data, &cfg);
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "{variant}: {losses:?}");
        }
    }
}

#[test]
fn top1_constructions() {
    let data = toy_data(4, 5, 16, 4);
    let p = model(Variant::CamBaseline, 4, 16, 1);
    let preds = predict(&data, &p).unwrap();
    let matched: Vec<Ex> = data
        .iter()
        .zip(&preds)
        .map(|(d, pr)| Ex {
            image: d.image.clone(),
            label: pr.predicted,
        })
        .collect();
    assert_eq!(top1_accuracy(&matched, &p).unwrap(), 1.0);
    let complement: Vec<Ex> = matched
        .iter()
        .map(|d| Ex {
            image: d.image.clone(),
            label: (d.label + 1) % 4,
        })
        .collect();
    assert_eq!(top1_accuracy(&complement, &p).unwrap(), 0.0);
    assert!(top1_accuracy::<Ex>(&[], &p).is_err());
}

#[test]
fn untrained_network_is_at_chance() {
    let data = toy_data(10, 4, 16, 5);
    let accs: Vec<f64> = (0..8)
        .map(|seed| {
            let cfg = ModelConfig {
                n_classes: 10,
                image_size: 16,
                rfga: None,
            };
            top1_accuracy(&data, &BackboneParams::init(cfg, seed).unwrap()).unwrap()
        })
        .collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.1).abs() <= 0.05, "{accs:?}");
}
