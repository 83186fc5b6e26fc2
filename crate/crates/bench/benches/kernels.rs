use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfga_core::backbone::{train_epoch, BackboneParams, ModelConfig, Sgd, TrainConfig, Variant};
use rfga_core::rfga::{rfga_forward, RfgaConfig, RfgaParams};
use rfga_core::synth::{generate_dataset, SynthSpec};
use rfga_core::wsol::{self, EvalSample, Upsample, DEFAULT_DELTAS};
use rfga_core::{BoundingBox, Mode, Tape, Tensor};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn conv2d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(&[20, 32, 16, 16], &mut rng);
    let w = random(&[64, 32, 3, 3], &mut rng);
    c.bench_function("conv2d fwd+bwd 20x32x16x16 -> 64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.param(x.clone());
            let wv = tape.param(w.clone());
            let y = tape.conv2d(xv, wv).unwrap();
            let s = tape.sum(y);
            tape.backward(s).unwrap()
        })
    });
}

fn rfga(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[20, 64, 8, 8], &mut rng);
    let params = RfgaParams::new(3, 64, 8, 8, &mut rng).unwrap();
    let cfg = RfgaConfig::default();
    c.bench_function("rfga forward 20x64x8x8", |b| {
        b.iter(|| rfga_forward(&x, &cfg, &params, Mode::Train).unwrap())
    });
}

fn train_step(c: &mut Criterion) {
    let spec = SynthSpec {
        train_per_class: 3,
        test_per_class: 1,
        ..SynthSpec::default()
    };
    let data = generate_dataset(&spec).unwrap();
    let batch = &data.train[..20];
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("train step, batch 20 at 64x64");
    group.sample_size(10);
    for variant in [Variant::CamBaseline, Variant::RfgaResidual] {
        let model = ModelConfig {
            n_classes: spec.n_classes,
            image_size: spec.image_size,
            rfga: variant.rfga_config(3),
        };
        group.bench_function(variant.name(), |b| {
            b.iter_batched(
                || BackboneParams::init(model.clone(), 0).unwrap(),
                |mut p| {
                    let mut sgd = Sgd::new(&mut p, cfg.momentum);
                    train_epoch(batch, &mut p, &mut sgd, &cfg, 0).unwrap()
                },
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let samples: Vec<EvalSample> = (0..100)
        .map(|_| {
            let (x0, y0) = (rng.random_range(0..32), rng.random_range(0..32));
            let gt = BoundingBox::new(x0, y0, x0 + 20, y0 + 20).unwrap();
            EvalSample::new(random(&[8, 8], &mut rng), gt, (64, 64)).unwrap()
        })
        .collect();
    let norm = wsol::normalize_map(&samples[0].activation);
    c.bench_function("extract_box 8x8 -> 64x64", |b| {
        b.iter(|| wsol::extract_box(&norm, 0.3, (64, 64), Upsample::Nearest).unwrap())
    });
    c.bench_function("max_box_acc, 100 maps x 101 thresholds", |b| {
        b.iter(|| wsol::max_box_acc(&samples, &DEFAULT_DELTAS, Upsample::Nearest).unwrap())
    });
}

criterion_group!(benches, conv2d, rfga, train_step, evaluation);
criterion_main!(benches);
