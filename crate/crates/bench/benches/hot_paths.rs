//! Hot paths: forward pass, per-sample gradient, surface metrics, and the
//! synthetic generator.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use promptseg_core::autodiff::Tape;
use promptseg_core::data::{generate_synthetic_sample, SyntheticConfig};
use promptseg_core::geometry::Mask2D;
use promptseg_core::losses::LossMode;
use promptseg_core::metrics::{assd, nsd};
use promptseg_core::model::{
    encode_image, forward_with_embedding, init_model, BoundParams, ModelConfig,
};
use promptseg_core::rng::rng_for;
use promptseg_core::trainer::{ground_truth_boxes, sample_loss_graph};

fn bench_forward(c: &mut Criterion) {
    let config = ModelConfig::default();
    let params = init_model::<f32>(&config, 1).unwrap();
    let sample = generate_synthetic_sample(&SyntheticConfig::default(), 0).unwrap();
    let roles = vec!["lesion".to_string(), "organ".to_string()];
    let boxes = ground_truth_boxes(&sample, &roles).unwrap();
    let embedding = encode_image(&params, &config, &sample.image).unwrap();

    c.bench_function("encode_image_64", |b| {
        b.iter(|| encode_image(&params, &config, black_box(&sample.image)).unwrap())
    });
    c.bench_function("decode_two_prompts_64", |b| {
        b.iter(|| {
            forward_with_embedding(&params, &config, black_box(&embedding), black_box(&boxes))
                .unwrap()
        })
    });
}

fn bench_train_step(c: &mut Criterion) {
    let config = ModelConfig::default();
    let mut params = init_model::<f32>(&config, 1).unwrap();
    params.set_trainable(promptseg_core::model::ParamGroup::Encoder, false);
    let sample = generate_synthetic_sample(&SyntheticConfig::default(), 0).unwrap();
    let roles = vec!["lesion".to_string(), "organ".to_string()];
    let boxes = ground_truth_boxes(&sample, &roles).unwrap();
    let embedding = encode_image(&params, &config, &sample.image).unwrap();

    c.bench_function("sample_forward_backward_64", |b| {
        b.iter(|| {
            let mut tape: Tape<f32> = Tape::new();
            let bound = BoundParams::bind(&mut tape, &params);
            let emb = tape.constant(embedding.tensor.clone());
            let (loss, _, _) = sample_loss_graph(
                &mut tape,
                &bound,
                &config,
                emb,
                &sample,
                &roles,
                &boxes,
                LossMode::CotrainMax,
            )
            .unwrap();
            black_box(tape.backward(loss).unwrap());
        })
    });
}

fn bench_metrics(c: &mut Criterion) {
    let mut rng = rng_for(3, "bench-metrics", 0);
    use rand::Rng;
    let mask = |rng: &mut rand_chacha::ChaCha8Rng| {
        Mask2D::new(
            64,
            64,
            (0..64 * 64).map(|_| rng.random_range(0..2u8)).collect(),
        )
        .unwrap()
    };
    let a = mask(&mut rng);
    let b = mask(&mut rng);
    c.bench_function("nsd_64x64", |bch| {
        bch.iter(|| nsd(black_box(&a), black_box(&b), 1.0).unwrap())
    });
    c.bench_function("assd_64x64", |bch| {
        bch.iter(|| assd(black_box(&a), black_box(&b)).unwrap())
    });
}

fn bench_generator(c: &mut Criterion) {
    let config = SyntheticConfig::default();
    c.bench_function("generate_sample_64", |b| {
        let mut i = 0u64;
        b.iter(|| {
            i += 1;
            generate_synthetic_sample(black_box(&config), i).unwrap()
        })
    });
}

criterion_group!(
    benches,
    bench_forward,
    bench_train_step,
    bench_metrics,
    bench_generator
);
criterion_main!(benches);
