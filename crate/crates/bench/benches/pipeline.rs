use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use promptseg::hiar::{adjust_to_ratio, mine_hard_patches};
use promptseg::train::{training_rng, Trainer};
use promptseg::{evaluate, MaskPair};
use promptseg_bench::{label_masks, Fixture};

fn metrics(c: &mut Criterion) {
    let preds = label_masks(32, 64 * 64, 4);
    let gts = label_masks(32, 64 * 64, 4);
    let ids: Vec<String> = (0..32).map(|i| format!("img_{i:04}")).collect();
    let pairs: Vec<MaskPair> =
        ids.iter().zip(preds.iter().zip(&gts)).map(|(id, (p, g))| MaskPair { id, pred: p, gt: g }).collect();
    c.bench_function("evaluate_32x64x64", |b| b.iter(|| evaluate(black_box(&pairs)).unwrap()));
}

fn masking(c: &mut Criterion) {
    let pred = label_masks(1, 64 * 64, 4).remove(0);
    let gt = label_masks(2, 64 * 64, 4).remove(1);
    let mut rng = training_rng(0);
    c.bench_function("mine_and_adjust_64px_p16", |b| {
        b.iter(|| {
            let hard = mine_hard_patches(black_box(&pred), &gt, 64, 64, 16).unwrap();
            adjust_to_ratio(&hard, 0.25, &mut rng).unwrap()
        })
    });
}

fn model(c: &mut Criterion) {
    let fx = Fixture::desk();
    let image = fx.data.samples[0].image.clone();
    let mut group = c.benchmark_group("desk");
    group.sample_size(20);
    group.bench_function("predict", |b| b.iter(|| fx.model.predict(black_box(&image)).unwrap()));
    group.bench_function("encode_prompt_uncached", |b| {
        b.iter(|| fx.model.encode_text_uncached(black_box("the surgical instrument area represented by the grasper")).unwrap())
    });

    let fx = Fixture::desk();
    let train: Vec<_> = fx.data.train().into_iter().cloned().collect();
    let mut trainer = Trainer::new(fx.model, fx.data.manifest.augmentation.clone());
    let batch: Vec<_> = train.iter().take(2).collect();
    group.bench_function("train_step_batch2", |b| b.iter(|| trainer.step(black_box(&batch), 1e-4).unwrap()));
    group.finish();
}

criterion_group!(benches, metrics, masking, model);
criterion_main!(benches);
