use aviary_core::gating::BBox;
use aviary_core::media::{blur_score, crop, normalize, resize, FrameImage};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise_frame(w: u32, h: u32) -> FrameImage {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let px = (0..w * h * 3).map(|_| rng.gen()).collect();
    FrameImage::new(w, h, px).unwrap()
}

fn bench_blur(c: &mut Criterion) {
    let mut group = c.benchmark_group("blur_score");
    for (w, h) in [(640, 480), (2560, 1920)] {
        let f = noise_frame(w, h);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{w}x{h}")), &f, |b, f| {
            b.iter(|| blur_score(f).unwrap())
        });
    }
    group.finish();
}

fn bench_crop_resize(c: &mut Criterion) {
    let f = noise_frame(2560, 1920);
    let bbox = BBox::new(700.0, 500.0, 1300.0, 900.0).unwrap();
    c.bench_function("crop_600x400_resize_224", |b| {
        b.iter(|| {
            let roi = crop(&f, &bbox).unwrap();
            resize(&roi, 224, 224).unwrap()
        })
    });
    let small = resize(&crop(&f, &bbox).unwrap(), 224, 224).unwrap();
    c.bench_function("normalize_224", |b| b.iter(|| normalize(&small)));
}

criterion_group!(benches, bench_blur, bench_crop_resize);
criterion_main!(benches);
