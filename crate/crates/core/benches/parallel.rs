//! Parallel core against its single-threaded execution.
//!
//! With the default `parallel` feature every workload runs twice: on the
//! global rayon pool and inside a one-thread pool. Built with
//! `--no-default-features` the same workloads run on the sequential
//! fallback and are labelled `sequential`.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lesionseg::dataset::{generate_synthetic, CenterRef, SplitName, SynthConfig};
use lesionseg::hgn::{hgn_forward, HgnArch, HgnModel};
use lesionseg::preprocess::{prepare, Scale};
use lesionseg::prn::{score_centers, PrnArch, PrnModel, PrnTrainConfig, PrnTrainer, TripletPatches};
use lesionseg::raster::{FundusImage, Raster};
use rand::{Rng, SeedableRng};

fn images() -> Vec<FundusImage> {
    let cfg = SynthConfig {
        image_size: 96,
        train_healthy: 2,
        train_lesion: 2,
        validation_healthy: 0,
        validation_lesion: 0,
        test_healthy: 0,
        test_lesion: 0,
        ..SynthConfig::default()
    };
    let data = generate_synthetic(&cfg, 1).unwrap();
    data.images_in(SplitName::Train).iter().map(|i| prepare(i, Scale::Full, 30.0).unwrap()).collect()
}

fn patch(n: usize, rng: &mut impl Rng) -> Raster {
    Raster::from_vec(3, n, n, (0..3 * n * n).map(|_| rng.random::<f64>()).collect()).unwrap()
}

/// `(label, runner)` pairs: every way this build can execute a workload.
fn executors() -> Vec<(String, Box<dyn Fn(&mut (dyn FnMut() + Send))>)> {
    #[cfg(feature = "parallel")]
    {
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        vec![
            (format!("rayon-{}", rayon::current_num_threads()), Box::new(|f: &mut (dyn FnMut() + Send)| f())),
            ("rayon-1".into(), Box::new(move |f: &mut (dyn FnMut() + Send)| one.install(f))),
        ]
    }
    #[cfg(not(feature = "parallel"))]
    {
        vec![("sequential".into(), Box::new(|f: &mut (dyn FnMut() + Send)| f()))]
    }
}

fn bench(c: &mut Criterion) {
    let imgs = images();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let hgn = HgnModel::new(HgnArch::tiny(), Scale::Full, 1).unwrap();
    let prn_arch = PrnArch { patch_size: 33, ..PrnArch::tiny() };
    let prn = PrnModel::new(prn_arch.clone(), 1).unwrap();
    let trainer = PrnTrainer::new(
        prn.clone(),
        PrnTrainConfig {
            arch: prn_arch,
            ..PrnTrainConfig::default()
        },
    );
    let batch = TripletPatches {
        anchors: (0..8).map(|_| patch(33, &mut rng)).collect(),
        positives: (0..8).map(|_| patch(33, &mut rng)).collect(),
        negatives: (0..8).map(|_| patch(33, &mut rng)).collect(),
    };
    let centers: Vec<CenterRef> = (0..256)
        .map(|i| CenterRef { image: (i % 4) as u32, row: rng.random_range(0..96), col: rng.random_range(0..96) })
        .collect();

    let mut group = c.benchmark_group("parallel");
    group.sample_size(10);
    for (label, exec) in executors() {
        group.bench_function(BenchmarkId::new("hgn_forward_96", &label), |b| {
            b.iter(|| exec(&mut || drop(hgn_forward(&hgn, &imgs[0].pixels).unwrap())))
        });
        group.bench_function(BenchmarkId::new("prn_triplet_grads_8", &label), |b| {
            b.iter(|| exec(&mut || drop(trainer.loss_and_grads(&batch).unwrap())))
        });
        group.bench_function(BenchmarkId::new("prn_score_256_centers", &label), |b| {
            b.iter(|| exec(&mut || drop(score_centers(&prn, &imgs, &centers))))
        });
        group.bench_function(BenchmarkId::new("synth_4_images", &label), |b| {
            b.iter(|| exec(&mut || drop(images())))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
