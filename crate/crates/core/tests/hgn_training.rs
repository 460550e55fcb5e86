use std::time::Instant;

use lesionseg::dataset::{generate_synthetic, stream_rng, CenterIndex, SplitName, SynthConfig};
use lesionseg::hgn::{sample_batch, train_hgn, HgnArch, HgnModel, HgnTrainConfig, HgnTrainer};
use lesionseg::preprocess::{prepare, Scale};
use lesionseg::raster::FundusImage;

fn prepared(split: SplitName, scale: Scale, seed: u64, cfg: &SynthConfig) -> Vec<FundusImage> {
    let data = generate_synthetic(cfg, seed).unwrap();
    data.images_in(split).iter().map(|i| prepare(i, scale, 30.0).unwrap()).collect()
}

fn small_synth() -> SynthConfig {
    SynthConfig {
        image_size: 96,
        train_healthy: 4,
        train_lesion: 4,
        validation_healthy: 1,
        validation_lesion: 2,
        test_healthy: 0,
        test_lesion: 0,
        ..SynthConfig::default()
    }
}

fn tiny_cfg() -> HgnTrainConfig {
    HgnTrainConfig {
        arch: HgnArch::tiny(),
        lr_full: 2e-3,
        lr_half: 2e-3,
        batch_size: 4,
        batches_per_epoch: 10,
        max_epochs: 2,
        patience: 10,
        patch_size: 32,
        ..HgnTrainConfig::default()
    }
}

#[test]
fn single_batch_overfit() {
    let images = prepared(SplitName::Train, Scale::Full, 3, &small_synth());
    let cfg = tiny_cfg();
    let index = CenterIndex::build(&images, false).unwrap();
    let batch = sample_batch(&images, &index, &cfg, &mut stream_rng(1, "overfit")).unwrap();
    let mut trainer = HgnTrainer::new(HgnModel::new(cfg.arch.clone(), Scale::Full, 5).unwrap(), cfg);
    let start = Instant::now();
    let first = trainer.step(&batch, 0).unwrap().total;
    let mut last = first;
    for step in 1..600 {
        last = trainer.step(&batch, 0).unwrap().total;
        if last < 0.1 {
            eprintln!("overfit reached {last:.4} after {step} steps in {:?}", start.elapsed());
            break;
        }
    }
    assert!(last < 0.1, "combined loss stayed at {last} (from {first})");
}

#[test]
fn epoch_loss_decreases_for_three_seeds() {
    let cfg = tiny_cfg();
    for seed in [1u64, 2, 3] {
        let train = prepared(SplitName::Train, Scale::Full, seed, &small_synth());
        let val = prepared(SplitName::Validation, Scale::Full, seed, &small_synth());
        let start = Instant::now();
        let out = train_hgn(Scale::Full, &train, &val, &cfg, seed, &mut |_, _, _| Ok(())).unwrap();
        eprintln!(
            "seed {seed}: losses {:.4} -> {:.4} in {:?}",
            out.log[0].loss,
            out.log[1].loss,
            start.elapsed()
        );
        assert!(out.log[1].loss < out.log[0].loss, "seed {seed}: {:?}", out.log);
        assert!(out.log.iter().all(|r| r.val_pr_auc.is_some()));
    }
}

#[test]
fn empty_pool_is_a_usage_error() {
    let err = train_hgn(Scale::Full, &[], &[], &tiny_cfg(), 0, &mut |_, _, _| Ok(())).err().unwrap();
    assert_eq!(err.code(), "E_USAGE");
}
