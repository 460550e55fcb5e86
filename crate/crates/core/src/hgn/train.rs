use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{EarlyStopping, EpochRecord};
use crate::dataset::{stream_rng, CenterIndex};
use crate::error::{Error, Result};
use crate::eval::pr_auc;
use crate::nn::{Adam, Grads, Tape, Tensor};
use crate::par;
use crate::preprocess::Scale;
use crate::prob_map::ProbabilityMap;
use crate::raster::{FundusImage, Mask, Raster};

use super::loss::{batch_loss, ClassWeights, LossTerms};
use super::model::{hgn_forward, HgnArch, HgnModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HgnTrainConfig {
    pub arch: HgnArch,
    pub lr_full: f64,
    pub lr_half: f64,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub patch_size: usize,
    /// Share of each mini-batch centered on lesion pixels.
    pub lesion_fraction: f64,
    pub ce_weight: f64,
    pub dice_weight: f64,
    pub pos_weight_cap: f64,
}

impl Default for HgnTrainConfig {
    fn default() -> Self {
        Self {
            arch: HgnArch::frrn_a(),
            lr_full: 1e-6,
            lr_half: 1e-5,
            batch_size: 10,
            batches_per_epoch: 1000,
            max_epochs: 200,
            patience: 10,
            patch_size: 256,
            lesion_fraction: 0.5,
            ce_weight: 1.0,
            dice_weight: 1.0,
            pos_weight_cap: 100.0,
        }
    }
}

impl HgnTrainConfig {
    pub fn lr(&self, scale: Scale) -> f64 {
        match scale {
            Scale::Full => self.lr_full,
            Scale::Half => self.lr_half,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let bad = |m: String| Err(Error::Config(format!("hgn: {m}")));
        if !(self.lr_full > 0.0 && self.lr_half > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.batch_size == 0 || self.batches_per_epoch == 0 || self.max_epochs == 0 {
            return bad("batch_size, batches_per_epoch and max_epochs must be positive".into());
        }
        let stride = self.arch.total_stride();
        if self.patch_size == 0 || self.patch_size % stride != 0 {
            return bad(format!("patch_size must be a positive multiple of the network stride {stride}"));
        }
        if !(0.0..=1.0).contains(&self.lesion_fraction) {
            return bad("lesion_fraction must lie in [0, 1]".into());
        }
        if self.ce_weight < 0.0 || self.dice_weight < 0.0 || self.pos_weight_cap < 1.0 {
            return bad("loss weights must be non-negative and pos_weight_cap >= 1".into());
        }
        Ok(())
    }
}

/// Input patches with their target masks.
#[derive(Debug, Clone)]
pub struct HgnBatch {
    pub inputs: Vec<Raster>,
    pub targets: Vec<Mask>,
}

/// Draws a mini-batch: `round(batch·lesion_fraction)` patches centered on
/// lesion pixels, the rest on healthy-image pixels.
pub fn sample_batch<R: Rng + ?Sized>(
    images: &[FundusImage],
    index: &CenterIndex,
    cfg: &HgnTrainConfig,
    rng: &mut R,
) -> Result<HgnBatch> {
    let n_lesion = (cfg.batch_size as f64 * cfg.lesion_fraction).round() as usize;
    let mut inputs = Vec::with_capacity(cfg.batch_size);
    let mut targets = Vec::with_capacity(cfg.batch_size);
    for i in 0..cfg.batch_size {
        let c = if i < n_lesion {
            index.sample_lesion(rng)?
        } else {
            index.sample_healthy(images, rng)?
        };
        let image = &images[c.image as usize];
        let (r, col) = (c.row as usize, c.col as usize);
        inputs.push(image.pixels.crop_reflect(r, col, cfg.patch_size));
        targets.push(match &image.mask {
            Some(m) => m.crop_reflect(r, col, cfg.patch_size),
            None => Mask::zeros(cfg.patch_size, cfg.patch_size),
        });
    }
    Ok(HgnBatch { inputs, targets })
}

/// Model plus optimizer state.
pub struct HgnTrainer {
    pub model: HgnModel,
    pub adam: Adam,
    pub cfg: HgnTrainConfig,
}

impl HgnTrainer {
    pub fn new(model: HgnModel, cfg: HgnTrainConfig) -> Self {
        let adam = Adam::new(&model.params, cfg.lr(model.scale));
        Self { model, adam, cfg }
    }

    /// Loss and summed parameter gradients of one batch, without updating.
    pub fn loss_and_grads(&self, batch: &HgnBatch) -> Result<(LossTerms, Grads)> {
        let model = &self.model;
        let tapes = par::map(&batch.inputs, |x| {
            let mut tape = Tape::new(&model.params);
            let input = tape.input(Tensor::from(x.clone()));
            let out = model.forward(&mut tape, input);
            (tape, out)
        });
        let logits: Vec<&Tensor> = tapes.iter().map(|(t, o)| t.value(*o)).collect();
        let targets: Vec<&[u8]> = batch.targets.iter().map(Mask::data).collect();
        let weights = ClassWeights::balanced(&targets, self.cfg.pos_weight_cap);
        let (terms, seeds) = batch_loss(&logits, &targets, weights, self.cfg.ce_weight, self.cfg.dice_weight)?;
        let idx: Vec<usize> = (0..tapes.len()).collect();
        let parts = par::map(&idx, |&i| {
            let (tape, out) = &tapes[i];
            tape.backward(&[(*out, &seeds[i])])
        });
        Ok((terms, Grads::sum(&model.params, &parts)))
    }

    /// One optimizer update. Non-finite loss or gradients abort with
    /// [`Error::Diverged`].
    pub fn step(&mut self, batch: &HgnBatch, epoch: usize) -> Result<LossTerms> {
        let (terms, grads) = self.loss_and_grads(batch)?;
        if !terms.total.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step: self.adam.step as usize,
                detail: format!("hgn loss {} (ce {}, dice {})", terms.total, terms.ce, terms.dice),
            });
        }
        self.adam.update(&mut self.model.params, &grads);
        Ok(terms)
    }
}

/// Probability maps of whole preprocessed images, in input order.
pub fn predict_images(model: &HgnModel, images: &[FundusImage]) -> Result<Vec<ProbabilityMap>> {
    par::map(images, |img| {
        hgn_forward(model, &img.pixels).map(|mut m| {
            m.source_id = img.id.clone();
            m
        })
    })
    .into_iter()
    .collect()
}

/// Pooled PR-AUC of a model on preprocessed images with masks. `None` when
/// the set has no lesion pixels.
pub fn validation_pr_auc(model: &HgnModel, images: &[FundusImage]) -> Result<Option<f64>> {
    let labelled: Vec<FundusImage> = images.iter().filter(|i| i.mask.is_some()).cloned().collect();
    if labelled.iter().all(|i| i.mask.as_ref().is_some_and(Mask::is_all_zero)) {
        return Ok(None);
    }
    let maps = predict_images(model, &labelled)?;
    let pairs: Vec<_> = maps.iter().zip(&labelled).map(|(m, i)| (m, i.mask.as_ref().expect("filtered"))).collect();
    pr_auc(&pairs).map(Some)
}

pub struct HgnTrainOutcome {
    /// Parameters from the epoch with the best validation PR-AUC (the last
    /// epoch when validation is unavailable).
    pub model: HgnModel,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: Option<f64>,
}

/// Per-epoch callback: the record, the current model, and whether the
/// epoch is the best so far.
pub type EpochHook<'a, M> = dyn FnMut(&EpochRecord, &M, bool) -> Result<()> + 'a;

/// Trains one HGN on images already preprocessed at `scale`.
pub fn train_hgn(
    scale: Scale,
    train: &[FundusImage],
    validation: &[FundusImage],
    cfg: &HgnTrainConfig,
    seed: u64,
    on_epoch: &mut EpochHook<'_, HgnModel>,
) -> Result<HgnTrainOutcome> {
    cfg.validate()?;
    let index = CenterIndex::build(train, false)?;
    if index.lesion.is_empty() || index.healthy_candidates() == 0 {
        return Err(Error::Usage(
            "hgn training needs at least one lesion pixel and one healthy image".into(),
        ));
    }
    let mut rng = stream_rng(seed, &format!("hgn-train-{}", scale.as_str()));
    let model = HgnModel::new(cfg.arch.clone(), scale, seed)?;
    let mut trainer = HgnTrainer::new(model, cfg.clone());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = trainer.model.params.clone();
    let mut log = Vec::new();
    for epoch in 0..cfg.max_epochs {
        let mut sums = LossTerms::default();
        for _ in 0..cfg.batches_per_epoch {
            let batch = sample_batch(train, &index, cfg, &mut rng)?;
            let t = trainer.step(&batch, epoch)?;
            sums.ce += t.ce;
            sums.dice += t.dice;
            sums.total += t.total;
        }
        let n = cfg.batches_per_epoch as f64;
        let val = validation_pr_auc(&trainer.model, validation)?;
        let is_best = match val {
            Some(v) => stopper.observe(epoch, v),
            None => true,
        };
        if is_best {
            best = trainer.model.params.clone();
            if val.is_none() {
                stopper.best_epoch = epoch;
            }
        }
        let record = EpochRecord {
            epoch,
            lr: trainer.adam.lr,
            loss: sums.total / n,
            components: BTreeMap::from([("ce".to_string(), sums.ce / n), ("dice".to_string(), sums.dice / n)]),
            val_pr_auc: val,
        };
        on_epoch(&record, &trainer.model, is_best)?;
        log.push(record);
        if val.is_some() && stopper.should_stop() {
            break;
        }
    }
    let mut model = trainer.model;
    model.params = best;
    Ok(HgnTrainOutcome {
        model,
        log,
        best_epoch: stopper.best_epoch,
        best_metric: stopper.best,
    })
}
