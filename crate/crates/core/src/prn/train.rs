use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{EarlyStopping, EpochRecord};
use crate::dataset::{crop, stream_rng, CenterIndex, CenterRef};
use crate::error::{Error, Result};
use crate::eval::PrCurve;
use crate::hgn::EpochHook;
use crate::nn::{softmax2, Adam, Grads, Tape, Tensor};
use crate::par;
use crate::raster::{FundusImage, Raster};

use super::loss::{cross_entropy_with_grad, triplet_with_grad, DistanceKind};
use super::model::{PrnArch, PrnModel};
use super::pool::{build_triplet_batch, update_subset, SamplePool, TripletBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrnTrainConfig {
    pub arch: PrnArch,
    pub lr: f64,
    /// The learning rate is multiplied by `lr_decay` from this epoch on.
    pub lr_decay_epoch: usize,
    pub lr_decay: f64,
    /// Triplets per mini-batch.
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub margin: f64,
    pub triplet_weight: f64,
    pub ce_weight: f64,
    pub distance: DistanceKind,
    /// Draw negatives by selection probability instead of uniformly.
    pub selective_sampling: bool,
    /// Epochs between re-scorings of the healthy pool.
    pub resample_period: usize,
    pub healthy_pool_size: usize,
    /// Healthy entries re-scored per round.
    pub rescore_cap: usize,
    /// Held-out patches (half lesion, half healthy) scored each epoch.
    pub validation_patches: usize,
    /// Also draw negatives from the background of lesion images.
    pub lesion_image_negatives: bool,
}

impl Default for PrnTrainConfig {
    fn default() -> Self {
        Self {
            arch: PrnArch::resnet50(),
            lr: 1e-5,
            lr_decay_epoch: 20,
            lr_decay: 0.1,
            batch_size: 90,
            batches_per_epoch: 1000,
            max_epochs: 100,
            patience: 10,
            margin: 0.5,
            triplet_weight: 1.0,
            ce_weight: 1.0,
            distance: DistanceKind::OneMinusCosine,
            selective_sampling: true,
            resample_period: 10,
            healthy_pool_size: 1_000_000,
            rescore_cap: 200_000,
            validation_patches: 4000,
            lesion_image_negatives: false,
        }
    }
}

impl PrnTrainConfig {
    /// The plain classifier baseline: cross-entropy only, uniform negatives.
    pub fn cls_variant(&self) -> Self {
        Self {
            triplet_weight: 0.0,
            selective_sampling: false,
            ..self.clone()
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_decay_epoch {
            self.lr * self.lr_decay
        } else {
            self.lr
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let bad = |m: &str| Err(Error::Config(format!("prn: {m}")));
        if !(self.lr > 0.0 && self.lr_decay > 0.0) {
            return bad("lr and lr_decay must be positive");
        }
        if self.batch_size == 0 || self.batches_per_epoch == 0 || self.max_epochs == 0 {
            return bad("batch_size, batches_per_epoch and max_epochs must be positive");
        }
        if self.margin < 0.0 || self.triplet_weight < 0.0 || self.ce_weight < 0.0 {
            return bad("margin and loss weights must be non-negative");
        }
        if self.resample_period == 0 || self.healthy_pool_size == 0 {
            return bad("resample_period and healthy_pool_size must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PrnLossTerms {
    pub triplet: f64,
    pub ce: f64,
    pub total: f64,
}

/// Cropped patches of one triplet mini-batch.
#[derive(Debug, Clone)]
pub struct TripletPatches {
    pub anchors: Vec<Raster>,
    pub positives: Vec<Raster>,
    pub negatives: Vec<Raster>,
}

impl TripletPatches {
    pub fn crop(images: &[FundusImage], lesion: &SamplePool, healthy: &SamplePool, batch: &TripletBatch, size: usize) -> Self {
        let take = |pool: &SamplePool, idx: &[usize]| idx.iter().map(|&i| crop(images, pool.entries[i], size)).collect();
        Self {
            anchors: take(lesion, &batch.anchors),
            positives: take(lesion, &batch.positives),
            negatives: take(healthy, &batch.negatives),
        }
    }
}

pub struct PrnTrainer {
    pub model: PrnModel,
    pub adam: Adam,
    pub cfg: PrnTrainConfig,
}

impl PrnTrainer {
    pub fn new(model: PrnModel, cfg: PrnTrainConfig) -> Self {
        let adam = Adam::new(&model.params, cfg.lr);
        Self { model, adam, cfg }
    }

    /// Summed losses over the batch and summed parameter gradients. All three
    /// branches of a triplet share one tape and one parameter set.
    pub fn loss_and_grads(&self, batch: &TripletPatches) -> Result<(PrnLossTerms, Grads)> {
        let n = batch.anchors.len();
        if batch.positives.len() != n || batch.negatives.len() != n {
            return Err(Error::Input("triplet lists differ in length".into()));
        }
        for x in batch.anchors.iter().chain(&batch.positives).chain(&batch.negatives) {
            self.model.check_patch(x)?;
        }
        let (model, cfg) = (&self.model, &self.cfg);
        let use_triplet = cfg.triplet_weight > 0.0;
        let idx: Vec<usize> = (0..n).collect();
        let parts = par::map(&idx, |&i| {
            let mut tape = Tape::new(&model.params);
            let xa = tape.input(Tensor::from(batch.anchors[i].clone()));
            let a = model.forward(&mut tape, xa);
            let xn = tape.input(Tensor::from(batch.negatives[i].clone()));
            let neg = model.forward(&mut tape, xn);
            let (ce_a, ga) = cross_entropy_with_grad(&tape.value(a.logits).data, true);
            let (ce_n, gn) = cross_entropy_with_grad(&tape.value(neg.logits).data, false);
            let ga: Vec<f64> = ga.iter().map(|g| g * cfg.ce_weight).collect();
            let gn: Vec<f64> = gn.iter().map(|g| g * cfg.ce_weight).collect();
            let mut trip = 0.0;
            let grads = if use_triplet {
                let xp = tape.input(Tensor::from(batch.positives[i].clone()));
                let pos = model.forward(&mut tape, xp);
                let (l, [ea, ep, en]) = triplet_with_grad(
                    &tape.value(a.embedding).data,
                    &tape.value(pos.embedding).data,
                    &tape.value(neg.embedding).data,
                    cfg.margin,
                    cfg.distance,
                );
                trip = l;
                let s = |g: Vec<f64>| -> Vec<f64> { g.into_iter().map(|v| v * cfg.triplet_weight).collect() };
                let (ea, ep, en) = (s(ea), s(ep), s(en));
                tape.backward(&[
                    (a.logits, &ga),
                    (neg.logits, &gn),
                    (a.embedding, &ea),
                    (pos.embedding, &ep),
                    (neg.embedding, &en),
                ])
            } else {
                tape.backward(&[(a.logits, &ga), (neg.logits, &gn)])
            };
            (trip, ce_a + ce_n, grads)
        });
        let mut terms = PrnLossTerms::default();
        for (t, c, _) in &parts {
            terms.triplet += t;
            terms.ce += c;
        }
        terms.total = cfg.triplet_weight * terms.triplet + cfg.ce_weight * terms.ce;
        let grads: Vec<Grads> = parts.into_iter().map(|p| p.2).collect();
        Ok((terms, Grads::sum(&model.params, &grads)))
    }

    pub fn step(&mut self, batch: &TripletPatches, epoch: usize) -> Result<PrnLossTerms> {
        let (terms, grads) = self.loss_and_grads(batch)?;
        if !terms.total.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step: self.adam.step as usize,
                detail: format!("prn loss {} (triplet {}, ce {})", terms.total, terms.triplet, terms.ce),
            });
        }
        self.adam.update(&mut self.model.params, &grads);
        Ok(terms)
    }
}

/// Center-pixel lesion probabilities of many patches, in input order.
pub fn score_patches(model: &PrnModel, patches: &[Raster]) -> Vec<f64> {
    par::map(patches, |x| {
        let mut tape = Tape::inference(&model.params);
        let i = tape.input(Tensor::from(x.clone()));
        let out = model.forward(&mut tape, i);
        let l = &tape.value(out.logits).data;
        softmax2(l[0], l[1])
    })
}

/// Center-pixel probabilities for center references, cropping lazily in
/// chunks to bound memory.
pub fn score_centers(model: &PrnModel, images: &[FundusImage], centers: &[CenterRef]) -> Vec<f64> {
    let size = model.arch.patch_size;
    let mut out = Vec::with_capacity(centers.len());
    for chunk in centers.chunks(64) {
        let patches = par::map(chunk, |&c| crop(images, c, size));
        out.extend(score_patches(model, &patches));
    }
    out
}

/// Re-scores up to `cap` random healthy entries with the per-patch
/// classification loss `−log(1 − p)` and updates their probabilities.
pub fn rescore_pool<R: Rng + ?Sized>(
    model: &PrnModel,
    images: &[FundusImage],
    pool: &SamplePool,
    cap: usize,
    rng: &mut R,
) -> Result<SamplePool> {
    let indices: Vec<usize> = if cap >= pool.len() {
        (0..pool.len()).collect()
    } else {
        rand::seq::index::sample(rng, pool.len(), cap).into_vec()
    };
    let centers: Vec<CenterRef> = indices.iter().map(|&i| pool.entries[i]).collect();
    let losses: Vec<f64> = score_centers(model, images, &centers)
        .into_iter()
        .map(|p| -(1.0 - p).max(1e-12).ln())
        .collect();
    update_subset(pool, &indices, &losses)
}

/// Fixed held-out centers: `(center, is_lesion)`.
pub fn validation_centers(images: &[FundusImage], count: usize, seed: u64) -> Result<Vec<(CenterRef, bool)>> {
    let index = CenterIndex::build(images, false)?;
    if index.lesion.is_empty() || index.healthy_candidates() == 0 || count < 2 {
        return Ok(Vec::new());
    }
    let mut rng = stream_rng(seed, "prn-validation");
    let half = count / 2;
    let mut out = Vec::with_capacity(2 * half);
    for _ in 0..half {
        out.push((index.sample_lesion(&mut rng)?, true));
    }
    for _ in 0..half {
        out.push((index.sample_healthy(images, &mut rng)?, false));
    }
    Ok(out)
}

/// Patch-level PR-AUC on held-out centers.
pub fn patch_pr_auc(model: &PrnModel, images: &[FundusImage], centers: &[(CenterRef, bool)]) -> Result<Option<f64>> {
    if centers.is_empty() {
        return Ok(None);
    }
    let refs: Vec<CenterRef> = centers.iter().map(|c| c.0).collect();
    let probs = score_centers(model, images, &refs);
    let scores = probs.into_iter().zip(centers.iter().map(|c| c.1)).collect();
    Ok(Some(PrCurve::from_scores(scores)?.auc()))
}

pub struct PrnTrainOutcome {
    pub model: PrnModel,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: Option<f64>,
    pub healthy_pool: SamplePool,
}

/// Trains the refinement network on preprocessed full-scale images.
pub fn train_prn(
    train: &[FundusImage],
    validation: &[FundusImage],
    cfg: &PrnTrainConfig,
    seed: u64,
    on_epoch: &mut EpochHook<'_, PrnModel>,
) -> Result<PrnTrainOutcome> {
    cfg.validate()?;
    let index = CenterIndex::build(train, cfg.lesion_image_negatives)?;
    if index.lesion.len() < 2 || index.healthy_candidates() == 0 {
        return Err(Error::Usage(
            "prn training needs at least two lesion pixels and one healthy image".into(),
        ));
    }
    let mut rng = stream_rng(seed, "prn-train");
    let lesion_pool = SamplePool::uniform(index.lesion.clone());
    let healthy: Vec<CenterRef> = (0..cfg.healthy_pool_size)
        .map(|_| index.sample_healthy(train, &mut rng))
        .collect::<Result<_>>()?;
    let mut healthy_pool = SamplePool::uniform(healthy);
    let val_centers = validation_centers(validation, cfg.validation_patches, seed)?;

    let model = PrnModel::new(cfg.arch.clone(), seed)?;
    let mut trainer = PrnTrainer::new(model, cfg.clone());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = trainer.model.params.clone();
    let mut log = Vec::new();
    for epoch in 0..cfg.max_epochs {
        trainer.adam.lr = cfg.lr_at(epoch);
        let mut sums = PrnLossTerms::default();
        for _ in 0..cfg.batches_per_epoch {
            let batch = build_triplet_batch(&lesion_pool, &healthy_pool, cfg.batch_size, cfg.selective_sampling, &mut rng)?;
            let patches = TripletPatches::crop(train, &lesion_pool, &healthy_pool, &batch, cfg.arch.patch_size);
            let t = trainer.step(&patches, epoch)?;
            sums.triplet += t.triplet;
            sums.ce += t.ce;
            sums.total += t.total;
        }
        if cfg.selective_sampling && (epoch + 1) % cfg.resample_period == 0 {
            healthy_pool = rescore_pool(&trainer.model, train, &healthy_pool, cfg.rescore_cap, &mut rng)?;
        }
        let val = patch_pr_auc(&trainer.model, validation, &val_centers)?;
        let is_best = match val {
            Some(v) => stopper.observe(epoch, v),
            None => {
                stopper.best_epoch = epoch;
                true
            }
        };
        if is_best {
            best = trainer.model.params.clone();
        }
        let n = cfg.batches_per_epoch as f64;
        let record = EpochRecord {
            epoch,
            lr: trainer.adam.lr,
            loss: sums.total / n,
            components: BTreeMap::from([("triplet".to_string(), sums.triplet / n), ("ce".to_string(), sums.ce / n)]),
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
    Ok(PrnTrainOutcome {
        model,
        log,
        best_epoch: stopper.best_epoch,
        best_metric: stopper.best,
        healthy_pool,
    })
}
