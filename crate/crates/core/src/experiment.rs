//! End-to-end training of every model the pipeline needs.

use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fusion::PipelineModels;
use crate::hgn::{train_hgn, HgnModel, HgnTrainConfig};
use crate::par;
use crate::preprocess::{prepare, Scale};
use crate::prn::{train_prn, PrnModel, PrnTrainConfig};
use crate::raster::FundusImage;

/// Progress notes: `(stage, message)`.
pub type Progress<'a> = dyn FnMut(&str, &str) + 'a;

pub fn prepare_all(images: &[FundusImage], scale: Scale, sigma_divisor: f64) -> Result<Vec<FundusImage>> {
    par::map(images, |i| prepare(i, scale, sigma_divisor)).into_iter().collect()
}

/// Trains both hypothesis networks, the triplet-trained refinement network
/// and the cross-entropy-only classifier on raw train/validation images.
pub fn train_all(cfg: &RunConfig, train: &[FundusImage], validation: &[FundusImage], progress: &mut Progress<'_>) -> Result<PipelineModels> {
    let sd = cfg.preprocess.sigma_divisor;
    let mut models = PipelineModels::default();
    for scale in [Scale::Full, Scale::Half] {
        let tr = prepare_all(train, scale, sd)?;
        let va = prepare_all(validation, scale, sd)?;
        let stage = format!("hgn-{}", scale.as_str());
        let out = train_hgn(scale, &tr, &va, &cfg.hgn, cfg.seed, &mut |r, _, _| {
            progress(&stage, &format!("epoch {} loss {:.4} val {:?}", r.epoch, r.loss, r.val_pr_auc));
            Ok(())
        })?;
        match scale {
            Scale::Full => models.hgn_1x = Some(out.model),
            Scale::Half => models.hgn_05x = Some(out.model),
        }
    }
    let tr = prepare_all(train, Scale::Full, sd)?;
    let va = prepare_all(validation, Scale::Full, sd)?;
    for (stage, pcfg) in [("prn", cfg.prn.clone()), ("cls", cfg.prn.cls_variant())] {
        let out = train_prn(&tr, &va, &pcfg, cfg.seed, &mut |r, _, _| {
            progress(stage, &format!("epoch {} loss {:.4} val {:?}", r.epoch, r.loss, r.val_pr_auc));
            Ok(())
        })?;
        if stage == "prn" {
            models.prn = Some(out.model);
        } else {
            models.cls = Some(out.model);
        }
    }
    Ok(models)
}

/// Sub-directory (and checkpoint kind) of each model inside a models directory.
pub fn model_kind(scale: Scale) -> &'static str {
    match scale {
        Scale::Full => "hgn-1x",
        Scale::Half => "hgn-0.5x",
    }
}

pub const PRN_KIND: &str = "prn";
pub const CLS_KIND: &str = "cls";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

pub fn save_hgn(path: &Path, model: &HgnModel, cfg: &HgnTrainConfig, epoch: usize, metric: Option<f64>) -> Result<()> {
    Checkpoint::new(model_kind(model.scale), cfg, epoch, metric, &model.params)?.write(path)
}

pub fn load_hgn(path: &Path) -> Result<HgnModel> {
    let ck = Checkpoint::read(path)?;
    let scale = match ck.header.kind.as_str() {
        "hgn-1x" => Scale::Full,
        "hgn-0.5x" => Scale::Half,
        other => return Err(Error::format(path, format!("expected an hgn checkpoint, found `{other}`"))),
    };
    let cfg: HgnTrainConfig = ck.config()?;
    let mut model = HgnModel::new(cfg.arch, scale, 0)?;
    ck.restore_into(&mut model.params)?;
    Ok(model)
}

pub fn save_prn(path: &Path, kind: &str, model: &PrnModel, cfg: &PrnTrainConfig, epoch: usize, metric: Option<f64>) -> Result<()> {
    Checkpoint::new(kind, cfg, epoch, metric, &model.params)?.write(path)
}

pub fn load_prn(path: &Path, kind: &str) -> Result<PrnModel> {
    let ck = Checkpoint::read_kind(path, kind)?;
    let cfg: PrnTrainConfig = ck.config()?;
    let mut model = PrnModel::new(cfg.arch, 0)?;
    ck.restore_into(&mut model.params)?;
    Ok(model)
}

/// Loads whichever of `hgn-1x/`, `hgn-0.5x/`, `prn/`, `cls/` exist under `dir`.
pub fn load_models(dir: &Path) -> Result<PipelineModels> {
    if !dir.is_dir() {
        return Err(Error::Usage(format!("models directory {} does not exist", dir.display())));
    }
    let file = |kind: &str| {
        let p = dir.join(kind).join(CHECKPOINT_FILE);
        p.exists().then_some(p)
    };
    let mut models = PipelineModels::default();
    if let Some(p) = file(model_kind(Scale::Full)) {
        models.hgn_1x = Some(load_hgn(&p)?);
    }
    if let Some(p) = file(model_kind(Scale::Half)) {
        models.hgn_05x = Some(load_hgn(&p)?);
    }
    if let Some(p) = file(PRN_KIND) {
        models.prn = Some(load_prn(&p, PRN_KIND)?);
    }
    if let Some(p) = file(CLS_KIND) {
        models.cls = Some(load_prn(&p, CLS_KIND)?);
    }
    Ok(models)
}

/// Writes every present model in the layout [`load_models`] reads.
pub fn save_models(dir: &Path, cfg: &RunConfig, models: &PipelineModels) -> Result<()> {
    let target = |kind: &str| -> Result<std::path::PathBuf> {
        let d = dir.join(kind);
        crate::io::create_dir(&d)?;
        Ok(d.join(CHECKPOINT_FILE))
    };
    for m in [&models.hgn_1x, &models.hgn_05x].into_iter().flatten() {
        save_hgn(&target(model_kind(m.scale))?, m, &cfg.hgn, 0, None)?;
    }
    if let Some(m) = &models.prn {
        save_prn(&target(PRN_KIND)?, PRN_KIND, m, &cfg.prn, 0, None)?;
    }
    if let Some(m) = &models.cls {
        save_prn(&target(CLS_KIND)?, CLS_KIND, m, &cfg.prn.cls_variant(), 0, None)?;
    }
    Ok(())
}
