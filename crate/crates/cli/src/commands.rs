use std::path::{Path, PathBuf};

use lesionseg::ablation::ablation_report;
use lesionseg::checkpoint::TrainLog;
use lesionseg::config::{RunConfig, RunManifest};
use lesionseg::dataset::{extract_patches, generate_synthetic, PatchRequest, SplitManifest, SplitName};
use lesionseg::eval::{write_curve_csv, MetricsReport, PrCurve};
use lesionseg::experiment::{self, prepare_all, CHECKPOINT_FILE};
use lesionseg::fusion::{overlay, run_pipeline, PipelineMode};
use lesionseg::hgn::HgnTrainConfig;
use lesionseg::io::{create_dir, read_mask, read_rgb, write_mask, write_rgb, write_rgb16};
use lesionseg::preprocess::{downsample_half, enhance, sigma_for, Scale, ENHANCE_RANGE};
use lesionseg::prob_map::ProbabilityMap;
use lesionseg::raster::{FundusImage, HealthLabel};
use lesionseg::{Error, Result};

use crate::{ConfigArgs, Stage, Variant};

const LAST_FILE: &str = "last.bin";
const LOG_FILE: &str = "train_log.jsonl";

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    RunConfig::load(args.config.as_deref(), args.tiny)
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Files in `dir` with one of `extensions`, sorted by name.
fn files_with(dir: &Path, extensions: &[&str]) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| extensions.contains(&e.as_str())) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn parse_split(name: &str) -> Result<SplitName> {
    match name {
        "train" => Ok(SplitName::Train),
        "validation" | "val" => Ok(SplitName::Validation),
        "test" => Ok(SplitName::Test),
        other => Err(Error::Usage(format!("unknown split `{other}` (expected train, validation or test)"))),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn preprocess(input: &Path, out: &Path, sigma_div: Option<f64>, half: bool, args: &ConfigArgs) -> Result<()> {
    let mut cfg = load_config(args)?;
    if let Some(d) = sigma_div {
        cfg.preprocess.sigma_divisor = d;
    }
    cfg.validate()?;
    let files = files_with(input, &["png", "jpg", "jpeg", "tif", "tiff"])?;
    if files.is_empty() {
        return Err(Error::Usage(format!("no images found in {}", input.display())));
    }
    create_dir(out)?;
    for path in &files {
        let id = stem(path);
        let image = FundusImage::new(id.clone(), read_rgb(path)?, None, HealthLabel::Healthy)?;
        let enhanced = enhance(&image, sigma_for(image.width(), cfg.preprocess.sigma_divisor)?)?;
        write_rgb16(&out.join(format!("{id}.png")), &enhanced.pixels)?;
        if half {
            let small = downsample_half(&enhanced)?;
            write_rgb16(&out.join(format!("{id}_{}.png", Scale::Half.file_tag())), &small.pixels)?;
        }
    }
    RunManifest::new("preprocess", &cfg, &files)?.write(out)?;
    println!("enhanced {} images into {}", files.len(), out.display());
    Ok(())
}

pub fn synth(out: &Path, seed: Option<u64>, args: &ConfigArgs) -> Result<()> {
    let mut cfg = load_config(args)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let data = generate_synthetic(&cfg.synth, cfg.seed)?;
    let manifest = data.write(out)?;
    RunManifest::new("synth", &cfg, &[])?.write(out)?;
    let s = manifest.split();
    println!(
        "wrote {} images (train {}, validation {}, test {}) and {}",
        manifest.entries.len(),
        s.train.len(),
        s.validation.len(),
        s.test.len(),
        out.join("split.csv").display()
    );
    Ok(())
}

pub fn extract(split: &Path, stage: Stage, out: &Path, per_image: usize, subset: &str, args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let manifest = SplitManifest::read(split)?;
    let which = parse_split(subset)?;
    let (scale, size) = match stage {
        Stage::Hgn1x => (Scale::Full, cfg.hgn.patch_size),
        Stage::Hgn05x => (Scale::Half, cfg.hgn.patch_size),
        Stage::Prn => (Scale::Full, cfg.prn.arch.patch_size),
    };
    let with_masks = stage != Stage::Prn;
    let images = prepare_all(&manifest.load(which)?, scale, cfg.preprocess.sigma_divisor)?;
    create_dir(&out.join("patches"))?;
    if with_masks {
        create_dir(&out.join("masks"))?;
    }
    let index_path = out.join("index.csv");
    let mut index = csv::Writer::from_path(&index_path).map_err(|e| Error::Format {
        path: index_path.clone(),
        detail: e.to_string(),
    })?;
    let mut rows = vec![["file", "mask", "source", "row", "col", "scale", "label"].map(String::from)];
    for image in &images {
        let request = PatchRequest {
            kind: image.label,
            size,
            scale,
            count: per_image,
            lesion_image_negatives: false,
        };
        for (k, patch) in extract_patches(image, &request, cfg.seed)?.into_iter().enumerate() {
            let name = format!("{}_{k:03}.png", image.id);
            let mut px = patch.pixels.clone();
            px.data_mut().iter_mut().for_each(|v| *v *= ENHANCE_RANGE);
            write_rgb16(&out.join("patches").join(&name), &px)?;
            let mask_name = match (&image.mask, with_masks) {
                (Some(m), true) => {
                    write_mask(&out.join("masks").join(&name), &m.crop_reflect(patch.center.0, patch.center.1, size))?;
                    format!("masks/{name}")
                }
                _ => String::new(),
            };
            rows.push([
                format!("patches/{name}"),
                mask_name,
                patch.source_id,
                patch.center.0.to_string(),
                patch.center.1.to_string(),
                scale.as_str().to_string(),
                patch.label.as_str().to_string(),
            ]);
        }
    }
    for row in &rows {
        index.write_record(row).map_err(|e| Error::Format {
            path: index_path.clone(),
            detail: e.to_string(),
        })?;
    }
    index.flush().map_err(|e| io_err(&index_path, e))?;
    RunManifest::new("extract", &cfg, &manifest.referenced_files())?.write(out)?;
    println!("wrote {} patches to {}", rows.len() - 1, out.display());
    Ok(())
}

fn load_split(split: &Path) -> Result<(SplitManifest, Vec<FundusImage>, Vec<FundusImage>)> {
    let manifest = SplitManifest::read(split)?;
    let train = manifest.load(SplitName::Train)?;
    let val = manifest.load(SplitName::Validation)?;
    Ok((manifest, train, val))
}

pub fn train_hgn(scale: Scale, split: &Path, out: &Path, args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let (manifest, train, val) = load_split(split)?;
    create_dir(out)?;
    RunManifest::new(&format!("train-hgn --scale {}", scale.as_str()), &cfg, &manifest.referenced_files())?.write(out)?;
    let sd = cfg.preprocess.sigma_divisor;
    let (train, val) = (prepare_all(&train, scale, sd)?, prepare_all(&val, scale, sd)?);
    let mut log = TrainLog::create(&out.join(LOG_FILE))?;
    let hcfg: &HgnTrainConfig = &cfg.hgn;
    let outcome = lesionseg::hgn::train_hgn(scale, &train, &val, hcfg, cfg.seed, &mut |r, model, _| {
        eprintln!("epoch {:>3}  loss {:.5}  val PR-AUC {}", r.epoch, r.loss, fmt_metric(r.val_pr_auc));
        log.append(r)?;
        experiment::save_hgn(&out.join(LAST_FILE), model, hcfg, r.epoch, r.val_pr_auc)
    })?;
    experiment::save_hgn(&out.join(CHECKPOINT_FILE), &outcome.model, hcfg, outcome.best_epoch, outcome.best_metric)?;
    println!(
        "best epoch {} (val PR-AUC {}), checkpoint {}",
        outcome.best_epoch,
        fmt_metric(outcome.best_metric),
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

pub fn train_prn(split: &Path, out: &Path, variant: Variant, args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let (kind, pcfg) = match variant {
        Variant::Prn => (experiment::PRN_KIND, cfg.prn.clone()),
        Variant::Cls => (experiment::CLS_KIND, cfg.prn.cls_variant()),
    };
    let (manifest, train, val) = load_split(split)?;
    create_dir(out)?;
    RunManifest::new(&format!("train-prn --variant {kind}"), &cfg, &manifest.referenced_files())?.write(out)?;
    let sd = cfg.preprocess.sigma_divisor;
    let (train, val) = (prepare_all(&train, Scale::Full, sd)?, prepare_all(&val, Scale::Full, sd)?);
    let mut log = TrainLog::create(&out.join(LOG_FILE))?;
    let outcome = lesionseg::prn::train_prn(&train, &val, &pcfg, cfg.seed, &mut |r, model, _| {
        eprintln!("epoch {:>3}  loss {:.5}  val PR-AUC {}", r.epoch, r.loss, fmt_metric(r.val_pr_auc));
        log.append(r)?;
        experiment::save_prn(&out.join(LAST_FILE), kind, model, &pcfg, r.epoch, r.val_pr_auc)
    })?;
    experiment::save_prn(&out.join(CHECKPOINT_FILE), kind, &outcome.model, &pcfg, outcome.best_epoch, outcome.best_metric)?;
    println!(
        "best epoch {} (val PR-AUC {}), checkpoint {}",
        outcome.best_epoch,
        fmt_metric(outcome.best_metric),
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn fmt_metric(m: Option<f64>) -> String {
    m.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
}

pub fn infer(
    image: &Path,
    models: &Path,
    mode: PipelineMode,
    out: &Path,
    overlay_path: Option<&Path>,
    mask: Option<&Path>,
    args: &ConfigArgs,
) -> Result<()> {
    let cfg = load_config(args)?;
    let models = experiment::load_models(models)?;
    let mask = mask.map(read_mask).transpose()?;
    let label = match &mask {
        Some(m) if !m.is_all_zero() => HealthLabel::Lesion,
        _ => HealthLabel::Healthy,
    };
    let raw = FundusImage::new(stem(image), read_rgb(image)?, mask, label)?;
    let map = run_pipeline(&raw, &models, mode, &cfg.pipeline)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    map.write(out)?;
    if let Some(path) = overlay_path {
        let vis = overlay(&raw.pixels, &map, raw.mask.as_ref(), cfg.evaluation.fixed_threshold)?;
        write_rgb(path, &vis)?;
    }
    println!("{mode}: wrote {}", out.display());
    Ok(())
}

fn report_text(m: &MetricsReport, images: usize) -> String {
    let mut s = format!("images: {images}\nAUC PR: {:.6}\n", m.auc_pr);
    for (name, op) in [("fixed threshold", &m.fixed), ("best F1", &m.best)] {
        s += &format!(
            "{name} {:.6}: F1 {:.6} precision {:.6} recall {:.6} (TP {} FP {} FN {} TN {})\n",
            op.threshold, op.f1, op.precision, op.recall, op.counts.tp, op.counts.fp, op.counts.fn_, op.counts.tn
        );
    }
    s
}

pub fn evaluate(preds: &Path, masks: &Path, out: &Path, curves: Option<&Path>, args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let files = files_with(preds, &["pmap"])?;
    if files.is_empty() {
        return Err(Error::Usage(format!("no .pmap files in {}", preds.display())));
    }
    let mut pairs = Vec::with_capacity(files.len());
    for f in &files {
        let mask_path = masks.join(format!("{}.png", stem(f)));
        if !mask_path.exists() {
            return Err(Error::Input(format!("no mask {} for {}", mask_path.display(), f.display())));
        }
        pairs.push((ProbabilityMap::read(f)?, read_mask(&mask_path)?));
    }
    let refs: Vec<_> = pairs.iter().map(|(p, m)| (p, m)).collect();
    let report = MetricsReport::compute(&refs, cfg.evaluation.fixed_threshold)?;
    write_text(out, &report_text(&report, files.len()))?;
    if let Some(path) = curves {
        let curve = PrCurve::from_maps(&refs)?;
        write_curve_csv(path, &curve.thinned(cfg.evaluation.curve_points))?;
    }
    print!("{}", report_text(&report, files.len()));
    Ok(())
}

pub fn ablate(
    split: &Path,
    models_dir: Option<&Path>,
    out: &Path,
    modes: &[PipelineMode],
    save_maps: bool,
    args: &ConfigArgs,
) -> Result<()> {
    let cfg = load_config(args)?;
    let manifest = SplitManifest::read(split)?;
    create_dir(out)?;
    RunManifest::new("ablate", &cfg, &manifest.referenced_files())?.write(out)?;
    let models = match models_dir {
        Some(dir) => experiment::load_models(dir)?,
        None => {
            let train = manifest.load(SplitName::Train)?;
            let val = manifest.load(SplitName::Validation)?;
            let models = experiment::train_all(&cfg, &train, &val, &mut |stage, msg| eprintln!("{stage}: {msg}"))?;
            experiment::save_models(&out.join("models"), &cfg, &models)?;
            models
        }
    };
    let modes = if modes.is_empty() { PipelineMode::ALL.to_vec() } else { modes.to_vec() };
    let test = manifest.load(SplitName::Test)?;
    let maps_dir = out.join("maps");
    let report = ablation_report(&test, &models, &modes, &cfg.pipeline, cfg.evaluation.fixed_threshold, &mut |mode, map| {
        if save_maps {
            let dir = maps_dir.join(mode.to_string());
            create_dir(&dir)?;
            map.write(&dir.join(format!("{}.pmap", map.source_id)))?;
        }
        Ok(())
    })?;
    let table = report.to_table();
    write_text(&out.join("ablation.txt"), &table)?;
    write_text(&out.join("ablation.json"), &(report.to_json() + "\n"))?;
    print!("{table}");
    Ok(())
}
