use std::fs;
use std::path::Path;

use tracing::{info, warn};

use ctcbir_core::embed_index::{embed_dataset, embed_into, save_store, EmbeddingStore};
use ctcbir_core::eval::{embed_splits, evaluate_stores, explain_slice, saliency_on_slice, EvalConfig};
use ctcbir_core::experiment::{run_experiment, ExperimentConfig};
use ctcbir_core::imaging::{
    build_manifest_from_dir, discover_volumes, CtVolume, DatasetManifest, SamplingOptions, SliceRecord, Split,
    VolumeSource,
};
use ctcbir_core::metrics::AggregateReport;
use ctcbir_core::phantom::{write_corpus, PhantomConfig};
use ctcbir_core::relax::{export_saliency, generate_masks, normalize_for_display, SaliencySidecar};
use ctcbir_core::render::overlay_png;
use ctcbir_core::ssl::{init_model, load_checkpoint, EncoderInit, TrainConfig};
use ctcbir_core::augment::ViewMode;
use ctcbir_core::{Error, Result};
use ctcbir_service::ServiceConfig;

use crate::config::{apply_env, RunConfig};
use crate::{BuildDatasetArgs, EmbedArgs, EvalArgs, ExperimentArgs, ExplainArgs, PhantomArgs, ServeArgs, TrainArgs};

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn require_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{} is not a directory", dir.display())))
    }
}

fn env_vars() -> Vec<(String, String)> {
    std::env::vars().collect()
}

pub fn build_dataset(a: &BuildDatasetArgs) -> Result<()> {
    require_dir(&a.data_dir)?;
    let sampling = SamplingOptions {
        n_liver: a.n_liver,
        n_nonliver: a.n_nonliver,
        liver_threshold: a.liver_threshold,
    };
    let manifest = build_manifest_from_dir(&a.data_dir, a.n_train_volumes, a.seed, sampling)?;
    if manifest.records.is_empty() {
        return Err(Error::invalid(format!("no slices sampled from {}: {}", a.data_dir.display(), manifest.warnings.join("; "))));
    }
    manifest.save(&a.out_manifest)?;
    println!(
        "manifest {}: {} train / {} test slices",
        a.out_manifest.display(),
        manifest.count(Split::Train),
        manifest.count(Split::Test)
    );
    Ok(())
}

/// Config file, then environment, then flags.
pub fn effective_run_config(a: &TrainArgs, env: Vec<(String, String)>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(a.config.as_deref(), env)?;
    let t: &mut TrainConfig = &mut cfg.train;
    if a.baseline_single_clip {
        t.view_mode = ViewMode::SingleClip;
    }
    if let Some(lr) = a.lr {
        t.lr = Some(lr);
    }
    if let Some(e) = a.epochs {
        t.epochs = e;
    }
    if let Some(b) = a.batch_size {
        t.batch_size = b;
    }
    if let Some(s) = a.seed {
        t.seed = s;
    }
    if a.no_pretrain {
        cfg.model.encoder.init = EncoderInit::Random;
    }
    if a.pretrained.is_some() {
        cfg.model.encoder.init = EncoderInit::ImagenetPretrained;
    }
    Ok(cfg)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = effective_run_config(a, env_vars())?;
    let spec = cfg.model_spec();
    spec.validate()?;
    cfg.train.validate(&spec)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let records = manifest.load_records(Split::Train)?;
    let pretrained = a.pretrained.as_deref().map(load_checkpoint).transpose()?;
    let model = init_model(spec, cfg.train.seed, pretrained.as_ref())?;

    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    write_file(&a.out_dir.join("config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
    info!(slices = records.len(), epochs = cfg.train.epochs, lr = cfg.train.effective_lr(), "training");
    let outcome = ctcbir_core::ssl::train(&records, model, &cfg.train, Some(&a.out_dir))?;
    if outcome.collapse_warning {
        warn!("embedding std stayed near zero; the representation may have collapsed");
    }
    let (path, fingerprint) = outcome.checkpoint.ok_or_else(|| Error::invalid("training wrote no checkpoint"))?;
    let loss = outcome.log.last().map_or(f64::NAN, |l| l.loss);
    println!("checkpoint {} fingerprint {fingerprint} final_loss {loss:.6}", path.display());
    Ok(())
}

fn all_slices(volume: &CtVolume) -> Vec<SliceRecord> {
    (0..volume.depth())
        .map(|i| SliceRecord::from_volume(volume, i, Split::Test, 0))
        .collect()
}

pub fn embed(a: &EmbedArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let store = match (&a.manifest, &a.data_dir) {
        (Some(m), _) => {
            let manifest = DatasetManifest::load(m)?;
            let mut records = Vec::new();
            match a.split.as_str() {
                "all" => {
                    records.extend(manifest.load_records(Split::Train)?);
                    records.extend(manifest.load_records(Split::Test)?);
                }
                s => records.extend(manifest.load_records(s.parse()?)?),
            }
            embed_dataset(&ckpt, &records)?
        }
        (None, Some(dir)) => {
            require_dir(dir)?;
            let mut store = EmbeddingStore::new(ckpt.fingerprint.clone(), ckpt.model.out_dim());
            for src in discover_volumes(dir)? {
                let volume = src.load()?;
                embed_into(&mut store, &ckpt, &all_slices(&volume))?;
            }
            if store.is_empty() {
                return Err(Error::invalid(format!("no volumes found under {}", dir.display())));
            }
            store
        }
        (None, None) => return Err(Error::invalid("one of --manifest or --data-dir is required")),
    };
    save_store(&store, &a.out)?;
    println!("store {}: {} vectors of dim {}", a.out.display(), store.len(), store.dim());
    Ok(())
}

/// Runs every checkpoint with every seed, in that order.
pub fn eval_reports(a: &EvalArgs) -> Result<AggregateReport> {
    if a.seeds.is_empty() {
        return Err(Error::invalid("at least one seed is required"));
    }
    let manifest = DatasetManifest::load(&a.manifest)?;
    let train = manifest.load_records(Split::Train)?;
    let test = manifest.load_records(Split::Test)?;
    let mut runs = Vec::new();
    for path in &a.checkpoint {
        let ckpt = load_checkpoint(path)?;
        let stores = embed_splits(&ckpt.model, &ckpt.fingerprint, &train, &test)?;
        for &seed in &a.seeds {
            let cfg = EvalConfig {
                k: a.k,
                database: a.database,
                seed,
                rr_n_masks: a.rr_n_masks,
                rr_max_images: a.rr_max_images,
                ..Default::default()
            };
            let report = evaluate_stores(&ckpt.model, &stores, &test, &cfg)?;
            info!(checkpoint = %path.display(), seed, map = report.map, knn = report.knn_accuracy, "run scored");
            runs.push(report);
        }
    }
    AggregateReport::from_runs(runs)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let agg = eval_reports(a)?;
    write_file(&a.report, agg.to_json()? + "\n")?;
    if let Some(dir) = &a.per_query_dir {
        for (i, run) in agg.runs.iter().enumerate() {
            write_file(&dir.join(format!("run_{i:02}.csv")), run.per_query_csv())?;
        }
    }
    let rr = agg
        .relevance_rank
        .map_or("n/a".to_string(), |m| format!("{:.4} ± {:.4}", m.mean, m.std));
    println!(
        "runs {}  mAP@{} {:.4} ± {:.4}  kNN {:.4} ± {:.4}  RR {rr}",
        agg.n_runs, a.k, agg.map.mean, agg.map.std, agg.knn_accuracy.mean, agg.knn_accuracy.std
    );
    Ok(())
}

fn find_volume(sources: impl IntoIterator<Item = VolumeSource>, volume_id: &str) -> Result<CtVolume> {
    for src in sources {
        if src.volume_id == volume_id {
            return src.load();
        }
    }
    Err(Error::invalid(format!("volume {volume_id} not found")))
}

pub fn explain(a: &ExplainArgs) -> Result<()> {
    if a.n_masks == 0 {
        return Err(Error::invalid("n_masks must be at least 1"));
    }
    let (volume_id, index) = a
        .slice_id
        .rsplit_once(':')
        .and_then(|(v, i)| Some((v, i.parse::<usize>().ok()?)))
        .ok_or_else(|| Error::invalid(format!("slice id `{}` is not <volume>:<index>", a.slice_id)))?;
    let volume = match (&a.data_dir, &a.manifest) {
        (Some(dir), _) => {
            require_dir(dir)?;
            find_volume(discover_volumes(dir)?, volume_id)?
        }
        (None, Some(m)) => {
            let manifest = DatasetManifest::load(m)?;
            find_volume(manifest.volumes.into_iter().filter_map(|v| v.source), volume_id)?
        }
        (None, None) => return Err(Error::invalid("one of --data-dir or --manifest is required")),
    };
    if index >= volume.depth() {
        return Err(Error::invalid(format!("{volume_id} has {} slices", volume.depth())));
    }
    let record = SliceRecord::from_volume(&volume, index, Split::Test, 0);

    let ckpt = load_checkpoint(&a.checkpoint)?;
    let grid = (a.grid, a.grid);
    let masks = generate_masks(a.n_masks, grid, a.p, ckpt.model.input_size(), a.seed)?;
    let map = explain_slice(&ckpt.model, &record, &masks)?;
    let sidecar = SaliencySidecar {
        slice_id: record.slice_id.clone(),
        n_masks: a.n_masks,
        grid,
        p: a.p,
        seed: a.seed,
        model_fingerprint: ckpt.fingerprint.clone(),
        n_skipped: map.n_skipped,
    };
    let (pfm, json) = export_saliency(&map, &sidecar, &a.out)?;
    let importance = normalize_for_display(saliency_on_slice(&map, record.hu.dim()).view());
    write_file(&a.out, overlay_png(record.hu.view(), a.window, importance.view(), a.alpha)?)?;
    println!("overlay {} map {} sidecar {}", a.out.display(), pfm.display(), json.display());
    Ok(())
}

pub fn phantom(a: &PhantomArgs) -> Result<()> {
    let mut cfg = PhantomConfig::default();
    if let Some(s) = a.size {
        cfg.size = s;
    }
    if let Some(d) = a.depth {
        cfg.depth = d;
        cfg.liver_slices = (cfg.liver_slices.0.min(d), cfg.liver_slices.1.min(d));
    }
    cfg.validate()?;
    let paths = write_corpus(&a.out_dir, a.n_volumes, &cfg, a.seed)?;
    println!("wrote {} volumes to {}", paths.len(), a.out_dir.display());
    Ok(())
}

pub fn experiment_config(path: Option<&Path>, env: Vec<(String, String)>) -> Result<ExperimentConfig> {
    let mut value = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::invalid(format!("config {}: {e}", p.display())))?
        }
        None => serde_json::to_value(ExperimentConfig::default())?,
    };
    // Fill in defaults first so nested environment keys have somewhere to land.
    let mut full = serde_json::to_value(
        serde_json::from_value::<ExperimentConfig>(value.take())
            .map_err(|e| Error::invalid(format!("experiment config: {e}")))?,
    )?;
    apply_env(&mut full, env)?;
    serde_json::from_value(full).map_err(|e| Error::invalid(format!("experiment config: {e}")))
}

pub fn experiment(a: &ExperimentArgs) -> Result<()> {
    let cfg = experiment_config(a.config.as_deref(), env_vars())?;
    let result = run_experiment(&cfg, |r| {
        println!(
            "{:<12} seed {:<3} mAP {:.4} kNN {:.4} RR {} ({:.0}s)",
            r.arm,
            r.seed,
            r.map,
            r.knn_accuracy,
            r.relevance_rank.map_or("n/a".into(), |v| format!("{v:.4}")),
            r.seconds
        );
    })?;
    write_file(&a.out, serde_json::to_string_pretty(&result)? + "\n")?;
    for (name, arm) in [("random", &result.random), ("dual_clip", &result.dual_clip), ("single_clip", &result.single_clip)] {
        println!(
            "{name:<12} mAP {:.4} ± {:.4}  kNN {:.4} ± {:.4}",
            arm.map.mean, arm.map.std, arm.knn_accuracy.mean, arm.knn_accuracy.std
        );
    }
    Ok(())
}

pub fn serve(a: ServeArgs) -> Result<()> {
    let config = ServiceConfig {
        listen: a.listen,
        n_masks: a.n_masks,
        max_concurrent_explanations: a.max_concurrent_explanations,
        mask_seed: a.mask_seed,
        auth_token: a.auth_token,
        ..ServiceConfig::new(a.checkpoint, a.store, a.data_root)
    };
    config.validate()?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::io("tokio runtime", e))?;
    runtime.block_on(ctcbir_service::serve(config))
}
