use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use msegnn::graphdata::{
    generate_synthetic, load_dataset, sample_episode, save_dataset, split_classes,
};
use msegnn::metatrain::{evaluate_episode, meta_train, test_protocol, EvalSummary};
use msegnn::{Checkpoint, Dataset, DatasetSplit, MetricReport, MseGnn, ParameterSet, SplitRole};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cli::{EvalArgs, ExplainArgs, GenDataArgs, GlobalArgs, TrainArgs};
use crate::config::{model_mismatches, RunConfig};
use crate::dot::write_dot;
use crate::error::CliError;

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const BEST_CHECKPOINT: &str = "checkpoint_best.json";
pub const LAST_CHECKPOINT: &str = "checkpoint_last.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const VALIDATION_REPORT: &str = "report_validation.json";
pub const CLASSIFICATION_REPORT: &str = "report_classification.json";
pub const EXPLANATION_REPORT: &str = "report_explanation.json";
pub const EXPLANATIONS: &str = "explanations.jsonl";
pub const EXPLANATIONS_DOT: &str = "explanations.dot";
pub const RESOLVED_CONFIG: &str = "run_config.toml";

/// Preset, then config file, then the global `--seed`.
fn base_config(global: &GlobalArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::preset(
        global
            .preset
            .as_deref()
            .unwrap_or(crate::config::DEFAULT_PRESET),
    )?;
    if let Some(path) = &global.config {
        cfg = cfg.merge_file(path)?;
    }
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn resolve(out_dir: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        out_dir.join(path)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("artifact serializes");
    fs::write(path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn load_data(path: &Path) -> Result<Dataset, CliError> {
    load_dataset(path).map_err(|e| match e {
        msegnn::DataError::Io(io) => CliError::Io(format!("{}: {io}", path.display())),
        other => CliError::Io(format!("{}: {other}", path.display())),
    })
}

/// Split for `dataset` as configured; the counts must cover its classes.
fn dataset_split(cfg: &RunConfig, dataset: &Dataset) -> Result<DatasetSplit, CliError> {
    if cfg.data.split.iter().sum::<usize>() != dataset.num_classes() {
        return Err(CliError::Config(format!(
            "data.split: {:?} does not cover the {} classes of the dataset",
            cfg.data.split,
            dataset.num_classes()
        )));
    }
    Ok(split_classes(
        dataset.num_classes(),
        cfg.data.split,
        cfg.data.split_seed,
    )?)
}

fn check_features(cfg: &RunConfig, dataset: &Dataset) -> Result<(), CliError> {
    if dataset.feature_dim() != cfg.model.feature_dim {
        return Err(CliError::Config(format!(
            "model.feature_dim: model expects {} but the dataset has {}",
            cfg.model.feature_dim,
            dataset.feature_dim()
        )));
    }
    Ok(())
}

pub fn gen_data(global: &GlobalArgs, args: &GenDataArgs) -> Result<PathBuf, CliError> {
    let mut cfg = base_config(global)?;
    args.apply(&mut cfg);
    cfg.model.feature_dim = cfg.data.generator.feature_dim;
    cfg.normalize();
    if cfg.data.classes < 2 {
        return Err(CliError::Config(format!(
            "data.classes: need at least 2 classes, got {}",
            cfg.data.classes
        )));
    }
    cfg.data
        .generator
        .validate()
        .map_err(|e| CliError::Config(format!("data.generator: {e}")))?;

    let graphs = generate_synthetic(
        cfg.data.classes,
        cfg.data.per_class,
        cfg.seed,
        &cfg.data.generator,
    )?;
    let dataset = Dataset::new(graphs, cfg.data.classes)?.with_provenance(cfg.provenance());
    ensure_dir(&global.out_dir)?;
    let path = resolve(
        &global.out_dir,
        args.out.as_deref().unwrap_or(Path::new(DATASET_FILE)),
    );
    save_dataset(&dataset, &path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;

    let stats = dataset.stats();
    println!("wrote {}", path.display());
    println!("classes      {}", stats.num_classes);
    println!("graphs       {}", stats.num_graphs);
    println!("avg # nodes  {:.1}", stats.mean_nodes);
    println!("avg # edges  {:.1}", stats.mean_edges);
    println!("fingerprint  {}", cfg.fingerprint());
    Ok(path)
}

#[derive(Serialize)]
struct LogHeader<'a> {
    config_fingerprint: &'a str,
}

pub fn train(global: &GlobalArgs, args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = base_config(global)?;
    args.apply(&mut cfg)?;
    let dataset = load_data(&args.data)?;
    if let Some(origin) = RunConfig::from_provenance(dataset.provenance()) {
        cfg.data.per_class = origin.data.per_class;
        cfg.data.generator = origin.data.generator;
    }
    cfg.data.classes = dataset.num_classes();
    cfg.model.feature_dim = dataset.feature_dim();
    cfg.normalize();
    cfg.validate()?;
    let split = dataset_split(&cfg, &dataset)?;
    let fingerprint = cfg.fingerprint();

    ensure_dir(&global.out_dir)?;
    fs::write(global.out_dir.join(RESOLVED_CONFIG), cfg.to_toml())?;
    let model = MseGnn::new(cfg.model.clone())?;
    let mut params = model.init_params(cfg.seed);

    let log_path = global.out_dir.join(TRAIN_LOG);
    let mut log = create(&log_path)?;
    let header = serde_json::to_string(&LogHeader {
        config_fingerprint: &fingerprint,
    })
    .expect("header serializes");
    writeln!(log, "{header}")?;
    let mut io_error = None;
    let outcome = meta_train(&model, &mut params, &dataset, &split, &cfg.meta, |record| {
        if io_error.is_none() {
            let line = serde_json::to_string(record).expect("log record serializes");
            if let Err(e) = writeln!(log, "{line}") {
                io_error = Some(e);
            }
        }
        if let Some(v) = record.val_accuracy {
            info!("episode {}: validation accuracy {v:.4}", record.episode_idx);
        }
    });
    log.flush()?;
    if let Some(e) = io_error {
        return Err(CliError::Io(format!("{}: {e}", log_path.display())));
    }
    let outcome = outcome?;
    if outcome.audit.violations > 0 {
        return Err(CliError::Numeric(format!(
            "slow parameters changed during {} local adaptations",
            outcome.audit.violations
        )));
    }

    for (name, set) in [
        (BEST_CHECKPOINT, &outcome.best),
        (LAST_CHECKPOINT, &outcome.last),
    ] {
        let path = global.out_dir.join(name);
        Checkpoint::new(&model, set, cfg.provenance())
            .save(&path)
            .map_err(|e| CliError::Io(e.to_string()))?;
    }

    let reports = if split.val_classes.len() >= cfg.meta.n_way && cfg.meta.val_episodes > 0 {
        let summary = test_protocol(
            &model,
            &outcome.best,
            &dataset,
            &split,
            SplitRole::Val,
            &cfg.meta,
            cfg.meta.val_episodes,
            cfg.eval_seed(),
            &fingerprint,
        )?;
        classification_reports(&summary)
    } else {
        warn!(
            "validation split cannot form {}-way episodes; empty validation report",
            cfg.meta.n_way
        );
        Vec::new()
    };
    write_json(&global.out_dir.join(VALIDATION_REPORT), &reports)?;
    println!(
        "trained {} meta-iterations{}; artifacts in {}",
        outcome.log.len(),
        if outcome.stopped_early {
            " (early stop)"
        } else {
            ""
        },
        global.out_dir.display()
    );
    if let Some(acc) = reports.first() {
        println!("validation accuracy {:.4} ± {:.4}", acc.mean, acc.std);
    }
    Ok(())
}

fn classification_reports(summary: &EvalSummary) -> Vec<MetricReport> {
    summary
        .accuracy
        .iter()
        .chain(&summary.auc)
        .cloned()
        .collect()
}

/// Checkpoint, its embedded run configuration (with file and seed overrides)
/// and the restored model.
struct Restored {
    cfg: RunConfig,
    model: MseGnn,
    params: ParameterSet,
}

fn restore(global: &GlobalArgs, ckpt: &str) -> Result<Restored, CliError> {
    let path = match ckpt {
        "best" => global.out_dir.join(BEST_CHECKPOINT),
        "last" => global.out_dir.join(LAST_CHECKPOINT),
        other => PathBuf::from(other),
    };
    let checkpoint = Checkpoint::load(&path).map_err(|e| CliError::Io(e.to_string()))?;
    let stored = RunConfig::from_provenance(&checkpoint.extra).ok_or_else(|| {
        CliError::Config(format!("{}: no embedded run configuration", path.display()))
    })?;
    let mut cfg = stored.clone();
    if let Some(file) = &global.config {
        cfg = cfg.merge_file(file)?;
    }
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    let mismatches = model_mismatches(&cfg.model, &checkpoint.model);
    if !mismatches.is_empty() {
        return Err(CliError::Config(format!(
            "configuration does not match checkpoint: {}",
            mismatches.join(", ")
        )));
    }
    let (model, params) = checkpoint.restore()?;
    Ok(Restored { cfg, model, params })
}

pub fn eval(global: &GlobalArgs, args: &EvalArgs) -> Result<(), CliError> {
    let Restored {
        mut cfg,
        model,
        params,
    } = restore(global, &args.ckpt)?;
    if let Some(n) = args.episodes {
        cfg.eval.episodes = n;
    }
    if let Some(n) = args.query_per_class {
        cfg.meta.query_per_class = n;
    }
    cfg.normalize();
    cfg.validate()?;
    let dataset = load_data(&args.data)?;
    check_features(&cfg, &dataset)?;
    let split = dataset_split(&cfg, &dataset)?;
    let fingerprint = cfg.fingerprint();

    let summary = test_protocol(
        &model,
        &params,
        &dataset,
        &split,
        args.split,
        &cfg.meta,
        cfg.eval.episodes,
        cfg.eval_seed(),
        &fingerprint,
    )?;
    ensure_dir(&global.out_dir)?;
    write_json(
        &global.out_dir.join(CLASSIFICATION_REPORT),
        &classification_reports(&summary),
    )?;
    for r in classification_reports(&summary) {
        println!(
            "{:<16} {:.4} ± {:.4} over {} episodes",
            r.metric, r.mean, r.std, r.n_episodes
        );
    }
    match &summary.explanation_auc {
        Some(r) => {
            write_json(&global.out_dir.join(EXPLANATION_REPORT), &[r])?;
            println!(
                "{:<16} {:.4} ± {:.4} over {} episodes",
                r.metric, r.mean, r.std, r.n_episodes
            );
        }
        None => warn!("dataset has no ground-truth masks; explanation report skipped"),
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct ExplanationRecord {
    pub episode: usize,
    pub graph_id: usize,
    pub num_nodes: usize,
    pub mask: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth_mask: Option<Vec<u8>>,
    pub predicted: usize,
    pub label: usize,
    pub predicted_class: usize,
    pub true_class: usize,
    pub config_fingerprint: String,
}

pub fn explain(global: &GlobalArgs, args: &ExplainArgs) -> Result<(), CliError> {
    let Restored {
        mut cfg,
        model,
        params,
    } = restore(global, &args.ckpt)?;
    if let Some(n) = args.episodes {
        cfg.eval.explain_episodes = n;
    }
    cfg.normalize();
    cfg.validate()?;
    let dataset = load_data(&args.data)?;
    check_features(&cfg, &dataset)?;
    let split = dataset_split(&cfg, &dataset)?;
    let fingerprint = cfg.fingerprint();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval_seed());
    let mut records = Vec::new();
    let mut graphs = Vec::new();
    for episode_idx in 0..cfg.eval.explain_episodes {
        let episode = sample_episode(
            &dataset,
            &split,
            args.split,
            cfg.meta.n_way,
            cfg.meta.k_shot,
            cfg.meta.query_per_class,
            &mut rng,
        )?;
        let eval = evaluate_episode(&model, &params, &episode, &cfg.meta)?;
        for ((shot, mask), &predicted) in
            episode.query.iter().zip(eval.masks).zip(&eval.predictions)
        {
            graphs.push(shot.graph.clone());
            records.push(ExplanationRecord {
                episode: episode_idx,
                graph_id: shot.graph.id,
                num_nodes: shot.graph.num_nodes(),
                mask,
                truth_mask: shot.graph.truth_mask().map(<[u8]>::to_vec),
                predicted,
                label: shot.label,
                predicted_class: episode.class_map[predicted],
                true_class: episode.class_map[shot.label],
                config_fingerprint: fingerprint.clone(),
            });
        }
    }

    ensure_dir(&global.out_dir)?;
    let path = global.out_dir.join(EXPLANATIONS);
    let mut out = create(&path)?;
    for r in &records {
        writeln!(
            out,
            "{}",
            serde_json::to_string(r).expect("record serializes")
        )?;
    }
    out.flush()?;
    println!("wrote {} explanations to {}", records.len(), path.display());
    if args.dot {
        let path = global.out_dir.join(EXPLANATIONS_DOT);
        let mut out = create(&path)?;
        let items: Vec<_> = records
            .into_iter()
            .zip(graphs.iter().map(|g| g.as_ref()))
            .collect();
        write_dot(&mut out, &items, &fingerprint)?;
        out.flush()?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
