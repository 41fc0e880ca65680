use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use log::info;
use mutualseg::data::{read_dataset, write_dataset, Dataset, Modality};
use mutualseg::eval::{
    evaluate_trainer, read_reports_csv, run_ablation, run_assistant_sweep, write_reports_csv, write_summary,
    DiceReport, ExperimentData, ModelTag,
};
use mutualseg::trainer::{
    checkpoint_load, checkpoint_save, read_metrics_log, RunOptions, Trainer, TrainingConfig, TrainingMode,
};
use mutualseg::{Error, Scalar};

use crate::config::{Command, Precision, RunConfig};
use crate::{plots, version_string, CliError, Tag};

const METRICS_FILE: &str = "metrics.log";
const MANIFEST_FILE: &str = "manifest.txt";

fn io_err(module: &'static str, path: &Path, e: std::io::Error) -> CliError {
    CliError::Module {
        module,
        source: Error::Io {
            path: path.to_path_buf(),
            source: e,
        },
    }
}

fn create_dir(module: &'static str, p: &Path) -> Result<(), CliError> {
    fs::create_dir_all(p).map_err(|e| io_err(module, p, e))
}

/// Runs the configured command and writes its manifest.
pub fn dispatch(cfg: &RunConfig) -> Result<(), CliError> {
    let start = Instant::now();
    let started = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    info!("resolved configuration:\n{}", cfg.to_kv());
    let module = cfg.command.as_str();
    create_dir(module, &cfg.out_dir)?;
    match (cfg.command, cfg.precision) {
        (Command::Synth, _) => synth(cfg)?,
        (Command::Train, Precision::F32) => train::<f32>(cfg)?,
        (Command::Train, Precision::F64) => train::<f64>(cfg)?,
        (Command::Eval, Precision::F32) => eval::<f32>(cfg)?,
        (Command::Eval, Precision::F64) => eval::<f64>(cfg)?,
        (Command::Ablate, Precision::F32) => ablate::<f32>(cfg)?,
        (Command::Ablate, Precision::F64) => ablate::<f64>(cfg)?,
        (Command::Sweep, Precision::F32) => sweep::<f32>(cfg)?,
        (Command::Sweep, Precision::F64) => sweep::<f64>(cfg)?,
        (Command::Report, _) => report(cfg)?,
    }
    if cfg.command != Command::Report {
        write_manifest(cfg, started, start.elapsed().as_secs_f64())?;
    }
    Ok(())
}

fn write_manifest(cfg: &RunConfig, started_unix: u64, wall: f64) -> Result<(), CliError> {
    let mut s = String::new();
    let _ = writeln!(s, "# version: {}", version_string());
    let _ = writeln!(s, "# command: {}", cfg.command.as_str());
    let _ = writeln!(s, "# seed: {}", cfg.training.seed);
    let _ = writeln!(s, "# started_unix: {started_unix}");
    let _ = writeln!(s, "# wall_time_s: {wall:.3}");
    let _ = writeln!(s, "# rerun: mutualseg {} --config {MANIFEST_FILE}", cfg.command.as_str());
    s.push_str(&cfg.to_kv());
    let path = cfg.out_dir.join(MANIFEST_FILE);
    fs::write(&path, s).map_err(|e| io_err(cfg.command.as_str(), &path, e))
}

fn phantom_data(cfg: &RunConfig, data_seed: u64) -> mutualseg::Result<ExperimentData> {
    let p = &cfg.phantom;
    ExperimentData::phantom(
        p.image_size,
        p.num_classes,
        p.n_target,
        p.n_assistant,
        p.n_test,
        p.target_style,
        p.geometry_seed,
        data_seed,
    )
}

fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let root = cfg.data_root.as_ref().expect("validated");
    let data = phantom_data(cfg, cfg.training.seed).tag("synth")?;
    write_dataset(&data.target_train, &root.join("train")).tag("synth")?;
    write_dataset(&data.assistant, &root.join("train")).tag("synth")?;
    write_dataset(&data.target_test, &root.join("test")).tag("synth")?;
    if cfg.phantom.n_val > 0 {
        let val = phantom_data(cfg, cfg.training.seed ^ 0x5EED_0000_0000)
            .tag("synth")?
            .target_test
            .take(cfg.phantom.n_val.min(cfg.phantom.n_test))
            .tag("synth")?;
        write_dataset(&val, &root.join("val")).tag("synth")?;
    }
    info!(
        "wrote {} target, {} assistant, {} test samples under {}",
        data.target_train.len(),
        data.assistant.len(),
        data.target_test.len(),
        root.display()
    );
    Ok(())
}

fn load_split(root: &Path, split: &str, modality: Modality) -> mutualseg::Result<Dataset> {
    read_dataset(&root.join(split), modality)
}

fn load_data(root: &Path) -> mutualseg::Result<ExperimentData> {
    ExperimentData::from_datasets(
        load_split(root, "train", Modality::Target)?,
        load_split(root, "test", Modality::Target)?,
        load_split(root, "train", Modality::Assistant)?,
    )
}

fn train<T: Scalar>(cfg: &RunConfig) -> Result<(), CliError> {
    let root = cfg.data_root.as_ref().expect("validated");
    let target = load_split(root, "train", Modality::Target).tag("train")?;
    let assistant = if cfg.training.mode.reads_assistant() {
        load_split(root, "train", Modality::Assistant).tag("train")?
    } else {
        Dataset::new(Vec::new(), Modality::Assistant, target.num_classes()).tag("train")?
    };
    let val_dir = root.join("val");
    let validation = if val_dir.exists() {
        Some(load_split(root, "val", Modality::Target).tag("train")?)
    } else {
        None
    };
    let mut trainer = match &cfg.checkpoint {
        Some(c) => {
            let t = checkpoint_load::<T>(c).tag("train")?;
            if t.config() != &cfg.training {
                log::warn!("resuming with the configuration stored in {}", c.display());
            }
            t
        }
        None => {
            let n = target
                .shape()
                .ok_or_else(|| CliError::Usage("training set is empty".into()))?
                .0;
            Trainer::<T>::new(cfg.training.clone(), target.num_classes(), n).tag("train")?
        }
    };
    let ckpt_dir = cfg.out_dir.join("checkpoints");
    let opts = RunOptions {
        validation: validation.as_ref(),
        checkpoint_dir: Some(ckpt_dir),
        checkpoint_every: cfg.checkpoint_every,
        metrics_log: Some(cfg.out_dir.join(METRICS_FILE)),
        max_iterations: cfg.max_iterations,
    };
    trainer.run(&target, &assistant, &opts).tag("train")?;
    let fin = cfg.out_dir.join("final.ckpt");
    checkpoint_save(&trainer, &fin).tag("train")?;
    info!(
        "trained {} iterations over {} epochs; final checkpoint {}",
        trainer.iteration(),
        trainer.epoch(),
        fin.display()
    );
    Ok(())
}

fn tags_for(mode: TrainingMode) -> Vec<ModelTag> {
    match mode {
        TrainingMode::Baseline => vec![ModelTag::Baseline],
        TrainingMode::FineTune => vec![ModelTag::FineTune],
        TrainingMode::JointTraining => vec![ModelTag::Joint],
        _ => vec![ModelTag::Syn, ModelTag::Real, ModelTag::Ensemble],
    }
}

fn emit(cfg: &RunConfig, name: &str, rows: &[(String, DiceReport)]) -> Result<(), CliError> {
    let module = cfg.command.as_str();
    write_reports_csv(&cfg.out_dir.join(format!("{name}.csv")), rows).tag(module)?;
    write_summary(&cfg.out_dir.join(format!("{name}_summary.txt")), rows).tag(module)?;
    for (exp, r) in rows {
        println!("{exp:<28} {:<9} mean Dice {:.4}", r.model_tag.as_str(), r.mean);
    }
    Ok(())
}

fn eval<T: Scalar>(cfg: &RunConfig) -> Result<(), CliError> {
    let root = cfg.data_root.as_ref().expect("validated");
    let ckpt = cfg.checkpoint.as_ref().expect("validated");
    let trainer = checkpoint_load::<T>(ckpt).tag("eval")?;
    let test = load_split(root, "test", Modality::Target).tag("eval")?;
    let label = trainer.config().mode.as_str().to_string();
    let rows = tags_for(trainer.config().mode)
        .into_iter()
        .map(|tag| {
            evaluate_trainer(&trainer, tag, &test, cfg.aggregation)
                .map(|r| (label.clone(), r))
                .tag("eval")
        })
        .collect::<Result<Vec<_>, _>>()?;
    emit(cfg, "eval", &rows)
}

fn seed_data(cfg: &RunConfig, seed: u64) -> Result<ExperimentData, CliError> {
    let module = cfg.command.as_str();
    match &cfg.data_root {
        Some(root) => load_data(root).tag(module),
        None => phantom_data(cfg, seed).tag(module),
    }
}

fn seeded(cfg: &RunConfig, seed: u64) -> TrainingConfig {
    TrainingConfig {
        seed,
        ..cfg.training.clone()
    }
}

fn ablate<T: Scalar>(cfg: &RunConfig) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let data = seed_data(cfg, seed)?;
        let table = run_ablation::<T>(&cfg.ablation_variants, &data, &seeded(cfg, seed), cfg.aggregation)
            .tag("ablate")?;
        for row in table {
            for r in row.reports() {
                rows.push((format!("seed{seed}/{}", row.mode.as_str()), r.clone()));
            }
        }
    }
    emit(cfg, "ablation", &rows)
}

fn sweep<T: Scalar>(cfg: &RunConfig) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let data = seed_data(cfg, seed)?;
        let table =
            run_assistant_sweep::<T>(&cfg.sweep_counts, &data, &seeded(cfg, seed), cfg.aggregation).tag("sweep")?;
        for row in table {
            for r in [row.syn, row.real, row.ensemble] {
                rows.push((format!("seed{seed}/count{}", row.count), r));
            }
        }
    }
    emit(cfg, "sweep", &rows)
}

/// Regenerates summaries and plots from the files a run left behind.
fn report(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = &cfg.out_dir;
    let mut produced: Vec<PathBuf> = Vec::new();
    let metrics = dir.join(METRICS_FILE);
    if metrics.exists() {
        let records = read_metrics_log(&metrics).tag("report")?;
        let out = dir.join("loss_curves.svg");
        plots::loss_curves(&out, &records)?;
        produced.push(out);
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err("report", dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    entries.sort();
    let mut table = String::new();
    for csv in entries {
        let stem = csv.file_stem().unwrap().to_string_lossy().to_string();
        let rows = read_reports_csv(&csv).tag("report")?;
        write_summary(&dir.join(format!("{stem}_summary.txt")), &rows).tag("report")?;
        let svg = dir.join(format!("{stem}_dice.svg"));
        plots::dice_bars(&svg, &rows)?;
        produced.push(svg);
        let _ = writeln!(table, "## {stem}");
        for (exp, r) in &rows {
            let _ = writeln!(table, "{exp:<28} {:<9} {:.4}", r.model_tag.as_str(), r.mean);
        }
    }
    if produced.is_empty() {
        return Err(CliError::Usage(format!(
            "`out_dir` {} holds no metrics log or report CSV",
            dir.display()
        )));
    }
    let path = dir.join("report.txt");
    fs::write(&path, &table).map_err(|e| io_err("report", &path, e))?;
    print!("{table}");
    for p in produced {
        info!("wrote {}", p.display());
    }
    Ok(())
}
