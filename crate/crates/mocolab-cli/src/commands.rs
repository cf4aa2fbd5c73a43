//! Command orchestration. Every command materializes a run directory named
//! by the resolved-config hash, writes its resolved config and a run
//! manifest there, and is idempotent: rerunning with the same config and
//! seed overwrites with bit-identical outputs (wall-time fields aside).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::json;

use mocolab_core::analysis::{cka_per_block, ks_distance, layerwise_probe};
use mocolab_core::data::{load_dataset, DatasetManifest, LoadSpec, SplitDataset};
use mocolab_core::error::{Error, Result};
use mocolab_core::eval::finetune::{predict_logits, FineTunedModel};
use mocolab_core::eval::{
    fine_tune, metric_report, stratified_subsample, FineTuneMode, LabelFractionSpec, MetricReport,
};
use mocolab_core::nn::Encoder;
use mocolab_core::tensor::Scalar;
use mocolab_core::train::checkpoint::{peek_dtype, Checkpoint};
use mocolab_core::train::engine::run_pretraining;

use crate::config::{config_diff, DtypeChoice, RunConfig};
use crate::plots;

#[derive(Debug, Clone)]
pub enum Command {
    Generate { out: Option<PathBuf> },
    Pretrain,
    Finetune { checkpoint: PathBuf },
    Probe { checkpoint: PathBuf },
    AnalyzeCka { pretrained: PathBuf, finetuned: PathBuf },
    AnalyzeKs { run: PathBuf, reference: Option<PathBuf> },
    Report { run: PathBuf },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate { .. } => "generate",
            Command::Pretrain => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Probe { .. } => "probe",
            Command::AnalyzeCka { .. } => "analyze-cka",
            Command::AnalyzeKs { .. } => "analyze-ks",
            Command::Report { .. } => "report",
        }
    }

    fn extras(&self) -> Vec<String> {
        match self {
            Command::Generate { out } => {
                out.iter().map(|p| p.display().to_string()).collect()
            }
            Command::Pretrain => vec![],
            Command::Finetune { checkpoint } | Command::Probe { checkpoint } => {
                vec![checkpoint.display().to_string()]
            }
            Command::AnalyzeCka {
                pretrained,
                finetuned,
            } => vec![pretrained.display().to_string(), finetuned.display().to_string()],
            Command::AnalyzeKs { run, reference } => {
                let mut v = vec![run.display().to_string()];
                v.extend(reference.iter().map(|p| p.display().to_string()));
                v
            }
            Command::Report { run } => vec![run.display().to_string()],
        }
    }
}

/// Execute a command; returns the run directory that received the outputs.
pub fn run_command(cmd: &Command, cfg: RunConfig) -> Result<PathBuf> {
    let cfg = cfg.resolve()?;
    match cfg.dtype {
        DtypeChoice::F32 => run_typed::<f32>(cmd, &cfg),
        DtypeChoice::F64 => run_typed::<f64>(cmd, &cfg),
    }
}

fn run_typed<T: Scalar>(cmd: &Command, cfg: &RunConfig) -> Result<PathBuf> {
    let extras = cmd.extras();
    let extra_refs: Vec<&str> = extras.iter().map(|s| s.as_str()).collect();
    let dir = match cmd {
        Command::Generate { out: Some(out) } => out.clone(),
        _ => cfg.run_dir(cmd.name(), &extra_refs)?,
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_run_manifest(&dir, cmd.name(), &extras, cfg)?;

    match cmd {
        Command::Generate { .. } => {
            let spec = cfg.synthetic.to_spec(cfg.seed);
            let manifest = mocolab_core::data::generate_synthetic_dataset(&spec, &dir)?;
            println!("dataset manifest: {}", manifest.csv.display());
        }
        Command::Pretrain => {
            let data = load_split::<T>(cfg)?;
            let (ckpt, curves) =
                run_pretraining::<T>(cfg.train.clone(), &data.train.images, &data.val.images, Some(&dir))?;
            let last = curves.rows.last();
            println!(
                "pretrained {} epochs; final train InfoNCE {:.4}, val {:?}; checkpoint at {}",
                ckpt.epoch,
                last.map(|r| r.train_info_nce).unwrap_or(f64::NAN),
                last.and_then(|r| r.val_info_nce),
                dir.join("checkpoint_last.bin").display()
            );
        }
        Command::Finetune { checkpoint } => {
            let ckpt = load_checkpoint_checked::<T>(checkpoint, cfg)?;
            let data = load_split::<T>(cfg)?;
            finetune_protocol(&ckpt, &data, cfg, &dir)?;
        }
        Command::Probe { checkpoint } => {
            let ckpt = load_checkpoint_checked::<T>(checkpoint, cfg)?;
            let data = load_split::<T>(cfg)?;
            probe_all_blocks(&ckpt, &data, cfg, &dir)?;
        }
        Command::AnalyzeCka {
            pretrained,
            finetuned,
        } => {
            let ckpt = load_checkpoint_checked::<T>(pretrained, cfg)?;
            let model = FineTunedModel::<T>::load(finetuned)?;
            let diff = config_diff(&ckpt.config.encoder, &model.encoder_cfg);
            if !diff.is_empty() {
                return Err(Error::Config(format!(
                    "checkpoint and model encoders differ: {}",
                    diff.join("; ")
                )));
            }
            let data = load_split::<T>(cfg)?;
            let encoder = Encoder::new(ckpt.config.encoder.clone())?;
            let grid = cka_per_block(
                &encoder,
                &ckpt.query,
                &model.params,
                &data.test,
                &cfg.cka,
                cfg.finetune.inner.batch_size,
            )?;
            // persist the pooled feature matrices in the tensor binary format
            for (tag, params) in [("pretrained", &ckpt.query), ("finetuned", &model.params)] {
                for block in 1..=ckpt.config.encoder.num_blocks {
                    let feats = mocolab_core::analysis::extract_block_features(
                        &encoder,
                        params,
                        &data.test.images,
                        block,
                        cfg.finetune.inner.batch_size,
                    )?;
                    let path = dir.join(format!("features_{tag}_block{block}.tnsr"));
                    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                    let mut w = std::io::BufWriter::new(file);
                    feats.to_tensor::<T>()?.write_to(&mut w).map_err(|e| Error::io(&path, e))?;
                }
            }
            let rows: Vec<serde_json::Value> = grid
                .iter()
                .map(|(block, v)| json!({"block": block, "cka": v}))
                .collect();
            write_json(&dir.join("cka_grid.json"), &json!({ "rows": rows }))?;
            println!("cka grid written to {}", dir.join("cka_grid.json").display());
        }
        Command::AnalyzeKs { run, reference } => {
            analyze_ks::<T>(run, reference.as_deref(), cfg, &dir)?;
        }
        Command::Report { run } => {
            consolidate_report(run, cfg, &dir)?;
        }
    }
    Ok(dir)
}

fn write_run_manifest(dir: &Path, command: &str, extras: &[String], cfg: &RunConfig) -> Result<()> {
    let cfg_path = dir.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()?).map_err(|e| Error::io(&cfg_path, e))?;
    // run.json records identity and wall-clock context; it is the one file
    // excluded from bit-identity comparisons
    let manifest = json!({
        "command": command,
        "inputs": extras,
        "version": env!("CARGO_PKG_VERSION"),
        "unix_time": std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    });
    write_json(&dir.join("run.json"), &manifest)
}

pub fn load_split<T: Scalar>(cfg: &RunConfig) -> Result<SplitDataset<T>> {
    if cfg.dataset.manifest.as_os_str().is_empty() {
        return Err(Error::Config(
            "dataset.manifest is not set; run `generate` or point it at a manifest CSV".into(),
        ));
    }
    let manifest = DatasetManifest::new(&cfg.dataset.root, &cfg.dataset.manifest);
    let spec = LoadSpec {
        height: cfg.train.encoder.input_size.0,
        width: cfg.train.encoder.input_size.1,
        channels: cfg.train.encoder.in_channels,
    };
    load_dataset(&manifest, spec)
}

fn load_checkpoint_checked<T: Scalar>(path: &Path, cfg: &RunConfig) -> Result<Checkpoint<T>> {
    let file_dtype = peek_dtype(path)?;
    if file_dtype != cfg.dtype.as_dtype() {
        return Err(Error::Config(format!(
            "checkpoint {} holds {file_dtype} but the config requests {:?}",
            path.display(),
            cfg.dtype
        )));
    }
    let ckpt = Checkpoint::<T>::load(path)?;
    let diff = config_diff(&ckpt.config.encoder, &cfg.train.encoder);
    if !diff.is_empty() {
        return Err(Error::Config(format!(
            "checkpoint/config encoder mismatch: {}",
            diff.join("; ")
        )));
    }
    Ok(ckpt)
}

fn slug(mode: FineTuneMode, fraction: f64) -> String {
    let m = match mode {
        FineTuneMode::LL => "ll",
        FineTuneMode::E2E => "e2e",
    };
    format!("{m}_{}", format!("{fraction}").replace('.', "p"))
}

fn finetune_protocol<T: Scalar>(
    ckpt: &Checkpoint<T>,
    data: &SplitDataset<T>,
    cfg: &RunConfig,
    dir: &Path,
) -> Result<()> {
    let encoder = Encoder::new(ckpt.config.encoder.clone())?;
    let mut summary: Vec<serde_json::Value> = Vec::new();
    let mut jobs: Vec<(FineTuneMode, f64, bool)> = Vec::new();
    for &fraction in &cfg.finetune.fractions {
        for &mode in &cfg.finetune.modes {
            jobs.push((mode, fraction, false));
        }
        if cfg.finetune.supervised_baseline {
            jobs.push((FineTuneMode::E2E, fraction, true));
        }
    }
    for (mode, fraction, supervised) in jobs {
        let spec = LabelFractionSpec::new(fraction, cfg.seed);
        let train = stratified_subsample(&data.train, &spec)?;
        let mut ft_cfg = cfg.finetune.inner.clone();
        ft_cfg.mode = mode;
        ft_cfg.from_random_init = supervised;
        let model = fine_tune(ckpt, &ft_cfg, &train, &data.val)?;
        let tag = if supervised {
            format!("supervised_{}", slug(mode, fraction))
        } else {
            slug(mode, fraction)
        };
        let model_path = dir.join(format!("ft_{tag}.model"));
        model.save(&model_path)?;

        let logits = predict_logits(
            &encoder,
            &model.params,
            &model.head,
            &data.test.images,
            ft_cfg.batch_size,
        )?;
        write_logits_csv(&dir.join(format!("ft_{tag}_test_logits.csv")), &logits)?;
        let probs = mocolab_core::eval::finetune::logits_to_probs(logits);
        let report = metric_report(
            ft_cfg.metric,
            &probs,
            &data.test.labels,
            cfg.bootstrap.replicates,
            cfg.seed,
            cfg.bootstrap.method,
        )?;
        write_metric_report(dir, &format!("ft_{tag}"), &report)?;
        summary.push(json!({
            "tag": tag,
            "mode": match mode { FineTuneMode::LL => "ll", FineTuneMode::E2E => "e2e" },
            "fraction": fraction,
            "supervised_baseline": supervised,
            "model": format!("ft_{tag}.model"),
            "metric": report.metric,
            "point": report.bootstrap.point,
            "mu": report.bootstrap.mu,
            "ci_low": report.bootstrap.ci_low,
            "ci_high": report.bootstrap.ci_high,
            "best_epoch": model.best_epoch,
        }));
        println!(
            "finetune {tag}: {} = {:.4} [{:.4}, {:.4}]",
            report.metric, report.bootstrap.point, report.bootstrap.ci_low, report.bootstrap.ci_high
        );
    }
    write_json(&dir.join("finetune_summary.json"), &json!({ "rows": summary }))
}

fn probe_all_blocks<T: Scalar>(
    ckpt: &Checkpoint<T>,
    data: &SplitDataset<T>,
    cfg: &RunConfig,
    dir: &Path,
) -> Result<()> {
    let mut rows = Vec::new();
    for block in 1..=ckpt.config.encoder.num_blocks {
        let outcome = layerwise_probe(
            ckpt,
            block,
            &data.train,
            &data.val,
            &data.test,
            &cfg.probe,
            cfg.bootstrap.replicates,
            cfg.bootstrap.method,
        )?;
        write_logits_csv(
            &dir.join(format!("probe_block{block}_test_logits.csv")),
            &outcome.test_logits,
        )?;
        write_metric_report(dir, &format!("probe_block{block}"), &outcome.report)?;
        println!(
            "probe block {block}: {} = {:.4} [{:.4}, {:.4}]",
            outcome.report.metric,
            outcome.report.bootstrap.point,
            outcome.report.bootstrap.ci_low,
            outcome.report.bootstrap.ci_high
        );
        rows.push(json!({
            "block": block,
            "metric": outcome.report.metric,
            "point": outcome.report.bootstrap.point,
            "mu": outcome.report.bootstrap.mu,
            "sigma": outcome.report.bootstrap.sigma,
            "ci_low": outcome.report.bootstrap.ci_low,
            "ci_high": outcome.report.bootstrap.ci_high,
            "best_epoch": outcome.best_epoch,
        }));
    }
    write_json(&dir.join("probe_report.json"), &json!({ "rows": rows }))
}

fn analyze_ks<T: Scalar>(
    finetune_run: &Path,
    reference: Option<&Path>,
    cfg: &RunConfig,
    dir: &Path,
) -> Result<()> {
    let summary_path = finetune_run.join("finetune_summary.json");
    let raw = fs::read_to_string(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
    let summary: serde_json::Value =
        serde_json::from_str(&raw).map_err(|e| Error::Data(format!("bad summary json: {e}")))?;
    let rows = summary["rows"]
        .as_array()
        .ok_or_else(|| Error::Data("finetune summary has no rows".into()))?;

    // reference model: explicit path, or best-performing 100% E2E row
    let reference_path: PathBuf = match reference {
        Some(p) => p.to_path_buf(),
        None => {
            let best = rows
                .iter()
                .filter(|r| {
                    r["fraction"].as_f64() == Some(1.0)
                        && r["supervised_baseline"].as_bool() != Some(true)
                })
                .max_by(|a, b| {
                    a["point"]
                        .as_f64()
                        .unwrap_or(f64::NEG_INFINITY)
                        .total_cmp(&b["point"].as_f64().unwrap_or(f64::NEG_INFINITY))
                })
                .ok_or_else(|| {
                    Error::Config("no fraction-1.0 row in the finetune run to use as reference".into())
                })?;
            finetune_run.join(best["model"].as_str().unwrap_or_default())
        }
    };
    let reference_model = FineTunedModel::<T>::load(&reference_path)?;
    let data = load_split::<T>(cfg)?;
    let encoder = Encoder::new(reference_model.encoder_cfg.clone())?;
    let ref_logits = flatten(predict_logits(
        &encoder,
        &reference_model.params,
        &reference_model.head,
        &data.test.images,
        cfg.finetune.inner.batch_size,
    )?);

    let mut out_rows = Vec::new();
    for row in rows {
        let model_rel = row["model"].as_str().unwrap_or_default();
        let model_path = finetune_run.join(model_rel);
        if model_path == reference_path {
            continue;
        }
        let model = FineTunedModel::<T>::load(&model_path)?;
        let logits = flatten(predict_logits(
            &encoder,
            &model.params,
            &model.head,
            &data.test.images,
            cfg.finetune.inner.batch_size,
        )?);
        let ks = ks_distance(&logits, &ref_logits, &cfg.ks)?;
        println!("ks {} vs reference: {ks:.4}", row["tag"]);
        out_rows.push(json!({
            "tag": row["tag"],
            "mode": row["mode"],
            "fraction": row["fraction"],
            "supervised_baseline": row["supervised_baseline"],
            "ks": ks,
        }));
    }
    write_json(
        &dir.join("ks_grid.json"),
        &json!({
            "reference": reference_path.display().to_string(),
            "num_bins": cfg.ks.num_bins,
            "rows": out_rows,
        }),
    )
}

fn consolidate_report(run: &Path, cfg: &RunConfig, dir: &Path) -> Result<()> {
    let mut sections = serde_json::Map::new();
    for name in [
        "finetune_summary.json",
        "probe_report.json",
        "cka_grid.json",
        "ks_grid.json",
    ] {
        let p = run.join(name);
        if p.exists() {
            let raw = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let v: serde_json::Value =
                serde_json::from_str(&raw).map_err(|e| Error::Data(format!("{name}: {e}")))?;
            sections.insert(name.trim_end_matches(".json").to_string(), v);
        }
    }
    let curves = run.join("loss_curves.csv");
    if curves.exists() {
        let raw = fs::read_to_string(&curves).map_err(|e| Error::io(&curves, e))?;
        sections.insert("loss_curves_csv".into(), json!(raw));
        if cfg.plots {
            plots::plot_loss_curves(&raw, &dir.join("loss_curves.png"))?;
        }
    }
    if cfg.plots {
        if let Some(grid) = sections.get("cka_grid") {
            plots::plot_cka_heatmap(grid, &dir.join("cka_heatmap.png"))?;
        }
    }
    if sections.is_empty() {
        return Err(Error::Data(format!(
            "{} holds no report artifacts to consolidate",
            run.display()
        )));
    }
    write_json(&dir.join("report.json"), &serde_json::Value::Object(sections))?;
    println!("report written to {}", dir.join("report.json").display());
    Ok(())
}

fn flatten(rows: Vec<Vec<f64>>) -> Vec<f64> {
    rows.into_iter().flatten().collect()
}

fn write_logits_csv(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn write_metric_report(dir: &Path, stem: &str, report: &MetricReport) -> Result<()> {
    let json_path = dir.join(format!("{stem}_metrics.json"));
    write_json(&json_path, &serde_json::to_value(report).map_err(|e| Error::Data(e.to_string()))?)?;
    // per-replicate values as CSV
    let csv_path = dir.join(format!("{stem}_replicates.csv"));
    let mut out = String::from("replicate,value\n");
    for (i, v) in report.bootstrap.values.iter().enumerate() {
        out.push_str(&format!("{i},{v:.17e}\n"));
    }
    fs::write(&csv_path, out).map_err(|e| Error::io(&csv_path, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Data(e.to_string()))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}
