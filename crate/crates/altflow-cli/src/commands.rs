//! The five experiment commands. Every command resolves its config (file
//! plus flag overrides), writes the echo next to its outputs, and emits
//! machine-readable reports that embed the resolved config.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use altflow::data::{oracle_score_map, save_tensor};
use altflow::diagnostics::{channel_ks_report, ks_critical_5pct, mean_square_statistic, KsReport};
use altflow::error::{Error, Result};
use altflow::evaluation::{auroc, pixel_auroc, stability, StabilityReport};
use altflow::flow::{load_checkpoint, save_checkpoint};
use altflow::scoring::{image_score, score_map_learned};
use altflow::trainer::TrainReport;

use crate::config::{echo_toml, load_config, ExperimentConfig, Overrides};
use crate::pool::{run_jobs, threads_from_env};
use crate::run::{
    curves_csv, metric_column, metrics_csv, parse_metrics_csv, train_once, windowed_mean_std,
};

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serialization");
    text.push('\n');
    write_text(path, &text)
}

fn prepare(config_path: &Path, overrides: &Overrides) -> Result<(ExperimentConfig, PathBuf)> {
    let cfg = load_config(config_path, overrides)?;
    let out = cfg.output.dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
    write_text(&out.join("config_echo.toml"), &echo_toml(&cfg))?;
    Ok((cfg, out))
}

fn config_dir(config_path: &Path) -> &Path {
    config_path.parent().unwrap_or_else(|| Path::new("."))
}

#[derive(Serialize)]
struct TrainDiagnostics<'a> {
    raw: &'a Option<KsReport>,
    standardized: &'a Option<KsReport>,
}

#[derive(Serialize)]
struct TrainArtifact<'a> {
    experiment: &'a ExperimentConfig,
    train: &'a TrainReport,
    diagnostics: TrainDiagnostics<'a>,
}

/// Train one model: checkpoints, TrainReport JSON, wide and long metric CSVs.
pub fn cmd_train(config_path: &Path, overrides: &Overrides) -> Result<()> {
    let (cfg, out) = prepare(config_path, overrides)?;
    let (ds, _) = cfg.build_dataset(config_dir(config_path))?;
    let run = train_once(&cfg, &ds, cfg.train.seed, Some(&out))?;
    save_checkpoint(&out.join("checkpoint_final.afck"), &run.model, &run.base)?;
    write_text(&out.join("metrics.csv"), &metrics_csv(&run.report)?)?;
    write_text(
        &out.join("curves.csv"),
        &curves_csv(&format!("seed-{}", run.seed), &run.report),
    )?;
    write_json(
        &out.join("report.json"),
        &TrainArtifact {
            experiment: &cfg,
            train: &run.report,
            diagnostics: TrainDiagnostics {
                raw: &run.raw_ks,
                standardized: &run.standardized_ks,
            },
        },
    )?;
    println!("train: outputs in {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalArtifact<'a> {
    experiment: &'a ExperimentConfig,
    scorer: &'a str,
    image_auroc: f64,
    pixel_auroc: f64,
    stability: Option<StabilityReport>,
}

/// Score a dataset with a checkpoint (or the synthetic oracle) and report
/// image/pixel AUROC; an optional metrics CSV adds a windowed stability
/// summary of a prior training run.
pub fn cmd_eval(
    config_path: &Path,
    overrides: &Overrides,
    checkpoint: Option<&Path>,
    oracle: bool,
    metrics: Option<&Path>,
) -> Result<()> {
    let (cfg, out) = prepare(config_path, overrides)?;
    let (ds, spec) = cfg.build_dataset(config_dir(config_path))?;
    let (maps, scores, scorer) = if oracle {
        let spec = spec.ok_or_else(|| {
            Error::invalid_spec("eval: oracle scoring requires a synthetic dataset")
        })?;
        let maps = oracle_score_map(&spec, &ds.test)?;
        let scores = image_score(&maps);
        (maps, scores, "oracle")
    } else {
        let path = checkpoint.ok_or_else(|| {
            Error::invalid_spec("eval: provide --checkpoint or --oracle")
        })?;
        let (model, base) = load_checkpoint(path)?;
        let (z, _) = model.forward(&ds.test)?;
        let scored = score_map_learned(&z, &base)?;
        (scored.anomaly_map, scored.image_scores, "checkpoint")
    };
    let labels: Vec<bool> = ds.test_image_labels.iter().map(|&l| l == 1).collect();
    let image_auroc = auroc(&scores, &labels)?;
    let pixel = pixel_auroc(&maps, &ds.test_pixel_masks)?;

    let mut csv = String::from("sample_id,label,image_score\n");
    for (i, (&label, score)) in ds.test_image_labels.iter().zip(&scores).enumerate() {
        csv.push_str(&format!("{i},{label},{score}\n"));
    }
    write_text(&out.join("scores.csv"), &csv)?;
    save_tensor(out.join("anomaly_maps.afts"), &maps)?;

    let stability_report = match metrics {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            let rows = parse_metrics_csv(&text, "auroc_pixel")?;
            Some(stability(&rows, cfg.eval_window())?)
        }
        None => None,
    };
    write_json(
        &out.join("eval_report.json"),
        &EvalArtifact {
            experiment: &cfg,
            scorer,
            image_auroc,
            pixel_auroc: pixel,
            stability: stability_report,
        },
    )?;
    println!("eval: image auroc {image_auroc}, pixel auroc {pixel}, outputs in {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct DiagnoseArtifact<'a> {
    experiment: &'a ExperimentConfig,
    raw: KsReport,
    standardized: KsReport,
    mean_square: f64,
    ks_critical_5pct: f64,
}

/// Channel-level normality diagnostics of a checkpoint on the train split:
/// KS against N(0, 1) raw and standardized by the learned base, mirroring
/// the with/without comparison the alternating scheme is meant to win.
pub fn cmd_diagnose(config_path: &Path, overrides: &Overrides, checkpoint: &Path) -> Result<()> {
    let (cfg, out) = prepare(config_path, overrides)?;
    let (ds, _) = cfg.build_dataset(config_dir(config_path))?;
    let (model, base) = load_checkpoint(checkpoint)?;
    let (z, _) = model.forward(&ds.train)?;
    let raw = channel_ks_report(&z, None)?;
    let standardized = channel_ks_report(&z, Some(&base))?;
    let mean_square = mean_square_statistic(&z)?;
    let critical = ks_critical_5pct(raw.n_samples);

    let mut csv = String::from("channel,raw_ks,standardized_ks\n");
    for (c, (r, s)) in raw
        .per_channel_ks
        .iter()
        .zip(&standardized.per_channel_ks)
        .enumerate()
    {
        csv.push_str(&format!("{c},{r},{s}\n"));
    }
    write_text(&out.join("diagnose.csv"), &csv)?;
    write_json(
        &out.join("diagnose.json"),
        &DiagnoseArtifact {
            experiment: &cfg,
            raw,
            standardized,
            mean_square,
            ks_critical_5pct: critical,
        },
    )?;
    println!("diagnose: outputs in {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    depth: usize,
    seed: u64,
    final_train_nll: f64,
    /// Raw per-channel mean KS of final train latents against N(0, 1).
    ks_mean: f64,
    mean_square: f64,
    /// Final-epoch pixel AUROC on the test split.
    pixel_auroc: f64,
}

#[derive(Serialize)]
struct SweepArtifact<'a> {
    experiment: &'a ExperimentConfig,
    depths: &'a [usize],
    rows: Vec<SweepRow>,
}

/// Train one model per (depth, seed) on the same data and summarize how
/// loss, normality, and detection move with depth.
pub fn cmd_sweep_depth(config_path: &Path, overrides: &Overrides, depths: &[usize]) -> Result<()> {
    if depths.is_empty() || depths.iter().any(|&d| d == 0) {
        return Err(Error::invalid_spec("sweep-depth: depths must be >= 1"));
    }
    let (cfg, out) = prepare(config_path, overrides)?;
    let (ds, _) = cfg.build_dataset(config_dir(config_path))?;
    let jobs: Vec<(usize, u64)> = depths
        .iter()
        .flat_map(|&d| cfg.seeds.iter().map(move |&s| (d, s)))
        .collect();
    let threads = threads_from_env()?;
    let rows = run_jobs(jobs.len(), threads, |i| {
        let (depth, seed) = jobs[i];
        let mut job_cfg = cfg.clone();
        job_cfg.flow.depth = depth;
        let run = train_once(&job_cfg, &ds, seed, None)?;
        let (z, _) = run.model.forward(&ds.train)?;
        let raw = channel_ks_report(&z, None)?;
        let mean_square = mean_square_statistic(&z)?;
        let pixel = metric_column(&run.report, "auroc_pixel")?;
        let last = run.report.epochs.last().expect("validated epochs >= 1");
        Ok(SweepRow {
            depth,
            seed,
            final_train_nll: last.loss,
            ks_mean: raw.mean,
            mean_square,
            pixel_auroc: pixel.last().expect("validated epochs >= 1").1,
        })
    })?;

    let mut csv = String::from("depth,seed,final_train_nll,ks_mean,mean_square,pixel_auroc\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.depth, r.seed, r.final_train_nll, r.ks_mean, r.mean_square, r.pixel_auroc
        ));
    }
    write_text(&out.join("sweep.csv"), &csv)?;
    write_json(
        &out.join("sweep.json"),
        &SweepArtifact {
            experiment: &cfg,
            depths,
            rows,
        },
    )?;
    println!("sweep-depth: outputs in {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct VariantSeedRow {
    seed: u64,
    auroc_mean: f64,
    auroc_std: f64,
    auroc_best: f64,
    /// Windowed mean/std of per-epoch mean KS standardized by the model's
    /// own base (raw for the frozen baseline, where they coincide).
    ks_mean: f64,
    ks_std: f64,
}

#[derive(Serialize)]
struct CompareArtifact<'a> {
    experiment: &'a ExperimentConfig,
    window: (usize, usize),
    variants: BTreeMap<&'static str, Vec<VariantSeedRow>>,
}

const COMPARE_VARIANTS: [&str; 2] = ["baseline", "altub"];

/// For each seed, train a frozen-base baseline and an alternating-schedule
/// variant on identical data; report windowed pixel-AUROC stability and KS
/// per variant and seed.
pub fn cmd_compare(config_path: &Path, overrides: &Overrides) -> Result<()> {
    let (cfg, out) = prepare(config_path, overrides)?;
    let (ds, _) = cfg.build_dataset(config_dir(config_path))?;
    let n_seeds = cfg.seeds.len();
    let threads = threads_from_env()?;
    let window = cfg.eval_window();
    let rows = run_jobs(COMPARE_VARIANTS.len() * n_seeds, threads, |i| {
        let variant = COMPARE_VARIANTS[i / n_seeds];
        let seed = cfg.seeds[i % n_seeds];
        let mut job_cfg = cfg.clone();
        job_cfg.train.altub_enabled = variant == "altub";
        job_cfg.train.stereotype_mode = false;
        let run = train_once(&job_cfg, &ds, seed, None)?;
        let pixel = metric_column(&run.report, "auroc_pixel")?;
        let stab = stability(&pixel, window)?;
        let ks = metric_column(&run.report, "ks_mean")?;
        let (ks_mean, ks_std) = windowed_mean_std(&ks, window)?;
        Ok(VariantSeedRow {
            seed,
            auroc_mean: stab.mean_auroc,
            auroc_std: stab.std_auroc,
            auroc_best: stab.best_auroc,
            ks_mean,
            ks_std,
        })
    })?;

    let mut variants: BTreeMap<&'static str, Vec<VariantSeedRow>> = BTreeMap::new();
    let mut csv = String::from("variant,seed,auroc_mean,auroc_std,auroc_best,ks_mean,ks_std\n");
    for (i, row) in rows.into_iter().enumerate() {
        let variant = COMPARE_VARIANTS[i / n_seeds];
        csv.push_str(&format!(
            "{variant},{},{},{},{},{},{}\n",
            row.seed, row.auroc_mean, row.auroc_std, row.auroc_best, row.ks_mean, row.ks_std
        ));
        variants.entry(variant).or_default().push(row);
    }
    write_text(&out.join("compare.csv"), &csv)?;
    write_json(
        &out.join("compare.json"),
        &CompareArtifact {
            experiment: &cfg,
            window,
            variants,
        },
    )?;
    println!("compare: outputs in {}", out.display());
    Ok(())
}
