//! One training run plus the report plumbing shared by every command.

use std::path::Path;

use altflow::base::BaseDistribution;
use altflow::data::Dataset;
use altflow::diagnostics::{channel_ks_report, KsPool, KsReport};
use altflow::error::{Error, Result};
use altflow::evaluation::{auroc, pixel_auroc};
use altflow::flow::{save_checkpoint, FlowModel};
use altflow::numerics::Rng;
use altflow::scoring::score_map_learned;
use altflow::trainer::{fit, TrainReport};

use crate::config::ExperimentConfig;

const STREAM_MODEL: u64 = 0x6D_6F_64; // model-init stream tag

pub struct TrainedRun {
    pub seed: u64,
    pub report: TrainReport,
    pub model: FlowModel,
    pub base: BaseDistribution,
    /// Pooled KS of raw latents against N(0, 1), at the diagnostics cadence.
    pub raw_ks: Option<KsReport>,
    /// Same snapshots standardized by the model's own base.
    pub standardized_ks: Option<KsReport>,
}

/// Train one model on the dataset with the experiment's schedule, recording
/// per-epoch loss, pixel/image AUROC on the test split, and the mean KS of
/// train latents standardized by the live base. `seed` overrides the config
/// seed so multi-seed commands can share one config.
pub fn train_once(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainedRun> {
    let s = ds.train.shape();
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed;
    let init_seed = Rng::new(seed).derive(STREAM_MODEL).next_u64();
    let mut model = FlowModel::seeded(cfg.flow_config(s.c), init_seed)?;
    let mut base = BaseDistribution::standard(s.c, s.h, s.w)?;
    let labels: Vec<bool> = ds.test_image_labels.iter().map(|&l| l == 1).collect();

    let mut raw_pool = KsPool::new();
    let mut std_pool = KsPool::new();
    let cadence = cfg.diagnostics.cadence_epochs;
    let ckpt_cadence = cfg.checkpoints.cadence_epochs;

    let report = fit(&mut model, &mut base, &ds.train, &train_cfg, |view| {
        let (z_test, _) = view.model.forward(&ds.test)?;
        let scored = score_map_learned(&z_test, view.base)?;
        let pixel = pixel_auroc(&scored.anomaly_map, &ds.test_pixel_masks)?;
        let image = auroc(&scored.image_scores, &labels)?;
        let (z_train, _) = view.model.forward(&ds.train)?;
        let standardized = channel_ks_report(&z_train, Some(view.base))?;
        if view.epoch % cadence == 0 {
            raw_pool.add_report(&channel_ks_report(&z_train, None)?)?;
            std_pool.add_report(&standardized)?;
        }
        if let Some(dir) = checkpoint_dir {
            if ckpt_cadence > 0 && view.epoch % ckpt_cadence == 0 {
                let path = dir.join(format!("checkpoint_epoch_{:04}.afck", view.epoch));
                save_checkpoint(&path, view.model, view.base)?;
            }
        }
        Ok(vec![
            ("auroc_pixel".to_string(), pixel),
            ("auroc_image".to_string(), image),
            ("ks_mean".to_string(), standardized.mean),
        ])
    })?;

    Ok(TrainedRun {
        seed,
        report,
        model,
        base,
        raw_ks: raw_pool.report().ok(),
        standardized_ks: std_pool.report().ok(),
    })
}

pub const METRICS_HEADER: &str = "epoch,loss,auroc_pixel,auroc_image,ks_mean";

fn row_metric(metrics: &[(String, f64)], name: &str) -> Result<f64> {
    metrics
        .iter()
        .find(|(n, _)| n == name)
        .map(|&(_, v)| v)
        .ok_or_else(|| Error::format("metrics", format!("missing column {name}")))
}

/// Wide per-epoch table, one row per epoch.
pub fn metrics_csv(report: &TrainReport) -> Result<String> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for row in &report.epochs {
        let pixel = row_metric(&row.metrics, "auroc_pixel")?;
        let image = row_metric(&row.metrics, "auroc_image")?;
        let ks = row_metric(&row.metrics, "ks_mean")?;
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.epoch, row.loss, pixel, image, ks
        ));
    }
    Ok(out)
}

/// Plot-ready long-format table: run, epoch, metric, value.
pub fn curves_csv(run_label: &str, report: &TrainReport) -> String {
    let mut out = String::from("run,epoch,metric,value\n");
    for row in &report.epochs {
        out.push_str(&format!("{run_label},{},loss,{}\n", row.epoch, row.loss));
        for (name, value) in &row.metrics {
            out.push_str(&format!("{run_label},{},{name},{value}\n", row.epoch));
        }
    }
    out
}

/// Pull one named per-epoch curve out of a report.
pub fn metric_column(report: &TrainReport, name: &str) -> Result<Vec<(usize, f64)>> {
    report
        .epochs
        .iter()
        .map(|row| Ok((row.epoch, row_metric(&row.metrics, name)?)))
        .collect()
}

/// Parse one column of a metrics CSV back into a per-epoch curve.
pub fn parse_metrics_csv(text: &str, column: &str) -> Result<Vec<(usize, f64)>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format("metrics csv", "empty file"))?;
    let names: Vec<&str> = header.split(',').collect();
    let epoch_idx = names
        .iter()
        .position(|&n| n == "epoch")
        .ok_or_else(|| Error::format("metrics csv", "no epoch column"))?;
    let col_idx = names
        .iter()
        .position(|&n| n == column)
        .ok_or_else(|| Error::format("metrics csv", format!("no {column} column")))?;
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != names.len() {
            return Err(Error::format(
                "metrics csv",
                format!("row {i} has {} fields, header has {}", fields.len(), names.len()),
            ));
        }
        let epoch: usize = fields[epoch_idx]
            .parse()
            .map_err(|_| Error::format("metrics csv", format!("row {i}: bad epoch")))?;
        let value: f64 = fields[col_idx]
            .parse()
            .map_err(|_| Error::format("metrics csv", format!("row {i}: bad {column}")))?;
        out.push((epoch, value));
    }
    Ok(out)
}

/// Mean and unbiased std of a curve restricted to an inclusive epoch window.
pub fn windowed_mean_std(rows: &[(usize, f64)], window: (usize, usize)) -> Result<(f64, f64)> {
    let vals: Vec<f64> = rows
        .iter()
        .filter(|&&(e, _)| e >= window.0 && e <= window.1)
        .map(|&(_, v)| v)
        .collect();
    if vals.is_empty() {
        return Err(Error::EmptyWindow {
            start: window.0,
            end: window.1,
        });
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let std = if vals.len() < 2 {
        0.0
    } else {
        (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok((mean, std))
}
