//! End-to-end commands: the work behind each command-line subcommand,
//! usable directly from code. Every command writes its effective
//! configuration next to its outputs so it can be rerun from that file.

use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::dataset::{Dataset, Normalizer};
use crate::error::{Error, Result};
use crate::eval::{compare, comparison_csv, evaluate, split, MetricReport, Protocol, SplitManifest};
use crate::ingest::{prep_source, Manifest, PrepSummary};
use crate::model::{DapNet, EmbeddingBank};
use crate::par::Parallelism;
use crate::synth::generate_benchmark;
use crate::train::{log_to_csv, train, Checkpoint, EpochLog};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.zip";
pub const LOG_FILE: &str = "train_log.csv";
pub const SPLIT_FILE: &str = "split.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const PLOT_FILE: &str = "report.svg";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Preprocess one real source directory.
pub fn prep(input: &Path, source: &str, out_dir: &Path, mode: Parallelism) -> Result<(Manifest, PrepSummary)> {
    create_dir(out_dir)?;
    prep_source(input, source, out_dir, mode)
}

/// Generate the synthetic benchmark described by `cfg.synth`.
pub fn synth(cfg: &RunConfig, out_dir: &Path, mode: Parallelism) -> Result<Manifest> {
    cfg.validate()?;
    create_dir(out_dir)?;
    let manifest = generate_benchmark(&cfg.synth, out_dir, mode)?;
    cfg.save(&out_dir.join(CONFIG_FILE))?;
    Ok(manifest)
}

/// Training and test sets of `protocol`, normalized by statistics of the
/// training set (or by `normalizer` when given).
pub struct Prepared {
    pub split: SplitManifest,
    pub train: Dataset,
    pub test: Dataset,
    pub normalizer: Normalizer,
}

pub fn prepare(
    cfg: &RunConfig,
    manifest: &Manifest,
    protocol: Protocol,
    normalizer: Option<Normalizer>,
    mode: Parallelism,
) -> Result<Prepared> {
    let split = split(manifest, protocol, cfg.data.split_seed)?;
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::Validation(format!(
            "protocol {protocol} leaves {} training and {} test samples in this manifest",
            split.train.len(),
            split.test.len()
        )));
    }
    let all = Dataset::load(manifest, mode)?;
    let mut train = all.subset(&split.train)?;
    let mut test = all.subset(&split.test)?;
    let normalizer = normalizer.unwrap_or_else(|| Normalizer::fit(cfg.data.normalization, &train));
    normalizer.apply(&mut train)?;
    normalizer.apply(&mut test)?;
    Ok(Prepared {
        split,
        train,
        test,
        normalizer,
    })
}

pub fn build_model(cfg: &RunConfig, class_names: &[String]) -> Result<DapNet> {
    let bank = match &cfg.tam.bank {
        Some(path) => Some(EmbeddingBank::load(path, Some(class_names.len()))?),
        None => None,
    };
    DapNet::new(&cfg.arch(), class_names, bank)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub report: MetricReport,
    pub checkpoint: PathBuf,
}

/// Split, train, save the checkpoint and log, then evaluate on the test
/// split. Outputs land in `out_dir`.
pub fn train_run(
    cfg: &RunConfig,
    manifest_path: &Path,
    protocol: Protocol,
    out_dir: &Path,
    mode: Parallelism,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = Manifest::read(manifest_path)?;
    create_dir(out_dir)?;
    cfg.save(&out_dir.join(CONFIG_FILE))?;
    let data = prepare(cfg, &manifest, protocol, None, mode)?;
    data.split.write(&out_dir.join(SPLIT_FILE))?;

    let mut model = build_model(cfg, data.train.labels.names())?;
    let log = train(&mut model, &data.train, &cfg.train, mode, on_epoch)?;
    write(&out_dir.join(LOG_FILE), &log_to_csv(&log)?)?;
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    Checkpoint::new(model.clone(), data.normalizer, cfg.to_toml()).save(&checkpoint)?;

    let report = evaluate(&model, &protocol.to_string(), &data.test, Some(&data.train), &cfg.eval, mode)?.report;
    report.write(&out_dir.join(REPORT_FILE))?;
    Ok(TrainOutcome {
        log,
        report,
        checkpoint,
    })
}

/// Evaluate a checkpoint on the test split of `protocol`. The split seed,
/// normalization and evaluation settings come from the checkpoint's stored
/// configuration; `adjust` may change the evaluation settings.
pub fn eval_run(
    checkpoint: &Path,
    manifest_path: &Path,
    protocol: Protocol,
    out_dir: &Path,
    plots: bool,
    mode: Parallelism,
    adjust: impl FnOnce(&mut RunConfig) -> Result<()>,
) -> Result<MetricReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut cfg = RunConfig::from_toml(&ck.config)?;
    adjust(&mut cfg)?;
    let manifest = Manifest::read(manifest_path)?;
    let data = prepare(&cfg, &manifest, protocol, Some(ck.normalizer), mode)?;
    if data.test.labels.names() != ck.model.class_names.as_slice() {
        return Err(Error::Validation(format!(
            "the checkpoint knows {} classes but the manifest has {}",
            ck.model.classes,
            data.test.labels.len()
        )));
    }
    let report = evaluate(&ck.model, &protocol.to_string(), &data.test, Some(&data.train), &cfg.eval, mode)?.report;
    create_dir(out_dir)?;
    cfg.save(&out_dir.join(CONFIG_FILE))?;
    report.write(&out_dir.join(REPORT_FILE))?;
    if plots {
        write(&out_dir.join(PLOT_FILE), &bar_chart(&report))?;
    }
    Ok(report)
}

/// Comparison table of two metric report files.
pub fn report(ours: &Path, baseline: &Path) -> Result<String> {
    comparison_csv(&compare(&MetricReport::read(ours)?, &MetricReport::read(baseline)?))
}

/// Bar chart of the report's scalar metrics and per-class accuracies.
pub fn bar_chart(report: &MetricReport) -> String {
    let mut bars: Vec<(String, f64)> = report
        .scalars()
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k.to_string(), v)))
        .collect();
    bars.extend(
        report
            .class_names
            .iter()
            .zip(&report.per_class_acc)
            .filter_map(|(n, a)| a.map(|a| (format!("acc {n}"), a))),
    );
    let top = bars.iter().map(|b| b.1).fold(1.0f64, f64::max);
    let (w, h, bw) = (60.0 + 50.0 * bars.len() as f64, 320.0, 36.0);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"10\">\n<text x=\"10\" y=\"16\">{}</text>\n",
        escape(&report.protocol)
    );
    for (i, (name, v)) in bars.iter().enumerate() {
        let x = 40.0 + 50.0 * i as f64;
        let bh = 200.0 * v / top;
        svg.push_str(&format!(
            "<rect x=\"{x}\" y=\"{:.2}\" width=\"{bw}\" height=\"{bh:.2}\" fill=\"#4a7ab5\"/>\n<text x=\"{x}\" y=\"{:.2}\">{v:.3}</text>\n<text transform=\"translate({:.2},250) rotate(45)\">{}</text>\n",
            240.0 - bh,
            236.0 - bh,
            x + 4.0,
            escape(name)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
