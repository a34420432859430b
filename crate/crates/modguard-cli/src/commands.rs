//! Command implementations behind the CLI surface.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use modguard::classifier::{precision_recall_dial, synthetic_overlap_dataset, OptimizerConfig};
use modguard::detector::AnchorConfig;
use modguard::imageops::{self, ImageTensor};
use modguard::metrics::{evaluate, DatasetManifest, MetricsReport, PredictionRecord};
use modguard::pipeline::{Pipeline, PipelineConfig, StageTimings};
use serde::{Deserialize, Serialize};

use crate::args::{BenchArgs, EvalArgs, ModelArgs, ScanArgs, TrainToyArgs, CONFIG_ENV_VAR};
use crate::backend_spec::BackendSpec;
use crate::report::{
    percentile, EffectiveConfig, ScanRecord, ScanReport, ScanSummary, REPORT_VERSION,
};

/// Reference on-device timings printed by `bench` for context. These are
/// device measurements (Samsung S20 CPU, MobileNetV3-based models), not
/// something the synthetic backends reproduce.
pub const REFERENCE_TIMINGS_NOTE: &str = "reference on-device timings (Samsung S20 CPU): \
     detector ~60 ms, classifier ~25 ms, end-to-end ~85 ms per image";

/// Resolves the effective pipeline config: CLI flag > config file (explicit
/// path or $MODGUARD_CONFIG) > built-in default.
pub fn resolve_pipeline_config(model: &ModelArgs) -> Result<PipelineConfig> {
    let path = model.config.clone().or_else(|| {
        std::env::var_os(CONFIG_ENV_VAR)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
    });
    let mut cfg = match path {
        Some(path) => {
            let text = std::fs::read_to_string(&path)
                .with_context(|| format!("reading config file {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config file {}", path.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(v) = model.person_score_min {
        cfg.person_score_min = v;
    }
    if let Some(v) = model.unsafe_part_min {
        cfg.unsafe_part_min = v;
    }
    if let Some(v) = model.nsfw_score_min {
        cfg.nsfw_score_min = v;
    }
    if let Some(v) = model.crop_margin {
        cfg.crop_margin = v;
    }
    if let Some(v) = model.many_people_cutoff {
        cfg.many_people_cutoff = v;
    }
    if let Some(v) = model.nms_iou_threshold {
        cfg.nms_iou_threshold = v;
    }
    Ok(cfg)
}

fn resolve_anchors(model: &ModelArgs) -> Result<AnchorConfig> {
    match &model.anchors {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading anchor config {}", path.display()))?;
            AnchorConfig::from_json(&text)
                .with_context(|| format!("parsing anchor config {}", path.display()))
        }
        None => Ok(AnchorConfig::default()),
    }
}

pub fn build_pipeline(model: &ModelArgs) -> Result<(Pipeline, EffectiveConfig)> {
    let cfg = resolve_pipeline_config(model)?;
    let anchors = resolve_anchors(model)?;
    let det_spec: BackendSpec = model.detector.parse()?;
    let clf_spec: BackendSpec = model.classifier.parse()?;
    if model.classifier_classes != 81 && model.classifier_classes != 2 {
        bail!("--classifier-classes must be 81 or 2");
    }
    let detector = det_spec.build_detector(&anchors, cfg.detector_input);
    let classifier = clf_spec.build_classifier(model.classifier_classes, cfg.classifier_input);
    let pipeline = Pipeline::new(detector, classifier, anchors.clone(), cfg.clone())?;
    let effective = EffectiveConfig {
        pipeline: cfg,
        anchors,
        detector: model.detector.clone(),
        classifier: model.classifier.clone(),
        classifier_classes: model.classifier_classes,
        jobs: 1,
    };
    Ok((pipeline, effective))
}

/// Collects the PNG/JPEG files under `dir`, sorted by relative path.
fn collect_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        bail!("{} is not a directory", dir.display());
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading directory {}", dir.display()))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn relative_name(dir: &Path, path: &Path) -> String {
    path.strip_prefix(dir)
        .unwrap_or(path)
        .to_string_lossy()
        .into_owned()
}

/// Runs a scan and assembles the report. The exit code is 0 on success and
/// 2 when any per-image record carries an error.
pub fn run_scan_to_report(
    dir: &Path,
    model: &ModelArgs,
    jobs: usize,
    stream: bool,
) -> Result<(ScanReport, i32)> {
    if jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    let (pipeline, mut effective) = build_pipeline(model)?;
    effective.jobs = jobs;
    let files = collect_images(dir)?;

    // Read every file up front; IO failures become in-place error records.
    let mut loaded: Vec<(String, Result<Vec<u8>, String>)> = Vec::with_capacity(files.len());
    for path in &files {
        let name = relative_name(dir, path);
        match std::fs::read(path) {
            Ok(bytes) => loaded.push((name, Ok(bytes))),
            Err(e) => loaded.push((name, Err(format!("read failed: {e}")))),
        }
    }

    let payloads: Vec<&[u8]> = loaded
        .iter()
        .filter_map(|(_, r)| r.as_ref().ok().map(|b| b.as_slice()))
        .collect();
    let mut verdicts = pipeline.scan_batch(&payloads, jobs).into_iter();

    let mut records = Vec::with_capacity(loaded.len());
    let mut summary = ScanSummary {
        scanned: loaded.len(),
        ..ScanSummary::default()
    };
    let mut latencies = Vec::new();
    for (path, payload) in loaded {
        let record = match payload {
            Err(message) => ScanRecord {
                path,
                label: None,
                confidence: None,
                route: None,
                detections: Vec::new(),
                timings_ms: None,
                error: Some(message),
            },
            Ok(_) => match verdicts.next().expect("one verdict per payload") {
                Ok(verdict) => {
                    latencies.push(verdict.timings.total_ms());
                    ScanRecord {
                        path,
                        label: Some(verdict.label),
                        confidence: Some(verdict.confidence),
                        route: Some(verdict.route),
                        detections: verdict.detections,
                        timings_ms: Some(verdict.timings),
                        error: None,
                    }
                }
                Err(e) => ScanRecord {
                    path,
                    label: None,
                    confidence: None,
                    route: None,
                    detections: Vec::new(),
                    timings_ms: None,
                    error: Some(e.to_string()),
                },
            },
        };
        match record.label {
            Some(modguard::pipeline::VerdictLabel::Safe) => summary.safe += 1,
            Some(modguard::pipeline::VerdictLabel::Nsfw) => summary.nsfw += 1,
            None => summary.errors += 1,
        }
        if stream {
            println!(
                "{}",
                serde_json::to_string(&record).expect("record serializes")
            );
        }
        records.push(record);
    }
    if !latencies.is_empty() {
        summary.mean_latency_ms = latencies.iter().sum::<f64>() / latencies.len() as f64;
        summary.p50_latency_ms = percentile(&latencies, 50.0);
        summary.p95_latency_ms = percentile(&latencies, 95.0);
    }

    let exit = if summary.errors > 0 { 2 } else { 0 };
    Ok((
        ScanReport {
            report_version: REPORT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: effective,
            records,
            summary,
        },
        exit,
    ))
}

pub fn cmd_scan(args: &ScanArgs) -> Result<i32> {
    let (report, exit) = run_scan_to_report(&args.dir, &args.model, args.jobs, args.stream)?;
    let json = report.to_json();
    match &args.out {
        Some(path) => std::fs::write(path, json.as_bytes())
            .with_context(|| format!("writing report to {}", path.display()))?,
        None => {
            if !args.stream {
                println!("{json}");
            }
        }
    }
    eprintln!(
        "scanned {} images: {} safe, {} nsfw, {} errors",
        report.summary.scanned, report.summary.safe, report.summary.nsfw, report.summary.errors
    );
    Ok(exit)
}

/// Turns a scan report into metric predictions, skipping error records.
pub fn report_predictions(report: &ScanReport) -> Vec<PredictionRecord> {
    report
        .records
        .iter()
        .filter_map(|r| {
            Some(PredictionRecord {
                path: r.path.clone(),
                label: r.label?,
                confidence: r.confidence.unwrap_or(0.0),
                route: r.route,
            })
        })
        .collect()
}

pub fn run_eval(report: &ScanReport, manifest: &DatasetManifest) -> Result<MetricsReport> {
    let predictions = report_predictions(report);
    Ok(evaluate(&predictions, manifest)?)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<i32> {
    let report = match (&args.report, &args.dir) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading report {}", path.display()))?;
            ScanReport::from_json(&text)
                .with_context(|| format!("parsing report {}", path.display()))?
        }
        (None, Some(dir)) => run_scan_to_report(dir, &args.model, args.jobs, false)?.0,
        (None, None) => bail!("eval needs --report or --dir"),
    };
    let manifest = DatasetManifest::load_jsonl(&args.manifest)
        .with_context(|| format!("loading manifest {}", args.manifest.display()))?;
    let metrics = run_eval(&report, &manifest)?;
    let json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    match &args.out {
        Some(path) => std::fs::write(path, json.as_bytes())
            .with_context(|| format!("writing metrics to {}", path.display()))?,
        None => println!("{json}"),
    }
    Ok(0)
}

/// Renders the beta-sweep table as CSV. Float formatting uses the shortest
/// round-trip representation, so a fixed seed reproduces the bytes exactly.
pub fn train_toy_csv(betas: &[f64], seed: u64, samples: usize, epochs: usize) -> Result<String> {
    if betas.is_empty() {
        bail!("--beta-nsfw needs at least one value");
    }
    let dataset = synthetic_overlap_dataset(samples, seed);
    let opt = OptimizerConfig::sgd_nesterov(epochs, seed);
    let rows = precision_recall_dial(&dataset, betas, &opt)?;
    let mut csv = String::from("beta_nsfw,precision,recall\n");
    for row in rows {
        csv.push_str(&format!(
            "{},{},{}\n",
            row.beta_nsfw, row.precision, row.recall
        ));
    }
    Ok(csv)
}

pub fn cmd_train_toy(args: &TrainToyArgs) -> Result<i32> {
    let csv = train_toy_csv(&args.beta_nsfw, args.seed, args.samples, args.epochs)?;
    match &args.out {
        Some(path) => std::fs::write(path, csv.as_bytes())
            .with_context(|| format!("writing table to {}", path.display()))?,
        None => print!("{csv}"),
    }
    Ok(0)
}

/// Mean, p95 and share-of-total for one pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub stage: String,
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchStats {
    pub images: usize,
    pub iters: usize,
    pub stages: Vec<StageStats>,
    pub end_to_end_mean_ms: f64,
    pub end_to_end_p95_ms: f64,
    /// Sum of the per-stage means; close to `end_to_end_mean_ms` because
    /// the stages cover the whole run.
    pub stage_sum_mean_ms: f64,
    pub reference_note: String,
}

/// Runs the pipeline `iters` times over `images`, timing each stage from the
/// verdict breakdown and the whole run with an outer clock.
pub fn run_bench(pipeline: &Pipeline, images: &[ImageTensor], iters: usize) -> Result<BenchStats> {
    if images.is_empty() {
        bail!("bench needs at least one image");
    }
    if iters == 0 {
        bail!("--iters must be at least 1");
    }
    let stage_names = ["preprocess", "detector", "crops", "classifier", "post"];
    let mut stage_samples: Vec<Vec<f64>> = vec![Vec::new(); stage_names.len()];
    let mut e2e_samples = Vec::with_capacity(iters * images.len());

    for _ in 0..iters {
        for img in images {
            let start = std::time::Instant::now();
            let verdict = pipeline.run(img)?;
            e2e_samples.push(start.elapsed().as_secs_f64() * 1e3);
            let t: StageTimings = verdict.timings;
            for (slot, value) in stage_samples.iter_mut().zip([
                t.preprocess_ms,
                t.detector_ms,
                t.crops_ms,
                t.classifier_ms,
                t.post_ms,
            ]) {
                slot.push(value);
            }
        }
    }

    let e2e_mean = e2e_samples.iter().sum::<f64>() / e2e_samples.len() as f64;
    let stage_means: Vec<f64> = stage_samples
        .iter()
        .map(|s| s.iter().sum::<f64>() / s.len() as f64)
        .collect();
    let stage_sum: f64 = stage_means.iter().sum();
    let stages = stage_names
        .iter()
        .zip(&stage_means)
        .zip(&stage_samples)
        .map(|((name, &mean), samples)| StageStats {
            stage: name.to_string(),
            mean_ms: mean,
            p95_ms: percentile(samples, 95.0),
            share: if stage_sum > 0.0 { mean / stage_sum } else { 0.0 },
        })
        .collect();

    Ok(BenchStats {
        images: images.len(),
        iters,
        stages,
        end_to_end_mean_ms: e2e_mean,
        end_to_end_p95_ms: percentile(&e2e_samples, 95.0),
        stage_sum_mean_ms: stage_sum,
        reference_note: REFERENCE_TIMINGS_NOTE.to_string(),
    })
}

pub fn cmd_bench(args: &BenchArgs) -> Result<i32> {
    let (pipeline, _) = build_pipeline(&args.model)?;
    let paths = if args.images.is_dir() {
        collect_images(&args.images)?
    } else {
        vec![args.images.clone()]
    };
    if paths.is_empty() {
        bail!("no images under {}", args.images.display());
    }
    let mut images: Vec<ImageTensor> = Vec::with_capacity(paths.len());
    for path in &paths {
        let bytes =
            std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        images.push(
            imageops::decode_image(&bytes)
                .with_context(|| format!("decoding {}", path.display()))?,
        );
    }

    let stats = run_bench(&pipeline, &images, args.iters)?;
    println!(
        "benchmark over {} images x {} iters",
        stats.images, stats.iters
    );
    println!("{:<12} {:>10} {:>10} {:>8}", "stage", "mean ms", "p95 ms", "share");
    for s in &stats.stages {
        println!(
            "{:<12} {:>10.3} {:>10.3} {:>7.1}%",
            s.stage,
            s.mean_ms,
            s.p95_ms,
            s.share * 100.0
        );
    }
    println!(
        "{:<12} {:>10.3} {:>10.3}",
        "end-to-end", stats.end_to_end_mean_ms, stats.end_to_end_p95_ms
    );
    println!("note: {}", stats.reference_note);
    if let Some(path) = &args.out {
        std::fs::write(path, serde_json::to_string_pretty(&stats)?.as_bytes())
            .with_context(|| format!("writing bench stats to {}", path.display()))?;
    }
    Ok(0)
}
