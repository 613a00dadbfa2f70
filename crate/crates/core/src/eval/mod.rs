//! Metrics, the single-thread inference benchmark, and the ablation grid.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::data::{load_manifest, load_split_lazy, SlideView, Split};
use crate::sos::{infer, FusionMode, Pathway, SosError, SosModel, Variant};
use crate::train::{train_run, TrainConfig, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Sos(#[from] SosError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClassMetrics {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `confusion[truth][predicted]`. Zero denominators give 0.
pub fn class_metrics(confusion: &[Vec<usize>]) -> Vec<ClassMetrics> {
    let n = confusion.len();
    let total: usize = confusion.iter().flatten().sum();
    (0..n)
        .map(|i| {
            let tp = confusion[i][i];
            let fn_ = confusion[i].iter().sum::<usize>() - tp;
            let fp = (0..n).map(|r| confusion[r][i]).sum::<usize>() - tp;
            let tn = total - tp - fn_ - fp;
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                f1,
                precision,
                recall,
                specificity: ratio(tn, tn + fp),
            }
        })
        .collect()
}

pub fn total_accuracy(confusion: &[Vec<usize>]) -> f64 {
    let trace: usize = (0..confusion.len()).map(|i| confusion[i][i]).sum();
    ratio(trace, confusion.iter().flatten().sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlidePrediction {
    pub slide_id: String,
    pub label: usize,
    pub predicted: usize,
    pub pathway: Pathway,
    pub patch_reads: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub variant: Variant,
    pub total_accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: Vec<Vec<usize>>,
    pub low_res_fraction: f64,
    pub threshold: Option<f64>,
    /// Seconds for one pass over the split.
    pub inference_time: f64,
    pub speed_boost: Option<f64>,
    pub relative_size: Option<f64>,
    pub predictions: Vec<SlidePrediction>,
}

impl MetricsReport {
    /// Accuracy restricted to slides whose label is in `classes`.
    pub fn accuracy_on(&self, classes: &[usize]) -> f64 {
        let (mut hit, mut total) = (0, 0);
        for p in self.predictions.iter().filter(|p| classes.contains(&p.label)) {
            total += 1;
            hit += usize::from(p.predicted == p.label);
        }
        ratio(hit, total)
    }

    /// Everything except timing, for reproducibility checks.
    pub fn timing_free(&self) -> MetricsReport {
        MetricsReport {
            inference_time: 0.0,
            speed_boost: None,
            ..self.clone()
        }
    }
}

/// Classifies every slide once, sequentially.
pub fn evaluate<S: SlideView>(model: &SosModel, slides: &[S]) -> Result<MetricsReport, EvalError> {
    if slides.is_empty() {
        return Err(EvalError::Usage("cannot evaluate on an empty split".into()));
    }
    let n = model.config.classes;
    let mut confusion = vec![vec![0usize; n]; n];
    let mut predictions = Vec::with_capacity(slides.len());
    let start = Instant::now();
    for s in slides {
        if s.label() >= n {
            return Err(EvalError::Usage(format!("slide {} has label {}", s.slide_id(), s.label())));
        }
        let r = infer(model, s)?;
        confusion[s.label()][r.predicted] += 1;
        predictions.push(SlidePrediction {
            slide_id: s.slide_id().to_string(),
            label: s.label(),
            predicted: r.predicted,
            pathway: r.pathway,
            patch_reads: r.patch_reads,
        });
    }
    let inference_time = start.elapsed().as_secs_f64();
    let low = predictions.iter().filter(|p| p.pathway == Pathway::LowRes).count();
    Ok(MetricsReport {
        variant: model.variant(),
        total_accuracy: total_accuracy(&confusion),
        per_class: class_metrics(&confusion),
        confusion,
        low_res_fraction: ratio(low, slides.len()),
        threshold: model.threshold_value(),
        inference_time,
        speed_boost: None,
        relative_size: None,
        predictions,
    })
}

/// Parameter count of `model` over that of `reference`.
pub fn relative_size(model: &SosModel, reference: &SosModel) -> Result<f64, EvalError> {
    let base = reference.parameter_count();
    if base == 0 {
        return Err(EvalError::Usage("reference model has no parameters".into()));
    }
    Ok(model.parameter_count() as f64 / base as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub name: String,
    pub inference_time: f64,
    pub speed_boost: f64,
    pub repetitions: Vec<f64>,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

fn timed_pass<S: SlideView>(model: &SosModel, slides: &[S]) -> Result<f64, EvalError> {
    let start = Instant::now();
    for s in slides {
        infer(model, s)?;
    }
    Ok(start.elapsed().as_secs_f64())
}

/// Median wall-clock time of `repetitions` full passes per model, after one
/// discarded warm-up pass, all on the calling thread. Speed boost is
/// relative to the model at index `baseline`.
pub fn benchmark<S: SlideView>(
    models: &[(String, &SosModel)],
    slides: &[S],
    repetitions: usize,
    baseline: usize,
) -> Result<Vec<BenchRow>, EvalError> {
    if repetitions < 3 {
        return Err(EvalError::Usage(format!("need at least 3 repetitions, got {repetitions}")));
    }
    if baseline >= models.len() || slides.is_empty() {
        return Err(EvalError::Usage("benchmark needs a baseline model and slides".into()));
    }
    let mut rows = Vec::with_capacity(models.len());
    for (name, model) in models {
        timed_pass(model, slides)?;
        let reps = (0..repetitions)
            .map(|_| timed_pass(model, slides))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(BenchRow {
            name: name.clone(),
            inference_time: median(&reps),
            speed_boost: 0.0,
            repetitions: reps,
        });
    }
    let base = rows[baseline].inference_time;
    for r in &mut rows {
        r.speed_boost = base / r.inference_time;
    }
    Ok(rows)
}

/// One cell of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationCell {
    pub k: usize,
    pub fusion: FusionMode,
    pub enable_l2: bool,
    pub enable_l3: bool,
    pub seed: u64,
}

pub const GRID_COLUMNS: [&str; 5] = ["k", "fusion", "l2", "l3", "seed"];

fn parse_flag(s: &str) -> Option<bool> {
    match s {
        "1" | "true" | "on" | "yes" => Some(true),
        "0" | "false" | "off" | "no" => Some(false),
        _ => None,
    }
}

/// Tab-separated grid, one cell per line: `k fusion l2 l3 seed`.
/// `#` lines and a header line starting with `k` are skipped.
pub fn parse_grid(text: &str) -> Result<Vec<AblationCell>, EvalError> {
    let mut cells = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("k\t") {
            continue;
        }
        let bad = || EvalError::Usage(format!("grid line {}: {line:?}", lineno + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != GRID_COLUMNS.len() {
            return Err(bad());
        }
        cells.push(AblationCell {
            k: f[0].parse().map_err(|_| bad())?,
            fusion: f[1].parse().map_err(|_| bad())?,
            enable_l2: parse_flag(f[2]).ok_or_else(bad)?,
            enable_l3: parse_flag(f[3]).ok_or_else(bad)?,
            seed: f[4].parse().map_err(|_| bad())?,
        });
    }
    if cells.is_empty() {
        return Err(EvalError::Usage("grid has no cells".into()));
    }
    Ok(cells)
}

impl AblationCell {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        c.variant = Variant::Sos;
        c.k = self.k;
        c.fusion = self.fusion;
        c.loss.enable_l2 = self.enable_l2;
        c.loss.enable_l3 = self.enable_l3;
        c.seed = self.seed;
        c
    }

    fn dir_name(&self) -> String {
        format!(
            "k{}_{}_l2{}_l3{}_s{}",
            self.k,
            self.fusion,
            u8::from(self.enable_l2),
            u8::from(self.enable_l3),
            self.seed
        )
    }
}

/// Trains and evaluates every cell on the same dataset, one run directory per cell.
pub fn ablate(
    cells: &[AblationCell],
    base: &TrainConfig,
    data_root: &Path,
    out_dir: &Path,
) -> Result<Vec<(AblationCell, MetricsReport)>, EvalError> {
    let manifest = load_manifest(data_root)?;
    let test = load_split_lazy(data_root, &manifest, Split::Test)?;
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let config = cell.apply(base);
        let outcome = train_run(&config, data_root, &out_dir.join(cell.dir_name()))?;
        rows.push((*cell, evaluate(&outcome.model, &test)?));
    }
    Ok(rows)
}

fn header(echo: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in echo {
        writeln!(out, "# {k}={v}").unwrap();
    }
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

/// One row per report: TA, LP, CT, IT, SB, RS, then F1/PR/RE/SP per class.
pub fn report_tsv(rows: &[(String, &MetricsReport)], class_names: &[String], echo: &[(String, String)]) -> String {
    let mut out = header(echo);
    out.push_str("model\tTA\tLP\tCT\tIT\tSB\tRS");
    for c in class_names {
        write!(out, "\tF1_{c}\tPR_{c}\tRE_{c}\tSP_{c}").unwrap();
    }
    out.push('\n');
    for (name, r) in rows {
        write!(
            out,
            "{name}\t{:.6}\t{:.6}\t{}\t{:.6}\t{}\t{}",
            r.total_accuracy,
            r.low_res_fraction,
            fmt_opt(r.threshold),
            r.inference_time,
            fmt_opt(r.speed_boost),
            fmt_opt(r.relative_size)
        )
        .unwrap();
        for m in &r.per_class {
            write!(out, "\t{:.6}\t{:.6}\t{:.6}\t{:.6}", m.f1, m.precision, m.recall, m.specificity).unwrap();
        }
        out.push('\n');
    }
    out
}

/// The confusion matrix of one report, rows = truth.
pub fn confusion_tsv(report: &MetricsReport, class_names: &[String]) -> String {
    let mut out = format!("truth\\predicted\t{}\n", class_names.join("\t"));
    for (name, row) in class_names.iter().zip(&report.confusion) {
        let cells: Vec<String> = row.iter().map(usize::to_string).collect();
        writeln!(out, "{name}\t{}", cells.join("\t")).unwrap();
    }
    out
}

/// Per-slide decisions of one report.
pub fn decisions_tsv(report: &MetricsReport) -> String {
    let mut out = String::from("slide_id\tlabel\tpredicted\tpathway\tpatch_reads\n");
    for p in &report.predictions {
        let pathway = match p.pathway {
            Pathway::LowRes => "low",
            Pathway::HighRes => "high",
        };
        writeln!(
            out,
            "{}\t{}\t{}\t{pathway}\t{}",
            p.slide_id, p.label, p.predicted, p.patch_reads
        )
        .unwrap();
    }
    out
}

pub fn bench_tsv(rows: &[BenchRow], echo: &[(String, String)]) -> String {
    let mut out = header(echo);
    out.push_str("model\tIT\tSB\treps\n");
    for r in rows {
        let reps: Vec<String> = r.repetitions.iter().map(|t| format!("{t:.6}")).collect();
        writeln!(out, "{}\t{:.6}\t{:.6}\t{}", r.name, r.inference_time, r.speed_boost, reps.join(",")).unwrap();
    }
    out
}

/// Mirrors the component-ablation table: one row per cell.
pub fn ablation_tsv(rows: &[(AblationCell, MetricsReport)], echo: &[(String, String)]) -> String {
    let mut out = header(echo);
    out.push_str("k\tfusion\tl2\tl3\tseed\tTA\tLP\tCT\tIT\n");
    for (c, r) in rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{}\t{:.6}",
            c.k,
            c.fusion,
            u8::from(c.enable_l2),
            u8::from(c.enable_l3),
            c.seed,
            r.total_accuracy,
            r.low_res_fraction,
            fmt_opt(r.threshold),
            r.inference_time
        )
        .unwrap();
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<(), EvalError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| EvalError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, text).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}
