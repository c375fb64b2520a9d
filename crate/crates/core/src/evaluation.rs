//! Confusion matrices, accuracy/precision/recall/F1, k-fold cross-validation
//! and comparative report rendering.
//!
//! Monkeypox (label 1) is the positive class. Recall is TP / (TP + FN).

use std::fmt::{self, Write as _};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentationSpec, Dataset, Label};
use crate::error::{Error, Result};
use crate::model::ModelAssembly;
use crate::tensor::Tensor;
use crate::training::{evaluate, fit, CheckpointRecord, TrainConfig, TrainHistory};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub true_pos: usize,
    pub true_neg: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.true_pos + self.true_neg + self.false_pos + self.false_neg
    }
}

impl fmt::Display for ConfusionMatrix {
    /// A 2×2 grid with actual classes as rows and predictions as columns.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cells = [
            [self.true_neg, self.false_pos],
            [self.false_neg, self.true_pos],
        ];
        let width = cells.iter().flatten().map(|c| c.to_string().len()).max().unwrap_or(1).max(9);
        writeln!(f, "{:>17}  {:>width$}  {:>width$}", "actual \\ predicted", "Others", "Monkeypox")?;
        for (label, row) in Label::ALL.iter().zip(cells) {
            writeln!(f, "{:>17}  {:>width$}  {:>width$}", label.name(), row[0], row[1])?;
        }
        Ok(())
    }
}

/// Tallies predictions; a probability at or above `threshold` predicts Monkeypox.
pub fn confusion(probs: &Tensor, labels: &Tensor, threshold: f64) -> Result<ConfusionMatrix> {
    if probs.numel() != labels.numel() {
        return Err(Error::shape(
            "confusion",
            format!("{} probabilities for {} labels", probs.numel(), labels.numel()),
        ));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &y) in probs.data().iter().zip(labels.data()) {
        match (Label::from_value(y)?, p >= threshold) {
            (Label::Monkeypox, true) => cm.true_pos += 1,
            (Label::Monkeypox, false) => cm.false_neg += 1,
            (Label::Others, true) => cm.false_pos += 1,
            (Label::Others, false) => cm.true_neg += 1,
        }
    }
    Ok(cm)
}

/// Percentages in [0, 100]; `None` marks a metric whose denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl MetricReport {
    pub fn values(&self) -> [Option<f64>; 4] {
        [self.accuracy, self.precision, self.recall, self.f1]
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricReport> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::InvalidConfig("metrics need at least one sample".into()));
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let accuracy = ratio(cm.true_pos + cm.true_neg, n);
    let precision = ratio(cm.true_pos, cm.true_pos + cm.false_pos);
    let recall = ratio(cm.true_pos, cm.true_pos + cm.false_neg);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    let pct = |v: Option<f64>| v.map(|x| 100.0 * x);
    Ok(MetricReport {
        accuracy: pct(accuracy),
        precision: pct(precision),
        recall: pct(recall),
        f1: pct(f1),
    })
}

/// Seeded permutation of `0..n` cut into `k` contiguous folds; the first
/// `n mod k` folds hold one extra element.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("fold count must be at least 2, got {k}")));
    }
    if n < k {
        return Err(Error::InvalidConfig(format!("{n} samples cannot fill {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        folds.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(folds)
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    /// Dataset indices held out in this fold.
    pub indices: Vec<usize>,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricReport,
    pub checkpoint: Option<CheckpointRecord>,
    pub history: Option<TrainHistory>,
}

#[derive(Debug, Clone)]
pub struct CVReport {
    pub label: String,
    pub folds: Vec<FoldResult>,
    /// Per-metric arithmetic mean over folds; undefined if any fold is.
    pub average: MetricReport,
}

/// Orders fold results by index and averages each metric independently.
pub fn assemble_report(label: impl Into<String>, mut folds: Vec<FoldResult>) -> Result<CVReport> {
    if folds.is_empty() {
        return Err(Error::InvalidConfig("no fold results to average".into()));
    }
    folds.sort_by_key(|f| f.fold);
    let mean = |get: fn(&MetricReport) -> Option<f64>| -> Option<f64> {
        let vals: Option<Vec<f64>> = folds.iter().map(|f| get(&f.metrics)).collect();
        vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    let average = MetricReport {
        accuracy: mean(|m| m.accuracy),
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
    };
    Ok(CVReport {
        label: label.into(),
        folds,
        average,
    })
}

/// What a fold runner returns for its held-out fold.
pub struct FoldOutput {
    pub probs: Tensor,
    pub checkpoint: Option<CheckpointRecord>,
    pub history: Option<TrainHistory>,
}

/// Evaluates one fold with `runner(fold, train_indices, held_out_indices)`.
pub fn run_fold<R>(data: &Dataset, folds: &[Vec<usize>], fold: usize, threshold: f64, runner: &R) -> Result<FoldResult>
where
    R: Fn(usize, &[usize], &[usize]) -> Result<FoldOutput>,
{
    let held_out = folds
        .get(fold)
        .ok_or_else(|| Error::InvalidConfig(format!("fold {fold} out of range")))?;
    let train: Vec<usize> = folds
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != fold)
        .flat_map(|(_, f)| f.iter().copied())
        .collect();
    for label in Label::ALL {
        if !train.iter().any(|&i| data.samples()[i].label() == label) {
            return Err(Error::DegenerateFold {
                fold,
                missing: label.name(),
            });
        }
    }
    let out = runner(fold, &train, held_out)?;
    let (_, labels) = data.batch(held_out)?;
    let confusion = confusion(&out.probs, &labels, threshold)?;
    Ok(FoldResult {
        fold,
        indices: held_out.clone(),
        confusion,
        metrics: metrics(&confusion)?,
        checkpoint: out.checkpoint,
        history: out.history,
    })
}

/// Runs every fold, up to `threads` at a time, and assembles the report.
/// Results do not depend on the thread count.
pub fn cross_validate_with<R>(
    label: &str,
    data: &Dataset,
    folds: &[Vec<usize>],
    threshold: f64,
    threads: usize,
    runner: R,
) -> Result<CVReport>
where
    R: Fn(usize, &[usize], &[usize]) -> Result<FoldOutput> + Sync,
{
    let k = folds.len();
    let threads = threads.clamp(1, k.max(1));
    let mut results: Vec<Option<Result<FoldResult>>> = (0..k).map(|_| None).collect();
    if threads == 1 {
        for (i, slot) in results.iter_mut().enumerate() {
            *slot = Some(run_fold(data, folds, i, threshold, &runner));
        }
    } else {
        std::thread::scope(|s| {
            for (t, chunk) in results.chunks_mut(k.div_ceil(threads)).enumerate() {
                let runner = &runner;
                let first = t * k.div_ceil(threads);
                s.spawn(move || {
                    for (j, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(run_fold(data, folds, first + j, threshold, runner));
                    }
                });
            }
        });
    }
    let folds = results
        .into_iter()
        .map(|r| r.expect("every fold ran"))
        .collect::<Result<Vec<_>>>()?;
    assemble_report(label, folds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvOptions {
    pub folds: usize,
    pub threshold: f64,
    pub threads: usize,
    /// Applied to each fold's training portion only.
    pub augmentation: AugmentationSpec,
}

impl Default for CvOptions {
    fn default() -> Self {
        CvOptions {
            folds: 4,
            threshold: DEFAULT_THRESHOLD,
            threads: 1,
            augmentation: AugmentationSpec::default(),
        }
    }
}

/// k-fold cross-validation of freshly built models.
///
/// Fold `i` builds a model with seed `cfg.seed + i`, trains it on the other
/// folds with fold `i` as validation data, restores the best checkpoint and
/// evaluates it on fold `i`.
pub fn cross_validate<B>(label: &str, builder: B, data: &Dataset, cfg: &TrainConfig, opts: &CvOptions) -> Result<CVReport>
where
    B: Fn(u64) -> Result<ModelAssembly> + Sync,
{
    cfg.validate()?;
    opts.augmentation.validate()?;
    let folds = kfold_split(data.len(), opts.folds, cfg.seed)?;
    cross_validate_with(label, data, &folds, opts.threshold, opts.threads, |fold, train, held_out| {
        let seed = cfg.seed.wrapping_add(fold as u64);
        let mut model = builder(seed)?;
        let fold_cfg = TrainConfig { seed, ..cfg.clone() };
        let train = augment(&data.subset(train)?, &opts.augmentation)?;
        let val = data.subset(held_out)?;
        let outcome = fit(&mut model, &train, &val, &fold_cfg)?;
        let best = outcome.best.restore()?;
        let eval = evaluate(&best, &val, cfg.batch_size, opts.threshold)?;
        Ok(FoldOutput {
            probs: eval.probs,
            checkpoint: Some(outcome.best),
            history: Some(outcome.history),
        })
    })
}

/// Text table and CSV for a set of cross-validation reports.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedReport {
    pub table: String,
    pub csv: String,
}

pub const CSV_HEADER: &str = "model,accuracy,precision,recall,f1,fold";
const UNDEFINED: &str = "—";

/// One averaged row per model with two decimals, "—" for undefined metrics;
/// the CSV holds every fold plus the average at full precision.
pub fn render_report(reports: &[CVReport]) -> Result<RenderedReport> {
    let averaged: Vec<(String, MetricReport)> = reports.iter().map(|r| (r.label.clone(), r.average)).collect();
    let table = render_table(&averaged)?;
    let mut csv = format!("{CSV_HEADER}\n");
    for r in reports {
        let rows = r
            .folds
            .iter()
            .map(|f| (f.metrics, RowKind::Fold(f.fold)))
            .chain(std::iter::once((r.average, RowKind::Average)));
        for (m, kind) in rows {
            push_csv_row(&mut csv, &r.label, &m, kind);
        }
    }
    Ok(RenderedReport { table, csv })
}

/// Table and CSV for metrics measured once per model on a held-out test set.
pub fn render_test_report(rows: &[(String, MetricReport)]) -> Result<RenderedReport> {
    let table = render_table(rows)?;
    let mut csv = format!("{CSV_HEADER}\n");
    for (label, m) in rows {
        push_csv_row(&mut csv, label, m, RowKind::Test);
    }
    Ok(RenderedReport { table, csv })
}

fn render_table(rows: &[(String, MetricReport)]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::InvalidConfig("nothing to render".into()));
    }
    let rows: Vec<(&str, [String; 4])> = rows
        .iter()
        .map(|(label, m)| {
            let cells = m.values().map(|v| v.map_or(UNDEFINED.to_string(), |x| format!("{x:.2}")));
            (label.as_str(), cells)
        })
        .collect();
    let label_width = rows.iter().map(|(l, _)| l.chars().count()).max().unwrap_or(0).max("Model".len());
    let mut widths = [0usize; 4];
    for (_, cells) in &rows {
        for (w, c) in widths.iter_mut().zip(cells) {
            *w = (*w).max(c.chars().count());
        }
    }
    let pad = |s: &str, w: usize| format!("{}{s}", " ".repeat(w.saturating_sub(s.chars().count())));
    let mut table = String::new();
    let _ = writeln!(
        table,
        "{}{}  Accuracy  Precision  Recall  F1",
        "Model",
        " ".repeat(label_width - "Model".len())
    );
    for (label, cells) in &rows {
        let mut line = format!("{label}{}", " ".repeat(label_width - label.chars().count()));
        for (c, w) in cells.iter().zip(widths) {
            line.push_str("  ");
            line.push_str(&pad(c, w));
        }
        let _ = writeln!(table, "{line}");
    }
    Ok(table)
}

fn push_csv_row(csv: &mut String, label: &str, m: &MetricReport, kind: RowKind) {
    let field = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
    let [a, p, rc, f1] = m.values().map(field);
    let _ = writeln!(csv, "{},{a},{p},{rc},{f1},{kind}", csv_escape(label));
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// What a report CSV row measures: one fold, the fold average, or a test set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Fold(usize),
    Average,
    Test,
}

impl fmt::Display for RowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RowKind::Fold(i) => write!(f, "{i}"),
            RowKind::Average => f.write_str("avg"),
            RowKind::Test => f.write_str("test"),
        }
    }
}

/// One parsed row of a report CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub model: String,
    pub metrics: MetricReport,
    pub kind: RowKind,
}

/// Parses CSV written by [`render_report`].
pub fn parse_report_csv(text: &str) -> Result<Vec<CsvRow>> {
    let bad = |line: usize, why: &str| Error::InvalidConfig(format!("report csv line {line}: {why}"));
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(bad(1, "unexpected header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let n = i + 2;
            let (model, rest) = if let Some(quoted) = line.strip_prefix('"') {
                let mut model = String::new();
                let mut chars = quoted.char_indices().peekable();
                let mut end = None;
                while let Some((j, c)) = chars.next() {
                    if c == '"' {
                        if chars.peek().map(|(_, c)| *c) == Some('"') {
                            model.push('"');
                            chars.next();
                        } else {
                            end = Some(j + 1);
                            break;
                        }
                    } else {
                        model.push(c);
                    }
                }
                let end = end.ok_or_else(|| bad(n, "unterminated quote"))?;
                let rest = quoted[end..].strip_prefix(',').ok_or_else(|| bad(n, "missing field"))?;
                (model, rest)
            } else {
                let (m, rest) = line.split_once(',').ok_or_else(|| bad(n, "missing field"))?;
                (m.to_string(), rest)
            };
            let fields: Vec<&str> = rest.split(',').collect();
            if fields.len() != 5 {
                return Err(bad(n, "expected six fields"));
            }
            let num = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| bad(n, "bad number"))
                }
            };
            let kind = match fields[4] {
                "avg" => RowKind::Average,
                "test" => RowKind::Test,
                s => RowKind::Fold(s.parse().map_err(|_| bad(n, "bad fold"))?),
            };
            Ok(CsvRow {
                model,
                metrics: MetricReport {
                    accuracy: num(fields[0])?,
                    precision: num(fields[1])?,
                    recall: num(fields[2])?,
                    f1: num(fields[3])?,
                },
                kind,
            })
        })
        .collect()
}
