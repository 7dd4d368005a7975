//! Evaluation suite: six classification metrics, fold aggregation with
//! mean ± sample standard deviation, ablation F-ranks, and subset-filtered
//! case-study metrics.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::numkernel::Mat;
use crate::trainer::argmax_row;

/// Column order used by every metrics table.
pub const METRIC_NAMES: [&str; 6] = ["acc", "auc", "aupr", "f1", "pre", "rec"];

/// One evaluation's six metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub acc: f64,
    pub auc: f64,
    pub aupr: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

impl Metrics {
    pub fn as_array(&self) -> [f64; 6] {
        [self.acc, self.auc, self.aupr, self.f1, self.precision, self.recall]
    }

    pub fn from_array(a: [f64; 6]) -> Metrics {
        Metrics { acc: a[0], auc: a[1], aupr: a[2], f1: a[3], precision: a[4], recall: a[5] }
    }
}

/// Per-fold metrics plus their aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub folds: Vec<Metrics>,
    pub mean: Metrics,
    /// Sample (n−1) standard deviation; all zeros for a single fold.
    pub std: Metrics,
}

/// Ascending midranks: positions 1..n with exact ties sharing the mean of
/// their occupied positions.
fn rank_ascending(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite metric values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let mid = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    ranks
}

/// Rank-statistic AUC over (score, is-positive) items, tied scores as
/// midranks. Requires at least one positive and one negative.
fn auc_midrank(scores: &[f64], positive: &[bool]) -> f64 {
    let ranks = rank_ascending(scores);
    let p = positive.iter().filter(|&&b| b).count();
    let n = positive.len() - p;
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &b)| b).map(|(r, _)| r).sum();
    (rank_sum - (p * (p + 1)) as f64 / 2.0) / (p as f64 * n as f64)
}

/// Average precision: the precision-recall step integral, walking distinct
/// score thresholds from high to low so tied scores move together.
fn average_precision(scores: &[f64], positive: &[bool]) -> f64 {
    let n = scores.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite metric values"));
    let p_total = positive.iter().filter(|&&b| b).count() as f64;
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            if positive[k] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
        let recall = tp / p_total;
        ap += (recall - prev_recall) * (tp / (tp + fp));
        prev_recall = recall;
        i = j + 1;
    }
    ap
}

/// The six metrics of one prediction set. `probs` rows are per-instance
/// probability vectors over ≥2 classes.
///
/// ACC breaks argmax ties toward the lowest class id. Macro precision,
/// recall, and F1 average per-class values over the classes present in
/// `labels`, with 0/0 defined as 0. Micro AUC and AUPR flatten all N·|R|
/// one-vs-rest (score, indicator) items: AUC by the midrank statistic, AUPR
/// by the average-precision step integral.
pub fn compute_metrics(probs: &Mat, labels: &[usize]) -> Result<Metrics> {
    let (n, classes) = probs.shape();
    if n == 0 {
        return Err(Error::Domain("metrics need at least one instance".into()));
    }
    if classes < 2 {
        return Err(Error::Domain(format!(
            "micro metrics need at least 2 classes, got {classes}"
        )));
    }
    if labels.len() != n {
        return Err(Error::Domain(format!("{} labels for {n} probability rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Domain(format!("label {bad} out of range for {classes} classes")));
    }
    if !probs.is_finite() {
        return Err(Error::NonFinite { context: "metric probability inputs".into() });
    }

    // Accuracy.
    let predictions: Vec<usize> = (0..n).map(|r| argmax_row(probs.row_slice(r))).collect();
    let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    let acc = correct as f64 / n as f64;

    // Macro metrics over classes present in the gold labels.
    let present: BTreeSet<usize> = labels.iter().copied().collect();
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&pred, &gold) in predictions.iter().zip(labels) {
        if pred == gold {
            tp[gold] += 1;
        } else {
            fp[pred] += 1;
            fn_[gold] += 1;
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let mut p_sum = 0.0;
    let mut r_sum = 0.0;
    let mut f_sum = 0.0;
    for &c in &present {
        let p = ratio(tp[c], tp[c] + fp[c]);
        let r = ratio(tp[c], tp[c] + fn_[c]);
        p_sum += p;
        r_sum += r;
        if p + r > 0.0 {
            f_sum += 2.0 * p * r / (p + r);
        }
    }
    let k = present.len() as f64;
    let (precision, recall, f1) = (p_sum / k, r_sum / k, f_sum / k);

    // Micro ranking metrics on the flattened one-vs-rest binarization.
    let mut scores = Vec::with_capacity(n * classes);
    let mut positive = Vec::with_capacity(n * classes);
    for r in 0..n {
        for c in 0..classes {
            scores.push(probs.get(r, c));
            positive.push(labels[r] == c);
        }
    }
    let auc = auc_midrank(&scores, &positive);
    let aupr = average_precision(&scores, &positive);

    Ok(Metrics { acc, auc, aupr, f1, precision, recall })
}

/// Mean and sample standard deviation across folds.
pub fn aggregate_folds(folds: &[Metrics]) -> Result<MetricsReport> {
    if folds.is_empty() {
        return Err(Error::Domain("aggregate_folds needs at least one fold".into()));
    }
    let n = folds.len() as f64;
    let mut mean = [0.0; 6];
    for fold in folds {
        for (m, v) in mean.iter_mut().zip(fold.as_array()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut std = [0.0; 6];
    if folds.len() >= 2 {
        for (metric, s) in std.iter_mut().enumerate() {
            let column: Vec<f64> = folds.iter().map(|f| f.as_array()[metric]).collect();
            // A constant column has zero deviation by definition; skip the
            // arithmetic so mean round-off cannot leak in.
            if column.iter().any(|&v| v != column[0]) {
                let sq: f64 = column.iter().map(|v| (v - mean[metric]).powi(2)).sum();
                *s = (sq / (n - 1.0)).sqrt();
            }
        }
    }
    Ok(MetricsReport {
        folds: folds.to_vec(),
        mean: Metrics::from_array(mean),
        std: Metrics::from_array(std),
    })
}

/// Named rows of six metric means each — the ablation comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantMatrix {
    pub variants: Vec<String>,
    pub metrics: Vec<[f64; 6]>,
}

/// Per-variant F-rank: for each metric, rank the variants ascending (worst
/// value → rank 1, best → rank V; exact ties share the mean position), then
/// average each variant's six ranks. Higher is better for every metric.
/// Reports print these to 2 decimals.
pub fn compute_f_rank(matrix: &VariantMatrix) -> Result<Vec<f64>> {
    let v = matrix.variants.len();
    if matrix.metrics.len() != v {
        return Err(Error::Domain(format!(
            "{v} variant names but {} metric rows",
            matrix.metrics.len()
        )));
    }
    if v < 2 {
        return Err(Error::Domain("F-rank needs at least 2 variants".into()));
    }
    if matrix.metrics.iter().any(|row| row.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite { context: "variant matrix values".into() });
    }
    let mut f_rank = vec![0.0; v];
    for metric in 0..6 {
        let column: Vec<f64> = matrix.metrics.iter().map(|row| row[metric]).collect();
        for (total, rank) in f_rank.iter_mut().zip(rank_ascending(&column)) {
            *total += rank;
        }
    }
    f_rank.iter_mut().for_each(|r| *r /= 6.0);
    Ok(f_rank)
}

/// Round to 2 decimals, the precision F-rank columns are printed at.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Metrics over the pairs touching a drug subset (≥1 endpoint in `subset`).
/// Returns None — an explicit empty marker — when no pair qualifies.
pub fn subset_metrics(
    probs: &Mat,
    labels: &[usize],
    pairs: &[(usize, usize)],
    subset: &BTreeSet<usize>,
) -> Result<Option<Metrics>> {
    if subset.is_empty() {
        return Err(Error::Domain("subset_metrics needs a nonempty drug subset".into()));
    }
    let (n, classes) = probs.shape();
    if pairs.len() != n || labels.len() != n {
        return Err(Error::Domain(format!(
            "{} pairs and {} labels for {n} probability rows",
            pairs.len(),
            labels.len()
        )));
    }
    let keep: Vec<usize> = (0..n)
        .filter(|&i| subset.contains(&pairs[i].0) || subset.contains(&pairs[i].1))
        .collect();
    if keep.is_empty() {
        return Ok(None);
    }
    let mut filtered = Mat::zeros(keep.len(), classes);
    let mut filtered_labels = Vec::with_capacity(keep.len());
    for (row, &i) in keep.iter().enumerate() {
        for c in 0..classes {
            filtered.set(row, c, probs.get(i, c));
        }
        filtered_labels.push(labels[i]);
    }
    compute_metrics(&filtered, &filtered_labels).map(Some)
}

// ---- report files ----

fn metrics_line(label: &str, m: &Metrics) -> String {
    let a = m.as_array();
    format!("{label},{},{},{},{},{},{}\n", a[0], a[1], a[2], a[3], a[4], a[5])
}

/// `fold,acc,auc,aupr,f1,pre,rec` rows, one per fold, then `mean` and `std`.
pub fn write_metrics_report(report: &MetricsReport) -> String {
    let mut out = String::from("fold,acc,auc,aupr,f1,pre,rec\n");
    for (i, fold) in report.folds.iter().enumerate() {
        out.push_str(&metrics_line(&i.to_string(), fold));
    }
    out.push_str(&metrics_line("mean", &report.mean));
    out.push_str(&metrics_line("std", &report.std));
    out
}

fn parse_six(fields: &[&str], source: &str, lineno: usize) -> Result<[f64; 6]> {
    let mut out = [0.0; 6];
    for (slot, field) in out.iter_mut().zip(&fields[1..]) {
        *slot = field.trim().parse().map_err(|_| Error::Parse {
            source_name: source.to_string(),
            line: lineno,
            msg: format!("bad metric value '{field}'"),
        })?;
    }
    Ok(out)
}

/// Parse any `<label>,<6 metrics>` table under the metrics header. Labels are
/// returned verbatim (fold indices, `mean`, `std`).
pub fn parse_metrics_rows_str(text: &str, source: &str) -> Result<Vec<(String, Metrics)>> {
    let mut rows = Vec::new();
    let mut saw_header = false;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw).trim();
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        if !saw_header {
            if line != "fold,acc,auc,aupr,f1,pre,rec" {
                return Err(Error::Parse {
                    source_name: source.to_string(),
                    line: lineno,
                    msg: "expected header 'fold,acc,auc,aupr,f1,pre,rec'".into(),
                });
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Parse {
                source_name: source.to_string(),
                line: lineno,
                msg: format!("expected 7 comma-separated fields, got {}", fields.len()),
            });
        }
        let values = parse_six(&fields, source, lineno)?;
        rows.push((fields[0].trim().to_string(), Metrics::from_array(values)));
    }
    if !saw_header {
        return Err(Error::Parse {
            source_name: source.to_string(),
            line: 1,
            msg: "missing metrics header".into(),
        });
    }
    Ok(rows)
}

/// `variant,acc,auc,aupr,f1,pre,rec` rows.
pub fn write_variant_matrix(matrix: &VariantMatrix) -> String {
    let mut out = String::from("variant,acc,auc,aupr,f1,pre,rec\n");
    for (name, row) in matrix.variants.iter().zip(&matrix.metrics) {
        out.push_str(&format!(
            "{name},{},{},{},{},{},{}\n",
            row[0], row[1], row[2], row[3], row[4], row[5]
        ));
    }
    out
}

/// Parse a variant matrix written by `write_variant_matrix`.
pub fn parse_variant_matrix_str(text: &str, source: &str) -> Result<VariantMatrix> {
    let mut variants = Vec::new();
    let mut metrics = Vec::new();
    let mut saw_header = false;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw).trim();
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        if !saw_header {
            if line != "variant,acc,auc,aupr,f1,pre,rec" {
                return Err(Error::Parse {
                    source_name: source.to_string(),
                    line: lineno,
                    msg: "expected header 'variant,acc,auc,aupr,f1,pre,rec'".into(),
                });
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Parse {
                source_name: source.to_string(),
                line: lineno,
                msg: format!("expected 7 comma-separated fields, got {}", fields.len()),
            });
        }
        let name = fields[0].trim().to_string();
        if name.is_empty() {
            return Err(Error::Parse {
                source_name: source.to_string(),
                line: lineno,
                msg: "empty variant name".into(),
            });
        }
        if variants.contains(&name) {
            return Err(Error::Parse {
                source_name: source.to_string(),
                line: lineno,
                msg: format!("duplicate variant '{name}'"),
            });
        }
        metrics.push(parse_six(&fields, source, lineno)?);
        variants.push(name);
    }
    if !saw_header {
        return Err(Error::Parse {
            source_name: source.to_string(),
            line: 1,
            msg: "missing variant matrix header".into(),
        });
    }
    Ok(VariantMatrix { variants, metrics })
}

/// `variant,f_rank` rows, F-rank printed to 2 decimals.
pub fn write_f_rank_report(matrix: &VariantMatrix, f_ranks: &[f64]) -> Result<String> {
    if f_ranks.len() != matrix.variants.len() {
        return Err(Error::Domain(format!(
            "{} F-ranks for {} variants",
            f_ranks.len(),
            matrix.variants.len()
        )));
    }
    let mut out = String::from("variant,f_rank\n");
    for (name, rank) in matrix.variants.iter().zip(f_ranks) {
        out.push_str(&format!("{name},{rank:.2}\n"));
    }
    Ok(out)
}

/// The ablation table transcribed from the source comparison (9 variants ×
/// 6 metric means), used by the exact F-rank reproduction check.
pub fn reference_ablation_matrix() -> VariantMatrix {
    let rows: [(&str, [f64; 6]); 9] = [
        ("none", [0.5046, 0.9492, 0.4560, 0.2397, 0.3001, 0.2272]),
        ("biorel", [0.4613, 0.9411, 0.4096, 0.2185, 0.2557, 0.2198]),
        ("molsub", [0.5309, 0.9560, 0.4917, 0.2740, 0.3666, 0.2472]),
        ("ddigraph", [0.3637, 0.9228, 0.2927, 0.1516, 0.1719, 0.1566]),
        ("biorel+ddigraph", [0.3263, 0.9127, 0.2607, 0.1536, 0.1911, 0.1534]),
        ("molsub+ddigraph", [0.3640, 0.9219, 0.2841, 0.1680, 0.2086, 0.1638]),
        ("all", [0.4591, 0.9472, 0.4100, 0.1972, 0.2512, 0.1873]),
        ("parallel", [0.4688, 0.9474, 0.4277, 0.2468, 0.3140, 0.2369]),
        ("biorel+molsub", [0.5702, 0.9606, 0.5085, 0.3267, 0.4032, 0.3015]),
    ];
    VariantMatrix {
        variants: rows.iter().map(|(n, _)| n.to_string()).collect(),
        metrics: rows.iter().map(|(_, m)| *m).collect(),
    }
}

/// The F-rank column printed alongside that table, in the same row order.
pub const REFERENCE_F_RANKS: [f64; 9] = [6.50, 4.67, 8.00, 2.00, 1.33, 2.67, 4.33, 6.50, 9.00];
