//! Risk-prediction metrics (AUROC, AUPRC, Brier, ECE), the shared risk-table
//! text format, landmark evaluation cells, and per-indicator model
//! comparisons.

use std::collections::{BTreeMap, BTreeSet};
use std::io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{FailureLabels, PanelDataset};

/// Paired (predicted probability, observed outcome) samples for one
/// indicator/model cell.
#[derive(Debug, Clone)]
pub struct ScoredOutcomes {
    scores: Vec<f64>,
    outcomes: Vec<bool>,
}

impl ScoredOutcomes {
    pub fn new(scores: Vec<f64>, outcomes: Vec<bool>) -> Result<Self> {
        if scores.len() != outcomes.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} scores vs {} outcomes",
                scores.len(),
                outcomes.len()
            )));
        }
        if scores.is_empty() {
            return Err(Error::InvalidArgument("no scored outcomes".into()));
        }
        for &s in &scores {
            if !s.is_finite() {
                return Err(Error::NonFinite("prediction".into()));
            }
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::InvalidArgument(format!(
                    "prediction {s} outside [0,1]"
                )));
            }
        }
        Ok(Self { scores, outcomes })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.outcomes.iter().filter(|&&o| o).count()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn outcomes(&self) -> &[bool] {
        &self.outcomes
    }
}

/// AUROC in the Mann-Whitney form: the probability that a random positive
/// outranks a random negative, ties counting one half. Computed from
/// average ranks; equals the all-pairs count exactly.
pub fn ranking_auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate(
            "AUROC undefined: needs at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite"));
    // average ranks over tie blocks (1-based ranks)
    let mut rank_sum_pos = 0.0_f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

pub fn auroc(s: &ScoredOutcomes) -> Result<f64> {
    ranking_auroc(&s.scores, &s.outcomes)
}

/// Area under the precision-recall curve by the average-precision step rule:
/// rectangles at each distinct score threshold, no interpolation.
pub fn auprc(s: &ScoredOutcomes) -> Result<f64> {
    ranking_auprc(&s.scores, &s.outcomes)
}

pub fn ranking_auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(Error::Degenerate("AUPRC undefined: no positive outcomes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite"));
    let total_pos = pos as f64;
    let mut tp = 0_usize;
    let mut fp = 0_usize;
    let mut recall_prev = 0.0_f64;
    let mut ap = 0.0_f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if labels[idx] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / total_pos;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - recall_prev) * precision;
        recall_prev = recall;
        i = j + 1;
    }
    Ok(ap)
}

/// Mean squared difference between predictions and outcomes.
pub fn brier(s: &ScoredOutcomes) -> Result<f64> {
    let n = s.len() as f64;
    Ok(s.scores
        .iter()
        .zip(&s.outcomes)
        .map(|(&p, &y)| {
            let y = if y { 1.0 } else { 0.0 };
            (p - y) * (p - y)
        })
        .sum::<f64>()
        / n)
}

/// Expected calibration error over `bins` equal-width bins on [0,1].
/// Bins are left-open right-closed, (b/K, (b+1)/K]; the lowest bin also
/// contains 0. Empty bins are skipped.
pub fn ece(s: &ScoredOutcomes, bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::InvalidArgument("ece needs at least one bin".into()));
    }
    let edges: Vec<f64> = (1..=bins).map(|b| b as f64 / bins as f64).collect();
    let mut count = vec![0_usize; bins];
    let mut pred_sum = vec![0.0_f64; bins];
    let mut event_sum = vec![0.0_f64; bins];
    for (&p, &y) in s.scores.iter().zip(&s.outcomes) {
        let b = edges.partition_point(|&e| e < p).min(bins - 1);
        count[b] += 1;
        pred_sum[b] += p;
        event_sum[b] += if y { 1.0 } else { 0.0 };
    }
    let n = s.len() as f64;
    let mut total = 0.0;
    for b in 0..bins {
        if count[b] == 0 {
            continue;
        }
        let c = count[b] as f64;
        total += (c / n) * ((pred_sum[b] / c) - (event_sum[b] / c)).abs();
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Risk tables
// ---------------------------------------------------------------------------

/// One row of the shared risk-table interface.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskRow {
    pub unit: String,
    pub origin: i64,
    pub indicator: String,
    pub risk: f64,
    pub horizon: u32,
    /// Monte Carlo draw count; absent for closed-form baseline risks.
    pub draws: Option<u64>,
}

/// Risk predictions of one model over (unit, origin, indicator) cells.
#[derive(Debug, Clone, Default)]
pub struct RiskTable {
    pub rows: Vec<RiskRow>,
}

impl RiskTable {
    pub fn key_set(&self) -> BTreeSet<(String, i64, String)> {
        self.rows
            .iter()
            .map(|r| (r.unit.clone(), r.origin, r.indicator.clone()))
            .collect()
    }

    /// Write as `unit,origin,indicator,risk,h[,M]`; the draw column appears
    /// only when at least one row carries it.
    pub fn write<W: io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let with_draws = self.rows.iter().any(|r| r.draws.is_some());
        if with_draws {
            w.write_record(["unit", "origin", "indicator", "risk", "h", "M"])
        } else {
            w.write_record(["unit", "origin", "indicator", "risk", "h"])
        }
        .map_err(|e| Error::Serialization(e.to_string()))?;
        for r in &self.rows {
            let mut record = vec![
                r.unit.clone(),
                r.origin.to_string(),
                r.indicator.clone(),
                r.risk.to_string(),
                r.horizon.to_string(),
            ];
            if with_draws {
                record.push(r.draws.map(|m| m.to_string()).unwrap_or_default());
            }
            w.write_record(&record)
                .map_err(|e| Error::Serialization(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read either the 5-column baseline form or the 6-column Monte Carlo form.
    pub fn read<R: io::Read>(reader: R) -> Result<Self> {
        let mut csv_reader = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers: Vec<String> = csv_reader
            .headers()
            .map_err(|e| Error::Parse { row: 0, message: e.to_string() })?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let base = ["unit", "origin", "indicator", "risk", "h"];
        let ok = headers.len() >= base.len()
            && headers.iter().take(5).map(String::as_str).eq(base)
            && (headers.len() == 5 || (headers.len() == 6 && headers[5] == "M"));
        if !ok {
            return Err(Error::Parse {
                row: 0,
                message: format!("unexpected risk table header {headers:?}"),
            });
        }
        let mut rows = Vec::new();
        for (pos, record) in csv_reader.records().enumerate() {
            let row_no = pos + 1;
            let record = record.map_err(|e| Error::Parse { row: row_no, message: e.to_string() })?;
            let parse_err = |what: &str| Error::Parse {
                row: row_no,
                message: format!("bad {what} field"),
            };
            let draws = if record.len() == 6 && !record[5].trim().is_empty() {
                Some(record[5].trim().parse().map_err(|_| parse_err("M"))?)
            } else {
                None
            };
            rows.push(RiskRow {
                unit: record[0].trim().to_string(),
                origin: record[1].trim().parse().map_err(|_| parse_err("origin"))?,
                indicator: record[2].trim().to_string(),
                risk: record[3].trim().parse().map_err(|_| parse_err("risk"))?,
                horizon: record[4].trim().parse().map_err(|_| parse_err("h"))?,
                draws,
            });
        }
        Ok(Self { rows })
    }
}

// ---------------------------------------------------------------------------
// Landmark evaluation cells
// ---------------------------------------------------------------------------

/// One evaluable (unit, origin, indicator) cell with its observed outcome.
///
/// A cell exists when the full state history ending at the origin is
/// observed, the indicator's h-period outcome window is fully observed, and
/// the unit has not already failed on that indicator at or before the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkCell {
    pub unit: usize,
    pub origin_pos: usize,
    pub indicator: usize,
    pub outcome: bool,
}

pub fn landmark_cells(
    data: &PanelDataset,
    labels: &FailureLabels,
    history_len: usize,
    horizon: usize,
    min_origin_period: Option<i64>,
) -> Result<Vec<LandmarkCell>> {
    if history_len == 0 || horizon == 0 {
        return Err(Error::InvalidArgument(
            "history length and horizon must be at least 1".into(),
        ));
    }
    if labels.dim() != (data.n_units(), data.n_periods(), data.n_indicators()) {
        return Err(Error::DimensionMismatch("labels do not match panel".into()));
    }
    let n_t = data.n_periods();
    let mut cells = Vec::new();
    for u in 0..data.n_units() {
        for t in (history_len - 1)..n_t {
            if let Some(min_p) = min_origin_period {
                if data.time_index()[t] < min_p {
                    continue;
                }
            }
            if t + horizon >= n_t {
                continue;
            }
            if !data.window_fully_observed(u, t + 1 - history_len, t) {
                continue;
            }
            for i in 0..data.n_indicators() {
                // at risk: no observed failure at or before the origin
                if let Some(first) = labels.first_failure(u, i) {
                    if first <= t {
                        continue;
                    }
                }
                let window = t + 1..=t + horizon;
                if !window.clone().all(|k| data.is_observed(u, k, i)) {
                    continue;
                }
                let outcome = window.clone().any(|k| labels.label(u, k, i) == Some(true));
                cells.push(LandmarkCell {
                    unit: u,
                    origin_pos: t,
                    indicator: i,
                    outcome,
                });
            }
        }
    }
    Ok(cells)
}

// ---------------------------------------------------------------------------
// Per-model evaluation and comparison
// ---------------------------------------------------------------------------

/// Metric values for one (indicator, model) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub auroc: f64,
    pub auprc: f64,
    pub brier: f64,
    pub ece: f64,
    pub n: usize,
    pub positives: usize,
}

/// Per-indicator metrics of one model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub per_indicator: BTreeMap<String, MetricSet>,
    /// Indicators that could not be scored (single-class outcomes), with reason.
    pub skipped: Vec<(String, String)>,
}

impl EvalReport {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Serialization(e.to_string()))
    }
}

/// Score one model's risk table against the landmark cells.
///
/// Every cell must be present in the table; the enforcement direction
/// guarantees identical coverage across models evaluated against the same
/// cell set. Extra table rows outside the cell set are ignored.
pub fn evaluate_model(
    model: &str,
    table: &RiskTable,
    cells: &[LandmarkCell],
    data: &PanelDataset,
    ece_bins: usize,
) -> Result<EvalReport> {
    let mut by_key: BTreeMap<(&str, i64, &str), f64> = BTreeMap::new();
    for r in &table.rows {
        by_key.insert((r.unit.as_str(), r.origin, r.indicator.as_str()), r.risk);
    }
    let mut missing = Vec::new();
    let mut per_indicator: BTreeMap<String, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for cell in cells {
        let unit = data.units()[cell.unit].as_str();
        let origin = data.time_index()[cell.origin_pos];
        let indicator = data.indicator_names()[cell.indicator].as_str();
        match by_key.get(&(unit, origin, indicator)) {
            Some(&risk) => {
                let entry = per_indicator.entry(indicator.to_string()).or_default();
                entry.0.push(risk);
                entry.1.push(cell.outcome);
            }
            None => missing.push(format!("({unit}, {origin}, {indicator})")),
        }
    }
    if !missing.is_empty() {
        let shown = missing.iter().take(10).cloned().collect::<Vec<_>>().join(", ");
        return Err(Error::CoverageMismatch(format!(
            "model '{model}' lacks {} cells: {shown}{}",
            missing.len(),
            if missing.len() > 10 { ", ..." } else { "" }
        )));
    }
    let mut report = EvalReport {
        model: model.to_string(),
        per_indicator: BTreeMap::new(),
        skipped: Vec::new(),
    };
    for (indicator, (scores, outcomes)) in per_indicator {
        let pos = outcomes.iter().filter(|&&o| o).count();
        if pos == 0 || pos == outcomes.len() {
            report.skipped.push((
                indicator,
                format!("single-class outcomes ({pos} of {})", outcomes.len()),
            ));
            continue;
        }
        let s = ScoredOutcomes::new(scores, outcomes)?;
        report.per_indicator.insert(
            indicator,
            MetricSet {
                auroc: auroc(&s)?,
                auprc: auprc(&s)?,
                brier: brier(&s)?,
                ece: ece(&s, ece_bins)?,
                n: s.len(),
                positives: pos,
            },
        );
    }
    Ok(report)
}

/// Enforce identical (unit, origin, indicator) coverage across risk tables.
pub fn check_coverage(tables: &[(&str, &RiskTable)]) -> Result<()> {
    if tables.len() < 2 {
        return Ok(());
    }
    let reference = tables[0].1.key_set();
    for (name, table) in &tables[1..] {
        let keys = table.key_set();
        if keys != reference {
            let missing: Vec<String> = reference
                .difference(&keys)
                .take(5)
                .map(|k| format!("{k:?}"))
                .collect();
            let extra: Vec<String> = keys
                .difference(&reference)
                .take(5)
                .map(|k| format!("{k:?}"))
                .collect();
            return Err(Error::CoverageMismatch(format!(
                "table '{}' vs '{}': missing [{}], extra [{}]",
                name,
                tables[0].0,
                missing.join(", "),
                extra.join(", ")
            )));
        }
    }
    Ok(())
}

/// Direction of a metric comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WinFlag {
    Win,
    Loss,
    Tie,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricComparison {
    pub metric: String,
    pub reference: f64,
    pub other: f64,
    /// reference minus other, in the metric's native orientation.
    pub diff: f64,
    pub win: WinFlag,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndicatorComparison {
    pub indicator: String,
    pub vs_cox: Vec<MetricComparison>,
    pub vs_hazard: Vec<MetricComparison>,
}

/// Figure-style comparison of the trajectory model against both baselines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<IndicatorComparison>,
}

const METRICS: [(&str, bool); 4] = [
    ("auroc", true),
    ("auprc", true),
    ("brier", false),
    ("ece", false),
];

fn metric_value(set: &MetricSet, metric: &str) -> f64 {
    match metric {
        "auroc" => set.auroc,
        "auprc" => set.auprc,
        "brier" => set.brier,
        "ece" => set.ece,
        _ => unreachable!("unknown metric"),
    }
}

fn compare_sets(reference: &MetricSet, other: &MetricSet) -> Vec<MetricComparison> {
    METRICS
        .iter()
        .map(|&(metric, higher_better)| {
            let r = metric_value(reference, metric);
            let o = metric_value(other, metric);
            let win = if r == o {
                WinFlag::Tie
            } else if (r > o) == higher_better {
                WinFlag::Win
            } else {
                WinFlag::Loss
            };
            MetricComparison {
                metric: metric.to_string(),
                reference: r,
                other: o,
                diff: r - o,
                win,
            }
        })
        .collect()
}

/// Build the per-indicator win/loss table of the trajectory model against
/// the Cox and discrete-hazard baselines. All three reports must cover the
/// same indicators.
pub fn compare_models(
    dcnar: &EvalReport,
    cox: &EvalReport,
    hazard: &EvalReport,
) -> Result<ComparisonTable> {
    let keys: BTreeSet<&String> = dcnar.per_indicator.keys().collect();
    for report in [cox, hazard] {
        let other: BTreeSet<&String> = report.per_indicator.keys().collect();
        if other != keys {
            let missing: Vec<String> =
                keys.difference(&other).map(|s| s.to_string()).collect();
            let extra: Vec<String> =
                other.difference(&keys).map(|s| s.to_string()).collect();
            return Err(Error::CoverageMismatch(format!(
                "model '{}' indicator set differs from '{}': missing [{}], extra [{}]",
                report.model,
                dcnar.model,
                missing.join(", "),
                extra.join(", ")
            )));
        }
    }
    let rows = dcnar
        .per_indicator
        .iter()
        .map(|(indicator, set)| IndicatorComparison {
            indicator: indicator.clone(),
            vs_cox: compare_sets(set, &cox.per_indicator[indicator]),
            vs_hazard: compare_sets(set, &hazard.per_indicator[indicator]),
        })
        .collect();
    Ok(ComparisonTable { rows })
}

impl ComparisonTable {
    /// Plain-text win matrix: 1 where the trajectory model is strictly
    /// better, 0 where worse, = on ties.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<24}", "indicator"));
        for &(metric, _) in &METRICS {
            out.push_str(&format!(" {:>10}", format!("{metric}>cox")));
        }
        for &(metric, _) in &METRICS {
            out.push_str(&format!(" {:>10}", format!("{metric}>haz")));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{:<24}", row.indicator));
            for cmp in row.vs_cox.iter().chain(row.vs_hazard.iter()) {
                let mark = match cmp.win {
                    WinFlag::Win => "1",
                    WinFlag::Loss => "0",
                    WinFlag::Tie => "=",
                };
                out.push_str(&format!(" {mark:>10}"));
            }
            out.push('\n');
        }
        out.push('\n');
        out.push_str(&format!(
            "{:<24} {:>8} {:>12} {:>12} {:>12}\n",
            "indicator", "metric", "dcnar", "cox", "hazard"
        ));
        for row in &self.rows {
            for (c, h) in row.vs_cox.iter().zip(&row.vs_hazard) {
                out.push_str(&format!(
                    "{:<24} {:>8} {:>12.6} {:>12.6} {:>12.6}\n",
                    row.indicator, c.metric, c.reference, c.other, h.other
                ));
            }
        }
        out
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }
}

/// Plot-ready long rows `indicator,model,metric,value` for all models.
pub fn long_table<W: io::Write>(reports: &[&EvalReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["indicator", "model", "metric", "value"])
        .map_err(|e| Error::Serialization(e.to_string()))?;
    for report in reports {
        for (indicator, set) in &report.per_indicator {
            for &(metric, _) in &METRICS {
                w.write_record([
                    indicator.as_str(),
                    report.model.as_str(),
                    metric,
                    &metric_value(set, metric).to_string(),
                ])
                .map_err(|e| Error::Serialization(e.to_string()))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Wide report rows `indicator,model,auroc,auprc,brier,ece,n,positives`.
pub fn write_report_csv<W: io::Write>(reports: &[&EvalReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["indicator", "model", "auroc", "auprc", "brier", "ece", "n", "positives"])
        .map_err(|e| Error::Serialization(e.to_string()))?;
    for report in reports {
        for (indicator, set) in &report.per_indicator {
            w.write_record([
                indicator.as_str(),
                report.model.as_str(),
                &set.auroc.to_string(),
                &set.auprc.to_string(),
                &set.brier.to_string(),
                &set.ece.to_string(),
                &set.n.to_string(),
                &set.positives.to_string(),
            ])
            .map_err(|e| Error::Serialization(e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}
