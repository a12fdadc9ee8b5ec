//! Longitudinal multi-indicator panels: ingestion from long-format text,
//! train/test splitting, per-indicator failure thresholds and labels, and
//! train-anchored normalization.
//!
//! A panel is a (unit, period, indicator) tensor with an observation mask.
//! Periods are the rows of `time_index` (strictly increasing integers);
//! lags and horizons count rows, which for the usual annual panel means
//! calendar steps of one.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{mean, quantile_type7, sample_std};

/// Immutable panel of indicator observations.
#[derive(Debug, Clone)]
pub struct PanelDataset {
    units: Vec<String>,
    time_index: Vec<i64>,
    indicator_names: Vec<String>,
    values: Array3<f64>,
    mask: Array3<bool>,
}

impl PanelDataset {
    /// Build a panel from parts, validating shape and invariants.
    pub fn new(
        units: Vec<String>,
        time_index: Vec<i64>,
        indicator_names: Vec<String>,
        values: Array3<f64>,
        mask: Array3<bool>,
    ) -> Result<Self> {
        let shape = (units.len(), time_index.len(), indicator_names.len());
        if values.dim() != shape || mask.dim() != shape {
            return Err(Error::DimensionMismatch(format!(
                "expected value/mask tensors of shape {:?}, got {:?} and {:?}",
                shape,
                values.dim(),
                mask.dim()
            )));
        }
        if indicator_names.is_empty() {
            return Err(Error::InvalidArgument("panel needs at least one indicator".into()));
        }
        if !time_index.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument(
                "time index must be strictly increasing".into(),
            ));
        }
        for (name, count) in count_names(&indicator_names) {
            if count > 1 {
                return Err(Error::indicator(name, "duplicate indicator name"));
            }
        }
        for (name, count) in count_names(&units) {
            if count > 1 {
                return Err(Error::InvalidArgument(format!("duplicate unit name '{name}'")));
            }
        }
        for ((idx, &observed), &v) in mask.indexed_iter().zip(values.iter()) {
            if observed && !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "observed cell (unit={}, period={}, indicator={}) is {v}",
                    units[idx.0], time_index[idx.1], indicator_names[idx.2]
                )));
            }
        }
        Ok(Self {
            units,
            time_index,
            indicator_names,
            values,
            mask,
        })
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn n_periods(&self) -> usize {
        self.time_index.len()
    }

    pub fn n_indicators(&self) -> usize {
        self.indicator_names.len()
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn time_index(&self) -> &[i64] {
        &self.time_index
    }

    pub fn indicator_names(&self) -> &[String] {
        &self.indicator_names
    }

    pub fn unit_index(&self, unit: &str) -> Option<usize> {
        self.units.iter().position(|u| u == unit)
    }

    pub fn indicator_index(&self, name: &str) -> Option<usize> {
        self.indicator_names.iter().position(|n| n == name)
    }

    /// Position of a period value in the time index.
    pub fn period_position(&self, period: i64) -> Option<usize> {
        self.time_index.binary_search(&period).ok()
    }

    /// Observed value at (unit, time position, indicator), `None` when masked.
    pub fn value_at(&self, unit: usize, t: usize, indicator: usize) -> Option<f64> {
        if self.mask[[unit, t, indicator]] {
            Some(self.values[[unit, t, indicator]])
        } else {
            None
        }
    }

    pub fn is_observed(&self, unit: usize, t: usize, indicator: usize) -> bool {
        self.mask[[unit, t, indicator]]
    }

    /// True iff every indicator is observed for `unit` at every time position
    /// in `t_first..=t_last`.
    pub fn window_fully_observed(&self, unit: usize, t_first: usize, t_last: usize) -> bool {
        if t_last >= self.n_periods() || t_first > t_last {
            return false;
        }
        (t_first..=t_last)
            .all(|t| (0..self.n_indicators()).all(|i| self.mask[[unit, t, i]]))
    }

    /// All observed values of one indicator, unit-major then time order.
    pub fn observed_values(&self, indicator: usize) -> Vec<f64> {
        let mut out = Vec::new();
        for u in 0..self.n_units() {
            for t in 0..self.n_periods() {
                if self.mask[[u, t, indicator]] {
                    out.push(self.values[[u, t, indicator]]);
                }
            }
        }
        out
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn mask(&self) -> &Array3<bool> {
        &self.mask
    }

    /// Split into train (periods <= cutoff) and test (periods > cutoff).
    /// Threshold and normalization statistics must afterwards be computed on
    /// the train split only. The unit and indicator lists are shared.
    pub fn temporal_split(&self, cutoff: i64) -> Result<(PanelDataset, PanelDataset)> {
        let first = *self.time_index.first().expect("validated nonempty");
        let last = *self.time_index.last().expect("validated nonempty");
        if cutoff < first || cutoff >= last {
            return Err(Error::InvalidArgument(format!(
                "cutoff {cutoff} must lie strictly inside the period range [{first}, {last}]"
            )));
        }
        let split = self.time_index.partition_point(|&p| p <= cutoff);
        let train = self.slice_periods(0, split)?;
        let test = self.slice_periods(split, self.n_periods())?;
        Ok((train, test))
    }

    fn slice_periods(&self, from: usize, to: usize) -> Result<PanelDataset> {
        PanelDataset::new(
            self.units.clone(),
            self.time_index[from..to].to_vec(),
            self.indicator_names.clone(),
            self.values
                .slice(ndarray::s![.., from..to, ..])
                .to_owned(),
            self.mask.slice(ndarray::s![.., from..to, ..]).to_owned(),
        )
    }

    /// Per-indicator failure thresholds at the given training quantile
    /// (type-7 interpolation), pooled across units and periods.
    pub fn compute_thresholds(&self, quantile: f64) -> Result<Vec<IndicatorSpec>> {
        if !(quantile > 0.0 && quantile < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "threshold quantile must lie in (0,1), got {quantile}"
            )));
        }
        let mut specs = Vec::with_capacity(self.n_indicators());
        for (i, name) in self.indicator_names.iter().enumerate() {
            let mut vals = self.observed_values(i);
            if vals.len() < 5 {
                return Err(Error::indicator(
                    name,
                    format!("needs at least 5 observed training values, found {}", vals.len()),
                ));
            }
            vals.sort_by(|a, b| a.partial_cmp(b).expect("finite by invariant"));
            specs.push(IndicatorSpec {
                name: name.clone(),
                threshold: quantile_type7(&vals, quantile),
                direction: FailureDirection::Below,
            });
        }
        Ok(specs)
    }

    /// Failure labels: a cell is a failure iff it is observed and its value
    /// is at or below the indicator threshold (closed boundary).
    pub fn label_failures(&self, specs: &[IndicatorSpec]) -> Result<FailureLabels> {
        let by_name: BTreeMap<&str, &IndicatorSpec> =
            specs.iter().map(|s| (s.name.as_str(), s)).collect();
        for spec in specs {
            if self.indicator_index(&spec.name).is_none() {
                return Err(Error::indicator(&spec.name, "spec names an unknown indicator"));
            }
        }
        let mut thresholds = Vec::with_capacity(self.n_indicators());
        for name in &self.indicator_names {
            match by_name.get(name.as_str()) {
                Some(spec) => thresholds.push(spec.threshold),
                None => {
                    return Err(Error::indicator(name, "no threshold spec for indicator"));
                }
            }
        }
        let mut failed = Array3::from_elem(self.values.dim(), false);
        for ((idx, f), &observed) in failed.indexed_iter_mut().zip(self.mask.iter()) {
            if observed {
                *f = self.values[idx] <= thresholds[idx.2];
            }
        }
        Ok(FailureLabels {
            failed,
            observed: self.mask.clone(),
        })
    }

    /// Standardize per indicator using statistics from `stats_from`
    /// (normally the train split). Masked cells are zeroed, never read.
    pub fn normalize(&self, stats_from: &PanelDataset) -> Result<(PanelDataset, NormStats)> {
        let stats = NormStats::from_panel(stats_from)?;
        let normalized = stats.apply(self)?;
        Ok((normalized, stats))
    }
}

fn count_names(names: &[String]) -> BTreeMap<&str, usize> {
    let mut counts = BTreeMap::new();
    for n in names {
        *counts.entry(n.as_str()).or_insert(0) += 1;
    }
    counts
}

/// Failure direction; failures are values at or below the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureDirection {
    Below,
}

/// Per-indicator failure threshold in the indicator's native scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorSpec {
    pub name: String,
    pub threshold: f64,
    pub direction: FailureDirection,
}

/// Document form of a threshold set, serialized as structured text.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdsDoc {
    pub quantile: f64,
    pub indicators: Vec<IndicatorSpec>,
}

impl ThresholdsDoc {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Serialization(e.to_string()))
    }
}

/// Boolean failure labels, defined only at observed cells.
#[derive(Debug, Clone)]
pub struct FailureLabels {
    failed: Array3<bool>,
    observed: Array3<bool>,
}

impl FailureLabels {
    /// `Some(true)` failure, `Some(false)` healthy, `None` unobserved.
    pub fn label(&self, unit: usize, t: usize, indicator: usize) -> Option<bool> {
        if self.observed[[unit, t, indicator]] {
            Some(self.failed[[unit, t, indicator]])
        } else {
            None
        }
    }

    /// Time position of the first observed failure for (unit, indicator).
    pub fn first_failure(&self, unit: usize, indicator: usize) -> Option<usize> {
        (0..self.failed.dim().1)
            .find(|&t| self.observed[[unit, t, indicator]] && self.failed[[unit, t, indicator]])
    }

    /// Count of observed failure cells for one indicator.
    pub fn failure_count(&self, indicator: usize) -> usize {
        let (nu, nt, _) = self.failed.dim();
        let mut count = 0;
        for u in 0..nu {
            for t in 0..nt {
                if self.observed[[u, t, indicator]] && self.failed[[u, t, indicator]] {
                    count += 1;
                }
            }
        }
        count
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.failed.dim()
    }
}

/// Per-indicator train means and standard deviations, retained so
/// predictions can be mapped back to native scale before threshold checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub indicator_names: Vec<String>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl NormStats {
    pub fn from_panel(panel: &PanelDataset) -> Result<Self> {
        let mut means = Vec::with_capacity(panel.n_indicators());
        let mut stds = Vec::with_capacity(panel.n_indicators());
        for (i, name) in panel.indicator_names().iter().enumerate() {
            let vals = panel.observed_values(i);
            if vals.len() < 2 {
                return Err(Error::indicator(
                    name,
                    format!("needs at least 2 observed values for normalization, found {}", vals.len()),
                ));
            }
            let sd = sample_std(&vals);
            if !(sd > 0.0) {
                return Err(Error::indicator(name, "zero variance, cannot standardize"));
            }
            means.push(mean(&vals));
            stds.push(sd);
        }
        Ok(Self {
            indicator_names: panel.indicator_names().to_vec(),
            means,
            stds,
        })
    }

    /// Standardize a panel with these statistics.
    pub fn apply(&self, panel: &PanelDataset) -> Result<PanelDataset> {
        self.check_names(panel)?;
        let mut values = panel.values.clone();
        for ((idx, v), &observed) in values.indexed_iter_mut().zip(panel.mask.iter()) {
            *v = if observed {
                (*v - self.means[idx.2]) / self.stds[idx.2]
            } else {
                0.0
            };
        }
        PanelDataset::new(
            panel.units.clone(),
            panel.time_index.clone(),
            panel.indicator_names.clone(),
            values,
            panel.mask.clone(),
        )
    }

    /// Inverse of [`NormStats::apply`].
    pub fn invert(&self, panel: &PanelDataset) -> Result<PanelDataset> {
        self.check_names(panel)?;
        let mut values = panel.values.clone();
        for ((idx, v), &observed) in values.indexed_iter_mut().zip(panel.mask.iter()) {
            *v = if observed {
                *v * self.stds[idx.2] + self.means[idx.2]
            } else {
                0.0
            };
        }
        PanelDataset::new(
            panel.units.clone(),
            panel.time_index.clone(),
            panel.indicator_names.clone(),
            values,
            panel.mask.clone(),
        )
    }

    pub fn normalize_value(&self, indicator: usize, v: f64) -> f64 {
        (v - self.means[indicator]) / self.stds[indicator]
    }

    pub fn denormalize_value(&self, indicator: usize, v: f64) -> f64 {
        v * self.stds[indicator] + self.means[indicator]
    }

    fn check_names(&self, panel: &PanelDataset) -> Result<()> {
        if self.indicator_names != panel.indicator_names() {
            return Err(Error::DimensionMismatch(
                "normalization statistics cover a different indicator set".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Serialization(e.to_string()))
    }
}

/// Read a panel from long-format delimited text with header
/// `unit,period,indicator,value`. Units, periods and indicators are sorted,
/// so ingestion is independent of record order; absent cells stay masked.
pub fn load_panel<R: io::Read>(reader: R) -> Result<PanelDataset> {
    let mut csv_reader = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    {
        let headers = csv_reader
            .headers()
            .map_err(|e| Error::Parse { row: 0, message: e.to_string() })?;
        let expected = ["unit", "period", "indicator", "value"];
        let got: Vec<&str> = headers.iter().map(|h| h.trim()).collect();
        if got != expected {
            return Err(Error::Parse {
                row: 0,
                message: format!("expected header {expected:?}, got {got:?}"),
            });
        }
    }

    struct Record {
        unit: String,
        period: i64,
        indicator: String,
        value: f64,
    }

    let mut records = Vec::new();
    for (pos, row) in csv_reader.records().enumerate() {
        let row_no = pos + 1; // 1-based data row, header excluded
        let row = row.map_err(|e| Error::Parse { row: row_no, message: e.to_string() })?;
        if row.len() != 4 {
            return Err(Error::Parse {
                row: row_no,
                message: format!("expected 4 fields, got {}", row.len()),
            });
        }
        let period: i64 = row[1].trim().parse().map_err(|_| Error::Parse {
            row: row_no,
            message: format!("period '{}' is not an integer", &row[1]),
        })?;
        let value: f64 = row[3].trim().parse().map_err(|_| Error::Parse {
            row: row_no,
            message: format!("value '{}' is not numeric", &row[3]),
        })?;
        if !value.is_finite() {
            return Err(Error::Parse {
                row: row_no,
                message: format!("value '{}' is not finite", &row[3]),
            });
        }
        records.push(Record {
            unit: row[0].trim().to_string(),
            period,
            indicator: row[2].trim().to_string(),
            value,
        });
    }
    if records.is_empty() {
        return Err(Error::InvalidArgument("input contains no data rows".into()));
    }

    let mut units: Vec<String> = records.iter().map(|r| r.unit.clone()).collect();
    units.sort();
    units.dedup();
    let mut periods: Vec<i64> = records.iter().map(|r| r.period).collect();
    periods.sort_unstable();
    periods.dedup();
    let mut indicators: Vec<String> = records.iter().map(|r| r.indicator.clone()).collect();
    indicators.sort();
    indicators.dedup();

    let unit_idx: BTreeMap<&str, usize> =
        units.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
    let period_idx: BTreeMap<i64, usize> =
        periods.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    let ind_idx: BTreeMap<&str, usize> =
        indicators.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();

    let mut values = Array3::zeros((units.len(), periods.len(), indicators.len()));
    let mut mask = Array3::from_elem((units.len(), periods.len(), indicators.len()), false);
    for r in &records {
        let u = unit_idx[r.unit.as_str()];
        let t = period_idx[&r.period];
        let i = ind_idx[r.indicator.as_str()];
        if mask[[u, t, i]] {
            return Err(Error::DuplicateRecord {
                unit: r.unit.clone(),
                period: r.period,
                indicator: r.indicator.clone(),
            });
        }
        values[[u, t, i]] = r.value;
        mask[[u, t, i]] = true;
    }

    PanelDataset::new(units, periods, indicators, values, mask)
}

pub fn load_panel_path(path: &Path) -> Result<PanelDataset> {
    let file = std::fs::File::open(path).map_err(|e| {
        Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    load_panel(io::BufReader::new(file))
}

/// Write a panel in the long-format text interface, observed cells only.
pub fn write_panel<W: io::Write>(panel: &PanelDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["unit", "period", "indicator", "value"])
        .map_err(|e| Error::Serialization(e.to_string()))?;
    for (u, unit) in panel.units().iter().enumerate() {
        for (t, period) in panel.time_index().iter().enumerate() {
            for (i, name) in panel.indicator_names().iter().enumerate() {
                if let Some(v) = panel.value_at(u, t, i) {
                    w.write_record([unit.as_str(), &period.to_string(), name.as_str(), &v.to_string()])
                        .map_err(|e| Error::Serialization(e.to_string()))?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}
