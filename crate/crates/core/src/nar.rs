//! Time-varying network autoregression constrained by a learned adjacency.
//!
//! The state at t is predicted by masked coefficient matrices applied to the
//! p previous states, X_t = sum over lags of (G+I) o Lambda_l(t) X_(t-l),
//! where each supported coefficient entry varies over time through a spline
//! basis. Given the support mask the model is linear in the basis
//! coefficients, so fitting is a deterministic ridge least-squares solve per
//! target row; entries outside the support are structural zeros. Residual
//! noise is per-indicator Gaussian, with the empirical residual rows kept
//! for bootstrap resampling and an optional full covariance factor.

use ndarray::{Array1, Array2, Array4, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discovery::AdjacencyMatrix;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, solve_spd};
use crate::panel::{NormStats, PanelDataset};
use crate::spline::SplineBasis;

/// Fitting options for the dynamic stage.
#[derive(Debug, Clone)]
pub struct NarOptions {
    /// Lag order p.
    pub lag_order: usize,
    /// Spline basis size B; 1 gives a time-constant model.
    pub basis_size: usize,
    /// Ridge weight on basis coefficients.
    pub ridge: f64,
    /// Also factor the full residual covariance for correlated noise draws.
    pub full_covariance: bool,
}

impl Default for NarOptions {
    fn default() -> Self {
        Self {
            lag_order: 1,
            basis_size: 3,
            ridge: 1e-3,
            full_covariance: false,
        }
    }
}

/// Fitted time-varying network autoregression.
#[derive(Debug, Clone)]
pub struct NarModel {
    adjacency: AdjacencyMatrix,
    lag_order: usize,
    basis: SplineBasis,
    /// Coefficients indexed (lag-1, target, source, basis); zero outside
    /// the (adjacency + identity) support.
    coeffs: Array4<f64>,
    sigmas: Vec<f64>,
    norm_stats: NormStats,
    /// Training residual rows (sample, indicator), normalized scale.
    residuals: Array2<f64>,
    /// Lower Cholesky factor of the residual covariance, when requested.
    covariance_factor: Option<Array2<f64>>,
}

/// (unit, time) pairs with the full state window t-p..=t observed.
fn valid_samples(data: &PanelDataset, lag_order: usize) -> Vec<(usize, usize)> {
    let mut rows = Vec::new();
    for u in 0..data.n_units() {
        for t in lag_order..data.n_periods() {
            if data.window_fully_observed(u, t - lag_order, t) {
                rows.push((u, t));
            }
        }
    }
    rows
}

/// Fit the masked time-varying autoregression on a normalized training
/// panel. The solve is deterministic; rows fit independently.
pub fn fit_nar(
    train: &PanelDataset,
    adjacency: &AdjacencyMatrix,
    norm_stats: &NormStats,
    options: &NarOptions,
) -> Result<NarModel> {
    let n = train.n_indicators();
    if adjacency.n() != n || adjacency.indicator_names() != train.indicator_names() {
        return Err(Error::DimensionMismatch(format!(
            "adjacency covers {} indicators, panel has {}",
            adjacency.n(),
            n
        )));
    }
    let p = options.lag_order;
    let b_size = options.basis_size;
    if p == 0 || b_size == 0 {
        return Err(Error::InvalidArgument(
            "lag order and basis size must be at least 1".into(),
        ));
    }
    if options.ridge < 0.0 {
        return Err(Error::InvalidArgument("ridge must be nonnegative".into()));
    }
    let samples = valid_samples(train, p);
    if samples.is_empty() {
        return Err(Error::Degenerate(format!(
            "no unit has {} consecutive fully observed periods",
            p + 1
        )));
    }
    let t_min = *train.time_index().first().expect("nonempty") as f64;
    let t_max = *train.time_index().last().expect("nonempty") as f64;
    let basis = SplineBasis::new(b_size, t_min, t_max)?;

    // basis values per time position, shared across rows
    let phi_at: Vec<Vec<f64>> = (0..train.n_periods())
        .map(|t| basis.eval(train.time_index()[t] as f64))
        .collect();

    let values = train.values();
    let row_results: Vec<Result<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|target| {
            let support = adjacency.support_row(target);
            let d = p * support.len() * b_size;
            let mut xtx = Array2::<f64>::zeros((d, d));
            let mut xty = Array1::<f64>::zeros(d);
            let mut feature = vec![0.0; d];
            for &(u, t) in &samples {
                let phi = &phi_at[t];
                let mut k = 0;
                for lag in 1..=p {
                    for &j in &support {
                        let x = values[[u, t - lag, j]];
                        for pb in phi.iter().take(b_size) {
                            feature[k] = x * pb;
                            k += 1;
                        }
                    }
                }
                let y = values[[u, t, target]];
                for a in 0..d {
                    let fa = feature[a];
                    if fa == 0.0 {
                        continue;
                    }
                    xty[a] += fa * y;
                    for bcol in a..d {
                        xtx[[a, bcol]] += fa * feature[bcol];
                    }
                }
            }
            for a in 0..d {
                for bcol in 0..a {
                    xtx[[a, bcol]] = xtx[[bcol, a]];
                }
                xtx[[a, a]] += options.ridge;
            }
            solve_spd(&xtx, &xty).map(|c| c.to_vec()).map_err(|_| {
                Error::Singular(format!(
                    "normal equations singular for target {target}; use a positive ridge"
                ))
            })
        })
        .collect();

    let mut coeffs = Array4::<f64>::zeros((p, n, n, b_size));
    for (target, row) in row_results.into_iter().enumerate() {
        let c = row?;
        let support = adjacency.support_row(target);
        let mut k = 0;
        for lag in 0..p {
            for &j in &support {
                for bb in 0..b_size {
                    coeffs[[lag, target, j, bb]] = c[k];
                    k += 1;
                }
            }
        }
    }

    let mut model = NarModel {
        adjacency: adjacency.clone(),
        lag_order: p,
        basis,
        coeffs,
        sigmas: vec![0.0; n],
        norm_stats: norm_stats.clone(),
        residuals: Array2::zeros((samples.len(), n)),
        covariance_factor: None,
    };

    // residuals and per-indicator noise scale
    let mut sq_sum = vec![0.0_f64; n];
    for (s, &(u, t)) in samples.iter().enumerate() {
        let history = train.values().slice(ndarray::s![u, t - p..t, ..]);
        let pred = model.predict_from_view(history, train.time_index()[t])?;
        for i in 0..n {
            let r = values[[u, t, i]] - pred[i];
            model.residuals[[s, i]] = r;
            sq_sum[i] += r * r;
        }
    }
    let n_samples = samples.len() as f64;
    for i in 0..n {
        model.sigmas[i] = (sq_sum[i] / n_samples).sqrt();
    }
    if options.full_covariance {
        model = model.with_full_covariance()?;
    }
    Ok(model)
}

impl NarModel {
    pub fn adjacency(&self) -> &AdjacencyMatrix {
        &self.adjacency
    }

    pub fn lag_order(&self) -> usize {
        self.lag_order
    }

    pub fn basis(&self) -> &SplineBasis {
        &self.basis
    }

    pub fn n_indicators(&self) -> usize {
        self.sigmas.len()
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn norm_stats(&self) -> &NormStats {
        &self.norm_stats
    }

    pub fn indicator_names(&self) -> &[String] {
        self.adjacency.indicator_names()
    }

    pub fn residual_rows(&self) -> &Array2<f64> {
        &self.residuals
    }

    pub fn covariance_factor(&self) -> Option<&Array2<f64>> {
        self.covariance_factor.as_ref()
    }

    /// Coefficient tensor (lag-1, target, source, basis).
    pub fn coefficients(&self) -> &Array4<f64> {
        &self.coeffs
    }

    /// Copy with the residual covariance factored for correlated draws.
    pub fn with_full_covariance(mut self) -> Result<Self> {
        let n = self.n_indicators();
        if self.residuals.nrows() < 2 {
            return Err(Error::Degenerate(
                "no residual rows available for covariance estimation".into(),
            ));
        }
        let rows = self.residuals.nrows() as f64;
        let mut cov = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for s in 0..self.residuals.nrows() {
                    acc += self.residuals[[s, i]] * self.residuals[[s, j]];
                }
                cov[[i, j]] = acc / rows;
            }
        }
        let factor = cholesky(&cov)
            .map_err(|_| Error::Singular("residual covariance is not positive definite".into()))?;
        self.covariance_factor = Some(factor);
        Ok(self)
    }

    /// Masked coefficient matrices at a calendar period, one per lag.
    pub fn lambda_at(&self, period: i64) -> Vec<Array2<f64>> {
        let phi = self.basis.eval(period as f64);
        let n = self.n_indicators();
        (0..self.lag_order)
            .map(|lag| {
                let mut m = Array2::<f64>::zeros((n, n));
                for i in 0..n {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for (bb, &pb) in phi.iter().enumerate() {
                            acc += self.coeffs[[lag, i, j, bb]] * pb;
                        }
                        m[[i, j]] = acc;
                    }
                }
                m
            })
            .collect()
    }

    /// Conditional-mean one-step prediction in normalized scale.
    ///
    /// `history` holds the last p states chronologically: row k is the state
    /// at t - p + k, so the final row is the most recent. The basis
    /// extrapolates as a constant outside the training range.
    pub fn predict_one_step(&self, history: &Array2<f64>, period: i64) -> Result<Array1<f64>> {
        self.predict_from_view(history.view(), period)
    }

    pub(crate) fn predict_from_view(
        &self,
        history: ArrayView2<'_, f64>,
        period: i64,
    ) -> Result<Array1<f64>> {
        let n = self.n_indicators();
        if history.nrows() != self.lag_order || history.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "history must be {} x {n}, got {} x {}",
                self.lag_order,
                history.nrows(),
                history.ncols()
            )));
        }
        let phi = self.basis.eval(period as f64);
        let mut out = Array1::<f64>::zeros(n);
        for target in 0..n {
            let mut acc = 0.0;
            for lag in 1..=self.lag_order {
                let state = history.row(self.lag_order - lag);
                for j in self.adjacency.support_row(target) {
                    let mut c = 0.0;
                    for (bb, &pb) in phi.iter().enumerate() {
                        c += self.coeffs[[lag - 1, target, j, bb]] * pb;
                    }
                    acc += c * state[j];
                }
            }
            out[target] = acc;
        }
        Ok(out)
    }

    /// One-step-ahead errors over all valid cells of a normalized panel.
    pub fn in_sample_report(&self, data: &PanelDataset) -> Result<InSampleReport> {
        let n = self.n_indicators();
        if data.n_indicators() != n || data.indicator_names() != self.indicator_names() {
            return Err(Error::DimensionMismatch(
                "panel indicators do not match the model".into(),
            ));
        }
        let samples = valid_samples(data, self.lag_order);
        if samples.is_empty() {
            return Err(Error::Degenerate("no valid prediction windows".into()));
        }
        let mut sq = vec![0.0_f64; n];
        let mut sum = vec![0.0_f64; n];
        for &(u, t) in &samples {
            let history = data.values().slice(ndarray::s![u, t - self.lag_order..t, ..]);
            let pred = self.predict_from_view(history, data.time_index()[t])?;
            for i in 0..n {
                let r = data.values()[[u, t, i]] - pred[i];
                sq[i] += r * r;
                sum[i] += r;
            }
        }
        let count = samples.len();
        let rows = (0..n)
            .map(|i| IndicatorFit {
                indicator: self.indicator_names()[i].clone(),
                mse: sq[i] / count as f64,
                residual_mean: sum[i] / count as f64,
                n: count,
            })
            .collect();
        Ok(InSampleReport { rows })
    }

    /// Serialize; residual rows are included only on request (needed to
    /// reload a model for bootstrap noise).
    pub fn to_doc(&self, include_residuals: bool) -> NarModelDoc {
        let names = self.indicator_names();
        let mut coeff_rows = Vec::new();
        for lag in 0..self.lag_order {
            for i in 0..self.n_indicators() {
                for j in self.adjacency.support_row(i) {
                    coeff_rows.push(CoeffRow {
                        lag: lag + 1,
                        target: names[i].clone(),
                        source: names[j].clone(),
                        values: (0..self.basis.size())
                            .map(|bb| self.coeffs[[lag, i, j, bb]])
                            .collect(),
                    });
                }
            }
        }
        let (t_min, t_max) = self.basis.range();
        NarModelDoc {
            lag_order: self.lag_order,
            basis_size: self.basis.size(),
            t_min,
            t_max,
            knots: self.basis.knots().to_vec(),
            indicators: names.to_vec(),
            edges: self
                .adjacency
                .edge_list()
                .into_iter()
                .map(|(s, t)| vec![names[s].clone(), names[t].clone()])
                .collect(),
            sigmas: self.sigmas.clone(),
            norm_stats: self.norm_stats.clone(),
            coefficients: coeff_rows,
            residuals: if include_residuals {
                Some(
                    self.residuals
                        .rows()
                        .into_iter()
                        .map(|r| r.to_vec())
                        .collect(),
                )
            } else {
                None
            },
        }
    }

    pub fn from_doc(doc: &NarModelDoc) -> Result<Self> {
        let n = doc.indicators.len();
        let index_of = |name: &str| -> Result<usize> {
            doc.indicators
                .iter()
                .position(|x| x == name)
                .ok_or_else(|| Error::indicator(name, "unknown indicator in model document"))
        };
        let mut edges = Array2::from_elem((n, n), false);
        for pair in &doc.edges {
            if pair.len() != 2 {
                return Err(Error::Serialization(
                    "edge entries must be [source, target]".into(),
                ));
            }
            let s = index_of(&pair[0])?;
            let t = index_of(&pair[1])?;
            edges[[t, s]] = true;
        }
        let adjacency = AdjacencyMatrix::new(edges, doc.indicators.clone())?;
        let basis = SplineBasis::new(doc.basis_size, doc.t_min, doc.t_max)?;
        if basis.knots() != doc.knots.as_slice() {
            return Err(Error::Serialization(
                "stored knot vector does not match the declared basis".into(),
            ));
        }
        let mut coeffs = Array4::<f64>::zeros((doc.lag_order, n, n, doc.basis_size));
        for row in &doc.coefficients {
            if row.lag == 0 || row.lag > doc.lag_order || row.values.len() != doc.basis_size {
                return Err(Error::Serialization(format!(
                    "bad coefficient row for target {}",
                    row.target
                )));
            }
            let i = index_of(&row.target)?;
            let j = index_of(&row.source)?;
            if i != j && !adjacency.has_edge(i, j) {
                return Err(Error::Serialization(format!(
                    "coefficient outside support: {} -> {}",
                    row.source, row.target
                )));
            }
            for (bb, &v) in row.values.iter().enumerate() {
                coeffs[[row.lag - 1, i, j, bb]] = v;
            }
        }
        let residuals = match &doc.residuals {
            Some(rows) => {
                let mut m = Array2::<f64>::zeros((rows.len(), n));
                for (s, row) in rows.iter().enumerate() {
                    if row.len() != n {
                        return Err(Error::Serialization("ragged residual rows".into()));
                    }
                    for (i, &v) in row.iter().enumerate() {
                        m[[s, i]] = v;
                    }
                }
                m
            }
            None => Array2::zeros((0, n)),
        };
        if doc.sigmas.len() != n || doc.norm_stats.indicator_names != doc.indicators {
            return Err(Error::Serialization("model document is inconsistent".into()));
        }
        Ok(NarModel {
            adjacency,
            lag_order: doc.lag_order,
            basis,
            coeffs,
            sigmas: doc.sigmas.clone(),
            norm_stats: doc.norm_stats.clone(),
            residuals,
            covariance_factor: None,
        })
    }

    /// Construct a model with explicit coefficients (tests and oracles).
    pub fn from_parts(
        adjacency: AdjacencyMatrix,
        lag_order: usize,
        basis: SplineBasis,
        coeffs: Array4<f64>,
        sigmas: Vec<f64>,
        norm_stats: NormStats,
    ) -> Result<Self> {
        let n = adjacency.n();
        if coeffs.dim() != (lag_order, n, n, basis.size()) {
            return Err(Error::DimensionMismatch(format!(
                "coefficients {:?} do not match (p={lag_order}, n={n}, B={})",
                coeffs.dim(),
                basis.size()
            )));
        }
        for lag in 0..lag_order {
            for i in 0..n {
                for j in 0..n {
                    if i != j && !adjacency.has_edge(i, j) {
                        for bb in 0..basis.size() {
                            if coeffs[[lag, i, j, bb]] != 0.0 {
                                return Err(Error::InvalidArgument(format!(
                                    "coefficient outside support at ({i},{j})"
                                )));
                            }
                        }
                    }
                }
            }
        }
        if sigmas.len() != n {
            return Err(Error::DimensionMismatch("sigma length".into()));
        }
        Ok(NarModel {
            adjacency,
            lag_order,
            basis,
            coeffs,
            sigmas,
            norm_stats,
            residuals: Array2::zeros((0, n)),
            covariance_factor: None,
        })
    }
}

/// One coefficient function: basis weights for (lag, target, source).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoeffRow {
    pub lag: usize,
    pub target: String,
    pub source: String,
    pub values: Vec<f64>,
}

/// Structured-text form of a fitted model; reloads bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NarModelDoc {
    pub lag_order: usize,
    pub basis_size: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub knots: Vec<f64>,
    pub indicators: Vec<String>,
    /// Directed edges as [source, target] name pairs.
    pub edges: Vec<Vec<String>>,
    pub sigmas: Vec<f64>,
    pub norm_stats: NormStats,
    pub coefficients: Vec<CoeffRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residuals: Option<Vec<Vec<f64>>>,
}

impl NarModelDoc {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Serialization(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorFit {
    pub indicator: String,
    pub mse: f64,
    pub residual_mean: f64,
    pub n: usize,
}

/// Per-indicator one-step error summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InSampleReport {
    pub rows: Vec<IndicatorFit>,
}

impl InSampleReport {
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["indicator", "mse", "residual_mean", "n"])
            .map_err(|e| Error::Serialization(e.to_string()))?;
        for row in &self.rows {
            w.write_record([
                row.indicator.as_str(),
                &row.mse.to_string(),
                &row.residual_mean.to_string(),
                &row.n.to_string(),
            ])
            .map_err(|e| Error::Serialization(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;
    use rand_distr::StandardNormal;

    use crate::rng::derive_rng;

    fn identity_stats(names: &[String]) -> NormStats {
        NormStats {
            indicator_names: names.to_vec(),
            means: vec![0.0; names.len()],
            stds: vec![1.0; names.len()],
        }
    }

    fn var1_panel(
        units: usize,
        periods: usize,
        a: &Array2<f64>,
        sigma: f64,
        seed: u64,
    ) -> PanelDataset {
        let n = a.nrows();
        let mut values = Array3::zeros((units, periods, n));
        for u in 0..units {
            let mut rng = derive_rng(seed, &[u as u64]);
            let mut state = Array1::<f64>::zeros(n);
            for _ in 0..50 {
                let noise: Array1<f64> = Array1::from_iter(
                    (0..n).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)),
                );
                state = a.dot(&state) + noise;
            }
            for t in 0..periods {
                let noise: Array1<f64> = Array1::from_iter(
                    (0..n).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)),
                );
                state = a.dot(&state) + noise;
                for i in 0..n {
                    values[[u, t, i]] = state[i];
                }
            }
        }
        let mask = Array3::from_elem((units, periods, n), true);
        PanelDataset::new(
            (0..units).map(|u| format!("u{u:03}")).collect(),
            (0..periods as i64).collect(),
            (0..n).map(|i| format!("x{i}")).collect(),
            values,
            mask,
        )
        .unwrap()
    }

    fn full_adjacency(names: &[String]) -> AdjacencyMatrix {
        let n = names.len();
        let mut edges = Array2::from_elem((n, n), true);
        for i in 0..n {
            edges[[i, i]] = false;
        }
        AdjacencyMatrix::new(edges, names.to_vec()).unwrap()
    }

    #[test]
    fn zero_history_predicts_zero_and_scales_linearly() {
        let names: Vec<String> = (0..2).map(|i| format!("x{i}")).collect();
        let adj = full_adjacency(&names);
        let basis = SplineBasis::new(1, 0.0, 10.0).unwrap();
        let mut coeffs = Array4::zeros((1, 2, 2, 1));
        coeffs[[0, 0, 0, 0]] = 0.5;
        coeffs[[0, 0, 1, 0]] = 0.25;
        coeffs[[0, 1, 0, 0]] = -0.3;
        coeffs[[0, 1, 1, 0]] = 0.9;
        let model = NarModel::from_parts(
            adj,
            1,
            basis,
            coeffs,
            vec![1.0, 1.0],
            identity_stats(&names),
        )
        .unwrap();
        let zero = Array2::zeros((1, 2));
        let pred = model.predict_one_step(&zero, 3).unwrap();
        assert_eq!(pred, Array1::zeros(2));

        let mut h = Array2::zeros((1, 2));
        h[[0, 0]] = 0.4;
        h[[0, 1]] = -1.2;
        let one = model.predict_one_step(&h, 3).unwrap();
        let scaled = model.predict_one_step(&(h.clone() * 3.0), 3).unwrap();
        for i in 0..2 {
            assert!((scaled[i] - 3.0 * one[i]).abs() < 1e-12);
        }
        // hand-computed 2x2 matrix-vector product
        assert!((one[0] - (0.5 * 0.4 + 0.25 * -1.2)).abs() < 1e-12);
        assert!((one[1] - (-0.3 * 0.4 + 0.9 * -1.2)).abs() < 1e-12);
    }

    #[test]
    fn history_length_mismatch_errors() {
        let names: Vec<String> = (0..2).map(|i| format!("x{i}")).collect();
        let model = NarModel::from_parts(
            full_adjacency(&names),
            2,
            SplineBasis::new(1, 0.0, 10.0).unwrap(),
            Array4::zeros((2, 2, 2, 1)),
            vec![1.0, 1.0],
            identity_stats(&names),
        )
        .unwrap();
        let short = Array2::zeros((1, 2));
        assert!(model.predict_one_step(&short, 0).is_err());
    }

    #[test]
    fn var1_recovery_constant_basis() {
        let mut a = Array2::zeros((3, 3));
        a[[0, 0]] = 0.5;
        a[[1, 1]] = 0.4;
        a[[1, 0]] = 0.3;
        a[[2, 2]] = 0.45;
        a[[2, 1]] = 0.35;
        let panel = var1_panel(100, 40, &a, 0.4, 42);
        let names = panel.indicator_names().to_vec();
        let mut edges = Array2::from_elem((3, 3), false);
        edges[[1, 0]] = true;
        edges[[2, 1]] = true;
        let adj = AdjacencyMatrix::new(edges, names.clone()).unwrap();
        let stats = NormStats::from_panel(&panel).unwrap();
        let norm = stats.apply(&panel).unwrap();
        let opts = NarOptions { lag_order: 1, basis_size: 1, ridge: 1e-6, full_covariance: false };
        let model = fit_nar(&norm, &adj, &stats, &opts).unwrap();
        let lambda = &model.lambda_at(20)[0];
        // normalized-scale coefficients relate to native ones through the
        // indicator standard deviations
        for (i, j, truth) in
            [(0usize, 0usize, 0.5), (1, 1, 0.4), (1, 0, 0.3), (2, 2, 0.45), (2, 1, 0.35)]
        {
            let rescaled = lambda[[i, j]] * stats.stds[i] / stats.stds[j];
            assert!(
                (rescaled - truth).abs() < 0.05,
                "coef ({i},{j}) {rescaled} vs {truth}"
            );
        }
        // structural zeros exact at every period
        for t in [0, 7, 19, 39, 80] {
            let l = &model.lambda_at(t)[0];
            assert_eq!(l[[0, 1]], 0.0);
            assert_eq!(l[[0, 2]], 0.0);
            assert_eq!(l[[1, 2]], 0.0);
            assert_eq!(l[[2, 0]], 0.0);
        }
    }

    #[test]
    fn empty_adjacency_reduces_to_univariate_ar_fits() {
        let mut a = Array2::zeros((2, 2));
        a[[0, 0]] = 0.6;
        a[[1, 1]] = -0.3;
        let panel = var1_panel(30, 50, &a, 0.5, 7);
        let names = panel.indicator_names().to_vec();
        let adj = AdjacencyMatrix::all_false(names.clone());
        let stats = identity_stats(&names);
        let opts = NarOptions { lag_order: 1, basis_size: 1, ridge: 0.0, full_covariance: false };
        let model = fit_nar(&panel, &adj, &stats, &opts).unwrap();
        let lambda = &model.lambda_at(0)[0];
        // univariate least-squares oracle per indicator
        let samples = valid_samples(&panel, 1);
        for i in 0..2 {
            let mut num = 0.0;
            let mut den = 0.0;
            for &(u, t) in &samples {
                let x = panel.values()[[u, t - 1, i]];
                let y = panel.values()[[u, t, i]];
                num += x * y;
                den += x * x;
            }
            let oracle = num / den;
            assert!(
                (lambda[[i, i]] - oracle).abs() < 1e-6,
                "ar coef {} vs {}",
                lambda[[i, i]],
                oracle
            );
            assert_eq!(lambda[[i, 1 - i]], 0.0);
        }
    }

    #[test]
    fn constant_basis_matches_direct_least_squares() {
        let mut a = Array2::zeros((2, 2));
        a[[0, 0]] = 0.5;
        a[[0, 1]] = 0.2;
        a[[1, 0]] = -0.25;
        a[[1, 1]] = 0.35;
        let panel = var1_panel(25, 60, &a, 0.3, 12);
        let names = panel.indicator_names().to_vec();
        let adj = full_adjacency(&names);
        let stats = identity_stats(&names);
        let opts = NarOptions { lag_order: 1, basis_size: 1, ridge: 0.0, full_covariance: false };
        let model = fit_nar(&panel, &adj, &stats, &opts).unwrap();
        let lambda = &model.lambda_at(0)[0];

        // direct 2-regressor least squares per row (test-local elimination)
        let samples = valid_samples(&panel, 1);
        for i in 0..2 {
            let mut m = [[0.0_f64; 2]; 2];
            let mut v = [0.0_f64; 2];
            for &(u, t) in &samples {
                let x = [panel.values()[[u, t - 1, 0]], panel.values()[[u, t - 1, 1]]];
                let y = panel.values()[[u, t, i]];
                for r in 0..2 {
                    for c in 0..2 {
                        m[r][c] += x[r] * x[c];
                    }
                    v[r] += x[r] * y;
                }
            }
            let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            let b0 = (v[0] * m[1][1] - v[1] * m[0][1]) / det;
            let b1 = (m[0][0] * v[1] - m[1][0] * v[0]) / det;
            assert!((lambda[[i, 0]] - b0).abs() < 1e-8);
            assert!((lambda[[i, 1]] - b1).abs() < 1e-8);
        }
    }

    #[test]
    fn white_noise_coefficients_shrink_and_mse_near_variance() {
        let a = Array2::zeros((2, 2));
        let panel = var1_panel(40, 50, &a, 1.0, 3);
        let names = panel.indicator_names().to_vec();
        let stats = NormStats::from_panel(&panel).unwrap();
        let norm = stats.apply(&panel).unwrap();
        let adj = full_adjacency(&names);
        let opts = NarOptions::default();
        let model = fit_nar(&norm, &adj, &stats, &opts).unwrap();
        let report = model.in_sample_report(&norm).unwrap();
        for row in &report.rows {
            // normalized variance is ~1; no structure to exploit
            assert!(row.mse > 0.9 && row.mse < 1.1, "mse {}", row.mse);
        }
        let lambda = &model.lambda_at(25)[0];
        for v in lambda.iter() {
            assert!(v.abs() < 0.1, "coef {v}");
        }
    }

    #[test]
    fn perfect_linear_data_fits_exactly() {
        // deterministic VAR(1), no noise: x_t = A x_(t-1)
        let mut a = Array2::zeros((2, 2));
        a[[0, 0]] = 0.7;
        a[[0, 1]] = 0.2;
        a[[1, 0]] = -0.1;
        a[[1, 1]] = 0.6;
        let units = 12;
        let periods = 20;
        let mut values = Array3::zeros((units, periods, 2));
        for u in 0..units {
            let mut rng = derive_rng(9, &[u as u64]);
            let mut state = Array1::from_vec(vec![
                rng.gen_range(-1.0..1.0_f64),
                rng.gen_range(-1.0..1.0_f64),
            ]);
            for t in 0..periods {
                for i in 0..2 {
                    values[[u, t, i]] = state[i];
                }
                state = a.dot(&state);
            }
        }
        let mask = Array3::from_elem((units, periods, 2), true);
        let names: Vec<String> = (0..2).map(|i| format!("x{i}")).collect();
        let panel = PanelDataset::new(
            (0..units).map(|u| format!("u{u}")).collect(),
            (0..periods as i64).collect(),
            names.clone(),
            values,
            mask,
        )
        .unwrap();
        let adj = full_adjacency(&names);
        let opts = NarOptions { lag_order: 1, basis_size: 1, ridge: 0.0, full_covariance: false };
        let model = fit_nar(&panel, &adj, &identity_stats(&names), &opts).unwrap();
        let report = model.in_sample_report(&panel).unwrap();
        for row in &report.rows {
            assert!(row.mse < 1e-10, "mse {}", row.mse);
        }
    }

    #[test]
    fn shuffled_time_destroys_structure() {
        let mut a = Array2::zeros((2, 2));
        a[[0, 0]] = 0.8;
        a[[1, 1]] = 0.7;
        a[[1, 0]] = 0.2;
        let panel = var1_panel(40, 60, &a, 0.3, 5);
        let names = panel.indicator_names().to_vec();
        // permute each unit's periods with a fixed seeded shuffle
        let mut values = panel.values().clone();
        for u in 0..panel.n_units() {
            let mut rng = derive_rng(77, &[u as u64]);
            let mut perm: Vec<usize> = (0..panel.n_periods()).collect();
            for k in (1..perm.len()).rev() {
                let pick = rng.gen_range(0..=k);
                perm.swap(k, pick);
            }
            for (t, &src) in perm.iter().enumerate() {
                for i in 0..2 {
                    values[[u, t, i]] = panel.values()[[u, src, i]];
                }
            }
        }
        let shuffled = PanelDataset::new(
            panel.units().to_vec(),
            panel.time_index().to_vec(),
            names.clone(),
            values,
            panel.mask().clone(),
        )
        .unwrap();
        let stats = NormStats::from_panel(&shuffled).unwrap();
        let norm = stats.apply(&shuffled).unwrap();
        let adj = full_adjacency(&names);
        let opts = NarOptions { lag_order: 1, basis_size: 1, ridge: 1e-3, full_covariance: false };
        let model = fit_nar(&norm, &adj, &stats, &opts).unwrap();
        let report = model.in_sample_report(&norm).unwrap();
        for row in &report.rows {
            assert!((row.mse - 1.0).abs() < 0.1, "mse {}", row.mse);
        }
    }

    #[test]
    fn insample_mse_never_exceeds_mean_square() {
        let mut a = Array2::zeros((2, 2));
        a[[0, 0]] = 0.6;
        a[[1, 1]] = 0.5;
        let panel = var1_panel(20, 40, &a, 0.6, 8);
        let stats = NormStats::from_panel(&panel).unwrap();
        let norm = stats.apply(&panel).unwrap();
        let adj = AdjacencyMatrix::all_false(panel.indicator_names().to_vec());
        let opts = NarOptions { lag_order: 1, basis_size: 2, ridge: 0.0, full_covariance: false };
        let model = fit_nar(&norm, &adj, &stats, &opts).unwrap();
        let report = model.in_sample_report(&norm).unwrap();
        let samples = valid_samples(&norm, 1);
        for (i, row) in report.rows.iter().enumerate() {
            let mean_sq = samples
                .iter()
                .map(|&(u, t)| norm.values()[[u, t, i]].powi(2))
                .sum::<f64>()
                / samples.len() as f64;
            assert!(
                row.mse <= mean_sq + 1e-12,
                "mse {} vs mean square {mean_sq}",
                row.mse
            );
        }
    }

    #[test]
    fn smoothness_bounded_by_basis_increments() {
        let mut a = Array2::zeros((2, 2));
        a[[0, 0]] = 0.5;
        a[[1, 0]] = 0.3;
        a[[1, 1]] = 0.4;
        let panel = var1_panel(30, 40, &a, 0.4, 10);
        let stats = NormStats::from_panel(&panel).unwrap();
        let norm = stats.apply(&panel).unwrap();
        let adj = full_adjacency(panel.indicator_names());
        let opts = NarOptions { lag_order: 1, basis_size: 5, ridge: 1e-3, full_covariance: false };
        let model = fit_nar(&norm, &adj, &stats, &opts).unwrap();
        let max_coef = model
            .coefficients()
            .iter()
            .fold(0.0_f64, |acc, &c| acc.max(c.abs()));
        let basis = model.basis();
        for t in 0..39 {
            let phi_a = basis.eval(t as f64);
            let phi_b = basis.eval((t + 1) as f64);
            let basis_step: f64 = phi_a.iter().zip(&phi_b).map(|(x, y)| (x - y).abs()).sum();
            let bound = max_coef * basis_step + 1e-12;
            let la = &model.lambda_at(t)[0];
            let lb = &model.lambda_at(t + 1)[0];
            for (x, y) in la.iter().zip(lb.iter()) {
                assert!(
                    (x - y).abs() <= bound,
                    "jump {} exceeds bound {bound}",
                    (x - y).abs()
                );
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut a = Array2::zeros((3, 3));
        a[[0, 0]] = 0.5;
        a[[1, 0]] = 0.3;
        a[[1, 1]] = 0.4;
        a[[2, 1]] = 0.25;
        a[[2, 2]] = 0.35;
        let panel = var1_panel(25, 30, &a, 0.4, 13);
        let names = panel.indicator_names().to_vec();
        let perm = [2usize, 0, 1]; // new position p holds old indicator perm[p]
        let mut pvalues = Array3::zeros((panel.n_units(), panel.n_periods(), 3));
        for u in 0..panel.n_units() {
            for t in 0..panel.n_periods() {
                for (new, &old) in perm.iter().enumerate() {
                    pvalues[[u, t, new]] = panel.values()[[u, t, old]];
                }
            }
        }
        let pnames: Vec<String> = perm.iter().map(|&old| names[old].clone()).collect();
        let ppanel = PanelDataset::new(
            panel.units().to_vec(),
            panel.time_index().to_vec(),
            pnames.clone(),
            pvalues,
            panel.mask().clone(),
        )
        .unwrap();

        let mut edges = Array2::from_elem((3, 3), false);
        edges[[1, 0]] = true;
        edges[[2, 1]] = true;
        let adj = AdjacencyMatrix::new(edges, names.clone()).unwrap();
        let mut pedges = Array2::from_elem((3, 3), false);
        let inv = |old: usize| perm.iter().position(|&x| x == old).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if adj.has_edge(i, j) {
                    pedges[[inv(i), inv(j)]] = true;
                }
            }
        }
        let padj = AdjacencyMatrix::new(pedges, pnames.clone()).unwrap();

        let opts = NarOptions { lag_order: 1, basis_size: 2, ridge: 1e-4, full_covariance: false };
        let model = fit_nar(&panel, &adj, &identity_stats(&names), &opts).unwrap();
        let pmodel = fit_nar(&ppanel, &padj, &identity_stats(&pnames), &opts).unwrap();

        let mut h = Array2::zeros((1, 3));
        h[[0, 0]] = 0.3;
        h[[0, 1]] = -0.8;
        h[[0, 2]] = 0.5;
        let mut ph = Array2::zeros((1, 3));
        for (new, &old) in perm.iter().enumerate() {
            ph[[0, new]] = h[[0, old]];
        }
        let pred = model.predict_one_step(&h, 10).unwrap();
        let ppred = pmodel.predict_one_step(&ph, 10).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            assert!(
                (ppred[new] - pred[old]).abs() < 1e-10,
                "permuted prediction mismatch"
            );
        }
    }

    #[test]
    fn ridge_zero_on_collinear_data_errors() {
        // second indicator duplicates the first: collinear design
        let mut a = Array2::zeros((1, 1));
        a[[0, 0]] = 0.5;
        let base = var1_panel(10, 30, &a, 0.5, 21);
        let mut values = Array3::zeros((10, 30, 2));
        for u in 0..10 {
            for t in 0..30 {
                values[[u, t, 0]] = base.values()[[u, t, 0]];
                values[[u, t, 1]] = base.values()[[u, t, 0]];
            }
        }
        let names: Vec<String> = vec!["a".into(), "b".into()];
        let panel = PanelDataset::new(
            base.units().to_vec(),
            base.time_index().to_vec(),
            names.clone(),
            values,
            Array3::from_elem((10, 30, 2), true),
        )
        .unwrap();
        let adj = full_adjacency(&names);
        let bad = NarOptions { lag_order: 1, basis_size: 1, ridge: 0.0, full_covariance: false };
        assert!(matches!(
            fit_nar(&panel, &adj, &identity_stats(&names), &bad),
            Err(Error::Singular(_))
        ));
        let ok = NarOptions { lag_order: 1, basis_size: 1, ridge: 1e-6, full_covariance: false };
        assert!(fit_nar(&panel, &adj, &identity_stats(&names), &ok).is_ok());
    }

    #[test]
    fn adjacency_mismatch_errors() {
        let mut a = Array2::zeros((2, 2));
        a[[0, 0]] = 0.5;
        a[[1, 1]] = 0.5;
        let panel = var1_panel(5, 20, &a, 0.5, 2);
        let other_names: Vec<String> = (0..3).map(|i| format!("y{i}")).collect();
        let adj = AdjacencyMatrix::all_false(other_names.clone());
        let err = fit_nar(
            &panel,
            &adj,
            &identity_stats(&other_names),
            &NarOptions::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("adjacency"));
    }

    #[test]
    fn document_roundtrip_is_bit_exact() {
        let mut a = Array2::zeros((2, 2));
        a[[0, 0]] = 0.5;
        a[[1, 0]] = 0.3;
        a[[1, 1]] = 0.4;
        let panel = var1_panel(20, 30, &a, 0.4, 14);
        let stats = NormStats::from_panel(&panel).unwrap();
        let norm = stats.apply(&panel).unwrap();
        let adj = full_adjacency(panel.indicator_names());
        let opts = NarOptions { lag_order: 2, basis_size: 3, ridge: 1e-3, full_covariance: false };
        let model = fit_nar(&norm, &adj, &stats, &opts).unwrap();

        let doc = model.to_doc(true);
        let text = doc.to_toml().unwrap();
        let reloaded = NarModel::from_doc(&NarModelDoc::from_toml(&text).unwrap()).unwrap();
        assert_eq!(model.coefficients(), reloaded.coefficients());
        assert_eq!(model.sigmas(), reloaded.sigmas());
        assert_eq!(model.residual_rows(), reloaded.residual_rows());
        let r1 = model.in_sample_report(&norm).unwrap();
        let r2 = reloaded.in_sample_report(&norm).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn full_covariance_factor_reproduces_covariance() {
        let mut a = Array2::zeros((2, 2));
        a[[0, 0]] = 0.5;
        a[[1, 1]] = 0.4;
        let panel = var1_panel(30, 40, &a, 0.5, 6);
        let stats = NormStats::from_panel(&panel).unwrap();
        let norm = stats.apply(&panel).unwrap();
        let adj = full_adjacency(panel.indicator_names());
        let opts = NarOptions { lag_order: 1, basis_size: 1, ridge: 1e-4, full_covariance: true };
        let model = fit_nar(&norm, &adj, &stats, &opts).unwrap();
        let l = model.covariance_factor().unwrap();
        let cov = l.dot(&l.t());
        // diagonal of the covariance equals sigma^2
        for i in 0..2 {
            assert!((cov[[i, i]].sqrt() - model.sigmas()[i]).abs() < 1e-10);
        }
    }
}
