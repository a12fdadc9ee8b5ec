//! Directed influence-network discovery from panel data.
//!
//! Each indicator is regressed on lagged values of every indicator through
//! additive one-hidden-layer subnetworks, one per (source, lag). A
//! hierarchical group penalty on the subnetwork input weights drives whole
//! source groups to exact zero, and the surviving input-weight norms form a
//! directed causal score matrix that is binarized into the propagation
//! network used by the dynamic stage.
//!
//! Training is full-batch proximal gradient descent with backtracking line
//! search: deterministic for a fixed seed, with exact zeros from the group
//! soft-threshold step.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ranking_auroc;
use crate::panel::PanelDataset;
use crate::rng::derive_rng;
use crate::stats::quantile_type7;

/// Hyperparameters for a single additive-model fit.
#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Maximum lag L.
    pub max_lag: usize,
    /// Hidden units per (source, lag) subnetwork.
    pub hidden: usize,
    /// Group-penalty weight on cross-indicator input weights, relative to
    /// the mean squared error term of the objective.
    pub penalty: f64,
    pub seed: u64,
    pub max_epochs: usize,
    /// Converged when the objective changes by less than this relative
    /// amount over ten epochs.
    pub rel_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_lag: 3,
            hidden: 8,
            penalty: 0.02,
            seed: 0,
            max_epochs: 5000,
            rel_tol: 1e-6,
        }
    }
}

// Parameter layout: input weights w, input biases b, output weights v for
// every (source, lag, hidden) triple, then the intercept, then per-unit
// intercept offsets for the units that contributed samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    n: usize,
    lags: usize,
    hidden: usize,
    units: usize,
}

impl Layout {
    fn block(&self) -> usize {
        self.n * self.lags * self.hidden
    }

    fn w(&self, j: usize, lag: usize, h: usize) -> usize {
        (j * self.lags + lag) * self.hidden + h
    }

    fn b(&self, j: usize, lag: usize, h: usize) -> usize {
        self.block() + self.w(j, lag, h)
    }

    fn v(&self, j: usize, lag: usize, h: usize) -> usize {
        2 * self.block() + self.w(j, lag, h)
    }

    fn intercept(&self) -> usize {
        3 * self.block()
    }

    fn offset(&self, u: usize) -> usize {
        3 * self.block() + 1 + u
    }

    fn len(&self) -> usize {
        3 * self.block() + 1 + self.units
    }
}

/// One target indicator's additive lagged model: prediction is the intercept
/// (plus the unit offset) plus the sum of f_(source,lag)(x_(source,t-lag))
/// over every source and lag, each f a tanh subnetwork.
#[derive(Debug, Clone)]
pub struct AdditiveLagModel {
    target: usize,
    n: usize,
    max_lag: usize,
    hidden: usize,
    params: Vec<f64>,
    unit_names: Vec<String>,
    converged: bool,
    final_grad_norm: f64,
    epochs: usize,
}

impl AdditiveLagModel {
    fn layout(&self) -> Layout {
        Layout {
            n: self.n,
            lags: self.max_lag,
            hidden: self.hidden,
            units: self.unit_names.len(),
        }
    }

    /// Zero-initialized model (predicts zero everywhere).
    pub fn zeroed(target: usize, n: usize, max_lag: usize, hidden: usize) -> Self {
        let layout = Layout { n, lags: max_lag, hidden, units: 0 };
        Self {
            target,
            n,
            max_lag,
            hidden,
            params: vec![0.0; layout.len()],
            unit_names: Vec::new(),
            converged: true,
            final_grad_norm: 0.0,
            epochs: 0,
        }
    }

    /// Seeded symmetric-uniform initialization scaled by fan-in.
    pub fn random_init(
        target: usize,
        n: usize,
        max_lag: usize,
        hidden: usize,
        unit_names: Vec<String>,
        seed: u64,
    ) -> Self {
        use rand::Rng;
        let layout = Layout { n, lags: max_lag, hidden, units: unit_names.len() };
        let mut rng = derive_rng(seed, &[target as u64]);
        let mut params = vec![0.0; layout.len()];
        let out_scale = 1.0 / (hidden as f64).sqrt();
        for j in 0..n {
            for lag in 0..max_lag {
                for h in 0..hidden {
                    params[layout.w(j, lag, h)] = rng.gen_range(-1.0..1.0);
                    params[layout.b(j, lag, h)] = rng.gen_range(-1.0..1.0);
                    params[layout.v(j, lag, h)] = rng.gen_range(-out_scale..out_scale);
                }
            }
        }
        Self {
            target,
            n,
            max_lag,
            hidden,
            params,
            unit_names,
            converged: false,
            final_grad_norm: f64::NAN,
            epochs: 0,
        }
    }

    /// Rebuild a model from an explicit parameter vector.
    pub fn from_params(
        target: usize,
        n: usize,
        max_lag: usize,
        hidden: usize,
        unit_names: Vec<String>,
        params: Vec<f64>,
    ) -> Result<Self> {
        let layout = Layout { n, lags: max_lag, hidden, units: unit_names.len() };
        if params.len() != layout.len() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} parameters, got {}",
                layout.len(),
                params.len()
            )));
        }
        Ok(Self {
            target,
            n,
            max_lag,
            hidden,
            params,
            unit_names,
            converged: true,
            final_grad_norm: f64::NAN,
            epochs: 0,
        })
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn n_indicators(&self) -> usize {
        self.n
    }

    pub fn max_lag(&self) -> usize {
        self.max_lag
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn final_grad_norm(&self) -> f64 {
        self.final_grad_norm
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Copy with one parameter shifted; used for finite-difference checks.
    pub fn perturbed(&self, idx: usize, delta: f64) -> Self {
        let mut clone = self.clone();
        clone.params[idx] += delta;
        clone
    }

    /// Value of the (source, lag) subnetwork at scalar input x.
    pub fn contribution(&self, source: usize, lag: usize, x: f64) -> f64 {
        let layout = self.layout();
        let mut acc = 0.0;
        for h in 0..self.hidden {
            let z = self.params[layout.w(source, lag, h)] * x + self.params[layout.b(source, lag, h)];
            acc += self.params[layout.v(source, lag, h)] * z.tanh();
        }
        acc
    }

    /// Prediction given the lagged state block `lagged[(lag-1, j)]` holding
    /// x_(j, t-lag). Unknown units fall back to the global intercept.
    pub fn predict_sample(&self, lagged: ArrayView2<'_, f64>, unit: Option<&str>) -> f64 {
        let layout = self.layout();
        let mut pred = self.params[layout.intercept()];
        if let Some(name) = unit {
            if let Some(u) = self.unit_names.iter().position(|x| x == name) {
                pred += self.params[layout.offset(u)];
            }
        }
        for j in 0..self.n {
            for lag in 0..self.max_lag {
                pred += self.contribution(j, lag, lagged[[lag, j]]);
            }
        }
        pred
    }

    /// Euclidean norm of the input weights of the (source, lag) subnetwork.
    pub fn group_norm(&self, source: usize, lag: usize) -> f64 {
        let layout = self.layout();
        (0..self.hidden)
            .map(|h| {
                let w = self.params[layout.w(source, lag, h)];
                w * w
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Causal score of `source` on the target: sum of per-lag group norms.
    pub fn source_score(&self, source: usize) -> f64 {
        (0..self.max_lag).map(|lag| self.group_norm(source, lag)).sum()
    }

    /// Count of cross-indicator (source, lag) groups with norm above `tol`.
    pub fn active_cross_groups(&self, tol: f64) -> usize {
        (0..self.n)
            .filter(|&j| j != self.target)
            .map(|j| (0..self.max_lag).filter(|&l| self.group_norm(j, l) > tol).count())
            .sum()
    }
}

/// Assembled training samples for one target indicator.
///
/// A sample exists for every (unit, t) whose full state window
/// t-L..=t is observed; units contributing no sample are dropped with a
/// logged warning.
pub struct TrainingProblem {
    target: usize,
    n: usize,
    max_lag: usize,
    /// Lagged inputs, laid out [(lag * n + j) * n_samples + s].
    inputs: Vec<f64>,
    targets: Vec<f64>,
    /// Per-sample index into `unit_names`.
    sample_unit: Vec<usize>,
    /// Per-sample time position in the source panel.
    sample_time: Vec<usize>,
    unit_names: Vec<String>,
}

impl TrainingProblem {
    pub fn new(train: &PanelDataset, target: usize, max_lag: usize) -> Result<Self> {
        if max_lag == 0 {
            return Err(Error::InvalidArgument("max lag must be at least 1".into()));
        }
        if target >= train.n_indicators() {
            return Err(Error::InvalidArgument(format!(
                "target index {target} out of range for {} indicators",
                train.n_indicators()
            )));
        }
        let n = train.n_indicators();
        let mut rows: Vec<(usize, usize)> = Vec::new();
        let mut contributing = vec![false; train.n_units()];
        for u in 0..train.n_units() {
            for t in max_lag..train.n_periods() {
                if train.window_fully_observed(u, t - max_lag, t) {
                    rows.push((u, t));
                    contributing[u] = true;
                }
            }
        }
        if rows.is_empty() {
            return Err(Error::Degenerate(format!(
                "no unit has {} consecutive fully observed periods",
                max_lag + 1
            )));
        }
        let dropped = contributing.iter().filter(|&&c| !c).count();
        if dropped > 0 {
            log::warn!(
                "discovery target {target}: dropped {dropped} units with fewer than {} consecutive observations",
                max_lag + 1
            );
        }
        let unit_map: Vec<Option<usize>> = {
            let mut next = 0;
            contributing
                .iter()
                .map(|&c| {
                    if c {
                        next += 1;
                        Some(next - 1)
                    } else {
                        None
                    }
                })
                .collect()
        };
        let unit_names: Vec<String> = train
            .units()
            .iter()
            .zip(&contributing)
            .filter(|(_, &c)| c)
            .map(|(name, _)| name.clone())
            .collect();

        let n_samples = rows.len();
        let mut inputs = vec![0.0; max_lag * n * n_samples];
        let mut targets = Vec::with_capacity(n_samples);
        let mut sample_unit = Vec::with_capacity(n_samples);
        let mut sample_time = Vec::with_capacity(n_samples);
        for (s, &(u, t)) in rows.iter().enumerate() {
            targets.push(train.values()[[u, t, target]]);
            sample_unit.push(unit_map[u].expect("contributing unit"));
            sample_time.push(t);
            for lag in 1..=max_lag {
                for j in 0..n {
                    inputs[((lag - 1) * n + j) * n_samples + s] = train.values()[[u, t - lag, j]];
                }
            }
        }
        Ok(Self {
            target,
            n,
            max_lag,
            inputs,
            targets,
            sample_unit,
            sample_time,
            unit_names,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.targets.len()
    }

    pub fn unit_names(&self) -> &[String] {
        &self.unit_names
    }

    /// Keep only samples whose time position satisfies the predicate.
    fn filter_times(&self, keep: impl Fn(usize) -> bool) -> TrainingProblem {
        let n_samples = self.n_samples();
        let kept: Vec<usize> = (0..n_samples).filter(|&s| keep(self.sample_time[s])).collect();
        let mut inputs = vec![0.0; self.max_lag * self.n * kept.len()];
        for block in 0..self.max_lag * self.n {
            for (new_s, &s) in kept.iter().enumerate() {
                inputs[block * kept.len() + new_s] = self.inputs[block * n_samples + s];
            }
        }
        TrainingProblem {
            target: self.target,
            n: self.n,
            max_lag: self.max_lag,
            inputs,
            targets: kept.iter().map(|&s| self.targets[s]).collect(),
            sample_unit: kept.iter().map(|&s| self.sample_unit[s]).collect(),
            sample_time: kept.iter().map(|&s| self.sample_time[s]).collect(),
            unit_names: self.unit_names.clone(),
        }
    }

    fn layout(&self, hidden: usize) -> Layout {
        Layout { n: self.n, lags: self.max_lag, hidden, units: self.unit_names.len() }
    }

    /// Mean squared-error loss only. The objective is the mean (not sum) of
    /// squared errors plus the penalty, so penalty weights are comparable
    /// across sample counts.
    fn smooth_loss(&self, layout: Layout, params: &[f64]) -> f64 {
        let n_samples = self.n_samples();
        let mut preds = vec![params[layout.intercept()]; n_samples];
        for (s, &u) in self.sample_unit.iter().enumerate() {
            preds[s] += params[layout.offset(u)];
        }
        for j in 0..self.n {
            for lag in 0..self.max_lag {
                let xcol = &self.inputs[(lag * self.n + j) * n_samples..][..n_samples];
                for h in 0..layout.hidden {
                    let w = params[layout.w(j, lag, h)];
                    let b = params[layout.b(j, lag, h)];
                    let v = params[layout.v(j, lag, h)];
                    if w == 0.0 && b == 0.0 {
                        continue;
                    }
                    for (p, &x) in preds.iter_mut().zip(xcol) {
                        *p += v * (w * x + b).tanh();
                    }
                }
            }
        }
        preds
            .iter()
            .zip(&self.targets)
            .map(|(&p, &y)| (p - y) * (p - y))
            .sum::<f64>()
            / n_samples as f64
    }

    /// Mean squared-error loss and its gradient.
    fn smooth_loss_and_grad(
        &self,
        layout: Layout,
        params: &[f64],
        grad: &mut [f64],
        cache: &mut [f64],
    ) -> f64 {
        let n_samples = self.n_samples();
        grad.fill(0.0);
        let mut preds = vec![params[layout.intercept()]; n_samples];
        for (s, &u) in self.sample_unit.iter().enumerate() {
            preds[s] += params[layout.offset(u)];
        }
        for j in 0..self.n {
            for lag in 0..self.max_lag {
                let xcol = &self.inputs[(lag * self.n + j) * n_samples..][..n_samples];
                for h in 0..layout.hidden {
                    let w = params[layout.w(j, lag, h)];
                    let b = params[layout.b(j, lag, h)];
                    let v = params[layout.v(j, lag, h)];
                    let row = &mut cache[layout.w(j, lag, h) * n_samples..][..n_samples];
                    for s in 0..n_samples {
                        let t = (w * xcol[s] + b).tanh();
                        row[s] = t;
                        preds[s] += v * t;
                    }
                }
            }
        }
        let inv_n = 1.0 / n_samples as f64;
        let mut loss = 0.0;
        let mut residual = preds;
        for (r, &y) in residual.iter_mut().zip(&self.targets) {
            let e = *r - y;
            loss += e * e;
            *r = 2.0 * e * inv_n;
        }
        loss *= inv_n;
        for j in 0..self.n {
            for lag in 0..self.max_lag {
                let xcol = &self.inputs[(lag * self.n + j) * n_samples..][..n_samples];
                for h in 0..layout.hidden {
                    let v = params[layout.v(j, lag, h)];
                    let row = &cache[layout.w(j, lag, h) * n_samples..][..n_samples];
                    let mut gw = 0.0;
                    let mut gb = 0.0;
                    let mut gv = 0.0;
                    for s in 0..n_samples {
                        let t = row[s];
                        let dz = residual[s] * v * (1.0 - t * t);
                        gw += dz * xcol[s];
                        gb += dz;
                        gv += residual[s] * t;
                    }
                    grad[layout.w(j, lag, h)] = gw;
                    grad[layout.b(j, lag, h)] = gb;
                    grad[layout.v(j, lag, h)] = gv;
                }
            }
        }
        grad[layout.intercept()] = residual.iter().sum();
        for (s, &u) in self.sample_unit.iter().enumerate() {
            grad[layout.offset(u)] += residual[s];
        }
        loss
    }

    /// Hierarchical group-penalty value: for every cross source j and lag l,
    /// the norm of the concatenated input weights over lags l..=L.
    fn penalty_value(&self, layout: Layout, params: &[f64], penalty: f64) -> f64 {
        if penalty == 0.0 {
            return 0.0;
        }
        let mut total = 0.0;
        for j in 0..self.n {
            if j == self.target {
                continue;
            }
            for start in 0..self.max_lag {
                let mut sq = 0.0;
                for lag in start..self.max_lag {
                    for h in 0..layout.hidden {
                        let w = params[layout.w(j, lag, h)];
                        sq += w * w;
                    }
                }
                total += sq.sqrt();
            }
        }
        penalty * total
    }

    /// Full objective (squared error plus penalty) for a model's parameters.
    pub fn objective(&self, model: &AdditiveLagModel, penalty: f64) -> f64 {
        let layout = self.layout(model.hidden);
        assert_eq!(layout.len(), model.params.len(), "model/problem mismatch");
        self.smooth_loss(layout, &model.params)
            + self.penalty_value(layout, &model.params, penalty)
    }

    /// Analytic gradient of the full objective. The penalty term is
    /// differentiable wherever the affected group norms are nonzero, which
    /// holds almost surely at random initializations.
    pub fn gradient(&self, model: &AdditiveLagModel, penalty: f64) -> Vec<f64> {
        let layout = self.layout(model.hidden);
        let mut grad = vec![0.0; layout.len()];
        let mut cache = vec![0.0; layout.block() * self.n_samples()];
        self.smooth_loss_and_grad(layout, &model.params, &mut grad, &mut cache);
        if penalty > 0.0 {
            for j in 0..self.n {
                if j == self.target {
                    continue;
                }
                for start in 0..self.max_lag {
                    let mut sq = 0.0;
                    for lag in start..self.max_lag {
                        for h in 0..layout.hidden {
                            let w = params_at(&model.params, layout.w(j, lag, h));
                            sq += w * w;
                        }
                    }
                    let norm = sq.sqrt();
                    if norm > 0.0 {
                        for lag in start..self.max_lag {
                            for h in 0..layout.hidden {
                                let idx = layout.w(j, lag, h);
                                grad[idx] += penalty * model.params[idx] / norm;
                            }
                        }
                    }
                }
            }
        }
        grad
    }

    /// Mean squared prediction error of a fitted model on these samples.
    pub fn mse(&self, model: &AdditiveLagModel) -> f64 {
        let n_samples = self.n_samples();
        let offset_of: Vec<f64> = self
            .unit_names
            .iter()
            .map(|name| {
                model
                    .unit_names
                    .iter()
                    .position(|m| m == name)
                    .map(|u| model.params[model.layout().offset(u)])
                    .unwrap_or(0.0)
            })
            .collect();
        let layout = model.layout();
        let mut total = 0.0;
        for s in 0..n_samples {
            let mut pred = model.params[layout.intercept()] + offset_of[self.sample_unit[s]];
            for j in 0..self.n {
                for lag in 0..self.max_lag {
                    let x = self.inputs[(lag * self.n + j) * n_samples + s];
                    pred += model.contribution(j, lag, x);
                }
            }
            let e = pred - self.targets[s];
            total += e * e;
        }
        total / n_samples as f64
    }
}

fn params_at(params: &[f64], idx: usize) -> f64 {
    params[idx]
}

/// Group soft-threshold of the nested lag groups, innermost first, which is
/// the exact proximal operator of the hierarchical penalty.
fn prox_hierarchical(layout: Layout, target: usize, params: &mut [f64], thresh: f64) {
    if thresh == 0.0 {
        return;
    }
    for j in 0..layout.n {
        if j == target {
            continue;
        }
        for start in (0..layout.lags).rev() {
            let mut sq = 0.0;
            for lag in start..layout.lags {
                for h in 0..layout.hidden {
                    let w = params[layout.w(j, lag, h)];
                    sq += w * w;
                }
            }
            let norm = sq.sqrt();
            let scale = if norm <= thresh { 0.0 } else { 1.0 - thresh / norm };
            if scale < 1.0 {
                for lag in start..layout.lags {
                    for h in 0..layout.hidden {
                        params[layout.w(j, lag, h)] *= scale;
                    }
                }
            }
        }
    }
}

/// Fit one target's additive lagged model by proximal gradient descent.
///
/// Returns the model even when the epoch budget runs out; check
/// [`AdditiveLagModel::converged`] and the final gradient norm.
pub fn fit_additive_model(
    train: &PanelDataset,
    target: usize,
    options: &FitOptions,
) -> Result<AdditiveLagModel> {
    let problem = TrainingProblem::new(train, target, options.max_lag)?;
    fit_problem(&problem, options)
}

/// Fit on an already-assembled training problem.
pub fn fit_problem(problem: &TrainingProblem, options: &FitOptions) -> Result<AdditiveLagModel> {
    if options.penalty < 0.0 {
        return Err(Error::InvalidArgument("penalty must be nonnegative".into()));
    }
    if options.hidden == 0 {
        return Err(Error::InvalidArgument("hidden size must be at least 1".into()));
    }
    let mut model = AdditiveLagModel::random_init(
        problem.target,
        problem.n,
        problem.max_lag,
        options.hidden,
        problem.unit_names.to_vec(),
        options.seed,
    );
    let layout = problem.layout(options.hidden);
    let n_params = layout.len();
    let mut grad = vec![0.0; n_params];
    let mut cache = vec![0.0; layout.block() * problem.n_samples()];
    let mut candidate = vec![0.0; n_params];
    let mut step = 1.0 / problem.n_samples().max(1) as f64;
    let mut history: Vec<f64> = Vec::with_capacity(options.max_epochs);
    let mut converged = false;
    let mut epochs = 0;

    for epoch in 0..options.max_epochs {
        let smooth = problem.smooth_loss_and_grad(layout, &model.params, &mut grad, &mut cache);
        if !smooth.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at epoch {epoch} (target {})",
                problem.target
            )));
        }
        // backtracking proximal step
        let mut accepted = false;
        while step > 1e-18 {
            for i in 0..n_params {
                candidate[i] = model.params[i] - step * grad[i];
            }
            prox_hierarchical(layout, problem.target, &mut candidate, step * options.penalty);
            let cand_smooth = problem.smooth_loss(layout, &candidate);
            let mut linear = 0.0;
            let mut quad = 0.0;
            for i in 0..n_params {
                let d = candidate[i] - model.params[i];
                linear += grad[i] * d;
                quad += d * d;
            }
            let bound = smooth + linear + quad / (2.0 * step) + 1e-12 * smooth.abs().max(1.0);
            if cand_smooth <= bound {
                model.params.copy_from_slice(&candidate);
                history.push(cand_smooth + problem.penalty_value(layout, &candidate, options.penalty));
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        epochs = epoch + 1;
        if !accepted {
            // step collapsed to numerical zero: treat as converged in place
            converged = true;
            break;
        }
        step = (step * 1.1).min(1e6);
        let e = history.len();
        if e > 10 {
            let prev = history[e - 11];
            let cur = history[e - 1];
            if (prev - cur).abs() <= options.rel_tol * prev.abs().max(1e-12) {
                converged = true;
                break;
            }
        }
    }

    let smooth = problem.smooth_loss_and_grad(layout, &model.params, &mut grad, &mut cache);
    let _ = smooth;
    model.final_grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    model.converged = converged;
    model.epochs = epochs;
    if !converged {
        log::warn!(
            "discovery target {}: no convergence within {} epochs (grad norm {:.3e})",
            problem.target,
            options.max_epochs,
            model.final_grad_norm
        );
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// Score matrix and adjacency
// ---------------------------------------------------------------------------

/// Nonnegative directed causal scores; entry (i, j) aggregates the influence
/// of source j on target i across lags.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalScoreMatrix {
    scores: Array2<f64>,
    indicator_names: Vec<String>,
}

impl CausalScoreMatrix {
    pub fn new(scores: Array2<f64>, indicator_names: Vec<String>) -> Result<Self> {
        if scores.nrows() != scores.ncols() || scores.nrows() != indicator_names.len() {
            return Err(Error::DimensionMismatch(format!(
                "score matrix {}x{} vs {} names",
                scores.nrows(),
                scores.ncols(),
                indicator_names.len()
            )));
        }
        if scores.iter().any(|&s| !s.is_finite() || s < 0.0) {
            return Err(Error::InvalidArgument("scores must be finite and nonnegative".into()));
        }
        Ok(Self { scores, indicator_names })
    }

    pub fn n(&self) -> usize {
        self.scores.nrows()
    }

    pub fn entry(&self, target: usize, source: usize) -> f64 {
        self.scores[[target, source]]
    }

    pub fn indicator_names(&self) -> &[String] {
        &self.indicator_names
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.scores
    }

    /// Off-diagonal entries in row-major order with their coordinates.
    pub fn off_diagonal(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for i in 0..self.n() {
            for j in 0..self.n() {
                if i != j {
                    out.push((i, j, self.scores[[i, j]]));
                }
            }
        }
        out
    }

    /// Self-dependence scores (diagonal), reported separately.
    pub fn self_scores(&self) -> Vec<f64> {
        (0..self.n()).map(|i| self.scores[[i, i]]).collect()
    }

    pub fn to_doc(&self) -> ScoreDoc {
        let mut cross = vec![vec![0.0; self.n()]; self.n()];
        for i in 0..self.n() {
            for j in 0..self.n() {
                if i != j {
                    cross[i][j] = self.scores[[i, j]];
                }
            }
        }
        ScoreDoc {
            indicators: self.indicator_names.clone(),
            cross,
            self_scores: self.self_scores(),
        }
    }

    pub fn from_doc(doc: &ScoreDoc) -> Result<Self> {
        let n = doc.indicators.len();
        let mut scores = Array2::zeros((n, n));
        if doc.cross.len() != n || doc.self_scores.len() != n {
            return Err(Error::DimensionMismatch("score document is ragged".into()));
        }
        for i in 0..n {
            if doc.cross[i].len() != n {
                return Err(Error::DimensionMismatch("score document is ragged".into()));
            }
            for j in 0..n {
                scores[[i, j]] = if i == j { doc.self_scores[i] } else { doc.cross[i][j] };
            }
        }
        Self::new(scores, doc.indicators.clone())
    }
}

/// Structured-text form of the score matrix; cross scores carry a zero
/// diagonal and self-dependence is listed separately.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreDoc {
    pub indicators: Vec<String>,
    pub cross: Vec<Vec<f64>>,
    pub self_scores: Vec<f64>,
}

impl ScoreDoc {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Serialization(e.to_string()))
    }
}

/// Directed binary influence network with an all-false diagonal; self-loops
/// enter the dynamic stage through the identity term instead.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    edges: Array2<bool>,
    indicator_names: Vec<String>,
}

impl AdjacencyMatrix {
    pub fn new(edges: Array2<bool>, indicator_names: Vec<String>) -> Result<Self> {
        if edges.nrows() != edges.ncols() || edges.nrows() != indicator_names.len() {
            return Err(Error::DimensionMismatch(format!(
                "adjacency {}x{} vs {} names",
                edges.nrows(),
                edges.ncols(),
                indicator_names.len()
            )));
        }
        for i in 0..edges.nrows() {
            if edges[[i, i]] {
                return Err(Error::InvalidArgument(
                    "adjacency diagonal must be false (self-loops are implicit)".into(),
                ));
            }
        }
        Ok(Self { edges, indicator_names })
    }

    pub fn all_false(indicator_names: Vec<String>) -> Self {
        let n = indicator_names.len();
        Self {
            edges: Array2::from_elem((n, n), false),
            indicator_names,
        }
    }

    pub fn n(&self) -> usize {
        self.edges.nrows()
    }

    /// True iff source j influences target i.
    pub fn has_edge(&self, target: usize, source: usize) -> bool {
        self.edges[[target, source]]
    }

    pub fn indicator_names(&self) -> &[String] {
        &self.indicator_names
    }

    pub fn edge_count(&self) -> usize {
        self.edges.iter().filter(|&&e| e).count()
    }

    /// Sources allowed for a target row under the (network + identity) mask.
    pub fn support_row(&self, target: usize) -> Vec<usize> {
        (0..self.n())
            .filter(|&j| j == target || self.edges[[target, j]])
            .collect()
    }

    pub fn edges(&self) -> &Array2<bool> {
        &self.edges
    }

    /// Directed edge list (source, target) pairs in row-major target order.
    pub fn edge_list(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n() {
            for j in 0..self.n() {
                if self.edges[[i, j]] {
                    out.push((j, i));
                }
            }
        }
        out
    }

    /// Write `source,target,score` rows for graph tooling.
    pub fn write_edge_list<W: std::io::Write>(
        &self,
        scores: Option<&CausalScoreMatrix>,
        writer: W,
    ) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["source", "target", "score"])
            .map_err(|e| Error::Serialization(e.to_string()))?;
        for (source, target) in self.edge_list() {
            let score = scores.map(|s| s.entry(target, source)).unwrap_or(1.0);
            w.write_record([
                self.indicator_names[source].as_str(),
                self.indicator_names[target].as_str(),
                &score.to_string(),
            ])
            .map_err(|e| Error::Serialization(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Rule turning scores into a directed graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BinarizeRule {
    /// Keep the top fraction of off-diagonal scores (global quantile cutoff).
    KeepTopFraction(f64),
    /// Keep the k largest off-diagonal scores (ties share the cutoff).
    TopK(usize),
    /// Keep scores at or above an absolute cutoff.
    Threshold(f64),
}

impl Default for BinarizeRule {
    fn default() -> Self {
        BinarizeRule::KeepTopFraction(0.2)
    }
}

/// Binarize a score matrix into an adjacency matrix. Zero scores never form
/// edges; the diagonal is always false.
pub fn binarize(scores: &CausalScoreMatrix, rule: BinarizeRule) -> Result<AdjacencyMatrix> {
    let off: Vec<f64> = scores.off_diagonal().iter().map(|&(_, _, s)| s).collect();
    if off.is_empty() {
        return AdjacencyMatrix::new(
            Array2::from_elem((scores.n(), scores.n()), false),
            scores.indicator_names().to_vec(),
        );
    }
    let cutoff = match rule {
        BinarizeRule::KeepTopFraction(f) => {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::InvalidArgument(format!(
                    "keep fraction {f} outside [0,1]"
                )));
            }
            let mut sorted = off.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            quantile_type7(&sorted, 1.0 - f)
        }
        BinarizeRule::TopK(k) => {
            if k == 0 {
                f64::INFINITY
            } else {
                let mut sorted = off.clone();
                sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
                sorted[k.min(sorted.len()) - 1]
            }
        }
        BinarizeRule::Threshold(c) => c,
    };
    let first = off[0];
    if off.iter().all(|&s| s == first) {
        log::warn!(
            "binarize: all off-diagonal scores equal ({first:.3e}); rule keeps {}",
            if first > 0.0 && first >= cutoff { "all edges" } else { "no edges" }
        );
    }
    let n = scores.n();
    let mut edges = Array2::from_elem((n, n), false);
    for (i, j, s) in scores.off_diagonal() {
        edges[[i, j]] = s >= cutoff && s > 0.0;
    }
    AdjacencyMatrix::new(edges, scores.indicator_names().to_vec())
}

/// Aggregate per-target models into the directed score matrix
/// S[target][source] = sum over lags of the input-weight group norm.
pub fn extract_scores(
    models: &[AdditiveLagModel],
    indicator_names: &[String],
) -> Result<CausalScoreMatrix> {
    let n = indicator_names.len();
    if models.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} models for {} indicators",
            models.len(),
            n
        )));
    }
    let max_lag = models[0].max_lag;
    for (i, m) in models.iter().enumerate() {
        if m.target != i {
            return Err(Error::InvalidArgument(format!(
                "model {i} targets indicator {}",
                m.target
            )));
        }
        if m.max_lag != max_lag {
            return Err(Error::DimensionMismatch(format!(
                "model {i} has max lag {} but model 0 has {max_lag}",
                m.max_lag
            )));
        }
        if m.n != n {
            return Err(Error::DimensionMismatch(format!(
                "model {i} covers {} indicators, expected {n}",
                m.n
            )));
        }
    }
    let mut scores = Array2::zeros((n, n));
    for (i, m) in models.iter().enumerate() {
        for j in 0..n {
            scores[[i, j]] = m.source_score(j);
        }
    }
    CausalScoreMatrix::new(scores, indicator_names.to_vec())
}

/// AUROC of the off-diagonal scores against a ground-truth adjacency.
pub fn edge_recovery_score(
    scores: &CausalScoreMatrix,
    truth: &AdjacencyMatrix,
) -> Result<f64> {
    if scores.n() != truth.n() {
        return Err(Error::DimensionMismatch(format!(
            "scores are {}x{} but truth is {}x{}",
            scores.n(),
            scores.n(),
            truth.n(),
            truth.n()
        )));
    }
    let mut s = Vec::new();
    let mut labels = Vec::new();
    for (i, j, score) in scores.off_diagonal() {
        s.push(score);
        labels.push(truth.has_edge(i, j));
    }
    ranking_auroc(&s, &labels)
}

// ---------------------------------------------------------------------------
// Penalty selection and whole-network discovery
// ---------------------------------------------------------------------------

/// Options for the full discovery pipeline.
#[derive(Debug, Clone)]
pub struct DiscoveryOptions {
    pub max_lag: usize,
    pub hidden: usize,
    /// Penalty grid searched by held-out one-step error; a single-element
    /// grid skips the search.
    pub penalty_grid: Vec<f64>,
    /// Fraction of the training periods held out (from the end) for
    /// penalty selection.
    pub holdout_fraction: f64,
    /// Fraction of top off-diagonal scores kept as edges.
    pub keep_fraction: f64,
    pub seed: u64,
    pub max_epochs: usize,
    pub rel_tol: f64,
}

impl Default for DiscoveryOptions {
    fn default() -> Self {
        Self {
            max_lag: 3,
            hidden: 8,
            penalty_grid: vec![0.002, 0.006, 0.02, 0.06, 0.2],
            holdout_fraction: 0.2,
            keep_fraction: 0.2,
            seed: 0,
            max_epochs: 5000,
            rel_tol: 1e-6,
        }
    }
}

/// Per-penalty held-out error and the selected value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PenaltyReport {
    pub grid: Vec<f64>,
    pub holdout_mse: Vec<f64>,
    pub selected: f64,
}

impl PenaltyReport {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }
}

/// Output of the discovery stage.
pub struct DiscoveryOutput {
    pub models: Vec<AdditiveLagModel>,
    pub scores: CausalScoreMatrix,
    pub adjacency: AdjacencyMatrix,
    pub penalty: PenaltyReport,
}

/// Learn the influence network of a normalized training panel: select the
/// penalty on a temporal holdout, refit every target at the chosen penalty,
/// aggregate scores and binarize. Per-target fits run in parallel and are
/// bit-reproducible for a fixed seed.
pub fn discover_network(
    train: &PanelDataset,
    options: &DiscoveryOptions,
) -> Result<DiscoveryOutput> {
    if options.penalty_grid.is_empty() {
        return Err(Error::InvalidArgument("penalty grid must not be empty".into()));
    }
    let n = train.n_indicators();
    let problems: Vec<TrainingProblem> = (0..n)
        .map(|target| TrainingProblem::new(train, target, options.max_lag))
        .collect::<Result<_>>()?;

    let fit_opts = |penalty: f64| FitOptions {
        max_lag: options.max_lag,
        hidden: options.hidden,
        penalty,
        seed: options.seed,
        max_epochs: options.max_epochs,
        rel_tol: options.rel_tol,
    };

    let penalty_report = if options.penalty_grid.len() == 1 {
        PenaltyReport {
            grid: options.penalty_grid.clone(),
            holdout_mse: vec![f64::NAN],
            selected: options.penalty_grid[0],
        }
    } else {
        let times: Vec<usize> = problems.iter().flat_map(|p| p.sample_time.iter().copied()).collect();
        let t_max = times.iter().copied().max().unwrap_or(0);
        let t_min = times.iter().copied().min().unwrap_or(0);
        let span = t_max.saturating_sub(t_min) + 1;
        let holdout = ((span as f64 * options.holdout_fraction).ceil() as usize).max(1);
        let boundary = t_max.saturating_sub(holdout) + 1; // samples with t >= boundary validate
        let mut holdout_mse = Vec::with_capacity(options.penalty_grid.len());
        for &penalty in &options.penalty_grid {
            let opts = fit_opts(penalty);
            let errs: Vec<f64> = problems
                .par_iter()
                .map(|p| {
                    let head = p.filter_times(|t| t < boundary);
                    let tail = p.filter_times(|t| t >= boundary);
                    if head.n_samples() == 0 || tail.n_samples() == 0 {
                        return Ok(f64::NAN);
                    }
                    let model = fit_problem(&head, &opts)?;
                    Ok(tail.mse(&model))
                })
                .collect::<Result<_>>()?;
            let valid: Vec<f64> = errs.iter().copied().filter(|e| e.is_finite()).collect();
            if valid.is_empty() {
                return Err(Error::Degenerate(
                    "penalty selection holdout produced no validation samples".into(),
                ));
            }
            holdout_mse.push(valid.iter().sum::<f64>() / valid.len() as f64);
        }
        let best = holdout_mse
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
            .map(|(i, _)| i)
            .expect("nonempty grid");
        PenaltyReport {
            grid: options.penalty_grid.clone(),
            holdout_mse,
            selected: options.penalty_grid[best],
        }
    };

    let opts = fit_opts(penalty_report.selected);
    let models: Vec<AdditiveLagModel> = problems
        .par_iter()
        .map(|p| fit_problem(p, &opts))
        .collect::<Result<_>>()?;
    let scores = extract_scores(&models, train.indicator_names())?;
    let adjacency = binarize(&scores, BinarizeRule::KeepTopFraction(options.keep_fraction))?;
    Ok(DiscoveryOutput {
        models,
        scores,
        adjacency,
        penalty: penalty_report,
    })
}
