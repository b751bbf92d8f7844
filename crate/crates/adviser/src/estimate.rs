//! Per-intervention success-probability estimation: L2-penalized logistic
//! regression fit by iteratively reweighted least squares, survey-calibrated
//! cold-start models, and need scores (lift over the no-intervention
//! baseline).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::InterventionKind;

/// Iteration cap for the IRLS optimizer.
pub const MAX_ITERATIONS: usize = 100;
/// Gradient infinity-norm tolerance declaring convergence.
pub const GRAD_TOLERANCE: f64 = 1e-8;
/// Current on-disk model file version.
pub const MODEL_FILE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error("feature vector has {got} entries, schema expects {expected}")]
    SchemaMismatch { expected: usize, got: usize },
    #[error("feature {0:?} at index {1} is not finite")]
    NonFiniteFeature(String, usize),
    #[error("training needs at least one positive and one negative example")]
    NeedBothClasses,
    #[error(
        "optimizer did not converge in {iterations} iterations \
         (gradient norm {grad_norm:.3e}); data may be separable — add regularization"
    )]
    NotConverged { iterations: usize, grad_norm: f64 },
    #[error("regularization must be non-negative, got {0}")]
    NegativeRegularization(f64),
    #[error("model set has no no-intervention baseline model")]
    MissingBaseline,
    #[error("model set has no model for {0}")]
    MissingKind(InterventionKind),
    #[error("survey prior missing an aggregate rate for {0}")]
    IncompletePrior(InterventionKind),
    #[error("aggregate rate {0} outside (0, 1)")]
    RateOutOfRange(f64),
    #[error("reference population must be non-empty")]
    EmptyReference,
    #[error("model file: {0}")]
    BadModelFile(String),
    #[error("training data: {0}")]
    TrainingData(String),
    #[error("model file io: {0}")]
    Io(#[from] std::io::Error),
}

/// Ordered list of feature names; every [`FeatureVector`] is interpreted
/// against exactly one schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureSchema(pub Vec<String>);

impl FeatureSchema {
    pub fn new(names: impl IntoIterator<Item = impl Into<String>>) -> Self {
        FeatureSchema(names.into_iter().map(Into::into).collect())
    }

    /// The stock schema used when none is configured: monthly household
    /// income (USD), mother age (years), number of children, completed
    /// fraction of doses due so far, and travel minutes to the nearest
    /// health center.
    pub fn standard() -> Self {
        FeatureSchema::new([
            "household_income_usd",
            "mother_age_years",
            "children_count",
            "dose_completion_ratio",
            "distance_to_center_min",
        ])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.0.iter().position(|n| n == name)
    }
}

/// Dense numeric features for one beneficiary, in schema order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        FeatureVector(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    fn check(&self, schema_len: usize, names: &FeatureSchema) -> Result<(), EstimateError> {
        if self.0.len() != schema_len {
            return Err(EstimateError::SchemaMismatch {
                expected: schema_len,
                got: self.0.len(),
            });
        }
        for (i, v) in self.0.iter().enumerate() {
            if !v.is_finite() {
                let name = names.0.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
                return Err(EstimateError::NonFiniteFeature(name, i));
            }
        }
        Ok(())
    }
}

/// What a model predicts success *for*: doing nothing, or one intervention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ModelTarget {
    NoIntervention,
    Intervention(InterventionKind),
}

impl From<ModelTarget> for String {
    fn from(t: ModelTarget) -> String {
        match t {
            ModelTarget::NoIntervention => "none".to_string(),
            ModelTarget::Intervention(k) => k.label().to_string(),
        }
    }
}

impl TryFrom<String> for ModelTarget {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        match s.as_str() {
            "none" => Ok(ModelTarget::NoIntervention),
            other => InterventionKind::ALL
                .iter()
                .find(|k| k.label() == other)
                .map(|k| ModelTarget::Intervention(*k))
                .ok_or_else(|| format!("unknown model target {other:?}")),
        }
    }
}

impl fmt::Display for ModelTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelTarget::NoIntervention => f.write_str("none"),
            ModelTarget::Intervention(k) => f.write_str(k.label()),
        }
    }
}

/// Per-feature mean/standard-deviation used to standardize inputs before
/// applying the weights. A constant feature gets scale 1 so standardizing
/// stays a no-op rather than dividing by zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Scaler {
    pub fn identity(dim: usize) -> Self {
        Scaler {
            means: vec![0.0; dim],
            scales: vec![1.0; dim],
        }
    }

    pub fn fit(rows: &[FeatureVector], dim: usize) -> Self {
        if rows.is_empty() {
            return Scaler::identity(dim);
        }
        let n = rows.len() as f64;
        let mut means = vec![0.0; dim];
        for r in rows {
            for (m, v) in means.iter_mut().zip(&r.0) {
                *m += v;
            }
        }
        for m in &mut means {
            *m /= n;
        }
        let mut scales = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in scales.iter_mut().zip(&r.0).zip(&means) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut scales {
            *s = (*s / n).sqrt();
            if *s < 1e-12 {
                *s = 1.0;
            }
        }
        Scaler { means, scales }
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.means.iter().zip(&self.scales))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// Bookkeeping captured at fit time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ModelMetadata {
    pub sample_count: usize,
    pub iterations: usize,
    pub converged: bool,
    /// RFC 3339 timestamp; absent for deterministic artifacts.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trained_at: Option<String>,
}

/// A fitted (or survey-calibrated) logistic success model. Weights apply
/// to standardized features; [`LogisticModel::raw_coefficients`] maps them
/// back to the original feature scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub target: ModelTarget,
    pub schema: FeatureSchema,
    pub scaler: Scaler,
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub metadata: ModelMetadata,
}

impl LogisticModel {
    /// A feature-blind model predicting `rate` for every input. This is
    /// the honest fit when a training sample is single-class (for
    /// example an intervention that succeeded for every sampled
    /// household), where a slope fit has no signal to use.
    pub fn constant(
        target: ModelTarget,
        schema: &FeatureSchema,
        rate: f64,
        sample_count: usize,
    ) -> Result<Self, EstimateError> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(EstimateError::RateOutOfRange(rate));
        }
        let clamped = rate.clamp(1e-9, 1.0 - 1e-9);
        Ok(LogisticModel {
            target,
            schema: schema.clone(),
            scaler: Scaler::identity(schema.len()),
            weights: vec![0.0; schema.len()],
            intercept: (clamped / (1.0 - clamped)).ln(),
            metadata: ModelMetadata {
                sample_count,
                iterations: 0,
                converged: true,
                trained_at: None,
            },
        })
    }

    /// Success probability for `x`. Always strictly inside (0, 1).
    pub fn predict(&self, x: &FeatureVector) -> Result<f64, EstimateError> {
        x.check(self.schema.len(), &self.schema)?;
        let z = self
            .scaler
            .transform(&x.0)
            .iter()
            .zip(&self.weights)
            .map(|(v, w)| v * w)
            .sum::<f64>()
            + self.intercept;
        Ok(sigmoid(z).clamp(f64::MIN_POSITIVE, 1.0 - 1e-15))
    }

    /// Weights and intercept re-expressed on the raw (unstandardized)
    /// feature scale, so `sigmoid(raw_w · x + raw_b)` equals `predict(x)`.
    pub fn raw_coefficients(&self) -> (Vec<f64>, f64) {
        let raw_w: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.scaler.scales)
            .map(|(w, s)| w / s)
            .collect();
        let shift: f64 = raw_w
            .iter()
            .zip(&self.scaler.means)
            .map(|(w, m)| w * m)
            .sum();
        (raw_w, self.intercept - shift)
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^z) without overflow.
fn log1p_exp(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// The penalized mean negative log-likelihood as an explicit function of
/// the parameter vector `[intercept, w_1, ..., w_d]` over standardized
/// rows (mean, not sum, so the gradient tolerance is sample-size-free).
/// Exposed so tests can difference the objective numerically against
/// [`TrainingProblem::gradient`].
pub struct TrainingProblem {
    /// Standardized design matrix rows (without the implicit 1 column).
    rows: Vec<Vec<f64>>,
    labels: Vec<f64>,
    lambda: f64,
}

impl TrainingProblem {
    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.len()) + 1
    }

    /// Penalized mean negative log-likelihood at `params`.
    pub fn objective(&self, params: &[f64]) -> f64 {
        let (b, w) = (params[0], &params[1..]);
        let mut total = 0.0;
        for (row, y) in self.rows.iter().zip(&self.labels) {
            let z = b + dot(row, w);
            total += log1p_exp(z) - y * z;
        }
        total / self.rows.len() as f64 + 0.5 * self.lambda * dot(w, w)
    }

    /// Analytic gradient of [`TrainingProblem::objective`].
    pub fn gradient(&self, params: &[f64]) -> Vec<f64> {
        let (b, w) = (params[0], &params[1..]);
        let mut g = vec![0.0; params.len()];
        for (row, y) in self.rows.iter().zip(&self.labels) {
            let r = sigmoid(b + dot(row, w)) - y;
            g[0] += r;
            for (gj, xj) in g[1..].iter_mut().zip(row) {
                *gj += r * xj;
            }
        }
        let n = self.rows.len() as f64;
        for gj in g.iter_mut() {
            *gj /= n;
        }
        for (gj, wj) in g[1..].iter_mut().zip(w) {
            *gj += self.lambda * wj;
        }
        g
    }

    /// Hessian of the objective (dense, symmetric positive semi-definite).
    fn hessian(&self, params: &[f64]) -> Vec<Vec<f64>> {
        let (b, w) = (params[0], &params[1..]);
        let d = params.len();
        let mut h = vec![vec![0.0; d]; d];
        for row in &self.rows {
            let p = sigmoid(b + dot(row, w));
            let q = p * (1.0 - p);
            h[0][0] += q;
            for (j, xj) in row.iter().enumerate() {
                h[0][j + 1] += q * xj;
                h[j + 1][0] += q * xj;
                for (k, xk) in row.iter().enumerate().skip(j) {
                    let v = q * xj * xk;
                    h[j + 1][k + 1] += v;
                    if k != j {
                        h[k + 1][j + 1] += v;
                    }
                }
            }
        }
        let n = self.rows.len() as f64;
        for row in h.iter_mut() {
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        for (j, row) in h.iter_mut().enumerate().skip(1) {
            row[j] += self.lambda;
        }
        h
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `a x = rhs` for symmetric positive-definite `a` by Cholesky
/// factorization. Returns `None` when the matrix is not positive definite.
fn cholesky_solve(a: &[Vec<f64>], rhs: &[f64]) -> Option<Vec<f64>> {
    let n = rhs.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l[i][j] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    // forward substitution L y = rhs
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = rhs[i];
        for k in 0..i {
            sum -= l[i][k] * y[k];
        }
        y[i] = sum / l[i][i];
    }
    // back substitution Lᵀ x = y
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[k][i] * x[k];
        }
        x[i] = sum / l[i][i];
    }
    Some(x)
}

/// Builds the standardized training problem for `examples`; the returned
/// scaler must be stored with any model fit on it.
pub fn training_problem(
    examples: &[(FeatureVector, bool)],
    schema: &FeatureSchema,
    lambda: f64,
) -> Result<(TrainingProblem, Scaler), EstimateError> {
    if lambda < 0.0 {
        return Err(EstimateError::NegativeRegularization(lambda));
    }
    let pos = examples.iter().filter(|(_, y)| *y).count();
    if pos == 0 || pos == examples.len() {
        return Err(EstimateError::NeedBothClasses);
    }
    for (x, _) in examples {
        x.check(schema.len(), schema)?;
    }
    let xs: Vec<FeatureVector> = examples.iter().map(|(x, _)| x.clone()).collect();
    let scaler = Scaler::fit(&xs, schema.len());
    let rows = xs.iter().map(|x| scaler.transform(&x.0)).collect();
    let labels = examples
        .iter()
        .map(|(_, y)| if *y { 1.0 } else { 0.0 })
        .collect();
    Ok((
        TrainingProblem {
            rows,
            labels,
            lambda,
        },
        scaler,
    ))
}

/// Fits a logistic model by damped Newton steps (IRLS with step halving so
/// the objective never increases). Stops at gradient norm below
/// [`GRAD_TOLERANCE`]; errors after [`MAX_ITERATIONS`], or earlier when an
/// unpenalized fit starts diverging — which is how separation without
/// regularization surfaces.
pub fn train(
    target: ModelTarget,
    examples: &[(FeatureVector, bool)],
    schema: &FeatureSchema,
    lambda: f64,
) -> Result<LogisticModel, EstimateError> {
    let (problem, scaler) = training_problem(examples, schema, lambda)?;
    let d = schema.len() + 1;
    let mut params = vec![0.0; d];
    let mut obj = problem.objective(&params);
    let mut iterations = 0;
    let mut converged = false;

    for iter in 1..=MAX_ITERATIONS {
        iterations = iter;
        let g = problem.gradient(&params);
        let gnorm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gnorm <= GRAD_TOLERANCE {
            converged = true;
            iterations = iter - 1;
            break;
        }
        let mut h = problem.hessian(&params);
        let mut direction = cholesky_solve(&h, &g);
        let mut jitter = 1e-10;
        while direction.is_none() && jitter < 1.0 {
            for (j, row) in h.iter_mut().enumerate() {
                row[j] += jitter;
            }
            direction = cholesky_solve(&h, &g);
            jitter *= 10.0;
        }
        let Some(dir) = direction else {
            return Err(EstimateError::NotConverged {
                iterations: iter,
                grad_norm: gnorm,
            });
        };
        // Step halving: shrink until the objective does not increase.
        let mut step = 1.0;
        loop {
            let cand: Vec<f64> = params
                .iter()
                .zip(&dir)
                .map(|(p, d)| p - step * d)
                .collect();
            let cobj = problem.objective(&cand);
            if cobj <= obj {
                params = cand;
                obj = cobj;
                break;
            }
            step *= 0.5;
            if step < 1e-12 {
                break; // stalled; let the gradient check decide next round
            }
        }
        // Unpenalized fits on separable data drive the weights to infinity
        // while the gradient quietly saturates toward zero; a standardized
        // coefficient past ±30 (odds ratio e^30 per SD) only happens on
        // that path, so report it as non-convergence.
        if lambda == 0.0 && params.iter().any(|p| p.abs() > 30.0) {
            let gnorm = problem
                .gradient(&params)
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            return Err(EstimateError::NotConverged {
                iterations: iter,
                grad_norm: gnorm,
            });
        }
    }

    if !converged {
        let gnorm = problem
            .gradient(&params)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if gnorm > GRAD_TOLERANCE {
            return Err(EstimateError::NotConverged {
                iterations,
                grad_norm: gnorm,
            });
        }
        converged = true;
    }

    Ok(LogisticModel {
        target,
        schema: schema.clone(),
        scaler,
        weights: params[1..].to_vec(),
        intercept: params[0],
        metadata: ModelMetadata {
            sample_count: examples.len(),
            iterations,
            converged,
            trained_at: None,
        },
    })
}

/// The per-target models backing need-score computation. Always queried
/// through the typed accessors so a missing baseline is an error, not a
/// panic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSet {
    models: BTreeMap<ModelTarget, LogisticModel>,
}

impl ModelSet {
    pub fn new() -> Self {
        ModelSet {
            models: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, model: LogisticModel) {
        self.models.insert(model.target, model);
    }

    pub fn get(&self, target: ModelTarget) -> Option<&LogisticModel> {
        self.models.get(&target)
    }

    pub fn targets(&self) -> impl Iterator<Item = ModelTarget> + '_ {
        self.models.keys().copied()
    }

    pub fn baseline(&self) -> Result<&LogisticModel, EstimateError> {
        self.models
            .get(&ModelTarget::NoIntervention)
            .ok_or(EstimateError::MissingBaseline)
    }

    pub fn for_kind(&self, kind: InterventionKind) -> Result<&LogisticModel, EstimateError> {
        self.models
            .get(&ModelTarget::Intervention(kind))
            .ok_or(EstimateError::MissingKind(kind))
    }

    /// Success probability if nothing is done for `x`.
    pub fn predict_baseline(&self, x: &FeatureVector) -> Result<f64, EstimateError> {
        self.baseline()?.predict(x)
    }

    /// Success probability under intervention `kind` for `x`.
    pub fn predict_kind(
        &self,
        kind: InterventionKind,
        x: &FeatureVector,
    ) -> Result<f64, EstimateError> {
        self.for_kind(kind)?.predict(x)
    }

    /// Lift of `target` over doing nothing: `p(target) − p(none)`. Zero by
    /// construction when `target` is the baseline itself; may be negative.
    pub fn need_score_target(
        &self,
        target: ModelTarget,
        x: &FeatureVector,
    ) -> Result<f64, EstimateError> {
        let p0 = self.baseline()?.predict(x)?;
        let pk = match target {
            ModelTarget::NoIntervention => p0,
            ModelTarget::Intervention(k) => self.for_kind(k)?.predict(x)?,
        };
        Ok(pk - p0)
    }

    /// Lift of intervention `kind` over doing nothing.
    pub fn need_score(
        &self,
        kind: InterventionKind,
        x: &FeatureVector,
    ) -> Result<f64, EstimateError> {
        self.need_score_target(ModelTarget::Intervention(kind), x)
    }

    pub fn to_json(&self) -> String {
        let file = ModelSetFile {
            version: MODEL_FILE_VERSION,
            models: self.models.values().cloned().collect(),
        };
        serde_json::to_string_pretty(&file).expect("model set serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self, EstimateError> {
        let file: ModelSetFile = serde_json::from_str(text)
            .map_err(|e| EstimateError::BadModelFile(e.to_string()))?;
        if file.version != MODEL_FILE_VERSION {
            return Err(EstimateError::BadModelFile(format!(
                "unsupported model file version {} (expected {})",
                file.version, MODEL_FILE_VERSION
            )));
        }
        let mut set = ModelSet::new();
        for m in file.models {
            if m.weights.len() != m.schema.len()
                || m.scaler.means.len() != m.schema.len()
                || m.scaler.scales.len() != m.schema.len()
            {
                return Err(EstimateError::BadModelFile(format!(
                    "model {}: weight/scaler length does not match schema length {}",
                    m.target,
                    m.schema.len()
                )));
            }
            if !m.intercept.is_finite()
                || m.weights.iter().any(|w| !w.is_finite())
                || m.scaler.means.iter().any(|v| !v.is_finite())
                || m.scaler.scales.iter().any(|v| !v.is_finite() || *v <= 0.0)
            {
                return Err(EstimateError::BadModelFile(format!(
                    "model {}: non-finite coefficients or non-positive scale",
                    m.target
                )));
            }
            if set.models.insert(m.target, m).is_some() {
                return Err(EstimateError::BadModelFile(
                    "duplicate model target".to_string(),
                ));
            }
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<(), EstimateError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EstimateError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }
}

impl Default for ModelSet {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Serialize, Deserialize)]
struct ModelSetFile {
    version: u32,
    models: Vec<LogisticModel>,
}

/// A fixed-sign slope attached to one named feature, expressed per
/// standard deviation of that feature over the reference population.
/// Features absent from the schema in use are skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureAdjustment {
    pub target: ModelTarget,
    pub feature: String,
    pub weight_per_sd: f64,
}

/// Aggregate acceptance/success rates from a community survey, plus
/// cross-tab slope adjustments, used to bootstrap models before any
/// outcome data exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyPrior {
    /// Fraction of surveyed mothers for whom each intervention is expected
    /// to succeed.
    pub aggregate: BTreeMap<InterventionKind, f64>,
    /// Expected success rate with no intervention at all.
    pub baseline_rate: f64,
    pub adjustments: Vec<FeatureAdjustment>,
}

impl SurveyPrior {
    /// The deployment survey figures: mothers agreeing that drives
    /// (93.63%), vouchers (83.92%), calls (72.90%), and pickups (85.71%)
    /// would get their child vaccinated, against a 43.6% status quo.
    pub fn default_survey() -> Self {
        let mut aggregate = BTreeMap::new();
        aggregate.insert(InterventionKind::VaccineDrive, 0.9363);
        aggregate.insert(InterventionKind::TravelVoucher, 0.8392);
        aggregate.insert(InterventionKind::PhoneCall, 0.729);
        aggregate.insert(InterventionKind::PickupService, 0.8571);
        SurveyPrior {
            aggregate,
            baseline_rate: 0.436,
            adjustments: vec![
                // Better-off households vaccinate more often unaided, and
                // distance suppresses unaided success.
                FeatureAdjustment {
                    target: ModelTarget::NoIntervention,
                    feature: "household_income_usd".into(),
                    weight_per_sd: 0.4,
                },
                FeatureAdjustment {
                    target: ModelTarget::NoIntervention,
                    feature: "distance_to_center_min".into(),
                    weight_per_sd: -0.4,
                },
                // Voucher need falls with income.
                FeatureAdjustment {
                    target: ModelTarget::Intervention(InterventionKind::TravelVoucher),
                    feature: "household_income_usd".into(),
                    weight_per_sd: -0.2,
                },
                // Calls help less the farther the center is.
                FeatureAdjustment {
                    target: ModelTarget::Intervention(InterventionKind::PhoneCall),
                    feature: "distance_to_center_min".into(),
                    weight_per_sd: -0.2,
                },
            ],
        }
    }

    fn validate(&self) -> Result<(), EstimateError> {
        for kind in InterventionKind::ALL {
            let rate = *self
                .aggregate
                .get(&kind)
                .ok_or(EstimateError::IncompletePrior(kind))?;
            if !(0.0..=1.0).contains(&rate) {
                return Err(EstimateError::RateOutOfRange(rate));
            }
        }
        if !(0.0..=1.0).contains(&self.baseline_rate) {
            return Err(EstimateError::RateOutOfRange(self.baseline_rate));
        }
        Ok(())
    }
}

/// Builds one model per target from survey aggregates alone: the slope
/// adjustments are fixed, then the intercept is bisected until the mean
/// prediction over `reference` matches the aggregate rate to ~1e-9
/// (comfortably inside the 0.01 contract).
pub fn cold_start_from_survey(
    prior: &SurveyPrior,
    schema: &FeatureSchema,
    reference: &[FeatureVector],
) -> Result<ModelSet, EstimateError> {
    prior.validate()?;
    if reference.is_empty() {
        return Err(EstimateError::EmptyReference);
    }
    for x in reference {
        x.check(schema.len(), schema)?;
    }
    let scaler = Scaler::fit(reference, schema.len());
    let std_rows: Vec<Vec<f64>> = reference.iter().map(|x| scaler.transform(&x.0)).collect();

    let mut set = ModelSet::new();
    let mut targets = vec![(ModelTarget::NoIntervention, prior.baseline_rate)];
    for kind in InterventionKind::ALL {
        targets.push((ModelTarget::Intervention(kind), prior.aggregate[&kind]));
    }
    for (target, rate) in targets {
        let mut weights = vec![0.0; schema.len()];
        for adj in &prior.adjustments {
            if adj.target != target {
                continue;
            }
            if let Some(idx) = schema.index_of(&adj.feature) {
                weights[idx] += adj.weight_per_sd;
            }
        }
        let intercept = calibrate_intercept(&std_rows, &weights, rate);
        set.insert(LogisticModel {
            target,
            schema: schema.clone(),
            scaler: scaler.clone(),
            weights,
            intercept,
            metadata: ModelMetadata {
                sample_count: reference.len(),
                iterations: 0,
                converged: true,
                trained_at: None,
            },
        });
    }
    Ok(set)
}

/// Bisects the intercept so that mean(sigmoid(b + w·x)) over `rows` hits
/// `rate`; the mean is strictly increasing in the intercept.
fn calibrate_intercept(rows: &[Vec<f64>], weights: &[f64], rate: f64) -> f64 {
    let mean_at = |b: f64| -> f64 {
        rows.iter()
            .map(|r| sigmoid(b + dot(r, weights)))
            .sum::<f64>()
            / rows.len() as f64
    };
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Reads training rows from CSV text with a header: every schema feature
/// must be a column, and `outcome_col` must hold 0/1 or true/false.
pub fn parse_training_csv(
    bytes: &[u8],
    schema: &FeatureSchema,
    outcome_col: &str,
) -> Result<Vec<(FeatureVector, bool)>, EstimateError> {
    let mut reader = csv::ReaderBuilder::new().from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| EstimateError::BadModelFile(format!("training csv header: {e}")))?
        .clone();
    let col = |name: &str| -> Result<usize, EstimateError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| EstimateError::BadModelFile(format!("training csv missing column {name:?}")))
    };
    let feature_cols: Vec<usize> = schema
        .names()
        .iter()
        .map(|n| col(n))
        .collect::<Result<_, _>>()?;
    let outcome = col(outcome_col)?;

    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| EstimateError::BadModelFile(format!("training csv row {i}: {e}")))?;
        let mut values = Vec::with_capacity(feature_cols.len());
        for &c in &feature_cols {
            let raw = record.get(c).unwrap_or("");
            let v: f64 = raw.trim().parse().map_err(|_| {
                EstimateError::BadModelFile(format!(
                    "training csv row {i}: bad numeric value {raw:?}"
                ))
            })?;
            if !v.is_finite() {
                return Err(EstimateError::BadModelFile(format!(
                    "training csv row {i}: non-finite value"
                )));
            }
            values.push(v);
        }
        let raw = record.get(outcome).unwrap_or("").trim().to_ascii_lowercase();
        let y = match raw.as_str() {
            "1" | "true" | "yes" => true,
            "0" | "false" | "no" => false,
            other => {
                return Err(EstimateError::BadModelFile(format!(
                    "training csv row {i}: bad outcome {other:?}"
                )))
            }
        };
        out.push((FeatureVector::new(values), y));
    }
    Ok(out)
}

/// Fits one target on labeled examples, falling back to a constant-rate
/// model when the sample is single-class and carries no slope information
/// (every drive succeeding, for instance). The constant is lightly shrunk
/// away from the boundary.
pub fn fit_examples(
    target: ModelTarget,
    examples: &[(FeatureVector, bool)],
    schema: &FeatureSchema,
    lambda: f64,
) -> Result<LogisticModel, EstimateError> {
    if examples.is_empty() {
        return Err(EstimateError::NeedBothClasses);
    }
    let positives = examples.iter().filter(|(_, y)| *y).count();
    if positives == 0 || positives == examples.len() {
        let rate = (positives as f64 + 0.5) / (examples.len() as f64 + 1.0);
        LogisticModel::constant(target, schema, rate, examples.len())
    } else {
        train(target, examples, schema, lambda)
    }
}

/// Column names of a training outcomes CSV: the feature schema in order,
/// then `target` (a model-target label) and `outcome` (0 or 1).
pub fn training_header(schema: &FeatureSchema) -> Vec<String> {
    let mut h: Vec<String> = schema.names().to_vec();
    h.push("target".to_string());
    h.push("outcome".to_string());
    h
}

/// Parses a multi-target training CSV. Strict: the header must match
/// [`training_header`], features must be finite numbers, targets must be
/// known labels, and outcomes must be 0 or 1.
pub fn parse_training_rows(
    bytes: &[u8],
    schema: &FeatureSchema,
) -> Result<Vec<(ModelTarget, FeatureVector, bool)>, EstimateError> {
    let mut reader = csv::ReaderBuilder::new().from_reader(bytes);
    let expected = training_header(schema);
    let got: Vec<String> = reader
        .headers()
        .map_err(|e| EstimateError::TrainingData(e.to_string()))?
        .iter()
        .map(|f| f.to_string())
        .collect();
    if got != expected {
        return Err(EstimateError::TrainingData(format!(
            "header mismatch: expected {expected:?}, got {got:?}"
        )));
    }
    let k = schema.len();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record
            .map_err(|e| EstimateError::TrainingData(format!("row {row}: {e}")))?;
        if record.len() != k + 2 {
            return Err(EstimateError::TrainingData(format!(
                "row {row}: expected {} fields, got {}",
                k + 2,
                record.len()
            )));
        }
        let mut values = Vec::with_capacity(k);
        for (j, field) in record.iter().take(k).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                EstimateError::TrainingData(format!(
                    "row {row}: feature {:?} is not a number: {field:?}",
                    schema.names()[j]
                ))
            })?;
            if !v.is_finite() {
                return Err(EstimateError::TrainingData(format!(
                    "row {row}: feature {:?} is not finite",
                    schema.names()[j]
                )));
            }
            values.push(v);
        }
        let target = ModelTarget::try_from(record[k].trim().to_string())
            .map_err(|e| EstimateError::TrainingData(format!("row {row}: {e}")))?;
        let outcome = match record[k + 1].trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(EstimateError::TrainingData(format!(
                    "row {row}: outcome must be 0 or 1, got {other:?}"
                )))
            }
        };
        rows.push((target, FeatureVector::new(values), outcome));
    }
    Ok(rows)
}

/// Writes training rows in the exact format [`parse_training_rows`] reads.
pub fn emit_training_rows(
    rows: &[(ModelTarget, FeatureVector, bool)],
    schema: &FeatureSchema,
) -> Result<Vec<u8>, EstimateError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(training_header(schema))
        .map_err(|e| EstimateError::TrainingData(e.to_string()))?;
    for (target, x, y) in rows {
        if x.len() != schema.len() {
            return Err(EstimateError::SchemaMismatch {
                expected: schema.len(),
                got: x.len(),
            });
        }
        let mut record: Vec<String> = x.values().iter().map(|v| v.to_string()).collect();
        record.push(String::from(*target));
        record.push(if *y { "1" } else { "0" }.to_string());
        writer
            .write_record(&record)
            .map_err(|e| EstimateError::TrainingData(e.to_string()))?;
    }
    writer
        .into_inner()
        .map_err(|e| EstimateError::TrainingData(e.to_string()))
}

/// Trains a complete model set from labeled rows. Every target — the
/// baseline and all four intervention kinds — must be represented.
pub fn train_from_rows(
    rows: &[(ModelTarget, FeatureVector, bool)],
    schema: &FeatureSchema,
    lambda: f64,
) -> Result<ModelSet, EstimateError> {
    let mut grouped: std::collections::BTreeMap<ModelTarget, Vec<(FeatureVector, bool)>> =
        std::collections::BTreeMap::new();
    for (target, x, y) in rows {
        grouped.entry(*target).or_default().push((x.clone(), *y));
    }
    if !grouped.contains_key(&ModelTarget::NoIntervention) {
        return Err(EstimateError::MissingBaseline);
    }
    for kind in InterventionKind::ALL {
        if !grouped.contains_key(&ModelTarget::Intervention(kind)) {
            return Err(EstimateError::MissingKind(kind));
        }
    }
    let mut set = ModelSet::new();
    for (target, examples) in &grouped {
        set.insert(fit_examples(*target, examples, schema, lambda)?);
    }
    Ok(set)
}
