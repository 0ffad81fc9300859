//! Arrival/service model: the matrices `C` and `D_k`, batch-size laws,
//! service-time laws, validation and the stationary pre-analysis.

use std::collections::VecDeque;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{inverse, ones, row_sums, stationary_vector, Mat, Row};

/// Absolute tolerance for every "rows sum to zero / one" check.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Discrete phase-type batch-size law `g(n) = alpha P^(n-1) (I - P) e`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhBatch {
    alpha: Row,
    p: Mat,
}

impl PhBatch {
    pub fn new(alpha: Row, p: Mat) -> Result<Self> {
        if p.nrows() != p.ncols() || alpha.len() != p.nrows() || alpha.is_empty() {
            return Err(Error::Dimension(format!(
                "batch alpha has {} phases but P is {}x{}",
                alpha.len(),
                p.nrows(),
                p.ncols()
            )));
        }
        Ok(Self { alpha, p })
    }

    /// Every batch has exactly one customer.
    pub fn single() -> Self {
        Self {
            alpha: Row::from_element(1, 1.0),
            p: Mat::zeros(1, 1),
        }
    }

    /// Geometric batch sizes `(1 - q) q^(n-1)`, mean `1 / (1 - q)`.
    pub fn geometric(q: f64) -> Self {
        Self {
            alpha: Row::from_element(1, 1.0),
            p: Mat::from_element(1, 1, q),
        }
    }

    pub fn alpha(&self) -> &Row {
        &self.alpha
    }

    pub fn p(&self) -> &Mat {
        &self.p
    }

    pub fn phases(&self) -> usize {
        self.alpha.len()
    }

    /// True when `P = 0`, i.e. the batch size is identically one.
    pub fn is_single(&self) -> bool {
        self.p.iter().all(|&x| x == 0.0)
    }

    /// Exit vector `(I - P) e`.
    pub fn exit(&self) -> DVector<f64> {
        ones(self.phases()) - row_sums(&self.p)
    }

    /// `g(n)`; `n` must be at least one.
    pub fn pmf(&self, n: usize) -> f64 {
        assert!(n >= 1, "batch sizes start at one");
        let mut row = self.alpha.clone();
        for _ in 1..n {
            row = &row * &self.p;
        }
        (row * self.exit())[0]
    }

    /// `g(1), ..., g(n_max)` without repeated powers.
    pub fn pmf_table(&self, n_max: usize) -> Vec<f64> {
        let exit = self.exit();
        let mut row = self.alpha.clone();
        let mut out = Vec::with_capacity(n_max);
        for _ in 0..n_max {
            out.push((&row * &exit)[0].max(0.0));
            row = &row * &self.p;
        }
        out
    }

    /// `Pr[G > n] = alpha P^n e`.
    pub fn tail(&self, n: usize) -> f64 {
        let mut row = self.alpha.clone();
        for _ in 0..n {
            row = &row * &self.p;
        }
        row.sum()
    }

    fn fundamental(&self) -> Result<Mat> {
        let n = self.phases();
        inverse(&(Mat::identity(n, n) - &self.p), "(I - P)^-1")
    }

    /// `E[G] = alpha (I - P)^-1 e`.
    pub fn mean(&self) -> f64 {
        let n = self.fundamental().expect("validated batch law");
        (&self.alpha * n).sum()
    }

    /// `E[G(G-1)] = 2 alpha (I - P)^-2 P e`.
    pub fn second_factorial_moment(&self) -> f64 {
        let n = self.fundamental().expect("validated batch law");
        2.0 * (&self.alpha * &n * &n * &self.p).sum()
    }

    /// Probability generating function `sum_n z^n g(n)` for `0 <= z <= 1`.
    pub fn pgf(&self, z: f64) -> Result<f64> {
        let n = self.phases();
        let r = inverse(&(Mat::identity(n, n) - &self.p * z), "(I - zP)^-1")?;
        Ok(z * (&self.alpha * r * self.exit())[0])
    }

    fn check(&self, class: usize) -> Result<()> {
        let bad = |detail: String| Error::SubstochasticViolation { class, detail };
        if self.alpha.iter().any(|&a| a < 0.0 || !a.is_finite()) {
            return Err(bad("alpha has a negative entry".into()));
        }
        if (self.alpha.sum() - 1.0).abs() > ROW_SUM_TOL {
            return Err(bad(format!("alpha sums to {}", self.alpha.sum())));
        }
        if let Some((idx, _)) = self.p.iter().enumerate().find(|(_, &x)| x < 0.0 || !x.is_finite()) {
            let n = self.phases();
            return Err(bad(format!("P[{}][{}] is negative", idx % n, idx / n)));
        }
        let sums = row_sums(&self.p);
        if let Some(i) = sums.iter().position(|&s| s > 1.0 + ROW_SUM_TOL) {
            return Err(bad(format!("row {i} of P sums to {}", sums[i])));
        }
        // Spectral radius < 1 iff every phase reaches a row with an exit.
        let n = self.phases();
        let leaky: Vec<bool> = sums.iter().map(|&s| 1.0 - s > 1e-14).collect();
        let mut reaches = leaky.clone();
        let mut changed = true;
        while changed {
            changed = false;
            for i in 0..n {
                if !reaches[i] && (0..n).any(|j| self.p[(i, j)] > 0.0 && reaches[j]) {
                    reaches[i] = true;
                    changed = true;
                }
            }
        }
        if let Some(i) = reaches.iter().position(|r| !r) {
            return Err(bad(format!(
                "phase {i} can never leave P (spectral radius 1, batch never terminates)"
            )));
        }
        Ok(())
    }
}

/// Batch-size law of one class.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchLaw {
    /// `D_k(n) = g_k(n) D_k`: the only form the joint pipeline accepts.
    PhaseType(PhBatch),
    /// Explicit finite sequence `D_k(1), D_k(2), ...`; workload analysis only.
    Sequence(Vec<Mat>),
}

/// One arrival stream: `D_k` (total transition rates) and its batch law.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalClass {
    rate: Mat,
    batch: BatchLaw,
}

impl ArrivalClass {
    pub fn phase_type(rate: Mat, batch: PhBatch) -> Self {
        Self {
            rate,
            batch: BatchLaw::PhaseType(batch),
        }
    }

    pub fn sequence(mats: Vec<Mat>) -> Result<Self> {
        let first = mats
            .first()
            .ok_or_else(|| Error::Dimension("empty D_k(n) sequence".into()))?;
        let mut rate = Mat::zeros(first.nrows(), first.ncols());
        for m in &mats {
            if m.shape() != first.shape() {
                return Err(Error::Dimension("D_k(n) matrices differ in shape".into()));
            }
            rate += m;
        }
        Ok(Self {
            rate,
            batch: BatchLaw::Sequence(mats),
        })
    }

    /// `D_k = sum_n D_k(n)`.
    pub fn rate(&self) -> &Mat {
        &self.rate
    }

    pub fn batch(&self) -> &BatchLaw {
        &self.batch
    }

    pub fn ph_batch(&self) -> Option<&PhBatch> {
        match &self.batch {
            BatchLaw::PhaseType(b) => Some(b),
            BatchLaw::Sequence(_) => None,
        }
    }

    /// `D_k(n)`.
    pub fn batch_matrix(&self, n: usize) -> Mat {
        match &self.batch {
            BatchLaw::PhaseType(b) => &self.rate * b.pmf(n),
            BatchLaw::Sequence(m) => m
                .get(n.wrapping_sub(1))
                .cloned()
                .unwrap_or_else(|| Mat::zeros(self.rate.nrows(), self.rate.ncols())),
        }
    }

    /// `D_k*(z) = sum_n z^n D_k(n)` for `0 <= z <= 1`.
    pub fn pgf_matrix(&self, z: f64) -> Result<Mat> {
        match &self.batch {
            BatchLaw::PhaseType(b) => Ok(&self.rate * b.pgf(z)?),
            BatchLaw::Sequence(m) => {
                let mut acc = Mat::zeros(self.rate.nrows(), self.rate.ncols());
                let mut zn = 1.0;
                for d in m {
                    zn *= z;
                    acc += d * zn;
                }
                Ok(acc)
            }
        }
    }

    /// `sum_n n D_k(n)`.
    pub fn first_moment_matrix(&self) -> Mat {
        match &self.batch {
            BatchLaw::PhaseType(b) => &self.rate * b.mean(),
            BatchLaw::Sequence(m) => m
                .iter()
                .enumerate()
                .fold(Mat::zeros(self.rate.nrows(), self.rate.ncols()), |acc, (i, d)| {
                    acc + d * (i as f64 + 1.0)
                }),
        }
    }

    /// `sum_n n (n - 1) D_k(n)`.
    pub fn second_factorial_matrix(&self) -> Mat {
        match &self.batch {
            BatchLaw::PhaseType(b) => &self.rate * b.second_factorial_moment(),
            BatchLaw::Sequence(m) => m
                .iter()
                .enumerate()
                .fold(Mat::zeros(self.rate.nrows(), self.rate.ncols()), |acc, (i, d)| {
                    let n = i as f64 + 1.0;
                    acc + d * (n * (n - 1.0))
                }),
        }
    }
}

/// The batch marked MAP `(C, D_1(n), ..., D_K(n))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalModel {
    c: Mat,
    classes: Vec<ArrivalClass>,
}

impl ArrivalModel {
    pub fn new(c: Mat, classes: Vec<ArrivalClass>) -> Result<Self> {
        let m = c.nrows();
        if m == 0 || c.ncols() != m {
            return Err(Error::Dimension(format!("C is {}x{}", c.nrows(), c.ncols())));
        }
        if classes.is_empty() {
            return Err(Error::Dimension("model has no arrival classes".into()));
        }
        for (k, cl) in classes.iter().enumerate() {
            if cl.rate.shape() != (m, m) {
                return Err(Error::Dimension(format!(
                    "D_{} is {}x{}, expected {m}x{m}",
                    k + 1,
                    cl.rate.nrows(),
                    cl.rate.ncols()
                )));
            }
        }
        Ok(Self { c, classes })
    }

    pub fn env_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn c(&self) -> &Mat {
        &self.c
    }

    pub fn classes(&self) -> &[ArrivalClass] {
        &self.classes
    }

    pub fn class(&self, k: usize) -> &ArrivalClass {
        &self.classes[k]
    }

    /// `D = sum_k D_k`.
    pub fn d_total(&self) -> Mat {
        self.classes
            .iter()
            .fold(Mat::zeros(self.env_dim(), self.env_dim()), |acc, cl| acc + &cl.rate)
    }

    /// Generator `C + D` of the underlying chain.
    pub fn generator(&self) -> Mat {
        &self.c + self.d_total()
    }

    /// Uniformization rate `theta = max_i |C_ii|`.
    pub fn theta(&self) -> f64 {
        self.c.diagonal().iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
    }

    /// The phase-type batch law of every class, or the first class that
    /// does not have one.
    pub fn ph_batches(&self) -> Result<Vec<&PhBatch>> {
        self.classes
            .iter()
            .enumerate()
            .map(|(k, c)| c.ph_batch().ok_or(Error::AssumptionViolation { class: k + 1 }))
            .collect()
    }
}

/// Service-time law of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum ServiceLaw {
    Deterministic { value: f64 },
    Exponential { rate: f64 },
    Erlang { shape: u32, rate: f64 },
    HyperExponential { weights: Vec<f64>, rates: Vec<f64> },
    DiscretePointMixture { points: Vec<f64>, weights: Vec<f64> },
}

impl ServiceLaw {
    pub fn mean(&self) -> f64 {
        match self {
            Self::Deterministic { value } => *value,
            Self::Exponential { rate } => 1.0 / rate,
            Self::Erlang { shape, rate } => f64::from(*shape) / rate,
            Self::HyperExponential { weights, rates } => {
                weights.iter().zip(rates).map(|(w, r)| w / r).sum()
            }
            Self::DiscretePointMixture { points, weights } => {
                weights.iter().zip(points).map(|(w, y)| w * y).sum()
            }
        }
    }

    pub fn second_moment(&self) -> f64 {
        match self {
            Self::Deterministic { value } => value * value,
            Self::Exponential { rate } => 2.0 / (rate * rate),
            Self::Erlang { shape, rate } => {
                let r = f64::from(*shape);
                r * (r + 1.0) / (rate * rate)
            }
            Self::HyperExponential { weights, rates } => {
                weights.iter().zip(rates).map(|(w, r)| 2.0 * w / (r * r)).sum()
            }
            Self::DiscretePointMixture { points, weights } => {
                weights.iter().zip(points).map(|(w, y)| w * y * y).sum()
            }
        }
    }

    /// Laplace-Stieltjes transform `H*(s)` for `s >= 0`.
    pub fn lst(&self, s: f64) -> f64 {
        match self {
            Self::Deterministic { value } => (-s * value).exp(),
            Self::Exponential { rate } => rate / (rate + s),
            Self::Erlang { shape, rate } => (rate / (rate + s)).powi(*shape as i32),
            Self::HyperExponential { weights, rates } => {
                weights.iter().zip(rates).map(|(w, r)| w * r / (r + s)).sum()
            }
            Self::DiscretePointMixture { points, weights } => {
                weights.iter().zip(points).map(|(w, y)| w * (-s * y).exp()).sum()
            }
        }
    }

    fn check(&self, class: usize) -> Result<()> {
        let bad = |detail: &str| {
            Err(Error::InvalidService {
                class,
                detail: detail.to_string(),
            })
        };
        let positive = |x: f64| x > 0.0 && x.is_finite();
        let weights_ok = |w: &[f64]| {
            !w.is_empty()
                && w.iter().all(|&x| x >= 0.0 && x.is_finite())
                && (w.iter().sum::<f64>() - 1.0).abs() <= ROW_SUM_TOL
        };
        match self {
            Self::Deterministic { value } if !positive(*value) => bad("point must be positive"),
            Self::Exponential { rate } if !positive(*rate) => bad("rate must be positive"),
            Self::Erlang { shape, rate } if *shape == 0 || !positive(*rate) => {
                bad("shape must be >= 1 and rate positive")
            }
            Self::HyperExponential { weights, rates } => {
                if weights.len() != rates.len() {
                    bad("weights and rates differ in length")
                } else if !weights_ok(weights) {
                    bad("weights must be nonnegative and sum to 1")
                } else if !rates.iter().all(|&r| positive(r)) {
                    bad("rates must be positive")
                } else {
                    Ok(())
                }
            }
            Self::DiscretePointMixture { points, weights } => {
                if weights.len() != points.len() {
                    bad("weights and points differ in length")
                } else if !weights_ok(weights) {
                    bad("weights must be nonnegative and sum to 1")
                } else if !points.iter().all(|&y| positive(y)) {
                    bad("points must be positive")
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// Outcome of one structural check.
#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Per-invariant pass/fail list produced by [`validate`].
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub checks: Vec<CheckOutcome>,
    errors: Vec<Error>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn errors(&self) -> &[Error] {
        &self.errors
    }

    pub fn into_result(self) -> Result<()> {
        match self.errors.into_iter().next() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    fn record(&mut self, name: &'static str, outcome: Result<()>) {
        let (passed, detail) = match outcome {
            Ok(()) => (true, String::new()),
            Err(e) => {
                let d = e.to_string();
                self.errors.push(e);
                (false, d)
            }
        };
        self.checks.push(CheckOutcome {
            name,
            passed,
            detail,
        });
    }
}

fn check_rates(model: &ArrivalModel) -> Result<()> {
    let c = model.c();
    let m = model.env_dim();
    for i in 0..m {
        for j in 0..m {
            let x = c[(i, j)];
            let ok = if i == j { x < 0.0 } else { x >= 0.0 };
            if !ok || !x.is_finite() {
                return Err(Error::NegativeRate {
                    matrix: if i == j { "diag(C) (must be < 0)".into() } else { "C".into() },
                    row: i,
                    col: j,
                    value: x,
                });
            }
        }
    }
    for (k, cl) in model.classes().iter().enumerate() {
        let mats: Vec<(String, &Mat)> = match cl.batch() {
            BatchLaw::PhaseType(_) => vec![(format!("D_{}", k + 1), cl.rate())],
            BatchLaw::Sequence(seq) => seq
                .iter()
                .enumerate()
                .map(|(n, d)| (format!("D_{}({})", k + 1, n + 1), d))
                .collect(),
        };
        for (name, d) in mats {
            for i in 0..m {
                for j in 0..m {
                    if d[(i, j)] < 0.0 || !d[(i, j)].is_finite() {
                        return Err(Error::NegativeRate {
                            matrix: name,
                            row: i,
                            col: j,
                            value: d[(i, j)],
                        });
                    }
                }
            }
        }
    }
    Ok(())
}

fn check_streams(model: &ArrivalModel) -> Result<()> {
    for (k, cl) in model.classes().iter().enumerate() {
        if !cl.rate().iter().any(|&x| x > 0.0) {
            return Err(Error::EmptyStream { class: k + 1 });
        }
    }
    Ok(())
}

fn check_row_sums(model: &ArrivalModel) -> Result<()> {
    let sums = row_sums(&model.generator());
    match sums.iter().position(|s| s.abs() > ROW_SUM_TOL) {
        Some(row) => Err(Error::GeneratorRowSum { row, sum: sums[row] }),
        None => Ok(()),
    }
}

fn reachable(adj: &Mat, start: usize, transpose: bool) -> Vec<bool> {
    let n = adj.nrows();
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    while let Some(i) = queue.pop_front() {
        for j in 0..n {
            let w = if transpose { adj[(j, i)] } else { adj[(i, j)] };
            if w > 0.0 && !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    seen
}

fn check_irreducible(model: &ArrivalModel) -> Result<()> {
    let mut g = model.generator();
    g.fill_diagonal(0.0);
    if let Some(to) = reachable(&g, 0, false).iter().position(|r| !r) {
        return Err(Error::ReducibleChain { from: 0, to });
    }
    if let Some(from) = reachable(&g, 0, true).iter().position(|r| !r) {
        return Err(Error::ReducibleChain { from, to: 0 });
    }
    Ok(())
}

fn check_batches(model: &ArrivalModel) -> Result<()> {
    for (k, cl) in model.classes().iter().enumerate() {
        if let BatchLaw::PhaseType(b) = cl.batch() {
            b.check(k + 1)?;
        }
    }
    Ok(())
}

fn check_services(model: &ArrivalModel, services: &[ServiceLaw]) -> Result<()> {
    if services.len() != model.num_classes() {
        return Err(Error::Dimension(format!(
            "{} service laws for {} classes",
            services.len(),
            model.num_classes()
        )));
    }
    for (k, s) in services.iter().enumerate() {
        s.check(k + 1)?;
    }
    Ok(())
}

/// Runs every structural check on the model.
pub fn validate(model: &ArrivalModel, services: &[ServiceLaw]) -> ValidationReport {
    let mut report = ValidationReport::default();
    report.record("nonnegative rates", check_rates(model));
    report.record("nonempty arrival streams", check_streams(model));
    report.record("generator row sums", check_row_sums(model));
    report.record("irreducible environment", check_irreducible(model));
    report.record("phase-type batch laws", check_batches(model));
    report.record("service laws", check_services(model, services));
    report
}

/// Stationary quantities of the arrival process.
#[derive(Debug, Clone, Serialize)]
pub struct StationarySummary {
    pub pi: Vec<f64>,
    /// Customer arrival rate per class.
    pub lambda: Vec<f64>,
    /// Batch arrival rate per class, `pi D_k e`.
    pub lambda_batch: Vec<f64>,
    pub mean_service: Vec<f64>,
    pub rho_k: Vec<f64>,
    pub rho: f64,
    pub theta: f64,
}

impl StationarySummary {
    pub fn pi_row(&self) -> Row {
        Row::from_row_slice(&self.pi)
    }
}

/// Computes pi, the rates, the utilizations and theta; fails when rho >= 1.
pub fn stationary_summary(
    model: &ArrivalModel,
    services: &[ServiceLaw],
) -> Result<StationarySummary> {
    let pi = stationary_vector(&model.generator(), "stationary vector of C + D")?;
    let e = ones(model.env_dim());
    let mut lambda = Vec::new();
    let mut lambda_batch = Vec::new();
    for cl in model.classes() {
        lambda_batch.push((&pi * cl.rate() * &e)[0]);
        lambda.push((&pi * cl.first_moment_matrix() * &e)[0]);
    }
    let mean_service: Vec<f64> = services.iter().map(ServiceLaw::mean).collect();
    let rho_k: Vec<f64> = lambda.iter().zip(&mean_service).map(|(l, h)| l * h).collect();
    let rho: f64 = rho_k.iter().sum();
    if rho >= 1.0 - ROW_SUM_TOL {
        return Err(Error::Unstable { rho });
    }
    Ok(StationarySummary {
        pi: pi.iter().copied().collect(),
        lambda,
        lambda_batch,
        mean_service,
        rho_k,
        rho,
        theta: model.theta(),
    })
}

/// `g(n)` of a phase-type batch law.
pub fn batch_pmf(batch: &PhBatch, n: usize) -> f64 {
    batch.pmf(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::mat_from_rows;

    fn two_state(a: f64, b: f64) -> ArrivalModel {
        // Arrivals only in state 0 at rate 0.05, environment a/b.
        let c = mat_from_rows(&[vec![-a - 0.05, a], vec![b, -b]]).unwrap();
        let d = mat_from_rows(&[vec![0.05, 0.0], vec![0.0, 0.0]]).unwrap();
        ArrivalModel::new(c, vec![ArrivalClass::phase_type(d, PhBatch::single())]).unwrap()
    }

    #[test]
    fn pi_closed_form_two_state() {
        let model = two_state(0.1, 0.2);
        let s = stationary_summary(&model, &[ServiceLaw::Deterministic { value: 1.0 }]).unwrap();
        assert!((s.pi[0] - 2.0 / 3.0).abs() < 1e-13);
        assert!((s.pi[1] - 1.0 / 3.0).abs() < 1e-13);
    }

    #[test]
    fn pmf_examples() {
        assert!((PhBatch::geometric(0.5).pmf(3) - 0.125).abs() < 1e-15);
        assert_eq!(PhBatch::single().pmf(1), 1.0);
        assert_eq!(PhBatch::single().pmf(2), 0.0);
        let b = PhBatch::new(
            Row::from_row_slice(&[0.5, 0.5]),
            mat_from_rows(&[vec![0.0, 0.5], vec![0.0, 0.0]]).unwrap(),
        )
        .unwrap();
        // Size 2 only via phase 0 -> phase 1 -> exit: 0.5 * 0.5 * 1.
        assert!((batch_pmf(&b, 2) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn tail_is_exact_residual() {
        let b = PhBatch::new(
            Row::from_row_slice(&[0.3, 0.7]),
            mat_from_rows(&[vec![0.2, 0.5], vec![0.4, 0.1]]).unwrap(),
        )
        .unwrap();
        let mut acc = 0.0;
        for n in 1..=40 {
            acc += b.pmf(n);
            assert!((1.0 - acc - b.tail(n)).abs() < 1e-14);
        }
    }

    #[test]
    fn empty_stream_rejected() {
        let c = mat_from_rows(&[vec![-1.0, 1.0], vec![1.0, -1.0]]).unwrap();
        let model = ArrivalModel::new(
            c,
            vec![ArrivalClass::phase_type(Mat::zeros(2, 2), PhBatch::single())],
        )
        .unwrap();
        let report = validate(&model, &[ServiceLaw::Deterministic { value: 1.0 }]);
        assert!(!report.passed());
        assert!(report
            .errors()
            .iter()
            .any(|e| matches!(e, Error::EmptyStream { class: 1 })));
    }

    #[test]
    fn nonterminating_batch_rejected() {
        let c = mat_from_rows(&[vec![-1.0]]).unwrap();
        let d = mat_from_rows(&[vec![1.0]]).unwrap();
        let batch = PhBatch::new(Row::from_element(1, 1.0), Mat::from_element(1, 1, 1.0)).unwrap();
        let model = ArrivalModel::new(c, vec![ArrivalClass::phase_type(d, batch)]).unwrap();
        let err = validate(&model, &[ServiceLaw::Exponential { rate: 3.0 }])
            .into_result()
            .unwrap_err();
        assert!(matches!(err, Error::SubstochasticViolation { class: 1, .. }));
    }

    #[test]
    fn row_sum_and_reducibility_rejected() {
        let c = mat_from_rows(&[vec![-1.0, 0.5], vec![0.0, -1.0]]).unwrap();
        let d = mat_from_rows(&[vec![0.5, 0.0], vec![0.0, 1.0]]).unwrap();
        let model = ArrivalModel::new(c, vec![ArrivalClass::phase_type(d, PhBatch::single())]).unwrap();
        let report = validate(&model, &[ServiceLaw::Exponential { rate: 3.0 }]);
        assert!(report
            .errors()
            .iter()
            .any(|e| matches!(e, Error::ReducibleChain { .. })));

        let c = mat_from_rows(&[vec![-1.0, 0.4], vec![0.5, -1.0]]).unwrap();
        let d = mat_from_rows(&[vec![0.5, 0.0], vec![0.0, 0.5]]).unwrap();
        let model = ArrivalModel::new(c, vec![ArrivalClass::phase_type(d, PhBatch::single())]).unwrap();
        let err = validate(&model, &[ServiceLaw::Exponential { rate: 3.0 }])
            .into_result()
            .unwrap_err();
        assert!(matches!(err, Error::GeneratorRowSum { row: 0, .. }));
    }

    #[test]
    fn unstable_reported() {
        let c = mat_from_rows(&[vec![-1.0]]).unwrap();
        let d = mat_from_rows(&[vec![1.0]]).unwrap();
        let model = ArrivalModel::new(c, vec![ArrivalClass::phase_type(d, PhBatch::single())]).unwrap();
        let err = stationary_summary(&model, &[ServiceLaw::Deterministic { value: 1.5 }]).unwrap_err();
        assert!(matches!(err, Error::Unstable { rho } if (rho - 1.5).abs() < 1e-12));
    }

    #[test]
    fn service_lst_and_moments() {
        let laws = [
            ServiceLaw::Deterministic { value: 2.0 },
            ServiceLaw::Exponential { rate: 0.5 },
            ServiceLaw::Erlang { shape: 3, rate: 1.5 },
            ServiceLaw::HyperExponential {
                weights: vec![0.3, 0.7],
                rates: vec![1.0, 4.0],
            },
            ServiceLaw::DiscretePointMixture {
                points: vec![1.0, 4.0],
                weights: vec![0.5, 0.5],
            },
        ];
        for law in &laws {
            assert!((law.lst(0.0) - 1.0).abs() < 1e-15);
            let h = 1e-4;
            let d1 = (law.lst(h) - law.lst(-h)) / (2.0 * h);
            let d2 = (law.lst(h) - 2.0 * law.lst(0.0) + law.lst(-h)) / (h * h);
            assert!((-d1 - law.mean()).abs() < 1e-6 * law.mean().max(1.0));
            assert!((d2 - law.second_moment()).abs() < 1e-4 * law.second_moment().max(1.0));
            assert!(law.lst(3.0) > 0.0 && law.lst(3.0) < 1.0);
        }
    }
}
