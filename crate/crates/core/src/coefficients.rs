//! Uniformized transform coefficients.
//!
//! `gamma_k^(m)(theta)` is the probability of exactly `m` events of a
//! Poisson process with rate `theta` during one class-`k` service time.
//! `d_k^(m)(theta)` does the same for a whole batch of services, split by
//! the batch-phase in which the batch ends; `D^(m)(theta)` weights the
//! arrival matrices with it.

use crate::error::{Error, Result};
use crate::linalg::{inverse, ones, Mat, Row};
use crate::model::{ArrivalModel, BatchLaw, PhBatch, ServiceLaw};

const LOG_DOMAIN_THRESHOLD: f64 = 700.0;

/// Compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        let y = x - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// Poisson(mean) masses by multiplicative recurrence.
#[derive(Debug, Clone)]
struct PoissonTerms {
    mean: f64,
    next: usize,
    // Either the last mass or, in log domain, its logarithm.
    last: f64,
    log_domain: bool,
}

impl PoissonTerms {
    fn new(mean: f64) -> Self {
        Self {
            mean,
            next: 0,
            last: 0.0,
            log_domain: mean > LOG_DOMAIN_THRESHOLD,
        }
    }

    fn next_mass(&mut self) -> f64 {
        let m = self.next;
        self.next += 1;
        if self.log_domain {
            self.last = if m == 0 {
                -self.mean
            } else {
                self.last + self.mean.ln() - (m as f64).ln()
            };
            self.last.exp()
        } else {
            self.last = if m == 0 {
                (-self.mean).exp()
            } else {
                self.last * self.mean / m as f64
            };
            self.last
        }
    }
}

/// Negative-binomial masses `C(m + r - 1, m) q^r (1 - q)^m`; `r = 1` is
/// the geometric law of an exponential service.
#[derive(Debug, Clone)]
struct NegBinTerms {
    q: f64,
    shape: f64,
    next: usize,
    last: f64,
}

impl NegBinTerms {
    fn new(rate: f64, shape: u32, theta: f64) -> Self {
        Self {
            q: rate / (rate + theta),
            shape: f64::from(shape),
            next: 0,
            last: 0.0,
        }
    }

    fn next_mass(&mut self) -> f64 {
        let m = self.next;
        self.next += 1;
        self.last = if m == 0 {
            self.q.powf(self.shape)
        } else {
            let mf = m as f64;
            self.last * (mf - 1.0 + self.shape) / mf * (1.0 - self.q)
        };
        self.last
    }
}

#[derive(Debug, Clone)]
enum Branch {
    Poisson(PoissonTerms),
    NegBin(NegBinTerms),
}

impl Branch {
    fn next_mass(&mut self) -> f64 {
        match self {
            Branch::Poisson(p) => p.next_mass(),
            Branch::NegBin(n) => n.next_mass(),
        }
    }
}

/// `gamma^(m)(theta)` for one service law, produced incrementally.
#[derive(Debug, Clone)]
pub struct GammaSeries {
    branches: Vec<(f64, Branch)>,
    values: Vec<f64>,
    sum: KahanSum,
}

impl GammaSeries {
    pub fn new(service: &ServiceLaw, theta: f64) -> Self {
        let branches = match service {
            ServiceLaw::Deterministic { value } => {
                vec![(1.0, Branch::Poisson(PoissonTerms::new(theta * value)))]
            }
            ServiceLaw::Exponential { rate } => {
                vec![(1.0, Branch::NegBin(NegBinTerms::new(*rate, 1, theta)))]
            }
            ServiceLaw::Erlang { shape, rate } => {
                vec![(1.0, Branch::NegBin(NegBinTerms::new(*rate, *shape, theta)))]
            }
            ServiceLaw::HyperExponential { weights, rates } => weights
                .iter()
                .zip(rates)
                .map(|(&w, &r)| (w, Branch::NegBin(NegBinTerms::new(r, 1, theta))))
                .collect(),
            ServiceLaw::DiscretePointMixture { points, weights } => weights
                .iter()
                .zip(points)
                .map(|(&w, &y)| (w, Branch::Poisson(PoissonTerms::new(theta * y))))
                .collect(),
        };
        Self {
            branches,
            values: Vec::new(),
            sum: KahanSum::default(),
        }
    }

    /// Series with at least `m_cap + 1` terms.
    pub fn with_terms(service: &ServiceLaw, theta: f64, m_cap: usize) -> Self {
        let mut s = Self::new(service, theta);
        s.ensure(m_cap);
        s
    }

    /// Makes sure terms `0..=m` exist.
    pub fn ensure(&mut self, m: usize) {
        while self.values.len() <= m {
            let v: f64 = self
                .branches
                .iter_mut()
                .map(|(w, b)| *w * b.next_mass())
                .sum();
            self.sum.add(v);
            self.values.push(v);
        }
    }

    pub fn get(&mut self, m: usize) -> f64 {
        self.ensure(m);
        self.values[m]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `1 - sum of the computed terms`.
    pub fn residual(&self) -> f64 {
        1.0 - self.sum.value()
    }
}

/// `d^(m)(theta)` for a phase-type batch law.
#[derive(Debug, Clone)]
pub struct BatchSeries {
    // alpha (I - P) R and P R with R = [I - gamma^(0) P]^-1.
    head: Row,
    tail: Mat,
    values: Vec<Row>,
    masses: Vec<f64>,
}

impl BatchSeries {
    pub fn new(batch: &PhBatch, gamma0: f64) -> Result<Self> {
        let n = batch.phases();
        let r = inverse(
            &(Mat::identity(n, n) - batch.p() * gamma0),
            "[I - gamma^(0) P]^-1",
        )?;
        let exit_row = batch.alpha() * (Mat::identity(n, n) - batch.p());
        Ok(Self {
            head: exit_row * &r,
            tail: batch.p() * r,
            values: Vec::new(),
            masses: Vec::new(),
        })
    }

    /// Extends to terms `0..=m`; `gamma` must already hold them.
    ///
    /// Uses `d^(m) = gamma^(m) alpha (I-P) R + [sum_{l=1..m} gamma^(l) d^(m-l)] P R`,
    /// which is the coefficient identity of the generating function
    /// without dividing by `gamma^(0)`.
    pub fn ensure(&mut self, gamma: &[f64], m: usize) {
        while self.values.len() <= m {
            let j = self.values.len();
            let mut d = &self.head * gamma[j];
            if j > 0 && self.tail.iter().any(|&x| x != 0.0) {
                let mut acc = Row::zeros(self.head.len());
                for l in 1..=j {
                    acc += &self.values[j - l] * gamma[l];
                }
                d += acc * &self.tail;
            }
            self.masses.push(d.sum());
            self.values.push(d);
        }
    }

    pub fn values(&self) -> &[Row] {
        &self.values
    }

    /// `d^(m)(theta) e`.
    pub fn masses(&self) -> &[f64] {
        &self.masses
    }
}

/// Masses `Pr[m events during a batch of n services]` for an explicit
/// per-size sequence: convolution powers of the gamma series.
#[derive(Debug, Clone)]
struct SequenceSeries {
    sizes: usize,
    masses: Vec<Vec<f64>>,
}

impl SequenceSeries {
    fn new(sizes: usize) -> Self {
        Self {
            sizes,
            masses: vec![Vec::new(); sizes],
        }
    }

    fn ensure(&mut self, gamma: &[f64], m: usize) {
        let have = self.masses[0].len();
        if have > m {
            return;
        }
        // Recomputed from scratch; sequences are only used for small models.
        let len = m + 1;
        let mut power = gamma[..len].to_vec();
        self.masses[0] = power.clone();
        for n in 1..self.sizes {
            let mut next = vec![0.0; len];
            for (i, &a) in power.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (j, &b) in gamma[..len - i].iter().enumerate() {
                    next[i + j] += a * b;
                }
            }
            power = next;
            self.masses[n] = power.clone();
        }
    }
}

#[derive(Debug, Clone)]
enum ClassSeries {
    PhaseType(BatchSeries),
    Sequence(SequenceSeries),
}

/// Everything indexed by the uniformization step `m`: per-class gamma
/// and d series plus `D^(m)(theta)`.
#[derive(Debug, Clone)]
pub struct Coefficients {
    theta: f64,
    rates: Vec<Mat>,
    seq_mats: Vec<Option<Vec<Mat>>>,
    gammas: Vec<GammaSeries>,
    classes: Vec<ClassSeries>,
    d_mats: Vec<Mat>,
    d_row_mass: Vec<f64>,
}

impl Coefficients {
    pub fn new(model: &ArrivalModel, services: &[ServiceLaw]) -> Result<Self> {
        let theta = model.theta();
        let mut gammas = Vec::new();
        let mut classes = Vec::new();
        let mut seq_mats = Vec::new();
        for (cl, law) in model.classes().iter().zip(services) {
            let mut g = GammaSeries::new(law, theta);
            g.ensure(0);
            match cl.batch() {
                BatchLaw::PhaseType(b) => {
                    classes.push(ClassSeries::PhaseType(BatchSeries::new(b, g.values()[0])?));
                    seq_mats.push(None);
                }
                BatchLaw::Sequence(mats) => {
                    classes.push(ClassSeries::Sequence(SequenceSeries::new(mats.len())));
                    seq_mats.push(Some(mats.clone()));
                }
            }
            gammas.push(g);
        }
        Ok(Self {
            theta,
            rates: model.classes().iter().map(|c| c.rate().clone()).collect(),
            seq_mats,
            gammas,
            classes,
            d_mats: Vec::new(),
            d_row_mass: Vec::new(),
        })
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn num_classes(&self) -> usize {
        self.gammas.len()
    }

    /// Makes sure every series holds terms `0..=m`.
    pub fn ensure(&mut self, m: usize) {
        if self.d_mats.len() > m {
            return;
        }
        for (g, c) in self.gammas.iter_mut().zip(&mut self.classes) {
            g.ensure(m);
            match c {
                ClassSeries::PhaseType(b) => b.ensure(g.values(), m),
                ClassSeries::Sequence(s) => s.ensure(g.values(), m),
            }
        }
        let dim = self.rates[0].nrows();
        while self.d_mats.len() <= m {
            let j = self.d_mats.len();
            let mut acc = Mat::zeros(dim, dim);
            for (k, c) in self.classes.iter().enumerate() {
                match c {
                    ClassSeries::PhaseType(b) => acc += &self.rates[k] * b.masses()[j],
                    ClassSeries::Sequence(s) => {
                        let mats = self.seq_mats[k].as_ref().expect("sequence class");
                        for (n, d) in mats.iter().enumerate() {
                            acc += d * s.masses[n][j];
                        }
                    }
                }
            }
            self.d_row_mass
                .push(acc.row_iter().map(|r| r.sum()).fold(0.0, f64::max));
            self.d_mats.push(acc);
        }
    }

    pub fn gamma(&mut self, k: usize, m: usize) -> f64 {
        self.ensure(m);
        self.gammas[k].values()[m]
    }

    pub fn gamma_series(&self, k: usize) -> &GammaSeries {
        &self.gammas[k]
    }

    /// `d_k^(m)(theta)`; `None` for a class given by a raw sequence.
    pub fn d_vector(&mut self, k: usize, m: usize) -> Option<Row> {
        self.ensure(m);
        match &self.classes[k] {
            ClassSeries::PhaseType(b) => Some(b.values()[m].clone()),
            ClassSeries::Sequence(_) => None,
        }
    }

    /// `D^(m)(theta)`.
    pub fn d_matrix(&mut self, m: usize) -> &Mat {
        self.ensure(m);
        &self.d_mats[m]
    }

    pub fn d_matrices(&self) -> &[Mat] {
        &self.d_mats
    }

    /// Terms of `D^(m)(theta)` until the row sums of `sum_m D^(m)` come
    /// within `theta * tol` of `D e`; returns the number of terms.
    pub fn truncate_d(&mut self, tol: f64, limit: usize) -> Result<usize> {
        let dim = self.rates[0].nrows();
        let target = self
            .rates
            .iter()
            .fold(Mat::zeros(dim, dim), |acc, d| acc + d)
            .row_iter()
            .map(|r| r.sum())
            .collect::<Vec<_>>();
        let mut sums = vec![KahanSum::default(); dim];
        let mut m = 0;
        loop {
            self.ensure(m);
            let d = &self.d_mats[m];
            for (i, s) in sums.iter_mut().enumerate() {
                s.add(d.row(i).sum());
            }
            let deficit = sums
                .iter()
                .zip(&target)
                .map(|(s, t)| (t - s.value()) / self.theta)
                .fold(f64::NEG_INFINITY, f64::max);
            // The last clause stops on rounding-level stagnation of the sum.
            if deficit < tol
                || (deficit < 1e3 * tol && self.d_row_mass[m] / self.theta < 1e-3 * tol)
            {
                return Ok(m + 1);
            }
            m += 1;
            if m >= limit {
                return Err(Error::MassDeficit {
                    what: "D^(m)(theta) series".into(),
                    limit,
                });
            }
        }
    }
}

/// `gamma^(0..=m_cap)(theta)` of one service law.
pub fn gamma_series(service: &ServiceLaw, theta: f64, m_cap: usize) -> GammaSeries {
    GammaSeries::with_terms(service, theta, m_cap)
}

/// `d^(0..=m_cap)(theta)` of one batch law given its gamma series.
pub fn d_series(batch: &PhBatch, gamma: &mut GammaSeries, m_cap: usize) -> Result<Vec<Row>> {
    gamma.ensure(m_cap);
    let mut s = BatchSeries::new(batch, gamma.values()[0])?;
    s.ensure(gamma.values(), m_cap);
    Ok(s.values)
}

/// `D^(m)(theta) = sum_k (d_k^(m)(theta) e) D_k` for `m = 0..=m_cap`.
pub fn big_d_series(model: &ArrivalModel, d: &[Vec<Row>], m_cap: usize) -> Vec<Mat> {
    let dim = model.env_dim();
    (0..=m_cap)
        .map(|m| {
            model
                .classes()
                .iter()
                .zip(d)
                .fold(Mat::zeros(dim, dim), |acc, (cl, dk)| {
                    acc + cl.rate() * (&dk[m] * ones(dk[m].len()))[0]
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::mat_from_rows;
    use crate::model::{ArrivalClass, PhBatch};

    #[test]
    fn deterministic_poisson() {
        let g = gamma_series(&ServiceLaw::Deterministic { value: 1.0 }, 1.0, 5);
        assert!((g.values()[0] - (-1.0f64).exp()).abs() < 1e-15);
        assert!((g.values()[3] - (-1.0f64).exp() / 6.0).abs() < 1e-15);
    }

    #[test]
    fn exponential_is_geometric() {
        let g = gamma_series(&ServiceLaw::Exponential { rate: 1.0 }, 1.0, 30);
        for (m, v) in g.values().iter().enumerate() {
            assert!((v - 0.5f64.powi(m as i32 + 1)).abs() < 1e-16);
        }
        assert!((g.residual() - 0.5f64.powi(31)).abs() < 1e-15);
    }

    #[test]
    fn erlang_against_quadrature() {
        // Density of Erlang(2, 2): 4 y e^{-2y}; Simpson's rule on [0, 40].
        let g = gamma_series(&ServiceLaw::Erlang { shape: 2, rate: 2.0 }, 1.0, 8);
        for m in 0..=8 {
            let n = 40_000;
            let h = 40.0 / n as f64;
            let f = |y: f64| {
                let mut pois = (-y).exp();
                for i in 1..=m {
                    pois *= y / i as f64;
                }
                pois * 4.0 * y * (-2.0 * y).exp()
            };
            let mut s = f(0.0) + f(40.0);
            for i in 1..n {
                s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            let quad = s * h / 3.0;
            let closed = (m as f64 + 1.0) * (4.0 / 9.0) * (1.0f64 / 3.0).powi(m as i32);
            assert!((g.values()[m] - quad).abs() < 1e-10, "m={m}");
            assert!((g.values()[m] - closed).abs() < 1e-15, "m={m}");
        }
    }

    #[test]
    fn large_mean_uses_log_domain() {
        let mut g = GammaSeries::new(&ServiceLaw::Deterministic { value: 1.0 }, 900.0);
        g.ensure(2000);
        assert!(g.values().iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!(g.residual().abs() < 1e-10);
    }

    #[test]
    fn scalar_d0() {
        let batch = PhBatch::geometric(0.5);
        let mut s = BatchSeries::new(&batch, 0.5).unwrap();
        s.ensure(&[0.5], 0);
        assert!((s.values()[0][0] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_batch_reduces_to_gamma() {
        let law = ServiceLaw::Deterministic { value: 1.3 };
        let mut g = GammaSeries::new(&law, 0.8);
        let d = d_series(&PhBatch::single(), &mut g, 40).unwrap();
        for (m, row) in d.iter().enumerate() {
            assert_eq!(row[0], g.values()[m]);
        }
    }

    #[test]
    fn generating_function_identity() {
        let law = ServiceLaw::Deterministic { value: 1.0 };
        let batch = PhBatch::new(
            Row::from_row_slice(&[0.6, 0.4]),
            mat_from_rows(&[vec![0.3, 0.4], vec![0.2, 0.5]]).unwrap(),
        )
        .unwrap();
        let theta = 1.0;
        let mut g = GammaSeries::new(&law, theta);
        let d = d_series(&batch, &mut g, 400).unwrap();
        for z in [0.3, 0.7, 0.95] {
            let mut lhs = Row::zeros(2);
            let mut zm = 1.0;
            for row in &d {
                lhs += row * zm;
                zm *= z;
            }
            let h = law.lst(theta - theta * z);
            let i2 = Mat::identity(2, 2);
            let rhs = batch.alpha() * (&i2 - batch.p()) * h
                * inverse(&(&i2 - batch.p() * h), "x").unwrap();
            assert!((lhs - rhs).abs().max() < 1e-10, "z={z}");
        }
    }

    #[test]
    fn d_masses_sum_to_one() {
        let law = ServiceLaw::Deterministic { value: 1.0 };
        let mut g = GammaSeries::new(&law, 1.0);
        let d = d_series(&PhBatch::geometric(0.9), &mut g, 600).unwrap();
        let total: f64 = d.iter().map(|r| r.sum()).sum();
        assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn sequence_matches_phase_type() {
        // Geometric batch truncated far out versus explicit sequence.
        let c = mat_from_rows(&[vec![-1.0]]).unwrap();
        let d = mat_from_rows(&[vec![1.0]]).unwrap();
        let b = PhBatch::geometric(0.3);
        let ph = ArrivalModel::new(c.clone(), vec![ArrivalClass::phase_type(d.clone(), b.clone())])
            .unwrap();
        let seq: Vec<Mat> = (1..=40).map(|n| &d * b.pmf(n)).collect();
        let sq = ArrivalModel::new(c, vec![ArrivalClass::sequence(seq).unwrap()]).unwrap();
        let law = [ServiceLaw::Exponential { rate: 2.0 }];
        let mut a = Coefficients::new(&ph, &law).unwrap();
        let mut s = Coefficients::new(&sq, &law).unwrap();
        for m in 0..20 {
            assert!((a.d_matrix(m)[(0, 0)] - s.d_matrix(m)[(0, 0)]).abs() < 1e-14);
        }
    }
}
