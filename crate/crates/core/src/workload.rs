//! Virtual waiting time (workload): the busy-period-excised generator `Q`,
//! its stationary vector `kappa`, the Poisson-mixed coefficients
//! `v^(m)(theta)`, the mean workload vector and transform evaluation.

use serde::Serialize;

use crate::coefficients::Coefficients;
use crate::error::{Error, Result};
use crate::linalg::{inverse, max_abs, ones, row_sums, solve_left, solve_left_replacing_last, stationary_vector, Mat, Row};
use crate::model::{ArrivalModel, ServiceLaw, StationarySummary};

/// Tolerance on the B_m row-sum deficit that truncates the block series.
pub const BLOCK_TOL: f64 = 1e-14;

/// Iteration settings for the G matrix fixed point.
#[derive(Debug, Clone, Copy)]
pub struct FixedPointConfig {
    pub tol: f64,
    pub max_iterations: usize,
    /// Upper bound on the number of `D^(m)(theta)` terms.
    pub max_blocks: usize,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            tol: 1e-14,
            max_iterations: 100_000,
            max_blocks: 1_000_000,
        }
    }
}

/// The M/G/1-type chain whose stationary vector is `v^(m)(theta)`.
#[derive(Debug, Clone)]
pub struct Mg1Chain {
    blocks: Vec<Mat>,
    g: Mat,
    // a_star[j] = sum_{l >= j} B_l G^(l - j); index 0 unused.
    a_star: Vec<Mat>,
    inv_i_minus_a1: Mat,
    x: Vec<Row>,
    iterations: usize,
}

impl Mg1Chain {
    /// `B_0 = I + (C + D^(0)) / theta`, `B_m = D^(m) / theta`.
    pub fn new(model: &ArrivalModel, coeffs: &mut Coefficients, cfg: FixedPointConfig) -> Result<Self> {
        let theta = coeffs.theta();
        let terms = coeffs.truncate_d(BLOCK_TOL, cfg.max_blocks)?;
        let m = model.env_dim();
        let mut blocks = Vec::with_capacity(terms);
        for j in 0..terms {
            let d = coeffs.d_matrix(j) / theta;
            blocks.push(if j == 0 {
                Mat::identity(m, m) + model.c() / theta + d
            } else {
                d
            });
        }
        let (g, iterations) = solve_g(&blocks, cfg)?;
        let mut a_star = vec![Mat::zeros(m, m); blocks.len() + 1];
        for j in (1..blocks.len()).rev() {
            a_star[j] = &blocks[j] + &a_star[j + 1] * &g;
        }
        let inv_i_minus_a1 = inverse(&(Mat::identity(m, m) - &a_star[1]), "(I - A*_1)^-1")?;
        Ok(Self {
            blocks,
            g,
            a_star,
            inv_i_minus_a1,
            x: Vec::new(),
            iterations,
        })
    }

    pub fn blocks(&self) -> &[Mat] {
        &self.blocks
    }

    pub fn g(&self) -> &Mat {
        &self.g
    }

    pub fn g_iterations(&self) -> usize {
        self.iterations
    }

    fn a_star(&self, j: usize) -> Option<&Mat> {
        self.a_star.get(j).filter(|_| j >= 1)
    }

    /// Boundary vector: `x_0 (B_0 + A*_1) = x_0`, scaled so that
    /// `x_0 B_0 e = 1 - rho`.
    fn boundary(&mut self, rho: f64) -> Result<()> {
        let m = self.g.nrows();
        let k = &self.blocks[0] + self.a_star(1).cloned().unwrap_or_else(|| Mat::zeros(m, m));
        let x0 = stationary_vector(&(k - Mat::identity(m, m)), "boundary vector of the workload chain")?;
        let scale = (&x0 * &self.blocks[0] * ones(m))[0];
        self.x.push(x0 * ((1.0 - rho) / scale));
        Ok(())
    }

    /// Ramaswami recursion `x_i = [sum_{j<i} x_j A*_{i+1-j}] (I - A*_1)^-1`.
    fn extend(&mut self, upto: usize) {
        let m = self.g.nrows();
        while self.x.len() <= upto {
            let i = self.x.len();
            let mut acc = Row::zeros(m);
            for j in 0..i {
                if let Some(a) = self.a_star(i + 1 - j) {
                    acc += &self.x[j] * a;
                }
            }
            let xi = (acc * &self.inv_i_minus_a1).map(|v| v.max(0.0));
            self.x.push(xi);
        }
    }

    pub fn computed(&self) -> &[Row] {
        &self.x
    }
}

/// Natural fixed point `G <- sum_m B_m G^m` from `G = 0`.
fn solve_g(blocks: &[Mat], cfg: FixedPointConfig) -> Result<(Mat, usize)> {
    let m = blocks[0].nrows();
    let mut g = Mat::zeros(m, m);
    let mut change = f64::INFINITY;
    for it in 1..=cfg.max_iterations {
        let mut next = blocks[blocks.len() - 1].clone();
        for b in blocks[..blocks.len() - 1].iter().rev() {
            next = next * &g + b;
        }
        change = max_abs(&(&next - &g));
        g = next;
        if change < cfg.tol {
            return Ok((g, it));
        }
    }
    Err(Error::NoConvergence {
        what: "G matrix of the workload chain".into(),
        iterations: cfg.max_iterations,
        residual: change,
    })
}

/// Stationary workload quantities.
#[derive(Debug, Clone)]
pub struct WorkloadSolution {
    pub q: Mat,
    pub kappa: Row,
    pub v0: Row,
    pub pi: Row,
    pub rho: f64,
    pub v1bar: Row,
    chain: Mg1Chain,
}

impl WorkloadSolution {
    /// `v^(m)(theta)`, extending the series if needed.
    pub fn v(&mut self, m: usize) -> &Row {
        self.chain.extend(m);
        &self.chain.x[m]
    }

    /// All coefficients computed so far.
    pub fn v_series(&self) -> &[Row] {
        self.chain.computed()
    }

    pub fn chain(&self) -> &Mg1Chain {
        &self.chain
    }

    /// `pi - sum_{m <= last} v^(m)`, entrywise.
    pub fn residual(&self) -> Row {
        let mut r = self.pi.clone();
        for x in self.chain.computed() {
            r -= x;
        }
        r
    }

    /// Mean workload `E[V] = v1bar e`.
    pub fn mean(&self) -> f64 {
        self.v1bar.sum()
    }
}

/// `Q = theta (G - I)` from the workload chain's G, and `kappa Q = 0`.
pub fn compute_q_kappa(chain: &Mg1Chain, theta: f64) -> Result<(Mat, Row)> {
    let m = chain.g.nrows();
    let mut q = (&chain.g - Mat::identity(m, m)) * theta;
    // Clean rounding so that rows sum to zero exactly up to one ulp.
    for i in 0..m {
        let s = q.row(i).sum();
        q[(i, i)] -= s;
    }
    let kappa = if m == 1 {
        Row::from_element(1, 1.0)
    } else {
        stationary_vector(&q, "kappa")?
    };
    Ok((q, kappa))
}

/// Directly iterates `Q <- C + sum_m D^(m) (I + Q/theta)^m` from `Q = C`;
/// an independent route to the same matrix.
pub fn compute_q_direct(model: &ArrivalModel, coeffs: &mut Coefficients, cfg: FixedPointConfig) -> Result<Mat> {
    let theta = coeffs.theta();
    let terms = coeffs.truncate_d(BLOCK_TOL, cfg.max_blocks)?;
    let m = model.env_dim();
    let id = Mat::identity(m, m);
    let mut q = model.c().clone();
    let mut change = f64::INFINITY;
    for _ in 0..cfg.max_iterations {
        let u = &id + &q / theta;
        let mut acc = coeffs.d_matrix(terms - 1).clone();
        for j in (0..terms - 1).rev() {
            acc = acc * &u + coeffs.d_matrix(j);
        }
        let next = model.c() + acc;
        change = max_abs(&(&next - &q));
        q = next;
        if change < 1e-13 {
            return Ok(q);
        }
    }
    Err(Error::NoConvergence {
        what: "Q fixed point".into(),
        iterations: cfg.max_iterations,
        residual: change,
    })
}

/// `D*(s) = sum_k sum_n H_k*(s)^n D_k(n)`.
fn work_lst_matrix(model: &ArrivalModel, services: &[ServiceLaw], s: f64) -> Result<Mat> {
    let m = model.env_dim();
    let mut acc = Mat::zeros(m, m);
    for (cl, law) in model.classes().iter().zip(services) {
        acc += cl.pgf_matrix(law.lst(s))?;
    }
    Ok(acc)
}

/// `v*(s)` from `v*(s) [sI + C + D*(s)] = s (1 - rho) kappa`.
pub fn solve_v_lst(model: &ArrivalModel, services: &[ServiceLaw], kappa: &Row, rho: f64, s: f64) -> Result<Row> {
    if s <= 0.0 || !s.is_finite() {
        return Err(Error::SingularSystem(format!("v*(s) at s = {s}")));
    }
    let m = model.env_dim();
    let a = Mat::identity(m, m) * s + model.c() + work_lst_matrix(model, services, s)?;
    solve_left(&a, &(kappa * (s * (1.0 - rho))), "v*(s)")
}

/// Mean workload vector `-dv*/ds` at `s = 0`.
///
/// Differentiating the transform relation once gives
/// `v1bar (C + D) = pi - pi W1 - (1 - rho) kappa`; the second derivative
/// times `e` closes it with `v1bar (e - W1 e) = pi W2 e / 2`, where
/// `W1`, `W2` are the first two moments of the work brought per transition.
pub fn mean_workload(model: &ArrivalModel, services: &[ServiceLaw], summary: &StationarySummary, kappa: &Row) -> Result<Row> {
    let m = model.env_dim();
    let mut w1 = Mat::zeros(m, m);
    let mut w2 = Mat::zeros(m, m);
    for (cl, law) in model.classes().iter().zip(services) {
        let h = law.mean();
        let fm = cl.first_moment_matrix();
        w1 += &fm * h;
        w2 += fm * law.second_moment() + cl.second_factorial_matrix() * (h * h);
    }
    let pi = summary.pi_row();
    let rhs = &pi - &pi * &w1 - kappa * (1.0 - summary.rho);
    let u = ones(m) - &w1 * ones(m);
    let c = 0.5 * (&pi * &w2 * ones(m))[0];
    solve_left_replacing_last(&model.generator(), &rhs, &u, c, "mean workload vector")
}

/// Richardson-extrapolated `(pi - v*(s)) / s` at `s = 1e-2, 5e-3, 2.5e-3`.
pub fn mean_workload_fd(model: &ArrivalModel, services: &[ServiceLaw], pi: &Row, kappa: &Row, rho: f64) -> Result<Row> {
    let f = |s: f64| -> Result<Row> { Ok((pi - solve_v_lst(model, services, kappa, rho, s)?) / s) };
    let (f1, f2, f3) = (f(1e-2)?, f(5e-3)?, f(2.5e-3)?);
    let r1 = &f2 * 2.0 - &f1;
    let r2 = &f3 * 2.0 - &f2;
    Ok((r2 * 4.0 - r1) / 3.0)
}

/// Solves the whole workload problem.
pub fn solve_workload(
    model: &ArrivalModel,
    services: &[ServiceLaw],
    summary: &StationarySummary,
    coeffs: &mut Coefficients,
    cfg: FixedPointConfig,
) -> Result<WorkloadSolution> {
    let mut chain = Mg1Chain::new(model, coeffs, cfg)?;
    let (q, kappa) = compute_q_kappa(&chain, coeffs.theta())?;
    chain.boundary(summary.rho)?;
    let v0 = &kappa * (1.0 - summary.rho);
    let v1bar = mean_workload(model, services, summary, &kappa)?;
    Ok(WorkloadSolution {
        q,
        kappa,
        v0,
        pi: summary.pi_row(),
        rho: summary.rho,
        v1bar,
        chain,
    })
}

/// `w_k*(s) = v*(s) (D_k - D_k*(H_k*(s))) / (lambda_k (1 - H_k*(s)))`.
pub fn waiting_lst(
    model: &ArrivalModel,
    services: &[ServiceLaw],
    summary: &StationarySummary,
    kappa: &Row,
    k: usize,
    s: f64,
) -> Result<Row> {
    let h = services[k].lst(s);
    if h >= 1.0 {
        return Err(Error::DegenerateService { class: k + 1, s });
    }
    let v = solve_v_lst(model, services, kappa, summary.rho, s)?;
    let cl = model.class(k);
    let num = cl.rate() - cl.pgf_matrix(h)?;
    Ok(v * num / (summary.lambda[k] * (1.0 - h)))
}

/// Mean waiting time of class `k`:
/// `[v1bar sum_n n D_k(n) e + (h_k / 2) pi sum_n n (n-1) D_k(n) e] / lambda_k`.
pub fn mean_waiting(
    model: &ArrivalModel,
    services: &[ServiceLaw],
    summary: &StationarySummary,
    v1bar: &Row,
    k: usize,
) -> f64 {
    let cl = model.class(k);
    let e = ones(model.env_dim());
    let first = (v1bar * cl.first_moment_matrix() * &e)[0];
    let second = (summary.pi_row() * cl.second_factorial_matrix() * &e)[0];
    (first + 0.5 * services[k].mean() * second) / summary.lambda[k]
}

/// Checks that the generator rows of `Q` sum to zero and `G` is stochastic.
pub fn chain_diagnostics(sol: &WorkloadSolution) -> ChainDiagnostics {
    let q_rows = row_sums(&sol.q).iter().fold(0.0_f64, |a, x| a.max(x.abs()));
    let g_rows = row_sums(sol.chain.g())
        .iter()
        .fold(0.0_f64, |a, x| a.max((x - 1.0).abs()));
    ChainDiagnostics {
        q_row_sum_error: q_rows,
        g_row_sum_error: g_rows,
        g_iterations: sol.chain.g_iterations(),
        blocks: sol.chain.blocks().len(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ChainDiagnostics {
    pub q_row_sum_error: f64,
    pub g_row_sum_error: f64,
    pub g_iterations: usize,
    pub blocks: usize,
}
