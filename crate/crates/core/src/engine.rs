//! The truncated recursions for the joint queue-length distribution.
//!
//! Pipeline: cutoffs from the workload and gamma series, batch cut,
//! streamed uniformized powers `F_m(n)` folded into `A_k(n)` and `v_k(n)`,
//! the batch resolvent `Gamma_k(n)`, departure distributions `q_k(n)` and
//! finally the time-average distribution `p(n)`.
//!
//! The total-count mode reuses everything with a one-dimensional index on
//! which every class moves the same axis.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::coefficients::Coefficients;
use crate::error::{Error, Result};
use crate::linalg::{axpy, gemm_acc, inverse, kron, ones, to_row_major, Mat, Row};
use crate::model::{stationary_summary, validate, ArrivalModel, PhBatch, ServiceLaw, StationarySummary};
use crate::multi_index::{for_each_below_within, Field, Layout};
use crate::workload::{mean_waiting, mean_workload_fd, solve_workload, FixedPointConfig, WorkloadSolution};

/// Which distribution the engine produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Joint distribution over the per-class counts.
    Joint,
    /// Distribution of the total count only.
    Total,
}

#[derive(Debug, Clone, Copy)]
pub struct EngineConfig {
    pub eps: f64,
    /// Largest level `|n|` kept anywhere in the pipeline.
    pub n_p: usize,
    /// `eps_F = factor * eps * bound`; must be below one.
    pub eps_f_factor: f64,
    /// `eps_g = ratio * eps_F`; must be below one.
    pub eps_g_ratio: f64,
    /// Cap on stored `F` blocks (current plus previous step).
    pub max_stored_entries: usize,
    /// Cap on `m` when searching the gamma and workload cutoffs.
    pub max_m: usize,
    pub fixed_point: FixedPointConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            n_p: 300,
            eps_f_factor: 0.5,
            eps_g_ratio: 0.1,
            max_stored_entries: 40_000_000,
            max_m: 1_000_000,
            fixed_point: FixedPointConfig::default(),
        }
    }
}

/// Every cutoff chosen by the truncation procedure, plus work counters.
#[derive(Debug, Clone, Default, Serialize)]
pub struct TruncationLedger {
    pub eps: f64,
    /// `min_k min(1 / (theta h_k), lambda_k^B / (theta v1bar D_k e))`.
    pub eps_f_bound: f64,
    pub eps_f: f64,
    pub eps_g: f64,
    pub m_gamma: Vec<usize>,
    pub m_v: Vec<usize>,
    pub m_max: usize,
    pub n_g: Vec<usize>,
    /// `n_F^(m)` for `m = 0..=m_max`.
    pub n_f: Vec<usize>,
    pub n_a: Vec<usize>,
    pub n_v: Vec<usize>,
    pub n_gamma: Vec<usize>,
    pub n_p: usize,
    pub f_entries_computed: u64,
    pub f_entries_peak: usize,
    /// Steps `m` whose level mass test was cut short by `n_p` or by the
    /// support limit `n_F^(m-1) + n_F^(1)`.
    pub f_mass_short: Vec<usize>,
    /// Classes whose resolvent stop test was cut short by `n_p`.
    pub gamma_short: Vec<usize>,
}

/// Outcome of one error-bound postcondition.
#[derive(Debug, Clone, Serialize)]
pub struct BoundCheck {
    pub name: String,
    pub class: usize,
    /// Smallest margin over all rows; nonnegative means the bound holds.
    pub margin: f64,
    pub passed: bool,
}

/// Step-1 output.
#[derive(Debug, Clone, Serialize)]
pub struct Cutoffs {
    pub eps: f64,
    pub eps_f_bound: f64,
    pub eps_f: f64,
    pub m_gamma: Vec<usize>,
    pub m_v: Vec<usize>,
    pub m_max: usize,
}

/// Chooses `eps_F`, `m_gamma(k)`, `m_v(k)` and `m_max`.
#[allow(clippy::too_many_arguments)]
pub fn choose_cutoffs(
    model: &ArrivalModel,
    services: &[ServiceLaw],
    summary: &StationarySummary,
    workload: &mut WorkloadSolution,
    coeffs: &mut Coefficients,
    eps: f64,
    eps_f_factor: f64,
    max_m: usize,
) -> Result<Cutoffs> {
    let theta = summary.theta;
    let e = ones(model.env_dim());
    let mut bound = f64::INFINITY;
    for (k, cl) in model.classes().iter().enumerate() {
        bound = bound.min(1.0 / (theta * services[k].mean()));
        let vd = (&workload.v1bar * cl.rate() * &e)[0];
        if vd > 0.0 {
            bound = bound.min(summary.lambda_batch[k] / (theta * vd));
        }
    }
    let eps_f = (eps_f_factor * eps * bound).min(0.5);
    let keep = 1.0 - eps_f;

    let mut m_gamma = Vec::new();
    for k in 0..model.num_classes() {
        let mut acc = 0.0;
        let mut w = 1.0;
        let mut m = 0;
        loop {
            acc += coeffs.gamma(k, m) * w;
            if acc > 1.0 - eps {
                break;
            }
            w *= keep;
            m += 1;
            if m > max_m {
                return Err(Error::MassDeficit {
                    what: format!("gamma series of class {}", k + 1),
                    limit: max_m,
                });
            }
        }
        m_gamma.push(m);
    }

    let mut m_v = Vec::new();
    for (k, cl) in model.classes().iter().enumerate() {
        let de = cl.rate() * &e;
        let target = (1.0 - eps) * summary.lambda_batch[k];
        let mut acc = 0.0;
        let mut w = 1.0;
        let mut m = 0;
        loop {
            acc += (workload.v(m) * &de)[0] * w;
            if acc > target {
                break;
            }
            w *= keep;
            m += 1;
            if m > max_m {
                return Err(Error::MassDeficit {
                    what: format!("workload series for class {}", k + 1),
                    limit: max_m,
                });
            }
        }
        m_v.push(m);
    }
    let m_max = m_gamma.iter().chain(&m_v).copied().max().unwrap_or(0);
    Ok(Cutoffs {
        eps,
        eps_f_bound: bound,
        eps_f,
        m_gamma,
        m_v,
        m_max,
    })
}

/// Minimal `n_g(k)` with `Pr[G_k > n_g] max_i (D_k e)_i / theta < eps_g / K`,
/// capped at `n_p`.
pub fn choose_batch_cut(model: &ArrivalModel, batches: &[&PhBatch], eps_g: f64, n_p: usize) -> Vec<usize> {
    let theta = model.theta();
    let kk = model.num_classes() as f64;
    model
        .classes()
        .iter()
        .zip(batches)
        .map(|(cl, b)| {
            let dmax = (cl.rate() * ones(model.env_dim())).max() / theta;
            let mut row = b.alpha() * b.p();
            let mut n = 1;
            while row.sum() * dmax >= eps_g / kk && n < n_p {
                row = &row * b.p();
                n += 1;
            }
            n.min(n_p.max(1))
        })
        .collect()
}

/// Per-class batch data in row-major form.
struct BatchData {
    phases: usize,
    alpha: Vec<f64>,
    p: Vec<f64>,
    exit: Vec<f64>,
    /// `P^(n_g) (I - P) e`, the term leaving the truncated window.
    cut: Vec<f64>,
    n_g: usize,
    single: bool,
}

impl BatchData {
    fn new(b: &PhBatch, n_g: usize) -> Self {
        let exit: Vec<f64> = b.exit().iter().copied().collect();
        let mut cut = b.exit();
        for _ in 0..n_g {
            cut = b.p() * cut;
        }
        Self {
            phases: b.phases(),
            alpha: b.alpha().iter().copied().collect(),
            p: to_row_major(b.p()),
            exit,
            cut: cut.iter().copied().collect(),
            n_g,
            single: b.is_single(),
        }
    }
}

/// Result of the streamed `F` accumulation.
#[derive(Debug, Clone)]
pub struct Accumulated {
    pub a: Vec<Field>,
    pub v: Vec<Field>,
    pub n_f: Vec<usize>,
    pub n_a: Vec<usize>,
    pub n_v: Vec<usize>,
    pub computed: u64,
    pub peak: usize,
    pub mass_short: Vec<usize>,
}

/// Streams `F_m(n)` for `m = 0..=m_max` and folds them into `A_k` and `v_k`.
///
/// `axes[k]` is the coordinate class `k` increments. Only `F_{m-1}` and
/// `F_m` are alive at any time. Within a level the blocks are independent
/// and computed in parallel; every reduction runs in rank order.
#[allow(clippy::too_many_arguments)]
pub fn run_f_accumulation(
    model: &ArrivalModel,
    batches: &[&PhBatch],
    gammas: &[Vec<f64>],
    v_series: &[Row],
    cut: &Cutoffs,
    n_g: &[usize],
    layout: &Layout,
    axes: &[usize],
    n_p: usize,
    max_stored: usize,
) -> Result<Accumulated> {
    let m_env = model.env_dim();
    let mm = m_env * m_env;
    let kk = model.num_classes();
    let theta = model.theta();
    let t = to_row_major(&(Mat::identity(m_env, m_env) + model.c() / theta));
    let d: Vec<Vec<f64>> = model.classes().iter().map(|c| to_row_major(&(c.rate() / theta))).collect();
    let dk: Vec<&Mat> = model.classes().iter().map(|c| c.rate()).collect();
    let bd: Vec<BatchData> = batches.iter().zip(n_g).map(|(b, &n)| BatchData::new(b, n)).collect();
    let mut w_off = Vec::with_capacity(kk);
    let mut stride = mm;
    for b in &bd {
        w_off.push(stride);
        stride += b.phases * mm;
    }

    let mut a_fields: Vec<Field> = (0..kk).map(|_| Field::new(mm)).collect();
    let mut v_fields: Vec<Field> = (0..kk).map(|_| Field::new(m_env)).collect();

    // m = 0: F_0(0) = I.
    let mut prev = Field::new(mm);
    prev.push_level(layout, &to_row_major(&Mat::identity(m_env, m_env)));
    let mut n_f = vec![0usize];
    let mut computed: u64 = 1;
    let mut peak = 1usize;
    let mut mass_short = Vec::new();
    fold(&prev, 0, gammas, v_series, cut, &dk, layout, &mut a_fields, &mut v_fields);

    let n_f1 = n_g.iter().copied().max().unwrap_or(1).min(n_p);
    for m in 1..=cut.m_max {
        let limit = if m == 1 { n_f1 } else { (n_f[m - 1] + n_f1).min(n_p) };
        let mut cur = Field::new(mm);
        let mut prev_rec: Vec<f64> = Vec::new();
        let mut mass = vec![0.0; m_env];
        let target = (1.0 - cut.eps_f).powi(m as i32);
        let mut level = 0;
        loop {
            let coords = layout.coords(level);
            let len = layout.level_len(level);
            let dims = layout.dims();
            let mut rec = vec![0.0; len * stride];
            rec.par_chunks_mut(stride).with_min_len(32).enumerate().for_each(|(r, out)| {
                let n = &coords[r * dims..(r + 1) * dims];
                f_kernel(n, out, &prev, &prev_rec, layout, axes, &t, &d, &bd, &w_off, stride, m_env, level);
            });
            let mut block = Vec::with_capacity(len * mm);
            for r in 0..len {
                let f = &rec[r * stride..r * stride + mm];
                for i in 0..m_env {
                    mass[i] += f[i * m_env..(i + 1) * m_env].iter().sum::<f64>();
                }
                block.extend_from_slice(f);
            }
            cur.push_level(layout, &block);
            computed += len as u64;
            let stored = prev.entries() + cur.entries();
            peak = peak.max(stored);
            if stored > max_stored {
                return Err(Error::BudgetExceeded { levels: m, entries: stored });
            }
            prev_rec = rec;
            let passed = mass.iter().all(|&x| x > target);
            if m == 1 {
                if level == limit {
                    break;
                }
            } else if passed {
                break;
            } else if level == limit {
                mass_short.push(m);
                break;
            }
            level += 1;
        }
        n_f.push(level);
        fold(&cur, m, gammas, v_series, cut, &dk, layout, &mut a_fields, &mut v_fields);
        prev = cur;
    }

    let n_a = cut
        .m_gamma
        .iter()
        .map(|&mg| n_f[..=mg.min(cut.m_max)].iter().copied().max().unwrap_or(0))
        .collect();
    let n_v = cut
        .m_v
        .iter()
        .map(|&mv| n_f[..=mv.min(cut.m_max)].iter().copied().max().unwrap_or(0))
        .collect();
    Ok(Accumulated {
        a: a_fields,
        v: v_fields,
        n_f,
        n_a,
        n_v,
        computed,
        peak,
        mass_short,
    })
}

/// One block of `F_m` at `n`, plus the batch-window accumulators `W_k(n)`.
///
/// `W_k(n)[j] = sum_{l=1..min(n_a, n_g)} (P^(l-1) x)_j F_{m-1}(n - l e_a)`
/// obeys `W(n) = x F(n - e_a) + P W(n - e_a) - P^(n_g) x F(n - (n_g+1) e_a)`,
/// so the batch sum `sum_l g(l) F(n - l e_a) = alpha W(n)` costs a fixed
/// number of block operations per index.
#[allow(clippy::too_many_arguments)]
#[inline]
fn f_kernel(
    n: &[u32],
    out: &mut [f64],
    prev: &Field,
    prev_rec: &[f64],
    layout: &Layout,
    axes: &[usize],
    t: &[f64],
    d: &[Vec<f64>],
    bd: &[BatchData],
    w_off: &[usize],
    stride: usize,
    m_env: usize,
    level: usize,
) {
    let mm = m_env * m_env;
    let (f_out, w_out) = out.split_at_mut(mm);
    if let Some(fp) = prev.get(layout, n) {
        gemm_acc(f_out, fp, t, m_env, m_env, m_env);
    }
    let mut tmp = [0u32; 16];
    let mut s = vec![0.0; mm];
    for (k, b) in bd.iter().enumerate() {
        let a = axes[k];
        if n[a] == 0 {
            continue;
        }
        let wk = &mut w_out[w_off[k] - mm..w_off[k] - mm + b.phases * mm];
        let idx = &mut tmp[..n.len()];
        idx.copy_from_slice(n);
        idx[a] -= 1;
        if let Some(fm) = prev.get(layout, idx) {
            for j in 0..b.phases {
                axpy(&mut wk[j * mm..(j + 1) * mm], b.exit[j], fm);
            }
        }
        if !b.single && level >= 1 {
            let r = layout.rank(idx);
            let wp = &prev_rec[r * stride + w_off[k]..r * stride + w_off[k] + b.phases * mm];
            for j in 0..b.phases {
                for i in 0..b.phases {
                    let pji = b.p[j * b.phases + i];
                    if pji != 0.0 {
                        axpy(&mut wk[j * mm..(j + 1) * mm], pji, &wp[i * mm..(i + 1) * mm]);
                    }
                }
            }
            if n[a] as usize > b.n_g {
                idx[a] = n[a] - b.n_g as u32 - 1;
                if let Some(fc) = prev.get(layout, idx) {
                    for j in 0..b.phases {
                        axpy(&mut wk[j * mm..(j + 1) * mm], -b.cut[j], fc);
                    }
                }
            }
        }
        s.iter_mut().for_each(|x| *x = 0.0);
        for j in 0..b.phases {
            axpy(&mut s, b.alpha[j], &wk[j * mm..(j + 1) * mm]);
        }
        gemm_acc(f_out, &s, &d[k], m_env, m_env, m_env);
    }
}

/// Adds `gamma_k^(m) F_m` into `A_k` and `v^(m) D_k F_m` into `v_k`.
#[allow(clippy::too_many_arguments)]
fn fold(
    f: &Field,
    m: usize,
    gammas: &[Vec<f64>],
    v_series: &[Row],
    cut: &Cutoffs,
    dk: &[&Mat],
    layout: &Layout,
    a_fields: &mut [Field],
    v_fields: &mut [Field],
) {
    let m_env = dk[0].nrows();
    let mm = m_env * m_env;
    let levels = f.levels();
    let len = f.entries();
    for k in 0..gammas.len() {
        if m <= cut.m_gamma[k] {
            let g = gammas[k][m];
            let a = &mut a_fields[k];
            a.grow(layout, levels);
            a.data_mut()[..len * mm]
                .par_chunks_mut(4096)
                .zip(f.data().par_chunks(4096))
                .for_each(|(dst, src)| axpy(dst, g, src));
        }
        if m <= cut.m_v[k] {
            let vd: Vec<f64> = (&v_series[m] * dk[k]).iter().copied().collect();
            let v = &mut v_fields[k];
            v.grow(layout, levels);
            v.data_mut()[..len * m_env]
                .par_chunks_mut(m_env)
                .with_min_len(256)
                .zip(f.data().par_chunks(mm).with_min_len(256))
                .for_each(|(dst, src)| gemm_acc(dst, &vd, src, 1, m_env, m_env));
        }
    }
}

/// `Gamma_k(n)` by level until its row sums pass the stop test.
#[allow(clippy::too_many_arguments)]
pub fn gamma_field(
    batch: &PhBatch,
    a: &Field,
    n_a: usize,
    eps: f64,
    m_env: usize,
    layout: &Layout,
    n_p: usize,
) -> Result<(Field, usize, bool)> {
    let mk = batch.phases();
    let dim = mk * m_env;
    let dd = dim * dim;
    let mut out = Field::new(dd);
    if batch.is_single() {
        out.push_level(layout, &to_row_major(&Mat::identity(dim, dim)));
        return Ok((out, 0, true));
    }
    let a_levels = a.levels().min(n_a + 1);
    let mut x = Field::new(dd);
    for level in 0..a_levels {
        let src = a.level(layout, level);
        let mut blk = Vec::with_capacity(src.len() / (m_env * m_env) * dd);
        for chunk in src.chunks(m_env * m_env) {
            let am = Mat::from_row_slice(m_env, m_env, chunk);
            blk.extend(to_row_major(&kron(batch.p(), &am)));
        }
        x.push_level(layout, &blk);
    }
    let x0 = Mat::from_row_slice(dim, dim, x.block(0));
    let g0 = inverse(&(Mat::identity(dim, dim) - x0), "[I - P (x) A(0)]^-1")?;
    let g0v = to_row_major(&g0);
    out.push_level(layout, &g0v);

    let i_mk = Mat::identity(mk, mk);
    let fund = inverse(&(&i_mk - batch.p()), "(I - P)^-1")?;
    let upper = &fund * ones(mk);
    let corr = &fund * &fund * batch.p() * ones(mk);
    let target: Vec<f64> = (0..dim).map(|r| upper[r / m_env] - eps * corr[r / m_env]).collect();
    let mut mass = vec![0.0; dim];
    let add_mass = |mass: &mut [f64], blocks: &[f64]| {
        for b in blocks.chunks(dd) {
            for (r, m) in mass.iter_mut().enumerate() {
                *m += b[r * dim..(r + 1) * dim].iter().sum::<f64>();
            }
        }
    };
    add_mass(&mut mass, &g0v);
    let passed = |mass: &[f64]| mass.iter().zip(&target).all(|(m, t)| m > t);
    if passed(&mass) {
        return Ok((out, 0, true));
    }
    let dims = layout.dims();
    let mut level = 1;
    loop {
        let coords = layout.coords(level);
        let len = layout.level_len(level);
        let mut blk = vec![0.0; len * dd];
        {
            let out_ref = &out;
            let x_ref = &x;
            blk.par_chunks_mut(dd).enumerate().for_each(|(r, dst)| {
                let n = &coords[r * dims..(r + 1) * dims];
                let mut s = vec![0.0; dd];
                let mut rest = vec![0u32; dims];
                for_each_below_within(layout, n, x_ref.levels(), |l| {
                    let ll: u32 = l.iter().sum();
                    if ll == 0 {
                        return;
                    }
                    for i in 0..dims {
                        rest[i] = n[i] - l[i];
                    }
                    let g = out_ref.get(layout, &rest).expect("lower level");
                    let xl = x_ref.get(layout, l).expect("within A levels");
                    gemm_acc(&mut s, g, xl, dim, dim, dim);
                });
                gemm_acc(dst, &s, &g0v, dim, dim, dim);
            });
        }
        add_mass(&mut mass, &blk);
        out.push_level(layout, &blk);
        if passed(&mass) {
            return Ok((out, level, true));
        }
        if level >= n_p {
            return Ok((out, level, false));
        }
        level += 1;
    }
}

/// `out(n) = sum_{l <= n} left(n - l) right(l)` for `|n| < levels`; `left`
/// holds row vectors of width `r`, `right` holds `r x c` blocks.
pub fn convolve_rows(left: &Field, right: &Field, r: usize, c: usize, layout: &Layout, levels: usize) -> Field {
    let dims = layout.dims();
    let mut out = Field::new(c);
    out.grow(layout, levels);
    let lmax = left.levels();
    let rmax = right.levels();
    let total = layout.level_offset(levels);
    let coords: Vec<_> = (0..levels).map(|l| layout.coords(l)).collect();
    // Flat position -> (level, rank).
    let mut where_: Vec<(u32, u32)> = Vec::with_capacity(total);
    for l in 0..levels {
        for rk in 0..layout.level_len(l) {
            where_.push((l as u32, rk as u32));
        }
    }
    out.data_mut().par_chunks_mut(c).with_min_len(16).enumerate().for_each(|(pos, dst)| {
        let (lvl, rk) = where_[pos];
        let n = &coords[lvl as usize][rk as usize * dims..(rk as usize + 1) * dims];
        let mut rest = vec![0u32; dims];
        for_each_below_within(layout, n, rmax, |l| {
            let ll: u32 = l.iter().sum();
            if (lvl - ll) as usize >= lmax {
                return;
            }
            for i in 0..dims {
                rest[i] = n[i] - l[i];
            }
            let a = left.block(layout.index(&rest));
            if a.iter().all(|&x| x == 0.0) {
                return;
            }
            let b = right.block(layout.index(l));
            gemm_acc(dst, a, b, 1, r, c);
        });
    });
    out
}

/// `q_k(n)` from the three fields.
#[allow(clippy::too_many_arguments)]
pub fn assemble_q(
    v: &Field,
    a: &Field,
    gamma: &Field,
    batch: &PhBatch,
    lambda: f64,
    axis: usize,
    m_env: usize,
    layout: &Layout,
    levels: usize,
) -> Field {
    let mk = batch.phases();
    let y = convolve_rows(v, a, m_env, m_env, layout, levels);
    let u = if batch.is_single() {
        y
    } else {
        let mut w = Field::new(mk * m_env);
        w.grow(layout, levels);
        let alpha = batch.alpha();
        for (dst, src) in w.data_mut().chunks_mut(mk * m_env).zip(y.data().chunks(m_env)) {
            for j in 0..mk {
                for i in 0..m_env {
                    dst[j * m_env + i] = alpha[j] * src[i];
                }
            }
        }
        convolve_rows(&w, gamma, mk * m_env, mk * m_env, layout, levels)
    };
    // c_m = P^m (I - P) e, for m while nonzero.
    let mut cs: Vec<Vec<f64>> = Vec::new();
    let mut c = batch.exit();
    while cs.len() < levels && c.iter().any(|&x| x != 0.0) {
        cs.push(c.iter().copied().collect());
        c = batch.p() * c;
    }
    let dims = layout.dims();
    let mut q = Field::new(m_env);
    q.grow(layout, levels);
    let where_: Vec<(u32, u32)> = (0..levels)
        .flat_map(|l| (0..layout.level_len(l)).map(move |r| (l as u32, r as u32)))
        .collect();
    let coords: Vec<_> = (0..levels).map(|l| layout.coords(l)).collect();
    q.data_mut().par_chunks_mut(m_env).with_min_len(64).enumerate().for_each(|(pos, dst)| {
        let (lvl, rk) = where_[pos];
        let n = &coords[lvl as usize][rk as usize * dims..(rk as usize + 1) * dims];
        let mut idx = n.to_vec();
        for (m, cm) in cs.iter().enumerate() {
            if m as u32 > n[axis] {
                break;
            }
            idx[axis] = n[axis] - m as u32;
            let ub = u.block(layout.index(&idx));
            for (p, &cp) in cm.iter().enumerate() {
                if cp != 0.0 {
                    axpy(dst, cp / lambda, &ub[p * m_env..(p + 1) * m_env]);
                }
            }
        }
    });
    q
}

/// `p(n)` from the departure distributions.
#[allow(clippy::too_many_arguments)]
pub fn assemble_p(
    model: &ArrivalModel,
    batches: &[&PhBatch],
    q: &[Field],
    lambda: &[f64],
    axes: &[usize],
    layout: &Layout,
    levels: usize,
) -> Result<Field> {
    let m_env = model.env_dim();
    let neg_c_inv = to_row_major(&inverse(&(-model.c()), "(-C)^-1")?);
    let dk: Vec<Vec<f64>> = model.classes().iter().map(|c| to_row_major(c.rate())).collect();
    let bd: Vec<BatchData> = batches.iter().map(|b| BatchData::new(b, 0)).collect();
    let mut z_off = Vec::new();
    let mut stride = 0;
    for b in &bd {
        z_off.push(stride);
        stride += b.phases * m_env;
    }
    let dims = layout.dims();
    let mut p = Field::new(m_env);
    let mut prev_z: Vec<f64> = Vec::new();
    for level in 0..levels {
        let coords = layout.coords(level);
        let len = layout.level_len(level);
        let mut z = vec![0.0; len * stride];
        let mut blk = vec![0.0; len * m_env];
        {
            let p_ref = &p;
            let prev_z = &prev_z;
            blk.par_chunks_mut(m_env)
                .zip(z.par_chunks_mut(stride.max(1)))
                .enumerate()
                .with_min_len(32)
                .for_each(|(r, (dst, zr))| {
                    let n = &coords[r * dims..(r + 1) * dims];
                    let mut rhs = vec![0.0; m_env];
                    let mut idx = n.to_vec();
                    for (k, b) in bd.iter().enumerate() {
                        let a = axes[k];
                        axpy(&mut rhs, lambda[k], q[k].get(layout, n).expect("q level"));
                        if n[a] == 0 {
                            continue;
                        }
                        idx.copy_from_slice(n);
                        idx[a] -= 1;
                        axpy(&mut rhs, -lambda[k], q[k].get(layout, &idx).expect("q level"));
                        // Z_k(n)[j] = x_j p(n - e_a) + sum_i P_ji Z_k(n - e_a)[i].
                        let zk = &mut zr[z_off[k]..z_off[k] + b.phases * m_env];
                        let pm = p_ref.get(layout, &idx).expect("lower level");
                        let r1 = layout.rank(&idx);
                        let zp = &prev_z[r1 * stride + z_off[k]..r1 * stride + z_off[k] + b.phases * m_env];
                        for j in 0..b.phases {
                            axpy(&mut zk[j * m_env..(j + 1) * m_env], b.exit[j], pm);
                            for i in 0..b.phases {
                                let pji = b.p[j * b.phases + i];
                                if pji != 0.0 {
                                    axpy(&mut zk[j * m_env..(j + 1) * m_env], pji, &zp[i * m_env..(i + 1) * m_env]);
                                }
                            }
                        }
                        let mut s = vec![0.0; m_env];
                        for j in 0..b.phases {
                            axpy(&mut s, b.alpha[j], &zk[j * m_env..(j + 1) * m_env]);
                        }
                        gemm_acc(&mut rhs, &s, &dk[k], 1, m_env, m_env);
                    }
                    gemm_acc(dst, &rhs, &neg_c_inv, 1, m_env, m_env);
                });
        }
        for (r, chunk) in blk.chunks(m_env).enumerate() {
            if let Some((i, &v)) = chunk.iter().enumerate().find(|(_, &v)| v < -1e-8) {
                let _ = i;
                return Err(Error::NegativeMass {
                    index: coords[r * dims..(r + 1) * dims].to_vec(),
                    value: v,
                });
            }
        }
        p.push_level(layout, &blk);
        prev_z = z;
    }
    Ok(p)
}

/// Least-squares geometric fit to the level masses just above the
/// accuracy floor.
///
/// Past the support of the truncated departure distributions the level
/// masses stop decaying and settle at rounding noise, so the fit window
/// ends at `top`, the last level before the first one with mass below
/// `floor`. Means sum levels `0..=top` and add `correction`.
#[derive(Debug, Clone, Serialize)]
pub struct TailFit {
    pub top: usize,
    pub ratio: Option<f64>,
    /// Estimated `sum_{L > top} L Pr[|N| = L]`.
    pub correction: f64,
    /// Estimated `Pr[|N| > top]`.
    pub mass: f64,
    pub unbounded: bool,
}

pub fn fit_tail(level_mass: &[f64], floor: f64) -> TailFit {
    let n = level_mass.len();
    let top = level_mass.iter().position(|&m| m < floor).map_or(n, |p| p).max(1) - 1;
    let none = TailFit {
        top: n - 1,
        ratio: None,
        correction: 0.0,
        mass: 0.0,
        unbounded: false,
    };
    if top < 9 || level_mass[top - 9..=top].iter().any(|&y| y <= 0.0) {
        return none;
    }
    let window: Vec<(f64, f64)> = (top - 9..=top).map(|l| (l as f64, level_mass[l].ln())).collect();
    let xm = window.iter().map(|w| w.0).sum::<f64>() / 10.0;
    let ym = window.iter().map(|w| w.1).sum::<f64>() / 10.0;
    let sxy: f64 = window.iter().map(|w| (w.0 - xm) * (w.1 - ym)).sum();
    let sxx: f64 = window.iter().map(|w| (w.0 - xm).powi(2)).sum();
    let slope = sxy / sxx;
    let r = slope.exp();
    if r >= 0.999 {
        return TailFit {
            top,
            ratio: Some(r),
            correction: f64::NAN,
            mass: f64::NAN,
            unbounded: true,
        };
    }
    let t = top as f64;
    let head = (ym - slope * xm).exp() * r.powf(t + 1.0);
    TailFit {
        top,
        ratio: Some(r),
        correction: head * ((t + 1.0) / (1.0 - r) + r / (1.0 - r).powi(2)),
        mass: head / (1.0 - r),
        unbounded: false,
    }
}

/// Full analysis output.
#[derive(Debug, Clone)]
pub struct JointResult {
    pub mode: Mode,
    pub layout_dims: usize,
    pub summary: StationarySummary,
    pub ledger: TruncationLedger,
    pub q: Vec<Field>,
    pub p: Field,
    pub level_mass: Vec<f64>,
    /// Per-class means; `None` in total mode.
    pub mean_n_class: Option<Vec<f64>>,
    pub mean_n: Option<f64>,
    /// `sum_{L <= top} L Pr[|N| = L]` without the tail correction.
    pub mean_n_truncated: f64,
    pub tail: TailFit,
    pub bound_checks: Vec<BoundCheck>,
    pub mean_workload: f64,
    pub mean_workload_vector: Vec<f64>,
    pub mean_workload_fd_gap: f64,
    pub mean_waiting: Vec<f64>,
    pub q_mass: Vec<f64>,
    pub timings: Vec<(String, f64)>,
    layout: std::sync::Arc<Layout>,
}

impl JointResult {
    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// `p(n)` as a row, `None` outside the computed range.
    pub fn p_at(&self, n: &[u32]) -> Option<&[f64]> {
        self.p.get(&self.layout, n)
    }

    pub fn q_at(&self, k: usize, n: &[u32]) -> Option<&[f64]> {
        self.q[k].get(&self.layout, n)
    }

    /// Total-count distribution `p^(T)(L)` as rows, per level.
    pub fn total_rows(&self) -> Vec<Vec<f64>> {
        let m = self.summary.pi.len();
        (0..self.p.levels())
            .map(|l| {
                let mut acc = vec![0.0; m];
                for b in self.p.level(&self.layout, l).chunks(m) {
                    axpy(&mut acc, 1.0, b);
                }
                acc
            })
            .collect()
    }

    pub fn all_bounds_hold(&self) -> bool {
        self.bound_checks.iter().all(|b| b.passed)
    }
}

/// Runs the whole pipeline.
pub fn analyze(model: &ArrivalModel, services: &[ServiceLaw], mode: Mode, cfg: &EngineConfig) -> Result<JointResult> {
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut Vec<(String, f64)>| {
        timings.push((name.to_string(), clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };
    validate(model, services).into_result()?;
    let batches = model.ph_batches()?;
    let summary = stationary_summary(model, services)?;
    let mut coeffs = Coefficients::new(model, services)?;
    let mut workload = solve_workload(model, services, &summary, &mut coeffs, cfg.fixed_point)?;
    let fd = mean_workload_fd(model, services, &workload.pi, &workload.kappa, summary.rho)?;
    let fd_gap = (&fd - &workload.v1bar).abs().max();
    lap("workload", &mut timings);

    let cut = choose_cutoffs(model, services, &summary, &mut workload, &mut coeffs, cfg.eps, cfg.eps_f_factor, cfg.max_m)?;
    let eps_g = cfg.eps_g_ratio * cut.eps_f;
    let n_p = cfg.n_p.max(1);
    let n_g = choose_batch_cut(model, &batches, eps_g, n_p);

    let kk = model.num_classes();
    let m_env = model.env_dim();
    let (dims, axes): (usize, Vec<usize>) = match mode {
        Mode::Joint => (kk, (0..kk).collect()),
        Mode::Total => (1, vec![0; kk]),
    };
    let layout = std::sync::Arc::new(Layout::new(dims, n_p + 1));
    let gammas: Vec<Vec<f64>> = (0..kk)
        .map(|k| {
            coeffs.gamma(k, cut.m_max);
            coeffs.gamma_series(k).values()[..=cut.m_max].to_vec()
        })
        .collect();
    workload.v(cut.m_max);
    let v_series = workload.v_series()[..=cut.m_max].to_vec();

    let acc = run_f_accumulation(model, &batches, &gammas, &v_series, &cut, &n_g, &layout, &axes, n_p, cfg.max_stored_entries)?;
    lap("uniformized powers", &mut timings);

    let mut checks = Vec::new();
    for k in 0..kk {
        let rows = field_row_sums(&acc.a[k], m_env, m_env);
        let margin = rows.iter().map(|r| r - (1.0 - cfg.eps)).fold(f64::INFINITY, f64::min);
        checks.push(BoundCheck {
            name: "A mass > 1 - eps".into(),
            class: k + 1,
            margin,
            passed: margin > 0.0,
        });
        let vmass: f64 = acc.v[k].data().iter().sum();
        let margin = vmass - (1.0 - cfg.eps) * summary.lambda_batch[k];
        checks.push(BoundCheck {
            name: "v mass > (1 - eps) lambda_B".into(),
            class: k + 1,
            margin,
            passed: margin > 0.0,
        });
    }

    let mut gammas_f = Vec::new();
    let mut n_gamma = Vec::new();
    let mut gamma_short = Vec::new();
    for k in 0..kk {
        let (g, ng, ok) = gamma_field(batches[k], &acc.a[k], acc.n_a[k], cfg.eps, m_env, &layout, n_p)?;
        let b = batches[k];
        let mk = b.phases();
        let fund = inverse(&(Mat::identity(mk, mk) - b.p()), "(I - P)^-1")?;
        let upper = &fund * ones(mk);
        let corr = &fund * &fund * b.p() * ones(mk);
        let rows = field_row_sums(&g, mk * m_env, mk * m_env);
        let margin = rows
            .iter()
            .enumerate()
            .map(|(r, s)| s - (upper[r / m_env] - cfg.eps * corr[r / m_env]))
            .fold(f64::INFINITY, f64::min);
        checks.push(BoundCheck {
            name: "Gamma mass >= stop bound".into(),
            class: k + 1,
            margin,
            passed: margin >= 0.0 || b.is_single(),
        });
        let weight: Vec<f64> = kron(&Mat::from_row_slice(1, mk, b.alpha().as_slice()), &Mat::from_row_slice(1, m_env, &summary.pi))
            .iter()
            .copied()
            .collect();
        let mean_batch: f64 = weight.iter().zip(&rows).map(|(w, r)| w * r).sum();
        let margin = mean_batch - (b.mean() - 0.5 * b.second_factorial_moment() * cfg.eps);
        checks.push(BoundCheck {
            name: "Gamma batch mean >= E[G] - E[G(G-1)] eps / 2".into(),
            class: k + 1,
            margin,
            passed: margin >= -1e-12,
        });
        if !ok {
            gamma_short.push(k + 1);
        }
        n_gamma.push(ng);
        gammas_f.push(g);
    }
    lap("batch resolvent", &mut timings);

    let levels = n_p + 1;
    let q: Vec<Field> = (0..kk)
        .map(|k| assemble_q(&acc.v[k], &acc.a[k], &gammas_f[k], batches[k], summary.lambda[k], axes[k], m_env, &layout, levels))
        .collect();
    let q_mass: Vec<f64> = q.iter().map(|f| f.data().iter().sum()).collect();
    for (k, &mass) in q_mass.iter().enumerate() {
        let budget = 5.0 * cfg.eps * (1.0 + batches[k].mean());
        let margin = (budget - (1.0 - mass)).min(1.0 + 1e-9 - mass);
        checks.push(BoundCheck {
            name: "q mass within 5 eps (1 + E[G]) of one".into(),
            class: k + 1,
            margin,
            passed: margin > 0.0,
        });
    }
    lap("departure distributions", &mut timings);
    let p = assemble_p(model, &batches, &q, &summary.lambda, &axes, &layout, levels)?;
    lap("time-average distribution", &mut timings);

    let idle: f64 = p.block(0).iter().sum();
    let margin = 2.0 * cfg.eps - (idle - (1.0 - summary.rho)).abs();
    checks.push(BoundCheck {
        name: "p(0) e = 1 - rho within 2 eps".into(),
        class: 0,
        margin,
        passed: margin >= 0.0,
    });
    let total: f64 = p.data().iter().sum();
    checks.push(BoundCheck {
        name: "sum p(n) e <= 1 + 1e-9".into(),
        class: 0,
        margin: 1.0 + 1e-9 - total,
        passed: total <= 1.0 + 1e-9,
    });
    let n_f1 = acc.n_f.get(1).copied().unwrap_or(0);
    let growth = acc.n_f.windows(2).skip(1).map(|w| (w[0] + n_f1) as f64 - w[1] as f64).fold(0.0, f64::min);
    checks.push(BoundCheck {
        name: "n_F(m + 1) <= n_F(m) + n_F(1)".into(),
        class: 0,
        margin: growth,
        passed: growth >= 0.0,
    });

    let level_mass: Vec<f64> = (0..levels).map(|l| p.level(&layout, l).iter().sum()).collect();
    let tail = fit_tail(&level_mass, cfg.eps);
    let mean_trunc: f64 = level_mass[..=tail.top].iter().enumerate().map(|(l, m)| l as f64 * m).sum();
    let mean_n = if tail.unbounded { None } else { Some(mean_trunc + tail.correction) };
    let mean_n_class = match mode {
        Mode::Total => None,
        Mode::Joint => {
            let mut means = vec![0.0; kk];
            let mut last = vec![0.0; kk];
            for l in 0..=tail.top {
                let coords = layout.coords(l);
                for (r, b) in p.level(&layout, l).chunks(m_env).enumerate() {
                    let s: f64 = b.iter().sum();
                    for k in 0..kk {
                        let x = coords[r * kk + k] as f64 * s;
                        means[k] += x;
                        if l == tail.top {
                            last[k] += x;
                        }
                    }
                }
            }
            let last_total: f64 = last.iter().sum();
            if tail.unbounded {
                None
            } else {
                Some(
                    means
                        .iter()
                        .zip(&last)
                        .map(|(m, l)| {
                            let share = if last_total > 0.0 { l / last_total } else { 1.0 / kk as f64 };
                            m + share * tail.correction
                        })
                        .collect(),
                )
            }
        }
    };
    let mean_waiting_v: Vec<f64> = (0..kk).map(|k| mean_waiting(model, services, &summary, &workload.v1bar, k)).collect();

    let ledger = TruncationLedger {
        eps: cfg.eps,
        eps_f_bound: cut.eps_f_bound,
        eps_f: cut.eps_f,
        eps_g,
        m_gamma: cut.m_gamma.clone(),
        m_v: cut.m_v.clone(),
        m_max: cut.m_max,
        n_g,
        n_f: acc.n_f.clone(),
        n_a: acc.n_a.clone(),
        n_v: acc.n_v.clone(),
        n_gamma,
        n_p,
        f_entries_computed: acc.computed,
        f_entries_peak: acc.peak,
        f_mass_short: acc.mass_short.clone(),
        gamma_short,
    };
    Ok(JointResult {
        mode,
        layout_dims: dims,
        summary,
        ledger,
        q,
        p,
        level_mass,
        mean_n_class,
        mean_n,
        mean_n_truncated: mean_trunc,
        tail,
        bound_checks: checks,
        mean_workload: workload.mean(),
        mean_workload_vector: workload.v1bar.iter().copied().collect(),
        mean_workload_fd_gap: fd_gap,
        mean_waiting: mean_waiting_v,
        q_mass,
        timings,
        layout,
    })
}

/// Row sums of `sum_n field(n)` for blocks of shape `rows x cols`.
fn field_row_sums(f: &Field, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows];
    for b in f.data().chunks(rows * cols) {
        for (r, o) in out.iter_mut().enumerate() {
            *o += b[r * cols..(r + 1) * cols].iter().sum::<f64>();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;
    use crate::catalog::{example, Coupling, Services, LIGHT};
    use crate::linalg::mat_from_rows;
    use crate::model::ArrivalClass;

    fn mat(rows: &[&[f64]]) -> Mat {
        mat_from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn two_class_bounded() -> ArrivalModel {
        let b1 = PhBatch::new(Row::from_row_slice(&[0.5, 0.5]), mat(&[&[0.0, 0.5], &[0.0, 0.0]])).unwrap();
        let b2 = PhBatch::new(Row::from_row_slice(&[0.3, 0.7]), mat(&[&[0.0, 1.0], &[0.0, 0.0]])).unwrap();
        ArrivalModel::new(
            mat(&[&[-1.0, 0.3], &[0.3, -0.9]]),
            vec![
                ArrivalClass::phase_type(mat(&[&[0.3, 0.1], &[0.1, 0.2]]), b1),
                ArrivalClass::phase_type(mat(&[&[0.2, 0.1], &[0.1, 0.2]]), b2),
            ],
        )
        .unwrap()
    }

    type Poly = HashMap<(u32, u32), Mat>;

    fn poly_mul(a: &Poly, b: &Poly) -> Poly {
        let mut out: Poly = HashMap::new();
        for (&(i, j), x) in a {
            for (&(k, l), y) in b {
                let e = out.entry((i + k, j + l)).or_insert_with(|| Mat::zeros(x.nrows(), x.ncols()));
                *e += x * y;
            }
        }
        out
    }

    #[test]
    fn streamed_powers_match_naive_expansion() {
        let model = two_class_bounded();
        let theta = model.theta();
        let m_env = 2;
        // T(z) = I + (C + sum_k sum_n g_k(n) D_k z_k^n) / theta.
        let mut t: Poly = HashMap::new();
        t.insert((0, 0), Mat::identity(m_env, m_env) + model.c() / theta);
        for n in 1..=2u32 {
            t.insert((n, 0), model.class(0).batch_matrix(n as usize) / theta);
            t.insert((0, n), model.class(1).batch_matrix(n as usize) / theta);
        }
        let m_max = 6;
        let weights: Vec<f64> = (0..=m_max).map(|m| 1.0 / (m as f64 + 2.0)).collect();
        let mut expected: Poly = HashMap::new();
        let mut power: Poly = HashMap::from([((0, 0), Mat::identity(m_env, m_env))]);
        for w in &weights {
            for (k, v) in &power {
                let e = expected.entry(*k).or_insert_with(|| Mat::zeros(m_env, m_env));
                *e += v * *w;
            }
            power = poly_mul(&power, &t);
        }

        let batches = model.ph_batches().unwrap();
        // A negative eps_F makes the level mass target unreachable, so every
        // power is expanded to its full support.
        let cut = Cutoffs {
            eps: 1e-6,
            eps_f_bound: 1.0,
            eps_f: -1.0,
            m_gamma: vec![m_max, m_max],
            m_v: vec![0, 0],
            m_max,
        };
        let layout = Layout::new(2, 20);
        let acc = run_f_accumulation(
            &model,
            &batches,
            &[weights.clone(), weights.clone()],
            &[Row::zeros(m_env)],
            &cut,
            &[2, 2],
            &layout,
            &[0, 1],
            20,
            usize::MAX,
        )
        .unwrap();
        assert_eq!(acc.n_f, (0..=m_max).map(|m| 2 * m).collect::<Vec<_>>());
        let mut worst: f64 = 0.0;
        for ((i, j), want) in &expected {
            let got = acc.a[0].get(&layout, &[*i, *j]).unwrap();
            let got = Mat::from_row_slice(m_env, m_env, got);
            worst = worst.max((got - want).abs().max());
        }
        assert!(worst <= 1e-13, "max deviation {worst:e}");
        assert_eq!(acc.a[0].data(), acc.a[1].data());
    }

    #[test]
    fn md1_departures_match_embedded_chain() {
        let lambda = 0.5;
        let model = ArrivalModel::new(
            mat(&[&[-lambda]]),
            vec![ArrivalClass::phase_type(mat(&[&[lambda]]), PhBatch::single())],
        )
        .unwrap();
        let services = [ServiceLaw::Deterministic { value: 1.0 }];
        let cfg = EngineConfig {
            eps: 1e-13,
            n_p: 40,
            ..Default::default()
        };
        let r = analyze(&model, &services, Mode::Joint, &cfg).unwrap();
        // pi_{n+1} a_0 = pi_n - pi_0 a_n - sum_{j=1..n} pi_j a_{n+1-j}.
        let a: Vec<f64> = (0..30)
            .scan(1.0, |f, j| {
                if j > 0 {
                    *f *= lambda / j as f64;
                }
                Some((-lambda).exp() * *f)
            })
            .collect();
        let mut pi = vec![1.0 - lambda];
        for n in 0..12 {
            let mut x = pi[n] - pi[0] * a[n];
            for j in 1..=n {
                x -= pi[j] * a[n + 1 - j];
            }
            pi.push(x / a[0]);
        }
        for (n, want) in pi.iter().enumerate() {
            let got = r.q_at(0, &[n as u32]).unwrap()[0];
            assert!((got - want).abs() <= 1e-10, "n = {n}: {got} vs {want}");
        }
    }

    #[test]
    fn single_batches_give_identity_resolvent() {
        let layout = Layout::new(2, 5);
        let mut a = Field::new(4);
        a.push_level(&layout, &[0.5, 0.0, 0.0, 0.5]);
        let (g, n, ok) = gamma_field(&PhBatch::single(), &a, 0, 1e-6, 2, &layout, 5).unwrap();
        assert!(ok);
        assert_eq!(n, 0);
        assert_eq!(g.levels(), 1);
        assert_eq!(g.block(0), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn scalar_resolvent_is_geometric_series() {
        let layout = Layout::new(1, 5);
        let mut a = Field::new(1);
        a.push_level(&layout, &[0.6]);
        let (g, _, _) = gamma_field(&PhBatch::geometric(0.5), &a, 0, 1e-6, 1, &layout, 5).unwrap();
        assert!((g.block(0)[0] - 1.0 / (1.0 - 0.3)).abs() < 1e-15);
    }

    #[test]
    fn batch_cut_examples() {
        let model = ArrivalModel::new(
            mat(&[&[-1.0]]),
            vec![ArrivalClass::phase_type(mat(&[&[1.0]]), PhBatch::geometric(0.5))],
        )
        .unwrap();
        let b = PhBatch::geometric(0.5);
        assert_eq!(choose_batch_cut(&model, &[&b], 1e-3, 300), vec![10]);
        assert_eq!(choose_batch_cut(&model, &[&b], 1e-3, 4), vec![4]);
        let one = PhBatch::single();
        assert_eq!(choose_batch_cut(&model, &[&one], 1e-12, 300), vec![1]);
    }

    #[test]
    fn gamma_cutoff_matches_direct_poisson_sum() {
        let model = ArrivalModel::new(
            mat(&[&[-2.1, 2.0], &[0.05, -0.1]]),
            vec![ArrivalClass::phase_type(mat(&[&[0.1, 0.0], &[0.0, 0.05]]), PhBatch::single())],
        )
        .unwrap();
        let services = [ServiceLaw::Deterministic { value: 1.0 }];
        let summary = stationary_summary(&model, &services).unwrap();
        assert!((summary.theta - 2.1).abs() < 1e-15);
        let mut coeffs = Coefficients::new(&model, &services).unwrap();
        let mut w = solve_workload(&model, &services, &summary, &mut coeffs, FixedPointConfig::default()).unwrap();
        let eps = 1e-6;
        let cut = choose_cutoffs(&model, &services, &summary, &mut w, &mut coeffs, eps, 0.5, 10_000).unwrap();
        let (mut acc, mut term, mut m) = (0.0, (-2.1f64).exp(), 0);
        loop {
            acc += term * (1.0 - cut.eps_f).powi(m as i32);
            if acc > 1.0 - eps {
                break;
            }
            m += 1;
            term *= 2.1 / m as f64;
        }
        assert_eq!(cut.m_gamma[0], m);
        assert!(cut.eps_f < eps * cut.eps_f_bound);
    }

    #[test]
    fn tail_fit_recovers_a_geometric_tail() {
        let r: f64 = 0.8;
        let masses: Vec<f64> = (0..=60).map(|l| 0.2 * r.powi(l)).collect();
        let fit = fit_tail(&masses, 1e-300);
        assert_eq!(fit.top, 60);
        let exact: f64 = (61..4000).map(|l| l as f64 * 0.2 * r.powi(l)).sum();
        assert!((fit.correction - exact).abs() < 1e-12 * exact.max(1e-300) + 1e-18);
        assert!((fit.ratio.unwrap() - r).abs() < 1e-12);
    }

    #[test]
    fn flat_tail_is_flagged() {
        let fit = fit_tail(&[0.1; 40], 1e-9);
        assert!(fit.unbounded);
    }

    #[test]
    fn output_does_not_depend_on_worker_count() {
        let (model, services) = example(Coupling::P, Services::Gi, LIGHT, 2.0).build().unwrap();
        let cfg = EngineConfig {
            n_p: 40,
            ..Default::default()
        };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| analyze(&model, &services, Mode::Joint, &cfg).unwrap())
        };
        let a = run(1);
        let b = run(3);
        assert_eq!(a.p.data(), b.p.data());
        assert_eq!(a.q[1].data(), b.q[1].data());
        assert_eq!(a.ledger.f_entries_computed, b.ledger.f_entries_computed);
    }
}
