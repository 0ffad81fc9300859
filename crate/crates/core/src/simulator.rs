//! Discrete-event simulation of the same queue, used as an independent
//! check on the analytical results.
//!
//! The environment sojourns in state `i` for an exponential time with rate
//! `-C_ii`, then picks a transition: a plain move (`C_ij`) or a class-`k`
//! batch (`D_k[i][j]`). Batch sizes are drawn from the phase-type law and
//! every customer gets its own service time at arrival. Service is FIFO;
//! members of a batch queue in arrival order.

use std::collections::{BTreeMap, VecDeque};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, Gamma};
use rayon::prelude::*;
use serde::Serialize;

use crate::model::{ArrivalModel, PhBatch, ServiceLaw};

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SimConfig {
    /// Simulated time per replication, warmup included.
    pub horizon: f64,
    pub warmup: f64,
    pub replications: usize,
    pub seed: u64,
    /// Largest per-class count kept in the histogram.
    pub hist_cap: u32,
}

impl SimConfig {
    /// Warmup of 10% of the horizon.
    pub fn new(horizon: f64, replications: usize, seed: u64) -> Self {
        Self {
            horizon,
            warmup: 0.1 * horizon,
            replications,
            seed,
            hist_cap: 30,
        }
    }
}

/// Mean over replications with its standard error (`None` for one run).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: Option<f64>,
}

impl Estimate {
    fn from_samples(x: &[f64]) -> Self {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let se = (x.len() > 1).then(|| {
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        });
        Self { mean, se }
    }

    /// `(value - mean) / se`, or `None` without a usable standard error.
    pub fn z_score(&self, value: f64) -> Option<f64> {
        match self.se {
            Some(se) if se > 0.0 => Some((value - self.mean) / se),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SimEstimate {
    pub mean_n_class: Vec<Estimate>,
    pub mean_n: Estimate,
    pub mean_workload: Estimate,
    pub p_idle: Estimate,
    /// Customers per unit time, per class.
    pub arrival_rate: Vec<Estimate>,
    /// Time fraction spent at each count vector with every count at most
    /// the cap, keyed by the count vector.
    pub histogram: Vec<(Vec<u32>, Estimate)>,
    pub events: u64,
}

/// Per-replication raw statistics.
#[derive(Debug, Clone, Default)]
struct Run {
    mean_n_class: Vec<f64>,
    mean_v: f64,
    p_idle: f64,
    arrivals: Vec<f64>,
    hist: BTreeMap<Vec<u32>, f64>,
    events: u64,
}

enum Sampler {
    Fixed(f64),
    Exp(Exp<f64>),
    Gamma(Gamma<f64>),
    HyperExp(WeightedIndex<f64>, Vec<Exp<f64>>),
    Points(WeightedIndex<f64>, Vec<f64>),
}

impl Sampler {
    fn new(law: &ServiceLaw) -> Self {
        match law {
            ServiceLaw::Deterministic { value } => Self::Fixed(*value),
            ServiceLaw::Exponential { rate } => Self::Exp(Exp::new(*rate).expect("validated rate")),
            ServiceLaw::Erlang { shape, rate } => {
                Self::Gamma(Gamma::new(f64::from(*shape), 1.0 / rate).expect("validated Erlang"))
            }
            ServiceLaw::HyperExponential { weights, rates } => Self::HyperExp(
                WeightedIndex::new(weights).expect("validated weights"),
                rates.iter().map(|r| Exp::new(*r).expect("validated rate")).collect(),
            ),
            ServiceLaw::DiscretePointMixture { points, weights } => {
                Self::Points(WeightedIndex::new(weights).expect("validated weights"), points.clone())
            }
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match self {
            Self::Fixed(v) => *v,
            Self::Exp(d) => d.sample(rng),
            Self::Gamma(d) => d.sample(rng),
            Self::HyperExp(w, d) => d[w.sample(rng)].sample(rng),
            Self::Points(w, p) => p[w.sample(rng)],
        }
    }
}

struct BatchSampler {
    start: WeightedIndex<f64>,
    /// Row `j`: weights of moving to each phase, then of finishing.
    steps: Vec<Option<WeightedIndex<f64>>>,
    phases: usize,
}

impl BatchSampler {
    fn new(b: &PhBatch) -> Self {
        let exit = b.exit();
        let phases = b.phases();
        let steps = (0..phases)
            .map(|j| {
                let mut w: Vec<f64> = (0..phases).map(|i| b.p()[(j, i)].max(0.0)).collect();
                w.push(exit[j].max(0.0));
                if w[..phases].iter().all(|&x| x == 0.0) {
                    None
                } else {
                    Some(WeightedIndex::new(w).expect("substochastic row"))
                }
            })
            .collect();
        Self {
            start: WeightedIndex::new(b.alpha().iter().copied()).expect("probability vector"),
            steps,
            phases,
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        let mut phase = self.start.sample(rng);
        let mut n = 1;
        while let Some(step) = &self.steps[phase] {
            let next = step.sample(rng);
            if next == self.phases {
                break;
            }
            phase = next;
            n += 1;
        }
        n
    }
}

/// What a transition out of an environment state does.
#[derive(Clone, Copy)]
struct Move {
    to: usize,
    class: Option<usize>,
}

fn replicate(model: &ArrivalModel, services: &[ServiceLaw], cfg: &SimConfig, rep: u64) -> Run {
    let m = model.env_dim();
    let kk = model.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(rep);

    let batches: Vec<BatchSampler> = model
        .ph_batches()
        .expect("simulation needs phase-type batch laws")
        .iter()
        .map(|b| BatchSampler::new(b))
        .collect();
    let service: Vec<Sampler> = services.iter().map(Sampler::new).collect();
    let mut sojourn = Vec::new();
    let mut moves: Vec<(Vec<Move>, WeightedIndex<f64>)> = Vec::new();
    for i in 0..m {
        let mut list = Vec::new();
        let mut w = Vec::new();
        for j in 0..m {
            if j != i && model.c()[(i, j)] > 0.0 {
                list.push(Move { to: j, class: None });
                w.push(model.c()[(i, j)]);
            }
            for (k, cl) in model.classes().iter().enumerate() {
                if cl.rate()[(i, j)] > 0.0 {
                    list.push(Move { to: j, class: Some(k) });
                    w.push(cl.rate()[(i, j)]);
                }
            }
        }
        sojourn.push(Exp::new(-model.c()[(i, i)]).expect("negative diagonal"));
        moves.push((list, WeightedIndex::new(w).expect("state has a transition")));
    }

    let mut run = Run {
        mean_n_class: vec![0.0; kk],
        arrivals: vec![0.0; kk],
        ..Default::default()
    };
    let mut env = 0usize;
    let mut queue: VecDeque<(usize, f64)> = VecDeque::new();
    let mut counts = vec![0u32; kk];
    let mut workload = 0.0f64;
    let mut t = 0.0f64;
    let mut next_env = sojourn[env].sample(&mut rng);
    let mut next_dep = f64::INFINITY;
    let span = cfg.horizon - cfg.warmup;

    loop {
        let next = next_env.min(next_dep).min(cfg.horizon);
        // Accumulate the state held on [t, next) clipped to the window.
        let a = t.max(cfg.warmup);
        if next > a {
            let dt = next - a;
            let total: u32 = counts.iter().sum();
            for (acc, &c) in run.mean_n_class.iter_mut().zip(&counts) {
                *acc += f64::from(c) * dt;
            }
            if total == 0 {
                run.p_idle += dt;
            }
            // Workload at `a` is V(t) - (a - t), then it falls at unit rate.
            let v0 = (workload - (a - t)).max(0.0);
            let busy = v0.min(dt);
            run.mean_v += v0 * busy - 0.5 * busy * busy;
            if counts.iter().all(|&c| c <= cfg.hist_cap) {
                *run.hist.entry(counts.clone()).or_insert(0.0) += dt;
            }
        }
        workload = (workload - (next - t)).max(0.0);
        t = next;
        if t >= cfg.horizon {
            break;
        }
        run.events += 1;
        if next_dep <= next_env {
            let (k, _) = queue.pop_front().expect("departure from a nonempty queue");
            counts[k] -= 1;
            next_dep = queue.front().map_or(f64::INFINITY, |&(_, s)| t + s);
        } else {
            let (list, pick) = &moves[env];
            let mv = list[pick.sample(&mut rng)];
            env = mv.to;
            if let Some(k) = mv.class {
                let n = batches[k].sample(&mut rng);
                let was_idle = queue.is_empty();
                for _ in 0..n {
                    let s = service[k].sample(&mut rng);
                    queue.push_back((k, s));
                    workload += s;
                }
                counts[k] += n as u32;
                if t >= cfg.warmup {
                    run.arrivals[k] += n as f64;
                }
                if was_idle {
                    next_dep = t + queue.front().expect("just filled").1;
                }
            }
            next_env = t + sojourn[env].sample(&mut rng);
        }
    }
    for x in run.mean_n_class.iter_mut().chain(run.arrivals.iter_mut()) {
        *x /= span;
    }
    run.mean_v /= span;
    run.p_idle /= span;
    for v in run.hist.values_mut() {
        *v /= span;
    }
    run
}

/// Runs `cfg.replications` independent replications in parallel.
///
/// Replication `r` uses the ChaCha8 stream `r` under `cfg.seed`, so results
/// do not depend on the worker count.
pub fn simulate(model: &ArrivalModel, services: &[ServiceLaw], cfg: &SimConfig) -> SimEstimate {
    assert!(cfg.replications >= 1, "at least one replication");
    assert!(cfg.horizon > cfg.warmup && cfg.warmup >= 0.0, "horizon must exceed warmup");
    let runs: Vec<Run> = (0..cfg.replications as u64)
        .into_par_iter()
        .map(|r| replicate(model, services, cfg, r))
        .collect();
    let kk = model.num_classes();
    let col = |f: &dyn Fn(&Run) -> f64| Estimate::from_samples(&runs.iter().map(f).collect::<Vec<_>>());
    let mut keys: Vec<Vec<u32>> = runs.iter().flat_map(|r| r.hist.keys().cloned()).collect();
    keys.sort();
    keys.dedup();
    let histogram = keys
        .into_iter()
        .map(|key| {
            let est = col(&|r: &Run| r.hist.get(&key).copied().unwrap_or(0.0));
            (key, est)
        })
        .collect();
    SimEstimate {
        mean_n_class: (0..kk).map(|k| col(&|r: &Run| r.mean_n_class[k])).collect(),
        mean_n: col(&|r: &Run| r.mean_n_class.iter().sum()),
        mean_workload: col(&|r: &Run| r.mean_v),
        p_idle: col(&|r: &Run| r.p_idle),
        arrival_rate: (0..kk).map(|k| col(&|r: &Run| r.arrivals[k])).collect(),
        histogram,
        events: runs.iter().map(|r| r.events).sum(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat;
    use crate::model::ArrivalClass;

    fn mm1() -> (ArrivalModel, Vec<ServiceLaw>) {
        let model = ArrivalModel::new(
            Mat::from_element(1, 1, -0.5),
            vec![ArrivalClass::phase_type(Mat::from_element(1, 1, 0.5), PhBatch::single())],
        )
        .unwrap();
        (model, vec![ServiceLaw::Exponential { rate: 1.0 }])
    }

    #[test]
    fn mm1_mean_and_idle_fraction() {
        let (model, services) = mm1();
        let est = simulate(&model, &services, &SimConfig::new(2e5, 8, 7));
        let within = |e: &Estimate, want: f64| (e.mean - want).abs() <= 4.0 * e.se.unwrap();
        assert!(within(&est.mean_n, 1.0), "{:?}", est.mean_n);
        assert!(within(&est.p_idle, 0.5), "{:?}", est.p_idle);
        // E[V] = rho / (mu - lambda) for M/M/1.
        assert!(within(&est.mean_workload, 1.0), "{:?}", est.mean_workload);
        assert!(within(&est.arrival_rate[0], 0.5));
    }

    #[test]
    fn same_seed_same_estimate() {
        let (model, services) = mm1();
        let cfg = SimConfig::new(2e3, 3, 11);
        let a = simulate(&model, &services, &cfg);
        let b = simulate(&model, &services, &cfg);
        assert_eq!(a.mean_n, b.mean_n);
        assert_eq!(a.histogram, b.histogram);
    }

    #[test]
    fn single_replication_has_no_standard_error() {
        let (model, services) = mm1();
        let est = simulate(&model, &services, &SimConfig::new(1e3, 1, 1));
        assert!(est.mean_n.se.is_none());
    }

    #[test]
    fn batch_sizes_follow_the_law() {
        let b = PhBatch::new(
            crate::linalg::Row::from_row_slice(&[0.5, 0.5]),
            crate::linalg::mat_from_rows(&[vec![0.0, 0.5], vec![0.0, 0.0]]).unwrap(),
        )
        .unwrap();
        let s = BatchSampler::new(&b);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let twos = (0..n).filter(|_| s.sample(&mut rng) == 2).count() as f64 / n as f64;
        assert!((twos - 0.25).abs() < 0.005, "{twos}");
    }
}
