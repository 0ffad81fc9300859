//! The two-class example family: batch interrupted Poisson streams with
//! geometric batches of mean `g`, combined three ways.
//!
//! Each class on its own alternates between an on state, where batches
//! arrive at rate `2 lambda_k / g`, and an off state; both switch at rate
//! 0.1. The combinations are:
//!
//! * `P`: both classes share one on/off environment.
//! * `I`: independent environments (product state space).
//! * `N`: one environment; class 1 arrives in state 1 and class 2 in
//!   state 2, so they never overlap.
//!
//! Services are either class-dependent deterministic (1 and 4) or
//! identical two-point mixtures with the same overall service law.

use serde::Serialize;

use crate::modelfile::{BatchSpec, ClassSpec, ModelFile};
use crate::model::ServiceLaw;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Coupling {
    P,
    I,
    N,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Services {
    /// Deterministic 1 for class 1 and 4 for class 2.
    Gd,
    /// The mixture {1 w.p. lambda_1 / lambda, 4 w.p. lambda_2 / lambda} for both.
    Gi,
}

pub const COUPLINGS: [Coupling; 3] = [Coupling::P, Coupling::I, Coupling::N];
pub const SERVICES: [Services; 2] = [Services::Gd, Services::Gi];

/// Rates of the two reference workloads.
pub const LIGHT: (f64, f64) = (0.15, 0.15);
pub const SKEWED: (f64, f64) = (0.4, 0.1);

const SWITCH: f64 = 0.1;

pub fn case_name(c: Coupling, s: Services) -> String {
    let c = match c {
        Coupling::P => "p",
        Coupling::I => "i",
        Coupling::N => "n",
    };
    let s = match s {
        Services::Gd => "gd",
        Services::Gi => "gi",
    };
    format!("{c}_{s}")
}

fn diag2(a: f64, b: f64) -> Vec<Vec<f64>> {
    vec![vec![a, 0.0], vec![0.0, b]]
}

fn kron(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (ra, rb) = (a.len(), b.len());
    let mut out = vec![vec![0.0; ra * rb]; ra * rb];
    for i in 0..ra {
        for j in 0..ra {
            for k in 0..rb {
                for l in 0..rb {
                    out[i * rb + k][j * rb + l] = a[i][j] * b[k][l];
                }
            }
        }
    }
    out
}

fn eye(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect()
}

/// The model with rates `(lambda_1, lambda_2)` and mean batch size `g >= 1`.
pub fn example(c: Coupling, s: Services, rates: (f64, f64), g: f64) -> ModelFile {
    let (l1, l2) = rates;
    let r1 = 2.0 * l1 / g;
    let r2 = 2.0 * l2 / g;
    let (cm, d1, d2) = match c {
        Coupling::P => (
            vec![vec![-(r1 + r2) - SWITCH, SWITCH], vec![SWITCH, -SWITCH]],
            diag2(r1, 0.0),
            diag2(r2, 0.0),
        ),
        Coupling::N => (
            vec![vec![-r1 - SWITCH, SWITCH], vec![SWITCH, -r2 - SWITCH]],
            diag2(r1, 0.0),
            diag2(0.0, r2),
        ),
        Coupling::I => {
            let c1 = vec![vec![-r1 - SWITCH, SWITCH], vec![SWITCH, -SWITCH]];
            let c2 = vec![vec![-r2 - SWITCH, SWITCH], vec![SWITCH, -SWITCH]];
            let mut cm = kron(&c1, &eye(2));
            let right = kron(&eye(2), &c2);
            for (row, add) in cm.iter_mut().zip(&right) {
                for (x, y) in row.iter_mut().zip(add) {
                    *x += y;
                }
            }
            (cm, kron(&diag2(r1, 0.0), &eye(2)), kron(&eye(2), &diag2(r2, 0.0)))
        }
    };
    let env_dim = cm.len();
    let (h1, h2) = match s {
        Services::Gd => (
            ServiceLaw::Deterministic { value: 1.0 },
            ServiceLaw::Deterministic { value: 4.0 },
        ),
        Services::Gi => {
            let mix = ServiceLaw::DiscretePointMixture {
                points: vec![1.0, 4.0],
                weights: vec![l1 / (l1 + l2), l2 / (l1 + l2)],
            };
            (mix.clone(), mix)
        }
    };
    let batch = BatchSpec {
        alpha: vec![1.0],
        p: vec![vec![1.0 - 1.0 / g]],
    };
    let class = |d: Vec<Vec<f64>>, service: ServiceLaw| ClassSpec {
        d: Some(d),
        batch: Some(batch.clone()),
        d_seq: None,
        service,
    };
    ModelFile {
        env_dim,
        c: cm,
        classes: vec![class(d1, h1), class(d2, h2)],
    }
}

/// Every shipped model file: `(file name, model)`.
pub fn shipped() -> Vec<(String, ModelFile)> {
    let mut out = Vec::new();
    for g in [1u32, 2, 3] {
        for c in COUPLINGS {
            for s in SERVICES {
                out.push((
                    format!("ex1_{}_g{g}.toml", case_name(c, s)),
                    example(c, s, LIGHT, f64::from(g)),
                ));
            }
        }
    }
    for c in COUPLINGS {
        for s in SERVICES {
            out.push((format!("ex2_{}_g1.toml", case_name(c, s)), example(c, s, SKEWED, 1.0)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::stationary_summary;

    #[test]
    fn every_case_has_the_reference_load() {
        for c in COUPLINGS {
            for s in SERVICES {
                let (m, sv) = example(c, s, LIGHT, 2.0).build().unwrap();
                let sum = stationary_summary(&m, &sv).unwrap();
                assert!((sum.rho - 0.75).abs() < 1e-12, "{c:?} {s:?}: {}", sum.rho);
                assert!((sum.lambda[0] - 0.15).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shared_environment_is_symmetric_two_state() {
        let (m, sv) = example(Coupling::P, Services::Gd, LIGHT, 1.0).build().unwrap();
        let sum = stationary_summary(&m, &sv).unwrap();
        assert!((sum.pi[0] - 0.5).abs() < 1e-12);
        assert!((sum.rho_k[0] - 0.15).abs() < 1e-12);
        assert!((sum.rho_k[1] - 0.6).abs() < 1e-12);
    }
}
