#![allow(dead_code)]

use meacorr::correction::RawMoments;
use meacorr::data::{ErrorModelSpec, ProxyPanel, ProxySpec};
use meacorr::outcome::Family;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

/// Generative parameters of a proxy design, independent of the estimator.
#[derive(Debug, Clone)]
pub struct Truth {
    pub mu_x: DVector<f64>,
    pub sigma_xx: DMatrix<f64>,
    pub eta0: Vec<DVector<f64>>,
    pub eta1: Vec<DVector<f64>>,
    pub m: Vec<DMatrix<f64>>,
    /// `cov(Z, X)`, `q x p`.
    pub sigma_zx: DMatrix<f64>,
    pub mu_z: DVector<f64>,
    pub sigma_zz: DMatrix<f64>,
}

impl Truth {
    pub fn k(&self) -> usize {
        self.eta0.len()
    }

    pub fn p(&self) -> usize {
        self.mu_x.len()
    }

    /// Exact population moments of the proxies implied by the model
    /// `X*_j = eta0_j + diag(eta1_j) X + e_j` with independent errors.
    pub fn population_moments(&self) -> RawMoments {
        let (k, p, q) = (self.k(), self.p(), self.sigma_zx.nrows());
        let d: Vec<DMatrix<f64>> = self.eta1.iter().map(DMatrix::from_diagonal).collect();
        let mu = (0..k).map(|j| &self.eta0[j] + &d[j] * &self.mu_x).collect();
        let sigma = (0..k)
            .map(|j| {
                (0..k)
                    .map(|l| {
                        let mut s = &d[j] * &self.sigma_xx * &d[l];
                        if j == l {
                            s += &self.m[j];
                        }
                        s
                    })
                    .collect()
            })
            .collect();
        let sigma_zj = (0..k).map(|j| &self.sigma_zx * &d[j]).collect();
        RawMoments {
            k,
            p,
            q,
            n: 1_000_000,
            mu,
            sigma,
            mu_z: self.mu_z.clone(),
            sigma_zz: self.sigma_zz.clone(),
            sigma_zj,
            n_j: vec![1_000_000; k],
            n_jl: vec![vec![1_000_000; k]; k],
        }
    }
}

fn random_spd(rng: &mut ChaCha8Rng, p: usize, floor: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(p, p) * floor
}

/// Random design with a valid identification spec. With covariates every
/// component of X is correlated with Z.
pub fn random_design(seed: u64, k: usize, p: usize, with_z: bool) -> (Truth, ErrorModelSpec) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = if with_z { 2 } else { 0 };
    let need_j1 = if with_z { 1 } else { 2 };
    let mut proxies = Vec::with_capacity(k);
    for j in 0..k {
        let in_j1 = j < need_j1 || rng.random_bool(0.4);
        let in_j0 = j == 0 || rng.random_bool(0.5);
        proxies.push(ProxySpec::with_flags(in_j0, in_j1));
    }
    let spec = ErrorModelSpec { proxies };
    let mu_x = DVector::from_fn(p, |_, _| rng.random_range(-2.0..3.0));
    let sigma_xx = random_spd(&mut rng, p, 0.5);
    let eta0 = (0..k)
        .map(|j| {
            if spec.proxies[j].in_j0 {
                DVector::zeros(p)
            } else {
                DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0))
            }
        })
        .collect();
    let eta1 = (0..k)
        .map(|j| {
            if spec.proxies[j].in_j1 {
                DVector::from_element(p, 1.0)
            } else {
                DVector::from_fn(p, |_, _| rng.random_range(0.4..1.8))
            }
        })
        .collect();
    let m = (0..k).map(|_| random_spd(&mut rng, p, 0.1) * 0.5).collect();
    let sigma_zx = DMatrix::from_fn(q, p, |_, _| {
        let v: f64 = rng.random_range(0.2..0.8);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    });
    let mu_z = DVector::from_fn(q, |_, _| rng.random_range(-1.0..1.0));
    let sigma_zz = random_spd(&mut rng, q, 1.0);
    (
        Truth {
            mu_x,
            sigma_xx,
            eta0,
            eta1,
            m,
            sigma_zx,
            mu_z,
            sigma_zz,
        },
        spec,
    )
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

/// Three identical error-free copies of a two-component covariate, with
/// one covariate correlated with it.
pub fn error_free_panel(n: usize, family: Family, seed: u64) -> ProxyPanel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, 2, |_, c| {
        let e: f64 = StandardNormal.sample(&mut rng);
        1.0 + c as f64 + e
    });
    let z = DMatrix::from_fn(n, 1, |i, _| 0.3 * x[(i, 0)] + { let e: f64 = StandardNormal.sample(&mut rng); e });
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let eta = 0.2 + 0.5 * x[(i, 0)] - 0.4 * x[(i, 1)] + 0.3 * z[(i, 0)];
            let e: f64 = StandardNormal.sample(&mut rng);
            match family {
                Family::Linear => eta + e,
                _ => {
                    if e < 1.5 * eta - 0.3 {
                        1.0
                    } else {
                        0.0
                    }
                }
            }
        })
        .collect();
    ProxyPanel::new(y, z, vec![x.clone(), x.clone(), x], &vec![vec![true; 3]; n]).unwrap()
}

/// Every subject appears once per ordering of its replicates, which makes
/// pairwise moments exchangeable across proxies.
pub fn symmetrised_panel(n: usize, with_z: bool, seed: u64) -> ProxyPanel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let rows = n * perms.len();
    let mut proxies = vec![DMatrix::zeros(rows, 2); 3];
    let q = usize::from(with_z);
    let mut z = DMatrix::zeros(rows, q);
    let mut y = vec![0.0; rows];
    for i in 0..n {
        let x: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
        let zi: f64 = StandardNormal.sample(&mut rng);
        let zi = 0.5 * x[0] + zi;
        let reps: Vec<Vec<f64>> = (0..3)
            .map(|_| x.iter().map(|v| v + 0.8 * { let e: f64 = StandardNormal.sample(&mut rng); e }).collect())
            .collect();
        let e: f64 = StandardNormal.sample(&mut rng);
        let yi = 1.0 + x[0] - 2.0 * x[1] + 0.5 * zi + e;
        for (t, perm) in perms.iter().enumerate() {
            let r = i * perms.len() + t;
            for j in 0..3 {
                for c in 0..2 {
                    proxies[j][(r, c)] = reps[perm[j]][c];
                }
            }
            if with_z {
                z[(r, 0)] = zi;
            }
            y[r] = yi;
        }
    }
    ProxyPanel::new(y, z, proxies, &vec![vec![true; 3]; rows]).unwrap()
}

