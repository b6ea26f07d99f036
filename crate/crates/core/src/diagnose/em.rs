//! Expectation-maximization for the wrong-response mixture.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Covariance, MixtureModel, WrongResponseFeature};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    #[default]
    Diagonal,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub k: usize,
    /// Dirichlet pseudo-counts; empty means all ones.
    pub alpha: Vec<f64>,
    pub seed: u64,
    pub max_iter: usize,
    /// Stop when the relative objective improvement drops below this.
    pub tol: f64,
    pub cov_floor: f64,
    pub covariance: CovarianceKind,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            k: 2,
            alpha: Vec::new(),
            seed: 0,
            max_iter: 200,
            tol: 1e-8,
            cov_floor: 1e-6,
            covariance: CovarianceKind::Diagonal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmFit {
    pub model: MixtureModel,
    /// Objective after each E-step: observed-data log-likelihood plus the
    /// log Dirichlet prior on the mixing weights (plus the covariance prior
    /// for full covariances). Equal to the plain log-likelihood when every
    /// pseudo-count is 1 and covariances are diagonal.
    pub objective_trace: Vec<f64>,
    /// Trace indices right after a component was re-seeded; monotonicity is
    /// only guaranteed between consecutive restarts.
    pub reseeds: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

impl EmFit {
    /// True when the objective never drops by more than a relative `1e-9`
    /// between restarts.
    pub fn is_monotone(&self) -> bool {
        self.objective_trace.windows(2).enumerate().all(|(i, w)| {
            self.reseeds.contains(&(i + 1)) || w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0)
        })
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp(data: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = data.len();
    let mut centers = vec![data[rng.random_range(0..n)].to_vec()];
    let mut nearest: Vec<f64> = data.iter().map(|x| sq_dist(x, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in nearest.iter().enumerate() {
                if target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = data[idx].to_vec();
        for (i, x) in data.iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(x, &c));
        }
        centers.push(c);
    }
    centers
}

fn global_variance(data: &[&[f64]], floor: f64) -> Vec<f64> {
    let n = data.len() as f64;
    let dim = data[0].len();
    (0..dim)
        .map(|j| {
            let mean = data.iter().map(|x| x[j]).sum::<f64>() / n;
            (data.iter().map(|x| (x[j] - mean).powi(2)).sum::<f64>() / n).max(floor)
        })
        .collect()
}

struct Stats {
    resp: Vec<Vec<f64>>,
    log_likelihood: f64,
}

fn e_step(model: &MixtureModel, data: &[&[f64]]) -> Result<Stats> {
    let dens = model.densities()?;
    let log_w: Vec<f64> = model.weights.iter().map(|w| w.ln()).collect();
    let mut resp = Vec::with_capacity(data.len());
    let mut ll = 0.0;
    let mut row = vec![0.0; dens.len()];
    for x in data {
        for (m, d) in dens.iter().enumerate() {
            row[m] = log_w[m] + d.log_pdf(x);
        }
        let lse = super::log_sum_exp(&row);
        ll += lse;
        resp.push(row.iter().map(|l| (l - lse).exp()).collect());
    }
    Ok(Stats {
        resp,
        log_likelihood: ll,
    })
}

fn log_prior(model: &MixtureModel, cfg: &EmConfig) -> f64 {
    let mut total: f64 = model
        .weights
        .iter()
        .zip(&model.dirichlet_alpha)
        .map(|(w, a)| if *a == 1.0 { 0.0 } else { (a - 1.0) * w.ln() })
        .sum();
    if cfg.covariance == CovarianceKind::Full {
        for c in &model.covariances {
            if let Covariance::Full(m) = c {
                let mat = nalgebra::DMatrix::from_fn(m.len(), m.len(), |i, j| m[i][j]);
                if let Some(inv) = mat.try_inverse() {
                    total -= 0.5 * cfg.cov_floor * inv.trace();
                }
            }
        }
    }
    total
}

fn m_step(model: &mut MixtureModel, data: &[&[f64]], resp: &[Vec<f64>], cfg: &EmConfig) {
    let n = data.len() as f64;
    let k = model.means.len();
    let dim = data[0].len();
    let alpha_total: f64 = model.dirichlet_alpha.iter().sum();
    for m in 0..k {
        let nm: f64 = resp.iter().map(|r| r[m]).sum();
        let safe_nm = nm.max(f64::MIN_POSITIVE);
        let mut mean = vec![0.0; dim];
        for (x, r) in data.iter().zip(resp) {
            for j in 0..dim {
                mean[j] += r[m] * x[j];
            }
        }
        mean.iter_mut().for_each(|v| *v /= safe_nm);
        model.covariances[m] = match cfg.covariance {
            CovarianceKind::Diagonal => {
                let mut var = vec![0.0; dim];
                for (x, r) in data.iter().zip(resp) {
                    for j in 0..dim {
                        var[j] += r[m] * (x[j] - mean[j]).powi(2);
                    }
                }
                Covariance::Diagonal(
                    var.into_iter()
                        .map(|v| (v / safe_nm).max(cfg.cov_floor))
                        .collect(),
                )
            }
            CovarianceKind::Full => {
                let mut cov = vec![vec![0.0; dim]; dim];
                for (x, r) in data.iter().zip(resp) {
                    for i in 0..dim {
                        let di = x[i] - mean[i];
                        for j in 0..=i {
                            cov[i][j] += r[m] * di * (x[j] - mean[j]);
                        }
                    }
                }
                for i in 0..dim {
                    for j in 0..=i {
                        let v = (cov[i][j] + if i == j { cfg.cov_floor } else { 0.0 }) / safe_nm;
                        cov[i][j] = v;
                        cov[j][i] = v;
                    }
                }
                Covariance::Full(cov)
            }
        };
        model.means[m] = mean;
        model.weights[m] = (nm + model.dirichlet_alpha[m] - 1.0) / (n + alpha_total - k as f64);
    }
    // Pseudo-counts below one can push a weight negative.
    let mut total = 0.0;
    for w in model.weights.iter_mut() {
        *w = w.max(1e-300);
        total += *w;
    }
    model.weights.iter_mut().for_each(|w| *w /= total);
}

/// Fits a `k`-component Gaussian mixture by EM with k-means++ seeding.
pub fn em_fit(features: &[WrongResponseFeature], cfg: &EmConfig) -> Result<EmFit> {
    let k = cfg.k;
    if k == 0 {
        return Err(Error::Config("mixture needs at least one component".into()));
    }
    if features.len() < k {
        return Err(Error::InsufficientData(format!(
            "{} features for {k} components",
            features.len()
        )));
    }
    let dim = features[0].dim();
    if let Some(f) = features.iter().find(|f| f.dim() != dim) {
        return Err(Error::Shape {
            expected: dim,
            got: f.dim(),
        });
    }
    let alpha = if cfg.alpha.is_empty() {
        vec![1.0; k]
    } else {
        cfg.alpha.clone()
    };
    if alpha.len() != k || alpha.iter().any(|&a| !(a > 0.0)) {
        return Err(Error::Config(
            "dirichlet alpha must have k positive entries".into(),
        ));
    }
    let data: Vec<&[f64]> = features.iter().map(|f| f.0.as_slice()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers = kmeans_pp(&data, k, &mut rng);

    // Hard assignment to the seeds gives the starting parameters.
    let mut resp: Vec<Vec<f64>> = data
        .iter()
        .map(|x| {
            let best = (0..k)
                .min_by(|&a, &b| sq_dist(x, &centers[a]).total_cmp(&sq_dist(x, &centers[b])))
                .unwrap_or(0);
            (0..k).map(|m| if m == best { 1.0 } else { 0.0 }).collect()
        })
        .collect();
    let global = global_variance(&data, cfg.cov_floor);
    let mut model = MixtureModel {
        weights: vec![1.0 / k as f64; k],
        means: centers,
        covariances: vec![Covariance::Diagonal(global.clone()); k],
        dirichlet_alpha: alpha,
        topic_map: vec![Vec::new(); k],
        cov_floor: cfg.cov_floor,
    };
    let mut reseeds = Vec::new();
    reseed_empty(&mut model, &data, &mut resp, &global, cfg, &mut reseeds, 0);
    m_step(&mut model, &data, &resp, cfg);

    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for iter in 0..cfg.max_iter {
        iterations = iter + 1;
        let stats = e_step(&model, &data)?;
        let objective = stats.log_likelihood + log_prior(&model, cfg);
        if let Some(&prev) = trace.last() {
            let restarted = reseeds.last() == Some(&trace.len());
            debug_assert!(
                restarted || objective >= prev - 1e-9 * prev.abs().max(1.0),
                "EM objective decreased: {prev} -> {objective}"
            );
            trace.push(objective);
            if !restarted && objective - prev <= cfg.tol * prev.abs() {
                converged = true;
                break;
            }
        } else {
            trace.push(objective);
        }
        resp = stats.resp;
        reseed_empty(
            &mut model,
            &data,
            &mut resp,
            &global,
            cfg,
            &mut reseeds,
            trace.len(),
        );
        m_step(&mut model, &data, &resp, cfg);
    }
    Ok(EmFit {
        model,
        objective_trace: trace,
        reseeds,
        iterations,
        converged,
    })
}

#[allow(clippy::too_many_arguments)]
fn reseed_empty(
    model: &mut MixtureModel,
    data: &[&[f64]],
    resp: &mut [Vec<f64>],
    global: &[f64],
    cfg: &EmConfig,
    reseeds: &mut Vec<usize>,
    at: usize,
) {
    let k = model.means.len();
    for m in 0..k {
        let nm: f64 = resp.iter().map(|r| r[m]).sum();
        if nm >= 1e-8 {
            continue;
        }
        // Farthest point from its closest current mean.
        let far = (0..data.len())
            .max_by(|&a, &b| {
                let da = model
                    .means
                    .iter()
                    .map(|mu| sq_dist(data[a], mu))
                    .fold(f64::INFINITY, f64::min);
                let db = model
                    .means
                    .iter()
                    .map(|mu| sq_dist(data[b], mu))
                    .fold(f64::INFINITY, f64::min);
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .unwrap_or(0);
        warn!("EM component {m} emptied; re-seeding from point {far}");
        model.means[m] = data[far].to_vec();
        model.covariances[m] = match cfg.covariance {
            CovarianceKind::Diagonal => Covariance::Diagonal(global.to_vec()),
            CovarianceKind::Full => Covariance::Full(
                (0..global.len())
                    .map(|i| {
                        (0..global.len())
                            .map(|j| if i == j { global[i] } else { 0.0 })
                            .collect()
                    })
                    .collect(),
            ),
        };
        for (i, r) in resp.iter_mut().enumerate() {
            if i == far {
                r.iter_mut().for_each(|v| *v = 0.0);
                r[m] = 1.0;
            }
        }
        if reseeds.last() != Some(&at) {
            reseeds.push(at);
        }
    }
}

/// Bayesian information criterion for each candidate `k` (lower is better).
pub fn bic_sweep(
    features: &[WrongResponseFeature],
    ks: &[usize],
    base: &EmConfig,
) -> Result<Vec<(usize, f64)>> {
    let n = features.len() as f64;
    let dim = features.first().map(|f| f.dim()).unwrap_or(0) as f64;
    ks.iter()
        .map(|&k| {
            let cfg = EmConfig {
                k,
                alpha: Vec::new(),
                ..base.clone()
            };
            let fit = em_fit(features, &cfg)?;
            let ll = fit.model.log_likelihood(features)?;
            let cov_params = match cfg.covariance {
                CovarianceKind::Diagonal => dim,
                CovarianceKind::Full => dim * (dim + 1.0) / 2.0,
            };
            let params = k as f64 * (dim + cov_params) + (k as f64 - 1.0);
            Ok((k, -2.0 * ll + params * n.ln()))
        })
        .collect()
}
