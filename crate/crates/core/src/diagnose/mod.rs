//! Misconception diagnosis from wrong responses.
//!
//! Each wrong answer becomes a feature `[stem ‖ distractor ‖ φ(τ) ‖ ψ(s)]`.
//! A Gaussian mixture fitted over the population's wrong answers gives one
//! component per misconception; a learner's posterior over components is the
//! Dirichlet prior times the product of component densities of that
//! learner's wrong answers.

mod em;

use std::collections::BTreeSet;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Item, Observation};

pub use em::{bic_sweep, em_fit, CovarianceKind, EmConfig, EmFit};

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Corpus statistics for the time and confidence transforms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    /// Mean and standard deviation of `ln(1 + τ)`.
    pub log_tau_mean: f64,
    pub log_tau_sd: f64,
    pub conf_mean: f64,
    pub conf_sd: f64,
}

impl Default for NormalizationStats {
    fn default() -> Self {
        NormalizationStats {
            log_tau_mean: 0.0,
            log_tau_sd: 1.0,
            conf_mean: 0.5,
            conf_sd: 0.25,
        }
    }
}

impl NormalizationStats {
    pub fn from_observations<'a>(obs: impl IntoIterator<Item = &'a Observation>) -> Self {
        let (mut n, mut st, mut st2, mut sc, mut sc2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for o in obs {
            let lt = o.tau.ln_1p();
            n += 1.0;
            st += lt;
            st2 += lt * lt;
            sc += o.s;
            sc2 += o.s * o.s;
        }
        if n == 0.0 {
            return Self::default();
        }
        let sd = |s: f64, s2: f64| {
            let v = (s2 / n - (s / n).powi(2)).max(0.0).sqrt();
            if v > 1e-9 {
                v
            } else {
                1.0
            }
        };
        NormalizationStats {
            log_tau_mean: st / n,
            log_tau_sd: sd(st, st2),
            conf_mean: sc / n,
            conf_sd: sd(sc, sc2),
        }
    }

    pub fn phi(&self, tau: f64) -> f64 {
        (tau.ln_1p() - self.log_tau_mean) / self.log_tau_sd
    }

    pub fn psi(&self, s: f64) -> f64 {
        (s - self.conf_mean) / self.conf_sd
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WrongResponseFeature(pub Vec<f64>);

impl WrongResponseFeature {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Builds `[e_q ‖ z_d ‖ φ(τ) ‖ ψ(s)]` for a wrong response.
pub fn build_feature(
    item: &Item,
    obs: &Observation,
    norm: &NormalizationStats,
) -> Result<WrongResponseFeature> {
    if obs.y {
        return Err(Error::Domain(
            "features are built from wrong responses only".into(),
        ));
    }
    let d = obs
        .d
        .ok_or_else(|| Error::Consistency("wrong response without a distractor index".into()))?;
    let distractor = item.distractors.get(d).ok_or(Error::Index {
        index: d,
        len: item.distractors.len(),
    })?;
    let mut v = Vec::with_capacity(item.stem_embedding.len() + distractor.embedding.len() + 2);
    v.extend_from_slice(&item.stem_embedding);
    v.extend_from_slice(&distractor.embedding);
    v.push(norm.phi(obs.tau));
    v.push(norm.psi(obs.s));
    Ok(WrongResponseFeature(v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariance {
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

pub(crate) enum Density {
    Diagonal {
        mean: Vec<f64>,
        var: Vec<f64>,
        log_norm: f64,
    },
    Full {
        mean: Vec<f64>,
        chol: DMatrix<f64>,
        log_norm: f64,
    },
}

impl Density {
    pub(crate) fn log_pdf(&self, x: &[f64]) -> f64 {
        match self {
            Density::Diagonal {
                mean,
                var,
                log_norm,
            } => {
                log_norm
                    - 0.5
                        * x.iter()
                            .zip(mean)
                            .zip(var)
                            .map(|((x, m), v)| (x - m) * (x - m) / v)
                            .sum::<f64>()
            }
            Density::Full {
                mean,
                chol,
                log_norm,
            } => {
                let diff = nalgebra::DVector::from_iterator(
                    x.len(),
                    x.iter().zip(mean).map(|(x, m)| x - m),
                );
                let z = chol.solve_lower_triangular(&diff).unwrap_or(diff);
                log_norm - 0.5 * z.norm_squared()
            }
        }
    }
}

/// Gaussian mixture over wrong-response features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureModel {
    /// Mixing proportions learned from the population.
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Covariance>,
    /// Dirichlet pseudo-counts, the prior of every learner's posterior.
    pub dirichlet_alpha: Vec<f64>,
    /// Topics impacted by each component, heaviest load first.
    pub topic_map: Vec<Vec<usize>>,
    pub cov_floor: f64,
}

impl MixtureModel {
    pub fn k(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map(Vec::len).unwrap_or(0)
    }

    pub(crate) fn densities(&self) -> Result<Vec<Density>> {
        self.means
            .iter()
            .zip(&self.covariances)
            .map(|(mean, cov)| {
                let d = mean.len() as f64;
                match cov {
                    Covariance::Diagonal(var) => {
                        if var.iter().any(|&v| !(v > 0.0)) {
                            return Err(Error::Domain(
                                "covariance diagonal must be positive".into(),
                            ));
                        }
                        let log_det: f64 = var.iter().map(|v| v.ln()).sum();
                        Ok(Density::Diagonal {
                            mean: mean.clone(),
                            var: var.clone(),
                            log_norm: -0.5 * (d * (2.0 * PI).ln() + log_det),
                        })
                    }
                    Covariance::Full(rows) => {
                        let m = DMatrix::from_fn(rows.len(), rows.len(), |i, j| rows[i][j]);
                        let chol = m
                            .cholesky()
                            .ok_or_else(|| {
                                Error::Domain("covariance is not positive definite".into())
                            })?
                            .l();
                        let log_det: f64 =
                            2.0 * chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
                        Ok(Density::Full {
                            mean: mean.clone(),
                            chol,
                            log_norm: -0.5 * (d * (2.0 * PI).ln() + log_det),
                        })
                    }
                }
            })
            .collect()
    }

    /// `log N(x | μ_m, Σ_m)` for every component.
    pub fn component_log_densities(&self, x: &WrongResponseFeature) -> Result<Vec<f64>> {
        if x.dim() != self.dim() {
            return Err(Error::Shape {
                expected: self.dim(),
                got: x.dim(),
            });
        }
        Ok(self.densities()?.iter().map(|d| d.log_pdf(&x.0)).collect())
    }

    /// Population responsibilities under the fitted mixing proportions.
    pub fn responsibilities(&self, features: &[WrongResponseFeature]) -> Result<Vec<Vec<f64>>> {
        let dens = self.densities()?;
        let log_w: Vec<f64> = self.weights.iter().map(|w| w.ln()).collect();
        features
            .iter()
            .map(|x| {
                if x.dim() != self.dim() {
                    return Err(Error::Shape {
                        expected: self.dim(),
                        got: x.dim(),
                    });
                }
                let row: Vec<f64> = dens
                    .iter()
                    .zip(&log_w)
                    .map(|(d, lw)| lw + d.log_pdf(&x.0))
                    .collect();
                let lse = log_sum_exp(&row);
                Ok(row.iter().map(|l| (l - lse).exp()).collect())
            })
            .collect()
    }

    pub fn log_likelihood(&self, features: &[WrongResponseFeature]) -> Result<f64> {
        let dens = self.densities()?;
        let log_w: Vec<f64> = self.weights.iter().map(|w| w.ln()).collect();
        Ok(features
            .iter()
            .map(|x| {
                let row: Vec<f64> = dens
                    .iter()
                    .zip(&log_w)
                    .map(|(d, lw)| lw + d.log_pdf(&x.0))
                    .collect();
                log_sum_exp(&row)
            })
            .sum())
    }

    /// Component index with the largest responsibility for each feature.
    pub fn hard_assignments(&self, features: &[WrongResponseFeature]) -> Result<Vec<usize>> {
        Ok(self
            .responsibilities(features)?
            .iter()
            .map(|r| {
                (0..r.len())
                    .max_by(|&a, &b| r[a].total_cmp(&r[b]).then(b.cmp(&a)))
                    .unwrap_or(0)
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisconceptionPosterior {
    pub pi: Vec<f64>,
}

impl MisconceptionPosterior {
    pub fn from_log(log_weights: &[f64]) -> Self {
        let lse = log_sum_exp(log_weights);
        let mut pi: Vec<f64> = log_weights.iter().map(|l| (l - lse).exp()).collect();
        let total: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|p| *p /= total);
        MisconceptionPosterior { pi }
    }

    pub fn prior(model: &MixtureModel) -> Self {
        let log: Vec<f64> = model.dirichlet_alpha.iter().map(|a| a.ln()).collect();
        Self::from_log(&log)
    }

    fn log_pi(&self) -> Vec<f64> {
        self.pi.iter().map(|p| p.ln()).collect()
    }

    /// Posterior mass of the components mapped to `topic`.
    pub fn topic_mass(&self, model: &MixtureModel, topic: usize) -> f64 {
        self.pi
            .iter()
            .zip(&model.topic_map)
            .filter(|(_, topics)| topics.contains(&topic))
            .map(|(p, _)| p)
            .sum::<f64>()
            .min(1.0)
    }
}

/// `π_m ∝ α_m ∏ N(x | μ_m, Σ_m)` over the learner's wrong answers.
pub fn misconception_posterior(
    model: &MixtureModel,
    wrong_set: &[WrongResponseFeature],
) -> Result<MisconceptionPosterior> {
    misconception_posterior_tempered(model, wrong_set, 1.0)
}

/// Same as [`misconception_posterior`], with the `i`-th oldest of `n` wrong
/// answers weighted by `decay^(n-1-i)`. `decay = 1` is the untempered product.
pub fn misconception_posterior_tempered(
    model: &MixtureModel,
    wrong_set: &[WrongResponseFeature],
    decay: f64,
) -> Result<MisconceptionPosterior> {
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(Error::Config("posterior decay must lie in (0, 1]".into()));
    }
    let dens = model.densities()?;
    let mut log: Vec<f64> = model.dirichlet_alpha.iter().map(|a| a.ln()).collect();
    let n = wrong_set.len();
    for (i, x) in wrong_set.iter().enumerate() {
        if x.dim() != model.dim() {
            return Err(Error::Shape {
                expected: model.dim(),
                got: x.dim(),
            });
        }
        let w = if decay == 1.0 {
            1.0
        } else {
            decay.powi((n - 1 - i) as i32)
        };
        for (l, d) in log.iter_mut().zip(&dens) {
            *l += w * d.log_pdf(&x.0);
        }
    }
    Ok(MisconceptionPosterior::from_log(&log))
}

/// Folds one more wrong answer into an existing posterior.
pub fn update_with_wrong(
    posterior: &MisconceptionPosterior,
    model: &MixtureModel,
    x: &WrongResponseFeature,
) -> Result<MisconceptionPosterior> {
    let dens = model.component_log_densities(x)?;
    let log: Vec<f64> = posterior
        .log_pi()
        .iter()
        .zip(dens)
        .map(|(p, d)| p + d)
        .collect();
    Ok(MisconceptionPosterior::from_log(&log))
}

/// How strongly a correct answer counts against a misconception.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrectEvidenceParams {
    /// Spread of a shortcut user's numeric answer around the shortcut value.
    pub answer_noise: f64,
    /// Probability that a learner holding the misconception applies it.
    pub shortcut_consistency: f64,
}

impl Default for CorrectEvidenceParams {
    fn default() -> Self {
        CorrectEvidenceParams {
            answer_noise: 0.5,
            shortcut_consistency: 0.9,
        }
    }
}

impl CorrectEvidenceParams {
    /// Likelihood of landing on the correct answer under a component whose
    /// shortcut misses it by `margin`, relative to a learner without it:
    /// `1 - c·(1 - exp(-margin² / 2σ²))`.
    pub fn likelihood(&self, margin: f64) -> f64 {
        let tail = (-(margin * margin) / (2.0 * self.answer_noise * self.answer_noise)).exp();
        1.0 - self.shortcut_consistency * (1.0 - tail)
    }
}

/// Folds a correct answer into the posterior. `margins[m]` is the shortcut
/// margin of component `m`'s rule on the answered item (`None` when the
/// component has no rule for it). Only effortful answers count; a slow
/// correct answer leaves the posterior unchanged.
pub fn update_with_correct(
    posterior: &MisconceptionPosterior,
    margins: &[Option<f64>],
    effortful: bool,
    params: &CorrectEvidenceParams,
) -> Result<MisconceptionPosterior> {
    if margins.len() != posterior.pi.len() {
        return Err(Error::Shape {
            expected: posterior.pi.len(),
            got: margins.len(),
        });
    }
    if !effortful {
        return Ok(posterior.clone());
    }
    let log: Vec<f64> = posterior
        .log_pi()
        .iter()
        .zip(margins)
        .map(|(lp, m)| lp + m.map(|m| params.likelihood(m).ln()).unwrap_or(0.0))
        .collect();
    Ok(MisconceptionPosterior::from_log(&log))
}

/// Topics whose summed component mass reaches `gamma`.
pub fn flag_topics(
    posterior: &MisconceptionPosterior,
    model: &MixtureModel,
    gamma: f64,
) -> BTreeSet<usize> {
    let topics: BTreeSet<usize> = model.topic_map.iter().flatten().copied().collect();
    topics
        .into_iter()
        .filter(|&t| posterior.topic_mass(model, t) >= gamma)
        .collect()
}

/// Maps each component to the topics carrying more than `zeta` of its
/// responsibility-weighted Q-matrix load; a component that clears no topic
/// keeps its heaviest (possibly tied) topics.
pub fn map_clusters_to_topics(
    model: &MixtureModel,
    feature_items: &[&Item],
    features: &[WrongResponseFeature],
    zeta: f64,
) -> Result<Vec<Vec<usize>>> {
    if feature_items.len() != features.len() {
        return Err(Error::Shape {
            expected: features.len(),
            got: feature_items.len(),
        });
    }
    let resp = model.responsibilities(features)?;
    let topic_count = feature_items
        .iter()
        .flat_map(|i| i.concepts.iter())
        .max()
        .map(|t| t + 1)
        .unwrap_or(0);
    let mut map = Vec::with_capacity(model.k());
    for m in 0..model.k() {
        let mut load = vec![0.0; topic_count];
        for (item, r) in feature_items.iter().zip(&resp) {
            for &t in &item.concepts {
                load[t] += r[m];
            }
        }
        let total: f64 = load.iter().sum();
        let mut order: Vec<usize> = (0..topic_count).collect();
        order.sort_by(|&a, &b| load[b].total_cmp(&load[a]).then(a.cmp(&b)));
        let mut chosen: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&t| load[t] > zeta * total)
            .collect();
        if chosen.is_empty() {
            let max = order.first().map(|&t| load[t]).unwrap_or(0.0);
            chosen = order.iter().copied().filter(|&t| load[t] == max).collect();
        }
        map.push(chosen);
    }
    Ok(map)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidSummary {
    pub component: usize,
    pub centroid: Vec<f64>,
    pub nearest_item: Option<String>,
    pub dominant_topic: Option<String>,
}

/// Produces one human-readable label per mixture component.
pub trait LabelingBackend {
    fn label(&self, summaries: &[CentroidSummary]) -> std::result::Result<Vec<String>, String>;
}

/// Offline labeler that names the nearest item and the dominant topic.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubLabeler;

impl LabelingBackend for StubLabeler {
    fn label(&self, summaries: &[CentroidSummary]) -> std::result::Result<Vec<String>, String> {
        Ok(summaries
            .iter()
            .map(|s| {
                format!(
                    "cluster-{}: nearest-item={}, dominant-topic={}",
                    s.component,
                    s.nearest_item.as_deref().unwrap_or("none"),
                    s.dominant_topic.as_deref().unwrap_or("none")
                )
            })
            .collect())
    }
}

/// Labels every component through `labeler`.
pub fn label_clusters(
    model: &MixtureModel,
    items: &[Item],
    topic_names: &[String],
    labeler: &dyn LabelingBackend,
) -> Result<Vec<String>> {
    let summaries: Vec<CentroidSummary> = model
        .means
        .iter()
        .enumerate()
        .map(|(m, centroid)| {
            let nearest_item = items
                .iter()
                .filter(|it| {
                    !it.stem_embedding.is_empty() && it.stem_embedding.len() <= centroid.len()
                })
                .map(|it| {
                    let d: f64 = it
                        .stem_embedding
                        .iter()
                        .zip(centroid)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (d, it)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .map(|(_, it)| it.id.clone());
            let dominant_topic = model
                .topic_map
                .get(m)
                .and_then(|ts| ts.first())
                .map(|&t| topic_names.get(t).cloned().unwrap_or_else(|| t.to_string()));
            CentroidSummary {
                component: m,
                centroid: centroid.clone(),
                nearest_item,
                dominant_topic,
            }
        })
        .collect();
    let labels = labeler.label(&summaries).map_err(Error::Labeling)?;
    if labels.len() != model.k() {
        return Err(Error::Labeling(format!(
            "backend returned {} labels for {} clusters",
            labels.len(),
            model.k()
        )));
    }
    Ok(labels)
}
