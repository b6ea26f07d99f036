//! Composite per-topic readiness score and its calibration.

use serde::{Deserialize, Serialize};

use crate::diagnose::{MisconceptionPosterior, MixtureModel};
use crate::error::{Error, Result};
use crate::model::{retention, sigmoid, Item, LearnerState};

/// Peer statistics of `ln(1 + τ)` by item-difficulty bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaceStats {
    /// Ascending upper edges; bin `i` covers `(edges[i-1], edges[i]]`, the
    /// last bin is open above.
    pub edges: Vec<f64>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl PaceStats {
    /// Bins `(b, τ)` peer records at the given edges.
    pub fn from_records(records: &[(f64, f64)], edges: &[f64]) -> Self {
        let bins = edges.len() + 1;
        let mut acc = vec![(0.0, 0.0, 0.0); bins];
        for &(b, tau) in records {
            let x = tau.max(0.0).ln_1p();
            let e = &mut acc[Self::bin_of(edges, b)];
            e.0 += 1.0;
            e.1 += x;
            e.2 += x * x;
        }
        let (means, sds) = acc
            .iter()
            .map(|&(n, s, s2)| {
                if n == 0.0 {
                    (f64::NAN, f64::NAN)
                } else {
                    let m = s / n;
                    (m, (s2 / n - m * m).max(0.0).sqrt())
                }
            })
            .unzip();
        PaceStats {
            edges: edges.to_vec(),
            means,
            sds,
        }
    }

    fn bin_of(edges: &[f64], b: f64) -> usize {
        edges.iter().position(|&e| b <= e).unwrap_or(edges.len())
    }

    /// `(mean, sd)` of the bin containing difficulty `b`, if populated.
    pub fn lookup(&self, b: f64) -> Option<(f64, f64)> {
        let i = Self::bin_of(&self.edges, b);
        let (m, s) = (*self.means.get(i)?, *self.sds.get(i)?);
        (m.is_finite() && s > 0.0).then_some((m, s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreComponents {
    /// Mastery proxy: success probability at the topic's reference difficulty.
    pub m: f64,
    pub r: f64,
    /// Pace: negated peer z-score of log response time, in [-3, 3].
    pub p: f64,
    /// Pearson correlation of confidence and correctness.
    pub c: f64,
    /// Summed misconception mass of the topic.
    pub misc_mass: f64,
    /// Set when C or P fell back to 0 for lack of data.
    #[serde(default)]
    pub low_data: bool,
}

impl ScoreComponents {
    pub fn misc_penalty(&self, w: &ScoreWeights) -> f64 {
        w.gamma_pen * self.misc_mass
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreWeights {
    pub w_m: f64,
    pub w_r: f64,
    pub w_p: f64,
    pub w_c: f64,
    pub gamma_pen: f64,
    pub scale: f64,
    pub offset: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        ScoreWeights {
            w_m: 0.5,
            w_r: 0.3,
            w_p: 0.05,
            w_c: 0.1,
            gamma_pen: 0.3,
            scale: 100.0,
            offset: 0.0,
        }
    }
}

impl ScoreWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.w_m, self.w_r, self.w_p, self.w_c, self.gamma_pen]
            .iter()
            .any(|w| !(*w >= 0.0))
        {
            return Err(Error::Config("score weights must be >= 0".into()));
        }
        Ok(())
    }

    fn from_vec(v: &[f64; 5], scale: f64, offset: f64) -> Self {
        ScoreWeights {
            w_m: v[0],
            w_r: v[1],
            w_p: v[2],
            w_c: v[3],
            gamma_pen: v[4],
            scale,
            offset,
        }
    }

    /// Lipschitz constant of the score in the sup norm over (M, R, P, C, mass).
    pub fn lipschitz(&self) -> f64 {
        (self.w_m + self.w_r + self.w_p + self.w_c + self.gamma_pen) * self.scale.abs()
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len().min(y.len());
    if n < 2 {
        return None;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (dx, dy) = (x[i] - mx, y[i] - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 1e-300 || syy <= 1e-300 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Components for `topic` from the learner's last `window` responses on it.
#[allow(clippy::too_many_arguments)]
pub fn compute_components(
    learner: &LearnerState,
    topic: usize,
    bank: &[Item],
    peers: &PaceStats,
    window: usize,
    now: f64,
    model: Option<&MixtureModel>,
) -> Result<ScoreComponents> {
    let belief = learner.topics.get(topic).ok_or(Error::Index {
        index: topic,
        len: learner.topics.len(),
    })?;
    let on_topic: Vec<&Item> = bank.iter().filter(|it| it.loads(topic)).collect();
    let b_ref = median(on_topic.iter().map(|it| it.b).collect()).unwrap_or(0.0);
    let a_ref = median(on_topic.iter().map(|it| it.a).collect()).unwrap_or(1.0);
    let m = sigmoid(a_ref * (belief.mu - b_ref));

    let recent: Vec<_> = learner
        .history
        .iter()
        .rev()
        .filter(|h| h.topics.contains(&topic))
        .take(window)
        .collect();
    let mut low_data = false;
    let p = match (
        median(recent.iter().map(|h| h.obs.tau.ln_1p()).collect()),
        median(recent.iter().map(|h| h.b).collect()),
    ) {
        (Some(x), Some(b)) => match peers.lookup(b) {
            Some((mean, sd)) => (-(x - mean) / sd).clamp(-3.0, 3.0),
            None => {
                low_data = true;
                0.0
            }
        },
        _ => {
            low_data = true;
            0.0
        }
    };
    let s: Vec<f64> = recent.iter().map(|h| h.obs.s).collect();
    let y: Vec<f64> = recent
        .iter()
        .map(|h| if h.obs.y { 1.0 } else { 0.0 })
        .collect();
    let c = if window < 2 { None } else { pearson(&s, &y) };
    low_data |= c.is_none();

    let misc_mass = match model {
        Some(mm) if learner.misconception_posterior.len() == mm.k() => MisconceptionPosterior {
            pi: learner.misconception_posterior.clone(),
        }
        .topic_mass(mm, topic),
        _ => 0.0,
    };
    Ok(ScoreComponents {
        m,
        r: retention(belief, now),
        p,
        c: c.unwrap_or(0.0),
        misc_mass,
        low_data,
    })
}

/// Weighted sum of the components minus the misconception penalty.
pub fn raw_score(c: &ScoreComponents, w: &ScoreWeights) -> f64 {
    w.w_m * c.m + w.w_r * c.r + w.w_p * c.p + w.w_c * c.c - c.misc_penalty(w)
}

/// `clip(scale·x + offset, 0, 100)`.
pub fn edge_score(c: &ScoreComponents, w: &ScoreWeights) -> f64 {
    (w.scale * raw_score(c, w) + w.offset).clamp(0.0, 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    #[default]
    Squared,
    Log,
}

const LOG_EPS: f64 = 1e-6;

impl Loss {
    pub fn value(&self, pred: f64, target: f64) -> f64 {
        match self {
            Loss::Squared => (pred.clamp(0.0, 1.0) - target).powi(2),
            Loss::Log => {
                let p = pred.clamp(LOG_EPS, 1.0 - LOG_EPS);
                -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
            }
        }
    }

    /// Derivative in the raw prediction; zero where the clip is active.
    fn slope(&self, pred: f64, target: f64) -> f64 {
        match self {
            Loss::Squared if (0.0..=1.0).contains(&pred) => 2.0 * (pred - target),
            Loss::Log if (LOG_EPS..=1.0 - LOG_EPS).contains(&pred) => {
                (pred - target) / (pred * (1.0 - pred))
            }
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub loss: Loss,
    pub ridge: f64,
    pub max_iters: usize,
    /// Stop when the projected-gradient step norm falls below this.
    pub tol: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            loss: Loss::Squared,
            ridge: 0.0,
            max_iters: 5000,
            tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub weights: ScoreWeights,
    /// Objective after every accepted step, starting at the initial point.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Targets were constant; weights are zero and the offset carries the constant.
    pub degenerate: bool,
}

fn features(c: &ScoreComponents) -> [f64; 5] {
    [c.m, c.r, c.p, c.c, -c.misc_mass]
}

fn objective(data: &[(ScoreComponents, f64)], theta: &[f64; 5], cfg: &CalibrationConfig) -> f64 {
    let fit: f64 = data
        .iter()
        .map(|(c, y)| {
            let x: f64 = features(c).iter().zip(theta).map(|(f, w)| f * w).sum();
            cfg.loss.value(x, *y)
        })
        .sum();
    fit + cfg.ridge * theta[..4].iter().map(|w| w * w).sum::<f64>()
}

fn gradient(
    data: &[(ScoreComponents, f64)],
    theta: &[f64; 5],
    cfg: &CalibrationConfig,
) -> [f64; 5] {
    let mut g = [0.0; 5];
    for (c, y) in data {
        let f = features(c);
        let x: f64 = f.iter().zip(theta).map(|(f, w)| f * w).sum();
        let s = cfg.loss.slope(x, *y);
        for j in 0..5 {
            g[j] += s * f[j];
        }
    }
    for j in 0..4 {
        g[j] += 2.0 * cfg.ridge * theta[j];
    }
    g
}

/// Fits nonnegative weights and penalty slope so that `score/100` predicts
/// future success, by projected gradient with Barzilai–Borwein trial steps
/// and backtracking. The score map is held at `clip(100·x, 0, 100)`.
pub fn calibrate_weights(
    data: &[(ScoreComponents, f64)],
    cfg: &CalibrationConfig,
) -> Result<Calibration> {
    if data.is_empty() {
        return Err(Error::InsufficientData(
            "calibration needs at least one example".into(),
        ));
    }
    if !(cfg.ridge >= 0.0) {
        return Err(Error::Config("ridge must be >= 0".into()));
    }
    if let Some((_, y)) = data.iter().find(|(_, y)| !(0.0..=1.0).contains(y)) {
        return Err(Error::Domain(format!("future success {y} outside [0, 1]")));
    }
    let first = data[0].1;
    if data.iter().all(|(_, y)| *y == first) {
        return Ok(Calibration {
            weights: ScoreWeights::from_vec(&[0.0; 5], 100.0, 100.0 * first),
            objective_trace: Vec::new(),
            iterations: 0,
            converged: true,
            degenerate: true,
        });
    }

    let project = |v: [f64; 5]| v.map(|x| x.max(0.0));
    // Start with predictions inside (0, 1) so the clipped losses have slope.
    let mean_y = data.iter().map(|(_, y)| y).sum::<f64>() / data.len() as f64;
    let mut theta = [0.5 * mean_y, 0.5 * mean_y, 0.0, 0.0, 0.0];
    let mut f = objective(data, &theta, cfg);
    let mut g = gradient(data, &theta, cfg);
    let mut trace = vec![f];
    let mut step = 1.0 / data.len() as f64;
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..cfg.max_iters {
        iterations = it + 1;
        let mut t = step;
        let mut accepted = None;
        while t > 1e-20 {
            let cand = project(std::array::from_fn(|j| theta[j] - t * g[j]));
            let d: [f64; 5] = std::array::from_fn(|j| cand[j] - theta[j]);
            let dn2: f64 = d.iter().map(|v| v * v).sum();
            if dn2 == 0.0 {
                break;
            }
            let fc = objective(data, &cand, cfg);
            let model = f + g.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>() + dn2 / (2.0 * t);
            if fc <= model && fc <= f {
                accepted = Some((cand, fc, dn2.sqrt() / t));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, fc, pg_norm)) = accepted else {
            converged = true;
            break;
        };
        let gc = gradient(data, &cand, cfg);
        let s: [f64; 5] = std::array::from_fn(|j| cand[j] - theta[j]);
        let yv: [f64; 5] = std::array::from_fn(|j| gc[j] - g[j]);
        let sy: f64 = s.iter().zip(&yv).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        step = if sy > 0.0 {
            (ss / sy).clamp(1e-12, 1e6)
        } else {
            t * 2.0
        };
        theta = cand;
        f = fc;
        g = gc;
        trace.push(f);
        if pg_norm < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(Calibration {
        weights: ScoreWeights::from_vec(&theta, 100.0, 0.0),
        objective_trace: trace,
        iterations,
        converged,
        degenerate: false,
    })
}

/// Mean loss of `score/100` against targets.
pub fn mean_loss(data: &[(ScoreComponents, f64)], w: &ScoreWeights, loss: Loss) -> f64 {
    data.iter()
        .map(|(c, y)| loss.value(edge_score(c, w) / 100.0, *y))
        .sum::<f64>()
        / data.len().max(1) as f64
}
