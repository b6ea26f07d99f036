//! Hybrid discrete × continuous search for the nearest separating item.
//!
//! Discrete code combinations are ranked by their distance cost and the first
//! `beam_width` are explored. For each combination the continuous block is
//! either enumerated exactly (when every continuous attribute lives on a
//! lattice small enough for the budget) or optimized by projected gradient on
//! a hinge-penalty objective with finite-difference gradients, snapping
//! iterates onto the lattice where one is declared. Every examined point is
//! checked against the exact constraints; only exactly feasible points can be
//! returned.

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use super::PsychometricPredictor;
use super::{
    render_template, shortcut_margin, validate_item, AttributeVector, GenerationConstraints,
    MisconceptionRule,
};
use crate::error::{Error, Result};
use crate::model::Item;

const MAX_COMBINATIONS: usize = 1 << 20;
const MAX_SNAPPED_DIMS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchBudget {
    /// Number of discrete code combinations explored, cheapest first.
    pub beam_width: usize,
    /// Projected-gradient iterations per start.
    pub max_iters: usize,
    /// Largest lattice enumerated exactly per code combination.
    pub lattice_limit: usize,
}

impl Default for SearchBudget {
    fn default() -> Self {
        SearchBudget {
            beam_width: 64,
            max_iters: 400,
            lattice_limit: 50_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterfactual {
    pub item: Item,
    pub attributes: AttributeVector,
    pub distance: f64,
    pub margin: f64,
    pub predicted_a: f64,
    pub predicted_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfeasibleReport {
    /// Examined candidate with the largest shortcut margin.
    pub best_candidate: Option<AttributeVector>,
    pub best_margin: Option<f64>,
    pub violations: Vec<String>,
    pub examined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum GenerationOutcome {
    Found(Counterfactual),
    Infeasible(InfeasibleReport),
}

impl GenerationOutcome {
    pub fn found(&self) -> Option<&Counterfactual> {
        match self {
            GenerationOutcome::Found(c) => Some(c),
            GenerationOutcome::Infeasible(_) => None,
        }
    }
}

/// Accepted projected-gradient steps: `(start, penalty weight, objective)`.
#[derive(Debug, Clone, Default)]
pub struct SearchTrace {
    pub steps: Vec<(usize, f64, f64)>,
}

struct Problem<'a> {
    seed: &'a AttributeVector,
    seed_a: f64,
    seed_b: f64,
    rule: &'a MisconceptionRule,
    gc: &'a GenerationConstraints,
    pred: &'a PsychometricPredictor,
}

#[derive(Clone)]
struct Best {
    v: AttributeVector,
    distance: f64,
}

struct Tracker {
    best: Option<Best>,
    best_margin: Option<(AttributeVector, f64)>,
    examined: usize,
}

impl Tracker {
    fn offer(&mut self, problem: &Problem, v: &AttributeVector) -> bool {
        self.examined += 1;
        let margin = shortcut_margin(problem.rule, v).ok();
        if let Some(m) = margin {
            if self.best_margin.as_ref().is_none_or(|(_, bm)| m > *bm) {
                self.best_margin = Some((v.clone(), m));
            }
        }
        if !problem.feasible(v) {
            return false;
        }
        let d = problem.gc.distance(v, problem.seed);
        if self.best.as_ref().is_none_or(|b| d < b.distance - 1e-12) {
            self.best = Some(Best {
                v: v.clone(),
                distance: d,
            });
        }
        true
    }
}

impl<'a> Problem<'a> {
    fn feasible(&self, v: &AttributeVector) -> bool {
        self.violations(v).is_empty()
    }

    fn violations(&self, v: &AttributeVector) -> Vec<String> {
        let mut out = validate_item(v, self.gc).violations;
        match shortcut_margin(self.rule, v) {
            Ok(m) if m >= self.gc.delta => {}
            Ok(m) => out.push(format!("shortcut margin {m} < delta {}", self.gc.delta)),
            Err(e) => out.push(format!("shortcut margin undefined: {e}")),
        }
        let a = self.pred.predict_a(v);
        if (a - self.seed_a).abs() > self.gc.eps_a {
            out.push(format!(
                "predicted a {a} outside {} ± {}",
                self.seed_a, self.gc.eps_a
            ));
        }
        let b = self.pred.predict_b(v);
        if (b - self.seed_b).abs() > self.gc.eps_b {
            out.push(format!(
                "predicted b {b} outside {} ± {}",
                self.seed_b, self.gc.eps_b
            ));
        }
        out
    }

    fn continuous_distance_sq(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.seed.continuous)
            .enumerate()
            .map(|(i, (x, q))| self.gc.weight_continuous(i) * (x - q) * (x - q))
            .sum()
    }

    /// Squared-hinge violation of the constraints that depend on the
    /// continuous block, against slightly tightened thresholds so that the
    /// penalty minimizer lands inside the exact feasible set.
    fn penalty(&self, v: &AttributeVector) -> f64 {
        let gc = self.gc;
        let delta = gc.delta * (1.0 + 1e-6) + 1e-8;
        let hinge_margin = match shortcut_margin(self.rule, v) {
            Ok(m) => (delta - m).max(0.0),
            Err(_) => delta + 1.0,
        };
        let mut total = hinge_margin * hinge_margin;
        for p in gc.predicates.iter().filter(|p| p.involves_continuous()) {
            if let super::Predicate::Linear { coeffs, bound, .. } = p {
                let lhs: f64 = coeffs.iter().zip(&v.continuous).map(|(c, x)| c * x).sum();
                let h = (lhs - (bound - 1e-9 * bound.abs().max(1.0))).max(0.0);
                total += h * h;
            }
        }
        let eps_a = (gc.eps_a * (1.0 - 1e-6) - 1e-9).max(0.0);
        let eps_b = (gc.eps_b * (1.0 - 1e-6) - 1e-9).max(0.0);
        let ha = ((self.pred.predict_a(v) - self.seed_a).abs() - eps_a).max(0.0);
        let hb = ((self.pred.predict_b(v) - self.seed_b).abs() - eps_b).max(0.0);
        total + ha * ha + hb * hb
    }

    fn project(&self, x: &mut [f64]) {
        for (xi, [lo, hi]) in x.iter_mut().zip(&self.gc.bounds) {
            *xi = xi.clamp(*lo, *hi);
        }
    }

    fn lattice_axis(&self, i: usize) -> Option<Vec<f64>> {
        let step = self.gc.step(i);
        if step <= 0.0 {
            return None;
        }
        let [lo, hi] = self.gc.bounds[i];
        let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
        Some((0..count).map(|k| lo + k as f64 * step).collect())
    }
}

fn combinations(problem: &Problem) -> Result<Vec<Vec<u32>>> {
    let gc = problem.gc;
    if gc.levels.is_empty() {
        return Ok(vec![problem.seed.discrete.clone()]);
    }
    let total = gc
        .levels
        .iter()
        .try_fold(1usize, |acc, &l| acc.checked_mul(l as usize));
    match total {
        Some(t) if t <= MAX_COMBINATIONS => {}
        _ => {
            return Err(Error::Resource(
                "too many discrete code combinations to rank".into(),
            ))
        }
    }
    let cost = |codes: &[u32]| -> f64 {
        codes
            .iter()
            .zip(&problem.seed.discrete)
            .enumerate()
            .filter(|(_, (c, q))| c != q)
            .map(|(j, _)| gc.weight_discrete(j))
            .sum()
    };
    let mut combos: Vec<Vec<u32>> = gc
        .levels
        .iter()
        .map(|&l| 0..l)
        .multi_cartesian_product()
        .collect();
    combos.sort_by(|a, b| cost(a).total_cmp(&cost(b)).then_with(|| a.cmp(b)));
    Ok(combos)
}

fn exact_lattice(problem: &Problem, codes: &[u32], axes: &[Vec<f64>], tracker: &mut Tracker) {
    let mut points: Vec<(f64, Vec<f64>)> = axes
        .iter()
        .map(|a| a.iter().copied())
        .multi_cartesian_product()
        .map(|x| (problem.continuous_distance_sq(&x), x))
        .collect();
    // Stable sort keeps lexicographic order among equidistant points.
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (_, x) in points {
        if tracker.offer(problem, &AttributeVector::new(x, codes.to_vec())) {
            return;
        }
    }
}

fn snapped_candidates(problem: &Problem, x: &[f64], codes: &[u32]) -> Vec<AttributeVector> {
    let stepped: Vec<usize> = (0..x.len()).filter(|&i| problem.gc.step(i) > 0.0).collect();
    if stepped.is_empty() {
        return vec![AttributeVector::new(x.to_vec(), codes.to_vec())];
    }
    let dims = &stepped[..stepped.len().min(MAX_SNAPPED_DIMS)];
    let choices: Vec<Vec<f64>> = dims
        .iter()
        .map(|&i| {
            let step = problem.gc.step(i);
            let [lo, hi] = problem.gc.bounds[i];
            let k = ((x[i] - lo) / step).floor();
            let max_k = ((hi - lo) / step + 1e-9).floor();
            let mut opts = vec![
                lo + k.clamp(0.0, max_k) * step,
                lo + (k + 1.0).clamp(0.0, max_k) * step,
            ];
            opts.dedup();
            opts
        })
        .collect();
    choices
        .into_iter()
        .multi_cartesian_product()
        .map(|vals| {
            let mut y = x.to_vec();
            for (&i, v) in dims.iter().zip(vals) {
                y[i] = v;
            }
            AttributeVector::new(y, codes.to_vec())
        })
        .collect()
}

fn objective(problem: &Problem, x: &[f64], codes: &[u32], mu: f64) -> f64 {
    let v = AttributeVector::new(x.to_vec(), codes.to_vec());
    problem.continuous_distance_sq(x) + mu * problem.penalty(&v)
}

fn gradient(problem: &Problem, x: &[f64], codes: &[u32], mu: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = 1e-7 * x[i].abs().max(1.0);
            probe[i] = x[i] + h;
            let up = objective(problem, &probe, codes, mu);
            probe[i] = x[i] - h;
            let down = objective(problem, &probe, codes, mu);
            probe[i] = x[i];
            let g = (up - down) / (2.0 * h);
            if g.is_finite() {
                g
            } else {
                0.0
            }
        })
        .collect()
}

fn projected_gradient(
    problem: &Problem,
    codes: &[u32],
    budget: &SearchBudget,
    tracker: &mut Tracker,
    trace: &mut SearchTrace,
) {
    let n = problem.seed.continuous.len();
    let mut starts: Vec<Vec<f64>> = Vec::with_capacity(2 * n + 1);
    let mut origin = problem.seed.continuous.clone();
    problem.project(&mut origin);
    starts.push(origin.clone());
    for i in 0..n {
        let [lo, hi] = problem.gc.bounds[i];
        for sign in [1.0, -1.0] {
            let mut s = origin.clone();
            s[i] += sign * 0.25 * (hi - lo);
            problem.project(&mut s);
            if !starts.contains(&s) {
                starts.push(s);
            }
        }
    }

    for (start_id, start) in starts.into_iter().enumerate() {
        let mut x = start;
        let mut mu: f64 = 1.0;
        let mut step: f64 = 1.0;
        for v in snapped_candidates(problem, &x, codes) {
            tracker.offer(problem, &v);
        }
        for _ in 0..budget.max_iters {
            let fx = objective(problem, &x, codes, mu);
            let g = gradient(problem, &x, codes, mu);
            let mut t = (step * 2.0).min(1e3);
            let mut accepted = None;
            while t > 1e-14 {
                let mut cand: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - t * gi).collect();
                problem.project(&mut cand);
                let moved: f64 = cand.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum();
                if moved == 0.0 {
                    break;
                }
                let fc = objective(problem, &cand, codes, mu);
                if fc <= fx - 1e-4 / t * moved {
                    accepted = Some((cand, fc));
                    break;
                }
                t *= 0.5;
            }
            match accepted {
                Some((cand, fc)) => {
                    step = t;
                    x = cand;
                    trace.steps.push((start_id, mu, fc));
                    for v in snapped_candidates(problem, &x, codes) {
                        tracker.offer(problem, &v);
                    }
                }
                None => {
                    let v = AttributeVector::new(x.clone(), codes.to_vec());
                    if problem.penalty(&v) == 0.0 || mu > 1e12 {
                        break;
                    }
                    mu *= 2.0;
                    step = 1.0 / mu;
                }
            }
        }
    }
}

/// Searches for the nearest separating counterfactual of `seed` for `rule`.
pub fn generate_counterfactual(
    seed: &Item,
    rule: &MisconceptionRule,
    gc: &GenerationConstraints,
    pred: &PsychometricPredictor,
    budget: &SearchBudget,
) -> Result<GenerationOutcome> {
    generate_counterfactual_traced(seed, rule, gc, pred, budget, &mut SearchTrace::default())
}

pub fn generate_counterfactual_traced(
    seed: &Item,
    rule: &MisconceptionRule,
    gc: &GenerationConstraints,
    pred: &PsychometricPredictor,
    budget: &SearchBudget,
    trace: &mut SearchTrace,
) -> Result<GenerationOutcome> {
    gc.check()?;
    let seed_v = seed
        .attributes
        .as_ref()
        .ok_or_else(|| Error::Config(format!("seed item {} has no attribute vector", seed.id)))?;
    if seed_v.continuous.len() != gc.bounds.len() {
        return Err(Error::Shape {
            expected: gc.bounds.len(),
            got: seed_v.continuous.len(),
        });
    }
    let problem = Problem {
        seed: seed_v,
        seed_a: seed.a,
        seed_b: seed.b,
        rule,
        gc,
        pred,
    };

    if gc.box_is_empty() {
        return Ok(GenerationOutcome::Infeasible(InfeasibleReport {
            best_candidate: None,
            best_margin: None,
            violations: vec!["attribute box is empty".into()],
            examined: 0,
        }));
    }

    if problem.feasible(seed_v) {
        let margin = shortcut_margin(rule, seed_v)?;
        return Ok(GenerationOutcome::Found(Counterfactual {
            item: seed.clone(),
            attributes: seed_v.clone(),
            distance: 0.0,
            margin,
            predicted_a: pred.predict_a(seed_v),
            predicted_b: pred.predict_b(seed_v),
        }));
    }

    let mut tracker = Tracker {
        best: None,
        best_margin: None,
        examined: 0,
    };
    let n = seed_v.continuous.len();
    for codes in combinations(&problem)?
        .into_iter()
        .take(budget.beam_width.max(1))
    {
        let codes_only = AttributeVector::new(seed_v.continuous.clone(), codes.clone());
        // Code-only predicates cannot be repaired by moving the continuous block.
        let code_violation = gc
            .predicates
            .iter()
            .any(|p| !p.involves_continuous() && p.violation(&codes_only) > 0.0);
        if code_violation {
            tracker.offer(&problem, &codes_only);
            continue;
        }
        if n == 0 {
            tracker.offer(&problem, &codes_only);
            continue;
        }
        let axes: Option<Vec<Vec<f64>>> = (0..n).map(|i| problem.lattice_axis(i)).collect();
        let lattice_size = axes.as_ref().and_then(|a| {
            a.iter()
                .try_fold(1usize, |acc, ax| acc.checked_mul(ax.len()))
        });
        match (axes, lattice_size) {
            (Some(axes), Some(size)) if size <= budget.lattice_limit => {
                exact_lattice(&problem, &codes, &axes, &mut tracker)
            }
            _ => projected_gradient(&problem, &codes, budget, &mut tracker, trace),
        }
    }

    match tracker.best {
        Some(best) => {
            let v = best.v;
            let a = pred.predict_a(&v);
            let b = pred.predict_b(&v);
            let mut item = seed.clone();
            item.id = format!("{}~cf{}", seed.id, rule.id);
            item.a = a;
            item.b = b;
            item.text = seed.template.as_deref().map(|t| render_template(t, &v));
            item.attributes = Some(v.clone());
            Ok(GenerationOutcome::Found(Counterfactual {
                item,
                margin: shortcut_margin(rule, &v)?,
                attributes: v,
                distance: best.distance,
                predicted_a: a,
                predicted_b: b,
            }))
        }
        None => {
            let (best_candidate, best_margin, violations) = match tracker.best_margin {
                Some((v, m)) => {
                    let viol = problem.violations(&v);
                    (Some(v), Some(m), viol)
                }
                None => (None, None, vec!["no candidate could be evaluated".into()]),
            };
            Ok(GenerationOutcome::Infeasible(InfeasibleReport {
                best_candidate,
                best_margin,
                violations,
                examined: tracker.examined,
            }))
        }
    }
}
