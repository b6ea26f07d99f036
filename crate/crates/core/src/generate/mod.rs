//! Counterfactual item synthesis.
//!
//! An item is described by a structured attribute vector: continuous numeric
//! parameters and categorical codes. A misconception is a pair of closed-form
//! rules (the correct computation and the shortcut the misconception applies).
//! A counterfactual is the nearest attribute vector, under a diagonal weighted
//! norm, whose correct answer differs from the shortcut answer by at least a
//! margin while staying valid and psychometrically close to the seed.

mod predictor;
mod search;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use predictor::{fit_psychometric_predictor, PsychometricPredictor};
pub use search::{
    generate_counterfactual, generate_counterfactual_traced, Counterfactual, GenerationOutcome,
    InfeasibleReport, SearchBudget, SearchTrace,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeVector {
    pub continuous: Vec<f64>,
    #[serde(default)]
    pub discrete: Vec<u32>,
}

impl AttributeVector {
    pub fn new(continuous: Vec<f64>, discrete: Vec<u32>) -> Self {
        AttributeVector {
            continuous,
            discrete,
        }
    }
}

/// Closed-form rule pairs. Linear templates share a base
/// `Σ coeffs[i]·x[i] + Σ code_effects[j][code_j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "template", rename_all = "snake_case")]
pub enum RuleTemplate {
    /// The shortcut negates one term.
    SignFlip {
        coeffs: Vec<f64>,
        flipped: usize,
        #[serde(default)]
        code_effects: Vec<Vec<f64>>,
    },
    /// The shortcut leaves one term out.
    DroppedTerm {
        coeffs: Vec<f64>,
        dropped: usize,
        #[serde(default)]
        code_effects: Vec<Vec<f64>>,
    },
    /// The correct answer converts one quantity by `factor`; the shortcut uses it raw.
    UnitConfusion {
        coeffs: Vec<f64>,
        converted: usize,
        factor: f64,
        #[serde(default)]
        code_effects: Vec<Vec<f64>>,
    },
    /// Correct answer `x[numerator] / x[denominator]`; the shortcut inverts it.
    SwappedOperands {
        numerator: usize,
        denominator: usize,
    },
}

fn linear_base(coeffs: &[f64], code_effects: &[Vec<f64>], v: &AttributeVector) -> Result<f64> {
    if coeffs.len() > v.continuous.len() {
        return Err(Error::Domain(format!(
            "rule uses {} continuous attributes, vector has {}",
            coeffs.len(),
            v.continuous.len()
        )));
    }
    let mut total: f64 = coeffs.iter().zip(&v.continuous).map(|(c, x)| c * x).sum();
    for (j, effects) in code_effects.iter().enumerate() {
        let code = *v.discrete.get(j).ok_or(Error::Index {
            index: j,
            len: v.discrete.len(),
        })? as usize;
        total += effects.get(code).ok_or(Error::Domain(format!(
            "code {code} has no effect entry in rule"
        )))?;
    }
    Ok(total)
}

fn term(coeffs: &[f64], idx: usize, v: &AttributeVector) -> Result<f64> {
    match (coeffs.get(idx), v.continuous.get(idx)) {
        (Some(c), Some(x)) => Ok(c * x),
        _ => Err(Error::Domain(format!("rule term {idx} out of range"))),
    }
}

impl RuleTemplate {
    /// `(correct answer, shortcut answer)` at `v`.
    pub fn answers(&self, v: &AttributeVector) -> Result<(f64, f64)> {
        match self {
            RuleTemplate::SignFlip {
                coeffs,
                flipped,
                code_effects,
            } => {
                let base = linear_base(coeffs, code_effects, v)?;
                Ok((base, base - 2.0 * term(coeffs, *flipped, v)?))
            }
            RuleTemplate::DroppedTerm {
                coeffs,
                dropped,
                code_effects,
            } => {
                let base = linear_base(coeffs, code_effects, v)?;
                Ok((base, base - term(coeffs, *dropped, v)?))
            }
            RuleTemplate::UnitConfusion {
                coeffs,
                converted,
                factor,
                code_effects,
            } => {
                let base = linear_base(coeffs, code_effects, v)?;
                Ok((base + (factor - 1.0) * term(coeffs, *converted, v)?, base))
            }
            RuleTemplate::SwappedOperands {
                numerator,
                denominator,
            } => {
                let get = |i: usize| {
                    v.continuous
                        .get(i)
                        .copied()
                        .ok_or(Error::Domain(format!("operand {i} out of range")))
                };
                let (n, d) = (get(*numerator)?, get(*denominator)?);
                if n == 0.0 || d == 0.0 {
                    return Err(Error::Domain(
                        "swapped-operands rule undefined with a zero operand".into(),
                    ));
                }
                Ok((n / d, d / n))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisconceptionRule {
    /// Mixture component this rule describes.
    pub id: usize,
    #[serde(default)]
    pub name: String,
    #[serde(flatten)]
    pub template: RuleTemplate,
}

impl MisconceptionRule {
    pub fn new(id: usize, name: impl Into<String>, template: RuleTemplate) -> Self {
        MisconceptionRule {
            id,
            name: name.into(),
            template,
        }
    }

    pub fn true_answer(&self, v: &AttributeVector) -> Result<f64> {
        Ok(self.template.answers(v)?.0)
    }

    pub fn shortcut_answer(&self, v: &AttributeVector) -> Result<f64> {
        Ok(self.template.answers(v)?.1)
    }
}

/// `Δ_m(v) = |true(v) - shortcut(v)|`.
pub fn shortcut_margin(rule: &MisconceptionRule, v: &AttributeVector) -> Result<f64> {
    let (t, s) = rule.template.answers(v)?;
    let delta = (t - s).abs();
    if !delta.is_finite() {
        return Err(Error::Domain("rule evaluated to a non-finite value".into()));
    }
    Ok(delta)
}

/// Content-validity predicates over an attribute vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Predicate {
    /// `Σ coeffs[i]·x[i] <= bound`.
    Linear {
        name: String,
        coeffs: Vec<f64>,
        bound: f64,
    },
    /// Code `code` may not take `value`.
    Forbid {
        name: String,
        code: usize,
        value: u32,
    },
    /// If code `if_code` equals `if_value`, code `then_code` must equal `then_value`.
    Requires {
        name: String,
        if_code: usize,
        if_value: u32,
        then_code: usize,
        then_value: u32,
    },
}

impl Predicate {
    pub fn name(&self) -> &str {
        match self {
            Predicate::Linear { name, .. }
            | Predicate::Forbid { name, .. }
            | Predicate::Requires { name, .. } => name,
        }
    }

    /// Amount by which the predicate is violated (0 when satisfied).
    fn violation(&self, v: &AttributeVector) -> f64 {
        let code = |j: usize| v.discrete.get(j).copied();
        match self {
            Predicate::Linear { coeffs, bound, .. } => {
                let lhs: f64 = coeffs.iter().zip(&v.continuous).map(|(c, x)| c * x).sum();
                (lhs - bound).max(0.0)
            }
            Predicate::Forbid { code: j, value, .. } => {
                if code(*j) == Some(*value) {
                    1.0
                } else {
                    0.0
                }
            }
            Predicate::Requires {
                if_code,
                if_value,
                then_code,
                then_value,
                ..
            } => {
                if code(*if_code) == Some(*if_value) && code(*then_code) != Some(*then_value) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn involves_continuous(&self) -> bool {
        matches!(self, Predicate::Linear { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConstraints {
    /// `[lo, hi]` per continuous attribute.
    pub bounds: Vec<[f64; 2]>,
    /// Lattice resolution per continuous attribute; 0 or missing means continuous.
    pub steps: Vec<f64>,
    /// Number of levels per discrete code.
    pub levels: Vec<u32>,
    pub predicates: Vec<Predicate>,
    pub eps_a: f64,
    pub eps_b: f64,
    /// Required shortcut margin `Δ_m(v) >= delta`.
    pub delta: f64,
    /// Diagonal distance weights for the continuous block; missing entries are 1.
    pub weights_continuous: Vec<f64>,
    /// Weights charged when a discrete code changes; missing entries are 1.
    pub weights_discrete: Vec<f64>,
}

impl Default for GenerationConstraints {
    fn default() -> Self {
        GenerationConstraints {
            bounds: Vec::new(),
            steps: Vec::new(),
            levels: Vec::new(),
            predicates: Vec::new(),
            eps_a: 0.2,
            eps_b: 0.3,
            delta: 1.0,
            weights_continuous: Vec::new(),
            weights_discrete: Vec::new(),
        }
    }
}

impl GenerationConstraints {
    pub fn check(&self) -> Result<()> {
        if !(self.eps_a >= 0.0 && self.eps_b >= 0.0) {
            return Err(Error::Config("eps_a and eps_b must be >= 0".into()));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::Config("delta must be >= 0".into()));
        }
        if self
            .weights_continuous
            .iter()
            .chain(&self.weights_discrete)
            .any(|&w| !(w >= 0.0))
        {
            return Err(Error::Config("distance weights must be >= 0".into()));
        }
        if self.steps.iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::Config("lattice steps must be >= 0".into()));
        }
        Ok(())
    }

    pub fn weight_continuous(&self, i: usize) -> f64 {
        self.weights_continuous.get(i).copied().unwrap_or(1.0)
    }

    pub fn weight_discrete(&self, j: usize) -> f64 {
        self.weights_discrete.get(j).copied().unwrap_or(1.0)
    }

    pub fn step(&self, i: usize) -> f64 {
        self.steps.get(i).copied().unwrap_or(0.0)
    }

    /// True when some attribute has `lo > hi`.
    pub fn box_is_empty(&self) -> bool {
        self.bounds.iter().any(|[lo, hi]| lo > hi) || self.levels.iter().any(|&l| l == 0)
    }

    /// `‖v - seed‖_W` with code changes charged their weight.
    pub fn distance(&self, v: &AttributeVector, seed: &AttributeVector) -> f64 {
        let cont: f64 = v
            .continuous
            .iter()
            .zip(&seed.continuous)
            .enumerate()
            .map(|(i, (x, q))| self.weight_continuous(i) * (x - q) * (x - q))
            .sum();
        let disc: f64 = v
            .discrete
            .iter()
            .zip(&seed.discrete)
            .enumerate()
            .filter(|(_, (c, q))| c != q)
            .map(|(j, _)| self.weight_discrete(j))
            .sum();
        (cont + disc).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub valid: bool,
    pub violations: Vec<String>,
}

fn on_lattice(x: f64, lo: f64, step: f64) -> bool {
    let k = ((x - lo) / step).round();
    (lo + k * step - x).abs() <= 1e-9 * step.max(1.0)
}

/// Evaluates every validity predicate (box, lattice, code range, declared
/// predicates) and names each one that fails.
pub fn validate_item(v: &AttributeVector, gc: &GenerationConstraints) -> ValidationReport {
    let mut violations = Vec::new();
    if v.continuous.len() != gc.bounds.len() {
        violations.push(format!(
            "shape: {} continuous attributes, constraints declare {}",
            v.continuous.len(),
            gc.bounds.len()
        ));
    }
    for (i, (&x, &[lo, hi])) in v.continuous.iter().zip(&gc.bounds).enumerate() {
        if !(x >= lo && x <= hi) {
            violations.push(format!("box[{i}]: {x} outside [{lo}, {hi}]"));
        } else {
            let step = gc.step(i);
            if step > 0.0 && !on_lattice(x, lo, step) {
                violations.push(format!(
                    "lattice[{i}]: {x} not a multiple of {step} from {lo}"
                ));
            }
        }
    }
    if !gc.levels.is_empty() && v.discrete.len() != gc.levels.len() {
        violations.push(format!(
            "shape: {} discrete codes, constraints declare {}",
            v.discrete.len(),
            gc.levels.len()
        ));
    }
    for (j, (&c, &levels)) in v.discrete.iter().zip(&gc.levels).enumerate() {
        if c >= levels {
            violations.push(format!("code[{j}]: {c} not below {levels} levels"));
        }
    }
    for p in &gc.predicates {
        if p.violation(v) > 0.0 {
            violations.push(p.name().to_string());
        }
    }
    ValidationReport {
        valid: violations.is_empty(),
        violations,
    }
}

/// Substitutes `{xN}` and `{cN}` placeholders with attribute values.
pub fn render_template(template: &str, v: &AttributeVector) -> String {
    let mut out = template.to_string();
    for (i, x) in v.continuous.iter().enumerate() {
        out = out.replace(&format!("{{x{i}}}"), &format_number(*x));
    }
    for (j, c) in v.discrete.iter().enumerate() {
        out = out.replace(&format!("{{c{j}}}"), &c.to_string());
    }
    out
}

fn format_number(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        let s = format!("{x:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sign_flip() -> MisconceptionRule {
        MisconceptionRule::new(
            0,
            "sign-flip",
            RuleTemplate::SignFlip {
                coeffs: vec![1.0, 1.0],
                flipped: 1,
                code_effects: vec![],
            },
        )
    }

    #[test]
    fn margin_examples() {
        let r = sign_flip();
        assert_eq!(
            shortcut_margin(&r, &AttributeVector::new(vec![3.0, 0.0], vec![])).unwrap(),
            0.0
        );
        assert_eq!(
            shortcut_margin(&r, &AttributeVector::new(vec![3.0, 4.0], vec![])).unwrap(),
            8.0
        );

        // true = 10, shortcut = 7
        let dropped = MisconceptionRule::new(
            1,
            "dropped",
            RuleTemplate::DroppedTerm {
                coeffs: vec![7.0, 1.0],
                dropped: 1,
                code_effects: vec![],
            },
        );
        let v = AttributeVector::new(vec![1.0, 3.0], vec![]);
        assert_eq!(dropped.true_answer(&v).unwrap(), 10.0);
        assert_eq!(dropped.shortcut_answer(&v).unwrap(), 7.0);
        assert_eq!(shortcut_margin(&dropped, &v).unwrap(), 3.0);
    }

    #[test]
    fn unit_confusion_and_swapped() {
        let unit = MisconceptionRule::new(
            0,
            "minutes",
            RuleTemplate::UnitConfusion {
                coeffs: vec![1.0],
                converted: 0,
                factor: 60.0,
                code_effects: vec![],
            },
        );
        assert_eq!(
            shortcut_margin(&unit, &AttributeVector::new(vec![2.0], vec![])).unwrap(),
            118.0
        );

        let swapped = MisconceptionRule::new(
            0,
            "swap",
            RuleTemplate::SwappedOperands {
                numerator: 0,
                denominator: 1,
            },
        );
        assert_eq!(
            shortcut_margin(&swapped, &AttributeVector::new(vec![2.0, 2.0], vec![])).unwrap(),
            0.0
        );
        assert!(
            (shortcut_margin(&swapped, &AttributeVector::new(vec![4.0, 2.0], vec![])).unwrap()
                - 1.5)
                .abs()
                < 1e-15
        );
        assert!(matches!(
            shortcut_margin(&swapped, &AttributeVector::new(vec![4.0, 0.0], vec![])),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn code_effects_enter_base() {
        let r = MisconceptionRule::new(
            0,
            "coded",
            RuleTemplate::DroppedTerm {
                coeffs: vec![1.0],
                dropped: 0,
                code_effects: vec![vec![0.0, 5.0]],
            },
        );
        let v = AttributeVector::new(vec![2.0], vec![1]);
        assert_eq!(r.template.answers(&v).unwrap(), (7.0, 5.0));
    }

    fn gc() -> GenerationConstraints {
        GenerationConstraints {
            bounds: vec![[0.0, 10.0], [0.0, 10.0]],
            levels: vec![2],
            predicates: vec![Predicate::Linear {
                name: "sum-cap".into(),
                coeffs: vec![1.0, 1.0],
                bound: 12.0,
            }],
            ..Default::default()
        }
    }

    #[test]
    fn validation_reports() {
        let ok = validate_item(&AttributeVector::new(vec![1.0, 2.0], vec![0]), &gc());
        assert!(ok.valid && ok.violations.is_empty());

        let lin = validate_item(&AttributeVector::new(vec![7.0, 7.0], vec![0]), &gc());
        assert!(!lin.valid);
        assert_eq!(lin.violations, vec!["sum-cap".to_string()]);

        let boxed = validate_item(&AttributeVector::new(vec![-1.0, 2.0], vec![0]), &gc());
        assert!(!boxed.valid);
        assert!(boxed.violations[0].starts_with("box[0]"));

        let mut g = gc();
        g.predicates.push(Predicate::Requires {
            name: "needs-code".into(),
            if_code: 0,
            if_value: 1,
            then_code: 0,
            then_value: 0,
        });
        let r = validate_item(&AttributeVector::new(vec![1.0, 1.0], vec![1]), &g);
        assert_eq!(r.violations, vec!["needs-code".to_string()]);
    }

    #[test]
    fn lattice_membership() {
        let mut g = gc();
        g.steps = vec![0.5, 0.0];
        assert!(validate_item(&AttributeVector::new(vec![1.5, 2.3], vec![0]), &g).valid);
        assert!(!validate_item(&AttributeVector::new(vec![1.3, 2.3], vec![0]), &g).valid);
    }

    #[test]
    fn distance_counts_code_changes() {
        let g = GenerationConstraints {
            weights_continuous: vec![4.0, 1.0],
            weights_discrete: vec![9.0],
            ..gc()
        };
        let seed = AttributeVector::new(vec![1.0, 1.0], vec![0]);
        let v = AttributeVector::new(vec![2.0, 1.0], vec![1]);
        assert!((g.distance(&v, &seed) - 13f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn rendering() {
        let v = AttributeVector::new(vec![3.0, 2.5], vec![1]);
        assert_eq!(
            render_template("A car drives {x0} h at {x1} km/h ({c0})", &v),
            "A car drives 3 h at 2.5 km/h (1)"
        );
    }

    #[test]
    fn rule_serde_shape() {
        let r = sign_flip();
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"template\":\"sign_flip\""));
        let back: MisconceptionRule = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
