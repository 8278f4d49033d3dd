//! Training losses: distribution consistency between the fused and plain
//! prediction paths, in-batch self-identification with hardest negatives,
//! and classification of the gold relation.
//!
//! Every loss comes in two forms. The free functions over plain values are
//! used for evaluation and reporting; [`batch_losses`] builds the same
//! quantities on a graph so they can be differentiated.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{cosine, Matrix};

/// Added inside every logarithm.
pub const LOG_EPS: f64 = 1e-12;
const DISTRIBUTION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyMode {
    /// `sum p_fused * ln(p_fused / p_plain)`.
    #[default]
    Kl,
    /// `-sum p_fused * ln(p_plain)`.
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfIdMode {
    /// `[margin - s(x, x~) + s(x_n, x~)]+ + [margin - s(x, x~) + s(x, x~_n)]+`.
    #[default]
    MarginTriplet,
    /// `[s(x, x~) - s(x_n, x~)]+ + [s(x, x~) - s(x, x~_n)]+`.
    UnmarginedHinge,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_d: f64,
    pub lambda_s: f64,
    pub lambda_c: f64,
    pub margin: f64,
    pub ld_mode: ConsistencyMode,
    pub ls_mode: SelfIdMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_d: 2.0,
            lambda_s: 2.0,
            lambda_c: 3.0,
            margin: 0.2,
            ld_mode: ConsistencyMode::Kl,
            ls_mode: SelfIdMode::MarginTriplet,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_d", self.lambda_d), ("lambda_s", self.lambda_s), ("lambda_c", self.lambda_c), ("margin", self.margin)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }

    pub fn uses_self_identification(&self) -> bool {
        self.lambda_s > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_d: f64,
    pub l_s: f64,
    pub l_c: f64,
    pub total: f64,
    /// `(x_n, x~_n)` per sample; empty when the batch has a single sample.
    pub hardest_negatives: Vec<(usize, usize)>,
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    let total: f64 = p.iter().sum();
    if p.iter().any(|&x| !(x.is_finite() && x >= 0.0)) || (total - 1.0).abs() > DISTRIBUTION_TOL {
        return Err(Error::InvalidInput(format!("{what} is not a probability distribution (sum {total})")));
    }
    Ok(())
}

/// Consistency between the fused-path and plain-path relation distributions.
pub fn distribution_consistency(p_fused: &[f64], p_plain: &[f64], mode: ConsistencyMode) -> Result<f64> {
    if p_fused.len() != p_plain.len() {
        return Err(Error::InvalidInput(format!("distribution lengths differ: {} vs {}", p_fused.len(), p_plain.len())));
    }
    check_distribution(p_fused, "fused distribution")?;
    check_distribution(p_plain, "plain distribution")?;
    let terms = p_fused.iter().zip(p_plain);
    Ok(match mode {
        ConsistencyMode::Kl => terms.map(|(&p, &q)| p * ((p + LOG_EPS).ln() - (q + LOG_EPS).ln())).sum(),
        ConsistencyMode::CrossEntropy => -terms.map(|(&p, &q)| p * (q + LOG_EPS).ln()).sum::<f64>(),
    })
}

/// Pairwise similarities `s[i][j] = cos(plain[i], fused[j])`; undefined pairs are 0.
pub fn similarity_matrix(plain: &Matrix, fused: &Matrix) -> Matrix {
    let b = plain.rows();
    let mut s = Matrix::zeros(b, fused.rows());
    for i in 0..b {
        for j in 0..fused.rows() {
            s.set(i, j, cosine(plain.row(i), fused.row(j)).unwrap_or(0.0));
        }
    }
    s
}

fn argmax_excluding(n: usize, skip: usize, score: impl Fn(usize) -> f64) -> usize {
    let mut best = None;
    for j in (0..n).filter(|&j| j != skip) {
        match best {
            Some((_, s)) if score(j) <= s => {}
            _ => best = Some((j, score(j))),
        }
    }
    best.expect("at least one candidate").0
}

/// For every anchor `i`, the plain row most similar to fused row `i` and the
/// fused row most similar to plain row `i`, excluding `i`; ties go to the
/// smallest index.
pub fn hardest_negatives_from_similarity(s: &Matrix) -> Result<Vec<(usize, usize)>> {
    let b = s.rows();
    if b < 2 {
        return Err(Error::InvalidInput("hardest negatives need a batch of at least 2".into()));
    }
    Ok((0..b)
        .map(|i| (argmax_excluding(b, i, |j| s.get(j, i)), argmax_excluding(b, i, |j| s.get(i, j))))
        .collect())
}

/// Hardest in-batch negatives for plain states `plain` and fused states `fused` (rows are samples).
pub fn hardest_negatives(plain: &Matrix, fused: &Matrix) -> Result<Vec<(usize, usize)>> {
    if plain.shape() != fused.shape() {
        return Err(Error::InvalidInput("plain and fused batches differ in shape".into()));
    }
    hardest_negatives_from_similarity(&similarity_matrix(plain, fused))
}

fn hinge_pair(pos: f64, neg_plain: f64, neg_fused: f64, margin: f64, mode: SelfIdMode) -> f64 {
    match mode {
        SelfIdMode::MarginTriplet => (margin - pos + neg_plain).max(0.0) + (margin - pos + neg_fused).max(0.0),
        SelfIdMode::UnmarginedHinge => (pos - neg_plain).max(0.0) + (pos - neg_fused).max(0.0),
    }
}

/// Batch mean of the two-sided hinge over hardest negatives.
pub fn self_identification(
    plain: &Matrix,
    fused: &Matrix,
    negatives: &[(usize, usize)],
    margin: f64,
    mode: SelfIdMode,
) -> Result<f64> {
    if negatives.len() != plain.rows() {
        return Err(Error::InvalidInput("one negative pair per sample is required".into()));
    }
    let s = similarity_matrix(plain, fused);
    let total: f64 = negatives
        .iter()
        .enumerate()
        .map(|(i, &(xn, xtn))| hinge_pair(s.get(i, i), s.get(xn, i), s.get(i, xtn), margin, mode))
        .sum();
    Ok(total / plain.rows() as f64)
}

/// `-ln p[gold]`.
pub fn classification(masked_probs: &[f64], gold: usize) -> Result<f64> {
    let p = *masked_probs
        .get(gold)
        .ok_or_else(|| Error::InvalidInput(format!("gold relation {gold} outside {} relations", masked_probs.len())))?;
    if p == 0.0 {
        return Err(Error::InvalidInput(format!("gold relation {gold} is masked out for its type pair")));
    }
    Ok(-(p + LOG_EPS).ln())
}

/// Weighted sum of the three components.
pub fn joint(l_d: f64, l_s: f64, l_c: f64, weights: &LossWeights) -> LossReport {
    LossReport {
        l_d,
        l_s,
        l_c,
        total: weights.lambda_d * l_d + weights.lambda_s * l_s + weights.lambda_c * l_c,
        hardest_negatives: Vec::new(),
    }
}

/// Batch-level graph inputs.
#[derive(Debug, Clone, Copy)]
pub struct BatchVars {
    /// `B x N` plain pooled text states.
    pub plain: Var,
    /// `B x N` fused states.
    pub fused: Var,
    /// `B x R` fused-path distributions.
    pub p_fused: Var,
    /// `B x R` distributions the predictions are read from.
    pub p_pred: Var,
    /// `B x R` plain-path distributions, when that path was decoded.
    pub p_plain: Option<Var>,
}

/// Graph handles of the three losses and their weighted total.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_d: Option<Var>,
    pub l_s: Option<Var>,
    pub l_c: Var,
    pub total: Var,
}

fn row_sum_mean(g: &mut Graph<'_>, m: Var) -> Var {
    let b = g.value(m).rows() as f64;
    let s = g.sum(m);
    g.scale(s, 1.0 / b)
}

/// Builds the weighted loss on `g`. Components with zero weight are still
/// reported but do not enter the total. `l_s` is skipped for a batch of one.
pub fn batch_losses(g: &mut Graph<'_>, vars: BatchVars, golds: &[usize], weights: &LossWeights) -> Result<(LossVars, LossReport)> {
    weights.validate()?;
    let b = g.value(vars.p_pred).rows();
    if golds.len() != b {
        return Err(Error::InvalidInput(format!("{} gold labels for a batch of {b}", golds.len())));
    }

    let l_d = match vars.p_plain {
        Some(p_plain) => {
            let log_q = g.log(p_plain, LOG_EPS);
            let inner = match weights.ld_mode {
                ConsistencyMode::Kl => {
                    let log_p = g.log(vars.p_fused, LOG_EPS);
                    g.sub(log_p, log_q)
                }
                ConsistencyMode::CrossEntropy => g.scale(log_q, -1.0),
            };
            let terms = g.mul(vars.p_fused, inner);
            Some(row_sum_mean(g, terms))
        }
        None => None,
    };

    let mut negatives = Vec::new();
    let l_s = if b >= 2 {
        let s = g.cosine(vars.plain, vars.fused);
        negatives = hardest_negatives_from_similarity(g.value(s))?;
        let mut hinges = Vec::with_capacity(2 * b);
        for (i, &(xn, xtn)) in negatives.iter().enumerate() {
            let pos = g.pick(s, i, i);
            for neg in [g.pick(s, xn, i), g.pick(s, i, xtn)] {
                let h = match weights.ls_mode {
                    SelfIdMode::MarginTriplet => {
                        let d = g.sub(neg, pos);
                        g.add_const(d, weights.margin)
                    }
                    SelfIdMode::UnmarginedHinge => g.sub(pos, neg),
                };
                hinges.push(g.relu(h));
            }
        }
        let all = g.concat_rows(&hinges);
        let total = g.sum(all);
        Some(g.scale(total, 1.0 / b as f64))
    } else {
        None
    };

    let mut picks = Vec::with_capacity(b);
    for (i, &gold) in golds.iter().enumerate() {
        if gold >= g.value(vars.p_pred).cols() {
            return Err(Error::InvalidInput(format!("gold relation {gold} outside the relation set")));
        }
        picks.push(g.pick(vars.p_pred, i, gold));
    }
    let gold_probs = g.concat_rows(&picks);
    let logs = g.log(gold_probs, LOG_EPS);
    let l_c_sum = g.sum(logs);
    let l_c = g.scale(l_c_sum, -1.0 / b as f64);

    let mut total = g.scale(l_c, weights.lambda_c);
    for (part, w) in [(l_d, weights.lambda_d), (l_s, weights.lambda_s)] {
        if let (Some(v), true) = (part, w > 0.0) {
            let weighted = g.scale(v, w);
            total = g.add(total, weighted);
        }
    }

    let value = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).scalar());
    let mut report = joint(value(l_d), value(l_s), g.value(l_c).scalar(), weights);
    report.hardest_negatives = negatives;
    Ok((LossVars { l_d, l_s, l_c, total }, report))
}
