//! Cost/recall sweep over greedily grown keyword sets.
//!
//! Each step adds the candidate keyword that most raises train recall,
//! giving nested sets `S_1 ⊂ S_2 ⊂ …`. Every set is then evaluated on both
//! splits, costs are normalized within each split, and a concave quadratic
//! is fitted to each split's (normalized cost, recall) points.

mod harness;
mod svg;

pub use harness::{PipelineEvaluator, SplitData};
pub use svg::render_svg;

use crate::cost::Money;
use crate::par::{self, Strategy};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ParetoError {
    #[error("no candidate keywords")]
    NoCandidates,
    #[error("asked for {requested} keywords but only {available} candidates")]
    TooManySteps { requested: usize, available: usize },
    #[error("every cost is zero; nothing to normalize against")]
    AllZeroCosts,
    #[error("need at least 3 points to fit, got {0}")]
    TooFewPoints(usize),
    #[error("all points share x = {0}")]
    DegeneratePoints(f64),
    #[error("budget reached during the sweep")]
    BudgetHalt,
    #[error("evaluation failed: {0}")]
    Eval(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyStep {
    pub keywords: Vec<String>,
    pub added: String,
    pub recall: f64,
}

/// Greedy forward selection of `n` keywords. At each step every remaining
/// candidate is scored with the current picks (in parallel under
/// `strategy`); the best recall wins, ties going to the smaller keyword.
pub fn greedy_select<F>(candidates: &[String], n: usize, strategy: Strategy, eval: F) -> Result<Vec<GreedyStep>, ParetoError>
where
    F: Fn(&[String]) -> Result<f64, ParetoError> + Sync + Send,
{
    let mut pool: Vec<String> = candidates.to_vec();
    pool.sort();
    pool.dedup();
    if pool.is_empty() {
        return Err(ParetoError::NoCandidates);
    }
    if n > pool.len() {
        return Err(ParetoError::TooManySteps {
            requested: n,
            available: pool.len(),
        });
    }
    let mut picked: Vec<String> = Vec::new();
    let mut steps = Vec::with_capacity(n);
    for _ in 0..n {
        let trials: Vec<Vec<String>> = pool
            .iter()
            .map(|c| {
                let mut ks = picked.clone();
                ks.push(c.clone());
                ks
            })
            .collect();
        let scores = par::map_ordered(&trials, strategy, |ks| eval(ks));
        let mut best: Option<(usize, f64)> = None;
        for (i, s) in scores.into_iter().enumerate() {
            let s = s?;
            // `pool` is sorted, so the first maximum is the lexicographic tie winner.
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        let (i, recall) = best.expect("pool is non-empty");
        let added = pool.remove(i);
        picked.push(added.clone());
        steps.push(GreedyStep {
            keywords: picked.clone(),
            added,
            recall,
        });
    }
    Ok(steps)
}

/// Divides each cost by the maximum.
pub fn normalize_costs(costs: &[Money]) -> Result<Vec<f64>, ParetoError> {
    let max = costs.iter().copied().max().unwrap_or(Money::ZERO);
    if max <= Money::ZERO {
        return Err(ParetoError::AllZeroCosts);
    }
    Ok(costs
        .iter()
        .map(|c| c.micros() as f64 / max.micros() as f64)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// The unconstrained fit was convex and was replaced by a line.
    pub constraint_active: bool,
}

impl QuadraticFit {
    pub fn eval(&self, x: f64) -> f64 {
        self.a * x * x + self.b * x + self.c
    }

    pub fn residual_norm(&self, points: &[(f64, f64)]) -> f64 {
        points.iter().map(|&(x, y)| (y - self.eval(x)).powi(2)).sum::<f64>().sqrt()
    }
}

fn least_squares(points: &[(f64, f64)], degree: usize) -> Vec<f64> {
    let cols = degree + 1;
    let x = DMatrix::from_fn(points.len(), cols, |r, c| points[r].0.powi((degree - c) as i32));
    let y = DVector::from_iterator(points.len(), points.iter().map(|p| p.1));
    let svd = x.svd(true, true);
    svd.solve(&y, 1e-12).expect("U and V were computed").iter().copied().collect()
}

/// Least-squares `a x² + b x + c` subject to `a ≤ 0`. A convex unconstrained
/// optimum means the constraint binds, and the best feasible fit is then the
/// least-squares line. Two distinct x values also give a line.
pub fn fit_constrained_quadratic(points: &[(f64, f64)]) -> Result<QuadraticFit, ParetoError> {
    if points.len() < 3 {
        return Err(ParetoError::TooFewPoints(points.len()));
    }
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() == 1 {
        return Err(ParetoError::DegeneratePoints(xs[0]));
    }
    let linear = |active| {
        let bc = least_squares(points, 1);
        QuadraticFit { a: 0.0, b: bc[0], c: bc[1], constraint_active: active }
    };
    if xs.len() == 2 {
        return Ok(linear(false));
    }
    let abc = least_squares(points, 2);
    if abc[0] > 0.0 {
        return Ok(linear(true));
    }
    Ok(QuadraticFit { a: abc[0], b: abc[1], c: abc[2], constraint_active: false })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub keyword_count: usize,
    pub keywords: Vec<String>,
    pub recall_train: f64,
    pub recall_test: f64,
    pub cost_train: Money,
    pub cost_test: Money,
    pub norm_cost_train: f64,
    pub norm_cost_test: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frontier {
    pub points: Vec<ParetoPoint>,
    /// Absent with fewer than three points.
    pub fit_train: Option<QuadraticFit>,
    pub fit_test: Option<QuadraticFit>,
}

impl Frontier {
    pub fn series(&self, split: Split) -> Vec<(f64, f64)> {
        self.points
            .iter()
            .map(|p| match split {
                Split::Train => (p.norm_cost_train, p.recall_train),
                Split::Test => (p.norm_cost_test, p.recall_test),
            })
            .collect()
    }

    pub fn fit(&self, split: Split) -> Option<&QuadraticFit> {
        match split {
            Split::Train => self.fit_train.as_ref(),
            Split::Test => self.fit_test.as_ref(),
        }
    }

    /// Columns `keywords,split,recall,norm_cost,fit_a,fit_b,fit_c`; train rows first.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("keywords,split,recall,norm_cost,fit_a,fit_b,fit_c\n");
        for split in [Split::Train, Split::Test] {
            let fit = self.fit(split);
            let coef = |f: fn(&QuadraticFit) -> f64| fit.map(|q| format!("{:.9}", f(q))).unwrap_or_default();
            for (p, (x, y)) in self.points.iter().zip(self.series(split)) {
                out.push_str(&format!(
                    "{},{split},{y:.9},{x:.9},{},{},{}\n",
                    p.keyword_count,
                    coef(|q| q.a),
                    coef(|q| q.b),
                    coef(|q| q.c)
                ));
            }
        }
        out
    }
}

/// Recall and gross cost of the filtered pipeline on one split.
pub trait SplitEvaluator: Sync {
    fn evaluate(&self, split: Split, keywords: &[String]) -> Result<(f64, Money), ParetoError>;
}

/// Greedy selection on train recall, then both splits for every nested set.
pub fn sweep(eval: &dyn SplitEvaluator, candidates: &[String], n: usize, strategy: Strategy) -> Result<Frontier, ParetoError> {
    let steps = greedy_select(candidates, n, strategy, |ks| eval.evaluate(Split::Train, ks).map(|r| r.0))?;
    let mut rows = Vec::with_capacity(steps.len());
    for step in &steps {
        let (recall_train, cost_train) = eval.evaluate(Split::Train, &step.keywords)?;
        let (recall_test, cost_test) = eval.evaluate(Split::Test, &step.keywords)?;
        rows.push((step, recall_train, cost_train, recall_test, cost_test));
    }
    let norm_train = normalize_costs(&rows.iter().map(|r| r.2).collect::<Vec<_>>())?;
    let norm_test = normalize_costs(&rows.iter().map(|r| r.4).collect::<Vec<_>>())?;
    let points: Vec<ParetoPoint> = rows
        .iter()
        .enumerate()
        .map(|(i, (step, rt, ct, re, ce))| ParetoPoint {
            keyword_count: i + 1,
            keywords: step.keywords.clone(),
            recall_train: *rt,
            recall_test: *re,
            cost_train: *ct,
            cost_test: *ce,
            norm_cost_train: norm_train[i],
            norm_cost_test: norm_test[i],
        })
        .collect();
    let mut frontier = Frontier { points, fit_train: None, fit_test: None };
    if frontier.points.len() >= 3 {
        frontier.fit_train = fit_or_none(&frontier.series(Split::Train))?;
        frontier.fit_test = fit_or_none(&frontier.series(Split::Test))?;
    }
    Ok(frontier)
}

fn fit_or_none(points: &[(f64, f64)]) -> Result<Option<QuadraticFit>, ParetoError> {
    match fit_constrained_quadratic(points) {
        Ok(f) => Ok(Some(f)),
        Err(ParetoError::DegeneratePoints(_)) => Ok(None),
        Err(e) => Err(e),
    }
}
