//! 5x2 cross-validated paired t-test and the Student t distribution.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::ml::metrics::{Confusion, Scores};
use crate::ml::ModelSpec;

pub const ROUNDS: usize = 5;
pub const DEGREES_OF_FREEDOM: u32 = ROUNDS as u32;
pub const ALPHA: f64 = 0.05;

/// Regularized incomplete beta `I_x(a, b)`, evaluated by continued fraction.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    beta_reg(a, b, x.clamp(0.0, 1.0))
}

/// Probability that a Student t variable with `df` degrees of freedom
/// exceeds `|t|` in either direction.
pub fn t_two_sided_p(t: f64, df: u32) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    let v = df as f64;
    if t.is_infinite() {
        return 0.0;
    }
    incomplete_beta(v / 2.0, 0.5, v / (v + t * t))
}

/// Cumulative distribution of Student's t.
pub fn t_cdf(t: f64, df: u32) -> f64 {
    let tail = 0.5 * t_two_sided_p(t, df);
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Accuracy,
    F1,
}

impl Metric {
    pub fn score(self, labels: &[bool], predicted: &[bool]) -> f64 {
        let s = Scores::from_confusion(&Confusion::from_predictions(labels, predicted));
        match self {
            Metric::Accuracy => s.accuracy,
            Metric::F1 => s.f1,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Accuracy => "accuracy",
            Metric::F1 => "f1",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "accuracy" => Ok(Metric::Accuracy),
            "f1" => Ok(Metric::F1),
            _ => Err(Error::config(format!("unknown metric {s:?}, expected accuracy or f1"))),
        }
    }
}

/// t statistic from per-round fold differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TStatistic {
    pub variances: [f64; ROUNDS],
    pub t: f64,
    pub p_value: f64,
    /// Set when every round has zero variance; `t` is then `+inf` and `p` is 0.
    pub degenerate: bool,
}

pub fn dietterich_t(diffs: &[[f64; 2]; ROUNDS]) -> TStatistic {
    let mut variances = [0.0; ROUNDS];
    for (v, d) in variances.iter_mut().zip(diffs) {
        let mean = (d[0] + d[1]) / 2.0;
        *v = (d[0] - mean).powi(2) + (d[1] - mean).powi(2);
    }
    let mean_var = variances.iter().sum::<f64>() / ROUNDS as f64;
    if mean_var == 0.0 {
        return TStatistic {
            variances,
            t: f64::INFINITY,
            p_value: 0.0,
            degenerate: true,
        };
    }
    let t = diffs[0][0] / mean_var.sqrt();
    TStatistic {
        variances,
        t,
        p_value: t_two_sided_p(t, DEGREES_OF_FREEDOM),
        degenerate: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiveByTwoResult {
    pub metric: Metric,
    /// `scores_a[i][j]`: model A on round `i`, fold `j`.
    pub scores_a: [[f64; 2]; ROUNDS],
    pub scores_b: [[f64; 2]; ROUNDS],
    pub differences: [[f64; 2]; ROUNDS],
    pub variances: [f64; ROUNDS],
    pub t_statistic: f64,
    pub p_value: f64,
    pub degrees_of_freedom: u32,
    pub degenerate: bool,
}

impl FiveByTwoResult {
    pub fn from_scores(metric: Metric, scores_a: [[f64; 2]; ROUNDS], scores_b: [[f64; 2]; ROUNDS]) -> Self {
        let mut differences = [[0.0; 2]; ROUNDS];
        for i in 0..ROUNDS {
            for j in 0..2 {
                differences[i][j] = scores_a[i][j] - scores_b[i][j];
            }
        }
        let t = dietterich_t(&differences);
        FiveByTwoResult {
            metric,
            scores_a,
            scores_b,
            differences,
            variances: t.variances,
            t_statistic: t.t,
            p_value: t.p_value,
            degrees_of_freedom: DEGREES_OF_FREEDOM,
            degenerate: t.degenerate,
        }
    }

    pub fn significant(&self) -> bool {
        self.p_value < ALPHA
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "metric = {}", self.metric);
        for i in 0..ROUNDS {
            let _ = writeln!(
                out,
                "round {} a = [{:.6}, {:.6}] b = [{:.6}, {:.6}] diff = [{:.6}, {:.6}] s2 = {:.6e}",
                i + 1,
                self.scores_a[i][0],
                self.scores_a[i][1],
                self.scores_b[i][0],
                self.scores_b[i][1],
                self.differences[i][0],
                self.differences[i][1],
                self.variances[i]
            );
        }
        let _ = writeln!(out, "t = {:.6}", self.t_statistic);
        let _ = writeln!(out, "df = {}", self.degrees_of_freedom);
        let _ = writeln!(out, "p = {:.6e}", self.p_value);
        if self.degenerate {
            let _ = writeln!(out, "degenerate = true");
        }
        let verdict = if self.significant() { "significant" } else { "not significant" };
        let _ = writeln!(out, "verdict = {verdict} at alpha {ALPHA}");
        out
    }

    pub fn to_json(&self) -> String {
        // JSON has no infinity; the degenerate flag carries that case.
        let mut v = serde_json::to_value(self).expect("result serializes");
        if self.t_statistic.is_infinite() {
            v["t_statistic"] = serde_json::Value::String("inf".into());
        }
        serde_json::to_string_pretty(&v).expect("value serializes")
    }
}

/// Seeded halving of `0..n` for round `round`.
fn halves(n: usize, seed: u64, round: usize) -> [Vec<usize>; 2] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(round as u64 + 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let mut second = idx.split_off(n / 2);
    idx.sort_unstable();
    second.sort_unstable();
    [idx, second]
}

fn fold_score(spec: &ModelSpec, x: &Matrix, labels: &[bool], train: &[usize], test: &[usize], metric: Metric) -> Result<f64> {
    let y_train: Vec<bool> = train.iter().map(|&i| labels[i]).collect();
    let y_test: Vec<bool> = test.iter().map(|&i| labels[i]).collect();
    let model = spec.fit(&x.select_rows(train), &y_train)?;
    Ok(metric.score(&y_test, &model.predict(&x.select_rows(test))?))
}

/// Five seeded halvings; in each, both models train on one half and are
/// scored on the other, then the roles swap. Both models see the same rows.
pub fn five_by_two_cv(
    matrix_a: &Matrix,
    matrix_b: &Matrix,
    labels: &[bool],
    trainer_a: &ModelSpec,
    trainer_b: &ModelSpec,
    metric: Metric,
    seed: u64,
) -> Result<FiveByTwoResult> {
    let n = labels.len();
    for m in [matrix_a, matrix_b] {
        if m.n_rows() != n {
            return Err(Error::Alignment {
                what: "feature matrix rows",
                expected: n,
                found: m.n_rows(),
            });
        }
    }
    if n < 4 {
        return Err(Error::config("5x2 cross-validation needs at least 4 rows"));
    }
    let cells: Vec<(usize, usize)> = (0..ROUNDS).flat_map(|i| [(i, 0), (i, 1)]).collect();
    let splits: Vec<[Vec<usize>; 2]> = (0..ROUNDS).map(|i| halves(n, seed, i)).collect();
    let results = cells
        .par_iter()
        .map(|&(i, j)| {
            let (train, test) = (&splits[i][j], &splits[i][1 - j]);
            let a = fold_score(trainer_a, matrix_a, labels, train, test, metric)?;
            let b = fold_score(trainer_b, matrix_b, labels, train, test, metric)?;
            Ok((a, b))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut scores_a = [[0.0; 2]; ROUNDS];
    let mut scores_b = [[0.0; 2]; ROUNDS];
    for (&(i, j), (a, b)) in cells.iter().zip(results) {
        scores_a[i][j] = a;
        scores_b[i][j] = b;
    }
    Ok(FiveByTwoResult::from_scores(metric, scores_a, scores_b))
}
