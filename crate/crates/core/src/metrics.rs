//! Distribution-level evaluation measures and average-rank aggregation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::EmotionDistribution;

/// Whether a larger score is better.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Lower,
    Higher,
}

/// Names of the six measures in reporting order.
pub const METRIC_NAMES: [&str; 6] = ["chebyshev", "clark", "canberra", "kl", "cosine", "intersection"];

/// Short CSV column names in reporting order.
pub const METRIC_COLUMNS: [&str; 6] = ["cheb", "clark", "canb", "kl", "cos", "inter"];

pub const METRIC_DIRECTIONS: [Direction; 6] = [
    Direction::Lower,
    Direction::Lower,
    Direction::Lower,
    Direction::Lower,
    Direction::Higher,
    Direction::Higher,
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricVector {
    pub chebyshev: f64,
    pub clark: f64,
    pub canberra: f64,
    pub kl: f64,
    pub cosine: f64,
    pub intersection: f64,
}

impl MetricVector {
    pub fn to_array(&self) -> [f64; 6] {
        [self.chebyshev, self.clark, self.canberra, self.kl, self.cosine, self.intersection]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        MetricVector {
            chebyshev: a[0],
            clark: a[1],
            canberra: a[2],
            kl: a[3],
            cosine: a[4],
            intersection: a[5],
        }
    }
}

/// All six measures for one prediction.
///
/// ```
/// use helo::labels::EmotionDistribution;
/// use helo::metrics::metric_vector;
/// let truth = EmotionDistribution::new(vec![1.0, 0.0]).unwrap();
/// let pred = EmotionDistribution::new(vec![0.5, 0.5]).unwrap();
/// let m = metric_vector(&pred, &truth).unwrap();
/// assert_eq!(m.chebyshev, 0.5);
/// assert!((m.canberra - 4.0 / 3.0).abs() < 1e-12);
/// ```
pub fn metric_vector(pred: &EmotionDistribution, truth: &EmotionDistribution) -> Result<MetricVector> {
    if pred.len() != truth.len() {
        return Err(Error::dim("metric_vector", (pred.len(), 1), (truth.len(), 1)));
    }
    let (p, t) = (pred.probs(), truth.probs());
    let mut m = MetricVector::default();
    let mut clark_sq = 0.0;
    let (mut dot, mut np, mut nt) = (0.0, 0.0, 0.0);
    for (&d, &e) in t.iter().zip(p) {
        let diff = (d - e).abs();
        m.chebyshev = m.chebyshev.max(diff);
        let s = d + e;
        if s > 0.0 {
            clark_sq += diff * diff / (s * s);
            m.canberra += diff / s;
        }
        dot += d * e;
        nt += d * d;
        np += e * e;
        m.intersection += d.min(e);
    }
    m.clark = clark_sq.sqrt();
    m.kl = crate::labels::kld_loss(pred, truth)?;
    m.cosine = if np > 0.0 && nt > 0.0 { dot / (np.sqrt() * nt.sqrt()) } else { 0.0 };
    Ok(m)
}

/// Mean of per-sample metric vectors.
pub fn evaluate_set(preds: &[EmotionDistribution], truths: &[EmotionDistribution]) -> Result<MetricVector> {
    if preds.is_empty() {
        return Err(Error::EmptySet);
    }
    if preds.len() != truths.len() {
        return Err(Error::dim("evaluate_set", (preds.len(), 1), (truths.len(), 1)));
    }
    let mut sum = [0.0; 6];
    for (p, t) in preds.iter().zip(truths) {
        for (s, v) in sum.iter_mut().zip(metric_vector(p, t)?.to_array()) {
            *s += v;
        }
    }
    let n = preds.len() as f64;
    Ok(MetricVector::from_array(sum.map(|s| s / n)))
}

/// Scores and ranks of several methods on several metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub methods: Vec<String>,
    pub metrics: Vec<String>,
    pub directions: Vec<Direction>,
    /// `scores[method][metric]`.
    pub scores: Vec<Vec<f64>>,
    /// `ranks[method][metric]`, 1 is best, ties share the mean rank.
    pub ranks: Vec<Vec<f64>>,
    pub average_rank: Vec<f64>,
}

/// Ranks every method per metric and averages the ranks.
///
/// `scores[i][j]` is method `i` on metric `j`; `None` marks a missing cell.
pub fn average_rank(
    methods: &[String],
    metrics: &[String],
    directions: &[Direction],
    scores: &[Vec<Option<f64>>],
) -> Result<RankTable> {
    if metrics.len() != directions.len() {
        return Err(Error::dim("average_rank directions", (metrics.len(), 1), (directions.len(), 1)));
    }
    if methods.len() != scores.len() {
        return Err(Error::dim("average_rank scores", (methods.len(), metrics.len()), (scores.len(), 0)));
    }
    if methods.is_empty() || metrics.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut full = vec![vec![0.0; metrics.len()]; methods.len()];
    for (i, row) in scores.iter().enumerate() {
        for (j, metric) in metrics.iter().enumerate() {
            match row.get(j).copied().flatten() {
                Some(v) if v.is_finite() => full[i][j] = v,
                _ => {
                    return Err(Error::IncompleteTable {
                        method: methods[i].clone(),
                        metric: metric.clone(),
                    })
                }
            }
        }
    }
    let mut ranks = vec![vec![0.0; metrics.len()]; methods.len()];
    for (j, dir) in directions.iter().enumerate() {
        for i in 0..methods.len() {
            let v = full[i][j];
            let (mut better, mut equal) = (0usize, 0usize);
            for row in &full {
                let w = row[j];
                if w == v {
                    equal += 1;
                } else if (*dir == Direction::Lower && w < v) || (*dir == Direction::Higher && w > v) {
                    better += 1;
                }
            }
            ranks[i][j] = better as f64 + (equal as f64 + 1.0) / 2.0;
        }
    }
    let average_rank = ranks.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
    Ok(RankTable {
        methods: methods.to_vec(),
        metrics: metrics.to_vec(),
        directions: directions.to_vec(),
        scores: full,
        ranks,
        average_rank,
    })
}

/// Truncates to two decimals and drops trailing zeros: `7/6 → "1.16"`, `8.5 → "8.5"`.
pub fn format_rank(r: f64) -> String {
    let t = (r * 100.0 + 1e-9).floor() / 100.0;
    let s = format!("{t:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

impl RankTable {
    /// Overall standing of each method by average rank (ties share the mean position).
    pub fn overall_positions(&self) -> Vec<f64> {
        let a = &self.average_rank;
        a.iter()
            .map(|v| {
                let better = a.iter().filter(|w| *w < v).count();
                let equal = a.iter().filter(|w| *w == v).count();
                better as f64 + (equal as f64 + 1.0) / 2.0
            })
            .collect()
    }

    /// One row per method: `method,<metric>,<metric>_rank,...,average_rank`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method");
        for m in &self.metrics {
            let _ = write!(out, ",{m},{m}_rank");
        }
        out.push_str(",average_rank\n");
        for (i, method) in self.methods.iter().enumerate() {
            out.push_str(method);
            for j in 0..self.metrics.len() {
                let _ = write!(out, ",{:.4},{}", self.scores[i][j], format_rank(self.ranks[i][j]));
            }
            let _ = writeln!(out, ",{}", format_rank(self.average_rank[i]));
        }
        out
    }

    /// Metric rows and method columns, each cell `score (rank)`.
    pub fn to_text(&self) -> String {
        let mut cells: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["Measure".to_string()];
        header.extend(self.methods.iter().cloned());
        cells.push(header);
        for (j, metric) in self.metrics.iter().enumerate() {
            let arrow = match self.directions[j] {
                Direction::Lower => "↓",
                Direction::Higher => "↑",
            };
            let mut row = vec![format!("{} ({arrow})", display_name(metric))];
            for i in 0..self.methods.len() {
                row.push(format!("{:.4} ({})", self.scores[i][j], format_rank(self.ranks[i][j])));
            }
            cells.push(row);
        }
        let positions = self.overall_positions();
        let mut row = vec!["Average Rank".to_string()];
        for i in 0..self.methods.len() {
            row.push(format!("{} ({})", format_rank(self.average_rank[i]), format_rank(positions[i])));
        }
        cells.push(row);

        let widths: Vec<usize> = (0..cells[0].len())
            .map(|c| cells.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &cells {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, w)| format!("{cell}{}", " ".repeat(w - cell.chars().count())))
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

fn display_name(metric: &str) -> String {
    match metric {
        "kl" => "KL".to_string(),
        m => {
            let mut c = m.chars();
            c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
        }
    }
}

/// Renders a metric vector as aligned `name value` lines.
pub fn format_metric_table(m: &MetricVector) -> String {
    let mut out = String::new();
    for (name, v) in METRIC_NAMES.iter().zip(m.to_array()) {
        let _ = writeln!(out, "{name:<13}{v:.6}");
    }
    out
}
