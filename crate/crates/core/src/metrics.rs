//! Classification metrics and across-run summaries.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(probs: &Matrix) -> Vec<usize> {
    (0..probs.rows())
        .map(|i| {
            let row = probs.row(i);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Fraction of `subjects` whose prediction equals the label.
pub fn accuracy(predicted: &[usize], labels: &[usize], subjects: &[usize]) -> Result<f64> {
    if subjects.is_empty() {
        return Err(Error::EmptyInput {
            op: "accuracy",
            message: "no subjects to score".into(),
        });
    }
    let hits = subjects
        .iter()
        .filter(|&&i| predicted[i] == labels[i])
        .count();
    Ok(hits as f64 / subjects.len() as f64)
}

/// Area under the ROC curve of `scores` for the positive class, by the
/// Mann-Whitney rank statistic with midranks for ties. `None` when either
/// class is absent.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| positive[k]).count() as f64 * midrank;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// AUC over `subjects`: class 1 score for two classes, otherwise the
/// one-vs-rest macro average over classes present in the subset.
pub fn auc(probs: &Matrix, labels: &[usize], subjects: &[usize]) -> Option<f64> {
    let classes = probs.cols();
    let per_class = |c: usize| {
        let scores: Vec<f64> = subjects.iter().map(|&i| probs.get(i, c)).collect();
        let positive: Vec<bool> = subjects.iter().map(|&i| labels[i] == c).collect();
        binary_auc(&scores, &positive)
    };
    if classes == 2 {
        return per_class(1);
    }
    let aucs: Vec<f64> = (0..classes).filter_map(per_class).collect();
    if aucs.is_empty() {
        None
    } else {
        Some(aucs.iter().sum::<f64>() / aucs.len() as f64)
    }
}

/// F1 score with class 1 as positive. `None` for an undefined score.
pub fn binary_f1(predicted: &[usize], labels: &[usize], subjects: &[usize]) -> Option<f64> {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for &i in subjects {
        match (predicted[i] == 1, labels[i] == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    if 2 * tp + fp + fneg == 0 {
        return None;
    }
    Some(2.0 * tp as f64 / (2 * tp + fp + fneg) as f64)
}

/// Mean with a two-sided Student-t confidence half-width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub half_width: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64], confidence: f64) -> Option<Summary> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Some(Summary {
            mean,
            half_width: 0.0,
            n,
        });
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .ok()?
        .inverse_cdf(0.5 + confidence / 2.0);
    Some(Summary {
        mean,
        half_width: t * (var / n as f64).sqrt(),
        n,
    })
}
