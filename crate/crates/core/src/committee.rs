//! Soft committees: decisions from summed raw output fields of several
//! independently trained models, and pairwise agreement analysis.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::argmax_rows;

/// Raw output fields of one model over a shared evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub id: String,
    /// `N×L`, row-major.
    pub fields: Vec<f64>,
    pub num_labels: usize,
}

impl PredictionSet {
    pub fn new(id: impl Into<String>, fields: Vec<f64>, num_labels: usize) -> Result<Self> {
        if num_labels == 0 || !fields.len().is_multiple_of(num_labels) {
            return Err(Error::Input(format!(
                "{} fields do not split into rows of {num_labels}",
                fields.len()
            )));
        }
        Ok(PredictionSet {
            id: id.into(),
            fields,
            num_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.fields.len() / self.num_labels
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    /// Top-1 labels, lowest index on ties.
    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(&self.fields, self.num_labels)
    }

    pub fn accuracy(&self, truth: &[usize]) -> Result<f64> {
        check_truth(self.len(), truth)?;
        Ok(accuracy_of(&self.predictions(), truth))
    }

    /// CSV dump with header `index,f0,...,f{L-1}`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index");
        for j in 0..self.num_labels {
            let _ = write!(s, ",f{j}");
        }
        s.push('\n');
        for (i, row) in self.fields.chunks_exact(self.num_labels).enumerate() {
            let _ = write!(s, "{i}");
            for v in row {
                let _ = write!(s, ",{v:e}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(id: impl Into<String>, text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Input("empty prediction dump".into()))?;
        let labels = header.split(',').count().saturating_sub(1);
        if labels == 0 || !header.starts_with("index") {
            return Err(Error::Input("prediction dump header must be `index,f0,...`".into()));
        }
        let mut fields = Vec::new();
        for (row, line) in lines.enumerate() {
            let mut cells = line.split(',');
            let idx: usize = cells
                .next()
                .and_then(|c| c.trim().parse().ok())
                .ok_or_else(|| Error::Input(format!("row {row}: bad index")))?;
            if idx != row {
                return Err(Error::Input(format!("row {row}: index {idx} out of order")));
            }
            let before = fields.len();
            for c in cells {
                fields.push(
                    c.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Input(format!("row {row}: {e}")))?,
                );
            }
            if fields.len() - before != labels {
                return Err(Error::Input(format!("row {row}: expected {labels} fields")));
            }
        }
        PredictionSet::new(id, fields, labels)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Reads a dump; the file stem becomes the member id.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        PredictionSet::from_csv(id, &std::fs::read_to_string(path)?)
    }
}

/// Truth labels as one label per line (an optional `label` header is skipped).
pub fn read_truth(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && *l != "label")
        .map(|l| {
            l.parse()
                .map_err(|e| Error::Input(format!("bad truth label `{l}`: {e}")))
        })
        .collect()
}

pub fn write_truth(path: impl AsRef<Path>, truth: &[usize]) -> Result<()> {
    let mut s = String::from("label\n");
    truth.iter().for_each(|t| {
        let _ = writeln!(s, "{t}");
    });
    std::fs::write(path, s)?;
    Ok(())
}

fn check_truth(n: usize, truth: &[usize]) -> Result<()> {
    if truth.len() != n {
        return Err(Error::Input(format!("{} truth labels for {n} inputs", truth.len())));
    }
    Ok(())
}

fn check_aligned(members: &[PredictionSet]) -> Result<()> {
    let first = members
        .first()
        .ok_or_else(|| Error::Input("a committee needs at least one member".into()))?;
    for m in members {
        if m.num_labels != first.num_labels || m.len() != first.len() {
            return Err(Error::Input(format!(
                "member `{}` has {}×{} fields, `{}` has {}×{}",
                m.id,
                m.len(),
                m.num_labels,
                first.id,
                first.len(),
                first.num_labels
            )));
        }
    }
    Ok(())
}

fn accuracy_of(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

/// Per input, the argmax of the element-wise sum of raw fields (lowest
/// index on ties). No softmax or rescaling is applied.
pub fn committee_decide(members: &[PredictionSet]) -> Result<Vec<usize>> {
    check_aligned(members)?;
    let l = members[0].num_labels;
    Ok((0..members[0].len())
        .into_par_iter()
        .map(|i| {
            let mut sum = vec![0.0; l];
            for m in members {
                sum.iter_mut()
                    .zip(&m.fields[i * l..(i + 1) * l])
                    .for_each(|(s, v)| *s += v);
            }
            argmax_rows(&sum, l)[0]
        })
        .collect())
}

/// Fraction of inputs where both members are correct or both are wrong.
pub fn agreement(a: &PredictionSet, b: &PredictionSet, truth: &[usize]) -> Result<f64> {
    check_aligned(&[a.clone(), b.clone()])?;
    check_truth(a.len(), truth)?;
    Ok(agreement_of(&a.predictions(), &b.predictions(), truth))
}

fn agreement_of(pa: &[usize], pb: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    let same = pa
        .iter()
        .zip(pb)
        .zip(truth)
        .filter(|((a, b), t)| (*a == *t) == (*b == *t))
        .count();
    same as f64 / truth.len() as f64
}

/// Agreement expected from two independent predictors of accuracy `p`.
pub fn uncorrelated_baseline(p: f64) -> f64 {
    p * p + (1.0 - p) * (1.0 - p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommitteeReport {
    pub members: Vec<String>,
    pub individual_accuracy: Vec<f64>,
    pub mean_individual_accuracy: f64,
    pub committee_accuracy: f64,
    /// Pairwise agreement, `members × members`.
    pub agreement: Vec<Vec<f64>>,
    /// Mean over distinct pairs; 1 for a single member.
    pub mean_agreement: f64,
    pub uncorrelated_baseline: f64,
}

impl CommitteeReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn committee_report(members: &[PredictionSet], truth: &[usize]) -> Result<CommitteeReport> {
    check_aligned(members)?;
    check_truth(members[0].len(), truth)?;
    let preds: Vec<Vec<usize>> = members.iter().map(PredictionSet::predictions).collect();
    let individual: Vec<f64> = preds.iter().map(|p| accuracy_of(p, truth)).collect();
    let n = members.len();
    let mut matrix = vec![vec![1.0; n]; n];
    let mut pair_sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let a = agreement_of(&preds[i], &preds[j], truth);
            matrix[i][j] = a;
            matrix[j][i] = a;
            pair_sum += a;
        }
    }
    let pairs = n * (n - 1) / 2;
    let mean_individual = individual.iter().sum::<f64>() / n as f64;
    let decided = committee_decide(members)?;
    Ok(CommitteeReport {
        members: members.iter().map(|m| m.id.clone()).collect(),
        mean_individual_accuracy: mean_individual,
        committee_accuracy: accuracy_of(&decided, truth),
        individual_accuracy: individual,
        agreement: matrix,
        mean_agreement: if pairs == 0 { 1.0 } else { pair_sum / pairs as f64 },
        uncorrelated_baseline: uncorrelated_baseline(mean_individual),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(id: &str, rows: &[[f64; 3]]) -> PredictionSet {
        PredictionSet::new(id, rows.iter().flatten().copied().collect(), 3).unwrap()
    }

    #[test]
    fn single_member_is_identity() {
        let a = set("a", &[[0.1, 0.5, 0.2], [2.0, -1.0, 0.0], [0.0, 0.0, 3.0]]);
        assert_eq!(committee_decide(std::slice::from_ref(&a)).unwrap(), a.predictions());
    }

    #[test]
    fn permutation_and_zero_member() {
        let a = set("a", &[[0.1, 0.5, 0.2], [2.0, -1.0, 0.0]]);
        let b = set("b", &[[0.9, 0.0, 0.2], [0.0, 1.0, 0.5]]);
        let z = set("z", &[[0.0; 3], [0.0; 3]]);
        let ab = committee_decide(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(ab, committee_decide(&[b.clone(), a.clone()]).unwrap());
        assert_eq!(ab, committee_decide(&[a, z, b]).unwrap());
    }

    #[test]
    fn cancellation_falls_to_lowest_index() {
        let f = [[0.3, 2.0, -1.0]];
        let c = 0.25;
        let a = set("a", &f);
        let b = set("b", &[[c - 0.3, c - 2.0, c + 1.0]]);
        assert_eq!(committee_decide(&[a, b]).unwrap(), vec![0]);
    }

    #[test]
    fn scaling_a_member_can_change_decisions() {
        let a = set("a", &[[1.0, 0.0, 0.0]]);
        let b = set("b", &[[0.0, 0.8, 0.0]]);
        assert_eq!(committee_decide(&[a.clone(), b.clone()]).unwrap(), vec![0]);
        let b2 = set("b", &[[0.0, 1.6, 0.0]]);
        assert_eq!(committee_decide(&[a, b2]).unwrap(), vec![1]);
    }

    #[test]
    fn misaligned_members_error() {
        let a = set("a", &[[0.0; 3], [0.0; 3]]);
        let b = set("b", &[[0.0; 3]]);
        assert!(committee_decide(&[a, b]).is_err());
        assert!(committee_decide(&[]).is_err());
    }

    #[test]
    fn agreement_extremes_and_symmetry() {
        let truth = [0, 1, 2];
        let right = set("r", &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let wrong = set("w", &[[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]);
        assert_eq!(agreement(&right, &right, &truth).unwrap(), 1.0);
        assert_eq!(agreement(&right, &wrong, &truth).unwrap(), 0.0);
        let mixed = set("m", &[[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(
            agreement(&right, &mixed, &truth).unwrap(),
            agreement(&mixed, &right, &truth).unwrap()
        );
    }

    #[test]
    fn baseline_values() {
        assert!((uncorrelated_baseline(0.81) - 0.6922).abs() < 1e-12);
        assert_eq!(uncorrelated_baseline(1.0), 1.0);
        assert_eq!(uncorrelated_baseline(0.5), 0.5);
    }

    #[test]
    fn identical_members_report() {
        let a = set("a", &[[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let truth = [0, 1];
        let r = committee_report(&[a.clone(), a.clone(), a], &truth).unwrap();
        assert_eq!(r.committee_accuracy, 0.5);
        assert_eq!(r.mean_individual_accuracy, 0.5);
        assert_eq!(r.mean_agreement, 1.0);
        assert_eq!(r.agreement.len(), 3);
    }

    #[test]
    fn csv_round_trip() {
        let a = set("a", &[[0.1, -0.5, 1e-17], [2.0, 3.25, -0.0]]);
        let back = PredictionSet::from_csv("a", &a.to_csv()).unwrap();
        assert_eq!(a, back);
        assert!(PredictionSet::from_csv("x", "index,f0\n0,1,2\n").is_err());
    }
}
