//! Per-class precision / recall / F1 over logged query predictions.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Query outcomes of one evaluated episode, in original class ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub episode: usize,
    pub split: String,
    pub truth: Vec<usize>,
    pub predicted: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of queries whose true class this is.
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub classes: Vec<ClassRow>,
    /// Correct queries over all queries.
    pub micro_accuracy: f64,
    /// Mean of the per-episode accuracies.
    pub meta_accuracy: f64,
    pub macro_f1: f64,
    pub queries: usize,
    pub episodes: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Every query prediction counts as one sample. Classes never seen as a
/// truth or a prediction are absent from the report.
pub fn classification_report(log: &[PredictionRecord]) -> Result<ClassificationReport> {
    if log.is_empty() {
        return Err(Error::InvalidArgument("prediction log is empty".into()));
    }
    // class -> (true positives, predicted count, true count)
    let mut counts: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
    let (mut correct, mut queries, mut acc_sum) = (0usize, 0usize, 0.0);
    for rec in log {
        if rec.truth.len() != rec.predicted.len() || rec.truth.is_empty() {
            return Err(Error::InvalidArgument(format!("episode {} has mismatched predictions", rec.episode)));
        }
        let mut ep_correct = 0;
        for (&y, &p) in rec.truth.iter().zip(&rec.predicted) {
            counts.entry(y).or_default().2 += 1;
            counts.entry(p).or_default().1 += 1;
            if y == p {
                counts.entry(y).or_default().0 += 1;
                ep_correct += 1;
            }
        }
        correct += ep_correct;
        queries += rec.truth.len();
        acc_sum += ratio(ep_correct, rec.truth.len());
    }
    let classes: Vec<ClassRow> = counts
        .into_iter()
        .map(|(class, (tp, pred, truth))| {
            let precision = ratio(tp, pred);
            let recall = ratio(tp, truth);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassRow {
                class,
                precision,
                recall,
                f1,
                support: truth,
            }
        })
        .collect();
    let macro_f1 = classes.iter().map(|c| c.f1).sum::<f64>() / classes.len() as f64;
    Ok(ClassificationReport {
        micro_accuracy: ratio(correct, queries),
        meta_accuracy: acc_sum / log.len() as f64,
        macro_f1,
        queries,
        episodes: log.len(),
        classes,
    })
}

impl fmt::Display for ClassificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>8} {:>10} {:>10} {:>10} {:>8}", "class", "precision", "recall", "f1", "support")?;
        for c in &self.classes {
            writeln!(f, "{:>8} {:>10.4} {:>10.4} {:>10.4} {:>8}", c.class, c.precision, c.recall, c.f1, c.support)?;
        }
        writeln!(f)?;
        writeln!(f, "accuracy (micro)       {:.4}  ({} queries)", self.micro_accuracy, self.queries)?;
        writeln!(f, "meta-learning accuracy {:.4}  ({} episodes)", self.meta_accuracy, self.episodes)?;
        write!(f, "macro f1               {:.4}", self.macro_f1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(episode: usize, truth: &[usize], predicted: &[usize]) -> PredictionRecord {
        PredictionRecord {
            episode,
            split: "test".into(),
            truth: truth.to_vec(),
            predicted: predicted.to_vec(),
        }
    }

    #[test]
    fn all_correct_is_perfect() {
        let r = classification_report(&[rec(0, &[3, 3, 9], &[3, 3, 9]), rec(1, &[4, 9], &[4, 9])]).unwrap();
        assert!(r.classes.iter().all(|c| c.precision == 1.0 && c.recall == 1.0 && c.f1 == 1.0));
        assert_eq!(r.micro_accuracy, 1.0);
        assert_eq!(r.classes.iter().map(|c| c.support).collect::<Vec<_>>(), vec![2, 1, 2]);
    }

    #[test]
    fn hand_counted_example() {
        // class 1: tp 1, predicted 1, true 2; class 2: tp 1, predicted 2, true 2; class 5: tp 0, predicted 1
        let r = classification_report(&[rec(0, &[1, 1, 2, 2], &[1, 2, 2, 5])]).unwrap();
        let c1 = &r.classes[0];
        assert_eq!((c1.class, c1.precision, c1.recall), (1, 1.0, 0.5));
        let c2 = &r.classes[1];
        assert_eq!((c2.precision, c2.recall), (0.5, 0.5));
        assert!((r.classes[1].f1 - 0.5).abs() < 1e-15);
        assert_eq!(r.classes[2].support, 0);
        assert_eq!(r.micro_accuracy, 0.5);
    }

    #[test]
    fn meta_accuracy_averages_episodes() {
        let r = classification_report(&[rec(0, &[0, 1], &[0, 1]), rec(1, &[0, 1, 2, 3], &[1, 1, 1, 1])]).unwrap();
        assert_eq!(r.meta_accuracy, (1.0 + 0.25) / 2.0);
        assert_eq!(r.micro_accuracy, 3.0 / 6.0);
    }

    #[test]
    fn single_class_log() {
        let r = classification_report(&[rec(0, &[7, 7], &[7, 7])]).unwrap();
        assert_eq!(r.classes.len(), 1);
        assert_eq!(r.classes[0].class, 7);
    }

    #[test]
    fn empty_log_rejected() {
        assert!(classification_report(&[]).is_err());
    }
}
