//! Evaluation reports: top-1 accuracy, a per-class accuracy table, and
//! best/worst-k class summaries.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStat {
    pub label: usize,
    pub name: String,
    pub support: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KStat {
    pub k: usize,
    /// Mean accuracy over the k best-performing classes.
    pub best_avg: f64,
    /// Mean accuracy over the k worst-performing classes.
    pub worst_avg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub top1: f64,
    pub per_class: Vec<ClassStat>,
    pub k_stats: Vec<KStat>,
}

impl MetricsReport {
    /// Builds the report from aligned truth/prediction lists. Classes with no
    /// support are kept in the table with accuracy 0 but excluded from the
    /// best/worst rankings.
    pub fn from_predictions(
        truth: &[usize],
        predicted: &[usize],
        class_names: &[String],
    ) -> Self {
        assert_eq!(truth.len(), predicted.len());
        let classes = class_names.len();
        let mut support = vec![0usize; classes];
        let mut correct = vec![0usize; classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            support[t] += 1;
            if t == p {
                correct[t] += 1;
            }
        }
        let per_class: Vec<ClassStat> = (0..classes)
            .map(|c| ClassStat {
                label: c,
                name: class_names[c].clone(),
                support: support[c],
                correct: correct[c],
                accuracy: if support[c] == 0 {
                    0.0
                } else {
                    correct[c] as f64 / support[c] as f64
                },
            })
            .collect();
        let top1 = if truth.is_empty() {
            0.0
        } else {
            truth
                .iter()
                .zip(predicted)
                .filter(|(t, p)| t == p)
                .count() as f64
                / truth.len() as f64
        };

        let mut ranked: Vec<f64> = per_class
            .iter()
            .filter(|c| c.support > 0)
            .map(|c| c.accuracy)
            .collect();
        ranked.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let k_stats = [1usize, 3, 5, 10]
            .iter()
            .filter(|&&k| k <= ranked.len())
            .map(|&k| KStat {
                k,
                best_avg: ranked[..k].iter().sum::<f64>() / k as f64,
                worst_avg: ranked[ranked.len() - k..].iter().sum::<f64>() / k as f64,
            })
            .collect();
        Self {
            top1,
            per_class,
            k_stats,
        }
    }

    /// Human-readable table.
    pub fn render(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        writeln!(out, "top-1 accuracy: {:.4}", self.top1).unwrap();
        writeln!(out, "{:<6} {:<16} {:>8} {:>8} {:>9}", "class", "name", "support", "correct", "accuracy").unwrap();
        for c in &self.per_class {
            writeln!(
                out,
                "{:<6} {:<16} {:>8} {:>8} {:>9.4}",
                c.label, c.name, c.support, c.correct, c.accuracy
            )
            .unwrap();
        }
        for k in &self.k_stats {
            writeln!(
                out,
                "best-{} avg: {:.4}   worst-{} avg: {:.4}",
                k.k, k.best_avg, k.k, k.worst_avg
            )
            .unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let truth = vec![0, 1, 2, 3, 0, 1, 2, 3];
        let report = MetricsReport::from_predictions(&truth, &truth, &names(4));
        assert_eq!(report.top1, 1.0);
        assert!(report.per_class.iter().all(|c| c.accuracy == 1.0));

        let constant = vec![0; 8];
        let report = MetricsReport::from_predictions(&truth, &constant, &names(4));
        assert_eq!(report.top1, 0.25);
        assert_eq!(report.per_class[0].accuracy, 1.0);
        assert_eq!(report.per_class[1].accuracy, 0.0);
    }

    #[test]
    fn overall_is_support_weighted_mean() {
        let truth = vec![0, 0, 0, 1];
        let pred = vec![0, 0, 1, 1];
        let report = MetricsReport::from_predictions(&truth, &pred, &names(2));
        let weighted: f64 = report
            .per_class
            .iter()
            .map(|c| c.accuracy * c.support as f64)
            .sum::<f64>()
            / truth.len() as f64;
        assert!((report.top1 - weighted).abs() < 1e-12);
    }

    #[test]
    fn k_stats_match_brute_force_on_many_classes() {
        // 60 classes with distinct accuracies i/60.
        let mut truth = Vec::new();
        let mut pred = Vec::new();
        for c in 0..60usize {
            for i in 0..60usize {
                truth.push(c);
                pred.push(if i < c { c } else { (c + 1) % 60 });
            }
        }
        let report = MetricsReport::from_predictions(&truth, &pred, &names(60));
        let mut acc: Vec<f64> = report.per_class.iter().map(|c| c.accuracy).collect();
        acc.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert_eq!(report.k_stats.len(), 4);
        for ks in &report.k_stats {
            let best: f64 = acc[..ks.k].iter().sum::<f64>() / ks.k as f64;
            let worst: f64 = acc[acc.len() - ks.k..].iter().sum::<f64>() / ks.k as f64;
            assert_eq!(ks.best_avg, best);
            assert_eq!(ks.worst_avg, worst);
        }
        // Render shouldn't panic and includes the headline number.
        assert!(report.render().contains("top-1 accuracy"));
    }

    #[test]
    fn small_class_counts_skip_large_k() {
        let report = MetricsReport::from_predictions(&[0, 1], &[0, 0], &names(2));
        let ks: Vec<usize> = report.k_stats.iter().map(|k| k.k).collect();
        assert_eq!(ks, vec![1]);
    }
}
