//! Shot-split accuracies, balancedness, misclassification counts and zero-shot to
//! fine-tuned transition analysis.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{assign_shot_split, ClassCounts, Shot, ShotSplit};
use crate::error::{Error, Result};
use crate::neighbors::NeighborGraph;

/// Default kernel width of the balancedness score.
pub const BALANCEDNESS_SIGMA: f64 = 0.1;

/// One value per shot split; `None` when the split has no classes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitValues {
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
}

impl SplitValues {
    pub fn get(&self, shot: Shot) -> Option<f64> {
        match shot {
            Shot::Many => self.many,
            Shot::Medium => self.medium,
            Shot::Few => self.few,
        }
    }

    fn set(&mut self, shot: Shot, v: Option<f64>) {
        match shot {
            Shot::Many => self.many = v,
            Shot::Medium => self.medium = v,
            Shot::Few => self.few = v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_acc: f64,
    pub acc_many: Option<f64>,
    pub acc_medium: Option<f64>,
    pub acc_few: Option<f64>,
    /// `None` for classes without test samples.
    pub per_class_acc: Vec<Option<f64>>,
    pub balancedness: f64,
    pub mean_misclassified: SplitValues,
}

impl EvalReport {
    pub fn split_acc(&self, shot: Shot) -> Option<f64> {
        match shot {
            Shot::Many => self.acc_many,
            Shot::Medium => self.acc_medium,
            Shot::Few => self.acc_few,
        }
    }
}

fn check_aligned(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch(format!("{a} predictions but {b} labels")));
    }
    Ok(())
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// `(correct, total)` per class.
fn per_class_tallies(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Vec<(usize, usize)>> {
    let mut tallies = vec![(0, 0); classes];
    for (position, (&p, &y)) in predictions.iter().zip(labels).enumerate() {
        let t = tallies.get_mut(y).ok_or(Error::LabelOutOfRange {
            label: y,
            position,
            classes,
        })?;
        t.1 += 1;
        if p == y {
            t.0 += 1;
        }
    }
    Ok(tallies)
}

pub fn evaluate(predictions: &[usize], labels: &[usize], train_counts: &ClassCounts) -> Result<EvalReport> {
    evaluate_with_sigma(predictions, labels, train_counts, BALANCEDNESS_SIGMA)
}

pub fn evaluate_with_sigma(
    predictions: &[usize],
    labels: &[usize],
    train_counts: &ClassCounts,
    sigma: f64,
) -> Result<EvalReport> {
    check_aligned(predictions.len(), labels.len())?;
    let classes = train_counts.len();
    let tallies = per_class_tallies(predictions, labels, classes)?;
    let split = assign_shot_split(train_counts);

    let per_class_acc: Vec<Option<f64>> = tallies
        .iter()
        .map(|&(ok, n)| (n > 0).then(|| ok as f64 / n as f64))
        .collect();
    let split_acc = |shot| mean(split.classes_in(shot).filter_map(|c| per_class_acc[c]));
    let correct: usize = tallies.iter().map(|t| t.0).sum();
    let present: Vec<f64> = per_class_acc.iter().flatten().copied().collect();

    Ok(EvalReport {
        overall_acc: if labels.is_empty() {
            0.0
        } else {
            correct as f64 / labels.len() as f64
        },
        acc_many: split_acc(Shot::Many),
        acc_medium: split_acc(Shot::Medium),
        acc_few: split_acc(Shot::Few),
        balancedness: balancedness(&present, sigma)?,
        mean_misclassified: mean_misclassified(predictions, labels, &split)?,
        per_class_acc,
    })
}

/// Mean pairwise Gaussian similarity `(1/C²) Σ_ij exp(-(a_i - a_j)² / (2σ²))`.
pub fn balancedness(per_class_acc: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Validation(format!("sigma must be positive, got {sigma}")));
    }
    if per_class_acc.is_empty() {
        return Ok(1.0);
    }
    let denom = 2.0 * sigma * sigma;
    let sum: f64 = per_class_acc
        .iter()
        .flat_map(|&a| per_class_acc.iter().map(move |&b| (-(a - b).powi(2) / denom).exp()))
        .sum();
    Ok(sum / (per_class_acc.len() as f64).powi(2))
}

/// Mean over each split's classes of the number of wrongly predicted test samples.
pub fn mean_misclassified(predictions: &[usize], labels: &[usize], split: &ShotSplit) -> Result<SplitValues> {
    check_aligned(predictions.len(), labels.len())?;
    let classes = split.0.len();
    let tallies = per_class_tallies(predictions, labels, classes)?;
    let mut out = SplitValues::default();
    for shot in Shot::ALL {
        out.set(
            shot,
            mean(split.classes_in(shot).map(|c| (tallies[c].1 - tallies[c].0) as f64)),
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionCounts {
    pub zs_correct_ft_correct: usize,
    pub zs_correct_ft_wrong: usize,
    pub zs_wrong_ft_correct: usize,
    pub zs_wrong_ft_wrong: usize,
}

impl TransitionCounts {
    pub fn total(&self) -> usize {
        self.zs_correct_ft_correct + self.zs_correct_ft_wrong + self.zs_wrong_ft_correct + self.zs_wrong_ft_wrong
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionReport {
    pub per_class: Vec<TransitionCounts>,
    /// Among zero-shot-correct samples the fine-tuned model gets wrong, the fraction
    /// predicted as a graph neighbor of the true class.
    pub neighbor_error_fraction: Option<f64>,
}

impl TransitionReport {
    pub fn totals(&self) -> TransitionCounts {
        self.per_class.iter().fold(TransitionCounts::default(), |mut acc, c| {
            acc.zs_correct_ft_correct += c.zs_correct_ft_correct;
            acc.zs_correct_ft_wrong += c.zs_correct_ft_wrong;
            acc.zs_wrong_ft_correct += c.zs_wrong_ft_correct;
            acc.zs_wrong_ft_wrong += c.zs_wrong_ft_wrong;
            acc
        })
    }
}

pub fn transition_analysis(
    zs_predictions: &[usize],
    ft_predictions: &[usize],
    labels: &[usize],
    graph: &NeighborGraph,
) -> Result<TransitionReport> {
    check_aligned(zs_predictions.len(), labels.len())?;
    check_aligned(ft_predictions.len(), labels.len())?;
    let classes = graph.num_classes();
    let mut per_class = vec![TransitionCounts::default(); classes];
    let (mut broken, mut into_neighbor) = (0usize, 0usize);
    for (position, ((&zs, &ft), &y)) in zs_predictions.iter().zip(ft_predictions).zip(labels).enumerate() {
        let cell = per_class.get_mut(y).ok_or(Error::LabelOutOfRange {
            label: y,
            position,
            classes,
        })?;
        match (zs == y, ft == y) {
            (true, true) => cell.zs_correct_ft_correct += 1,
            (true, false) => {
                cell.zs_correct_ft_wrong += 1;
                broken += 1;
                if ft < classes && graph.contains(y, ft) {
                    into_neighbor += 1;
                }
            }
            (false, true) => cell.zs_wrong_ft_correct += 1,
            (false, false) => cell.zs_wrong_ft_wrong += 1,
        }
    }
    Ok(TransitionReport {
        per_class,
        neighbor_error_fraction: (broken > 0).then(|| into_neighbor as f64 / broken as f64),
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v))
}

/// Aligned plain-text summary of an evaluation.
pub fn render_eval_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<8} {:>7} {:>7} {:>7} {:>7} {:>8}", "", "All", "Many", "Med", "Few", "beta");
    let _ = writeln!(
        out,
        "{:<8} {:>7} {:>7} {:>7} {:>7} {:>8.4}",
        "acc",
        cell(Some(report.overall_acc)),
        cell(report.acc_many),
        cell(report.acc_medium),
        cell(report.acc_few),
        report.balancedness
    );
    let mis = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
    let _ = writeln!(
        out,
        "{:<8} {:>7} {:>7} {:>7} {:>7}",
        "mis",
        "",
        mis(report.mean_misclassified.many),
        mis(report.mean_misclassified.medium),
        mis(report.mean_misclassified.few)
    );
    out
}

pub fn render_transition_table(report: &TransitionReport) -> String {
    let t = report.totals();
    let mut out = String::new();
    let _ = writeln!(out, "{:<12} {:>10} {:>10}", "zero-shot", "ft right", "ft wrong");
    let _ = writeln!(out, "{:<12} {:>10} {:>10}", "right", t.zs_correct_ft_correct, t.zs_correct_ft_wrong);
    let _ = writeln!(out, "{:<12} {:>10} {:>10}", "wrong", t.zs_wrong_ft_correct, t.zs_wrong_ft_wrong);
    let _ = writeln!(
        out,
        "errors into neighbors: {}",
        report
            .neighbor_error_fraction
            .map_or_else(|| "-".to_string(), |f| format!("{:.2}%", 100.0 * f))
    );
    out
}

/// Per-class rows: name, split, train count, accuracy and transition cells.
pub fn per_class_csv(
    class_names: &[String],
    train_counts: &ClassCounts,
    report: &EvalReport,
    transitions: Option<&TransitionReport>,
) -> String {
    let split = assign_shot_split(train_counts);
    let mut out = String::from("class,name,split,train_count,accuracy,zs_right_ft_right,zs_right_ft_wrong,zs_wrong_ft_right,zs_wrong_ft_wrong\n");
    for (c, name) in class_names.iter().enumerate() {
        let acc = report.per_class_acc[c].map_or_else(String::new, |a| format!("{a}"));
        let t = transitions.map(|t| t.per_class[c]);
        let tc = t.map_or_else(
            || ",,,".to_string(),
            |t| {
                format!(
                    "{},{},{},{}",
                    t.zs_correct_ft_correct, t.zs_correct_ft_wrong, t.zs_wrong_ft_correct, t.zs_wrong_ft_wrong
                )
            },
        );
        let quoted = if name.contains([',', '"', '\n']) {
            format!("\"{}\"", name.replace('"', "\"\""))
        } else {
            name.clone()
        };
        let _ = writeln!(
            out,
            "{c},{quoted},{},{},{acc},{tc}",
            split.0[c].as_str(),
            train_counts.0[c]
        );
    }
    out
}

pub fn save_report<T: Serialize>(path: &Path, report: &T) -> Result<()> {
    crate::io::write_json(path, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions() {
        let labels = vec![0, 1, 2, 2, 1];
        let r = evaluate(&labels, &labels, &ClassCounts(vec![150, 50, 10])).unwrap();
        assert_eq!(r.overall_acc, 1.0);
        assert_eq!(r.acc_many, Some(1.0));
        assert_eq!(r.acc_medium, Some(1.0));
        assert_eq!(r.acc_few, Some(1.0));
        assert_eq!(r.balancedness, 1.0);
        assert_eq!(r.mean_misclassified.few, Some(0.0));
    }

    #[test]
    fn half_right() {
        let r = evaluate(&[0, 0, 0, 0], &[0, 0, 1, 1], &ClassCounts(vec![5, 5])).unwrap();
        assert_eq!(r.overall_acc, 0.5);
        assert_eq!(r.per_class_acc, vec![Some(1.0), Some(0.0)]);
    }

    #[test]
    fn split_means() {
        // class 0: 4/5 right, class 1: 2/5 right
        let labels = vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        let preds = vec![0, 0, 0, 0, 1, 1, 1, 0, 0, 0];
        let r = evaluate(&preds, &labels, &ClassCounts(vec![150, 10])).unwrap();
        assert_abs_diff_eq!(r.acc_many.unwrap(), 0.8);
        assert_abs_diff_eq!(r.acc_few.unwrap(), 0.4);
        assert_eq!(r.acc_medium, None);
        assert!(evaluate(&preds[..3], &labels, &ClassCounts(vec![150, 10])).is_err());
    }

    #[test]
    fn balancedness_examples() {
        assert_eq!(balancedness(&[0.3, 0.3, 0.3], 0.1).unwrap(), 1.0);
        assert_abs_diff_eq!(
            balancedness(&[1.0, 0.9], 0.1).unwrap(),
            (2.0 + 2.0 * (-0.5f64).exp()) / 4.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(balancedness(&[1.0, 0.9], 0.1).unwrap(), 0.803265, epsilon = 1e-6);
        assert_abs_diff_eq!(balancedness(&[0.0, 1.0, 0.5], 1e9).unwrap(), 1.0, epsilon = 1e-12);
        assert!(balancedness(&[0.1], 0.0).is_err());
    }

    #[test]
    fn misclassified_examples() {
        let split = ShotSplit(vec![Shot::Few, Shot::Few]);
        let labels = vec![0, 0, 0, 1, 1];
        let preds = vec![1, 1, 1, 0, 1];
        let m = mean_misclassified(&preds, &labels, &split).unwrap();
        assert_eq!(m.few, Some(2.0));
        assert_eq!(m.many, None);
        let m = mean_misclassified(&labels, &labels, &split).unwrap();
        assert_eq!(m.few, Some(0.0));
    }

    fn graph() -> NeighborGraph {
        NeighborGraph::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![vec![1], vec![0], vec![]],
            Default::default(),
        )
        .unwrap()
    }

    #[test]
    fn transition_examples() {
        let labels = vec![0, 1, 2, 0];
        let zs = vec![0, 2, 2, 1];
        let r = transition_analysis(&zs, &zs, &labels, &graph()).unwrap();
        let t = r.totals();
        assert_eq!(t.zs_correct_ft_wrong + t.zs_wrong_ft_correct, 0);
        assert_eq!(r.neighbor_error_fraction, None);

        let r = transition_analysis(&[0], &[1], &[0], &graph()).unwrap();
        assert_eq!(r.per_class[0].zs_correct_ft_wrong, 1);
        assert_eq!(r.neighbor_error_fraction, Some(1.0));

        let r = transition_analysis(&[0], &[2], &[0], &graph()).unwrap();
        assert_eq!(r.neighbor_error_fraction, Some(0.0));
        assert!(transition_analysis(&[0, 1], &[2], &[0], &graph()).is_err());
    }

    #[test]
    fn renders() {
        let labels = vec![0, 1];
        let r = evaluate(&labels, &labels, &ClassCounts(vec![150, 10])).unwrap();
        let table = render_eval_table(&r);
        assert!(table.contains("100.00"));
        assert!(table.contains('-'));
        let csv = per_class_csv(&["a".into(), "b,c".into()], &ClassCounts(vec![150, 10]), &r, None);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.contains("\"b,c\""));
    }

    proptest! {
        #[test]
        fn balancedness_symmetric_and_shift_invariant(
            accs in prop::collection::vec(0.0f64..1.0, 1..20),
            shift in -0.5f64..0.5,
            rot in 0usize..20,
        ) {
            let b = balancedness(&accs, 0.1).unwrap();
            let mut rotated = accs.clone();
            let len = rotated.len();
            rotated.rotate_left(rot % len);
            let shifted: Vec<f64> = accs.iter().map(|a| a + shift).collect();
            prop_assert!((b - balancedness(&rotated, 0.1).unwrap()).abs() < 1e-12);
            prop_assert!((b - balancedness(&shifted, 0.1).unwrap()).abs() < 1e-9);
            prop_assert!(b > 0.0 && b <= 1.0 + 1e-12);
        }

        #[test]
        fn evaluate_permutation_invariant(
            pairs in prop::collection::vec((0usize..4, 0usize..4), 1..40),
            rot in 0usize..40,
        ) {
            let counts = ClassCounts(vec![150, 50, 10, 3]);
            let (preds, labels): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let mut shuffled = pairs.clone();
            let len = shuffled.len();
            shuffled.rotate_left(rot % len);
            shuffled.reverse();
            let (p2, l2): (Vec<_>, Vec<_>) = shuffled.into_iter().unzip();
            let a = evaluate(&preds, &labels, &counts).unwrap();
            let b = evaluate(&p2, &l2, &counts).unwrap();
            prop_assert_eq!(a.per_class_acc, b.per_class_acc);
            prop_assert_eq!(a.overall_acc, b.overall_acc);
        }

        #[test]
        fn transitions_conserve_samples(
            triples in prop::collection::vec((0usize..3, 0usize..3, 0usize..3), 0..50),
        ) {
            let zs: Vec<usize> = triples.iter().map(|t| t.0).collect();
            let ft: Vec<usize> = triples.iter().map(|t| t.1).collect();
            let y: Vec<usize> = triples.iter().map(|t| t.2).collect();
            let r = transition_analysis(&zs, &ft, &y, &graph()).unwrap();
            prop_assert_eq!(r.totals().total(), y.len());
            for (c, cell) in r.per_class.iter().enumerate() {
                prop_assert_eq!(cell.total(), y.iter().filter(|&&l| l == c).count());
            }
            if let Some(f) = r.neighbor_error_fraction {
                prop_assert!((0.0..=1.0).contains(&f));
            }
        }
    }
}
