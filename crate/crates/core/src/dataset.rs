//! Long-tailed split construction, class counts, priors and shot splits.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Classes with more training samples than this are Many-shot.
pub const MANY_SHOT_ABOVE: usize = 100;
/// Classes with fewer training samples than this are Few-shot.
pub const FEW_SHOT_BELOW: usize = 20;

/// Feature vectors with integer labels over a named class vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbeddings {
    features: Matrix,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl LabeledEmbeddings {
    pub fn new(features: Matrix, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if features.cols() == 0 {
            return Err(Error::Validation("feature dimension must be positive".into()));
        }
        let mut seen = HashSet::new();
        for name in &class_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Validation(format!("duplicate class name {name:?}")));
            }
        }
        let classes = class_names.len();
        if let Some((position, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::LabelOutOfRange {
                label,
                position,
                classes,
            });
        }
        Ok(Self {
            features,
            labels,
            class_names,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn counts(&self) -> ClassCounts {
        ClassCounts::from_labels(&self.labels, self.num_classes())
    }

    /// Keeps only the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassCounts(pub Vec<usize>);

impl ClassCounts {
    pub fn from_labels(labels: &[usize], num_classes: usize) -> Self {
        let mut counts = vec![0; num_classes];
        for &l in labels {
            counts[l] += 1;
        }
        Self(counts)
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Empirical class prior `counts_c / N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrior {
    pi: Vec<f64>,
}

impl ClassPrior {
    /// Wraps an explicit probability vector. Entries must be positive and sum to one.
    pub fn from_probabilities(pi: Vec<f64>) -> Result<Self> {
        if pi.is_empty() {
            return Err(Error::Validation("prior over zero classes".into()));
        }
        if pi.iter().any(|&p| !p.is_finite() || p <= 0.0) {
            return Err(Error::Validation("prior entries must be finite and positive".into()));
        }
        let sum: f64 = pi.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!("prior sums to {sum}, not 1")));
        }
        Ok(Self { pi })
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self {
            pi: vec![1.0 / num_classes as f64; num_classes],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.pi
    }

    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }

    /// `temperature * log(pi_c)` for every class.
    pub fn log_shift(&self, temperature: f64) -> Vec<f64> {
        self.pi.iter().map(|p| temperature * p.ln()).collect()
    }
}

pub fn compute_prior(counts: &ClassCounts) -> Result<ClassPrior> {
    let total = counts.total();
    if total == 0 {
        return Err(Error::Validation("class counts are all zero".into()));
    }
    let total = total as f64;
    Ok(ClassPrior {
        pi: counts.0.iter().map(|&n| n as f64 / total).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shot {
    Many,
    Medium,
    Few,
}

impl Shot {
    pub const ALL: [Shot; 3] = [Shot::Many, Shot::Medium, Shot::Few];

    pub fn of_count(count: usize) -> Self {
        if count > MANY_SHOT_ABOVE {
            Shot::Many
        } else if count >= FEW_SHOT_BELOW {
            Shot::Medium
        } else {
            Shot::Few
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Shot::Many => "many",
            Shot::Medium => "medium",
            Shot::Few => "few",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ShotSplit(pub Vec<Shot>);

impl ShotSplit {
    pub fn classes_in(&self, shot: Shot) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(move |(_, &s)| s == shot)
            .map(|(c, _)| c)
    }
}

pub fn assign_shot_split(counts: &ClassCounts) -> ShotSplit {
    ShotSplit(counts.0.iter().map(|&n| Shot::of_count(n)).collect())
}

/// Target size of each profile rank: `round(n_max * ir^(-rank / (C - 1)))`, rounding
/// half away from zero.
pub fn longtail_profile(num_classes: usize, n_max: usize, ir: f64) -> Result<Vec<usize>> {
    if !(ir >= 1.0) || !ir.is_finite() {
        return Err(Error::Validation(format!(
            "imbalance ratio must be a finite value >= 1, got {ir}"
        )));
    }
    if num_classes == 1 {
        return Ok(vec![n_max]);
    }
    let last = (num_classes - 1) as f64;
    Ok((0..num_classes)
        .map(|rank| (n_max as f64 * ir.powf(-(rank as f64) / last)).round() as usize)
        .collect())
}

/// Selects a long-tailed subset of `labels`.
///
/// Classes are ranked by descending available count (ties to the smaller index) and the
/// class at rank `r` keeps `longtail_profile[r]` samples drawn without replacement.
/// Returned per-class index lists are sorted ascending.
pub fn build_longtail_indices(
    labels: &[usize],
    num_classes: usize,
    n_max: usize,
    ir: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if num_classes == 0 {
        return Err(Error::Validation("no classes".into()));
    }
    let profile = longtail_profile(num_classes, n_max, ir)?;

    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: l,
                position: i,
                classes: num_classes,
            });
        }
        pools[l].push(i);
    }

    let mut order: Vec<usize> = (0..num_classes).collect();
    order.sort_by(|&a, &b| pools[b].len().cmp(&pools[a].len()).then(a.cmp(&b)));

    let mut targets = vec![0; num_classes];
    for (rank, &class) in order.iter().enumerate() {
        targets[class] = profile[rank];
    }

    for class in 0..num_classes {
        let needed = targets[class];
        if needed == 0 {
            return Err(Error::Validation(format!(
                "class {class} would receive zero samples (n_max={n_max}, ir={ir})"
            )));
        }
        if pools[class].len() < needed {
            return Err(Error::InsufficientSamples {
                class,
                available: pools[class].len(),
                needed,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(pools
        .iter()
        .zip(&targets)
        .map(|(pool, &needed)| {
            let mut picked: Vec<usize> = index::sample(&mut rng, pool.len(), needed)
                .into_iter()
                .map(|j| pool[j])
                .collect();
            picked.sort_unstable();
            picked
        })
        .collect())
}

/// Persisted description of a long-tailed split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDescriptor {
    pub seed: u64,
    pub ir: f64,
    pub n_max: usize,
    pub per_class_counts: Vec<usize>,
    pub selected_indices: Vec<Vec<usize>>,
    /// Hash of the manifest the indices refer to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_hash: Option<String>,
}

impl SplitDescriptor {
    pub fn build(labels: &[usize], num_classes: usize, n_max: usize, ir: f64, seed: u64) -> Result<Self> {
        let selected_indices = build_longtail_indices(labels, num_classes, n_max, ir, seed)?;
        Ok(Self {
            seed,
            ir,
            n_max,
            per_class_counts: selected_indices.iter().map(Vec::len).collect(),
            selected_indices,
            source_hash: None,
        })
    }

    /// All selected rows, ascending.
    pub fn flat_indices(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.selected_indices.iter().flatten().copied().collect();
        all.sort_unstable();
        all
    }

    pub fn counts(&self) -> ClassCounts {
        ClassCounts(self.per_class_counts.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::io::read_json(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pool_labels(per_class: &[usize]) -> Vec<usize> {
        per_class
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
            .collect()
    }

    #[test]
    fn profile_ir100_spans_500_to_5() {
        let p = longtail_profile(100, 500, 100.0).unwrap();
        assert_eq!(p[0], 500);
        assert_eq!(p[99], 5);
    }

    #[test]
    fn profile_ir1_is_uniform() {
        assert_eq!(longtail_profile(10, 50, 1.0).unwrap(), vec![50; 10]);
    }

    #[test]
    fn two_class_profile() {
        assert_eq!(longtail_profile(2, 100, 4.0).unwrap(), vec![100, 25]);
        assert_eq!(longtail_profile(1, 37, 10.0).unwrap(), vec![37]);
    }

    #[test]
    fn ir_below_one_rejected() {
        assert!(matches!(longtail_profile(3, 10, 0.5), Err(Error::Validation(_))));
        let labels = pool_labels(&[10, 10]);
        assert!(build_longtail_indices(&labels, 2, 10, 0.9, 0).is_err());
    }

    #[test]
    fn insufficient_class_is_named() {
        // class 1 is ranked second and needs 25 but has 20
        let labels = pool_labels(&[200, 20, 200]);
        let err = build_longtail_indices(&labels, 3, 100, 4.0, 0).unwrap_err();
        match err {
            Error::InsufficientSamples { class, needed, .. } => {
                assert_eq!(class, 1);
                assert_eq!(needed, 25);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ordering_follows_available_size() {
        // class 2 has the most samples, so it gets n_max
        let labels = pool_labels(&[50, 60, 100]);
        let sel = build_longtail_indices(&labels, 3, 40, 4.0, 3).unwrap();
        let sizes: Vec<usize> = sel.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![10, 20, 40]);
        for (c, idx) in sel.iter().enumerate() {
            assert!(idx.iter().all(|&i| labels[i] == c));
        }
    }

    #[test]
    fn zero_target_rejected() {
        let labels = pool_labels(&[10, 10]);
        assert!(build_longtail_indices(&labels, 2, 1, 10.0, 0).is_err());
    }

    #[test]
    fn prior_examples() {
        let p = compute_prior(&ClassCounts(vec![5, 3, 2])).unwrap();
        assert_eq!(p.as_slice(), &[0.5, 0.3, 0.2]);
        assert_eq!(compute_prior(&ClassCounts(vec![7])).unwrap().as_slice(), &[1.0]);
        assert_eq!(
            compute_prior(&ClassCounts(vec![1, 1, 1, 1])).unwrap().as_slice(),
            &[0.25; 4]
        );
        assert!(compute_prior(&ClassCounts(vec![0, 0])).is_err());
    }

    #[test]
    fn shot_split_examples() {
        use Shot::*;
        assert_eq!(assign_shot_split(&ClassCounts(vec![150, 50, 10])).0, vec![Many, Medium, Few]);
        assert_eq!(assign_shot_split(&ClassCounts(vec![100, 20])).0, vec![Medium, Medium]);
        assert_eq!(assign_shot_split(&ClassCounts(vec![101, 19])).0, vec![Many, Few]);
    }

    #[test]
    fn embeddings_validation() {
        let f = Matrix::zeros(2, 3);
        assert!(LabeledEmbeddings::new(f.clone(), vec![0, 2], vec!["a".into(), "b".into()]).is_err());
        assert!(LabeledEmbeddings::new(f.clone(), vec![0, 1], vec!["a".into(), "a".into()]).is_err());
        assert!(LabeledEmbeddings::new(Matrix::zeros(2, 0), vec![0, 1], vec!["a".into(), "b".into()]).is_err());
        let ds = LabeledEmbeddings::new(f, vec![1, 1], vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(ds.counts().0, vec![0, 2]);
    }

    proptest! {
        #[test]
        fn split_is_disjoint_and_follows_profile(
            classes in 1usize..12,
            n_max in 1usize..60,
            ir in 1.0f64..50.0,
            seed in any::<u64>(),
        ) {
            let profile = longtail_profile(classes, n_max, ir).unwrap();
            prop_assume!(profile.iter().all(|&n| n > 0));
            let labels = pool_labels(&vec![n_max + 3; classes]);
            let sel = build_longtail_indices(&labels, classes, n_max, ir, seed).unwrap();
            let sizes: Vec<usize> = sel.iter().map(Vec::len).collect();
            prop_assert_eq!(&sizes, &profile);
            let mut all: Vec<usize> = sel.iter().flatten().copied().collect();
            let n = all.len();
            all.sort_unstable();
            all.dedup();
            prop_assert_eq!(all.len(), n);
            for w in profile.windows(2) {
                prop_assert!(w[0] >= w[1]);
            }
            let again = build_longtail_indices(&labels, classes, n_max, ir, seed).unwrap();
            prop_assert_eq!(sel, again);
        }

        #[test]
        fn prior_sums_to_one(counts in prop::collection::vec(1usize..10_000, 1..200)) {
            let p = compute_prior(&ClassCounts(counts)).unwrap();
            let s: f64 = p.as_slice().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(p.as_slice().iter().all(|&x| x > 0.0));
        }
    }
}
