//! Seeded Gaussian-mixture benchmark with clustered class centers.
//!
//! Classes belong to clusters (`class % clusters`); cluster centers are far apart
//! and class centers inside one cluster are close, so within-cluster confusion
//! dominates. Zero-shot prototypes are noisy copies of the class centers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledEmbeddings, SplitDescriptor};
use crate::error::Result;
use crate::matrix::Matrix;
use crate::losses::LossConfig;
use crate::neighbors::{GraphMeta, NeighborGraph};
use crate::trainer::{Init, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub dim: usize,
    pub clusters: usize,
    /// Norm of each cluster center.
    pub cluster_scale: f64,
    /// Norm of a class center's offset from its cluster center.
    pub class_spread: f64,
    /// Expected norm of the per-sample noise.
    pub sample_noise: f64,
    /// Expected norm of the noise added to class centers to form prototypes.
    pub prototype_noise: f64,
    /// Training pool size per class; also the head-class size of the split.
    pub n_max: usize,
    pub test_per_class: usize,
    pub ir: f64,
    /// Project features and prototypes onto the unit sphere.
    pub normalize: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 20,
            dim: 32,
            clusters: 5,
            cluster_scale: 4.0,
            class_spread: 1.0,
            sample_noise: 2.5,
            prototype_noise: 0.6,
            n_max: 500,
            test_per_class: 50,
            ir: 100.0,
            normalize: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub config: SyntheticConfig,
    /// Full balanced training pool before long-tailed selection.
    pub train_pool: LabeledEmbeddings,
    pub split: SplitDescriptor,
    /// Long-tailed training subset selected by `split`.
    pub train: LabeledEmbeddings,
    pub test: LabeledEmbeddings,
    pub prototypes: Matrix,
    pub cluster_of: Vec<usize>,
}

struct Sampler {
    rng: ChaCha8Rng,
}

impl Sampler {
    fn gaussian(&mut self, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| StandardNormal.sample(&mut self.rng)).collect()
    }

    /// Random direction with norm `scale`.
    fn direction(&mut self, dim: usize, scale: f64) -> Vec<f64> {
        let g = self.gaussian(dim);
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        g.into_iter().map(|v| scale * v / norm).collect()
    }

    /// `center` plus isotropic noise of expected norm `scale`.
    fn around(&mut self, center: &[f64], scale: f64) -> Vec<f64> {
        let per_dim = scale / (center.len() as f64).sqrt();
        let g = self.gaussian(center.len());
        center.iter().zip(g).map(|(c, z)| c + per_dim * z).collect()
    }
}

fn to_f32(v: Vec<f64>, normalize: bool) -> Vec<f32> {
    let norm = if normalize {
        v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE)
    } else {
        1.0
    };
    v.into_iter().map(|x| (x / norm) as f32).collect()
}

impl SyntheticBenchmark {
    pub fn generate(config: &SyntheticConfig) -> Result<Self> {
        let mut s = Sampler {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let d = config.dim;
        let clusters = config.clusters.max(1);
        let cluster_centers: Vec<Vec<f64>> = (0..clusters).map(|_| s.direction(d, config.cluster_scale)).collect();
        let cluster_of: Vec<usize> = (0..config.classes).map(|c| c % clusters).collect();
        let class_centers: Vec<Vec<f64>> = cluster_of
            .iter()
            .map(|&k| {
                let offset = s.direction(d, config.class_spread);
                cluster_centers[k].iter().zip(offset).map(|(a, b)| a + b).collect()
            })
            .collect();
        let prototypes: Vec<Vec<f32>> = class_centers
            .iter()
            .map(|c| to_f32(s.around(c, config.prototype_noise), config.normalize))
            .collect();

        let names: Vec<String> = (0..config.classes)
            .map(|c| format!("cluster{}_class{}", cluster_of[c], c))
            .collect();
        let draw = |per_class: usize, s: &mut Sampler| -> Result<LabeledEmbeddings> {
            let mut rows = Vec::with_capacity(per_class * config.classes);
            let mut labels = Vec::with_capacity(per_class * config.classes);
            for (c, center) in class_centers.iter().enumerate() {
                for _ in 0..per_class {
                    rows.push(to_f32(s.around(center, config.sample_noise), config.normalize));
                    labels.push(c);
                }
            }
            LabeledEmbeddings::new(Matrix::from_rows(&rows)?, labels, names.clone())
        };
        let train_pool = draw(config.n_max, &mut s)?;
        let test = draw(config.test_per_class, &mut s)?;

        let split = SplitDescriptor::build(
            train_pool.labels(),
            config.classes,
            config.n_max,
            config.ir,
            config.seed,
        )?;
        let train = train_pool.subset(&split.flat_indices());
        Ok(Self {
            config: config.clone(),
            train_pool,
            split,
            train,
            test,
            prototypes: Matrix::from_rows(&prototypes)?,
            cluster_of,
        })
    }

    /// Neighbor graph linking every pair of classes that share a cluster.
    pub fn cluster_graph(&self) -> NeighborGraph {
        let classes = self.cluster_of.len();
        let neighbors = (0..classes)
            .map(|c| {
                (0..classes)
                    .filter(|&o| o != c && self.cluster_of[o] == self.cluster_of[c])
                    .collect()
            })
            .collect();
        NeighborGraph {
            classes: self.train.class_names().to_vec(),
            neighbors,
            meta: GraphMeta {
                provider: "cluster-oracle".into(),
                model_id: "synthetic".into(),
                batch_size: 0,
                max_neighbors: classes,
                created_at: 0,
            },
        }
    }
}

/// Training recipe used for arm comparisons on this benchmark: a linear probe
/// from zero init, where tail classes only see a handful of samples.
pub fn reference_train_config() -> TrainConfig {
    TrainConfig {
        lr0: 1.0,
        epochs: 20,
        init: Init::Zero,
        loss: LossConfig {
            tau_b: 0.5,
            ..LossConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{assign_shot_split, Shot};

    #[test]
    fn default_benchmark_shape() {
        let b = SyntheticBenchmark::generate(&SyntheticConfig::default()).unwrap();
        assert_eq!(b.train.num_classes(), 20);
        assert_eq!(b.train.dim(), 32);
        assert_eq!(b.test.len(), 20 * 50);
        let counts = b.train.counts();
        assert_eq!(counts.0[0], 500);
        assert_eq!(counts.0[19], 5);
        let split = assign_shot_split(&counts);
        assert!(split.classes_in(Shot::Few).count() > 0);
        assert!(split.classes_in(Shot::Many).count() > 0);
        let g = b.cluster_graph();
        g.validate().unwrap();
        assert_eq!(g.of(0), &[5, 10, 15]);
    }

    #[test]
    fn deterministic_for_seed() {
        let c = SyntheticConfig::default();
        let a = SyntheticBenchmark::generate(&c).unwrap();
        let b = SyntheticBenchmark::generate(&c).unwrap();
        assert!(a.train.features().bit_eq(b.train.features()));
        assert!(a.prototypes.bit_eq(&b.prototypes));
    }
}
