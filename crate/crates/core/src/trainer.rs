//! Classification head over frozen embeddings, trained with momentum SGD under a cosine
//! learning-rate schedule on the combined cue objective.

use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cues::{argmax, CueTargets};
use crate::dataset::{ClassPrior, LabeledEmbeddings};
use crate::error::{Error, Result};
use crate::losses::{CueObjective, LossConfig, LossParts};
use crate::matrix::Matrix;
use crate::tensorio;

/// `0.5 * lr0 * (1 + cos(pi * t / T))`.
pub fn cosine_lr(lr0: f64, step: usize, total_steps: usize) -> f64 {
    let total = total_steps.max(1) as f64;
    0.5 * lr0 * (1.0 + (PI * step.min(total_steps) as f64 / total).cos())
}

/// One heavy-ball update with coupled L2 decay:
/// `v <- momentum * v + (g + wd * w)`, `w <- w - lr * v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((w, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *w;
        *w -= lr * *v;
    }
}

/// Fully connected layer `out = W in + b`, `W` stored row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub outputs: usize,
    pub inputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(outputs: usize, inputs: usize) -> Self {
        Self {
            outputs,
            inputs,
            weight: vec![0.0; outputs * inputs],
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, input: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weight.chunks_exact(self.inputs).zip(&self.bias))
        {
            *o = b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
        }
    }

    fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Linear head (one layer) or one-hidden-layer ReLU head (two layers).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadModel {
    layers: Vec<Dense>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    Zero,
    #[default]
    Prototype,
}

impl HeadModel {
    pub fn linear(weight: Matrix, bias: Vec<f32>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::DimensionMismatch(format!(
                "{} bias entries for {} classes",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(Self {
            layers: vec![Dense {
                outputs: weight.rows(),
                inputs: weight.cols(),
                weight: weight.as_slice().iter().map(|&v| v as f64).collect(),
                bias: bias.into_iter().map(f64::from).collect(),
            }],
        })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() || layers.len() > 2 {
            return Err(Error::Validation("a head has one or two layers".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::DimensionMismatch("hidden width does not chain".into()));
            }
        }
        for l in &layers {
            if l.weight.len() != l.outputs * l.inputs || l.bias.len() != l.outputs {
                return Err(Error::DimensionMismatch("layer parameter shape".into()));
            }
        }
        Ok(Self { layers })
    }

    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            layers: vec![Dense::zeros(classes, dim)],
        }
    }

    /// Rows of `W` are the unit-normalized prototypes times `scale`; `b = 0`.
    pub fn from_prototypes(prototypes: &Matrix, scale: f64) -> Result<Self> {
        let mut layer = Dense::zeros(prototypes.rows(), prototypes.cols());
        for (c, row) in prototypes.iter_rows().enumerate() {
            let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::ZeroNorm { what: "prototypes", row: c });
            }
            for (w, &v) in layer.weight[c * layer.inputs..(c + 1) * layer.inputs].iter_mut().zip(row) {
                *w = scale * v as f64 / norm;
            }
        }
        Ok(Self { layers: vec![layer] })
    }

    /// ReLU hidden layer with seeded He-normal weights, zero output layer.
    pub fn mlp(classes: usize, dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = (2.0 / dim as f64).sqrt();
        let mut first = Dense::zeros(hidden, dim);
        for w in &mut first.weight {
            let z: f64 = StandardNormal.sample(&mut rng);
            *w = std * z;
        }
        Self {
            layers: vec![first, Dense::zeros(classes, hidden)],
        }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn is_linear(&self) -> bool {
        self.layers.len() == 1
    }

    pub fn logits(&self, x: &[f32]) -> Vec<f64> {
        let input: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        self.forward(&input).pop().unwrap()
    }

    /// Activations of every layer; hidden ones are post-ReLU.
    fn forward(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; layer.outputs];
            layer.forward(acts.last().map_or(input, Vec::as_slice), &mut out);
            if i + 1 < self.layers.len() {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(out);
        }
        acts
    }

    /// Accumulates `scale * d loss / d params` into `grads` given `d loss / d logits`.
    fn backward(&self, input: &[f64], acts: &[Vec<f64>], grad_logits: &[f64], scale: f64, grads: &mut [Dense]) {
        let mut upstream: Vec<f64> = grad_logits.to_vec();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let layer_in = if li == 0 { input } else { &acts[li - 1] };
            let g = &mut grads[li];
            for (o, &d) in upstream.iter().enumerate() {
                let d = d * scale;
                g.bias[o] += d;
                for (gw, &x) in g.weight[o * layer.inputs..(o + 1) * layer.inputs].iter_mut().zip(layer_in) {
                    *gw += d * x;
                }
            }
            if li > 0 {
                let mut down = vec![0.0; layer.inputs];
                for (o, &d) in upstream.iter().enumerate() {
                    for (dn, &w) in down.iter_mut().zip(&layer.weight[o * layer.inputs..(o + 1) * layer.inputs]) {
                        *dn += d * w;
                    }
                }
                // ReLU gate of the previous layer
                for (dn, &a) in down.iter_mut().zip(&acts[li - 1]) {
                    if a <= 0.0 {
                        *dn = 0.0;
                    }
                }
                upstream = down;
            }
        }
    }

    pub fn predict(&self, embeddings: &Matrix) -> Result<Vec<usize>> {
        if embeddings.cols() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "head expects {} dims, embeddings have {}",
                self.dim(),
                embeddings.cols()
            )));
        }
        Ok(embeddings.iter_rows().map(|r| argmax(&self.logits(r))).collect())
    }

    /// Rounds every parameter to the nearest `f32`, the precision models are stored in.
    pub fn quantize(&mut self) {
        for l in &mut self.layers {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let dir = path.parent().unwrap_or(Path::new(""));
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Validation(format!("bad model path {}", path.display())))?;
        let mut layers = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let weight_path = format!("{stem}.layer{i}.weight.bin");
            let bias_path = format!("{stem}.layer{i}.bias.bin");
            let w = Matrix::new(l.outputs, l.inputs, l.weight.iter().map(|&v| v as f32).collect())?;
            let b = Matrix::new(1, l.outputs, l.bias.iter().map(|&v| v as f32).collect())?;
            tensorio::write_tensor(&dir.join(&weight_path), &w)?;
            tensorio::write_tensor(&dir.join(&bias_path), &b)?;
            layers.push(LayerFiles {
                weight_path,
                bias_path,
            });
        }
        let header = ModelHeader {
            kind: if self.is_linear() { "linear" } else { "mlp" }.into(),
            classes: self.num_classes(),
            dim: self.dim(),
            layers,
            config_hash: config_hash.to_string(),
        };
        crate::io::write_json(path, &header)
    }

    pub fn load(path: &Path) -> Result<(Self, ModelHeader)> {
        let header: ModelHeader = crate::io::read_json(path)?;
        let dir = path.parent().unwrap_or(Path::new(""));
        let mut layers = Vec::new();
        for files in &header.layers {
            let w = tensorio::read_tensor(&dir.join(&files.weight_path))?;
            let b = tensorio::read_tensor(&dir.join(&files.bias_path))?;
            if b.rows() != 1 || b.cols() != w.rows() {
                return Err(Error::DimensionMismatch(format!(
                    "bias {} is {}x{}, expected 1x{}",
                    files.bias_path,
                    b.rows(),
                    b.cols(),
                    w.rows()
                )));
            }
            layers.push(Dense {
                outputs: w.rows(),
                inputs: w.cols(),
                weight: w.as_slice().iter().map(|&v| v as f64).collect(),
                bias: b.as_slice().iter().map(|&v| v as f64).collect(),
            });
        }
        let model = Self::from_layers(layers)?;
        if model.num_classes() != header.classes || model.dim() != header.dim {
            return Err(Error::DimensionMismatch("model header disagrees with its tensors".into()));
        }
        Ok((model, header))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFiles {
    pub weight_path: String,
    pub bias_path: String,
}

/// JSON header written next to a model's tensor files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub kind: String,
    pub classes: usize,
    pub dim: usize,
    pub layers: Vec<LayerFiles>,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub init: Init,
    /// Norm of each prototype row under `Init::Prototype`.
    pub prototype_scale: f64,
    /// Width of the optional ReLU hidden layer; `None` trains a linear head.
    pub hidden: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            epochs: 20,
            seed: 0,
            loss: LossConfig::default(),
            init: Init::Prototype,
            prototype_scale: 1.0,
            hidden: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Validation(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Validation(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Validation("weight decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch size must be at least 1".into()));
        }
        if self.hidden == Some(0) {
            return Err(Error::Validation("hidden width must be positive".into()));
        }
        if self.hidden.is_some() && self.init == Init::Prototype {
            return Err(Error::Validation("prototype init needs a linear head".into()));
        }
        self.loss.validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        crate::io::sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub total: f64,
    pub la: f64,
    pub bla_zs: f64,
    pub bla_llm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochLoss>,
    pub model: HeadModel,
    pub steps: usize,
    pub wall_clock_s: f64,
    pub config_hash: String,
}

/// Serializable summary of a [`TrainReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config: TrainConfig,
    pub config_hash: String,
    pub steps: usize,
    pub history: Vec<EpochLoss>,
    pub wall_clock_s: f64,
}

impl TrainReport {
    pub fn summary(&self, config: &TrainConfig) -> TrainSummary {
        TrainSummary {
            config: config.clone(),
            config_hash: self.config_hash.clone(),
            steps: self.steps,
            history: self.history.clone(),
            wall_clock_s: self.wall_clock_s,
        }
    }
}

pub fn initial_head(dataset: &LabeledEmbeddings, prototypes: Option<&Matrix>, config: &TrainConfig) -> Result<HeadModel> {
    let classes = dataset.num_classes();
    let dim = dataset.dim();
    match (config.hidden, config.init) {
        (Some(h), _) => Ok(HeadModel::mlp(classes, dim, h, config.seed)),
        (None, Init::Zero) => Ok(HeadModel::zeros(classes, dim)),
        (None, Init::Prototype) => {
            let protos = prototypes
                .ok_or_else(|| Error::Validation("prototype init requested without prototypes".into()))?;
            if protos.rows() != classes || protos.cols() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "prototypes are {}x{}, dataset needs {classes}x{dim}",
                    protos.rows(),
                    protos.cols()
                )));
            }
            HeadModel::from_prototypes(protos, config.prototype_scale)
        }
    }
}

/// Runs `epochs * ceil(N / batch_size)` SGD steps on the cue objective.
///
/// Everything random derives from `config.seed`: epoch `e` shuffles with the ChaCha
/// stream `e` of that seed. The returned head is quantized to `f32` precision.
pub fn train(
    dataset: &LabeledEmbeddings,
    prior: &ClassPrior,
    targets_zs: &CueTargets,
    targets_llm: &CueTargets,
    prototypes: Option<&Matrix>,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    let n = dataset.len();
    let classes = dataset.num_classes();
    if targets_zs.len() != n || targets_llm.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} samples but {} zs and {} llm target rows",
            targets_zs.len(),
            targets_llm.len()
        )));
    }
    if prior.len() != classes || targets_zs.num_classes() != classes || targets_llm.num_classes() != classes {
        return Err(Error::DimensionMismatch("prior or targets disagree on the class count".into()));
    }

    let started = Instant::now();
    let objective = CueObjective::new(prior, config.loss)?;
    let mut model = initial_head(dataset, prototypes, config)?;
    let mut velocity: Vec<Dense> = model.layers.iter().map(|l| Dense::zeros(l.outputs, l.inputs)).collect();
    let mut grads = velocity.clone();

    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = config.epochs * steps_per_epoch;
    let features: Vec<f64> = dataset.features().as_slice().iter().map(|&v| v as f64).collect();
    let dim = dataset.dim();
    let labels = dataset.labels();

    let mut t_zs = vec![0.0; classes];
    let mut t_llm = vec![0.0; classes];
    let mut grad_logits = vec![0.0; classes];
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0;

    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut sums = LossParts::default();
        for batch in order.chunks(config.batch_size) {
            grads.iter_mut().for_each(|g| {
                g.weight.iter_mut().for_each(|v| *v = 0.0);
                g.bias.iter_mut().for_each(|v| *v = 0.0);
            });
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let x = &features[i * dim..(i + 1) * dim];
                let acts = model.forward(x);
                targets_zs.fill_row(i, &mut t_zs);
                targets_llm.fill_row(i, &mut t_llm);
                let parts = objective
                    .eval(acts.last().unwrap(), labels[i], &t_zs, &t_llm, &mut grad_logits)
                    .map_err(|_| Error::Diverged { step })?;
                if !parts.total.is_finite() {
                    return Err(Error::Diverged { step });
                }
                sums.total += parts.total;
                sums.la += parts.la;
                sums.bla_zs += parts.bla_zs;
                sums.bla_llm += parts.bla_llm;
                model.backward(x, &acts, &grad_logits, scale, &mut grads);
            }

            let lr = cosine_lr(config.lr0, step, total_steps);
            for ((layer, g), v) in model.layers.iter_mut().zip(&grads).zip(&mut velocity) {
                sgd_step(&mut layer.weight, &g.weight, &mut v.weight, lr, config.momentum, config.weight_decay);
                sgd_step(&mut layer.bias, &g.bias, &mut v.bias, lr, config.momentum, 0.0);
            }
            step += 1;
        }
        let n = n.max(1) as f64;
        history.push(EpochLoss {
            total: sums.total / n,
            la: sums.la / n,
            bla_zs: sums.bla_zs / n,
            bla_llm: sums.bla_llm / n,
        });
    }

    model.quantize();
    Ok(TrainReport {
        history,
        model,
        steps: step,
        wall_clock_s: started.elapsed().as_secs_f64(),
        config_hash: config.hash(),
    })
}

/// Parameter gradient of the mean cue objective over `indices`, for gradient checks.
pub fn parameter_gradient(
    model: &HeadModel,
    dataset: &LabeledEmbeddings,
    indices: &[usize],
    objective: &CueObjective,
    targets_zs: &CueTargets,
    targets_llm: &CueTargets,
) -> Result<(f64, Vec<Dense>)> {
    let classes = model.num_classes();
    let mut grads: Vec<Dense> = model.layers.iter().map(|l| Dense::zeros(l.outputs, l.inputs)).collect();
    let mut grad_logits = vec![0.0; classes];
    let scale = 1.0 / indices.len() as f64;
    let mut total = 0.0;
    for &i in indices {
        let x: Vec<f64> = dataset.features().row(i).iter().map(|&v| v as f64).collect();
        let acts = model.forward(&x);
        let parts = objective.eval(
            acts.last().unwrap(),
            dataset.labels()[i],
            &targets_zs.dense_row(i),
            &targets_llm.dense_row(i),
            &mut grad_logits,
        )?;
        total += parts.total * scale;
        model.backward(&x, &acts, &grad_logits, scale, &mut grads);
    }
    Ok((total, grads))
}

impl HeadModel {
    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::num_params).sum()
    }

    /// Mutable view of parameter `index` in layer-major (weights, then bias) order.
    pub fn param_mut(&mut self, index: usize) -> &mut f64 {
        let mut i = index;
        for l in &mut self.layers {
            if i < l.weight.len() {
                return &mut l.weight[i];
            }
            i -= l.weight.len();
            if i < l.bias.len() {
                return &mut l.bias[i];
            }
            i -= l.bias.len();
        }
        panic!("parameter index {index} out of range");
    }
}

/// Flattens gradients in the same order as [`HeadModel::param_mut`].
pub fn flatten(grads: &[Dense]) -> Vec<f64> {
    grads
        .iter()
        .flat_map(|g| g.weight.iter().chain(&g.bias).copied())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cues::CueKind;
    use crate::dataset::compute_prior;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cosine_schedule() {
        assert_abs_diff_eq!(cosine_lr(0.1, 0, 10), 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(cosine_lr(0.1, 10, 10), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cosine_lr(0.1, 5, 10), 0.05, epsilon = 1e-15);
    }

    #[test]
    fn sgd_examples() {
        let (mut w, mut v) = (vec![0.3], vec![0.0]);
        sgd_step(&mut w, &[0.0], &mut v, 0.1, 0.9, 0.0);
        assert_eq!(w, vec![0.3]);

        let (mut w, mut v) = (vec![0.0], vec![0.0]);
        sgd_step(&mut w, &[1.0], &mut v, 0.1, 0.9, 0.0);
        assert_abs_diff_eq!(v[0], 1.0);
        assert_abs_diff_eq!(w[0], -0.1);
        sgd_step(&mut w, &[1.0], &mut v, 0.1, 0.9, 0.0);
        assert_abs_diff_eq!(v[0], 1.9, epsilon = 1e-12);
        assert_abs_diff_eq!(w[0], -0.29, epsilon = 1e-12);

        let (mut w, mut v) = (vec![2.0], vec![0.0]);
        sgd_step(&mut w, &[0.0], &mut v, 0.5, 0.0, 0.1);
        assert_abs_diff_eq!(w[0], 1.9, epsilon = 1e-12);
    }

    #[test]
    fn predict_examples() {
        let eye = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let head = HeadModel::linear(eye.clone(), vec![0.0, 0.0]).unwrap();
        assert_eq!(head.predict(&Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap()).unwrap(), vec![1]);
        assert_eq!(HeadModel::zeros(3, 2).predict(&eye).unwrap(), vec![0, 0]);
        let bias_only = HeadModel::linear(Matrix::zeros(2, 1), vec![0.2, 0.9]).unwrap();
        assert_eq!(bias_only.predict(&Matrix::zeros(1, 1)).unwrap(), vec![1]);
        assert!(head.predict(&Matrix::zeros(1, 3)).is_err());
    }

    fn toy() -> (LabeledEmbeddings, ClassPrior, CueTargets) {
        let features = Matrix::from_rows(&[
            vec![1.0, 0.1],
            vec![0.9, -0.1],
            vec![1.1, 0.0],
            vec![-1.0, 0.2],
            vec![-0.8, 0.0],
        ])
        .unwrap();
        let labels = vec![0, 0, 0, 1, 1];
        let ds = LabeledEmbeddings::new(features, labels.clone(), vec!["a".into(), "b".into()]).unwrap();
        let prior = compute_prior(&ds.counts()).unwrap();
        let t = CueTargets::one_hot(&labels, 2, CueKind::Zs);
        (ds, prior, t)
    }

    #[test]
    fn zero_epochs_returns_initial_head() {
        let (ds, prior, t) = toy();
        let config = TrainConfig {
            epochs: 0,
            init: Init::Zero,
            ..TrainConfig::default()
        };
        let r = train(&ds, &prior, &t, &t, None, &config).unwrap();
        assert_eq!(r.model, HeadModel::zeros(2, 2));
        assert!(r.history.is_empty());
        assert_eq!(r.steps, 0);
    }

    #[test]
    fn step_count_and_history() {
        let (ds, prior, t) = toy();
        let config = TrainConfig {
            epochs: 3,
            batch_size: 2,
            init: Init::Zero,
            ..TrainConfig::default()
        };
        let r = train(&ds, &prior, &t, &t, None, &config).unwrap();
        assert_eq!(r.steps, 9);
        assert_eq!(r.history.len(), 3);
    }

    #[test]
    fn prototype_init_requires_prototypes() {
        let (ds, prior, t) = toy();
        let config = TrainConfig::default();
        assert!(train(&ds, &prior, &t, &t, None, &config).is_err());
        let protos = Matrix::from_rows(&[vec![3.0, 4.0], vec![0.0, -2.0]]).unwrap();
        let head = initial_head(&ds, Some(&protos), &config).unwrap();
        assert_abs_diff_eq!(head.layers()[0].weight[0], 0.6, epsilon = 1e-7);
        assert_abs_diff_eq!(head.layers()[0].weight[3], -1.0, epsilon = 1e-7);
    }

    #[test]
    fn mlp_rejects_prototype_init() {
        let config = TrainConfig {
            hidden: Some(4),
            ..TrainConfig::default()
        };
        assert!(config.validate().is_err());
    }

    #[test]
    fn diverging_run_reports_step() {
        let (ds, prior, t) = toy();
        let config = TrainConfig {
            lr0: 1e300,
            momentum: 0.0,
            init: Init::Zero,
            batch_size: 1,
            epochs: 5,
            ..TrainConfig::default()
        };
        match train(&ds, &prior, &t, &t, None, &config) {
            Err(Error::Diverged { step }) => assert!(step > 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn model_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = HeadModel::mlp(3, 4, 5, 7);
        m.layers[1].weight[2] = 0.25;
        m.quantize();
        let path = dir.path().join("model.json");
        m.save(&path, "abc").unwrap();
        let (back, header) = HeadModel::load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(header.kind, "mlp");
        assert_eq!(header.config_hash, "abc");
    }
}
