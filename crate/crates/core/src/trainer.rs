//! Projection head training on labeled embeddings, plus synthetic cluster
//! data for exercising the pipeline without a vision backbone.

use std::io::{BufReader, BufWriter, Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::contrastive::{normalize_backward, normalize_rows, supcon_eval, Temperature};
use crate::embedding_store::{EmbeddingRecord, EmbeddingSet, LabelTable};
use crate::error::{Error, Result};
use crate::rng;

pub const HEAD_MAGIC: [u8; 4] = *b"HEAD";
pub const HEAD_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One affine layer: `y = x W^T + b`, with `W` shaped `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Stack of dense layers with the activation applied between layers but not
/// after the last one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    layers: Vec<Dense>,
    activation: Activation,
}

impl ProjectionHead {
    /// Seeded initialization, each parameter uniform in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, drawn layer by layer (weights
    /// row-major, then bias).
    pub fn new(layer_dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::Config(format!(
                "layer dims must list at least input and output sizes, all positive: {layer_dims:?}"
            )));
        }
        let mut rng = rng::seeded(seed);
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut draw = || (2.0 * rng::unit_f64(&mut rng) - 1.0) * bound;
                let weight = Array2::from_shape_simple_fn((fan_out, fan_in), &mut draw);
                let bias = Array1::from_shape_simple_fn(fan_out, &mut draw);
                Dense { weight, bias }
            })
            .collect();
        Ok(ProjectionHead { layers, activation })
    }

    pub fn from_layers(layers: Vec<Dense>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("a head needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() || l.in_dim() == 0 || l.out_dim() == 0 {
                return Err(Error::Config(format!("layer {i} has inconsistent shapes")));
            }
            if i > 0 && layers[i - 1].out_dim() != l.in_dim() {
                return Err(Error::Dimension {
                    expected: layers[i - 1].out_dim(),
                    found: l.in_dim(),
                });
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(ProjectionHead { layers, activation })
    }

    /// Single square layer with identity weights and zero bias.
    pub fn identity(dim: usize) -> Result<Self> {
        Self::from_layers(
            vec![Dense {
                weight: Array2::eye(dim),
                bias: Array1::zeros(dim),
            }],
            Activation::Relu,
        )
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.in_dim())
            .chain(self.layers.iter().map(Dense::out_dim))
            .collect()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Parameters flattened in checkpoint order.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_parameters() {
            return Err(Error::Dimension {
                expected: self.num_parameters(),
                found: params.len(),
            });
        }
        let mut it = params.iter();
        for l in &mut self.layers {
            for (dst, src) in l.weight.iter_mut().chain(l.bias.iter_mut()).zip(&mut it) {
                *dst = *src;
            }
        }
        Ok(())
    }

    pub fn forward(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(inputs)?;
        let mut h = inputs.to_owned();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = h.dot(&l.weight.t()) + &l.bias;
            if i < last {
                h.mapv_inplace(|v| self.activation.apply(v));
            }
        }
        Ok(h)
    }

    /// Projects a whole set, keeping labels and order.
    pub fn project(&self, set: &EmbeddingSet) -> Result<EmbeddingSet> {
        if set.dim() != self.in_dim() {
            return Err(Error::Dimension {
                expected: self.in_dim(),
                found: set.dim(),
            });
        }
        let out = if set.is_empty() {
            Array2::zeros((0, self.out_dim()))
        } else {
            self.forward(set.to_matrix().view())?
        };
        let records = out
            .rows()
            .into_iter()
            .zip(set.records())
            .map(|(row, r)| EmbeddingRecord {
                label_id: r.label_id,
                vector: row.iter().map(|&v| v as f32).collect(),
            })
            .collect();
        EmbeddingSet::new(self.out_dim(), set.labels().clone(), records)
    }

    fn check_input(&self, inputs: ArrayView2<'_, f64>) -> Result<()> {
        if inputs.ncols() != self.in_dim() {
            return Err(Error::Dimension {
                expected: self.in_dim(),
                found: inputs.ncols(),
            });
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite input".into()));
        }
        Ok(())
    }

    fn forward_cached(&self, inputs: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        self.check_input(inputs)?;
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre_acts = Vec::with_capacity(self.layers.len());
        let mut h = inputs.to_owned();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let pre = h.dot(&l.weight.t()) + &l.bias;
            let next = if i < last {
                pre.mapv(|v| self.activation.apply(v))
            } else {
                pre.clone()
            };
            layer_inputs.push(h);
            pre_acts.push(pre);
            h = next;
        }
        Ok(ForwardCache {
            layer_inputs,
            pre_acts,
            output: h,
        })
    }

    /// Backpropagates `grad_out` (gradient w.r.t. the head output).
    fn backward(&self, cache: &ForwardCache, grad_out: Array2<f64>) -> HeadGrad {
        let mut layers = vec![None; self.layers.len()];
        let mut delta = grad_out;
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                let act = self.activation;
                delta.zip_mut_with(&cache.pre_acts[i], |d, &p| *d *= act.derivative(p));
            }
            let weight = delta.t().dot(&cache.layer_inputs[i]);
            let bias = delta.sum_axis(Axis(0));
            if i > 0 {
                delta = delta.dot(&self.layers[i].weight);
            }
            layers[i] = Some(Dense { weight, bias });
        }
        HeadGrad {
            layers: layers.into_iter().map(Option::unwrap).collect(),
        }
    }

    fn step(&mut self, grad: &HeadGrad, lr: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grad.layers) {
            l.weight.scaled_add(-lr, &g.weight);
            l.bias.scaled_add(-lr, &g.bias);
        }
    }
}

struct ForwardCache {
    layer_inputs: Vec<Array2<f64>>,
    pre_acts: Vec<Array2<f64>>,
    output: Array2<f64>,
}

/// Gradient with respect to every head parameter, shaped like the head.
#[derive(Debug, Clone)]
pub struct HeadGrad {
    pub layers: Vec<Dense>,
}

impl HeadGrad {
    /// Flattened in the same order as [`ProjectionHead::parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }
}

/// Loss of `supcon(normalize(head(inputs)))` and its gradient with respect
/// to the head parameters (and the temperature, when learnable).
#[derive(Debug, Clone)]
pub struct HeadLoss {
    pub loss: f64,
    pub grad: HeadGrad,
    pub grad_tau: Option<f64>,
}

pub fn head_loss_and_grad(
    head: &ProjectionHead,
    inputs: ArrayView2<'_, f64>,
    labels: &[u32],
    tau: Temperature,
) -> Result<HeadLoss> {
    let cache = head.forward_cached(inputs)?;
    let (unit, norms) = normalize_rows(cache.output.view())?;
    let eval = supcon_eval(unit.view(), labels, tau, true)?;
    let g = eval.grad.expect("gradient requested");
    let grad_out = normalize_backward(unit.view(), &norms, g.wrt_z.view());
    Ok(HeadLoss {
        loss: eval.loss,
        grad: head.backward(&cache, grad_out),
        grad_tau: g.wrt_tau,
    })
}

/// Composed loss only; used by finite-difference checks.
pub fn head_loss(
    head: &ProjectionHead,
    inputs: ArrayView2<'_, f64>,
    labels: &[u32],
    tau: Temperature,
) -> Result<f64> {
    let out = head.forward(inputs)?;
    let (unit, _) = normalize_rows(out.view())?;
    Ok(supcon_eval(unit.view(), labels, tau, false)?.loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub tau: Temperature,
    pub seed: u64,
    pub classes_per_batch: usize,
    pub samples_per_class: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 20,
            learning_rate: 0.05,
            tau: Temperature::default(),
            seed: 0,
            classes_per_batch: 4,
            samples_per_class: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.classes_per_batch == 0 {
            return Err(Error::Config(
                "batch_size, epochs and classes_per_batch must be positive".into(),
            ));
        }
        if self.samples_per_class < 2 {
            return Err(Error::Config("samples_per_class must be at least 2".into()));
        }
        if self.classes_per_batch * self.samples_per_class != self.batch_size {
            return Err(Error::Config(format!(
                "classes_per_batch ({}) x samples_per_class ({}) must equal batch_size ({})",
                self.classes_per_batch, self.samples_per_class, self.batch_size
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        self.tau.validate()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub head: ProjectionHead,
    /// `history[0]` is the mean loss of the first epoch's batches at the
    /// initial parameters; `history[e]` is the mean loss over epoch `e`.
    pub history: Vec<f64>,
    /// Final temperature (changes only when learnable).
    pub tau: Temperature,
}

/// Class-balanced minibatch gradient descent on the composed loss.
///
/// Each epoch reshuffles every class's records, then runs
/// `min_class_count / samples_per_class` batches. Batch `b` takes slots
/// `b*spc..(b+1)*spc` from each participating class; when fewer classes fit
/// in a batch than the data holds, the participants are drawn per batch.
pub fn train(head: &ProjectionHead, data: &EmbeddingSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Validation("training data is empty".into()));
    }
    if data.dim() != head.in_dim() {
        return Err(Error::Dimension {
            expected: head.in_dim(),
            found: data.dim(),
        });
    }
    let classes = data.present_label_ids();
    let by_label = data.indices_by_label();
    let spc = cfg.samples_per_class;
    for &c in &classes {
        let available = by_label[c as usize].len();
        if available < spc {
            return Err(Error::Composition {
                class: data.labels().name(c).unwrap_or("?").to_string(),
                available,
                required: spc,
            });
        }
    }
    if cfg.classes_per_batch > classes.len() {
        return Err(Error::Composition {
            class: format!("<{} distinct classes>", classes.len()),
            available: classes.len(),
            required: cfg.classes_per_batch,
        });
    }
    let min_count = classes
        .iter()
        .map(|&c| by_label[c as usize].len())
        .min()
        .unwrap();
    let batches_per_epoch = min_count / spc;

    let inputs = data.to_matrix();
    let labels = data.label_ids();
    let mut head = head.clone();
    let mut tau = cfg.tau;
    let mut rng = rng::seeded(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs + 1);

    for epoch in 1..=cfg.epochs {
        let mut pools: Vec<Vec<usize>> = classes
            .iter()
            .map(|&c| by_label[c as usize].clone())
            .collect();
        for pool in &mut pools {
            rng::shuffle(&mut rng, pool);
        }
        let mut batches = Vec::with_capacity(batches_per_epoch);
        let mut slots: Vec<usize> = (0..classes.len()).collect();
        for b in 0..batches_per_epoch {
            let members: Vec<usize> = if cfg.classes_per_batch == classes.len() {
                (0..classes.len()).collect()
            } else {
                rng::partial_shuffle(&mut rng, &mut slots, cfg.classes_per_batch);
                slots[..cfg.classes_per_batch].to_vec()
            };
            let idx: Vec<usize> = members
                .iter()
                .flat_map(|&m| pools[m][b * spc..(b + 1) * spc].iter().copied())
                .collect();
            batches.push(idx);
        }

        if epoch == 1 {
            let mut total = 0.0;
            for (b, idx) in batches.iter().enumerate() {
                let (x, y) = gather(&inputs, &labels, idx);
                let loss = head_loss(&head, x.view(), &y, tau)?;
                if !loss.is_finite() {
                    return Err(Error::Divergence { epoch: 0, batch: b });
                }
                total += loss;
            }
            history.push(total / batches.len() as f64);
        }

        let mut total = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let (x, y) = gather(&inputs, &labels, idx);
            let step = head_loss_and_grad(&head, x.view(), &y, tau)?;
            if !step.loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: b });
            }
            total += step.loss;
            head.step(&step.grad, cfg.learning_rate);
            if let Some(gt) = step.grad_tau {
                let next = tau.value() - cfg.learning_rate * gt;
                tau = Temperature::new(next, true).map_err(|_| Error::Divergence { epoch, batch: b })?;
            }
        }
        history.push(total / batches.len() as f64);
    }
    Ok(TrainOutcome { head, history, tau })
}

fn gather(inputs: &Array2<f64>, labels: &[u32], idx: &[usize]) -> (Array2<f64>, Vec<u32>) {
    (
        inputs.select(Axis(0), idx),
        idx.iter().map(|&i| labels[i]).collect(),
    )
}

pub fn write_head<W: Write>(head: &ProjectionHead, sink: W) -> Result<()> {
    if head.activation != Activation::Relu {
        return Err(Error::Validation(
            "checkpoints store rectifier heads only".into(),
        ));
    }
    let mut w = BufWriter::new(sink);
    w.write_all(&HEAD_MAGIC)?;
    w.write_all(&HEAD_VERSION.to_le_bytes())?;
    w.write_all(&(head.layers.len() as u32).to_le_bytes())?;
    for d in head.layer_dims() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in head.parameters() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_head<R: Read>(source: R) -> Result<ProjectionHead> {
    let mut r = BufReader::new(source);
    let mut word = [0u8; 4];
    let mut next = |r: &mut BufReader<R>, what: &str| -> Result<[u8; 4]> {
        r.read_exact(&mut word).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Truncated(what.to_string()),
            _ => Error::Io(e),
        })?;
        Ok(word)
    };
    let magic = next(&mut r, "magic")?;
    if magic != HEAD_MAGIC {
        return Err(Error::BadMagic {
            expected: HEAD_MAGIC,
            found: magic,
        });
    }
    let version = u32::from_le_bytes(next(&mut r, "version")?);
    if version != HEAD_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let n_layers = u32::from_le_bytes(next(&mut r, "layer count")?) as usize;
    if n_layers == 0 || n_layers > 1024 {
        return Err(Error::Validation(format!("implausible layer count {n_layers}")));
    }
    let mut dims = Vec::with_capacity(n_layers + 1);
    for _ in 0..=n_layers {
        dims.push(u32::from_le_bytes(next(&mut r, "layer dims")?) as usize);
    }
    let mut layers = Vec::with_capacity(n_layers);
    for w in dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let mut read_n = |n: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; 4 * n];
            r.read_exact(&mut buf).map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => Error::Truncated("parameters".into()),
                _ => Error::Io(e),
            })?;
            Ok(buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect())
        };
        let weight = Array2::from_shape_vec((fan_out, fan_in), read_n(fan_out * fan_in)?)
            .map_err(|e| Error::Validation(e.to_string()))?;
        let bias = Array1::from(read_n(fan_out)?);
        layers.push(Dense { weight, bias });
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::TrailingBytes);
    }
    ProjectionHead::from_layers(layers, Activation::Relu)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub means: Vec<Vec<f64>>,
    pub spread: Vec<f64>,
    pub count_per_class: usize,
    pub seed: u64,
    /// Class names; defaults to `class_0`, `class_1`, ...
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub names: Option<Vec<String>>,
}

impl ClusterSpec {
    /// Means placed on scaled coordinate axes so every pair of class means is
    /// exactly `separation` apart. Needs `dim >= num_classes`.
    pub fn axis_aligned(
        num_classes: usize,
        dim: usize,
        separation: f64,
        spread: f64,
        count_per_class: usize,
        seed: u64,
    ) -> Result<Self> {
        if dim < num_classes {
            return Err(Error::Config(format!(
                "axis-aligned means need dim >= num_classes ({dim} < {num_classes})"
            )));
        }
        let scale = separation / std::f64::consts::SQRT_2;
        let means = (0..num_classes)
            .map(|c| {
                let mut m = vec![0.0; dim];
                m[c] = scale;
                m
            })
            .collect();
        Ok(ClusterSpec {
            num_classes,
            dim,
            means,
            spread: vec![spread; num_classes],
            count_per_class,
            seed,
            names: None,
        })
    }

    pub fn with_names<S: Into<String>>(mut self, names: impl IntoIterator<Item = S>) -> Self {
        self.names = Some(names.into_iter().map(Into::into).collect());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.dim == 0 || self.count_per_class == 0 {
            return Err(Error::Config(
                "num_classes, dim and count_per_class must be positive".into(),
            ));
        }
        if self.means.len() != self.num_classes || self.spread.len() != self.num_classes {
            return Err(Error::Config(
                "means and spread need one entry per class".into(),
            ));
        }
        if self.means.iter().any(|m| m.len() != self.dim) {
            return Err(Error::Config("every mean must have length dim".into()));
        }
        if self.spread.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config("spread must be finite and nonnegative".into()));
        }
        if let Some(n) = &self.names {
            if n.len() != self.num_classes {
                return Err(Error::Config("names need one entry per class".into()));
            }
        }
        Ok(())
    }
}

/// Gaussian clusters: `count_per_class` draws of `mean + spread * N(0, I)`
/// per class, grouped by class in id order.
pub fn make_clusters(spec: &ClusterSpec) -> Result<EmbeddingSet> {
    spec.validate()?;
    let labels = match &spec.names {
        Some(n) => LabelTable::new(n.iter().cloned())?,
        None => LabelTable::new((0..spec.num_classes).map(|c| format!("class_{c}")))?,
    };
    let mut rng = rng::seeded(spec.seed);
    let mut records = Vec::with_capacity(spec.num_classes * spec.count_per_class);
    for c in 0..spec.num_classes {
        let mean = &spec.means[c];
        let spread = spec.spread[c];
        for _ in 0..spec.count_per_class {
            let vector = mean
                .iter()
                .map(|&m| {
                    let noise: f64 = rng.sample(StandardNormal);
                    (m + spread * noise) as f32
                })
                .collect();
            records.push(EmbeddingRecord {
                label_id: c as u32,
                vector,
            });
        }
    }
    EmbeddingSet::new(spec.dim, labels, records)
}
