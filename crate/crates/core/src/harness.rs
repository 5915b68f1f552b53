//! Experiment protocol: train a head on a subset of classes, build a
//! few-shot support set over every test class, score the rest. Also the
//! split-averaged open-set benchmark, the few-shot sweep and a 2-D PCA
//! projection for plotting.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::embedding_store::{stratified_split, EmbeddingSet};
use crate::error::{Error, Result};
use crate::knn::{build_support_with_indices, classify_batch, Voting, DEFAULT_K, DEFAULT_SHOTS};
use crate::metrics::{aggregate, report, EvalRecord, MetricsReport, Split};
use crate::rng;
use crate::trainer::{train, Activation, ClusterSpec, ProjectionHead, TrainConfig};

/// Class names of the synthetic benchmark: real images plus eight generators.
pub const BENCHMARK_CLASSES: [&str; 9] = [
    "real",
    "ADM",
    "SD_1.4",
    "SD_1.5",
    "VQDM",
    "Midjourney",
    "Glide",
    "BigGan",
    "Wukong",
];

fn default_shots() -> usize {
    DEFAULT_SHOTS
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_hidden() -> Vec<usize> {
    vec![64]
}

fn default_out_dim() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    /// Classes the head is trained on; the remaining test classes are
    /// evaluated as unseen.
    pub train_label_names: Vec<String>,
    #[serde(default = "default_shots")]
    pub shots_per_class: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Seeds support sampling; training uses `train.seed`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_out_dim")]
    pub out_dim: usize,
    #[serde(default)]
    pub voting: Voting,
}

impl ExperimentConfig {
    pub fn new<S: Into<String>>(name: &str, train_label_names: impl IntoIterator<Item = S>) -> Self {
        ExperimentConfig {
            name: name.to_string(),
            train_label_names: train_label_names.into_iter().map(Into::into).collect(),
            shots_per_class: DEFAULT_SHOTS,
            k: DEFAULT_K,
            seed: 0,
            train: TrainConfig::default(),
            hidden_dims: default_hidden(),
            out_dim: default_out_dim(),
            voting: Voting::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.train_label_names.is_empty() {
            return Err(Error::Config("train_label_names must not be empty".into()));
        }
        if self.shots_per_class == 0 || self.k == 0 || self.out_dim == 0 {
            return Err(Error::Config("shots_per_class, k and out_dim must be positive".into()));
        }
        self.train.validate()
    }

    fn layer_dims(&self, in_dim: usize) -> Vec<usize> {
        std::iter::once(in_dim)
            .chain(self.hidden_dims.iter().copied())
            .chain(std::iter::once(self.out_dim))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: MetricsReport,
    pub records: Vec<EvalRecord>,
    pub head: ProjectionHead,
    pub history: Vec<f64>,
    /// Test-set indices drawn into the support set.
    pub support_idx: Vec<usize>,
    /// Test-set indices that were scored.
    pub eval_idx: Vec<usize>,
}

/// Trains a head on `cfg.train_label_names` from `train_data`. When fewer
/// classes are trained than `classes_per_batch`, every batch holds all of
/// them and the batch size shrinks to match.
pub fn train_head(cfg: &ExperimentConfig, train_data: &EmbeddingSet) -> Result<(ProjectionHead, Vec<f64>)> {
    cfg.validate()?;
    let ids = train_data.labels().ids_of(&cfg.train_label_names)?;
    let subset = train_data.restrict_to(&ids)?;
    let mut train_cfg = cfg.train;
    let classes = subset.present_label_ids().len();
    if train_cfg.classes_per_batch > classes {
        train_cfg.classes_per_batch = classes;
        train_cfg.batch_size = classes * train_cfg.samples_per_class;
    }
    let init = ProjectionHead::new(&cfg.layer_dims(train_data.dim()), Activation::Relu, cfg.train.seed)?;
    let outcome = train(&init, &subset, &train_cfg)?;
    Ok((outcome.head, outcome.history))
}

/// Support/score stage with an already trained head.
///
/// Records whose class is among `seen_names` form the seen partition, the
/// rest the unseen one.
pub struct Evaluation {
    pub records: Vec<EvalRecord>,
    pub report: MetricsReport,
    pub support_idx: Vec<usize>,
    pub eval_idx: Vec<usize>,
}

pub fn evaluate(
    head: &ProjectionHead,
    test_data: &EmbeddingSet,
    seen_names: &[String],
    shots: usize,
    k: usize,
    voting: Voting,
    seed: u64,
) -> Result<Evaluation> {
    let seen_ids = test_data.labels().ids_of(seen_names)?;
    let projected = head.project(test_data)?;
    evaluate_projected(&projected, &seen_ids, shots, k, voting, seed)
}

fn evaluate_projected(
    projected: &EmbeddingSet,
    seen_ids: &[u32],
    shots: usize,
    k: usize,
    voting: Voting,
    seed: u64,
) -> Result<Evaluation> {
    let (support, support_idx) = build_support_with_indices(projected, shots, k, seed)?;
    let support = support.with_voting(voting);
    let in_support: BTreeSet<usize> = support_idx.iter().copied().collect();
    let eval_idx: Vec<usize> = (0..projected.len()).filter(|i| !in_support.contains(i)).collect();
    if eval_idx.iter().any(|i| in_support.contains(i)) {
        return Err(Error::Internal("support sample leaked into evaluation".into()));
    }
    let queries = projected.select(&eval_idx);
    let predictions = classify_batch(&support, &queries, None)?;
    let seen: BTreeSet<u32> = seen_ids.iter().copied().collect();
    let records: Vec<EvalRecord> = eval_idx
        .iter()
        .zip(predictions)
        .map(|(&i, prediction)| {
            let label = projected.records()[i].label_id;
            EvalRecord {
                sample_id: i as u64,
                true_label: Some(label),
                split: if seen.contains(&label) {
                    Split::Seen
                } else {
                    Split::Unseen
                },
                prediction,
            }
        })
        .collect();
    let report = report(&records, projected.labels(), seen_ids)?;
    Ok(Evaluation {
        records,
        report,
        support_idx,
        eval_idx,
    })
}

pub fn run_experiment(
    cfg: &ExperimentConfig,
    train_data: &EmbeddingSet,
    test_data: &EmbeddingSet,
) -> Result<ExperimentOutcome> {
    let (head, history) = train_head(cfg, train_data)?;
    let eval = evaluate(
        &head,
        test_data,
        &cfg.train_label_names,
        cfg.shots_per_class,
        cfg.k,
        cfg.voting,
        cfg.seed,
    )?;
    Ok(ExperimentOutcome {
        report: eval.report,
        records: eval.records,
        head,
        history,
        support_idx: eval.support_idx,
        eval_idx: eval.eval_idx,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
}

fn default_test_fraction() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSet {
    pub splits: Vec<SplitSpec>,
    /// Per-class share of the data held out as the test pool.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

impl SplitSet {
    pub fn validate(&self) -> Result<()> {
        if self.splits.is_empty() {
            return Err(Error::Config("a split set needs at least one split".into()));
        }
        for (i, s) in self.splits.iter().enumerate() {
            let seen: BTreeSet<&String> = s.seen.iter().collect();
            if let Some(dup) = s.unseen.iter().find(|u| seen.contains(u)) {
                return Err(Error::Config(format!(
                    "split {i}: {dup:?} is both seen and unseen"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SplitsOutcome {
    pub per_split: Vec<MetricsReport>,
    pub mean: MetricsReport,
    pub stddev: BTreeMap<String, f64>,
}

/// Holds out `test_fraction` of every class (seeded by `base.seed`), then
/// for each split trains on its seen classes and evaluates on the test pool
/// restricted to seen + unseen classes.
pub fn run_splits(splits: &SplitSet, data: &EmbeddingSet, base: &ExperimentConfig) -> Result<SplitsOutcome> {
    splits.validate()?;
    let pools = stratified_split(data, splits.test_fraction, base.seed)?;
    let (test_pool, train_pool) = (pools.selected, pools.remainder);
    let mut per_split = Vec::with_capacity(splits.splits.len());
    for split in &splits.splits {
        let mut cfg = base.clone();
        cfg.train_label_names = split.seen.clone();
        let names: Vec<String> = split.seen.iter().chain(&split.unseen).cloned().collect();
        let ids = test_pool.labels().ids_of(&names)?;
        let (test, _) = test_pool.subset_labels(&ids)?;
        per_split.push(run_experiment(&cfg, &train_pool, &test)?.report);
    }
    let (mean, stddev) = aggregate(&per_split)?;
    Ok(SplitsOutcome {
        per_split,
        mean,
        stddev,
    })
}

fn default_grid() -> Vec<usize> {
    vec![10, 25, 50, 100, 150, 500, 1000, 2500, 5000]
}

fn default_repeats() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    #[serde(default = "default_grid")]
    pub shots_grid: Vec<usize>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    pub base: ExperimentConfig,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shots_grid.is_empty() || self.shots_grid.contains(&0) {
            return Err(Error::Config("shots grid must be non-empty and positive".into()));
        }
        if self.shots_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("shots grid must be strictly ascending".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub shots: usize,
    pub repeat: usize,
    pub seed: u64,
    /// Accuracy over every scored record.
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

/// Re-runs support building and scoring for every grid point and repeat with
/// one trained head. Repeat `r` uses support seed `base.seed + r`. A grid
/// point that leaves some class without a record to score yields a row with
/// an error instead of stopping the sweep.
pub fn sweep_shots(cfg: &SweepConfig, train_data: &EmbeddingSet, test_data: &EmbeddingSet) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let base = &cfg.base;
    let (head, _) = train_head(base, train_data)?;
    let seen_ids = test_data.labels().ids_of(&base.train_label_names)?;
    let projected = head.project(test_data)?;
    let smallest = projected
        .indices_by_label()
        .into_iter()
        .filter(|v| !v.is_empty())
        .map(|v| v.len())
        .min()
        .unwrap_or(0);
    let mut rows = Vec::new();
    for &shots in &cfg.shots_grid {
        for repeat in 0..cfg.repeats {
            let seed = base.seed.wrapping_add(repeat as u64);
            let mut row = SweepRow {
                shots,
                repeat,
                seed,
                accuracy: None,
                error: None,
            };
            if shots >= smallest {
                row.error = Some(format!(
                    "insufficient samples: {shots} shots requested, smallest class has {smallest}"
                ));
            } else {
                match evaluate_projected(&projected, &seen_ids, shots, base.k, base.voting, seed) {
                    Ok(e) => row.accuracy = e.report.overall_accuracy,
                    Err(e) => row.error = Some(e.to_string()),
                }
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["shots", "repeat", "seed", "accuracy", "error"])
        .map_err(into_io)?;
    for r in rows {
        w.write_record([
            r.shots.to_string(),
            r.repeat.to_string(),
            r.seed.to_string(),
            r.accuracy.map(|a| a.to_string()).unwrap_or_default(),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(into_io)?;
    }
    w.flush()?;
    Ok(())
}

fn into_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

const PCA_TOL: f64 = 1e-9;
const PCA_MAX_ITERS: usize = 10_000;
const PCA_SEED: u64 = 0x5eed;

/// Projects mean-centered records onto their top two principal directions.
///
/// Uses orthogonal (subspace) iteration on the covariance with a fixed-seed
/// start, stopping once the subspace moves by less than `1e-9` (Frobenius)
/// per step, followed by a Rayleigh-Ritz rotation inside the subspace. Each
/// direction's sign makes its largest-magnitude coordinate positive.
pub fn pca2(set: &EmbeddingSet) -> Result<Vec<[f64; 2]>> {
    if set.len() < 2 {
        return Err(Error::Validation("PCA needs at least two records".into()));
    }
    let mut x = set.to_matrix();
    let mean = x.mean_axis(Axis(0)).unwrap();
    x -= &mean;
    let n = x.nrows() as f64;
    let d = x.ncols();
    if d < 2 {
        return Err(Error::DegenerateProjection);
    }
    let cov_apply = |v: &Array2<f64>| -> Array2<f64> { x.t().dot(&x.dot(v)) / n };
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Err(Error::DegenerateProjection);
    }

    let mut r = rng::seeded(PCA_SEED);
    let mut v = Array2::from_shape_simple_fn((d, 2), || rng::unit_f64(&mut r) - 0.5);
    v = orthonormalize(v)?;
    for _ in 0..PCA_MAX_ITERS {
        let next = orthonormalize(cov_apply(&v))?;
        let residual = &next - &v.dot(&v.t().dot(&next));
        v = next;
        if residual.iter().map(|e| e * e).sum::<f64>().sqrt() < PCA_TOL {
            break;
        }
    }

    // Rayleigh-Ritz on the 2x2 projected covariance.
    let h = v.t().dot(&cov_apply(&v));
    let (a, b, c) = (h[[0, 0]], 0.5 * (h[[0, 1]] + h[[1, 0]]), h[[1, 1]]);
    let half_gap = (0.5 * (a - c)).hypot(b);
    let l1 = 0.5 * (a + c) + half_gap;
    let l2 = 0.5 * (a + c) - half_gap;
    if !(l1 > 0.0) || l2 <= 1e-12 * l1 {
        return Err(Error::DegenerateProjection);
    }
    let theta = 0.5 * (2.0 * b).atan2(a - c);
    let (s, co) = theta.sin_cos();
    let mut p1: Array1<f64> = &v.column(0) * co + &v.column(1) * s;
    let mut p2: Array1<f64> = &v.column(1) * co - &v.column(0) * s;
    for p in [&mut p1, &mut p2] {
        let lead = p.iter().fold(0.0f64, |m, &e| if e.abs() > m.abs() { e } else { m });
        if lead < 0.0 {
            p.mapv_inplace(|e| -e);
        }
    }
    let xs = x.dot(&p1);
    let ys = x.dot(&p2);
    Ok(xs.iter().zip(ys.iter()).map(|(&a, &b)| [a, b]).collect())
}

fn orthonormalize(mut v: Array2<f64>) -> Result<Array2<f64>> {
    let n0 = v.column(0).dot(&v.column(0)).sqrt();
    if !(n0 > 1e-300) {
        return Err(Error::DegenerateProjection);
    }
    v.column_mut(0).mapv_inplace(|e| e / n0);
    let proj = v.column(0).dot(&v.column(1));
    let first = v.column(0).to_owned();
    v.column_mut(1).scaled_add(-proj, &first);
    let n1 = v.column(1).dot(&v.column(1)).sqrt();
    if !(n1 > 1e-14 * n0) {
        return Err(Error::DegenerateProjection);
    }
    v.column_mut(1).mapv_inplace(|e| e / n1);
    Ok(v)
}

pub fn write_pca_csv<W: Write>(set: &EmbeddingSet, coords: &[[f64; 2]], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["sample_id", "label", "x", "y"]).map_err(into_io)?;
    for (i, (r, c)) in set.records().iter().zip(coords).enumerate() {
        let label = set.labels().name(r.label_id).unwrap_or_default();
        w.write_record([i.to_string(), label.to_string(), c[0].to_string(), c[1].to_string()])
            .map_err(into_io)?;
    }
    w.flush()?;
    Ok(())
}

/// Synthetic stand-in for a generator-attribution benchmark: nine classes
/// with axis-aligned means, independent train and test pools drawn from the
/// same distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBenchmark {
    pub dim: usize,
    pub separation: f64,
    pub spread: f64,
    pub count_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticBenchmark {
    fn default() -> Self {
        SyntheticBenchmark {
            dim: 32,
            separation: 5.0,
            spread: 0.1,
            count_per_class: 2000,
            seed: 0,
        }
    }
}

impl SyntheticBenchmark {
    pub fn spec(&self, seed: u64) -> Result<ClusterSpec> {
        Ok(ClusterSpec::axis_aligned(
            BENCHMARK_CLASSES.len(),
            self.dim,
            self.separation,
            self.spread,
            self.count_per_class,
            seed,
        )?
        .with_names(BENCHMARK_CLASSES))
    }

    /// `(train, test)` pools.
    pub fn generate(&self) -> Result<(EmbeddingSet, EmbeddingSet)> {
        let train = crate::trainer::make_clusters(&self.spec(self.seed)?)?;
        let test = crate::trainer::make_clusters(&self.spec(self.seed ^ 0x9e37_79b9_7f4a_7c15)?)?;
        Ok((train, test))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding_store::{EmbeddingRecord, LabelTable};

    fn line_set() -> EmbeddingSet {
        let labels = LabelTable::new(["a"]).unwrap();
        let records = (0..20)
            .map(|i| EmbeddingRecord {
                label_id: 0,
                vector: vec![i as f32, 2.0 * i as f32, -(i as f32)],
            })
            .collect();
        EmbeddingSet::new(3, labels, records).unwrap()
    }

    #[test]
    fn pca_rejects_rank_one() {
        assert!(matches!(pca2(&line_set()), Err(Error::DegenerateProjection)));
    }

    #[test]
    fn pca_orders_components() {
        let labels = LabelTable::new(["a"]).unwrap();
        let mut r = rng::seeded(3);
        let records = (0..200)
            .map(|_| EmbeddingRecord {
                label_id: 0,
                vector: vec![
                    (3.0 * (rng::unit_f64(&mut r) - 0.5)) as f32,
                    (rng::unit_f64(&mut r) - 0.5) as f32,
                    (0.1 * (rng::unit_f64(&mut r) - 0.5)) as f32,
                ],
            })
            .collect();
        let set = EmbeddingSet::new(3, labels, records).unwrap();
        let c = pca2(&set).unwrap();
        let var = |k: usize| c.iter().map(|p| p[k] * p[k]).sum::<f64>() / c.len() as f64;
        assert!(var(0) >= var(1));
    }

    #[test]
    fn split_set_validation() {
        let bad = SplitSet {
            splits: vec![SplitSpec {
                seen: vec!["a".into()],
                unseen: vec!["a".into()],
            }],
            test_fraction: 0.5,
        };
        assert!(bad.validate().is_err());
        let empty = SplitSet {
            splits: vec![],
            test_fraction: 0.5,
        };
        assert!(empty.validate().is_err());
    }

    #[test]
    fn sweep_grid_validation() {
        let base = ExperimentConfig::new("x", ["real"]);
        let cfg = SweepConfig {
            shots_grid: vec![10, 10],
            repeats: 1,
            base,
        };
        assert!(cfg.validate().is_err());
    }
}
