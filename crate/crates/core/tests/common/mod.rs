#![allow(dead_code)]

use embattr::embedding_store::{EmbeddingRecord, EmbeddingSet, LabelTable};
use embattr::knn::{Prediction, SupportSet};
use embattr::metrics::{EvalRecord, Split};
use embattr::rng::{self, SplitMix64};
use ndarray::Array2;

pub fn uniform(r: &mut SplitMix64, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng::unit_f64(r)
}

pub fn int_in(r: &mut SplitMix64, lo: usize, hi: usize) -> usize {
    lo + rng::index_below(r, hi - lo + 1)
}

/// Random labels over `classes` classes, patched so at least one pair
/// shares a label.
pub fn random_labels(r: &mut SplitMix64, n: usize, classes: usize) -> Vec<u32> {
    let mut labels: Vec<u32> = (0..n).map(|_| rng::index_below(r, classes) as u32).collect();
    let mut seen = vec![false; classes];
    if labels.iter().all(|&l| !std::mem::replace(&mut seen[l as usize], true)) {
        labels[1] = labels[0];
    }
    labels
}

pub fn random_matrix(r: &mut SplitMix64, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || uniform(r, -1.0, 1.0))
}

pub fn unit_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.mapv_inplace(|v| v / norm);
    }
    out
}

/// Supervised contrastive loss evaluated term by term, straight from its
/// definition: for each anchor with positives, the average over positives
/// of `-log(exp(s_ip) / sum_{a != i} exp(s_ia))`, averaged over anchors.
pub fn supcon_oracle(z: &Array2<f64>, labels: &[u32], tau: f64) -> f64 {
    let n = z.nrows();
    let sim = |i: usize, j: usize| -> f64 {
        let mut s = 0.0;
        for c in 0..z.ncols() {
            s += z[[i, c]] * z[[j, c]];
        }
        s / tau
    };
    let mut total = 0.0;
    let mut anchors = 0usize;
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        anchors += 1;
        let denom: f64 = (0..n).filter(|&a| a != i).map(|a| sim(i, a).exp()).sum();
        let mut term = 0.0;
        for &p in &pos {
            term += -(sim(i, p).exp() / denom).ln();
        }
        total += term / pos.len() as f64;
    }
    total / anchors as f64
}

/// Unit-row batch with N in 4..=32, d in 2..=8 and 2..=5 classes.
pub fn random_batch(seed: u64) -> (Array2<f64>, Vec<u32>) {
    let mut r = rng::seeded(seed);
    let n = int_in(&mut r, 4, 32);
    let d = int_in(&mut r, 2, 8);
    let classes = int_in(&mut r, 2, 5);
    let labels = random_labels(&mut r, n, classes);
    (unit_rows(&random_matrix(&mut r, n, d)), labels)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// Worst entry-wise error of `a` against `b`, scaled so that 1.0 is the
/// tolerance `max(rel * max(|a_i|, |b_i|), abs)`.
pub fn tolerance_ratio(a: &[f64], b: &[f64], rel: f64, abs: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / (rel * x.abs().max(y.abs())).max(abs))
        .fold(0.0, f64::max)
}

/// Central differences of `f` around `x` with step `h`.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|k| {
            p[k] = x[k] + h;
            let up = f(&p);
            p[k] = x[k] - h;
            let down = f(&p);
            p[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn labels(n: usize) -> LabelTable {
    LabelTable::new((0..n).map(|i| format!("c{i}"))).unwrap()
}

pub fn set_from(dim: usize, classes: usize, rows: Vec<(u32, Vec<f32>)>) -> EmbeddingSet {
    let records = rows
        .into_iter()
        .map(|(label_id, vector)| EmbeddingRecord { label_id, vector })
        .collect();
    EmbeddingSet::new(dim, labels(classes), records).unwrap()
}

/// k-NN by full sort: cosine similarity against every exemplar, stable
/// sort by descending similarity (ties keep index order), majority vote with
/// ties going to the larger similarity sum, then the smaller label.
/// Returns `(posterior, predicted)`.
pub fn knn_oracle(
    exemplars: &[Vec<f32>],
    exemplar_labels: &[u32],
    classes: usize,
    query: &[f32],
    k: usize,
) -> (Vec<f64>, u32) {
    let unit = |v: &[f32]| -> Vec<f64> {
        let v: Vec<f64> = v.iter().map(|&x| x as f64).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    };
    let q = unit(query);
    let mut scored: Vec<(f64, usize)> = exemplars
        .iter()
        .enumerate()
        .map(|(i, e)| (unit(e).iter().zip(&q).map(|(a, b)| a * b).sum(), i))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut votes = vec![0usize; classes];
    let mut sums = vec![0.0; classes];
    for &(s, i) in scored.iter().take(k) {
        votes[exemplar_labels[i] as usize] += 1;
        sums[exemplar_labels[i] as usize] += s;
    }
    let best = (0..classes)
        .max_by(|&a, &b| {
            votes[a]
                .cmp(&votes[b])
                .then(sums[a].partial_cmp(&sums[b]).unwrap())
                .then(b.cmp(&a))
        })
        .unwrap();
    let posterior = votes.iter().map(|&v| v as f64 / k as f64).collect();
    (posterior, best as u32)
}

pub fn record(id: u64, truth: Option<u32>, split: Split, predicted: u32, confidence: f64) -> EvalRecord {
    EvalRecord {
        sample_id: id,
        true_label: truth,
        split,
        prediction: Prediction {
            posterior: vec![],
            predicted,
            confidence,
        },
    }
}

/// Random open-set records with confidences on the lattice `{0, 1/k, .., 1}`
/// (plus some continuous values) so that ties between seen and unseen
/// samples are common.
pub fn random_records(r: &mut SplitMix64, n: usize) -> Vec<EvalRecord> {
    let k = 11.0;
    let mut out: Vec<EvalRecord> = (0..n)
        .map(|i| {
            let conf = if rng::unit_f64(r) < 0.7 {
                (rng::index_below(r, 12) as f64) / k
            } else {
                rng::unit_f64(r)
            };
            let truth = rng::index_below(r, 3) as u32;
            let predicted = if rng::unit_f64(r) < 0.6 { truth } else { (truth + 1) % 3 };
            let split = if rng::unit_f64(r) < 0.5 { Split::Seen } else { Split::Unseen };
            record(i as u64, Some(truth), split, predicted, conf)
        })
        .collect();
    out[0].split = Split::Seen;
    out[n - 1].split = Split::Unseen;
    out
}

/// Exhaustive OSCR: evaluates CCR and FPR by direct counting at every
/// observed confidence, every midpoint between neighbors, and thresholds
/// beyond both ends; orders the operating points by FPR (then CCR) and
/// integrates the piecewise-linear curve exactly.
pub fn oscr_oracle(records: &[EvalRecord]) -> f64 {
    let seen: Vec<&EvalRecord> = records.iter().filter(|r| r.split == Split::Seen).collect();
    let unseen: Vec<&EvalRecord> = records.iter().filter(|r| r.split == Split::Unseen).collect();
    let mut values: Vec<f64> = records.iter().map(|r| r.prediction.confidence).collect();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values.dedup();
    let mut taus = vec![values[0] - 1.0, values[values.len() - 1] + 1.0];
    for w in values.windows(2) {
        taus.push((w[0] + w[1]) / 2.0);
    }
    taus.extend(&values);
    let mut pts: Vec<(f64, f64)> = taus
        .iter()
        .map(|&t| {
            let c = seen
                .iter()
                .filter(|r| r.true_label == Some(r.prediction.predicted) && r.prediction.confidence > t)
                .count() as f64
                / seen.len() as f64;
            let f = unseen.iter().filter(|r| r.prediction.confidence >= t).count() as f64 / unseen.len() as f64;
            (f, c)
        })
        .collect();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

pub mod cli {
    use std::path::{Path, PathBuf};
    use std::process::{Command, Output};

    use embattr::harness::BENCHMARK_CLASSES;
    use embattr::trainer::ClusterSpec;

    pub fn embattr(args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_embattr"))
            .args(args)
            .output()
            .expect("spawn embattr")
    }

    pub fn ok(args: &[&str]) {
        let out = embattr(args);
        assert!(
            out.status.success(),
            "embattr {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }

    fn p(path: &Path) -> &str {
        path.to_str().unwrap()
    }

    /// Runs every subcommand once into `dir` and returns the output files.
    pub fn pipeline(dir: &Path, seed: u64) -> Vec<PathBuf> {
        let spec = |s: u64| {
            ClusterSpec::axis_aligned(BENCHMARK_CLASSES.len(), 32, 5.0, 0.1, 120, s)
                .unwrap()
                .with_names(BENCHMARK_CLASSES)
        };
        let f = |name: &str| dir.join(name);
        std::fs::write(f("train.json"), serde_json::to_string(&spec(seed)).unwrap()).unwrap();
        std::fs::write(f("test.json"), serde_json::to_string(&spec(seed + 1000)).unwrap()).unwrap();
        ok(&["make-clusters", "--spec", p(&f("train.json")), "--out", p(&f("train.embs"))]);
        ok(&["make-clusters", "--spec", p(&f("test.json")), "--out", p(&f("test.embs"))]);
        let seed_s = seed.to_string();
        ok(&[
            "train-head", "--train", p(&f("train.embs")), "--classes", "real,ADM,SD_1.4,SD_1.5",
            "--out", p(&f("head.bin")), "--epochs", "5", "--seed", &seed_s,
            "--history", p(&f("history.json")),
        ]);
        ok(&[
            "build-support", "--data", p(&f("test.embs")), "--head", p(&f("head.bin")),
            "--shots", "20", "--k", "11", "--seed", &seed_s, "--out", p(&f("support.embs")),
        ]);
        ok(&[
            "classify", "--support", p(&f("support.embs")), "--head", p(&f("head.bin")),
            "--queries", p(&f("test.embs")), "--seen", "real,ADM,SD_1.4,SD_1.5",
            "--out", p(&f("records.csv")),
        ]);
        ok(&[
            "eval", "--records", p(&f("records.csv")), "--seen", "real,ADM,SD_1.4,SD_1.5",
            "--out", p(&f("report.json")), "--csv", p(&f("report.csv")),
        ]);
        ok(&["pca2", "--data", p(&f("test.embs")), "--out", p(&f("pca.csv"))]);

        let splits = serde_json::json!({
            "base": {"name": "cli", "train_label_names": ["real"], "shots_per_class": 10, "seed": seed,
                     "train": {"epochs": 3, "seed": seed}},
            "splits": [
                {"seen": ["real", "ADM", "VQDM"], "unseen": ["Glide", "BigGan"]},
                {"seen": ["real", "Wukong"], "unseen": ["SD_1.4"]}
            ]
        });
        std::fs::write(f("splits.json"), splits.to_string()).unwrap();
        ok(&["splits", "--data", p(&f("train.embs")), "--config", p(&f("splits.json")), "--out", p(&f("splits"))]);

        let sweep = serde_json::json!({
            "train": "train.embs", "test": "test.embs", "shots_grid": [5, 10, 200], "repeats": 2,
            "base": {"name": "sweep", "train_label_names": ["real", "ADM"], "seed": seed,
                     "train": {"epochs": 3, "seed": seed}}
        });
        std::fs::write(f("sweep.json"), sweep.to_string()).unwrap();
        ok(&["sweep", "--config", p(&f("sweep.json")), "--out", p(&f("sweep.csv"))]);

        let mut files = vec![
            "train.embs", "test.embs", "head.bin", "history.json", "support.embs", "records.csv",
            "report.json", "report.csv", "pca.csv", "sweep.csv",
        ]
        .into_iter()
        .map(f)
        .collect::<Vec<_>>();
        let mut split_files: Vec<PathBuf> = std::fs::read_dir(f("splits"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        split_files.sort();
        files.extend(split_files);
        files
    }
}

pub struct Instance {
    pub exemplars: Vec<Vec<f32>>,
    pub labels: Vec<u32>,
    pub classes: usize,
    pub queries: Vec<Vec<f32>>,
    pub k: usize,
}

pub fn knn_instance(seed: u64) -> Instance {
    let mut r = rng::seeded(seed);
    let d = int_in(&mut r, 1, 32);
    let classes = int_in(&mut r, 2, 6);
    let n = int_in(&mut r, 11, 500);
    let k = [1, 5, 11][rng::index_below(&mut r, 3)];
    let draw = |r: &mut SplitMix64| -> Vec<f32> { (0..d).map(|_| uniform(r, -1.0, 1.0) as f32).collect() };
    let mut exemplars: Vec<Vec<f32>> = (0..n).map(|_| draw(&mut r)).collect();
    // Exact duplicates create similarity ties.
    for _ in 0..n / 10 {
        let src = rng::index_below(&mut r, n);
        let dst = rng::index_below(&mut r, n);
        exemplars[dst] = exemplars[src].clone();
    }
    let labels: Vec<u32> = (0..n).map(|_| rng::index_below(&mut r, classes) as u32).collect();
    let mut queries: Vec<Vec<f32>> = (0..20).map(|_| draw(&mut r)).collect();
    queries.push(exemplars[0].clone());
    Instance {
        exemplars,
        labels,
        classes,
        queries,
        k,
    }
}

pub fn support_of(inst: &Instance) -> SupportSet {
    let d = inst.exemplars[0].len();
    let set = set_from(
        d,
        inst.classes,
        inst.labels.iter().copied().zip(inst.exemplars.iter().cloned()).collect(),
    );
    SupportSet::from_set(&set, inst.k).unwrap()
}

