//! Closed- and open-set evaluation: accuracy, per-class precision/recall/F1,
//! ROC AUC, CCR/FPR threshold curves and OSCR.
//!
//! CCR counts seen samples that are correctly classified with confidence
//! strictly above the threshold; FPR counts unseen samples whose confidence
//! is at or above it.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::embedding_store::LabelTable;
use crate::error::{Error, Result};
use crate::knn::Prediction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Seen,
    Unseen,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Seen => "seen",
            Split::Unseen => "unseen",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub sample_id: u64,
    /// `None` is the unknown marker: the sample's class is not known.
    pub true_label: Option<u32>,
    pub split: Split,
    pub prediction: Prediction,
}

impl EvalRecord {
    fn correct(&self) -> bool {
        self.true_label == Some(self.prediction.predicted)
    }
}

fn seen(records: &[EvalRecord]) -> impl Iterator<Item = &EvalRecord> {
    records.iter().filter(|r| r.split == Split::Seen)
}

fn unseen(records: &[EvalRecord]) -> impl Iterator<Item = &EvalRecord> {
    records.iter().filter(|r| r.split == Split::Unseen)
}

/// Correct classification rate at threshold `tau`.
pub fn ccr(records: &[EvalRecord], tau: f64) -> Result<f64> {
    let total = seen(records).count();
    if total == 0 {
        return Err(Error::UndefinedMetric("CCR needs at least one seen record"));
    }
    let hits = seen(records)
        .filter(|r| r.correct() && r.prediction.confidence > tau)
        .count();
    Ok(hits as f64 / total as f64)
}

/// False positive rate at threshold `tau`.
pub fn fpr(records: &[EvalRecord], tau: f64) -> Result<f64> {
    let total = unseen(records).count();
    if total == 0 {
        return Err(Error::UndefinedMetric("FPR needs at least one unseen record"));
    }
    let hits = unseen(records)
        .filter(|r| r.prediction.confidence >= tau)
        .count();
    Ok(hits as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub tau: f64,
    pub ccr: f64,
    pub fpr: f64,
}

/// CCR/FPR samples in descending threshold order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdCurve {
    pub points: Vec<CurvePoint>,
}

impl ThresholdCurve {
    /// Trapezoidal area of CCR over FPR. Points are already in ascending FPR
    /// order because both rates only grow as the threshold drops.
    pub fn area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[0].ccr + w[1].ccr) * 0.5)
            .sum()
    }
}

/// Sweeps the threshold over `+inf`, every distinct confidence, the midpoint
/// between each pair of neighboring confidences, and `-inf`.
///
/// The midpoints matter: with the strict/non-strict inequality pair, a
/// threshold placed exactly on an observed confidence can never reject a seen
/// sample while accepting an unseen one at the same value, so the curve needs
/// a threshold strictly between consecutive values to capture each step.
pub fn threshold_curve(records: &[EvalRecord]) -> Result<ThresholdCurve> {
    let n_seen = seen(records).count();
    let n_unseen = unseen(records).count();
    if n_seen == 0 {
        return Err(Error::UndefinedMetric("CCR needs at least one seen record"));
    }
    if n_unseen == 0 {
        return Err(Error::UndefinedMetric("FPR needs at least one unseen record"));
    }
    let mut correct: Vec<f64> = seen(records)
        .filter(|r| r.correct())
        .map(|r| r.prediction.confidence)
        .collect();
    let mut negatives: Vec<f64> = unseen(records).map(|r| r.prediction.confidence).collect();
    correct.sort_by(f64::total_cmp);
    negatives.sort_by(f64::total_cmp);

    let mut distinct: Vec<f64> = correct.iter().chain(&negatives).copied().collect();
    distinct.sort_by(|a, b| b.total_cmp(a));
    distinct.dedup();

    let mut taus = Vec::with_capacity(2 * distinct.len() + 1);
    taus.push(f64::INFINITY);
    for (i, &c) in distinct.iter().enumerate() {
        if i > 0 {
            taus.push(0.5 * (distinct[i - 1] + c));
        }
        taus.push(c);
    }
    taus.push(f64::NEG_INFINITY);

    let points = taus
        .into_iter()
        .map(|tau| {
            let above = correct.len() - correct.partition_point(|&c| c <= tau);
            let at_or_above = negatives.len() - negatives.partition_point(|&c| c < tau);
            CurvePoint {
                tau,
                ccr: above as f64 / n_seen as f64,
                fpr: at_or_above as f64 / n_unseen as f64,
            }
        })
        .collect();
    Ok(ThresholdCurve { points })
}

/// Open-set classification rate: area under the CCR-vs-FPR curve.
pub fn oscr(records: &[EvalRecord]) -> Result<f64> {
    threshold_curve(records).map(|c| c.area())
}

/// Mann-Whitney estimate of P(positive score > negative score), ties
/// counting one half.
///
/// Computed from integer win/tie counts; a value above one half is derived
/// as one minus the reversed statistic, so `auc(a, b) + auc(b, a) == 1`
/// holds exactly in floating point.
pub fn roc_auc(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::UndefinedMetric(
            "ROC AUC needs at least one positive and one negative score",
        ));
    }
    let doubled_wins = doubled_win_count(positive, negative);
    let pairs2 = 2 * positive.len() as u128 * negative.len() as u128;
    if 2 * doubled_wins > pairs2 {
        Ok(1.0 - (pairs2 - doubled_wins) as f64 / pairs2 as f64)
    } else {
        Ok(doubled_wins as f64 / pairs2 as f64)
    }
}

/// `2 * wins + ties` over all (positive, negative) pairs.
fn doubled_win_count(positive: &[f64], negative: &[f64]) -> u128 {
    let mut neg = negative.to_vec();
    neg.sort_by(f64::total_cmp);
    positive
        .iter()
        .map(|&p| {
            let below = neg.partition_point(|&n| n < p) as u128;
            let not_above = neg.partition_point(|&n| n <= p) as u128;
            2 * below + (not_above - below)
        })
        .sum()
}

/// Open-set AUC with confidence as the score, seen as positives.
pub fn open_set_auc(records: &[EvalRecord]) -> Result<f64> {
    let pos: Vec<f64> = seen(records).map(|r| r.prediction.confidence).collect();
    let neg: Vec<f64> = unseen(records).map(|r| r.prediction.confidence).collect();
    roc_auc(&pos, &neg)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// Zero whenever a denominator is zero.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }

    fn mean<'a>(items: impl IntoIterator<Item = &'a Prf>) -> Option<Prf> {
        let items: Vec<&Prf> = items.into_iter().collect();
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        Some(Prf {
            precision: items.iter().map(|p| p.precision).sum::<f64>() / n,
            recall: items.iter().map(|p| p.recall).sum::<f64>() / n,
            f1: items.iter().map(|p| p.f1).sum::<f64>() / n,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub seen: bool,
    pub support: usize,
    #[serde(flatten)]
    pub prf: Prf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Accuracy over seen-partition records.
    pub closed_accuracy: Option<f64>,
    /// Accuracy over every record with a known label.
    pub overall_accuracy: Option<f64>,
    pub auc: Option<f64>,
    pub oscr: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
    pub macro_seen: Option<Prf>,
    pub macro_unseen: Option<Prf>,
    pub records: usize,
}

impl MetricsReport {
    /// Flat scalar view used for CSV rows and split aggregation. Absent
    /// metrics are left out.
    pub fn scalars(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: Option<f64>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        };
        put("closed_accuracy", self.closed_accuracy);
        put("overall_accuracy", self.overall_accuracy);
        put("auc", self.auc);
        put("oscr", self.oscr);
        for (name, prf) in [("macro_seen", self.macro_seen), ("macro_unseen", self.macro_unseen)] {
            put(&format!("{name}_precision"), prf.map(|p| p.precision));
            put(&format!("{name}_recall"), prf.map(|p| p.recall));
            put(&format!("{name}_f1"), prf.map(|p| p.f1));
        }
        m
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Header line and value line, columns in [`Self::scalars`] order.
    pub fn csv_row(&self) -> (String, String) {
        let s = self.scalars();
        let header = std::iter::once("records".to_string())
            .chain(s.keys().cloned())
            .collect::<Vec<_>>()
            .join(",");
        let values = std::iter::once(self.records.to_string())
            .chain(s.values().map(|v| v.to_string()))
            .collect::<Vec<_>>()
            .join(",");
        (header, values)
    }
}

/// Full metrics for a set of evaluation records.
///
/// Per-class scores come from the multiclass confusion of predicted versus
/// true labels over every label in `labels`; a record with an unknown true
/// label counts against its predicted class. `macro_seen` averages the
/// classes in `seen_ids`, `macro_unseen` every other class in the table.
/// AUC and OSCR are reported only when both partitions are present.
pub fn report(records: &[EvalRecord], labels: &LabelTable, seen_ids: &[u32]) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::UndefinedMetric("report needs at least one record"));
    }
    let classes = labels.len();
    let seen_set: BTreeSet<u32> = seen_ids.iter().copied().collect();
    if let Some(&bad) = seen_set.iter().find(|&&id| id as usize >= classes) {
        return Err(Error::UnknownLabel(format!("id {bad}")));
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    let mut support = vec![0usize; classes];
    for r in records {
        let p = r.prediction.predicted as usize;
        if p >= classes {
            return Err(Error::LabelOutOfRange {
                record: r.sample_id as usize,
                label_id: p as u32,
                labels: classes,
            });
        }
        match r.true_label {
            Some(t) if t == p as u32 => {
                tp[p] += 1;
                support[p] += 1;
            }
            Some(t) => {
                let t = t as usize;
                if t >= classes {
                    return Err(Error::LabelOutOfRange {
                        record: r.sample_id as usize,
                        label_id: t as u32,
                        labels: classes,
                    });
                }
                fp[p] += 1;
                fn_[t] += 1;
                support[t] += 1;
            }
            None => fp[p] += 1,
        }
    }
    let per_class: Vec<ClassMetrics> = (0..classes)
        .map(|c| ClassMetrics {
            label: labels.names()[c].clone(),
            seen: seen_set.contains(&(c as u32)),
            support: support[c],
            prf: Prf::from_counts(tp[c], fp[c], fn_[c]),
        })
        .collect();
    let macro_seen = Prf::mean(per_class.iter().filter(|m| m.seen).map(|m| &m.prf));
    let macro_unseen = Prf::mean(per_class.iter().filter(|m| !m.seen).map(|m| &m.prf));

    let accuracy = |it: &mut dyn Iterator<Item = &EvalRecord>| {
        let (mut n, mut hit) = (0usize, 0usize);
        for r in it {
            n += 1;
            hit += r.correct() as usize;
        }
        (n > 0).then(|| hit as f64 / n as f64)
    };
    let closed_accuracy = accuracy(&mut seen(records));
    let overall_accuracy = accuracy(&mut records.iter().filter(|r| r.true_label.is_some()));

    let both = seen(records).next().is_some() && unseen(records).next().is_some();
    let (auc, oscr_value) = if both {
        (Some(open_set_auc(records)?), Some(oscr(records)?))
    } else {
        (None, None)
    };
    Ok(MetricsReport {
        closed_accuracy,
        overall_accuracy,
        auc,
        oscr: oscr_value,
        per_class,
        macro_seen,
        macro_unseen,
        records: records.len(),
    })
}

/// Real-versus-synthetic accuracy for one generator: the generator's records
/// plus every real record, with predictions collapsed to real / not real.
pub fn detection_accuracy(records: &[EvalRecord], real_id: u32, generator_id: u32) -> Result<f64> {
    let pool: Vec<&EvalRecord> = records
        .iter()
        .filter(|r| r.true_label == Some(real_id) || r.true_label == Some(generator_id))
        .collect();
    if pool.is_empty() {
        return Err(Error::UndefinedMetric("no records for this generator or real class"));
    }
    let hits = pool
        .iter()
        .filter(|r| (r.true_label == Some(real_id)) == (r.prediction.predicted == real_id))
        .count();
    Ok(hits as f64 / pool.len() as f64)
}

/// Detection AUC with the synthetic-class posterior `1 - P(real)` as the
/// score and synthetic records as positives.
pub fn detection_auc(records: &[EvalRecord], real_id: u32) -> Result<f64> {
    let score = |r: &EvalRecord| 1.0 - r.prediction.posterior[real_id as usize];
    let labeled = records.iter().filter(|r| r.true_label.is_some());
    let (real, fake): (Vec<&EvalRecord>, Vec<&EvalRecord>) =
        labeled.partition(|r| r.true_label == Some(real_id));
    let pos: Vec<f64> = fake.into_iter().map(score).collect();
    let neg: Vec<f64> = real.into_iter().map(score).collect();
    roc_auc(&pos, &neg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some(MeanStd {
        mean,
        std: var.sqrt(),
    })
}

/// Metric-wise mean report and population standard deviations across
/// reports. A metric contributes only from the reports where it is present;
/// per-class rows are averaged by label name.
pub fn aggregate(reports: &[MetricsReport]) -> Result<(MetricsReport, BTreeMap<String, f64>)> {
    if reports.is_empty() {
        return Err(Error::UndefinedMetric("aggregation needs at least one report"));
    }
    let collect = |f: &dyn Fn(&MetricsReport) -> Option<f64>| -> Option<MeanStd> {
        let v: Vec<f64> = reports.iter().filter_map(f).collect();
        mean_std(&v)
    };
    let mean_of = |f: &dyn Fn(&MetricsReport) -> Option<f64>| collect(f).map(|m| m.mean);
    let prf_mean = |f: &dyn Fn(&MetricsReport) -> Option<Prf>| -> Option<Prf> {
        Some(Prf {
            precision: mean_of(&|r| f(r).map(|p| p.precision))?,
            recall: mean_of(&|r| f(r).map(|p| p.recall))?,
            f1: mean_of(&|r| f(r).map(|p| p.f1))?,
        })
    };

    let mut labels: Vec<(String, bool)> = Vec::new();
    for r in reports {
        for c in &r.per_class {
            if !labels.iter().any(|(l, _)| l == &c.label) {
                labels.push((c.label.clone(), c.seen));
            }
        }
    }
    let per_class = labels
        .into_iter()
        .map(|(label, seen)| {
            let rows: Vec<&ClassMetrics> = reports
                .iter()
                .flat_map(|r| r.per_class.iter().filter(|c| c.label == label))
                .collect();
            let n = rows.len() as f64;
            ClassMetrics {
                seen,
                support: (rows.iter().map(|c| c.support).sum::<usize>() as f64 / n).round() as usize,
                prf: Prf::mean(rows.iter().map(|c| &c.prf)).unwrap_or_default(),
                label,
            }
        })
        .collect();

    let mean = MetricsReport {
        closed_accuracy: mean_of(&|r| r.closed_accuracy),
        overall_accuracy: mean_of(&|r| r.overall_accuracy),
        auc: mean_of(&|r| r.auc),
        oscr: mean_of(&|r| r.oscr),
        per_class,
        macro_seen: prf_mean(&|r| r.macro_seen),
        macro_unseen: prf_mean(&|r| r.macro_unseen),
        records: reports.iter().map(|r| r.records).sum::<usize>() / reports.len(),
    };

    let mut keys = BTreeSet::new();
    for r in reports {
        keys.extend(r.scalars().into_keys());
    }
    let stddev = keys
        .into_iter()
        .filter_map(|k| {
            let v: Vec<f64> = reports.iter().filter_map(|r| r.scalars().get(&k).copied()).collect();
            mean_std(&v).map(|m| (k, m.std))
        })
        .collect();
    Ok((mean, stddev))
}

/// Writes evaluation records as CSV: `sample_id, true_label, partition,
/// predicted_label, confidence`, then one `p_<label>` column per class.
pub fn write_records_csv<W: Write>(records: &[EvalRecord], labels: &LabelTable, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec![
        "sample_id".to_string(),
        "true_label".into(),
        "partition".into(),
        "predicted_label".into(),
        "confidence".into(),
    ];
    header.extend(labels.names().iter().map(|n| format!("p_{n}")));
    w.write_record(&header).map_err(csv_err)?;
    let name = |id: u32| -> Result<&str> {
        labels
            .name(id)
            .ok_or_else(|| Error::UnknownLabel(format!("id {id}")))
    };
    for r in records {
        if r.prediction.posterior.len() != labels.len() {
            return Err(Error::Dimension {
                expected: labels.len(),
                found: r.prediction.posterior.len(),
            });
        }
        let mut row = vec![
            r.sample_id.to_string(),
            match r.true_label {
                Some(t) => name(t)?.to_string(),
                None => UNKNOWN.to_string(),
            },
            r.split.as_str().to_string(),
            name(r.prediction.predicted)?.to_string(),
            r.prediction.confidence.to_string(),
        ];
        row.extend(r.prediction.posterior.iter().map(|p| p.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Marker written in the `true_label` column for samples of unknown class.
pub const UNKNOWN: &str = "<unknown>";

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line: 0,
            message: format!("{other:?}"),
        },
    }
}

/// Parses records written by [`write_records_csv`]; the label table is
/// recovered from the posterior column headers.
pub fn read_records_csv<R: Read>(source: R) -> Result<(Vec<EvalRecord>, LabelTable)> {
    let mut rd = csv::Reader::from_reader(source);
    let header = rd.headers().map_err(csv_err)?.clone();
    let fixed = ["sample_id", "true_label", "partition", "predicted_label", "confidence"];
    if header.len() < fixed.len() || header.iter().zip(fixed).any(|(a, b)| a != b) {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected leading columns {fixed:?}"),
        });
    }
    let names: Vec<String> = header
        .iter()
        .skip(fixed.len())
        .map(|h| {
            h.strip_prefix("p_").map(str::to_string).ok_or_else(|| Error::Parse {
                line: 1,
                message: format!("posterior column {h:?} lacks the p_ prefix"),
            })
        })
        .collect::<Result<_>>()?;
    let labels = LabelTable::new(names)?;
    let mut records = Vec::new();
    for (i, row) in rd.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(csv_err)?;
        let perr = |message: String| Error::Parse { line, message };
        let num = |s: &str| s.parse::<f64>().map_err(|e| perr(format!("{s:?}: {e}")));
        let label = |s: &str| labels.id(s).ok_or_else(|| perr(format!("unknown label {s:?}")));
        let sample_id = row[0].parse::<u64>().map_err(|e| perr(e.to_string()))?;
        let true_label = if &row[1] == UNKNOWN {
            None
        } else {
            Some(label(&row[1])?)
        };
        let split = match &row[2] {
            "seen" => Split::Seen,
            "unseen" => Split::Unseen,
            other => return Err(perr(format!("bad partition {other:?}"))),
        };
        let predicted = label(&row[3])?;
        let confidence = num(&row[4])?;
        let posterior = row.iter().skip(5).map(num).collect::<Result<Vec<_>>>()?;
        if posterior.len() != labels.len() {
            return Err(perr("posterior column count mismatch".into()));
        }
        records.push(EvalRecord {
            sample_id,
            true_label,
            split,
            prediction: Prediction {
                posterior,
                predicted,
                confidence,
            },
        });
    }
    Ok((records, labels))
}
