//! Supervised contrastive loss over a labeled batch of latent vectors.
//!
//! For anchor `i` with positives `P(i)` (same label, excluding `i`) and
//! comparison set `A(i)` (every other row), with `s_ia = z_i . z_a / tau`:
//!
//! ```text
//! l_i = log sum_{a in A(i)} exp(s_ia) - mean_{p in P(i)} s_ip
//! L   = (1 / N') sum_{i : |P(i)| > 0} l_i
//! ```
//!
//! Anchors without positives are skipped and `N'` counts the anchors that
//! contribute. Every reduction runs in ascending index order on one thread,
//! so repeated calls are bit-identical.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Norm below which a row is treated as degenerate.
pub const MIN_NORM: f64 = 1e-12;
/// Allowed deviation from unit norm for a batch flagged as normalized.
pub const UNIT_NORM_TOL: f64 = 1e-9;
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Temperature {
    value: f64,
    #[serde(default)]
    learnable: bool,
}

impl Temperature {
    pub fn new(value: f64, learnable: bool) -> Result<Self> {
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive and finite, got {value}"
            )));
        }
        Ok(Temperature { value, learnable })
    }

    pub fn fixed(value: f64) -> Result<Self> {
        Self::new(value, false)
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn learnable(&self) -> bool {
        self.learnable
    }

    pub(crate) fn validate(&self) -> Result<()> {
        Self::new(self.value, self.learnable).map(|_| ())
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature {
            value: DEFAULT_TEMPERATURE,
            learnable: false,
        }
    }
}

/// `N x d` latent rows with one class id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    z: Array2<f64>,
    labels: Vec<u32>,
    normalized: bool,
}

impl LabeledBatch {
    pub fn new(z: Array2<f64>, labels: Vec<u32>) -> Result<Self> {
        let z = if z.is_standard_layout() {
            z
        } else {
            z.as_standard_layout().into_owned()
        };
        let (n, d) = z.dim();
        if n < 2 {
            return Err(Error::Validation(format!(
                "a batch needs at least 2 rows, got {n}"
            )));
        }
        if d == 0 {
            return Err(Error::Validation("latent dimension must be positive".into()));
        }
        if labels.len() != n {
            return Err(Error::Dimension {
                expected: n,
                found: labels.len(),
            });
        }
        if let Some(pos) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                record: pos / d,
                coord: pos % d,
            });
        }
        Ok(LabeledBatch {
            z,
            labels,
            normalized: false,
        })
    }

    /// Builds a batch from rows that are already unit-norm, checking each to
    /// within [`UNIT_NORM_TOL`].
    pub fn new_normalized(z: Array2<f64>, labels: Vec<u32>) -> Result<Self> {
        let mut batch = Self::new(z, labels)?;
        for (row, r) in batch.z.rows().into_iter().enumerate() {
            let norm = row_norm(r.as_slice().unwrap());
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::NotNormalized { row, norm });
            }
        }
        batch.normalized = true;
        Ok(batch)
    }

    pub fn z(&self) -> ArrayView2<'_, f64> {
        self.z.view()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[inline]
pub(crate) fn row_norm(row: &[f64]) -> f64 {
    row.iter().fold(0.0, |acc, v| acc + v * v).sqrt()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Scales every row of `x` to unit length and returns the original norms,
/// which [`normalize_backward`] needs.
pub fn normalize_rows(x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut out = x.as_standard_layout().into_owned();
    let mut norms = Vec::with_capacity(x.nrows());
    for (row, mut r) in out.rows_mut().into_iter().enumerate() {
        let norm = row_norm(r.as_slice().unwrap());
        if !(norm > MIN_NORM) {
            return Err(Error::DegenerateVector { row });
        }
        r.mapv_inplace(|v| v / norm);
        norms.push(norm);
    }
    Ok((out, norms))
}

/// Jacobian-transpose action of row normalization: given `u = x / |x|` and
/// an upstream gradient `g` with respect to `u`, returns
/// `(g - u (u . g)) / |x|` row by row.
pub fn normalize_backward(
    unit: ArrayView2<'_, f64>,
    norms: &[f64],
    upstream: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let mut out = upstream.as_standard_layout().into_owned();
    let unit = unit.as_standard_layout();
    for ((mut g, u), &norm) in out
        .axis_iter_mut(Axis(0))
        .zip(unit.axis_iter(Axis(0)))
        .zip(norms)
    {
        let proj = dot(g.as_slice().unwrap(), u.as_slice().unwrap());
        for (gv, uv) in g.iter_mut().zip(u.iter()) {
            *gv = (*gv - uv * proj) / norm;
        }
    }
    out
}

pub fn l2_normalize(batch: &LabeledBatch) -> Result<LabeledBatch> {
    let (z, _) = normalize_rows(batch.z.view())?;
    Ok(LabeledBatch {
        z,
        labels: batch.labels.clone(),
        normalized: true,
    })
}

#[derive(Debug, Clone)]
pub struct SupConGrad {
    /// `dL/dz`, same shape as the batch.
    pub wrt_z: Array2<f64>,
    /// `dL/dtau`, present only for a learnable temperature.
    pub wrt_tau: Option<f64>,
}

/// Loss value and (optionally) its gradients for arbitrary finite rows.
#[derive(Debug, Clone)]
pub struct SupConEval {
    pub loss: f64,
    pub grad: Option<SupConGrad>,
    /// Number of anchors with at least one positive.
    pub anchors: usize,
}

pub fn supcon_loss(batch: &LabeledBatch, tau: Temperature) -> Result<f64> {
    require_normalized(batch)?;
    supcon_eval(batch.z.view(), &batch.labels, tau, false).map(|e| e.loss)
}

pub fn supcon_grad(batch: &LabeledBatch, tau: Temperature) -> Result<SupConGrad> {
    require_normalized(batch)?;
    let eval = supcon_eval(batch.z.view(), &batch.labels, tau, true)?;
    Ok(eval.grad.expect("gradient requested"))
}

fn require_normalized(batch: &LabeledBatch) -> Result<()> {
    if batch.normalized {
        return Ok(());
    }
    let row = 0;
    Err(Error::NotNormalized {
        row,
        norm: row_norm(batch.z.row(row).as_slice().unwrap()),
    })
}

/// Evaluates the loss directly on `z` without requiring unit rows. This is
/// the kernel behind [`supcon_loss`] and [`supcon_grad`]; training calls it
/// on freshly normalized rows, and gradient checks call it on perturbed ones.
pub fn supcon_eval(
    z: ArrayView2<'_, f64>,
    labels: &[u32],
    tau: Temperature,
    with_grad: bool,
) -> Result<SupConEval> {
    let (n, d) = z.dim();
    if labels.len() != n {
        return Err(Error::Dimension {
            expected: n,
            found: labels.len(),
        });
    }
    let t = tau.value();
    let z = z.as_standard_layout();
    let flat = z.as_slice().expect("standard layout");
    let rows: Vec<&[f64]> = flat.chunks_exact(d.max(1)).take(n).collect();

    // s[i][a] = z_i . z_a / tau
    let mut sims = vec![0.0; n * n];
    for i in 0..n {
        for a in i..n {
            let s = dot(rows[i], rows[a]) / t;
            sims[i * n + a] = s;
            sims[a * n + i] = s;
        }
    }

    let positives: Vec<usize> = (0..n)
        .map(|i| (0..n).filter(|&p| p != i && labels[p] == labels[i]).count())
        .collect();
    let anchors = positives.iter().filter(|&&c| c > 0).count();
    if anchors == 0 {
        return Err(Error::NoPositivePairs);
    }
    let inv_anchors = 1.0 / anchors as f64;

    let mut loss = 0.0;
    let mut grad_z = with_grad.then(|| Array2::<f64>::zeros((n, d)));
    let mut grad_tau = 0.0;
    let mut probs = vec![0.0; n];

    for i in 0..n {
        if positives[i] == 0 {
            continue;
        }
        let row = &sims[i * n..(i + 1) * n];
        let max = (0..n)
            .filter(|&a| a != i)
            .map(|a| row[a])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum_exp = 0.0;
        for a in 0..n {
            if a != i {
                let e = (row[a] - max).exp();
                probs[a] = e;
                sum_exp += e;
            }
        }
        let lse = max + sum_exp.ln();
        let inv_pos = 1.0 / positives[i] as f64;
        let mut pos_sum = 0.0;
        for p in 0..n {
            if p != i && labels[p] == labels[i] {
                pos_sum += row[p];
            }
        }
        loss += lse - pos_sum * inv_pos;

        if let Some(g) = grad_z.as_mut() {
            // dl_i/ds_ia = softmax_a - [a in P(i)] / |P(i)|
            for a in 0..n {
                if a == i {
                    continue;
                }
                let target = if labels[a] == labels[i] { inv_pos } else { 0.0 };
                let ds = probs[a] / sum_exp - target;
                let coef = ds * inv_anchors / t;
                for c in 0..d {
                    g[[i, c]] += coef * rows[a][c];
                    g[[a, c]] += coef * rows[i][c];
                }
                grad_tau -= ds * inv_anchors * row[a] / t;
            }
        }
    }

    let grad = grad_z.map(|wrt_z| SupConGrad {
        wrt_z,
        wrt_tau: tau.learnable().then_some(grad_tau),
    });
    Ok(SupConEval {
        loss: loss * inv_anchors,
        grad,
        anchors,
    })
}
