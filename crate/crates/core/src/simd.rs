//! Dense dot-product kernel for exact similarity search.
//!
//! Every dot product uses the same arithmetic regardless of how many queries
//! are processed together: four strided partial sums over the body, combined
//! as `(a0 + a1) + (a2 + a3)`, plus a sequential tail. Single-query and
//! blocked multi-query calls therefore return bit-identical values, and so do
//! the AVX2 and portable builds (no fused multiply-add is ever emitted).

const LANES: usize = 4;
const QUERY_BLOCK: usize = 8;
const EXEMPLAR_TILE: usize = 64;

#[inline(always)]
fn dots<const Q: usize>(qs: [&[f64]; Q], e: &[f64]) -> [f64; Q] {
    let d = e.len();
    for q in &qs {
        assert_eq!(q.len(), d);
    }
    let body = d - d % LANES;
    let mut acc = [[0.0f64; LANES]; Q];
    let mut c = 0;
    while c < body {
        let ec: [f64; LANES] = e[c..c + LANES].try_into().unwrap();
        for q in 0..Q {
            let qc: [f64; LANES] = qs[q][c..c + LANES].try_into().unwrap();
            for l in 0..LANES {
                acc[q][l] += qc[l] * ec[l];
            }
        }
        c += LANES;
    }
    let mut out = [0.0; Q];
    for q in 0..Q {
        let mut tail = 0.0;
        for t in body..d {
            tail += qs[q][t] * e[t];
        }
        out[q] = ((acc[q][0] + acc[q][1]) + (acc[q][2] + acc[q][3])) + tail;
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    dots::<1>([a], b)[0]
}

/// `out[j * n + i] = queries[j] . exemplars[i]` for `rows` queries and
/// `n = exemplars.len() / dim` exemplars, both row-major.
pub fn similarities(queries: &[f64], rows: usize, exemplars: &[f64], dim: usize, out: &mut [f64]) {
    assert!(dim > 0);
    assert_eq!(queries.len(), rows * dim);
    assert_eq!(exemplars.len() % dim, 0);
    assert_eq!(out.len(), rows * (exemplars.len() / dim));
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            unsafe { similarities_avx2(queries, rows, exemplars, dim, out) };
            return;
        }
    }
    similarities_impl(queries, rows, exemplars, dim, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn similarities_avx2(queries: &[f64], rows: usize, exemplars: &[f64], dim: usize, out: &mut [f64]) {
    let n = exemplars.len() / dim;
    let query = |j: usize| &queries[j * dim..(j + 1) * dim];
    for tile in (0..n).step_by(EXEMPLAR_TILE) {
        let tile_end = (tile + EXEMPLAR_TILE).min(n);
        let mut j = 0;
        while j + QUERY_BLOCK <= rows {
            let qs: [&[f64]; QUERY_BLOCK] = std::array::from_fn(|t| query(j + t));
            for i in tile..tile_end {
                let r = avx2::dots(qs, &exemplars[i * dim..(i + 1) * dim]);
                for (t, v) in r.into_iter().enumerate() {
                    out[(j + t) * n + i] = v;
                }
            }
            j += QUERY_BLOCK;
        }
        for j in j..rows {
            for i in tile..tile_end {
                out[j * n + i] = avx2::dots([query(j)], &exemplars[i * dim..(i + 1) * dim])[0];
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    use std::arch::x86_64::*;

    use super::LANES;

    /// Unaligned 4-lane load. Goes through an array rather than
    /// `_mm256_loadu_pd`, whose pointer copy carries a precondition check in
    /// builds with debug assertions and triples the kernel time there.
    #[inline(always)]
    fn load(chunk: &[f64]) -> __m256d {
        let a: [f64; LANES] = chunk.try_into().unwrap();
        // SAFETY: __m256d and [f64; 4] have the same size and no invalid bit patterns.
        unsafe { std::mem::transmute::<[f64; LANES], __m256d>(a) }
    }

    /// Same arithmetic as the portable `dots`: one 4-lane accumulator per
    /// query, separate multiply and add, identical final reduction.
    #[inline]
    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn dots<const Q: usize>(qs: [&[f64]; Q], e: &[f64]) -> [f64; Q] {
        let d = e.len();
        for q in &qs {
            assert_eq!(q.len(), d);
        }
        let body = d - d % LANES;
        let mut acc = [_mm256_setzero_pd(); Q];
        let mut c = 0;
        while c < body {
            let ev = load(&e[c..c + LANES]);
            for q in 0..Q {
                let qv = load(&qs[q][c..c + LANES]);
                acc[q] = _mm256_add_pd(acc[q], _mm256_mul_pd(qv, ev));
            }
            c += LANES;
        }
        let mut out = [0.0; Q];
        for q in 0..Q {
            let mut lanes = [0.0f64; LANES];
            _mm256_storeu_pd(lanes.as_mut_ptr(), acc[q]);
            let mut tail = 0.0;
            for t in body..d {
                tail += qs[q][t] * e[t];
            }
            out[q] = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + tail;
        }
        out
    }
}

#[inline(always)]
fn similarities_impl(queries: &[f64], rows: usize, exemplars: &[f64], dim: usize, out: &mut [f64]) {
    let n = exemplars.len() / dim;
    let query = |j: usize| &queries[j * dim..(j + 1) * dim];
    for tile in (0..n).step_by(EXEMPLAR_TILE) {
        let tile_end = (tile + EXEMPLAR_TILE).min(n);
        let mut j = 0;
        while j + QUERY_BLOCK <= rows {
            let qs: [&[f64]; QUERY_BLOCK] = std::array::from_fn(|t| query(j + t));
            for i in tile..tile_end {
                let r = dots(qs, &exemplars[i * dim..(i + 1) * dim]);
                for (t, v) in r.into_iter().enumerate() {
                    out[(j + t) * n + i] = v;
                }
            }
            j += QUERY_BLOCK;
        }
        for j in j..rows {
            for i in tile..tile_end {
                out[j * n + i] = dots([query(j)], &exemplars[i * dim..(i + 1) * dim])[0];
            }
        }
    }
}
