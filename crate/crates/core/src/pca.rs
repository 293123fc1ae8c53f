//! Principal component projection of learned embeddings, with a symmetric
//! Jacobi eigensolver so no linear algebra dependency is needed.

use std::fmt::Write as _;

use thiserror::Error;

use crate::graph::PITCH_VOCAB;
use crate::model::{ChordVae, ModelError};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum PcaError {
    #[error("no points to project")]
    NoPoints,
    #[error("point {index} has dimension {found}, expected {expected}")]
    Ragged { index: usize, expected: usize, found: usize },
    #[error("cannot keep {k} components of {d}-dimensional data")]
    BadRank { k: usize, d: usize },
    #[error("{rows} rows cannot support {k} components; need at least k + 1")]
    TooFewRows { rows: usize, k: usize },
    #[error("{0} labels for {1} rows")]
    Labels(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, PcaError>;

/// Eigenvalues in descending order and the matching unit eigenvectors of a
/// symmetric `n x n` matrix (row-major). Each vector's largest-magnitude
/// entry is made positive so the output is deterministic.
pub fn symmetric_eigen<T: Scalar>(matrix: &[T], n: usize) -> (Vec<T>, Vec<Vec<T>>) {
    assert_eq!(matrix.len(), n * n, "matrix is not n x n");
    let mut a = matrix.to_vec();
    let mut v = vec![T::zero(); n * n];
    for i in 0..n {
        v[i * n + i] = T::one();
    }
    let two = T::lit(2.0);
    let total: T = a.iter().map(|&x| x * x).sum();
    for _sweep in 0..100 {
        let mut off = T::zero();
        for p in 0..n {
            for q in p + 1..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off <= total * T::epsilon() * T::epsilon() || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == T::zero() {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (two * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].partial_cmp(&a[i * n + i]).unwrap_or(std::cmp::Ordering::Equal));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = order
        .iter()
        .map(|&j| {
            let mut col: Vec<T> = (0..n).map(|k| v[k * n + j]).collect();
            let lead = col.iter().copied().fold(T::zero(), |m, x| if x.abs() > m.abs() { x } else { m });
            if lead < T::zero() {
                col.iter_mut().for_each(|x| *x = -*x);
            }
            col
        })
        .collect();
    (values, vectors)
}

/// A fitted `k`-component projection together with the projected rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingProjection<T> {
    pub labels: Vec<String>,
    /// One `k`-vector per input row.
    pub coordinates: Vec<Vec<T>>,
    /// Share of the total variance per component, non-increasing.
    pub explained_variance_ratio: Vec<T>,
    /// Sample covariance eigenvalues for the kept components.
    pub explained_variance: Vec<T>,
    pub mean: Vec<T>,
    /// `k` unit vectors, strongest first.
    pub components: Vec<Vec<T>>,
    /// The data spans fewer than `k` dimensions. Components beyond the
    /// rank carry zero variance and arbitrary (orthonormal) directions.
    pub degenerate: bool,
}

/// Centers `rows`, eigendecomposes their covariance and keeps the top `k`
/// components. Needs at least `k + 1` rows.
pub fn embedding_pca<T: Scalar>(labels: Vec<String>, rows: &[Vec<T>], k: usize) -> Result<EmbeddingProjection<T>> {
    if labels.len() != rows.len() {
        return Err(PcaError::Labels(labels.len(), rows.len()));
    }
    let first = rows.first().ok_or(PcaError::NoPoints)?;
    let d = first.len();
    for (index, p) in rows.iter().enumerate() {
        if p.len() != d {
            return Err(PcaError::Ragged { index, expected: d, found: p.len() });
        }
    }
    if k == 0 || k > d {
        return Err(PcaError::BadRank { k, d });
    }
    if rows.len() < k + 1 {
        return Err(PcaError::TooFewRows { rows: rows.len(), k });
    }
    let n = T::from_usize_lossy(rows.len());
    let mut mean = vec![T::zero(); d];
    for p in rows {
        for (m, &x) in mean.iter_mut().zip(p) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let centered: Vec<Vec<T>> = rows.iter().map(|p| p.iter().zip(&mean).map(|(&x, &m)| x - m).collect()).collect();
    let mut cov = vec![T::zero(); d * d];
    for c in &centered {
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += c[i] * c[j];
            }
        }
    }
    let denom = n - T::one();
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= denom;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    let (values, vectors) = symmetric_eigen(&cov, d);
    let top = values.first().copied().unwrap_or_else(T::zero).max(T::zero());
    let tol = top * T::from_usize_lossy(d) * T::lit(1e3) * T::epsilon();
    let values: Vec<T> = values.into_iter().map(|v| if v > tol { v } else { T::zero() }).collect();
    let rank = values.iter().filter(|&&v| v > T::zero()).count();
    let total: T = values.iter().copied().sum();
    let ratio = values[..k].iter().map(|&v| if total > T::zero() { v / total } else { T::zero() }).collect();
    let components: Vec<Vec<T>> = vectors.into_iter().take(k).collect();
    let coordinates = centered
        .iter()
        .map(|c| components.iter().map(|w| w.iter().zip(c).map(|(&a, &b)| a * b).sum()).collect())
        .collect();
    Ok(EmbeddingProjection {
        labels,
        coordinates,
        explained_variance_ratio: ratio,
        explained_variance: values[..k].to_vec(),
        mean,
        components,
        degenerate: rank < k,
    })
}

impl<T: Scalar> EmbeddingProjection<T> {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    /// Coordinates of a new point in the fitted basis.
    pub fn project(&self, point: &[T]) -> Vec<T> {
        self.components
            .iter()
            .map(|c| c.iter().zip(point.iter().zip(&self.mean)).map(|(&w, (&x, &m))| w * (x - m)).sum())
            .collect()
    }

    /// `label,c1..ck` rows.
    pub fn to_csv(&self) -> String {
        coordinates_csv(&self.labels, &self.coordinates).expect("one label per row")
    }
}

/// `label,c1..ck` rows.
pub fn coordinates_csv<T: Scalar>(labels: &[String], coords: &[Vec<T>]) -> Result<String> {
    if labels.len() != coords.len() {
        return Err(PcaError::Labels(labels.len(), coords.len()));
    }
    let k = coords.first().map_or(0, Vec::len);
    let mut out = String::from("label");
    for c in 1..=k {
        let _ = write!(out, ",c{c}");
    }
    out.push('\n');
    for (label, row) in labels.iter().zip(coords) {
        out.push_str(label);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    Ok(out)
}

const NOTE_NAMES: [&str; 12] = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"];

/// `C4` for pitch 60.
pub fn pitch_name(pitch: usize) -> String {
    format!("{}{}", NOTE_NAMES[pitch % 12], pitch as i64 / 12 - 1)
}

/// Duration of the probe triads, in timesteps.
pub const TRIAD_DURATION: usize = 8;

/// Roots of the probe triads, C1 to B8.
pub const TRIAD_ROOTS: std::ops::RangeInclusive<usize> = 24..=119;

/// Chord-encoder embeddings of the major triads `(r, r + 4, r + 7)` held
/// for [`TRIAD_DURATION`] steps, one per root, labelled by root name.
pub fn major_triad_embeddings<T: Scalar>(model: &ChordVae<T>, roots: &[usize], track: usize) -> Result<(Vec<String>, Vec<Vec<T>>)> {
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for &r in roots {
        let notes = [(r, TRIAD_DURATION), (r + 4, TRIAD_DURATION), (r + 7, TRIAD_DURATION)];
        rows.push(model.chord_embedding(&notes, track)?);
        labels.push(pitch_name(r));
    }
    Ok((labels, rows))
}

/// The 128 note rows of the non-drum pitch embedding table, labelled by
/// note name.
pub fn pitch_embeddings<T: Scalar>(model: &ChordVae<T>) -> (Vec<String>, Vec<Vec<T>>) {
    let table = model.embedding_table("pitch").expect("pitch table exists");
    debug_assert_eq!(table.len(), PITCH_VOCAB);
    let rows: Vec<Vec<T>> = table.into_iter().take(crate::pianoroll::N_PITCHES).collect();
    ((0..rows.len()).map(pitch_name).collect(), rows)
}
