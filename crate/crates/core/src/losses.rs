//! Loss functions with analytic gradients.
//!
//! Features are passed as a row-major `[rows, dim]` slice. Gradients are with
//! respect to those rows, so callers can seed a backward pass through the
//! networks that produced them.

use ppfer_nn::Scalar;

use crate::batch_builder::{triplet_views, BceLabelVector};
use crate::error::{PpError, Result};

/// Values of the anonymizer objective for one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts<T> {
    pub total: T,
    pub l_tri: T,
    pub l_bce: T,
}

fn rows_of<T>(features: &[T], dim: usize) -> Result<usize> {
    if dim == 0 || features.len() % dim != 0 {
        return Err(PpError::Domain(format!(
            "feature buffer of length {} is not a multiple of dimension {dim}",
            features.len()
        )));
    }
    let rows = features.len() / dim;
    if rows < 4 || (rows - 1) % 3 != 0 {
        return Err(PpError::Domain(format!("{rows} feature rows is not of the form 3n+1")));
    }
    Ok(rows)
}

fn row<T>(f: &[T], dim: usize, i: usize) -> &[T] {
    &f[i * dim..(i + 1) * dim]
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

fn cos_pair<T: Scalar>(a: &[T], b: &[T]) -> T {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    dot(a, b) / (na * nb)
}

/// Adds `scale * d cos(a, b) / d a` into `ga` and `scale * d cos(a, b) / d b` into `gb`.
fn add_cos_grad<T: Scalar>(f: &[T], dim: usize, ia: usize, ib: usize, scale: T, grad: &mut [T]) {
    let (a, b) = (row(f, dim, ia), row(f, dim, ib));
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    let c = dot(a, b) / (na * nb);
    for d in 0..dim {
        grad[ia * dim + d] += scale * (b[d] / (na * nb) - c * a[d] / (na * na));
        grad[ib * dim + d] += scale * (a[d] / (na * nb) - c * b[d] / (nb * nb));
    }
}

/// Cosine similarity of every face against the extra face: entry `j` is
/// `cos(features[j + 1], features[0])`.
pub fn cosine_row<T: Scalar>(features: &[T], dim: usize) -> Result<Vec<T>> {
    let rows = rows_of(features, dim)?;
    let extra = row(features, dim, 0);
    Ok((1..rows).map(|j| cos_pair(row(features, dim, j), extra)).collect())
}

/// Binary cross-entropy with log terms clamped at -100.
fn bce_term<T: Scalar>(s: T, y: u8) -> (T, T) {
    let floor = T::of(-100.0);
    if y == 1 {
        let l = s.ln();
        if l > floor {
            (-l, -T::one() / s)
        } else {
            (-floor, T::zero())
        }
    } else {
        let l = (T::one() - s).ln();
        if l > floor {
            (-l, T::one() / (T::one() - s))
        } else {
            (-floor, T::zero())
        }
    }
}

/// `alpha * l_tri + (1 - alpha) * l_bce` and its gradient w.r.t. `features`.
///
/// `l_tri` is the mean over triplets of `max(0, d(a,p) - d(a,n) + margin)`
/// with cosine distance `d = 1 - cos`. `l_bce` is the mean binary
/// cross-entropy between `(1 + cosine_row) / 2` and `labels`.
pub fn combined_loss<T: Scalar>(
    features: &[T],
    dim: usize,
    labels: &BceLabelVector,
    alpha: T,
    margin: T,
) -> Result<(LossParts<T>, Vec<T>)> {
    let rows = rows_of(features, dim)?;
    let n = (rows - 1) / 3;
    if labels.len() != 3 * n {
        return Err(PpError::Domain(format!(
            "label vector of length {} for {n} triplets",
            labels.len()
        )));
    }
    if !features.iter().all(|v| v.is_finite()) {
        return Err(PpError::Domain("non-finite features".into()));
    }
    let views = triplet_views(rows)?;
    let mut g_tri = vec![T::zero(); features.len()];
    let mut g_bce = vec![T::zero(); features.len()];

    let inv_n = T::one() / T::of(n as f64);
    let mut l_tri = T::zero();
    for t in 0..n {
        let (a, p, ng) = (views.anchors[t], views.positives[t], views.negatives[t]);
        let c_ap = cos_pair(row(features, dim, a), row(features, dim, p));
        let c_an = cos_pair(row(features, dim, a), row(features, dim, ng));
        // d(a,p) - d(a,n) + margin = c_an - c_ap + margin
        let hinge = c_an - c_ap + margin;
        if hinge > T::zero() {
            l_tri += hinge;
            add_cos_grad(features, dim, a, ng, inv_n, &mut g_tri);
            add_cos_grad(features, dim, a, p, -inv_n, &mut g_tri);
        }
    }
    l_tri *= inv_n;

    let inv_m = T::one() / T::of((3 * n) as f64);
    let half = T::of(0.5);
    let mut l_bce = T::zero();
    for (j, &y) in labels.bits().iter().enumerate() {
        let c = cos_pair(row(features, dim, j + 1), row(features, dim, 0));
        let s = (T::one() + c) * half;
        let (l, dl_ds) = bce_term(s, y);
        l_bce += l;
        if dl_ds != T::zero() {
            add_cos_grad(features, dim, j + 1, 0, dl_ds * half * inv_m, &mut g_bce);
        }
    }
    l_bce *= inv_m;

    let beta = T::one() - alpha;
    let total = alpha * l_tri + beta * l_bce;
    let grad = g_tri.iter().zip(&g_bce).map(|(&a, &b)| alpha * a + beta * b).collect();
    Ok((LossParts { total, l_tri, l_bce }, grad))
}

/// Mean absolute error and its gradient w.r.t. `pred`.
pub fn l1_loss<T: Scalar>(pred: &[T], target: &[T]) -> (T, Vec<T>) {
    assert_eq!(pred.len(), target.len(), "l1_loss length mismatch");
    let inv = T::one() / T::of(pred.len().max(1) as f64);
    let mut loss = T::zero();
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p - t;
            loss += d.abs();
            if d > T::zero() {
                inv
            } else if d < T::zero() {
                -inv
            } else {
                T::zero()
            }
        })
        .collect();
    (loss * inv, grad)
}

/// Mean softmax cross-entropy over rows of `[rows, classes]` logits.
pub fn cross_entropy<T: Scalar>(logits: &[T], classes: usize, labels: &[usize]) -> Result<(T, Vec<T>)> {
    if classes == 0 || logits.len() != labels.len() * classes {
        return Err(PpError::Domain("logit/label shape mismatch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(PpError::Domain(format!("label {bad} outside {classes} classes")));
    }
    let inv = T::one() / T::of(labels.len().max(1) as f64);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); logits.len()];
    for (i, &y) in labels.iter().enumerate() {
        let z = &logits[i * classes..(i + 1) * classes];
        let mx = z.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = z.iter().map(|&v| (v - mx).exp()).sum();
        let lse = mx + sum.ln();
        loss += lse - z[y];
        for c in 0..classes {
            let p = (z[c] - lse).exp();
            grad[i * classes + c] = (p - if c == y { T::one() } else { T::zero() }) * inv;
        }
    }
    Ok((loss * inv, grad))
}

pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
