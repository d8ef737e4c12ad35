//! Fuzzy cross-entropy between high-dimensional memberships and the
//! low-dimensional similarity `q = 1 / (1 + a * |y_i - y_j|^(2b))`, plus the
//! reconstruction term.

use ndarray::ArrayView2;

use super::curve::EmbeddingCurve;

pub const Q_CLAMP: f64 = 1e-7;

/// Similarity `q`, its complement `1 - q` (formed without cancellation, so
/// near-coincident points keep full precision) and `dq/dD` for squared
/// distance `D`; the derivative is zero wherever `q` is clamped.
fn similarity(sq_dist: f64, curve: &EmbeddingCurve) -> (f64, f64, f64, bool) {
    let (a, b) = (curve.a, curve.b);
    let pow = if sq_dist > 0.0 { sq_dist.powf(b) } else { 0.0 };
    let q = 1.0 / (1.0 + a * pow);
    let one_minus_q = a * pow * q;
    if q < Q_CLAMP {
        return (Q_CLAMP, 1.0 - Q_CLAMP, 0.0, true);
    }
    if one_minus_q < Q_CLAMP {
        return (1.0 - Q_CLAMP, Q_CLAMP, 0.0, true);
    }
    let dq = -a * b * sq_dist.powf(b - 1.0) * q * q;
    (q, one_minus_q, dq, false)
}

/// `q` for a pair of embedded points.
pub fn pair_similarity(yi: [f64; 2], yj: [f64; 2], curve: &EmbeddingCurve) -> f64 {
    let dx = yi[0] - yj[0];
    let dy = yi[1] - yj[1];
    similarity(dx * dx + dy * dy, curve).0
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeLoss {
    pub loss: f64,
    /// `-p ln q` on the positive edge.
    pub attraction: f64,
    /// `-(1 - p) ln(1 - q)` on the edge plus `-ln(1 - q)` for every negative.
    pub repulsion: f64,
    pub grad_i: [f64; 2],
    pub grad_j: [f64; 2],
    pub grad_negatives: Vec<[f64; 2]>,
}

/// Cross-entropy for one pair with target `p`: value and gradient w.r.t. `y_i`
/// (the gradient w.r.t. `y_j` is its negation). Terms constant in `q` are dropped.
fn pair_term(yi: [f64; 2], yj: [f64; 2], p: f64, curve: &EmbeddingCurve) -> (f64, f64, [f64; 2]) {
    let delta = [yi[0] - yj[0], yi[1] - yj[1]];
    let sq = delta[0] * delta[0] + delta[1] * delta[1];
    let (q, omq, dq_dsq, clamped) = similarity(sq, curve);
    let attract = if p > 0.0 { -p * q.ln() } else { 0.0 };
    let repel = if p < 1.0 { -(1.0 - p) * omq.ln() } else { 0.0 };
    let grad = if clamped || sq == 0.0 {
        [0.0, 0.0]
    } else {
        let dl_dq = -p / q + (1.0 - p) / omq;
        let coeff = dl_dq * dq_dsq * 2.0;
        [coeff * delta[0], coeff * delta[1]]
    };
    (attract, repel, grad)
}

/// Loss of one positive edge with membership `p` and its negative samples (target 0).
pub fn umap_edge_loss(yi: [f64; 2], yj: [f64; 2], p: f64, curve: &EmbeddingCurve, negatives: &[[f64; 2]]) -> EdgeLoss {
    let (attraction, mut repulsion, g) = pair_term(yi, yj, p, curve);
    let mut grad_i = g;
    let grad_j = [-g[0], -g[1]];
    let mut grad_negatives = Vec::with_capacity(negatives.len());
    for &yn in negatives {
        let (_, r, gn) = pair_term(yi, yn, 0.0, curve);
        repulsion += r;
        grad_i[0] += gn[0];
        grad_i[1] += gn[1];
        grad_negatives.push([-gn[0], -gn[1]]);
    }
    EdgeLoss {
        loss: attraction + repulsion,
        attraction,
        repulsion,
        grad_i,
        grad_j,
        grad_negatives,
    }
}

/// Mean squared error over coordinates, with gradient w.r.t. `x_hat`.
pub fn recon_loss(x: &[f64], x_hat: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(x.len(), x_hat.len(), "reconstruction shape mismatch");
    let d = x.len() as f64;
    let loss = x.iter().zip(x_hat).map(|(a, b)| (b - a) * (b - a)).sum::<f64>() / d;
    let grad = x.iter().zip(x_hat).map(|(a, b)| 2.0 * (b - a) / d).collect();
    (loss, grad)
}

/// Batch mean of per-row [`recon_loss`]; gradient is w.r.t. `x_hat`.
pub fn batch_recon_loss(x: ArrayView2<'_, f64>, x_hat: ArrayView2<'_, f64>) -> (f64, ndarray::Array2<f64>) {
    assert_eq!(x.dim(), x_hat.dim(), "reconstruction shape mismatch");
    let (n, d) = x.dim();
    let diff = &x_hat - &x;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / (n * d) as f64;
    (loss, diff * (2.0 / (n * d) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const UNIT: EmbeddingCurve = EmbeddingCurve { a: 1.0, b: 1.0 };

    #[test]
    fn attraction_at_half_similarity() {
        let l = umap_edge_loss([0.0, 0.0], [1.0, 0.0], 1.0, &UNIT, &[]);
        assert!((l.attraction - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(l.repulsion, 0.0);
    }

    #[test]
    fn stationary_when_p_equals_q() {
        let curve = EmbeddingCurve { a: 1.3, b: 0.8 };
        let (yi, yj) = ([0.2, -0.1], [1.1, 0.4]);
        let p = pair_similarity(yi, yj, &curve);
        let l = umap_edge_loss(yi, yj, p, &curve, &[]);
        assert!(l.grad_i[0].abs() < 1e-12 && l.grad_i[1].abs() < 1e-12, "{l:?}");
    }

    #[test]
    fn finite_for_extreme_embeddings() {
        let curve = EmbeddingCurve { a: 1.58, b: 0.9 };
        for (yi, yj) in [
            ([0.0, 0.0], [0.0, 0.0]),
            ([0.0, 0.0], [1e8, -1e8]),
            ([1e-12, 0.0], [0.0, 0.0]),
        ] {
            let l = umap_edge_loss(yi, yj, 0.7, &curve, &[yj, [3.0, 3.0]]);
            assert!(l.loss.is_finite());
            assert!(l.grad_i.iter().chain(&l.grad_j).all(|g| g.is_finite()));
        }
    }

    fn fd_check(curve: EmbeddingCurve, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pt = || [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let (yi, yj) = (pt(), pt());
        let negs = [pt(), pt(), pt()];
        let p = 0.35;
        let l = umap_edge_loss(yi, yj, p, &curve, &negs);
        let h = 1e-4;
        let eval = |yi: [f64; 2], yj: [f64; 2], negs: &[[f64; 2]]| umap_edge_loss(yi, yj, p, &curve, negs).loss;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        for c in 0..2 {
            let (mut a, mut b) = (yi, yi);
            a[c] += h;
            b[c] -= h;
            let num = (eval(a, yj, &negs) - eval(b, yj, &negs)) / (2.0 * h);
            assert!(rel(l.grad_i[c], num) < 1e-4, "grad_i {c}: {} vs {num}", l.grad_i[c]);
            let (mut a, mut b) = (yj, yj);
            a[c] += h;
            b[c] -= h;
            let num = (eval(yi, a, &negs) - eval(yi, b, &negs)) / (2.0 * h);
            assert!(rel(l.grad_j[c], num) < 1e-4);
            for k in 0..negs.len() {
                let (mut a, mut b) = (negs, negs);
                a[k][c] += h;
                b[k][c] -= h;
                let num = (eval(yi, yj, &a) - eval(yi, yj, &b)) / (2.0 * h);
                assert!(rel(l.grad_negatives[k][c], num) < 1e-4);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20 {
            fd_check(EmbeddingCurve { a: 1.577, b: 0.895 }, seed);
            fd_check(UNIT, seed + 100);
        }
    }

    #[test]
    fn recon_examples() {
        assert_eq!(recon_loss(&[1.0, 2.0], &[1.0, 2.0]).0, 0.0);
        let (l, g) = recon_loss(&[0.0, 0.0], &[1.0, 1.0]);
        assert_eq!(l, 1.0);
        assert_eq!(g, vec![1.0, 1.0]);
    }

    #[test]
    fn recon_gradient_matches_finite_differences() {
        let x = [0.3, -1.2, 2.0, 0.0];
        let xh = [0.1, -0.2, 2.5, -0.7];
        let (_, g) = recon_loss(&x, &xh);
        let h = 1e-6;
        for c in 0..4 {
            let (mut a, mut b) = (xh, xh);
            a[c] += h;
            b[c] -= h;
            let num = (recon_loss(&x, &a).0 - recon_loss(&x, &b).0) / (2.0 * h);
            assert!((g[c] - num).abs() / g[c].abs().max(1e-8) < 1e-6);
        }
    }
}
