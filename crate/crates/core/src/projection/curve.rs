use serde::{Deserialize, Serialize};

/// Shape parameters of the low-dimensional similarity `1 / (1 + a x^(2b))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingCurve {
    pub a: f64,
    pub b: f64,
}

impl EmbeddingCurve {
    pub fn eval(&self, x: f64) -> f64 {
        if x <= 0.0 {
            1.0
        } else {
            1.0 / (1.0 + self.a * x.powf(2.0 * self.b))
        }
    }
}

impl Default for EmbeddingCurve {
    fn default() -> Self {
        fit_curve(0.1, 1.0)
    }
}

pub const CURVE_GRID_POINTS: usize = 300;

/// Piecewise target: 1 up to `min_dist`, then `exp(-(x - min_dist) / spread)`.
pub fn curve_target(x: f64, min_dist: f64, spread: f64) -> f64 {
    if x < min_dist {
        1.0
    } else {
        (-(x - min_dist) / spread).exp()
    }
}

pub fn curve_grid(spread: f64) -> Vec<f64> {
    let hi = 3.0 * spread;
    (0..CURVE_GRID_POINTS)
        .map(|i| hi * i as f64 / (CURVE_GRID_POINTS - 1) as f64)
        .collect()
}

fn sse(curve: &EmbeddingCurve, xs: &[f64], ys: &[f64]) -> f64 {
    xs.iter().zip(ys).map(|(&x, &y)| (curve.eval(x) - y).powi(2)).sum()
}

/// Least-squares fit of `(a, b)` on a 300-point grid over `[0, 3 spread]`.
///
/// Levenberg-Marquardt in `(ln a, ln b)` keeps both parameters positive.
pub fn fit_curve(min_dist: f64, spread: f64) -> EmbeddingCurve {
    let xs = curve_grid(spread);
    let ys: Vec<f64> = xs.iter().map(|&x| curve_target(x, min_dist, spread)).collect();

    let mut theta = [0.0f64, 0.0f64]; // ln a, ln b
    let to_curve = |t: [f64; 2]| EmbeddingCurve {
        a: t[0].exp(),
        b: t[1].exp(),
    };
    let mut cost = sse(&to_curve(theta), &xs, &ys);
    let mut lambda = 1e-3;
    for _ in 0..500 {
        let c = to_curve(theta);
        // Normal equations J^T J and J^T r for residual r = f - y.
        let (mut jtj, mut jtr) = ([[0.0f64; 2]; 2], [0.0f64; 2]);
        for (&x, &y) in xs.iter().zip(&ys) {
            if x <= 0.0 {
                continue;
            }
            let u = c.a * x.powf(2.0 * c.b);
            let f = 1.0 / (1.0 + u);
            let common = -u / ((1.0 + u) * (1.0 + u));
            let j = [common, common * 2.0 * c.b * x.ln()];
            let r = f - y;
            for p in 0..2 {
                jtr[p] += j[p] * r;
                for q in 0..2 {
                    jtj[p][q] += j[p] * j[q];
                }
            }
        }
        let mut improved = false;
        for _ in 0..20 {
            let a00 = jtj[0][0] * (1.0 + lambda);
            let a11 = jtj[1][1] * (1.0 + lambda);
            let a01 = jtj[0][1];
            let det = a00 * a11 - a01 * a01;
            if det.abs() < 1e-300 {
                lambda *= 10.0;
                continue;
            }
            let step = [
                -(a11 * jtr[0] - a01 * jtr[1]) / det,
                -(a00 * jtr[1] - a01 * jtr[0]) / det,
            ];
            let cand = [theta[0] + step[0], theta[1] + step[1]];
            let cand_cost = sse(&to_curve(cand), &xs, &ys);
            if cand_cost < cost {
                let gain = cost - cand_cost;
                theta = cand;
                cost = cand_cost;
                lambda = (lambda * 0.3).max(1e-12);
                improved = gain > 1e-15 * cost.max(1e-300);
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    to_curve(theta)
}
