//! Synthetic training trajectories.
//!
//! Each class owns a centroid direction and a low-rank latent basis; each
//! sample owns a fixed latent code and a fixed isotropic noise vector. An
//! epoch places sample `i` of class `c` at
//!
//! ```text
//! x_i(t) = mu_c(t) + v(t) * (B_c z_i + noise_frac * e_i)
//! ```
//!
//! so per-sample identity is stable across epochs and every scenario is a
//! deterministic function of the seed.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::RepresentationSnapshot;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Centroids separate and spread shrinks monotonically.
    Stable,
    /// Stable until `collapse_epoch`, then centroids contract toward the global mean.
    Collapse,
    /// Centroids follow a slow random walk at constant spread.
    Drift,
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "stable" => Ok(Scenario::Stable),
            "collapse" => Ok(Scenario::Collapse),
            "drift" => Ok(Scenario::Drift),
            other => Err(Error::InvalidArgument(format!(
                "unknown scenario {other:?}; expected stable, collapse or drift"
            ))),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Stable => "stable",
            Scenario::Collapse => "collapse",
            Scenario::Drift => "drift",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub scenario: Scenario,
    pub epochs: usize,
    pub n_per_class: usize,
    pub classes: usize,
    pub dim: usize,
    pub collapse_epoch: Option<u32>,
    pub seed: u64,
    /// Rank of each class's latent basis.
    pub latent_dim: usize,
    /// Isotropic noise relative to the latent spread.
    pub noise_frac: f64,
    /// Centroid scale at epoch 0 and its asymptote (stable/collapse).
    pub separation: (f64, f64),
    /// Latent spread at epoch 0 and its asymptote (stable/collapse).
    pub spread: (f64, f64),
    /// Time constant, in epochs, of the separation/spread schedules.
    pub time_constant: f64,
    /// Per-epoch factor applied to centroid offsets after the collapse epoch.
    pub contraction: f64,
    /// Expected norm of one centroid random-walk step (drift).
    pub drift_step: f64,
}

impl SynthConfig {
    pub fn new(scenario: Scenario, epochs: usize, n_per_class: usize, classes: usize, dim: usize, seed: u64) -> Self {
        Self {
            scenario,
            epochs,
            n_per_class,
            classes,
            dim,
            collapse_epoch: None,
            seed,
            latent_dim: 2,
            noise_frac: 0.1,
            separation: (1.5, 6.0),
            spread: (1.0, 0.5),
            time_constant: 6.0,
            contraction: 0.7,
            drift_step: 0.35,
        }
    }

    pub fn with_collapse_epoch(mut self, epoch: u32) -> Self {
        self.collapse_epoch = Some(epoch);
        self
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("epochs", self.epochs),
            ("n_per_class", self.n_per_class),
            ("classes", self.classes),
            ("dim", self.dim),
            ("latent_dim", self.latent_dim),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
            }
        }
        if self.scenario == Scenario::Collapse {
            match self.collapse_epoch {
                Some(e) if (e as usize) < self.epochs => {}
                Some(e) => {
                    return Err(Error::InvalidArgument(format!(
                        "collapse_epoch {e} must be < epochs {}",
                        self.epochs
                    )))
                }
                None => return Err(Error::InvalidArgument("collapse scenario needs collapse_epoch".into())),
            }
        }
        if !(self.contraction > 0.0 && self.contraction < 1.0) {
            return Err(Error::InvalidArgument("contraction must be in (0, 1)".into()));
        }
        Ok(())
    }

    fn schedule(&self, t: f64) -> (f64, f64) {
        let decay = (-t / self.time_constant).exp();
        let (s0, s1) = self.separation;
        let (v0, v1) = self.spread;
        (s1 - (s1 - s0) * decay, v1 + (v0 - v1) * decay)
    }
}

struct ClassModel {
    direction: Array1<f64>,
    /// dim x latent_dim, orthonormal columns.
    basis: Array2<f64>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| StandardNormal.sample(rng))
}

fn orthonormal_basis(rng: &mut ChaCha8Rng, dim: usize, rank: usize) -> Array2<f64> {
    let mut cols: Vec<Array1<f64>> = Vec::with_capacity(rank);
    while cols.len() < rank.min(dim) {
        let mut v = gaussian_vec(rng, dim);
        for c in &cols {
            let proj = v.dot(c);
            v.scaled_add(-proj, c);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-8 {
            cols.push(v / norm);
        }
    }
    let mut basis = Array2::zeros((dim, cols.len()));
    for (j, c) in cols.iter().enumerate() {
        basis.column_mut(j).assign(c);
    }
    basis
}

/// Generates one snapshot per epoch for the configured scenario.
pub fn synth_trajectory(cfg: &SynthConfig) -> Result<Vec<RepresentationSnapshot>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = cfg.dim;

    let classes: Vec<ClassModel> = (0..cfg.classes)
        .map(|_| {
            let mut direction = gaussian_vec(&mut rng, dim);
            let norm = direction.dot(&direction).sqrt().max(1e-12);
            direction /= norm;
            let basis = orthonormal_basis(&mut rng, dim, cfg.latent_dim);
            ClassModel { direction, basis }
        })
        .collect();

    let n = cfg.n_per_class * cfg.classes;
    let labels: Vec<u32> = (0..n).map(|i| (i / cfg.n_per_class) as u32).collect();
    // Per-sample offset in units of the spread: B_c z_i + noise_frac * e_i.
    let mut offsets = Array2::<f64>::zeros((n, dim));
    for (i, mut row) in offsets.rows_mut().into_iter().enumerate() {
        let class = &classes[labels[i] as usize];
        let z = gaussian_vec(&mut rng, class.basis.ncols());
        let e = gaussian_vec(&mut rng, dim) / (dim as f64).sqrt();
        row.assign(&(class.basis.dot(&z) + e * cfg.noise_frac));
    }

    let centroids = centroid_schedule(cfg, &classes, &mut rng);

    let mut out = Vec::with_capacity(cfg.epochs);
    for (t, (mu, spread)) in centroids.into_iter().enumerate() {
        let mut m = Array2::<f32>::zeros((n, dim));
        for (i, mut row) in m.rows_mut().into_iter().enumerate() {
            let c = labels[i] as usize;
            for ((dst, &o), &mu_j) in row.iter_mut().zip(offsets.row(i).iter()).zip(mu.row(c).iter()) {
                *dst = (mu_j + spread * o) as f32;
            }
        }
        out.push(RepresentationSnapshot::new(t as u32, 0, m, Some(labels.clone()), None)?);
    }
    Ok(out)
}

/// Per-epoch centroid matrix (classes x dim) and spread.
fn centroid_schedule(cfg: &SynthConfig, classes: &[ClassModel], rng: &mut ChaCha8Rng) -> Vec<(Array2<f64>, f64)> {
    let dim = cfg.dim;
    let base = |scale: f64| {
        let mut mu = Array2::<f64>::zeros((classes.len(), dim));
        for (c, class) in classes.iter().enumerate() {
            mu.row_mut(c).assign(&(&class.direction * scale));
        }
        mu
    };

    match cfg.scenario {
        Scenario::Stable => (0..cfg.epochs)
            .map(|t| {
                let (s, v) = cfg.schedule(t as f64);
                (base(s), v)
            })
            .collect(),
        Scenario::Collapse => {
            let te = cfg.collapse_epoch.expect("validated") as usize;
            let (s_te, v_te) = cfg.schedule(te as f64);
            let at_collapse = base(s_te);
            let global = at_collapse.mean_axis(ndarray::Axis(0)).expect("classes >= 1");
            (0..cfg.epochs)
                .map(|t| {
                    if t <= te {
                        let (s, v) = cfg.schedule(t as f64);
                        (base(s), v)
                    } else {
                        let f = cfg.contraction.powi((t - te) as i32);
                        let mut mu = at_collapse.clone();
                        for mut row in mu.rows_mut() {
                            let contracted = &global + &((&row - &global) * f);
                            row.assign(&contracted);
                        }
                        (mu, v_te)
                    }
                })
                .collect()
        }
        Scenario::Drift => {
            let (s0, _) = cfg.separation;
            let s = 0.5 * (s0 + cfg.separation.1);
            let v = 0.5 * (cfg.spread.0 + cfg.spread.1);
            let step_sd = cfg.drift_step / (dim as f64).sqrt();
            let mut mu = base(s);
            let mut out = Vec::with_capacity(cfg.epochs);
            for t in 0..cfg.epochs {
                if t > 0 {
                    mu.mapv_inplace(|x| {
                        let g: f64 = StandardNormal.sample(rng);
                        x + step_sd * g
                    });
                }
                out.push((mu.clone(), v));
            }
            out
        }
    }
}
