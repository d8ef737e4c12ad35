//! Cluster-health metrics and sustained-degradation alerts.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class centroids in ascending label order.
pub fn class_centroids(points: ArrayView2<'_, f64>, labels: &[u32]) -> Result<(Vec<u32>, Array2<f64>)> {
    if labels.len() != points.nrows() {
        return Err(Error::Shape(format!(
            "{} labels for {} points",
            labels.len(),
            points.nrows()
        )));
    }
    let mut sums: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
    for (row, &l) in points.rows().into_iter().zip(labels) {
        let entry = sums.entry(l).or_insert_with(|| (vec![0.0; points.ncols()], 0));
        entry.0.iter_mut().zip(row).for_each(|(s, v)| *s += v);
        entry.1 += 1;
    }
    let classes: Vec<u32> = sums.keys().copied().collect();
    let mut centroids = Array2::<f64>::zeros((classes.len(), points.ncols()));
    for (mut dst, (sum, count)) in centroids.rows_mut().into_iter().zip(sums.values()) {
        dst.iter_mut().zip(sum).for_each(|(d, s)| *d = s / *count as f64);
    }
    Ok((classes, centroids))
}

/// Mean Euclidean distance over unordered pairs of class centroids.
pub fn inter_cluster_distance(points: ArrayView2<'_, f64>, labels: &[u32]) -> Result<f64> {
    let (classes, c) = class_centroids(points, labels)?;
    if classes.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "inter-cluster distance needs two non-empty classes, found {}",
            classes.len()
        )));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..classes.len() {
        for b in a + 1..classes.len() {
            let d2: f64 = c.row(a).iter().zip(c.row(b)).map(|(x, y)| (x - y) * (x - y)).sum();
            total += d2.sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Mean over classes of the mean squared distance to the class centroid.
pub fn intra_cluster_variance(points: ArrayView2<'_, f64>, labels: &[u32]) -> Result<f64> {
    let (classes, c) = class_centroids(points, labels)?;
    if classes.is_empty() {
        return Err(Error::InvalidArgument("no points to audit".into()));
    }
    let mut sums = vec![(0.0f64, 0usize); classes.len()];
    for (row, l) in points.rows().into_iter().zip(labels) {
        let k = classes.binary_search(l).unwrap();
        let d2: f64 = row.iter().zip(c.row(k)).map(|(x, y)| (x - y) * (x - y)).sum();
        sums[k].0 += d2;
        sums[k].1 += 1;
    }
    Ok(sums.iter().map(|(s, n)| s / *n as f64).sum::<f64>() / classes.len() as f64)
}

/// Fraction of points whose nearest class centroid has a different label.
pub fn nearest_centroid_error(points: ArrayView2<'_, f64>, labels: &[u32]) -> Result<f64> {
    let (classes, c) = class_centroids(points, labels)?;
    if points.nrows() == 0 {
        return Err(Error::InvalidArgument("no points to audit".into()));
    }
    let mut wrong = 0usize;
    for (row, l) in points.rows().into_iter().zip(labels) {
        let mut best = (f64::INFINITY, 0usize);
        for k in 0..classes.len() {
            let d2: f64 = row.iter().zip(c.row(k)).map(|(x, y)| (x - y) * (x - y)).sum();
            if d2 < best.0 {
                best = (d2, k);
            }
        }
        if classes[best.1] != *l {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / points.nrows() as f64)
}

/// Exponential moving average: `s_0 = x_0`, `s_t = f x_t + (1 - f) s_{t-1}`.
pub fn smooth(series: &[f64], factor: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(series.len());
    for (t, &x) in series.iter().enumerate() {
        let s = if t == 0 {
            x
        } else {
            factor * x + (1.0 - factor) * out[t - 1]
        };
        out.push(s);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Increase,
    Decrease,
}

impl Direction {
    fn is_unhealthy(self, delta: f64) -> bool {
        match self {
            Direction::Increase => delta > 0.0,
            Direction::Decrease => delta < 0.0,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Increase => "increase",
            Direction::Decrease => "decrease",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlertConfig {
    /// Consecutive unhealthy deltas required.
    pub k: usize,
    /// Margin as a fraction of the recent standard deviation.
    pub alpha: f64,
    pub window: usize,
    pub smoothing: f64,
}

impl Default for AlertConfig {
    fn default() -> Self {
        Self {
            k: 2,
            alpha: 0.25,
            window: 10,
            smoothing: 0.5,
        }
    }
}

impl AlertConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0
            || self.alpha.is_nan()
            || self.alpha < 0.0
            || self.window < 2
            || !(self.smoothing > 0.0 && self.smoothing <= 1.0)
        {
            return Err(Error::InvalidArgument(format!("invalid alert config: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertRecord {
    pub metric: String,
    /// Training epoch of the trigger (series index when produced by [`check_alert`]).
    pub epoch: u32,
    /// Position of the trigger in the series.
    pub index: usize,
    pub direction: Direction,
    pub delta: f64,
    pub margin: f64,
}

fn std_dev(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// Earliest index `t` at which the last `k` deltas all move in the unhealthy
/// direction and `|s_t - s_{t-1}|` exceeds `alpha` times the standard deviation
/// of the `min(window, t)` values before `t`.
pub fn check_alert(smoothed: &[f64], unhealthy: Direction, cfg: &AlertConfig) -> Option<AlertRecord> {
    let k = cfg.k.max(1);
    for t in k..smoothed.len() {
        let sustained = (t + 1 - k..=t).all(|u| unhealthy.is_unhealthy(smoothed[u] - smoothed[u - 1]));
        if !sustained {
            continue;
        }
        let m = cfg.window.min(t);
        let margin = cfg.alpha * std_dev(&smoothed[t - m..t]);
        let delta = smoothed[t] - smoothed[t - 1];
        if delta.abs() > margin {
            return Some(AlertRecord {
                metric: String::new(),
                epoch: t as u32,
                index: t,
                direction: unhealthy,
                delta,
                margin,
            });
        }
    }
    None
}

pub const INTER_METRIC: &str = "inter_cluster_distance";
pub const INTRA_METRIC: &str = "intra_cluster_variance";
pub const LOSS_METRIC: &str = "surrogate_loss";

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct HealthSeries {
    pub epochs: Vec<u32>,
    /// Empty when fewer than two classes were present.
    pub inter_cluster_distance: Vec<f64>,
    pub intra_cluster_variance: Vec<f64>,
    pub surrogate_loss: Vec<f64>,
    pub smoothing: f64,
}

impl HealthSeries {
    pub fn smoothed_inter(&self) -> Vec<f64> {
        smooth(&self.inter_cluster_distance, self.smoothing)
    }

    pub fn smoothed_intra(&self) -> Vec<f64> {
        smooth(&self.intra_cluster_variance, self.smoothing)
    }

    pub fn smoothed_loss(&self) -> Vec<f64> {
        smooth(&self.surrogate_loss, self.smoothing)
    }

    /// `epoch,inter,intra,loss,inter_smoothed,intra_smoothed,loss_smoothed`; missing values are empty.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "epoch,inter_cluster_distance,intra_cluster_variance,surrogate_loss,inter_smoothed,intra_smoothed,loss_smoothed"
        )?;
        let (si, sa, sl) = (self.smoothed_inter(), self.smoothed_intra(), self.smoothed_loss());
        let cell = |v: &[f64], t: usize| v.get(t).map(|x| x.to_string()).unwrap_or_default();
        for (t, epoch) in self.epochs.iter().enumerate() {
            writeln!(
                out,
                "{epoch},{},{},{},{},{},{}",
                cell(&self.inter_cluster_distance, t),
                cell(&self.intra_cluster_variance, t),
                cell(&self.surrogate_loss, t),
                cell(&si, t),
                cell(&sa, t),
                cell(&sl, t),
            )?;
        }
        Ok(())
    }
}

/// Region of the (separation, cohesion) plane holding the best values seen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IdealRegion {
    pub min_inter_cluster_distance: f64,
    pub max_intra_cluster_variance: f64,
}

impl IdealRegion {
    pub fn contains(&self, inter: f64, intra: f64) -> bool {
        inter >= self.min_inter_cluster_distance && intra <= self.max_intra_cluster_variance
    }
}

/// Linear-interpolated percentile, `q` in `[0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Streaming auditor: feed epochs in order, collect alerts as they fire.
#[derive(Debug, Clone)]
pub struct Auditor {
    cfg: AlertConfig,
    series: HealthSeries,
    alerts: Vec<AlertRecord>,
    inter_error: Option<String>,
}

impl Auditor {
    pub fn new(cfg: AlertConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            series: HealthSeries {
                smoothing: cfg.smoothing,
                ..HealthSeries::default()
            },
            alerts: Vec::new(),
            inter_error: None,
        })
    }

    pub fn config(&self) -> &AlertConfig {
        &self.cfg
    }

    pub fn series(&self) -> &HealthSeries {
        &self.series
    }

    /// Every alert fired so far, at most one per metric.
    pub fn alerts(&self) -> &[AlertRecord] {
        &self.alerts
    }

    /// Why the separation metric is missing, if it is.
    pub fn inter_error(&self) -> Option<&str> {
        self.inter_error.as_deref()
    }

    /// Earliest geometry alert (separation or cohesion).
    pub fn geometry_alert(&self) -> Option<&AlertRecord> {
        self.alerts
            .iter()
            .filter(|a| a.metric != LOSS_METRIC)
            .min_by_key(|a| (a.index, a.metric.clone()))
    }

    pub fn loss_alert(&self) -> Option<&AlertRecord> {
        self.alerts.iter().find(|a| a.metric == LOSS_METRIC)
    }

    /// Adds one epoch measured on `points`; `surrogate_loss` is optional.
    /// Returns alerts that fired at this epoch.
    pub fn push(
        &mut self,
        epoch: u32,
        points: ArrayView2<'_, f64>,
        labels: &[u32],
        surrogate_loss: Option<f64>,
    ) -> Result<Vec<AlertRecord>> {
        if let Some(&last) = self.series.epochs.last() {
            if epoch <= last {
                return Err(Error::InvalidArgument(format!("epoch {epoch} does not follow {last}")));
            }
        }
        let intra = intra_cluster_variance(points, labels)?;
        let inter = match inter_cluster_distance(points, labels) {
            Ok(v) if self.inter_error.is_none() => Some(v),
            Ok(_) => None,
            Err(e) => {
                if self.inter_error.is_none() {
                    log::warn!("epoch {epoch}: {e}; separation is not audited");
                    self.inter_error = Some(e.to_string());
                    self.series.inter_cluster_distance.clear();
                }
                None
            }
        };
        if !intra.is_finite() || inter.is_some_and(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite health metric at epoch {epoch}"
            )));
        }
        self.series.epochs.push(epoch);
        self.series.intra_cluster_variance.push(intra);
        if let Some(v) = inter {
            self.series.inter_cluster_distance.push(v);
        }
        if let Some(l) = surrogate_loss {
            if self.series.surrogate_loss.len() + 1 == self.series.epochs.len() {
                self.series.surrogate_loss.push(l);
            }
        }

        let mut fresh = Vec::new();
        let checks = [
            (INTER_METRIC, self.series.smoothed_inter(), Direction::Decrease),
            (INTRA_METRIC, self.series.smoothed_intra(), Direction::Increase),
            (LOSS_METRIC, self.series.smoothed_loss(), Direction::Increase),
        ];
        for (name, smoothed, dir) in checks {
            if self.alerts.iter().any(|a| a.metric == name) {
                continue;
            }
            if let Some(mut rec) = check_alert(&smoothed, dir, &self.cfg) {
                rec.metric = name.to_string();
                rec.epoch = self.series.epochs[rec.index];
                fresh.push(rec.clone());
                self.alerts.push(rec);
            }
        }
        Ok(fresh)
    }

    /// Post-hoc ideal region: 80th percentile of separation, 20th of cohesion.
    pub fn ideal_region(&self) -> Option<IdealRegion> {
        Some(IdealRegion {
            min_inter_cluster_distance: percentile(&self.series.inter_cluster_distance, 80.0)?,
            max_intra_cluster_variance: percentile(&self.series.intra_cluster_variance, 20.0)?,
        })
    }

    pub fn write_alerts_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for a in &self.alerts {
            serde_json::to_writer(&mut out, a)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// One audited epoch: points to measure, their labels, optional raw
/// activations for the surrogate loss.
pub struct AuditEpoch<'a> {
    pub epoch: u32,
    pub points: ArrayView2<'a, f64>,
    pub labels: &'a [u32],
    pub activations: Option<ArrayView2<'a, f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditSummary {
    pub series: HealthSeries,
    pub alerts: Vec<AlertRecord>,
    pub geometry_alert: Option<AlertRecord>,
    pub loss_alert: Option<AlertRecord>,
    pub ideal_region: Option<IdealRegion>,
}

impl AuditSummary {
    pub fn any_alert(&self) -> bool {
        !self.alerts.is_empty()
    }
}

/// Centres the points and rescales them to unit RMS distance from the mean.
/// Projection coordinates carry no absolute scale, so health metrics on an
/// embedding are read after this step. A zero-spread set is only centred.
pub fn standardize(points: ArrayView2<'_, f64>) -> Array2<f64> {
    let Some(mean) = points.mean_axis(Axis(0)) else {
        return points.to_owned();
    };
    let centred = &points - &mean;
    let rms = (centred.iter().map(|v| v * v).sum::<f64>() / points.nrows() as f64).sqrt();
    if rms > 0.0 {
        centred / rms
    } else {
        centred
    }
}

/// Batch audit of a whole run; the surrogate loss is the nearest-centroid
/// error rate of the raw activations.
pub fn audit_run(epochs: &[AuditEpoch<'_>], cfg: &AlertConfig) -> Result<AuditSummary> {
    if epochs.len() < 2 {
        return Err(Error::InvalidArgument("audit needs at least two epochs".into()));
    }
    let mut auditor = Auditor::new(*cfg)?;
    for e in epochs {
        let loss = e.activations.map(|a| nearest_centroid_error(a, e.labels)).transpose()?;
        auditor.push(e.epoch, e.points, e.labels, loss)?;
    }
    Ok(auditor.summary())
}

impl Auditor {
    pub fn summary(&self) -> AuditSummary {
        AuditSummary {
            series: self.series.clone(),
            alerts: self.alerts.clone(),
            geometry_alert: self.geometry_alert().cloned(),
            loss_alert: self.loss_alert().cloned(),
            ideal_region: self.ideal_region(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn inter_examples() {
        let p = array![[0.0, 0.0], [3.0, 4.0]];
        assert_eq!(inter_cluster_distance(p.view(), &[0, 1]).unwrap(), 5.0);
        let p = array![[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]];
        assert_eq!(inter_cluster_distance(p.view(), &[0, 1, 2]).unwrap(), 0.0);
        let h = 3f64.sqrt() / 2.0;
        let p = array![[0.0, 0.0], [1.0, 0.0], [0.5, h]];
        assert!((inter_cluster_distance(p.view(), &[0, 1, 2]).unwrap() - 1.0).abs() < 1e-12);
        assert!(inter_cluster_distance(p.view(), &[4, 4, 4]).is_err());
    }

    #[test]
    fn intra_examples() {
        let p = array![[0.0, 0.0], [2.0, 0.0]];
        assert_eq!(intra_cluster_variance(p.view(), &[0, 0]).unwrap(), 1.0);
        let p = array![[1.0, 1.0], [1.0, 1.0]];
        assert_eq!(intra_cluster_variance(p.view(), &[0, 0]).unwrap(), 0.0);
        // class 0 variance 1, class 1 variance 3
        let s = 3f64.sqrt();
        let p = array![[0.0, 0.0], [2.0, 0.0], [10.0, -s], [10.0, s]];
        assert!((intra_cluster_variance(p.view(), &[0, 0, 1, 1]).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn homogeneity() {
        let p = array![[0.0, 1.0], [2.0, 0.5], [4.0, 4.0], [5.0, 3.0], [-1.0, 2.0]];
        let l = [0, 0, 1, 1, 2];
        let c = 2.5;
        let q = &p * c;
        let r = inter_cluster_distance(q.view(), &l).unwrap() / inter_cluster_distance(p.view(), &l).unwrap();
        assert!((r - c).abs() < 1e-12);
        let r = intra_cluster_variance(q.view(), &l).unwrap() / intra_cluster_variance(p.view(), &l).unwrap();
        assert!((r - c * c).abs() < 1e-12);
    }

    #[test]
    fn smoothing_examples() {
        assert_eq!(smooth(&[3.0, 1.0, 2.0], 1.0), vec![3.0, 1.0, 2.0]);
        assert_eq!(smooth(&[2.0; 4], 0.3), vec![2.0; 4]);
        assert_eq!(smooth(&[0.0, 1.0], 0.5), vec![0.0, 0.5]);
    }

    #[test]
    fn alert_examples() {
        let cfg = AlertConfig {
            alpha: 0.0,
            ..AlertConfig::default()
        };
        let dec: Vec<f64> = (0..10).map(|t| 10.0 - t as f64).collect();
        assert_eq!(check_alert(&dec, Direction::Decrease, &cfg).unwrap().index, 2);
        let inc: Vec<f64> = (0..10).map(|t| t as f64 * 0.5).collect();
        assert_eq!(check_alert(&inc, Direction::Increase, &cfg).unwrap().index, 2);
        assert!(check_alert(&[1.0; 8], Direction::Increase, &cfg).is_none());
        assert!(check_alert(&dec, Direction::Increase, &cfg).is_none());
        let cfg3 = AlertConfig { k: 3, ..cfg };
        assert_eq!(check_alert(&dec, Direction::Decrease, &cfg3).unwrap().index, 3);
    }

    #[test]
    fn margin_suppresses_small_moves() {
        // large swings then a tiny two-step decline
        let s = [0.0, 10.0, 0.0, 10.0, 0.0, 10.0, 9.99, 9.98];
        let cfg = AlertConfig::default();
        assert!(check_alert(&s, Direction::Decrease, &cfg).is_none());
        let zero = AlertConfig { alpha: 0.0, ..cfg };
        assert_eq!(check_alert(&s, Direction::Decrease, &zero).unwrap().index, 7);
    }

    #[test]
    fn single_class_still_audits_cohesion() {
        let mut a = Auditor::new(AlertConfig::default()).unwrap();
        for (t, spread) in [1.0, 1.5, 3.0, 6.0].iter().enumerate() {
            let p = array![[0.0, 0.0], [*spread, 0.0]];
            a.push(t as u32, p.view(), &[0, 0], None).unwrap();
        }
        assert!(a.inter_error().is_some());
        assert!(a.series().inter_cluster_distance.is_empty());
        assert_eq!(a.series().intra_cluster_variance.len(), 4);
        assert_eq!(a.alerts()[0].metric, INTRA_METRIC);
    }

    #[test]
    fn streaming_matches_batch_definition() {
        let mut a = Auditor::new(AlertConfig::default()).unwrap();
        let seps = [4.0, 4.5, 5.0, 5.2, 4.0, 3.0, 2.0, 1.0];
        for (t, s) in seps.iter().enumerate() {
            let p = array![[0.0, 0.0], [0.1, 0.0], [*s, 0.0], [*s + 0.1, 0.0]];
            a.push(10 + t as u32, p.view(), &[0, 0, 1, 1], None).unwrap();
        }
        let expected = check_alert(&smooth(&seps, 0.5), Direction::Decrease, &AlertConfig::default()).unwrap();
        let got = a.geometry_alert().unwrap();
        assert_eq!(got.index, expected.index);
        assert_eq!(got.epoch, 10 + expected.index as u32);
        let mut buf = Vec::new();
        a.write_alerts_jsonl(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), a.alerts().len());
    }

    #[test]
    fn ideal_region_percentiles() {
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0, 5.0], 80.0), Some(4.2));
        assert_eq!(percentile(&[5.0, 1.0, 3.0], 0.0), Some(1.0));
    }
}
