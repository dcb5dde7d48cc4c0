//! DTW-based trajectory clustering and progression labels.
//!
//! Clustering works on value sequences only: visit times shape the
//! trajectories but DTW is free to warp them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::synthcohort::Trajectory;

#[derive(Debug, Error, PartialEq)]
pub enum TrajectoryError {
    #[error("dtw needs nonempty series (got lengths {0} and {1})")]
    EmptySeries(usize, usize),
    #[error("band radius {radius} cannot bridge series lengths {a} and {b}")]
    InfeasibleBand { radius: usize, a: usize, b: usize },
    #[error("k-means needs at least k = {k} trajectories, got {n}")]
    TooFewTrajectories { k: usize, n: usize },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("progression labels need k = 4 clusters, model has k = {0}")]
    UnsupportedK(usize),
}

pub type Result<T> = std::result::Result<T, TrajectoryError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ProgressionLabel {
    Stable,
    Mild,
    Moderate,
    Severe,
}

impl ProgressionLabel {
    pub const ALL: [ProgressionLabel; 4] = [
        ProgressionLabel::Stable,
        ProgressionLabel::Mild,
        ProgressionLabel::Moderate,
        ProgressionLabel::Severe,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ProgressionLabel::Stable => "Stable",
            ProgressionLabel::Mild => "Mild",
            ProgressionLabel::Moderate => "Moderate",
            ProgressionLabel::Severe => "Severe",
        }
    }
}

impl fmt::Display for ProgressionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProgressionLabel {
    type Err = TrajectoryError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| TrajectoryError::Argument(format!("unknown progression label {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DtwCost {
    #[default]
    Squared,
    Absolute,
}

impl DtwCost {
    #[inline]
    pub fn eval(self, a: f64, b: f64) -> f64 {
        match self {
            DtwCost::Squared => (a - b) * (a - b),
            DtwCost::Absolute => (a - b).abs(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DtwConfig {
    pub cost: DtwCost,
    /// Sakoe-Chiba radius in index units.
    pub band_radius: Option<usize>,
}

fn check(a: &[f64], b: &[f64], cfg: &DtwConfig) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(TrajectoryError::EmptySeries(a.len(), b.len()));
    }
    if let Some(r) = cfg.band_radius {
        if r < a.len().abs_diff(b.len()) {
            return Err(TrajectoryError::InfeasibleBand { radius: r, a: a.len(), b: b.len() });
        }
    }
    Ok(())
}

/// Full (n+1)x(m+1) accumulated-cost table, row-major.
fn cost_table(a: &[f64], b: &[f64], cfg: &DtwConfig) -> Vec<f64> {
    let (n, m) = (a.len(), b.len());
    let w = m + 1;
    let mut d = vec![f64::INFINITY; (n + 1) * w];
    d[0] = 0.0;
    for i in 1..=n {
        let (lo, hi) = match cfg.band_radius {
            Some(r) => (i.saturating_sub(r).max(1), (i + r).min(m)),
            None => (1, m),
        };
        for j in lo..=hi {
            let best = d[(i - 1) * w + j].min(d[i * w + j - 1]).min(d[(i - 1) * w + j - 1]);
            d[i * w + j] = cfg.cost.eval(a[i - 1], b[j - 1]) + best;
        }
    }
    d
}

/// DTW distance: the accumulated cost of the cheapest monotone alignment.
pub fn dtw_distance(a: &[f64], b: &[f64], cfg: &DtwConfig) -> Result<f64> {
    check(a, b, cfg)?;
    if cfg.band_radius.is_none() {
        // Two-row variant of the table for the hot path.
        let m = b.len();
        let mut prev = vec![f64::INFINITY; m + 1];
        let mut cur = vec![f64::INFINITY; m + 1];
        prev[0] = 0.0;
        for &x in a {
            cur[0] = f64::INFINITY;
            for j in 1..=m {
                cur[j] = cfg.cost.eval(x, b[j - 1]) + prev[j].min(cur[j - 1]).min(prev[j - 1]);
            }
            std::mem::swap(&mut prev, &mut cur);
        }
        return Ok(prev[m]);
    }
    Ok(*cost_table(a, b, cfg).last().unwrap())
}

/// Optimal alignment as (index in a, index in b) pairs from (0,0) to the
/// last elements. Ties prefer the diagonal step, then a step in `a`.
pub fn dtw_path(a: &[f64], b: &[f64], cfg: &DtwConfig) -> Result<(f64, Vec<(usize, usize)>)> {
    check(a, b, cfg)?;
    let d = cost_table(a, b, cfg);
    let w = b.len() + 1;
    let (mut i, mut j) = (a.len(), b.len());
    let mut path = vec![(i - 1, j - 1)];
    while (i, j) != (1, 1) {
        let diag = d[(i - 1) * w + j - 1];
        let up = d[(i - 1) * w + j];
        let left = d[i * w + j - 1];
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        path.push((i - 1, j - 1));
    }
    path.reverse();
    Ok((d[a.len() * w + b.len()], path))
}

/// Linear resampling of `x` onto `len` evenly spaced index positions.
pub fn resample(x: &[f64], len: usize) -> Vec<f64> {
    if len == x.len() {
        return x.to_vec();
    }
    if x.len() == 1 || len == 1 {
        return vec![x[0]; len];
    }
    (0..len)
        .map(|i| {
            let pos = i as f64 * (x.len() - 1) as f64 / (len - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(x.len() - 1);
            let f = pos - lo as f64;
            x[lo] * (1.0 - f) + x[hi] * f
        })
        .collect()
}

/// Index of the member with the smallest summed DTW distance to the rest.
pub fn medoid(members: &[&[f64]], cfg: &DtwConfig) -> Result<usize> {
    let n = members.len();
    let mut sums = vec![0.0; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = dtw_distance(members[i], members[j], cfg)?;
            sums[i] += d;
            sums[j] += d;
        }
    }
    Ok((0..n).fold(0, |best, i| if sums[i] < sums[best] { i } else { best }))
}

/// DTW barycenter averaging.
///
/// Starts from the medoid resampled to `length`, then repeatedly aligns each
/// member to the current barycenter and replaces every coordinate by the
/// mean of the member values aligned to it.
pub fn dba_barycenter(
    members: &[&[f64]],
    length: usize,
    iterations: usize,
    cfg: &DtwConfig,
) -> Result<Vec<f64>> {
    if members.is_empty() {
        return Err(TrajectoryError::Argument("dba needs at least one member".into()));
    }
    if length == 0 {
        return Err(TrajectoryError::Argument("barycenter length must be >= 1".into()));
    }
    let start = medoid(members, cfg)?;
    let mut center = resample(members[start], length);
    let mut sums = vec![0.0; length];
    let mut counts = vec![0usize; length];
    for _ in 0..iterations {
        sums.iter_mut().for_each(|s| *s = 0.0);
        counts.iter_mut().for_each(|c| *c = 0);
        for m in members {
            let (_, path) = dtw_path(&center, m, cfg)?;
            for (i, j) in path {
                sums[i] += m[j];
                counts[i] += 1;
            }
        }
        let mut change: f64 = 0.0;
        for i in 0..length {
            let v = sums[i] / counts[i] as f64;
            change = change.max((v - center[i]).abs());
            center[i] = v;
        }
        if change <= 1e-9 {
            break;
        }
    }
    Ok(center)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iter: usize,
    pub dba_iterations: usize,
    pub dtw: DtwConfig,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self { k: 4, restarts: 10, max_iter: 50, dba_iterations: 10, dtw: DtwConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub barycenters: Vec<Vec<f64>>,
    pub subject_ids: Vec<String>,
    /// Cluster index per subject, aligned with `subject_ids`.
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Cluster index -> label; present when k = 4.
    pub label_order: Option<Vec<ProgressionLabel>>,
    /// Inertia after each assignment step of the winning restart.
    pub history: Vec<f64>,
}

impl ClusterModel {
    pub fn assignment(&self, subject_id: &str) -> Option<usize> {
        self.subject_ids.iter().position(|s| s == subject_id).map(|i| self.assignments[i])
    }

    pub fn recompute_inertia(&self, series: &[&[f64]], cfg: &DtwConfig) -> Result<f64> {
        let mut total = 0.0;
        for (s, &c) in series.iter().zip(&self.assignments) {
            total += dtw_distance(s, &self.barycenters[c], cfg)?;
        }
        Ok(total)
    }
}

fn median_length(members: &[&[f64]]) -> usize {
    let mut lens: Vec<usize> = members.iter().map(|m| m.len()).collect();
    lens.sort_unstable();
    lens[(lens.len() - 1) / 2]
}

struct Lloyd<'a> {
    series: &'a [&'a [f64]],
    cfg: &'a KMeansConfig,
}

impl Lloyd<'_> {
    /// k-means++ seeding; weights are the squared-distance analogue under the
    /// configured cost (DTW itself for squared cost).
    fn seed_centers(&self, rng: &mut rng::Rng) -> Result<Vec<Vec<f64>>> {
        let n = self.series.len();
        let mut chosen = vec![rng.random_range(0..n)];
        let mut nearest: Vec<f64> = vec![f64::INFINITY; n];
        while chosen.len() < self.cfg.k {
            let last = self.series[*chosen.last().unwrap()];
            for (i, s) in self.series.iter().enumerate() {
                nearest[i] = nearest[i].min(dtw_distance(s, last, &self.cfg.dtw)?);
            }
            let weights: Vec<f64> = nearest
                .iter()
                .map(|&d| match self.cfg.dtw.cost {
                    DtwCost::Squared => d,
                    DtwCost::Absolute => d * d,
                })
                .collect();
            let total: f64 = weights.iter().sum();
            let pick = if total > 0.0 {
                let mut r = rng.random::<f64>() * total;
                let mut pick = None;
                for (i, &w) in weights.iter().enumerate() {
                    if w > 0.0 {
                        pick = Some(i);
                        if r < w {
                            break;
                        }
                        r -= w;
                    }
                }
                pick.unwrap()
            } else {
                let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
                free[rng.random_range(0..free.len())]
            };
            chosen.push(pick);
        }
        Ok(chosen.into_iter().map(|i| self.series[i].to_vec()).collect())
    }

    fn assign(&self, centers: &[Vec<f64>]) -> Result<(Vec<usize>, Vec<f64>)> {
        let mut assign = Vec::with_capacity(self.series.len());
        let mut dist = Vec::with_capacity(self.series.len());
        for s in self.series {
            let mut best = (0, f64::INFINITY);
            for (c, center) in centers.iter().enumerate() {
                let d = dtw_distance(s, center, &self.cfg.dtw)?;
                if d < best.1 {
                    best = (c, d);
                }
            }
            assign.push(best.0);
            dist.push(best.1);
        }
        Ok((assign, dist))
    }

    /// Reseeds every empty cluster with the point farthest from its own
    /// barycenter, taken from a cluster that keeps at least one member.
    fn repair(&self, centers: &mut [Vec<f64>], assign: &mut [usize], dist: &mut [f64]) {
        loop {
            let mut sizes = vec![0usize; centers.len()];
            assign.iter().for_each(|&c| sizes[c] += 1);
            let Some(empty) = sizes.iter().position(|&s| s == 0) else { return };
            let donor = (0..assign.len())
                .filter(|&i| sizes[assign[i]] >= 2)
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if dist[b] >= dist[i] => Some(b),
                    _ => Some(i),
                })
                .expect("n >= k guarantees a cluster with two members");
            assign[donor] = empty;
            dist[donor] = 0.0;
            centers[empty] = self.series[donor].to_vec();
        }
    }

    fn update(&self, assign: &[usize], centers: &mut [Vec<f64>]) -> Result<()> {
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&[f64]> = self
                .series
                .iter()
                .zip(assign)
                .filter(|(_, &a)| a == c)
                .map(|(s, _)| *s)
                .collect();
            if !members.is_empty() {
                *center = dba_barycenter(
                    &members,
                    median_length(&members),
                    self.cfg.dba_iterations,
                    &self.cfg.dtw,
                )?;
            }
        }
        Ok(())
    }

    fn run(&self, seed: u64) -> Result<(Vec<Vec<f64>>, Vec<usize>, f64, Vec<f64>)> {
        let mut rng = rng::seeded(seed);
        let mut centers = self.seed_centers(&mut rng)?;
        let mut history = Vec::new();
        let mut prev: Option<Vec<usize>> = None;
        let mut iter = 0;
        loop {
            let (mut assign, mut dist) = self.assign(&centers)?;
            self.repair(&mut centers, &mut assign, &mut dist);
            let inertia: f64 = dist.iter().sum();
            history.push(inertia);
            if prev.as_ref() == Some(&assign) || iter == self.cfg.max_iter {
                return Ok((centers, assign, inertia, history));
            }
            self.update(&assign, &mut centers)?;
            prev = Some(assign);
            iter += 1;
        }
    }
}

/// k-means under DTW with k-means++ seeding and DBA barycenters; the restart
/// with the lowest inertia wins.
pub fn kmeans_dtw(trajectories: &[Trajectory], cfg: &KMeansConfig, seed: u64) -> Result<ClusterModel> {
    let series: Vec<&[f64]> = trajectories.iter().map(|t| t.values.as_slice()).collect();
    let ids = trajectories.iter().map(|t| t.subject_id.clone()).collect();
    kmeans_dtw_series(&series, ids, cfg, seed)
}

pub fn kmeans_dtw_series(
    series: &[&[f64]],
    subject_ids: Vec<String>,
    cfg: &KMeansConfig,
    seed: u64,
) -> Result<ClusterModel> {
    if cfg.k == 0 {
        return Err(TrajectoryError::Argument("k must be >= 1".into()));
    }
    if series.len() < cfg.k {
        return Err(TrajectoryError::TooFewTrajectories { k: cfg.k, n: series.len() });
    }
    if subject_ids.len() != series.len() {
        return Err(TrajectoryError::Argument("one subject id per series required".into()));
    }
    if let Some(i) = series.iter().position(|s| s.is_empty()) {
        return Err(TrajectoryError::Argument(format!("series {i} is empty")));
    }
    let lloyd = Lloyd { series, cfg };
    let mut best: Option<(Vec<Vec<f64>>, Vec<usize>, f64, Vec<f64>)> = None;
    for r in 0..cfg.restarts.max(1) {
        let run = lloyd.run(rng::derive_indexed(seed, "kmeans-restart", r as u64))?;
        if best.as_ref().is_none_or(|b| run.2 < b.2) {
            best = Some(run);
        }
    }
    let (barycenters, assignments, inertia, history) = best.unwrap();
    let mut model = ClusterModel {
        k: cfg.k,
        barycenters,
        subject_ids,
        assignments,
        inertia,
        label_order: None,
        history,
    };
    if cfg.k == 4 {
        model.label_order = Some(label_order(&model.barycenters));
    }
    Ok(model)
}

/// Best-of-restarts inertia for k = 1..=k_max.
pub fn elbow_curve(
    trajectories: &[Trajectory],
    k_max: usize,
    cfg: &KMeansConfig,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    if k_max == 0 {
        return Err(TrajectoryError::Argument("k_max must be >= 1".into()));
    }
    (1..=k_max)
        .map(|k| {
            let m = kmeans_dtw(trajectories, &KMeansConfig { k, ..*cfg }, seed)?;
            Ok((k, m.inertia))
        })
        .collect()
}

/// Cluster index -> label, ordering clusters by barycenter net change (last
/// minus first value), ties by lower baseline, then by index.
pub fn label_order(barycenters: &[Vec<f64>]) -> Vec<ProgressionLabel> {
    let mut idx: Vec<usize> = (0..barycenters.len()).collect();
    let key = |c: usize| {
        let b = &barycenters[c];
        (b[b.len() - 1] - b[0], b[0])
    };
    idx.sort_by(|&x, &y| {
        let (kx, ky) = (key(x), key(y));
        kx.0.total_cmp(&ky.0).then(kx.1.total_cmp(&ky.1)).then(x.cmp(&y))
    });
    let mut out = vec![ProgressionLabel::Stable; barycenters.len()];
    for (rank, c) in idx.into_iter().enumerate() {
        out[c] = ProgressionLabel::ALL[rank.min(3)];
    }
    out
}

/// Progression label per subject.
pub fn assign_labels(model: &ClusterModel) -> Result<BTreeMap<String, ProgressionLabel>> {
    if model.k != 4 {
        return Err(TrajectoryError::UnsupportedK(model.k));
    }
    let order = label_order(&model.barycenters);
    Ok(model
        .subject_ids
        .iter()
        .zip(&model.assignments)
        .map(|(id, &c)| (id.clone(), order[c]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SQ: DtwConfig = DtwConfig { cost: DtwCost::Squared, band_radius: None };

    #[test]
    fn dtw_examples() {
        assert_eq!(dtw_distance(&[0.0, 1.0, 2.0], &[0.0, 2.0], &SQ).unwrap(), 1.0);
        assert_eq!(dtw_distance(&[0.0; 3], &[1.0; 3], &SQ).unwrap(), 3.0);
        assert_eq!(dtw_distance(&[3.0, 1.0, 4.0], &[3.0, 1.0, 4.0], &SQ).unwrap(), 0.0);
    }

    #[test]
    fn dtw_errors() {
        assert_eq!(dtw_distance(&[], &[1.0], &SQ), Err(TrajectoryError::EmptySeries(0, 1)));
        let banded = DtwConfig { band_radius: Some(1), ..SQ };
        assert!(matches!(
            dtw_distance(&[1.0; 5], &[1.0; 2], &banded),
            Err(TrajectoryError::InfeasibleBand { .. })
        ));
    }

    #[test]
    fn path_cost_matches_distance() {
        let a = [0.0, 1.0, 3.0, 2.0];
        let b = [0.5, 2.5, 2.0];
        let (d, path) = dtw_path(&a, &b, &SQ).unwrap();
        let sum: f64 = path.iter().map(|&(i, j)| SQ.cost.eval(a[i], b[j])).sum();
        assert_eq!(d, sum);
        assert_eq!(path.first(), Some(&(0, 0)));
        assert_eq!(path.last(), Some(&(3, 2)));
    }

    #[test]
    fn dba_examples() {
        let m = [1.0, 4.0, 2.0, 5.0];
        assert_eq!(dba_barycenter(&[&m], 4, 1, &SQ).unwrap(), m.to_vec());
        assert_eq!(dba_barycenter(&[&m, &m], 4, 5, &SQ).unwrap(), m.to_vec());
        let out = dba_barycenter(&[&[0.0; 3], &[2.0; 3]], 3, 10, &SQ).unwrap();
        assert_eq!(out, vec![1.0; 3]);
    }

    #[test]
    fn resample_endpoints() {
        assert_eq!(resample(&[0.0, 10.0], 3), vec![0.0, 5.0, 10.0]);
        assert_eq!(resample(&[2.0], 3), vec![2.0; 3]);
    }

    #[test]
    fn labels_by_net_change() {
        let bary = vec![
            vec![0.0, 5.0],
            vec![1.0, 1.1],
            vec![0.0, 11.0],
            vec![0.0, 2.0],
        ];
        use ProgressionLabel::*;
        assert_eq!(label_order(&bary), vec![Moderate, Stable, Severe, Mild]);
        // equal net change: smaller baseline first
        let tie = vec![vec![3.0, 4.0], vec![1.0, 2.0], vec![0.0, 9.0], vec![0.0, 7.0]];
        assert_eq!(label_order(&tie), vec![Mild, Stable, Severe, Moderate]);
    }

    #[test]
    fn assign_labels_rejects_other_k() {
        let model = ClusterModel {
            k: 3,
            barycenters: vec![vec![0.0]; 3],
            subject_ids: vec![],
            assignments: vec![],
            inertia: 0.0,
            label_order: None,
            history: vec![],
        };
        assert_eq!(assign_labels(&model), Err(TrajectoryError::UnsupportedK(3)));
    }

    #[test]
    fn kmeans_k1_inertia_is_sum_to_barycenter() {
        let series: Vec<Vec<f64>> =
            vec![vec![0.0, 1.0, 2.0], vec![0.0, 2.0], vec![1.0, 1.0, 2.0, 3.0], vec![0.5, 0.5]];
        let refs: Vec<&[f64]> = series.iter().map(|s| s.as_slice()).collect();
        let ids = (0..4).map(|i| i.to_string()).collect();
        let cfg = KMeansConfig { k: 1, restarts: 2, ..Default::default() };
        let m = kmeans_dtw_series(&refs, ids, &cfg, 1).unwrap();
        let direct: f64 = refs.iter().map(|s| dtw_distance(s, &m.barycenters[0], &SQ).unwrap()).sum();
        assert!((m.inertia - direct).abs() < 1e-9);
    }

    #[test]
    fn kmeans_k_equals_n_has_zero_inertia() {
        let series: Vec<Vec<f64>> = vec![vec![0.0, 1.0], vec![5.0, 5.0, 6.0], vec![2.0, 2.0], vec![2.0, 2.0]];
        let refs: Vec<&[f64]> = series.iter().map(|s| s.as_slice()).collect();
        let ids = (0..4).map(|i| i.to_string()).collect();
        let cfg = KMeansConfig { k: 4, restarts: 3, ..Default::default() };
        let m = kmeans_dtw_series(&refs, ids, &cfg, 5).unwrap();
        assert_eq!(m.inertia, 0.0);
        let mut sizes = [0; 4];
        m.assignments.iter().for_each(|&c| sizes[c] += 1);
        assert!(sizes.iter().all(|&s| s == 1));
    }

    #[test]
    fn kmeans_too_few() {
        let t = Trajectory::new("a", vec![0.0, 1.0], vec![0.0, 1.0]).unwrap();
        let err = kmeans_dtw(&[t], &KMeansConfig::default(), 0).unwrap_err();
        assert_eq!(err, TrajectoryError::TooFewTrajectories { k: 4, n: 1 });
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn series() -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(-10.0f64..10.0, 1..12)
        }

        proptest! {
            #[test]
            fn symmetric_and_zero_on_self(a in series(), b in series(), abs in any::<bool>()) {
                let cfg = DtwConfig {
                    cost: if abs { DtwCost::Absolute } else { DtwCost::Squared },
                    band_radius: None,
                };
                prop_assert_eq!(dtw_distance(&a, &a, &cfg).unwrap(), 0.0);
                let ab = dtw_distance(&a, &b, &cfg).unwrap();
                let ba = dtw_distance(&b, &a, &cfg).unwrap();
                prop_assert!((ab - ba).abs() <= 1e-9 * ab.max(1.0));
            }

            #[test]
            fn wide_band_is_unbanded(a in series(), b in series()) {
                let r = a.len().max(b.len());
                let banded = DtwConfig { band_radius: Some(r), ..SQ };
                prop_assert_eq!(dtw_distance(&a, &b, &banded).unwrap(), dtw_distance(&a, &b, &SQ).unwrap());
            }

            #[test]
            fn labels_permutation_invariant(
                bary in prop::collection::vec(prop::collection::vec(0.0f64..18.0, 2..6), 4),
                perm in Just([0usize, 1, 2, 3]).prop_shuffle(),
            ) {
                let order = label_order(&bary);
                let permuted: Vec<Vec<f64>> = perm.iter().map(|&p| bary[p].clone()).collect();
                let porder = label_order(&permuted);
                for (new, &old) in perm.iter().enumerate() {
                    prop_assert_eq!(porder[new], order[old]);
                }
            }
        }
    }
}
