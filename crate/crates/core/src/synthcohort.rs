//! Synthetic longitudinal cohorts with planted progression archetypes.
//!
//! A cohort has one planted progression group per subject. From it we draw
//! irregular CDR-SB trajectories, group-conditional tabular markers and
//! phantom head volumes whose central cavity grows with the group. The
//! planted groups are the ground truth the clustering and the classifiers
//! are scored against.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Rng};
use crate::trajectory::ProgressionLabel;
use crate::volio::Volume;
use crate::N_CLASSES;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("trajectory {subject}: {reason}")]
    Trajectory { subject: String, reason: String },
    #[error("csv line {line}: {reason}")]
    Csv { line: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, CohortError>;

pub const CDRSB_MAX: f64 = 18.0;
pub const CDRSB_STEP: f64 = 0.5;

/// One subject's CDR-SB series. Times are months since baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub subject_id: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl Trajectory {
    pub fn new(subject_id: impl Into<String>, times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let t = Self { subject_id: subject_id.into(), times, values };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| {
            Err(CohortError::Trajectory { subject: self.subject_id.clone(), reason })
        };
        if self.times.len() != self.values.len() {
            return fail(format!(
                "{} times but {} values",
                self.times.len(),
                self.values.len()
            ));
        }
        if self.values.len() < 2 {
            return fail(format!("needs at least 2 visits, has {}", self.values.len()));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return fail("visit times must be strictly increasing".into());
        }
        if let Some(v) = self.values.iter().find(|v| !(0.0..=CDRSB_MAX).contains(*v)) {
            return fail(format!("score {v} outside [0, 18]"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Ordinary least-squares slope of value on time.
    pub fn ols_slope(&self) -> f64 {
        let n = self.len() as f64;
        let mt = self.times.iter().sum::<f64>() / n;
        let mv = self.values.iter().sum::<f64>() / n;
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for (t, v) in self.times.iter().zip(&self.values) {
            sxy += (t - mt) * (v - mv);
            sxx += (t - mt) * (t - mt);
        }
        if sxx > 0.0 {
            sxy / sxx
        } else {
            0.0
        }
    }
}

/// Mean trajectory shape of one planted group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Archetype {
    /// Baseline CDR-SB.
    pub baseline: f64,
    /// Points per month.
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseLevels {
    /// Per-visit additive score noise (sd, CDR-SB points).
    pub score_sd: f64,
    /// Visit time jitter, uniform in ±this many months.
    pub visit_jitter_months: f64,
    /// Per-subject baseline offset sd.
    pub baseline_sd: f64,
    /// Per-subject relative slope sd.
    pub slope_rel_sd: f64,
    /// Tabular feature noise sd, in units of the feature's population sd.
    pub tabular_sd: f64,
    /// Additive voxel noise sd (intensity units, 0..255 scale).
    pub volume_sd: f64,
    /// Relative sd of phantom radii.
    pub shape_jitter: f64,
    /// Phantom center shift sd in voxels.
    pub center_jitter_voxels: f64,
}

impl Default for NoiseLevels {
    fn default() -> Self {
        Self {
            score_sd: 0.25,
            visit_jitter_months: 1.0,
            baseline_sd: 0.25,
            slope_rel_sd: 0.15,
            tabular_sd: 1.0,
            volume_sd: 3.0,
            shape_jitter: 0.03,
            center_jitter_voxels: 0.5,
        }
    }
}

impl NoiseLevels {
    /// Every stochastic perturbation switched off.
    pub fn zero() -> Self {
        Self {
            score_sd: 0.0,
            visit_jitter_months: 0.0,
            baseline_sd: 0.0,
            slope_rel_sd: 0.0,
            tabular_sd: 0.0,
            volume_sd: 0.0,
            shape_jitter: 0.0,
            center_jitter_voxels: 0.0,
        }
    }
}

/// Group-conditional tabular effects, in population-sd units, ordered
/// stable, mild, moderate, severe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TabularSignal {
    pub cognitive: [f64; 4],
    pub csf: [f64; 4],
    pub pet: [f64; 4],
    pub risk: [f64; 4],
    pub volumetrics: [f64; 4],
    /// Global multiplier on every effect; 0 gives a null cohort.
    pub scale: f64,
    /// Probability that any single entry is missing (age and sex exempt).
    pub missing_rate: f64,
}

impl Default for TabularSignal {
    fn default() -> Self {
        Self {
            cognitive: [1.0, 0.0, 0.6, 2.2],
            csf: [0.6, 0.0, 0.5, 0.8],
            pet: [0.5, 0.0, 0.5, 1.0],
            risk: [0.3, 0.0, 0.2, 0.4],
            volumetrics: [0.9, 0.0, 0.5, 1.6],
            scale: 1.0,
            missing_rate: 0.05,
        }
    }
}

impl TabularSignal {
    fn effects(&self, g: FeatureGroup) -> &[f64; 4] {
        match g {
            FeatureGroup::Cognitive => &self.cognitive,
            FeatureGroup::Csf => &self.csf,
            FeatureGroup::Pet => &self.pet,
            FeatureGroup::Risk => &self.risk,
            FeatureGroup::Volumetrics => &self.volumetrics,
        }
    }
}

/// Phantom geometry and intensities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    /// Cavity radius per group as a fraction of the smallest head radius.
    pub cavity_radius: [f64; 4],
    pub gray_intensity: f64,
    pub white_intensity: f64,
    pub cavity_intensity: f64,
    /// Logistic edge width in voxels.
    pub edge_width: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            cavity_radius: [0.10, 0.25, 0.30, 0.35],
            gray_intensity: 110.0,
            white_intensity: 200.0,
            cavity_intensity: 25.0,
            edge_width: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSpec {
    pub n_subjects: usize,
    /// Stable, mild, moderate, severe.
    pub group_proportions: [f64; 4],
    /// Inclusive range of visit counts.
    pub visit_count_range: (usize, usize),
    pub visit_spacing_months: f64,
    /// Stable, mild, moderate, severe.
    pub archetypes: [Archetype; 4],
    pub noise: NoiseLevels,
    pub tabular: TabularSignal,
    pub phantom: PhantomSpec,
    pub volume_dims: [usize; 3],
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n_subjects: 400,
            group_proportions: [0.10, 0.33, 0.29, 0.28],
            visit_count_range: (3, 10),
            visit_spacing_months: 6.0,
            archetypes: [
                Archetype { baseline: 0.0, slope: 0.0 },
                Archetype { baseline: 2.5, slope: 0.05 },
                Archetype { baseline: 7.0, slope: 0.12 },
                Archetype { baseline: 12.0, slope: 0.25 },
            ],
            noise: NoiseLevels::default(),
            tabular: TabularSignal::default(),
            phantom: PhantomSpec::default(),
            volume_dims: [32, 32, 32],
            seed: 0,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(CohortError::Config(m));
        if self.n_subjects < N_CLASSES {
            return cfg(format!(
                "n_subjects = {} is fewer than the {N_CLASSES} groups",
                self.n_subjects
            ));
        }
        let sum: f64 = self.group_proportions.iter().sum();
        if self.group_proportions.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return cfg(format!(
                "group_proportions must be nonnegative and sum to 1, got {:?}",
                self.group_proportions
            ));
        }
        let (lo, hi) = self.visit_count_range;
        if lo < 2 || hi < lo {
            return cfg(format!("visit_count_range must satisfy 2 <= lo <= hi, got ({lo}, {hi})"));
        }
        if !(self.visit_spacing_months > 0.0) {
            return cfg("visit_spacing_months must be positive".into());
        }
        if !(self.noise.visit_jitter_months >= 0.0
            && 2.0 * self.noise.visit_jitter_months < self.visit_spacing_months)
        {
            return cfg("visit jitter must be nonnegative and below half the visit spacing".into());
        }
        if self.volume_dims.iter().any(|&d| d < 16) {
            return cfg(format!("volume_dims must be >= 16 per axis, got {:?}", self.volume_dims));
        }
        if !(0.0..=1.0).contains(&self.tabular.missing_rate) {
            return cfg("tabular.missing_rate must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Planted group for each subject, in subject order.
    ///
    /// Group sizes follow the proportions by largest remainder; the order is
    /// a seeded shuffle.
    pub fn planted_groups(&self) -> Result<Vec<ProgressionLabel>> {
        self.validate()?;
        let n = self.n_subjects;
        let exact: Vec<f64> = self.group_proportions.iter().map(|p| p * n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut rest: Vec<usize> = (0..N_CLASSES).collect();
        rest.sort_by(|&a, &b| {
            let ra = exact[a] - exact[a].floor();
            let rb = exact[b] - exact[b].floor();
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        let short = n - counts.iter().sum::<usize>();
        for &g in rest.iter().take(short) {
            counts[g] += 1;
        }
        let mut groups: Vec<ProgressionLabel> = counts
            .iter()
            .enumerate()
            .flat_map(|(g, &c)| std::iter::repeat_n(ProgressionLabel::ALL[g], c))
            .collect();
        groups.shuffle(&mut rng::seeded(rng::derive(self.seed, "groups")));
        Ok(groups)
    }
}

pub fn subject_id(i: usize) -> String {
    format!("S{i:04}")
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn quantize_cdrsb(v: f64) -> f64 {
    ((v.clamp(0.0, CDRSB_MAX) / CDRSB_STEP).round() * CDRSB_STEP).clamp(0.0, CDRSB_MAX)
}

/// Trajectories and their planted groups, in subject order.
pub fn gen_trajectories(spec: &CohortSpec) -> Result<Vec<(Trajectory, ProgressionLabel)>> {
    let groups = spec.planted_groups()?;
    let mut rng = rng::seeded(rng::derive(spec.seed, "trajectories"));
    let noise = &spec.noise;
    let (lo, hi) = spec.visit_count_range;
    let mut out = Vec::with_capacity(groups.len());
    for (i, &group) in groups.iter().enumerate() {
        let arch = spec.archetypes[group.index()];
        let visits = rng.random_range(lo..=hi);
        let baseline = (arch.baseline + noise.baseline_sd * normal(&mut rng)).max(0.0);
        let slope = arch.slope * (1.0 + noise.slope_rel_sd * normal(&mut rng));
        let mut times = Vec::with_capacity(visits);
        let mut values = Vec::with_capacity(visits);
        for v in 0..visits {
            let t = if v == 0 {
                0.0
            } else {
                let j = noise.visit_jitter_months;
                let jitter = if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
                v as f64 * spec.visit_spacing_months + jitter
            };
            let score = baseline + slope * t + noise.score_sd * normal(&mut rng);
            times.push(t);
            values.push(quantize_cdrsb(score));
        }
        out.push((Trajectory::new(subject_id(i), times, values)?, group));
    }
    Ok(out)
}

/// The five tabular feature families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureGroup {
    Cognitive,
    Csf,
    Pet,
    Risk,
    Volumetrics,
}

/// (name, population mean, population sd, sign of the disease effect)
type FeatureDef = (&'static str, f64, f64, f64);

const COGNITIVE: &[FeatureDef] = &[
    ("ADAS13", 16.0, 8.0, 1.0),
    ("MMSE", 27.0, 2.5, -1.0),
    ("RAVLT_immediate", 36.0, 11.0, -1.0),
    ("LDELTOTAL", 7.0, 5.0, -1.0),
    ("DIGITSCOR", 37.0, 11.0, -1.0),
    ("TRABSCOR", 110.0, 70.0, 1.0),
    ("FAQ", 4.0, 6.0, 1.0),
    ("MOCA", 23.0, 4.0, -1.0),
];
const CSF: &[FeatureDef] =
    &[("ABETA", 1000.0, 400.0, -1.0), ("TAU", 290.0, 120.0, 1.0), ("PTAU", 28.0, 13.0, 1.0)];
const PET: &[FeatureDef] = &[
    ("FDG", 1.2, 0.15, -1.0),
    ("AV45", 1.2, 0.22, 1.0),
    ("PIB", 1.8, 0.5, 1.0),
    ("FBB", 1.2, 0.25, 1.0),
];
const RISK: &[FeatureDef] = &[
    ("AGE", 73.5, 7.0, 1.0),
    ("PTGENDER", 0.5, 0.5, 0.0),
    ("PTEDUCAT", 15.8, 2.8, -1.0),
    ("APOE4", 0.55, 0.65, 1.0),
];
const VOLUMETRICS: &[FeatureDef] = &[
    ("Hippocampus", 6700.0, 1200.0, -1.0),
    ("Entorhinal", 3500.0, 800.0, -1.0),
    ("MidTemp", 19500.0, 3000.0, -1.0),
    ("Fusiform", 17200.0, 2700.0, -1.0),
    ("Ventricles", 42000.0, 23000.0, 1.0),
];

impl FeatureGroup {
    pub const ALL: [FeatureGroup; 5] = [
        FeatureGroup::Cognitive,
        FeatureGroup::Csf,
        FeatureGroup::Pet,
        FeatureGroup::Risk,
        FeatureGroup::Volumetrics,
    ];

    fn defs(self) -> &'static [FeatureDef] {
        match self {
            FeatureGroup::Cognitive => COGNITIVE,
            FeatureGroup::Csf => CSF,
            FeatureGroup::Pet => PET,
            FeatureGroup::Risk => RISK,
            FeatureGroup::Volumetrics => VOLUMETRICS,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn feature_names(self) -> Vec<&'static str> {
        self.defs().iter().map(|d| d.0).collect()
    }

    pub fn arity(self) -> usize {
        self.defs().len()
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureGroup::Cognitive => "cognitive",
            FeatureGroup::Csf => "csf",
            FeatureGroup::Pet => "pet",
            FeatureGroup::Risk => "risk",
            FeatureGroup::Volumetrics => "volumetrics",
        }
    }

    /// Row label used in reports.
    pub fn title(self) -> &'static str {
        match self {
            FeatureGroup::Cognitive => "Cognitive Scores",
            FeatureGroup::Csf => "CSF Markers",
            FeatureGroup::Pet => "PET Measures",
            FeatureGroup::Risk => "Risk Factors",
            FeatureGroup::Volumetrics => "Brain Volumetrics",
        }
    }
}

/// One subject's tabular markers; `None` marks a missing entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularRecord {
    pub subject_id: String,
    pub features: [Vec<Option<f64>>; 5],
}

impl TabularRecord {
    pub fn group(&self, g: FeatureGroup) -> &[Option<f64>] {
        &self.features[g.index()]
    }

    pub fn age(&self) -> Option<f64> {
        self.group(FeatureGroup::Risk)[0]
    }

    pub fn sex(&self) -> Option<f64> {
        self.group(FeatureGroup::Risk)[1]
    }
}

/// Group-conditional tabular markers, one record per subject.
pub fn gen_tabular(groups: &[ProgressionLabel], spec: &CohortSpec) -> Vec<TabularRecord> {
    let mut rng = rng::seeded(rng::derive(spec.seed, "tabular"));
    let sig = &spec.tabular;
    let sd = spec.noise.tabular_sd;
    groups
        .iter()
        .enumerate()
        .map(|(i, &group)| {
            let features = FeatureGroup::ALL.map(|fg| {
                let effect = sig.scale * sig.effects(fg)[group.index()];
                fg.defs()
                    .iter()
                    .enumerate()
                    .map(|(j, &(name, mean, fsd, sign))| {
                        let z = sign * effect + sd * normal(&mut rng);
                        let value = match name {
                            "PTGENDER" => {
                                if rng.random::<bool>() {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            "APOE4" => (0.55 + 0.65 * z).round().clamp(0.0, 2.0),
                            _ => mean + fsd * z,
                        };
                        let exempt = fg == FeatureGroup::Risk && j < 2;
                        let missing = !exempt
                            && sig.missing_rate > 0.0
                            && rng.random::<f64>() < sig.missing_rate;
                        (!missing).then_some(value)
                    })
                    .collect()
            });
            TabularRecord { subject_id: subject_id(i), features }
        })
        .collect()
}

/// Analytic description of one subject's phantom.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub center: [f64; 3],
    pub head_radii: [f64; 3],
    pub white_radii: [f64; 3],
    pub cavity_radius: f64,
}

impl Phantom {
    pub fn nominal(dims: [usize; 3], spec: &PhantomSpec, group: ProgressionLabel) -> Self {
        let center = dims.map(|d| (d as f64 - 1.0) / 2.0);
        let head_radii = [0.42 * dims[0] as f64, 0.45 * dims[1] as f64, 0.40 * dims[2] as f64];
        let white_radii = head_radii.map(|r| 0.68 * r);
        let minor = head_radii.iter().cloned().fold(f64::INFINITY, f64::min);
        Self {
            center,
            head_radii,
            white_radii,
            cavity_radius: spec.cavity_radius[group.index()] * minor,
        }
    }

    fn jittered(mut self, noise: &NoiseLevels, rng: &mut Rng) -> Self {
        for c in self.center.iter_mut() {
            *c += noise.center_jitter_voxels * normal(rng);
        }
        let s = 1.0 + noise.shape_jitter * normal(rng);
        self.head_radii = self.head_radii.map(|r| r * s);
        let s = 1.0 + noise.shape_jitter * normal(rng);
        self.white_radii = self.white_radii.map(|r| r * s);
        self.cavity_radius *= 1.0 + noise.shape_jitter * normal(rng);
        self
    }

    /// Approximate signed distance (voxels) to an axis-aligned ellipsoid.
    fn signed_distance(&self, p: [f64; 3], radii: [f64; 3]) -> f64 {
        let q = (0..3)
            .map(|a| ((p[a] - self.center[a]) / radii[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        let minor = radii.iter().cloned().fold(f64::INFINITY, f64::min);
        (q - 1.0) * minor
    }

    pub fn cavity_distance(&self, p: [f64; 3]) -> f64 {
        self.signed_distance(p, [self.cavity_radius; 3])
    }

    pub fn intensity(&self, p: [f64; 3], spec: &PhantomSpec) -> f64 {
        let inside = |d: f64| 1.0 / (1.0 + (d / spec.edge_width).exp());
        let head = inside(self.signed_distance(p, self.head_radii));
        let white = inside(self.signed_distance(p, self.white_radii));
        let cavity = inside(self.cavity_distance(p));
        head * spec.gray_intensity
            + white * (spec.white_intensity - spec.gray_intensity)
            + cavity * (spec.cavity_intensity - spec.white_intensity)
    }

    pub fn render(&self, dims: [usize; 3], spec: &PhantomSpec) -> Vec<f64> {
        let mut out = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    out.push(self.intensity([x as f64, y as f64, z as f64], spec));
                }
            }
        }
        out
    }
}

/// Phantom volumes in [0, 255], one per subject.
pub fn gen_volumes(groups: &[ProgressionLabel], spec: &CohortSpec) -> Result<Vec<Volume>> {
    if spec.volume_dims.iter().any(|&d| d < 16) {
        return Err(CohortError::Config(format!(
            "volume_dims must be >= 16 per axis, got {:?}",
            spec.volume_dims
        )));
    }
    let dims = spec.volume_dims;
    groups
        .iter()
        .enumerate()
        .map(|(i, &group)| {
            let mut rng = rng::seeded(rng::derive_indexed(spec.seed, "volumes", i as u64));
            let phantom =
                Phantom::nominal(dims, &spec.phantom, group).jittered(&spec.noise, &mut rng);
            let sd = spec.noise.volume_sd;
            let data = phantom
                .render(dims, &spec.phantom)
                .into_iter()
                .map(|v| {
                    let v = if sd > 0.0 { v + sd * normal(&mut rng) } else { v };
                    v.clamp(0.0, 255.0) as f32
                })
                .collect();
            Ok(Volume::new(dims, [1.0; 3], data).expect("phantom volume is finite"))
        })
        .collect()
}

/// Per-subject stratification variables.
#[derive(Debug, Clone, PartialEq)]
pub struct StrataSubject {
    pub subject_id: String,
    pub age: f64,
    pub sex: u8,
    pub group: ProgressionLabel,
}

pub fn strata_subjects(
    records: &[TabularRecord],
    groups: &[ProgressionLabel],
) -> Result<Vec<StrataSubject>> {
    if records.len() != groups.len() {
        return Err(CohortError::Config(format!(
            "{} records but {} groups",
            records.len(),
            groups.len()
        )));
    }
    records
        .iter()
        .zip(groups)
        .map(|(r, &group)| match (r.age(), r.sex()) {
            (Some(age), Some(sex)) => Ok(StrataSubject {
                subject_id: r.subject_id.clone(),
                age,
                sex: (sex >= 0.5) as u8,
                group,
            }),
            _ => Err(CohortError::Config(format!(
                "subject {} lacks age or sex for stratification",
                r.subject_id
            ))),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_ids: BTreeSet<String>,
    pub test_ids: BTreeSet<String>,
    pub strata_key: String,
}

/// Number of test subjects drawn from a stratum: round half up.
pub fn stratum_test_count(size: usize, ratio: f64) -> usize {
    ((ratio * size as f64 + 0.5).floor() as usize).min(size)
}

/// Stratified split over age quartile x sex x group.
pub fn stratified_split(subjects: &[StrataSubject], ratio: f64, seed: u64) -> Result<SplitSpec> {
    if subjects.is_empty() {
        return Err(CohortError::Config("cannot split an empty cohort".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CohortError::Config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let mut ages: Vec<f64> = subjects.iter().map(|s| s.age).collect();
    ages.sort_by(f64::total_cmp);
    let quartile = |q: f64| {
        let pos = q * (ages.len() - 1) as f64;
        let (i, f) = (pos.floor() as usize, pos.fract());
        let j = (i + 1).min(ages.len() - 1);
        ages[i] + f * (ages[j] - ages[i])
    };
    let cuts = [quartile(0.25), quartile(0.5), quartile(0.75)];

    let mut strata: BTreeMap<(usize, u8, ProgressionLabel), Vec<&str>> = BTreeMap::new();
    for s in subjects {
        let bin = cuts.iter().filter(|&&c| s.age > c).count();
        strata.entry((bin, s.sex, s.group)).or_default().push(&s.subject_id);
    }

    let mut rng = rng::seeded(rng::derive(seed, "split"));
    let mut train_ids = BTreeSet::new();
    let mut test_ids = BTreeSet::new();
    for ids in strata.values_mut() {
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let k = stratum_test_count(ids.len(), ratio);
        test_ids.extend(ids[..k].iter().map(|s| s.to_string()));
        train_ids.extend(ids[k..].iter().map(|s| s.to_string()));
    }
    Ok(SplitSpec { train_ids, test_ids, strata_key: "age_quartile x sex x group".into() })
}

pub fn write_trajectories_csv(trajectories: &[Trajectory]) -> String {
    let mut out = String::from("subject_id,visit_month,cdrsb\n");
    for t in trajectories {
        for (m, v) in t.times.iter().zip(&t.values) {
            writeln!(out, "{},{},{}", t.subject_id, m, v).unwrap();
        }
    }
    out
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| CohortError::Csv { line, reason: format!("not a number: {s:?}") })
}

/// Parse the trajectory CSV; rows of one subject must be contiguous.
pub fn read_trajectories_csv(text: &str) -> Result<Vec<Trajectory>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "subject_id,visit_month,cdrsb" => {}
        _ => {
            return Err(CohortError::Csv {
                line: 1,
                reason: "expected header subject_id,visit_month,cdrsb".into(),
            })
        }
    }
    let mut out: Vec<Trajectory> = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 3 {
            return Err(CohortError::Csv { line: i + 1, reason: "expected 3 cells".into() });
        }
        let (id, t, v) = (cells[0].trim(), parse_f64(cells[1], i + 1)?, parse_f64(cells[2], i + 1)?);
        match out.last_mut() {
            Some(last) if last.subject_id == id => {
                last.times.push(t);
                last.values.push(v);
            }
            _ => {
                if !seen.insert(id.to_string()) {
                    return Err(CohortError::Csv {
                        line: i + 1,
                        reason: format!("rows for subject {id} are not contiguous"),
                    });
                }
                out.push(Trajectory { subject_id: id.to_string(), times: vec![t], values: vec![v] });
            }
        }
    }
    for t in &out {
        t.validate()?;
    }
    Ok(out)
}

pub fn tabular_header() -> String {
    let mut cols = vec!["subject_id".to_string()];
    for g in FeatureGroup::ALL {
        cols.extend(g.feature_names().into_iter().map(String::from));
    }
    cols.join(",")
}

pub fn write_tabular_csv(records: &[TabularRecord]) -> String {
    let mut out = tabular_header();
    out.push('\n');
    for r in records {
        out.push_str(&r.subject_id);
        for g in FeatureGroup::ALL {
            for v in r.group(g) {
                out.push(',');
                if let Some(v) = v {
                    write!(out, "{v}").unwrap();
                }
            }
        }
        out.push('\n');
    }
    out
}

pub fn read_tabular_csv(text: &str) -> Result<Vec<TabularRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == tabular_header() => {}
        _ => return Err(CohortError::Csv { line: 1, reason: "unexpected tabular header".into() }),
    }
    let width: usize = FeatureGroup::ALL.iter().map(|g| g.arity()).sum();
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != width + 1 {
            return Err(CohortError::Csv {
                line: i + 1,
                reason: format!("expected {} cells, found {}", width + 1, cells.len()),
            });
        }
        let mut it = cells[1..].iter();
        let mut features: [Vec<Option<f64>>; 5] = Default::default();
        for g in FeatureGroup::ALL {
            for _ in 0..g.arity() {
                let c = it.next().unwrap().trim();
                features[g.index()].push(if c.is_empty() { None } else { Some(parse_f64(c, i + 1)?) });
            }
        }
        out.push(TabularRecord { subject_id: cells[0].trim().to_string(), features });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_noise(n: usize) -> CohortSpec {
        CohortSpec { n_subjects: n, noise: NoiseLevels::zero(), ..Default::default() }
    }

    #[test]
    fn too_few_subjects() {
        let spec = CohortSpec { n_subjects: 3, ..Default::default() };
        assert!(matches!(gen_trajectories(&spec), Err(CohortError::Config(_))));
    }

    #[test]
    fn group_counts_follow_proportions() {
        let spec = CohortSpec { n_subjects: 100, ..Default::default() };
        let groups = spec.planted_groups().unwrap();
        let counts: Vec<usize> = ProgressionLabel::ALL
            .iter()
            .map(|l| groups.iter().filter(|g| *g == l).count())
            .collect();
        assert_eq!(counts, vec![10, 33, 29, 28]);
    }

    #[test]
    fn zero_noise_stable_is_flat() {
        let spec = zero_noise(80);
        for (t, g) in gen_trajectories(&spec).unwrap() {
            t.validate().unwrap();
            if g == ProgressionLabel::Stable {
                let lo = t.values.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = t.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(hi - lo, 0.0);
            }
        }
    }

    #[test]
    fn deterministic() {
        let spec = CohortSpec { n_subjects: 50, seed: 9, ..Default::default() };
        assert_eq!(gen_trajectories(&spec).unwrap(), gen_trajectories(&spec).unwrap());
        let g = spec.planted_groups().unwrap();
        assert_eq!(gen_tabular(&g, &spec), gen_tabular(&g, &spec));
        let spec = CohortSpec { volume_dims: [16; 3], ..spec };
        assert_eq!(gen_volumes(&g[..3], &spec).unwrap(), gen_volumes(&g[..3], &spec).unwrap());
    }

    #[test]
    fn slope_ordering() {
        let spec = CohortSpec { n_subjects: 400, seed: 1, ..Default::default() };
        let mut sums = [0.0; 4];
        let mut counts = [0usize; 4];
        for (t, g) in gen_trajectories(&spec).unwrap() {
            sums[g.index()] += t.ols_slope();
            counts[g.index()] += 1;
        }
        let means: Vec<f64> = (0..4).map(|g| sums[g] / counts[g] as f64).collect();
        assert!(means.windows(2).all(|w| w[0] < w[1]), "{means:?}");
    }

    #[test]
    fn missingness_and_null_signal() {
        let spec = CohortSpec {
            n_subjects: 200,
            tabular: TabularSignal { missing_rate: 0.0, scale: 0.0, ..Default::default() },
            noise: NoiseLevels::zero(),
            ..Default::default()
        };
        let groups = spec.planted_groups().unwrap();
        let recs = gen_tabular(&groups, &spec);
        assert!(recs.iter().all(|r| r.features.iter().flatten().all(|v| v.is_some())));
        // With no signal and no noise every non-sex feature is its population mean.
        for g in [FeatureGroup::Cognitive, FeatureGroup::Csf, FeatureGroup::Volumetrics] {
            let first = recs[0].group(g).to_vec();
            assert!(recs.iter().all(|r| r.group(g) == first.as_slice()));
        }
    }

    #[test]
    fn volumes_in_range_and_identical_without_noise() {
        let spec = CohortSpec { volume_dims: [16; 3], noise: NoiseLevels::zero(), ..Default::default() };
        let g = [ProgressionLabel::Mild, ProgressionLabel::Mild];
        let v = gen_volumes(&g, &spec).unwrap();
        assert_eq!(v[0], v[1]);
        let noisy = CohortSpec { volume_dims: [16; 3], ..Default::default() };
        for v in gen_volumes(&ProgressionLabel::ALL, &noisy).unwrap() {
            let (lo, hi) = v.min_max();
            assert!(lo >= 0.0 && hi <= 255.0);
        }
        let small = CohortSpec { volume_dims: [16, 16, 8], ..Default::default() };
        assert!(gen_volumes(&g, &small).is_err());
    }

    #[test]
    fn cavity_contrast_is_planted() {
        let spec = CohortSpec { volume_dims: [64; 3], noise: NoiseLevels::zero(), ..Default::default() };
        let g = [ProgressionLabel::Stable, ProgressionLabel::Severe];
        let vols = gen_volumes(&g, &spec).unwrap();
        let small = Phantom::nominal(spec.volume_dims, &spec.phantom, g[0]);
        let large = Phantom::nominal(spec.volume_dims, &spec.phantom, g[1]);
        // Shell inside the severe cavity but well outside the stable one.
        let mut diffs = Vec::new();
        for z in 0..64 {
            for y in 0..64 {
                for x in 0..64 {
                    let p = [x as f64, y as f64, z as f64];
                    if large.cavity_distance(p) < -2.5 && small.cavity_distance(p) > 2.5 {
                        let i = vols[0].index(x, y, z);
                        diffs.push((vols[0].data()[i] - vols[1].data()[i]) as f64);
                    }
                }
            }
        }
        assert!(!diffs.is_empty());
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let planted = spec.phantom.white_intensity - spec.phantom.cavity_intensity;
        assert!((mean - planted).abs() < 0.02 * planted, "{mean} vs {planted}");
    }

    fn strata(sizes: &[usize]) -> Vec<StrataSubject> {
        let mut out = Vec::new();
        for (s, &n) in sizes.iter().enumerate() {
            for _ in 0..n {
                out.push(StrataSubject {
                    subject_id: subject_id(out.len()),
                    age: 70.0,
                    sex: 0,
                    group: ProgressionLabel::ALL[s],
                });
            }
        }
        out
    }

    #[test]
    fn split_examples() {
        let one = stratified_split(&strata(&[100]), 0.2, 1).unwrap();
        assert_eq!(one.test_ids.len(), 20);
        assert_eq!(one.train_ids.len(), 80);

        let two = stratified_split(&strata(&[50, 50]), 0.2, 1).unwrap();
        let subjects = strata(&[50, 50]);
        let test_in_first =
            subjects[..50].iter().filter(|s| two.test_ids.contains(&s.subject_id)).count();
        assert_eq!((two.test_ids.len(), test_in_first), (20, 10));

        assert_eq!(stratum_test_count(7, 0.2), 1);
        assert_eq!(stratum_test_count(13, 0.2), 3);
        assert_eq!(stratified_split(&strata(&[7, 13]), 0.2, 3).unwrap().test_ids.len(), 4);

        assert!(stratified_split(&[], 0.2, 1).is_err());
        assert!(stratified_split(&strata(&[4]), 1.0, 1).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let spec = CohortSpec { n_subjects: 20, seed: 4, ..Default::default() };
        let trajs: Vec<Trajectory> = gen_trajectories(&spec).unwrap().into_iter().map(|p| p.0).collect();
        assert_eq!(read_trajectories_csv(&write_trajectories_csv(&trajs)).unwrap(), trajs);
        let groups = spec.planted_groups().unwrap();
        let recs = gen_tabular(&groups, &spec);
        assert_eq!(read_tabular_csv(&write_tabular_csv(&recs)).unwrap(), recs);
    }

    #[test]
    fn single_visit_rejected() {
        assert!(Trajectory::new("a", vec![0.0], vec![1.0]).is_err());
        assert!(Trajectory::new("a", vec![0.0, 0.0], vec![1.0, 1.0]).is_err());
        assert!(Trajectory::new("a", vec![0.0, 1.0], vec![1.0, 19.0]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn split_is_partition(n in 8usize..120, ratio in 0.05f64..0.95, seed in 0u64..1000) {
                let spec = CohortSpec { n_subjects: n, seed, ..Default::default() };
                let groups = spec.planted_groups().unwrap();
                let recs = gen_tabular(&groups, &spec);
                let subjects = strata_subjects(&recs, &groups).unwrap();
                let split = stratified_split(&subjects, ratio, seed).unwrap();
                prop_assert!(split.train_ids.is_disjoint(&split.test_ids));
                prop_assert_eq!(split.train_ids.len() + split.test_ids.len(), n);
            }
        }
    }
}
