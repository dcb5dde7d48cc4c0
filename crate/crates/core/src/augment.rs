//! Artifact and anatomy-variability simulation for intensity-normalized
//! volumes.
//!
//! Transforms run in a fixed order (noise, bias field, ghosting, flip,
//! rigid motion, gamma), each gated by its own probability, and the result
//! is clamped to [0, 255].

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Rng};
use crate::volio::Volume;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("volume is not normalized to [0, 255]: found {0}")]
    Unnormalized(f32),
}

pub type Result<T> = std::result::Result<T, AugmentError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Toggle {
    pub enabled: bool,
    pub probability: f64,
}

impl Toggle {
    pub const fn on(probability: f64) -> Self {
        Self { enabled: true, probability }
    }

    pub const fn off() -> Self {
        Self { enabled: false, probability: 0.0 }
    }

    /// Consumes one draw whether or not the transform is enabled, so
    /// toggling one transform never shifts another's randomness.
    fn fires(&self, rng: &mut Rng) -> bool {
        let u: f64 = rng.random();
        self.enabled && u < self.probability
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub noise: Toggle,
    /// Standard deviation as a fraction of the 0..255 range.
    pub noise_sigma_range: (f64, f64),
    pub bias_field: Toggle,
    pub bias_field_order: usize,
    pub bias_coefficient_range: (f64, f64),
    pub ghosting: Toggle,
    pub ghost_intensity_range: (f64, f64),
    pub ghost_count: usize,
    pub flip: Toggle,
    pub flip_axes: Vec<usize>,
    pub rigid: Toggle,
    pub max_rotation_deg: f64,
    pub max_translation_voxels: f64,
    pub gamma: Toggle,
    pub gamma_range: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise: Toggle::on(0.5),
            noise_sigma_range: (0.005, 0.03),
            bias_field: Toggle::on(0.5),
            bias_field_order: 3,
            bias_coefficient_range: (-0.1, 0.1),
            ghosting: Toggle::on(0.5),
            ghost_intensity_range: (0.05, 0.2),
            ghost_count: 2,
            flip: Toggle::on(0.5),
            flip_axes: vec![0],
            rigid: Toggle::on(0.5),
            max_rotation_deg: 5.0,
            max_translation_voxels: 3.0,
            gamma: Toggle::on(0.5),
            gamma_range: (0.7, 1.5),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Every transform disabled.
    pub fn identity() -> Self {
        Self {
            noise: Toggle::off(),
            bias_field: Toggle::off(),
            ghosting: Toggle::off(),
            flip: Toggle::off(),
            rigid: Toggle::off(),
            gamma: Toggle::off(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let toggles = [
            ("noise", self.noise),
            ("bias_field", self.bias_field),
            ("ghosting", self.ghosting),
            ("flip", self.flip),
            ("rigid", self.rigid),
            ("gamma", self.gamma),
        ];
        for (name, t) in toggles {
            if !(0.0..=1.0).contains(&t.probability) {
                return Err(AugmentError::Config(format!("{name} probability must lie in [0, 1], got {}", t.probability)));
            }
        }
        let ranges = [
            ("noise_sigma_range", self.noise_sigma_range),
            ("bias_coefficient_range", self.bias_coefficient_range),
            ("ghost_intensity_range", self.ghost_intensity_range),
            ("gamma_range", self.gamma_range),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(AugmentError::Config(format!("{name} must be a finite range lo <= hi, got ({lo}, {hi})")));
            }
        }
        if self.noise_sigma_range.0 < 0.0 {
            return Err(AugmentError::Config("noise_sigma_range must be nonnegative".into()));
        }
        if self.gamma_range.0 <= 0.0 {
            return Err(AugmentError::Config("gamma_range must be positive".into()));
        }
        if self.ghost_count == 0 {
            return Err(AugmentError::Config("ghost_count must be >= 1".into()));
        }
        if let Some(a) = self.flip_axes.iter().find(|&&a| a > 2) {
            return Err(AugmentError::Config(format!("flip axis {a} out of range")));
        }
        if !(self.max_rotation_deg >= 0.0 && self.max_translation_voxels >= 0.0) {
            return Err(AugmentError::Config("rigid motion limits must be nonnegative".into()));
        }
        Ok(())
    }
}

fn draw(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        // still consume a draw so streams stay aligned
        let _: f64 = rng.random();
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Exponents (i, j, k) with i + j + k <= order.
fn monomials(order: usize) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for total in 0..=order {
        for i in (0..=total).rev() {
            for j in (0..=total - i).rev() {
                out.push([i, j, total - i - j]);
            }
        }
    }
    out
}

fn unit_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    }
}

fn add_noise(data: &mut [f64], sigma: f64, rng: &mut Rng) {
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    for v in data.iter_mut() {
        *v += normal.sample(rng);
    }
}

fn apply_bias_field(data: &mut [f64], dims: [usize; 3], coeffs: &[([usize; 3], f64)]) {
    let [nx, ny, nz] = dims;
    for z in 0..nz {
        let cz = unit_coord(z, nz);
        for y in 0..ny {
            let cy = unit_coord(y, ny);
            for x in 0..nx {
                let cx = unit_coord(x, nx);
                let p: f64 = coeffs
                    .iter()
                    .map(|([i, j, k], c)| c * cx.powi(*i as i32) * cy.powi(*j as i32) * cz.powi(*k as i32))
                    .sum();
                data[x + nx * (y + ny * z)] *= p.exp();
            }
        }
    }
}

fn ghost(data: &mut [f64], dims: [usize; 3], axis: usize, shift: usize, intensity: f64) {
    let src = data.to_vec();
    let [nx, ny, nz] = dims;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut p = [x, y, z];
                p[axis] = (p[axis] + dims[axis] - shift % dims[axis]) % dims[axis];
                data[x + nx * (y + ny * z)] += intensity * src[p[0] + nx * (p[1] + ny * p[2])];
            }
        }
    }
}

/// Reverses the voxel order along `axis` (0 = x, 1 = y, 2 = z).
pub fn flip_axis(data: &mut [f64], dims: [usize; 3], axis: usize) {
    let src = data.to_vec();
    let [nx, ny, nz] = dims;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut p = [x, y, z];
                p[axis] = dims[axis] - 1 - p[axis];
                data[x + nx * (y + ny * z)] = src[p[0] + nx * (p[1] + ny * p[2])];
            }
        }
    }
}

fn rotation(angles: [f64; 3]) -> [[f64; 3]; 3] {
    let (sa, ca) = angles[0].sin_cos();
    let (sb, cb) = angles[1].sin_cos();
    let (sc, cc) = angles[2].sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
    let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
    let rz = [[cc, -sc, 0.0], [sc, cc, 0.0], [0.0, 0.0, 1.0]];
    let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
        let mut c = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        c
    };
    mul(rz, mul(ry, rx))
}

/// Trilinear sample; positions outside the grid read as 0.
fn trilinear(src: &[f64], dims: [usize; 3], p: [f64; 3]) -> f64 {
    for a in 0..3 {
        if !(p[a] >= 0.0 && p[a] <= (dims[a] - 1) as f64) {
            return 0.0;
        }
    }
    let [nx, ny, _] = dims;
    let base: [usize; 3] = std::array::from_fn(|a| (p[a].floor() as usize).min(dims[a].saturating_sub(2)));
    let f: [f64; 3] = std::array::from_fn(|a| p[a] - base[a] as f64);
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = (if dx == 1 { f[0] } else { 1.0 - f[0] })
                    * (if dy == 1 { f[1] } else { 1.0 - f[1] })
                    * (if dz == 1 { f[2] } else { 1.0 - f[2] });
                if w == 0.0 {
                    continue;
                }
                let (x, y, z) = (
                    (base[0] + dx).min(dims[0] - 1),
                    (base[1] + dy).min(dims[1] - 1),
                    (base[2] + dz).min(dims[2] - 1),
                );
                acc += w * src[x + nx * (y + ny * z)];
            }
        }
    }
    acc
}

/// Rotation about the volume center followed by translation, resampled
/// by inverse mapping.
pub fn rigid_transform(data: &[f64], dims: [usize; 3], angles_rad: [f64; 3], shift: [f64; 3]) -> Vec<f64> {
    let r = rotation(angles_rad);
    let c: [f64; 3] = std::array::from_fn(|a| (dims[a] as f64 - 1.0) / 2.0);
    let [nx, ny, nz] = dims;
    let mut out = vec![0.0; data.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let q = [x as f64 - c[0] - shift[0], y as f64 - c[1] - shift[1], z as f64 - c[2] - shift[2]];
                // R^-1 = R^T
                let p: [f64; 3] = std::array::from_fn(|i| (0..3).map(|k| r[k][i] * q[k]).sum::<f64>() + c[i]);
                out[x + nx * (y + ny * z)] = trilinear(data, dims, p);
            }
        }
    }
    out
}

/// Applies the configured transforms with randomness from `cfg.seed`.
pub fn augment_volume(v: &Volume, cfg: &AugmentConfig) -> Result<Volume> {
    cfg.validate()?;
    if let Some(&bad) = v.data().iter().find(|&&x| !(-1e-3..=255.0 + 1e-3).contains(&x)) {
        return Err(AugmentError::Unnormalized(bad));
    }
    let dims = v.dims();
    let mut rng = rng::seeded(rng::derive(cfg.seed, "augment"));
    let mut data: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();

    if cfg.noise.fires(&mut rng) {
        let sigma = draw(&mut rng, cfg.noise_sigma_range) * 255.0;
        add_noise(&mut data, sigma, &mut rng);
    }
    if cfg.bias_field.fires(&mut rng) {
        let coeffs: Vec<([usize; 3], f64)> = monomials(cfg.bias_field_order)
            .into_iter()
            .map(|m| (m, draw(&mut rng, cfg.bias_coefficient_range)))
            .collect();
        apply_bias_field(&mut data, dims, &coeffs);
    }
    if cfg.ghosting.fires(&mut rng) {
        let axis = rng.random_range(0..3);
        let intensity = draw(&mut rng, cfg.ghost_intensity_range);
        ghost(&mut data, dims, axis, dims[axis] / cfg.ghost_count, intensity);
    }
    if cfg.flip.fires(&mut rng) {
        for &axis in &cfg.flip_axes {
            flip_axis(&mut data, dims, axis);
        }
    }
    if cfg.rigid.fires(&mut rng) {
        let m = cfg.max_rotation_deg.to_radians();
        let t = cfg.max_translation_voxels;
        let angles = std::array::from_fn(|_| draw(&mut rng, (-m, m)));
        let shift = std::array::from_fn(|_| draw(&mut rng, (-t, t)));
        data = rigid_transform(&data, dims, angles, shift);
    }
    if cfg.gamma.fires(&mut rng) {
        let g = draw(&mut rng, cfg.gamma_range);
        for x in data.iter_mut() {
            *x = (x.clamp(0.0, 255.0) / 255.0).powf(g) * 255.0;
        }
    }
    let out = data.into_iter().map(|x| x.clamp(0.0, 255.0) as f32).collect();
    Ok(v.with_data(out).expect("clamped values are finite"))
}

/// Originals followed by `copies_per_volume` augmented variants of each,
/// every variant with its own derived seed.
pub fn make_training_set(volumes: &[Volume], cfg: &AugmentConfig, copies_per_volume: usize) -> Result<Vec<Volume>> {
    let mut out = volumes.to_vec();
    for (i, v) in volumes.iter().enumerate() {
        for j in 0..copies_per_volume {
            let seed = rng::derive_indexed(cfg.seed, "copy", (i * copies_per_volume + j) as u64);
            out.push(augment_volume(v, &AugmentConfig { seed, ..cfg.clone() })?);
        }
    }
    Ok(out)
}

/// Index of the original each entry of [`make_training_set`] came from.
pub fn training_set_sources(n_volumes: usize, copies_per_volume: usize) -> Vec<usize> {
    (0..n_volumes).chain((0..n_volumes).flat_map(|i| std::iter::repeat_n(i, copies_per_volume))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3]) -> Volume {
        let n: usize = dims.iter().product();
        let data = (0..n).map(|i| (i % 251) as f32).collect();
        Volume::new(dims, [1.0; 3], data).unwrap()
    }

    fn only(mut f: impl FnMut(&mut AugmentConfig)) -> AugmentConfig {
        let mut c = AugmentConfig::identity();
        f(&mut c);
        c
    }

    #[test]
    fn identity_config() {
        let v = ramp([8, 9, 10]);
        assert_eq!(augment_volume(&v, &AugmentConfig::identity()).unwrap(), v);
        let zero_p = AugmentConfig {
            noise: Toggle::on(0.0),
            bias_field: Toggle::on(0.0),
            ghosting: Toggle::on(0.0),
            flip: Toggle::on(0.0),
            rigid: Toggle::on(0.0),
            gamma: Toggle::on(0.0),
            ..AugmentConfig::default()
        };
        assert_eq!(augment_volume(&v, &zero_p).unwrap(), v);
    }

    #[test]
    fn noise_sigma_matches() {
        let v = Volume::filled([48, 48, 48], 128.0);
        let cfg = only(|c| {
            c.noise = Toggle::on(1.0);
            c.noise_sigma_range = (0.02, 0.02);
        });
        let out = augment_volume(&v, &cfg).unwrap();
        let d: Vec<f64> = out.data().iter().zip(v.data()).map(|(a, b)| (*a - *b) as f64).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
        assert!((sd - 5.1).abs() <= 0.51, "sd {sd}");
    }

    #[test]
    fn flip_twice_is_identity() {
        let v = ramp([5, 6, 7]);
        let cfg = only(|c| c.flip = Toggle::on(1.0));
        let once = augment_volume(&v, &cfg).unwrap();
        assert_ne!(once, v);
        assert_eq!(once.get(0, 2, 3), v.get(4, 2, 3));
        assert_eq!(augment_volume(&once, &cfg).unwrap(), v);
    }

    #[test]
    fn zero_bias_field_is_identity() {
        let v = ramp([6, 6, 6]);
        let cfg = only(|c| {
            c.bias_field = Toggle::on(1.0);
            c.bias_coefficient_range = (0.0, 0.0);
        });
        assert_eq!(augment_volume(&v, &cfg).unwrap(), v);
        assert_eq!(monomials(3).len(), 20);
    }

    #[test]
    fn rigid_identity_and_shift() {
        let v = ramp([6, 6, 6]);
        let d: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
        let same = rigid_transform(&d, [6, 6, 6], [0.0; 3], [0.0; 3]);
        for (a, b) in same.iter().zip(&d) {
            assert!((a - b).abs() < 1e-9);
        }
        let moved = rigid_transform(&d, [6, 6, 6], [0.0; 3], [1.0, 0.0, 0.0]);
        assert_eq!(moved[0], 0.0);
        assert!((moved[1] - d[0]).abs() < 1e-9);
    }

    #[test]
    fn ghost_adds_shifted_copy() {
        let mut d = vec![0.0; 8];
        d[0] = 100.0;
        ghost(&mut d, [8, 1, 1], 0, 4, 0.5);
        assert_eq!(d[0], 100.0);
        assert_eq!(d[4], 50.0);
    }

    #[test]
    fn full_pipeline_properties() {
        let v = ramp([12, 12, 12]);
        let cfg = AugmentConfig {
            noise: Toggle::on(1.0),
            bias_field: Toggle::on(1.0),
            ghosting: Toggle::on(1.0),
            flip: Toggle::on(1.0),
            rigid: Toggle::on(1.0),
            gamma: Toggle::on(1.0),
            seed: 4,
            ..AugmentConfig::default()
        };
        let a = augment_volume(&v, &cfg).unwrap();
        let b = augment_volume(&v, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dims(), v.dims());
        assert_eq!(a.spacing(), v.spacing());
        assert!(a.data().iter().all(|x| (0.0..=255.0).contains(x)));
    }

    #[test]
    fn rejects_unnormalized() {
        let v = Volume::filled([4, 4, 4], 300.0);
        assert!(matches!(augment_volume(&v, &AugmentConfig::default()), Err(AugmentError::Unnormalized(_))));
        let bad = AugmentConfig { gamma: Toggle::on(1.5), ..AugmentConfig::default() };
        assert!(matches!(augment_volume(&Volume::filled([4, 4, 4], 1.0), &bad), Err(AugmentError::Config(_))));
    }

    #[test]
    fn training_set_counts() {
        let vols: Vec<Volume> = (0..10).map(|i| Volume::filled([4, 4, 4], i as f32 * 10.0)).collect();
        let cfg = AugmentConfig { seed: 9, ..AugmentConfig::default() };
        assert_eq!(make_training_set(&vols, &cfg, 0).unwrap(), vols);
        let set = make_training_set(&vols, &cfg, 2).unwrap();
        assert_eq!(set.len(), 30);
        assert_eq!(set, make_training_set(&vols, &cfg, 2).unwrap());
        assert_eq!(&set[..10], &vols[..]);
        let src = training_set_sources(10, 2);
        assert_eq!(src.len(), 30);
        assert_eq!(&src[10..14], &[0, 0, 1, 1]);
    }
}
