//! PCA, one-vs-rest ROC AUC, 3-D SSIM and aggregation over repeated runs.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::ProgressionLabel;
use crate::volio::Volume;
use crate::N_CLASSES;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("runs disagree on which classes have a defined AUC (run {run}, class {class})")]
    InconsistentClasses { run: usize, class: usize },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// All p components as rows, by descending eigenvalue.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    /// Number of leading components kept by `pca_transform`.
    pub retained: usize,
    /// Set when the data had no variance at all.
    pub degenerate: bool,
}

impl PcaModel {
    pub fn cumulative_ratio(&self) -> f64 {
        self.explained_variance_ratio[..self.retained].iter().sum()
    }
}

fn check_rows(x: &[Vec<f64>]) -> Result<usize> {
    let p = x.first().map_or(0, |r| r.len());
    if let Some(i) = x.iter().position(|r| r.len() != p) {
        return Err(MetricsError::Shape(format!("row {i} has {} columns, expected {p}", x[i].len())));
    }
    Ok(p)
}

/// Fit PCA on the sample covariance (divisor n - 1). Retains the fewest
/// components whose cumulative ratio reaches `variance_target`, capped at
/// `max_components`.
pub fn pca_fit(x: &[Vec<f64>], variance_target: f64, max_components: Option<usize>) -> Result<PcaModel> {
    let n = x.len();
    if n < 2 {
        return Err(MetricsError::Argument(format!("pca needs at least 2 rows, got {n}")));
    }
    if !(variance_target > 0.0 && variance_target <= 1.0) {
        return Err(MetricsError::Argument(format!(
            "variance target must lie in (0, 1], got {variance_target}"
        )));
    }
    let p = check_rows(x)?;
    if p == 0 {
        return Err(MetricsError::Shape("pca needs at least one column".into()));
    }
    let mut mean = vec![0.0; p];
    for r in x {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let centered = DMatrix::from_fn(n, p, |i, j| x[i][j] - mean[j]);
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let components: Vec<Vec<f64>> = order
        .iter()
        .map(|&i| {
            let mut c: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            let big = (0..p).fold(0, |b, j| if c[j].abs() > c[b].abs() { j } else { b });
            if c[big] < 0.0 {
                c.iter_mut().for_each(|v| *v = -*v);
            }
            c
        })
        .collect();

    let total: f64 = eigenvalues.iter().sum();
    let cap = max_components.unwrap_or(p).min(p);
    if !(total > 0.0) {
        log::warn!("pca: data has zero variance, retaining no components");
        return Ok(PcaModel {
            mean,
            components,
            explained_variance_ratio: vec![0.0; p],
            eigenvalues,
            retained: 0,
            degenerate: true,
        });
    }
    let ratios: Vec<f64> = eigenvalues.iter().map(|l| l / total).collect();
    let mut retained = p;
    let mut cum = 0.0;
    for (i, r) in ratios.iter().enumerate() {
        cum += r;
        if cum >= variance_target - 1e-12 {
            retained = i + 1;
            break;
        }
    }
    Ok(PcaModel {
        mean,
        components,
        eigenvalues,
        explained_variance_ratio: ratios,
        retained: retained.min(cap),
        degenerate: false,
    })
}

pub fn pca_transform(model: &PcaModel, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let p = model.mean.len();
    x.iter()
        .enumerate()
        .map(|(i, r)| {
            if r.len() != p {
                return Err(MetricsError::Shape(format!(
                    "row {i} has {} columns, model expects {p}",
                    r.len()
                )));
            }
            Ok(model.components[..model.retained]
                .iter()
                .map(|c| c.iter().zip(r).zip(&model.mean).map(|((c, v), m)| c * (v - m)).sum())
                .collect())
        })
        .collect()
}

/// Maps scores back to feature space through the retained components.
pub fn pca_inverse(model: &PcaModel, scores: &[Vec<f64>]) -> Vec<Vec<f64>> {
    scores
        .iter()
        .map(|s| {
            let mut out = model.mean.clone();
            for (c, &w) in model.components.iter().zip(s) {
                out.iter_mut().zip(c).for_each(|(o, c)| *o += w * c);
            }
            out
        })
        .collect()
}

/// Mann-Whitney AUC of `scores` for the positives; ties count one half.
/// `None` when either side is empty.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the midrank keeps every rank an integer.
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u64;
        for &k in &idx[i..=j] {
            if positive[k] {
                rank_sum2 += twice_mid;
            }
        }
        i = j + 1;
    }
    let n_pos = n_pos as u64;
    // 2U = 2R - n_pos(n_pos + 1)
    let u2 = rank_sum2 - n_pos * (n_pos + 1);
    Some(u2 as f64 / 2.0 / (n_pos as f64 * n_neg as f64))
}

/// One-vs-rest AUC per class from an n x 4 probability matrix.
pub fn auc_ovr(scores: &[[f64; N_CLASSES]], labels: &[usize]) -> Result<[Option<f64>; N_CLASSES]> {
    if scores.len() != labels.len() {
        return Err(MetricsError::Shape(format!(
            "{} score rows but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= N_CLASSES) {
        return Err(MetricsError::Argument(format!("label {l} out of range")));
    }
    let mut out = [None; N_CLASSES];
    for (c, o) in out.iter_mut().enumerate() {
        let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        *o = auc_binary(&col, &pos);
    }
    Ok(out)
}

/// Separable box sums over every valid w x w x w window.
fn box_sums(v: &[f64], dims: [usize; 3], w: usize) -> (Vec<f64>, [usize; 3]) {
    let mut cur = v.to_vec();
    let mut d = dims;
    for axis in 0..3 {
        let out_len = d[axis] - w + 1;
        let mut nd = d;
        nd[axis] = out_len;
        let stride = match axis {
            0 => 1,
            1 => d[0],
            _ => d[0] * d[1],
        };
        let mut next = vec![0.0; nd[0] * nd[1] * nd[2]];
        for z in 0..nd[2] {
            for y in 0..nd[1] {
                for x in 0..nd[0] {
                    let base = x + d[0] * (y + d[1] * z);
                    let s: f64 = (0..w).map(|k| cur[base + k * stride]).sum();
                    next[x + nd[0] * (y + nd[1] * z)] = s;
                }
            }
        }
        cur = next;
        d = nd;
    }
    (cur, d)
}

/// Mean SSIM over all valid cubic windows, uniform weights.
/// `data_range` defaults to the larger of the two volumes' ranges.
pub fn ssim3d(a: &Volume, b: &Volume, window: usize, data_range: Option<f64>) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(MetricsError::Shape(format!("dims {:?} vs {:?}", a.dims(), b.dims())));
    }
    ssim3d_raw(
        &a.data().iter().map(|&v| v as f64).collect::<Vec<_>>(),
        &b.data().iter().map(|&v| v as f64).collect::<Vec<_>>(),
        a.dims(),
        window,
        data_range,
    )
}

pub fn ssim3d_raw(a: &[f64], b: &[f64], dims: [usize; 3], window: usize, data_range: Option<f64>) -> Result<f64> {
    if window % 2 == 0 || window == 0 {
        return Err(MetricsError::Argument(format!("window must be odd, got {window}")));
    }
    if dims.iter().any(|&d| d < window) {
        return Err(MetricsError::Argument(format!("window {window} exceeds dims {dims:?}")));
    }
    let n: usize = dims.iter().product();
    if a.len() != n || b.len() != n {
        return Err(MetricsError::Shape("data length does not match dims".into()));
    }
    let range = data_range.unwrap_or_else(|| {
        let r = |x: &[f64]| {
            let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            hi - lo
        };
        r(a).max(r(b)).max(f64::MIN_POSITIVE)
    });
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let prod = |f: &dyn Fn(usize) -> f64| (0..n).map(f).collect::<Vec<f64>>();
    let (sa, _) = box_sums(a, dims, window);
    let (sb, _) = box_sums(b, dims, window);
    let (saa, _) = box_sums(&prod(&|i| a[i] * a[i]), dims, window);
    let (sbb, _) = box_sums(&prod(&|i| b[i] * b[i]), dims, window);
    let (sab, _) = box_sums(&prod(&|i| a[i] * b[i]), dims, window);
    let m = (window * window * window) as f64;
    let mut total = 0.0;
    for i in 0..sa.len() {
        let (ma, mb) = (sa[i] / m, sb[i] / m);
        let va = saa[i] / m - ma * ma;
        let vb = sbb[i] / m - mb * mb;
        let cov = sab[i] / m - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / sa.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStat {
    pub mean: f64,
    pub std: f64,
}

impl ClassStat {
    pub fn format(&self) -> String {
        format!("{:.2} ± {:.2}", self.mean, self.std)
    }
}

/// Per-class AUC summary over repetitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Stable, mild, moderate, severe; `None` when undefined in every run.
    pub classes: [Option<ClassStat>; N_CLASSES],
    pub runs: usize,
}

impl MetricReport {
    pub fn cell(&self, class: usize) -> String {
        self.classes[class].map_or_else(|| "n/a".to_string(), |s| s.format())
    }

    pub fn mean(&self, label: ProgressionLabel) -> Option<f64> {
        self.classes[label.index()].map(|s| s.mean)
    }
}

/// Mean and sample standard deviation (n - 1) per class.
pub fn aggregate_runs(runs: &[[Option<f64>; N_CLASSES]]) -> Result<MetricReport> {
    let Some(first) = runs.first() else {
        return Err(MetricsError::Argument("need at least one run".into()));
    };
    let mut classes = [None; N_CLASSES];
    for c in 0..N_CLASSES {
        let defined = first[c].is_some();
        if let Some(run) = runs.iter().position(|r| r[c].is_some() != defined) {
            return Err(MetricsError::InconsistentClasses { run, class: c });
        }
        if !defined {
            continue;
        }
        let vals: Vec<f64> = runs.iter().map(|r| r[c].unwrap()).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = if vals.len() > 1 {
            (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        classes[c] = Some(ClassStat { mean, std });
    }
    Ok(MetricReport { classes, runs: runs.len() })
}

/// Rows of named reports, rendered like the AUC tables (columns Stable,
/// Mild, Moderate, Severe).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub title: String,
    pub row_header: String,
    pub rows: Vec<(String, MetricReport)>,
}

impl ReportTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,class,mean,std,runs\n");
        for (name, r) in &self.rows {
            for l in ProgressionLabel::ALL {
                match r.classes[l.index()] {
                    Some(s) => writeln!(out, "{name},{l},{},{},{}", s.mean, s.std, r.runs),
                    None => writeln!(out, "{name},{l},,,{}", r.runs),
                }
                .unwrap();
            }
        }
        out
    }

    /// Fixed-width text table; `*` marks the best mean in each column.
    pub fn to_text(&self) -> String {
        let best: Vec<Option<f64>> = (0..N_CLASSES)
            .map(|c| {
                self.rows
                    .iter()
                    .filter_map(|(_, r)| r.classes[c].map(|s| s.mean))
                    .fold(None, |b: Option<f64>, m| Some(b.map_or(m, |b| b.max(m))))
            })
            .collect();
        let name_w = self.rows.iter().map(|(n, _)| n.chars().count()).chain([self.row_header.len()]).max().unwrap_or(0);
        let mut out = format!("{}\n", self.title);
        write!(out, "{:<name_w$}", self.row_header).unwrap();
        for l in ProgressionLabel::ALL {
            write!(out, "  {:<13}", l.as_str()).unwrap();
        }
        out.push('\n');
        out.push_str(&"-".repeat(name_w + 4 * 15));
        out.push('\n');
        for (name, r) in &self.rows {
            write!(out, "{name:<name_w$}").unwrap();
            for c in 0..N_CLASSES {
                let mark = match (r.classes[c], best[c]) {
                    (Some(s), Some(b)) if s.mean == b => "*",
                    _ => " ",
                };
                write!(out, "  {:<13}", format!("{}{}", r.cell(c), mark)).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MetricsError::Shape(format!("{} vs {} labels", a.len(), b.len())));
    }
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let c2 = |x: u64| (x * x.saturating_sub(1)) as f64 / 2.0;
    let sum_ij: f64 = table.iter().flatten().map(|&x| c2(x)).sum();
    let sum_a: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let sum_b: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let total = c2(n as u64);
    let expected = if total > 0.0 { sum_a * sum_b / total } else { 0.0 };
    let max = (sum_a + sum_b) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((sum_ij - expected) / (max - expected))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// O(n^2) pair counting, ties one half.
    fn auc_pairs(scores: &[f64], pos: &[bool]) -> Option<f64> {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if pos[i] && !pos[j] {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        (den > 0.0).then(|| num / den)
    }

    #[test]
    fn auc_examples() {
        let s = [0.1, 0.4, 0.35, 0.8];
        let p = [false, false, true, true];
        assert_eq!(auc_binary(&s, &p), Some(0.75));
        assert_eq!(auc_binary(&[0.1, 0.2, 0.9, 0.95], &p), Some(1.0));
        assert_eq!(auc_binary(&[0.3; 4], &p), Some(0.5));
        assert_eq!(auc_binary(&s, &[true; 4]), None);
    }

    #[test]
    fn auc_ovr_marks_absent_class() {
        let scores = [[0.7, 0.1, 0.1, 0.1], [0.1, 0.7, 0.1, 0.1], [0.2, 0.6, 0.1, 0.1]];
        let out = auc_ovr(&scores, &[0, 1, 1]).unwrap();
        assert_eq!(out[0], Some(1.0));
        assert_eq!(out[2], None);
        assert_eq!(out[3], None);
        assert!(auc_ovr(&scores, &[0, 1, 4]).is_err());
    }

    #[test]
    fn ssim_analytic() {
        let a = Volume::filled([8, 8, 8], 0.0);
        let b = Volume::filled([8, 8, 8], 255.0);
        let s = ssim3d(&a, &b, 7, Some(255.0)).unwrap();
        let c1 = (0.01f64 * 255.0).powi(2);
        assert!((s - c1 / (255.0 * 255.0 + c1)).abs() < 1e-12);
        assert!((s / 1.0003e-4 - 1.0).abs() < 1e-3);
        let data: Vec<f32> = (0..512).map(|i| ((i * 37) % 101) as f32).collect();
        let v = Volume::new([8, 8, 8], [1.0; 3], data).unwrap();
        assert!((ssim3d(&v, &v, 7, None).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim3d(&v, &Volume::filled([8, 8, 7], 0.0), 7, None).is_err());
        assert!(ssim3d(&v, &v, 4, None).is_err());
    }

    #[test]
    fn ssim_symmetric() {
        let a: Vec<f32> = (0..1000).map(|i| ((i * 13) % 17) as f32).collect();
        let b: Vec<f32> = (0..1000).map(|i| ((i * 7) % 23) as f32).collect();
        let a = Volume::new([10, 10, 10], [1.0; 3], a).unwrap();
        let b = Volume::new([10, 10, 10], [1.0; 3], b).unwrap();
        let ab = ssim3d(&a, &b, 7, Some(255.0)).unwrap();
        let ba = ssim3d(&b, &a, 7, Some(255.0)).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab < 1.0 && ab > -1.0);
    }

    #[test]
    fn aggregate_examples() {
        let r = aggregate_runs(&[[Some(0.7); 4]; 3]).unwrap();
        assert_eq!(r.cell(0), "0.70 ± 0.00");
        let r = aggregate_runs(&[[Some(0.6); 4], [Some(0.8); 4]]).unwrap();
        let s = r.classes[0].unwrap();
        assert!((s.std - 0.2 / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.cell(0), "0.70 ± 0.14");
        let r = aggregate_runs(&[[Some(0.63), None, Some(0.5), Some(0.1)]]).unwrap();
        assert_eq!(r.classes[0].unwrap(), ClassStat { mean: 0.63, std: 0.0 });
        assert_eq!(r.cell(1), "n/a");
        assert!(matches!(
            aggregate_runs(&[[Some(0.5); 4], [None; 4]]),
            Err(MetricsError::InconsistentClasses { run: 1, class: 0 })
        ));
        assert!(aggregate_runs(&[]).is_err());
    }

    #[test]
    fn pca_line_and_isotropic() {
        let line: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 2.0 * i as f64 + 1.0]).collect();
        let m = pca_fit(&line, 0.95, None).unwrap();
        assert_eq!(m.retained, 1);
        assert!((m.explained_variance_ratio[0] - 1.0).abs() < 1e-9);

        // a symmetric cross has equal variance along both axes
        let iso = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
        let m = pca_fit(&iso, 0.95, None).unwrap();
        assert_eq!(m.retained, 2);

        let flat = vec![vec![3.0, 3.0]; 5];
        let m = pca_fit(&flat, 0.95, None).unwrap();
        assert!(m.degenerate);
        assert_eq!(m.retained, 0);
        assert!(pca_fit(&flat[..1], 0.95, None).is_err());
    }

    #[test]
    fn pca_sign_and_mean_row() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, -(i as f64) * 0.5, (i % 3) as f64]).collect();
        let m = pca_fit(&x, 1.0, None).unwrap();
        for c in &m.components {
            let big = c.iter().cloned().fold(0.0f64, |b, v| if v.abs() > b.abs() { v } else { b });
            assert!(big > 0.0);
        }
        let z = pca_transform(&m, &[m.mean.clone()]).unwrap();
        assert!(z[0].iter().all(|v| v.abs() < 1e-12));
        assert!(pca_transform(&m, &[vec![1.0]]).is_err());
        // full basis reconstructs exactly
        let back = pca_inverse(&m, &pca_transform(&m, &x).unwrap());
        for (r, b) in x.iter().zip(&back) {
            for (u, v) in r.iter().zip(b) {
                assert!((u - v).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn ari_basics() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
        assert!(v < 0.0);
    }

    #[test]
    fn table_rendering() {
        let t = ReportTable {
            title: "AUC".into(),
            row_header: "Method".into(),
            rows: vec![
                ("A".into(), aggregate_runs(&[[Some(0.6), Some(0.7), Some(0.5), None]]).unwrap()),
                ("B".into(), aggregate_runs(&[[Some(0.8), Some(0.2), Some(0.5), None]]).unwrap()),
            ],
        };
        let text = t.to_text();
        assert!(text.contains("Stable"));
        assert!(text.contains("0.80 ± 0.00*"));
        assert!(text.contains("n/a"));
        assert_eq!(t.to_csv().lines().count(), 1 + 2 * 4);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
            (2usize..50).prop_flat_map(|n| {
                (
                    prop::collection::vec((0u8..8).prop_map(|v| v as f64 / 8.0), n),
                    prop::collection::vec(any::<bool>(), n),
                )
            })
        }

        proptest! {
            #[test]
            fn rank_auc_equals_pair_count((s, p) in instance()) {
                prop_assert_eq!(auc_binary(&s, &p), auc_pairs(&s, &p));
            }

            #[test]
            fn auc_monotone_invariant_and_complement((s, p) in instance()) {
                if let Some(a) = auc_binary(&s, &p) {
                    let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp()).collect();
                    prop_assert_eq!(auc_binary(&t, &p), Some(a));
                    let c: Vec<f64> = s.iter().map(|v| 1.0 - v).collect();
                    prop_assert!((auc_binary(&c, &p).unwrap() + a - 1.0).abs() < 1e-12);
                }
            }

            #[test]
            fn pca_scores_decorrelated(rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 6..30)) {
                let m = pca_fit(&rows, 1.0, None).unwrap();
                let z = pca_transform(&m, &rows).unwrap();
                let n = z.len() as f64;
                for a in 0..m.retained {
                    for b in 0..a {
                        let cov: f64 = z.iter().map(|r| r[a] * r[b]).sum::<f64>() / (n - 1.0);
                        prop_assert!(cov.abs() < 1e-6);
                    }
                }
                let cap = pca_fit(&rows, 0.95, Some(2)).unwrap();
                prop_assert!(cap.retained <= 2);
            }
        }
    }
}
