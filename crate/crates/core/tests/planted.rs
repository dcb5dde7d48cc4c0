use declineforge_core::metrics::auc_binary;
use declineforge_core::models::{
    build_vit, pretrain_reconstruction, train_cnn_baseline, CnnConfig, FcHead, FcHeadConfig, TabularAeConfig,
    TabularAutoencoder, ViTConfig,
};
use declineforge_core::rng::{self, Rng};
use declineforge_core::synthcohort::{gen_tabular, gen_volumes, NoiseLevels};
use declineforge_core::volio::normalize_intensity;
use declineforge_core::{CohortSpec, FeatureGroup, ProgressionLabel, TrainConfig, Volume};
use rand::Rng as _;

fn accuracy(probs: &[[f64; 4]], labels: &[usize]) -> f64 {
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(p, &y)| (0..4).max_by(|&a, &b| p[a].total_cmp(&p[b])) == Some(y))
        .count();
    hits as f64 / labels.len() as f64
}

fn balanced(n: usize) -> Vec<usize> {
    (0..n).map(|i| i % 4).collect()
}

fn separable_embeddings(rng: &mut Rng, labels: &[usize], d: usize) -> Vec<Vec<f64>> {
    labels
        .iter()
        .map(|&y| (0..d).map(|j| if j == y { 3.0 } else { 0.0 } + rng.random_range(-0.5..0.5)).collect())
        .collect()
}

#[test]
fn fc_head_fits_separable_embeddings() {
    let labels = balanced(80);
    let x = separable_embeddings(&mut rng::seeded(4), &labels, 16);
    let head = FcHead::fit(&x, &labels, &FcHeadConfig::default()).unwrap();
    let acc = accuracy(&head.predict_proba(&x).unwrap(), &labels);
    assert!(acc >= 0.95, "training accuracy {acc}");
}

fn zero_noise_cohort(n: usize, dims: [usize; 3]) -> (Vec<ProgressionLabel>, Vec<Volume>) {
    let spec = CohortSpec {
        n_subjects: n,
        group_proportions: [0.25; 4],
        volume_dims: dims,
        noise: NoiseLevels::zero(),
        ..CohortSpec::default()
    };
    let groups = spec.planted_groups().unwrap();
    let vols = gen_volumes(&groups, &spec).unwrap().iter().map(normalize_intensity).collect();
    (groups, vols)
}

#[test]
fn cnn_learns_planted_atrophy() {
    let (groups, vols) = zero_noise_cohort(48, [24; 3]);
    let labels: Vec<usize> = groups.iter().map(|g| g.index()).collect();
    let model = train_cnn_baseline(&vols, &labels, &CnnConfig::default()).unwrap();
    let acc = accuracy(&model.predict_proba(&vols).unwrap(), &labels);
    assert!(acc >= 0.9, "training accuracy {acc}");
}

#[test]
fn cnn_on_constant_inputs_is_at_chance() {
    let labels = balanced(32);
    let vols = vec![Volume::filled([16; 3], 100.0); labels.len()];
    let cfg = CnnConfig { train: TrainConfig { epochs: 5, ..CnnConfig::default().train }, ..CnnConfig::default() };
    let model = train_cnn_baseline(&vols, &labels, &cfg).unwrap();
    let acc = accuracy(&model.predict_proba(&vols).unwrap(), &labels);
    assert!((acc - 0.25).abs() <= 0.1, "accuracy {acc}");
}

#[test]
fn autoencoder_recovers_rank_one_group() {
    let mut rng = rng::seeded(5);
    let rows: Vec<Vec<Option<f64>>> = (0..120)
        .map(|_| {
            let z: f64 = rng.random_range(-2.0..2.0);
            [1.0, -2.0, 0.5, 3.0].iter().map(|c| Some(c * z + 10.0)).collect()
        })
        .collect();
    let ae = TabularAutoencoder::fit(&rows, &["a", "b", "c", "d"], &TabularAeConfig::default()).unwrap();
    assert_eq!(ae.latent, 2);
    let mse = ae.reconstruction_mse(&rows).unwrap();
    assert!(mse <= 1e-2, "reconstruction mse {mse}");
    assert_eq!(ae.transform(&rows[..3]).unwrap(), ae.transform(&rows[..3]).unwrap());
}

fn mean_distance(a: &[Vec<f64>], b: &[Vec<f64>], same: bool) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            if same && j <= i {
                continue;
            }
            total += x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn embeddings_separate_stable_from_severe() {
    let (groups, vols) = zero_noise_cohort(16, [16; 3]);
    let cfg = ViTConfig { vol_dims: [16; 3], embed_dim: 16, depth: 1, heads: 2, ..ViTConfig::default() };
    let mut model = build_vit(&cfg, 3).unwrap();
    let train = TrainConfig { epochs: 10, learning_rate: 1e-3, batch_size: 4, ..TrainConfig::default() };
    let history = pretrain_reconstruction(&mut model, &vols, &vols, &[], &train).unwrap();
    assert!(history.train_mse.last() < history.train_mse.first());
    let pick = |label| -> Vec<Vec<f64>> {
        groups.iter().zip(&vols).filter(|(g, _)| **g == label).map(|(_, v)| model.embed(v).unwrap()).collect()
    };
    let (stable, severe) = (pick(ProgressionLabel::Stable), pick(ProgressionLabel::Severe));
    let intra = 0.5 * (mean_distance(&stable, &stable, true) + mean_distance(&severe, &severe, true));
    let inter = mean_distance(&stable, &severe, false);
    assert!(inter > intra, "inter {inter} intra {intra}");
}

#[test]
fn cognitive_scores_carry_linear_severity_signal() {
    let spec = CohortSpec { n_subjects: 400, ..CohortSpec::default() };
    let groups = spec.planted_groups().unwrap();
    let records = gen_tabular(&groups, &spec);
    let mut rows = Vec::new();
    let mut positive = Vec::new();
    for (r, g) in records.iter().zip(&groups) {
        if matches!(g, ProgressionLabel::Stable | ProgressionLabel::Severe) {
            rows.push(r.group(FeatureGroup::Cognitive).to_vec());
            positive.push(*g == ProgressionLabel::Severe);
        }
    }
    let d = rows[0].len();
    let filled: Vec<Vec<f64>> = (0..rows.len())
        .map(|i| {
            (0..d)
                .map(|j| {
                    rows[i][j].unwrap_or_else(|| {
                        let seen: Vec<f64> = rows.iter().filter_map(|r| r[j]).collect();
                        seen.iter().sum::<f64>() / seen.len() as f64
                    })
                })
                .collect()
        })
        .collect();
    let n = filled.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| filled.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> =
        (0..d).map(|j| (filled.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-9)).collect();
    let x: Vec<Vec<f64>> =
        filled.iter().map(|r| (0..d).map(|j| (r[j] - mean[j]) / sd[j]).collect()).collect();

    let mut w = vec![0.0; d + 1];
    for _ in 0..500 {
        let mut grad = vec![0.0; d + 1];
        for (xi, &yi) in x.iter().zip(&positive) {
            let z = w[d] + xi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - if yi { 1.0 } else { 0.0 };
            for j in 0..d {
                grad[j] += err * xi[j];
            }
            grad[d] += err;
        }
        for j in 0..=d {
            w[j] -= 0.5 * grad[j] / n;
        }
    }
    let scores: Vec<f64> = x.iter().map(|xi| w[d] + xi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()).collect();
    let auc = auc_binary(&scores, &positive).unwrap();
    assert!(auc > 0.85, "severe vs stable auc {auc}");
}
