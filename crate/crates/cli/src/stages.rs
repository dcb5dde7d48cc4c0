//! Pipeline stages. Each stage reads its inputs from the workspace, writes
//! into its own subdirectory and records completion in the manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use declineforge_core::augment::{make_training_set, training_set_sources, AugmentConfig};
use declineforge_core::gbt::{fit_gbt, predict_proba as gbt_predict};
use declineforge_core::metrics::{adjusted_rand_index, aggregate_runs, auc_ovr, pca_fit, pca_transform, ReportTable};
use declineforge_core::models::{
    build_vit, embeddings_from_csv, embeddings_to_csv, extract_embeddings, pretrain_reconstruction,
    train_cnn_baseline, train_tabular_autoencoder, FcHead, ReconHistory, VitModel,
};
use declineforge_core::rng;
use declineforge_core::synthcohort::{
    gen_tabular, gen_trajectories, gen_volumes, read_tabular_csv, read_trajectories_csv, strata_subjects,
    stratified_split, write_tabular_csv, write_trajectories_csv,
};
use declineforge_core::trajectory::{assign_labels, elbow_curve, kmeans_dtw};
use declineforge_core::volio::{load_volume, normalize_intensity, save_volume};
use declineforge_core::{
    ClusterModel, CohortSpec, FeatureGroup, GbtParams, MetricReport, ProgressionLabel, SplitSpec, TabularRecord,
    Volume, N_CLASSES,
};

use crate::config::PipelineConfig;
use crate::error::{io_err, CliError, Result};
use crate::manifest::{RunManifest, Stage};
use crate::plots::{self, Panel, Series, PALETTE};

/// Whether a stage ran or was skipped as already complete.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    UpToDate,
}

/// AUC tables written by the evaluate stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResults {
    /// Tabular feature groups.
    pub table1: ReportTable,
    /// Imaging methods against the volumetric baseline.
    pub table2: ReportTable,
}

impl EvaluationResults {
    pub fn row(&self, name: &str) -> Option<&MetricReport> {
        self.table1.rows.iter().chain(&self.table2.rows).find(|(n, _)| n == name).map(|(_, r)| r)
    }

    pub fn load(workspace: &Path) -> Result<Self> {
        let path = workspace.join("evaluate/results.json");
        let text = read_text(&path)?;
        serde_json::from_str(&text).map_err(|e| CliError::stage("evaluate", format!("{}: {e}", path.display())))
    }
}

pub const VIT_GBT: &str = "ViT + GBT";
pub const VIT_FC: &str = "ViT + FC";
pub const CNN: &str = "CNN baseline";

type Seeds = BTreeMap<String, u64>;

struct StageOutput {
    files: Vec<String>,
    seeds: Seeds,
}

impl StageOutput {
    fn new() -> Self {
        Self { files: Vec::new(), seeds: Seeds::new() }
    }

    fn seed(&mut self, name: &str, value: u64) -> u64 {
        self.seeds.insert(name.to_string(), value);
        value
    }
}

pub struct Pipeline {
    cfg: PipelineConfig,
    ws: PathBuf,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

fn dir_has_entries(dir: &Path) -> bool {
    std::fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let ws = cfg.ensure_workspace()?;
        Ok(Self { cfg, ws })
    }

    pub fn workspace(&self) -> &Path {
        &self.ws
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.ws.join(stage.name())
    }

    fn manifest(&self, force: bool) -> Result<RunManifest> {
        let hash = self.cfg.hash();
        match RunManifest::read(&self.ws)? {
            None => Ok(RunManifest::new(hash)),
            Some(m) if m.config_hash == hash => Ok(m),
            Some(_) if force => Ok(RunManifest::new(hash)),
            Some(m) => Err(CliError::Config(format!(
                "workspace {} was produced by another configuration (hash {}); pass --force or use a fresh workspace",
                self.ws.display(),
                m.config_hash
            ))),
        }
    }

    fn clear_dir(&self, stage: Stage) -> Result<()> {
        let dir = self.stage_dir(stage);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        Ok(())
    }

    /// Runs one stage. Existing outputs are refused unless `force`, which
    /// also invalidates every downstream stage.
    pub fn run_stage(&self, stage: Stage, force: bool) -> Result<()> {
        let mut manifest = self.manifest(force)?;
        if let Some(missing) = manifest.missing_upstream(stage) {
            return Err(CliError::Dependency { stage: stage.name(), missing: missing.name() });
        }
        let dir = self.stage_dir(stage);
        if manifest.is_complete(stage) || dir_has_entries(&dir) {
            if !force {
                return Err(CliError::Collision { stage: stage.name(), path: dir });
            }
        }
        self.clear_dir(stage)?;
        for &s in stage.downstream() {
            self.clear_dir(s)?;
        }
        manifest.invalidate_from(stage);
        manifest.write(&self.ws)?;
        self.execute(stage, &mut manifest)
    }

    fn execute(&self, stage: Stage, manifest: &mut RunManifest) -> Result<()> {
        let dir = self.stage_dir(stage);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        log::info!("stage {stage}: running");
        let out = match stage {
            Stage::Synth => self.synth(),
            Stage::Cluster => self.cluster(),
            Stage::Split => self.split(),
            Stage::Pretrain => self.pretrain(),
            Stage::Embed => self.embed(),
            Stage::Evaluate => self.evaluate(),
            Stage::Report => self.report(),
        }
        .map_err(|e| match e {
            CliError::Stage { detail, .. } => CliError::Stage { stage: stage.name(), detail },
            other => other,
        })?;
        manifest.mark_complete(stage, out.files, out.seeds);
        manifest.write(&self.ws)?;
        log::info!("stage {stage}: done");
        Ok(())
    }

    /// Runs every incomplete stage in order. Completed stages are kept;
    /// partial outputs from an interrupted stage are discarded first.
    pub fn run_all(&self, force: bool) -> Result<Vec<(Stage, Outcome)>> {
        let mut manifest = self.manifest(force)?;
        if force {
            for s in Stage::ALL {
                self.clear_dir(s)?;
            }
            manifest = RunManifest::new(self.cfg.hash());
            manifest.write(&self.ws)?;
        }
        let mut outcomes = Vec::new();
        for stage in Stage::ALL {
            if manifest.is_complete(stage) {
                outcomes.push((stage, Outcome::UpToDate));
                continue;
            }
            self.clear_dir(stage)?;
            self.execute(stage, &mut manifest)?;
            outcomes.push((stage, Outcome::Ran));
        }
        Ok(outcomes)
    }

    fn write(&self, out: &mut StageOutput, rel: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.ws.join(rel);
        std::fs::write(&path, contents).map_err(io_err(&path))?;
        out.files.push(rel.to_string());
        Ok(())
    }

    fn synth(&self) -> Result<StageOutput> {
        let mut out = StageOutput::new();
        let spec = CohortSpec { seed: out.seed("cohort", rng::derive(self.cfg.seed, "cohort")), ..self.cfg.cohort.clone() };
        let cohort = gen_trajectories(&spec).map_err(|e| CliError::stage("synth", e))?;
        let groups: Vec<ProgressionLabel> = cohort.iter().map(|c| c.1).collect();
        let trajectories: Vec<_> = cohort.iter().map(|c| c.0.clone()).collect();
        let tabular = gen_tabular(&groups, &spec);
        let volumes = gen_volumes(&groups, &spec).map_err(|e| CliError::stage("synth", e))?;

        self.write(&mut out, "synth/trajectories.csv", write_trajectories_csv(&trajectories))?;
        self.write(&mut out, "synth/tabular.csv", write_tabular_csv(&tabular))?;
        let mut truth = String::from("subject_id,group\n");
        for (t, g) in &cohort {
            writeln!(truth, "{},{g}", t.subject_id).unwrap();
        }
        self.write(&mut out, "synth/truth.csv", truth)?;
        let vdir = self.ws.join("synth/volumes");
        std::fs::create_dir_all(&vdir).map_err(io_err(&vdir))?;
        for (t, v) in trajectories.iter().zip(&volumes) {
            let rel = volume_rel(&t.subject_id);
            save_volume(&normalize_intensity(v), self.ws.join(&rel)).map_err(|e| CliError::stage("synth", e))?;
            out.files.push(rel);
        }
        Ok(out)
    }

    pub fn read_trajectories(&self) -> Result<Vec<declineforge_core::Trajectory>> {
        read_trajectories_csv(&read_text(&self.ws.join("synth/trajectories.csv"))?)
            .map_err(|e| CliError::stage("cluster", e))
    }

    pub fn read_tabular(&self) -> Result<Vec<TabularRecord>> {
        read_tabular_csv(&read_text(&self.ws.join("synth/tabular.csv"))?).map_err(|e| CliError::stage("split", e))
    }

    /// Planted group per subject from the synth stage.
    pub fn read_truth(&self) -> Result<BTreeMap<String, ProgressionLabel>> {
        read_label_csv(&self.ws.join("synth/truth.csv"), 1)
    }

    /// Trajectory-derived label per subject from the cluster stage.
    pub fn read_labels(&self) -> Result<BTreeMap<String, ProgressionLabel>> {
        read_label_csv(&self.ws.join("cluster/assignments.csv"), 2)
    }

    pub fn read_split(&self) -> Result<SplitSpec> {
        let path = self.ws.join("split/split.json");
        serde_json::from_str(&read_text(&path)?).map_err(|e| CliError::stage("split", format!("{}: {e}", path.display())))
    }

    pub fn read_volume(&self, subject_id: &str) -> Result<Volume> {
        load_volume(self.ws.join(volume_rel(subject_id))).map_err(|e| CliError::stage("synth", e))
    }

    fn cluster(&self) -> Result<StageOutput> {
        let mut out = StageOutput::new();
        let trajectories = self.read_trajectories()?;
        let seed = out.seed("kmeans", rng::derive(self.cfg.seed, "kmeans"));
        let km = &self.cfg.clustering.kmeans;
        let elbow = elbow_curve(&trajectories, self.cfg.clustering.k_max, km, seed)
            .map_err(|e| CliError::stage("cluster", e))?;
        let model = kmeans_dtw(&trajectories, km, seed).map_err(|e| CliError::stage("cluster", e))?;
        let labels = assign_labels(&model).map_err(|e| CliError::stage("cluster", e))?;
        let order = model.label_order.clone().expect("k = 4 models carry a label order");

        let mut csv = String::from("subject_id,cluster,label\n");
        for (id, &c) in model.subject_ids.iter().zip(&model.assignments) {
            writeln!(csv, "{id},{c},{}", labels[id]).unwrap();
        }
        self.write(&mut out, "cluster/assignments.csv", csv)?;
        let mut csv = String::from("cluster,label,step,value\n");
        for (c, b) in model.barycenters.iter().enumerate() {
            for (i, v) in b.iter().enumerate() {
                writeln!(csv, "{c},{},{i},{v}", order[c]).unwrap();
            }
        }
        self.write(&mut out, "cluster/barycenters.csv", csv)?;
        let mut csv = String::from("k,inertia\n");
        for (k, inertia) in &elbow {
            writeln!(csv, "{k},{inertia}").unwrap();
        }
        self.write(&mut out, "cluster/elbow.csv", csv)?;
        self.write(&mut out, "cluster/model.json", serde_json::to_string_pretty(&model).expect("model serializes"))?;

        let pts = elbow.iter().map(|&(k, i)| (k as f64, i)).collect();
        let svg = plots::line_chart(
            "Elbow curve",
            "k",
            "inertia",
            vec![Series { markers: true, ..Series::line(pts, PALETTE[1]) }],
        );
        self.write(&mut out, "cluster/elbow.svg", svg)?;
        self.write(&mut out, "cluster/trajectories.svg", trajectory_plot(&model, &trajectories, self.cfg.cohort.visit_spacing_months))?;
        Ok(out)
    }

    fn split(&self) -> Result<StageOutput> {
        let mut out = StageOutput::new();
        let records = self.read_tabular()?;
        let labels = self.read_labels()?;
        let split = self.draw_split(&records, &labels, out.seed("split", rng::derive(self.cfg.seed, "split")))?;
        self.write(&mut out, "split/split.json", serde_json::to_string_pretty(&split).expect("split serializes"))?;
        let mut csv = String::from("partition,label,count\n");
        for (name, ids) in [("train", &split.train_ids), ("test", &split.test_ids)] {
            for l in ProgressionLabel::ALL {
                let n = ids.iter().filter(|id| labels.get(*id) == Some(&l)).count();
                writeln!(csv, "{name},{l},{n}").unwrap();
            }
        }
        self.write(&mut out, "split/counts.csv", csv)?;
        Ok(out)
    }

    fn draw_split(
        &self,
        records: &[TabularRecord],
        labels: &BTreeMap<String, ProgressionLabel>,
        seed: u64,
    ) -> Result<SplitSpec> {
        let groups = records
            .iter()
            .map(|r| {
                labels
                    .get(&r.subject_id)
                    .copied()
                    .ok_or_else(|| CliError::stage("split", format!("no cluster label for {}", r.subject_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let subjects = strata_subjects(records, &groups).map_err(|e| CliError::stage("split", e))?;
        stratified_split(&subjects, self.cfg.split.test_ratio, seed).map_err(|e| CliError::stage("split", e))
    }

    fn pretrain(&self) -> Result<StageOutput> {
        let mut out = StageOutput::new();
        let split = self.read_split()?;
        let originals: Vec<Volume> = split.train_ids.iter().map(|id| self.read_volume(id)).collect::<Result<_>>()?;
        let aug = &self.cfg.augmentation;
        let params = AugmentConfig {
            seed: out.seed("augment", rng::derive(self.cfg.seed, "augment")),
            ..aug.params.clone()
        };
        let augmented = make_training_set(&originals, &params, aug.copies_per_volume)
            .map_err(|e| CliError::stage("pretrain", e))?;
        let p = &self.cfg.pretraining;
        let sources = training_set_sources(originals.len(), aug.copies_per_volume);
        let skip = if aug.include_originals { 0 } else { originals.len() };
        let mut inputs = Vec::with_capacity(augmented.len() - skip);
        let mut targets = Vec::with_capacity(augmented.len() - skip);
        for (v, &src) in augmented.iter().zip(&sources).skip(skip) {
            inputs.push(v.clone());
            targets.push(if p.clean_targets { originals[src].clone() } else { v.clone() });
        }
        if inputs.is_empty() {
            return Err(CliError::Config("pretraining set is empty; enable originals or copies".into()));
        }
        let mut model = build_vit(&p.vit, out.seed("vit_init", rng::derive(self.cfg.seed, "vit-init")))
            .map_err(|e| CliError::model("pretrain", e))?;
        let train = declineforge_core::TrainConfig { seed: out.seed("pretrain", rng::derive(self.cfg.seed, "pretrain")), ..p.train };
        let monitor: Vec<Volume> =
            split.test_ids.iter().take(p.monitor_count).map(|id| self.read_volume(id)).collect::<Result<_>>()?;
        log::info!("pretraining on {} volumes for {} epochs", inputs.len(), train.epochs);
        let history = pretrain_reconstruction(&mut model, &inputs, &targets, &monitor, &train)
            .map_err(|e| CliError::model("pretrain", e))?;
        let ckpt = self.ws.join("pretrain/encoder.ckpt");
        model.save(&ckpt).map_err(|e| CliError::model("pretrain", e))?;
        out.files.push("pretrain/encoder.ckpt".into());
        self.write(&mut out, "pretrain/history.csv", history.to_csv())?;
        self.write(&mut out, "pretrain/loss.svg", curve_plot("Reconstruction loss", "train MSE", &history.train_mse, PALETTE[2]))?;
        self.write(&mut out, "pretrain/ssim.svg", curve_plot("Monitoring SSIM", "SSIM", &history.monitor_ssim, PALETTE[0]))?;
        Ok(out)
    }

    pub fn read_history(&self) -> Result<ReconHistory> {
        let text = read_text(&self.ws.join("pretrain/history.csv"))?;
        let mut h = ReconHistory::default();
        for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
            let cells: Vec<f64> = line.split(',').map(|c| c.parse().unwrap_or(f64::NAN)).collect();
            h.train_mse.push(cells.get(1).copied().unwrap_or(f64::NAN));
            h.monitor_ssim.push(cells.get(2).copied().unwrap_or(f64::NAN));
        }
        Ok(h)
    }

    pub fn load_encoder(&self) -> Result<VitModel> {
        VitModel::load(self.ws.join("pretrain/encoder.ckpt")).map_err(|e| CliError::model("embed", e))
    }

    fn embed(&self) -> Result<StageOutput> {
        let mut out = StageOutput::new();
        let model = self.load_encoder()?;
        let ids: Vec<String> = self.read_truth()?.into_keys().collect();
        let volumes: Vec<Volume> = ids.iter().map(|id| self.read_volume(id)).collect::<Result<_>>()?;
        let emb = extract_embeddings(&model, &ids, &volumes).map_err(|e| CliError::model("embed", e))?;
        self.write(&mut out, "embed/embeddings.csv", embeddings_to_csv(&emb))?;
        Ok(out)
    }

    pub fn read_embeddings(&self) -> Result<BTreeMap<String, Vec<f64>>> {
        let emb = embeddings_from_csv(&read_text(&self.ws.join("embed/embeddings.csv"))?)
            .map_err(|e| CliError::model("embed", e))?;
        Ok(emb.into_iter().map(|e| (e.subject_id, e.vector)).collect())
    }

    fn evaluate(&self) -> Result<StageOutput> {
        let mut out = StageOutput::new();
        let records = self.read_tabular()?;
        let labels = self.read_labels()?;
        let fixed = self.read_split()?;
        let embeddings = self.read_embeddings()?;
        let volumes: BTreeMap<String, Volume> =
            labels.keys().map(|id| Ok((id.clone(), self.read_volume(id)?))).collect::<Result<_>>()?;
        let classifiers = &self.cfg.classifiers;
        let mut runs: BTreeMap<String, Vec<[Option<f64>; N_CLASSES]>> = BTreeMap::new();
        let mut runs_csv = String::from("repetition,method,class,auc\n");

        for r in 0..self.cfg.evaluation.repetitions {
            let rs = out.seed(&format!("repetition_{r}"), rng::derive_indexed(self.cfg.seed, "repetition", r as u64));
            let split = if self.cfg.evaluation.resplit {
                self.draw_split(&records, &labels, rng::derive(rs, "split"))?
            } else {
                fixed.clone()
            };
            let train_ids: Vec<&String> = split.train_ids.iter().collect();
            let y_train: Vec<usize> = train_ids.iter().map(|id| labels[*id].index()).collect();
            let scorer = Scorer { labels: &labels, test_ids: split.test_ids.iter().collect() };
            let mut record = |name: &str, probs: Vec<[f64; N_CLASSES]>| -> Result<()> {
                let aucs = scorer.score(&probs)?;
                for (c, a) in aucs.iter().enumerate() {
                    let cell = a.map_or(String::new(), |v| v.to_string());
                    writeln!(runs_csv, "{r},{name},{},{cell}", ProgressionLabel::ALL[c]).unwrap();
                }
                runs.entry(name.to_string()).or_default().push(aucs);
                Ok(())
            };

            for (gi, group) in FeatureGroup::ALL.into_iter().enumerate() {
                let mut ae = classifiers.tabular_ae.clone();
                ae.train.seed = rng::derive_indexed(rs, "tabular-ae", gi as u64);
                let (_, latents) = train_tabular_autoencoder(&records, group, &split.train_ids, &ae)
                    .map_err(|e| CliError::model("evaluate", e))?;
                let xtr = pick(&latents, &train_ids)?;
                let xte = pick(&latents, &scorer.test_ids)?;
                let probs = gbt_probs(&classifiers.gbt, rng::derive_indexed(rs, "gbt", gi as u64), &xtr, &y_train, &xte)?;
                record(group.title(), probs)?;
            }

            let etr = pick(&embeddings, &train_ids)?;
            let ete = pick(&embeddings, &scorer.test_ids)?;
            let red = &self.cfg.reduction;
            let pca = pca_fit(&etr, red.variance_target, Some(red.max_components)).map_err(|e| CliError::stage("evaluate", e))?;
            let ztr = pca_transform(&pca, &etr).map_err(|e| CliError::stage("evaluate", e))?;
            let zte = pca_transform(&pca, &ete).map_err(|e| CliError::stage("evaluate", e))?;
            let probs = gbt_probs(&classifiers.gbt, rng::derive(rs, "vit-gbt"), &ztr, &y_train, &zte)?;
            record(VIT_GBT, probs)?;

            let mut fc = classifiers.fc_head.clone();
            fc.train.seed = rng::derive(rs, "fc-head");
            let head = FcHead::fit(&etr, &y_train, &fc).map_err(|e| CliError::model("evaluate", e))?;
            record(VIT_FC, head.predict_proba(&ete).map_err(|e| CliError::model("evaluate", e))?)?;

            let mut cnn = classifiers.cnn.clone();
            cnn.train.seed = rng::derive(rs, "cnn");
            let vtr: Vec<Volume> = train_ids.iter().map(|id| volumes[*id].clone()).collect();
            let vte: Vec<Volume> = scorer.test_ids.iter().map(|id| volumes[*id].clone()).collect();
            let model = train_cnn_baseline(&vtr, &y_train, &cnn).map_err(|e| CliError::model("evaluate", e))?;
            record(CNN, model.predict_proba(&vte).map_err(|e| CliError::model("evaluate", e))?)?;
            log::info!("evaluation repetition {} of {} done", r + 1, self.cfg.evaluation.repetitions);
        }

        let report = |name: &str| -> Result<(String, MetricReport)> {
            let agg = aggregate_runs(&propagate_undefined(&runs[name])).map_err(|e| CliError::stage("evaluate", e))?;
            Ok((name.to_string(), agg))
        };
        let table1 = ReportTable {
            title: "Test AUC (mean ± std) by tabular feature set".into(),
            row_header: "Feature Set".into(),
            rows: FeatureGroup::ALL.iter().map(|g| report(g.title())).collect::<Result<_>>()?,
        };
        let table2 = ReportTable {
            title: "Test AUC (mean ± std) by method".into(),
            row_header: "Method".into(),
            rows: [FeatureGroup::Volumetrics.title(), VIT_GBT, VIT_FC, CNN].iter().map(|n| report(n)).collect::<Result<_>>()?,
        };
        self.write(&mut out, "evaluate/runs.csv", runs_csv)?;
        self.write(&mut out, "evaluate/table1.csv", table1.to_csv())?;
        self.write(&mut out, "evaluate/table1.txt", table1.to_text())?;
        self.write(&mut out, "evaluate/table2.csv", table2.to_csv())?;
        self.write(&mut out, "evaluate/table2.txt", table2.to_text())?;
        let results = EvaluationResults { table1, table2 };
        self.write(&mut out, "evaluate/results.json", serde_json::to_string_pretty(&results).expect("results serialize"))?;
        Ok(out)
    }

    fn report(&self) -> Result<StageOutput> {
        let mut out = StageOutput::new();
        let truth = self.read_truth()?;
        let labels = self.read_labels()?;
        let a: Vec<usize> = truth.values().map(|l| l.index()).collect();
        let b: Vec<usize> = truth.keys().map(|id| labels.get(id).map_or(N_CLASSES, |l| l.index())).collect();
        let ari = adjusted_rand_index(&a, &b).map_err(|e| CliError::stage("report", e))?;
        let history = self.read_history()?;
        let results = EvaluationResults::load(&self.ws)?;
        let elbow = read_text(&self.ws.join("cluster/elbow.csv"))?;

        let mut md = String::from("# Pipeline report\n\n");
        writeln!(md, "Configuration hash: `{}`\n", self.cfg.hash()).unwrap();
        writeln!(md, "## Trajectory clustering\n").unwrap();
        writeln!(md, "Adjusted Rand index against the planted groups: {ari:.4}\n").unwrap();
        writeln!(md, "| k | inertia |\n|---|---|").unwrap();
        for line in elbow.lines().skip(1) {
            if let Some((k, i)) = line.split_once(',') {
                let i: f64 = i.parse().unwrap_or(f64::NAN);
                writeln!(md, "| {k} | {i:.3} |").unwrap();
            }
        }
        writeln!(md, "\n## Reconstruction pretraining\n").unwrap();
        if let (Some(first), Some(last)) = (history.train_mse.first(), history.train_mse.last()) {
            let ssim = history.monitor_ssim.last().copied().unwrap_or(f64::NAN);
            writeln!(
                md,
                "{} epochs; train MSE {first:.5} -> {last:.5}; final monitoring SSIM {ssim:.4}\n",
                history.train_mse.len()
            )
            .unwrap();
        }
        for table in [&results.table1, &results.table2] {
            writeln!(md, "## {}\n\n```\n{}```\n", table.title, table.to_text()).unwrap();
        }
        self.write(&mut out, "report/report.md", md)?;
        Ok(out)
    }
}

fn volume_rel(subject_id: &str) -> String {
    format!("synth/volumes/{subject_id}.nii")
}

fn read_label_csv(path: &Path, column: usize) -> Result<BTreeMap<String, ProgressionLabel>> {
    let text = read_text(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let cells: Vec<&str> = l.split(',').collect();
            let label = cells
                .get(column)
                .and_then(|c| c.parse::<ProgressionLabel>().ok())
                .ok_or_else(|| CliError::stage("labels", format!("{}: bad line `{l}`", path.display())))?;
            Ok((cells[0].to_string(), label))
        })
        .collect()
}

fn pick(map: &BTreeMap<String, Vec<f64>>, ids: &[&String]) -> Result<Vec<Vec<f64>>> {
    ids.iter()
        .map(|id| map.get(*id).cloned().ok_or_else(|| CliError::stage("evaluate", format!("no features for {id}"))))
        .collect()
}

fn gbt_probs(
    params: &GbtParams,
    seed: u64,
    xtr: &[Vec<f64>],
    y: &[usize],
    xte: &[Vec<f64>],
) -> Result<Vec<[f64; N_CLASSES]>> {
    let model = fit_gbt(xtr, y, &GbtParams { seed, ..*params }).map_err(|e| CliError::stage("evaluate", e))?;
    gbt_predict(&model, xte).map_err(|e| CliError::stage("evaluate", e))
}

/// The only reader of held-out labels.
struct Scorer<'a> {
    labels: &'a BTreeMap<String, ProgressionLabel>,
    test_ids: Vec<&'a String>,
}

impl Scorer<'_> {
    fn score(&self, probs: &[[f64; N_CLASSES]]) -> Result<[Option<f64>; N_CLASSES]> {
        let y: Vec<usize> = self.test_ids.iter().map(|id| self.labels[*id].index()).collect();
        auc_ovr(probs, &y).map_err(|e| CliError::stage("evaluate", e))
    }
}

/// A class undefined in any run is reported as undefined overall.
fn propagate_undefined(runs: &[[Option<f64>; N_CLASSES]]) -> Vec<[Option<f64>; N_CLASSES]> {
    let undefined: Vec<bool> = (0..N_CLASSES).map(|c| runs.iter().any(|r| r[c].is_none())).collect();
    runs.iter()
        .map(|r| {
            let mut r = *r;
            for c in 0..N_CLASSES {
                if undefined[c] {
                    r[c] = None;
                }
            }
            r
        })
        .collect()
}

fn curve_plot(title: &str, y_label: &str, values: &[f64], color: &str) -> String {
    let pts = values.iter().enumerate().map(|(i, &v)| ((i + 1) as f64, v)).collect();
    plots::line_chart(title, "epoch", y_label, vec![Series::line(pts, color)])
}

/// One panel per label: member trajectories and the cluster barycenter.
fn trajectory_plot(model: &ClusterModel, trajectories: &[declineforge_core::Trajectory], spacing: f64) -> String {
    let order = model.label_order.clone().unwrap_or_else(|| vec![ProgressionLabel::Stable; model.k]);
    let by_id: BTreeMap<&str, &declineforge_core::Trajectory> =
        trajectories.iter().map(|t| (t.subject_id.as_str(), t)).collect();
    let panels: Vec<Panel> = ProgressionLabel::ALL
        .iter()
        .filter_map(|&label| {
            let c = order.iter().position(|&l| l == label)?;
            let mut series: Vec<Series> = model
                .subject_ids
                .iter()
                .zip(&model.assignments)
                .filter(|(_, &a)| a == c)
                .filter_map(|(id, _)| by_id.get(id.as_str()))
                .map(|t| Series {
                    width: 0.8,
                    opacity: 0.35,
                    ..Series::line(t.times.iter().copied().zip(t.values.iter().copied()).collect(), PALETTE[label.index()])
                })
                .collect();
            let bary = model.barycenters[c].iter().enumerate().map(|(i, &v)| (i as f64 * spacing, v)).collect();
            series.push(Series { width: 3.0, ..Series::line(bary, "black") });
            let n = model.assignments.iter().filter(|&&a| a == c).count();
            Some(Panel { title: format!("{label} (n = {n})"), series })
        })
        .collect();
    plots::render_panels("CDR-SB trajectories by cluster", "months since baseline", "CDR-SB", &panels)
}
