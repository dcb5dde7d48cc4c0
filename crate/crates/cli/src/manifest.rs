//! Run manifest: which stages have completed, what they wrote and which
//! seeds they used, keyed to the configuration hash.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Synth,
    Cluster,
    Split,
    Pretrain,
    Embed,
    Evaluate,
    Report,
}

impl Stage {
    /// Execution order.
    pub const ALL: [Stage; 7] =
        [Stage::Synth, Stage::Cluster, Stage::Split, Stage::Pretrain, Stage::Embed, Stage::Evaluate, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Cluster => "cluster",
            Stage::Split => "split",
            Stage::Pretrain => "pretrain",
            Stage::Embed => "embed",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    /// Stages that must have completed first.
    pub fn upstream(self) -> &'static [Stage] {
        let i = self as usize;
        &Stage::ALL[..i]
    }

    /// Stages invalidated when this one is re-run.
    pub fn downstream(self) -> &'static [Stage] {
        let i = self as usize;
        &Stage::ALL[i + 1..]
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| CliError::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StageRecord {
    pub completed: bool,
    /// Paths relative to the workspace.
    pub outputs: Vec<String>,
    pub seeds: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub stages: BTreeMap<Stage, StageRecord>,
}

impl RunManifest {
    pub fn new(config_hash: impl Into<String>) -> Self {
        Self { config_hash: config_hash.into(), stages: BTreeMap::new() }
    }

    pub fn path(workspace: &Path) -> PathBuf {
        workspace.join(MANIFEST_FILE)
    }

    /// Reads the manifest, or `None` when the workspace has none yet.
    pub fn read(workspace: &Path) -> Result<Option<Self>> {
        let path = Self::path(workspace);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(&path)(e)),
        };
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| CliError::CorruptManifest { path, detail: e.to_string() })
    }

    pub fn write(&self, workspace: &Path) -> Result<()> {
        let path = Self::path(workspace);
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        std::fs::write(&tmp, text).map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, &path).map_err(io_err(&path))
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        self.stages.get(&stage).is_some_and(|r| r.completed)
    }

    pub fn all_complete(&self) -> bool {
        Stage::ALL.iter().all(|&s| self.is_complete(s))
    }

    /// First upstream stage that has not completed.
    pub fn missing_upstream(&self, stage: Stage) -> Option<Stage> {
        stage.upstream().iter().copied().find(|&s| !self.is_complete(s))
    }

    pub fn mark_complete(&mut self, stage: Stage, outputs: Vec<String>, seeds: BTreeMap<String, u64>) {
        self.stages.insert(stage, StageRecord { completed: true, outputs, seeds });
    }

    /// Clears the stage and everything downstream of it.
    pub fn invalidate_from(&mut self, stage: Stage) {
        self.stages.remove(&stage);
        for s in stage.downstream() {
            self.stages.remove(s);
        }
    }
}
