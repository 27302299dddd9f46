//! Run configuration files.
//!
//! A config is TOML with one optional section per subcommand. Relative
//! paths are resolved against the directory holding the file. Command-line
//! flags take precedence over anything set here.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::toy::ScenarioSpec;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeSection {
    pub pretrained: Option<PathBuf>,
    #[serde(default)]
    pub experts: Vec<PathBuf>,
    pub covariances: Option<PathBuf>,
    pub method: Option<String>,
    pub alpha: Option<f64>,
    pub pinv_rtol: Option<f64>,
    pub tsv_rank_fraction: Option<f64>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainToySection {
    pub out_dir: Option<PathBuf>,
    pub scenario: Option<ScenarioSpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseSection {
    pub run_dir: Option<PathBuf>,
    pub csv_dir: Option<PathBuf>,
    pub loss: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub methods: Option<Vec<String>>,
    pub repeats: Option<usize>,
    pub tasks: Option<usize>,
    pub dim: Option<usize>,
    pub seed: Option<u64>,
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub merge: MergeSection,
    #[serde(default)]
    pub train_toy: TrainToySection,
    #[serde(default)]
    pub diagnose: DiagnoseSection,
    #[serde(default)]
    pub bench: BenchSection,
    #[serde(default)]
    pub verify: VerifySection,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().replace('\n', " ")))
    }

    /// Reads a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        if let Some(spec) = &cfg.train_toy.scenario {
            spec.validate()?;
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let m = &mut self.merge;
        resolve(base, &mut m.pretrained);
        resolve(base, &mut m.covariances);
        resolve(base, &mut m.output);
        for e in &mut m.experts {
            if e.is_relative() {
                *e = base.join(&*e);
            }
        }
        resolve(base, &mut self.train_toy.out_dir);
        resolve(base, &mut self.diagnose.run_dir);
        resolve(base, &mut self.diagnose.csv_dir);
        resolve(base, &mut self.bench.csv);
    }
}

/// Fails with a config error naming every input path that does not exist.
pub fn require_existing<'a>(paths: impl IntoIterator<Item = &'a Path>) -> Result<()> {
    let missing: Vec<String> = paths
        .into_iter()
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("missing input paths: {}", missing.join(", "))))
    }
}
