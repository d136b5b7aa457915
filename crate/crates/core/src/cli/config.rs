use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use growthmix::fit::FitOptions;
use growthmix::forest::{ForestConfig, TemplateModel};
use growthmix::mixture::{MixtureSpec, ModelKind};
use growthmix::montecarlo::McOptions;
use growthmix::simulate::{MembershipRule, VarianceBase};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Everything a command reads. Loaded from JSON, then overridden by flags.
/// The top-level `seed` replaces every nested seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads for mc and importance; 0 uses every core.
    pub threads: usize,
    pub data: DataConfig,
    pub model: MixtureSpec,
    pub fit: FitOptions,
    pub simulate: SimulateConfig,
    /// Grid cell for mc and misspec.
    pub condition: Option<usize>,
    pub mc: McOptions,
    pub kmax: usize,
    pub stepwise: StepwiseConfig,
    pub importance: ImportanceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out: PathBuf::from("out"),
            threads: 0,
            data: DataConfig::default(),
            model: MixtureSpec::new(ModelKind::Fmm, 2),
            fit: FitOptions::default(),
            simulate: SimulateConfig::default(),
            condition: None,
            mc: McOptions::default(),
            kmax: 4,
            stepwise: StepwiseConfig::default(),
            importance: ImportanceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Long CSV with columns id,time,y.
    pub outcomes: Option<PathBuf>,
    /// Wide CSV with columns id and one per covariate.
    pub covariates: Option<PathBuf>,
    /// Columns rescaled to mean 0, SD 1 on ingest. Defaults to the model's
    /// expert covariates.
    pub standardize: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Grid cell (1..=108). Ignored when `scenario` is set.
    pub condition: Option<usize>,
    /// Screening scenario (1..=8) with noise covariates.
    pub scenario: Option<u8>,
    /// Sample size override.
    pub n: Option<usize>,
    pub membership: MembershipRule,
    pub variance_base: VarianceBase,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            condition: Some(1),
            scenario: None,
            n: None,
            membership: MembershipRule::default(),
            variance_base: VarianceBase::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct StepwiseConfig {
    /// Gating covariates related to the fitted classes.
    pub covariates: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ImportanceConfig {
    /// Covariates to rank; empty means every column of the covariate file.
    pub covariates: Vec<String>,
    pub template: TemplateModel,
    pub forest: ForestConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| crate::cli::Validation(format!("config {}: {e}", path.display())).into())
    }

    /// Pushes the shared seed and worker count into the nested sections.
    pub fn propagate(&mut self) {
        self.fit.seed = self.seed;
        self.mc.master_seed = self.seed;
        self.importance.forest.seed = self.seed;
        self.mc.threads = self.threads;
        self.importance.forest.threads = self.threads;
    }

    /// Copy without the output location and worker counts.
    pub fn stable(&self) -> RunConfig {
        let mut c = self.clone();
        c.out = PathBuf::new();
        c.threads = 0;
        c.mc.threads = 0;
        c.importance.forest.threads = 0;
        c
    }

    /// SHA-256 of the effective config for `command`. Output location and
    /// worker count are excluded since neither changes results.
    pub fn hash(&self, command: &str) -> String {
        let doc = serde_json::json!({ "command": command, "config": self.stable() });
        let bytes = serde_json::to_vec(&doc).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn schema() -> String {
    serde_json::to_string_pretty(&schemars::schema_for!(RunConfig)).expect("schema serializes")
}
