//! Run configuration: TOML schema, validation, and conversion into core
//! types. Every default is materialized into the emitted manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use bcr_core::backbone::{GammaFamily, RefType};
use bcr_core::data::{Column, ColumnKind, Schema, TargetSpec, Task};
use bcr_core::error::{BcrError, Result};
use bcr_core::representation::AnnealFamily;
use bcr_core::samplers::SamplerKind;
use bcr_core::search::{GuidanceChoice, SearchSpace, Stage2Params};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub stage2: Stage2Config,
    #[serde(default)]
    pub stage3: Stage3Config,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub csv: PathBuf,
    pub columns: Vec<ColumnConfig>,
    pub target: TargetConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnConfig {
    pub name: String,
    pub kind: String,
    #[serde(default)]
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetConfig {
    pub name: String,
    pub task: String,
    #[serde(default)]
    pub classes: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitConfig {
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { val_fraction: 0.15, test_fraction: 0.15, seed: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub k_mix: usize,
    pub t_steps: usize,
    pub em_iters: usize,
    pub em_tol: f64,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { k_mix: 3, t_steps: 200, em_iters: 200, em_tol: 1e-6, seed: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2Config {
    /// Oversampling factor M.
    pub m: usize,
    pub batch_size: usize,
    pub guidance: String,
    pub family: String,
    pub gamma_max: f64,
    pub gamma_min: f64,
    pub t_g: usize,
    /// Reference batching fraction; omit with guidance = "none".
    pub ratio: Option<f64>,
    /// "class-conditional" or "global"; defaults by task when omitted.
    pub ref_type: Option<String>,
    pub vae_dim: usize,
    pub vae_schedule: String,
    pub vae_epochs: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            m: 50,
            batch_size: 256,
            guidance: "none".into(),
            family: "cosine".into(),
            gamma_max: 1.0,
            gamma_min: 0.01,
            t_g: 10,
            ratio: None,
            ref_type: None,
            vae_dim: 8,
            vae_schedule: "linear".into(),
            vae_epochs: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage3Config {
    pub sampler: String,
    pub k: f64,
    pub gkd: bool,
    pub batch: usize,
    pub k_neighbors: usize,
}

impl Default for Stage3Config {
    fn default() -> Self {
        Stage3Config { sampler: "chamfer".into(), k: 1.0, gkd: false, batch: 512, k_neighbors: 10 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchConfig {
    pub n_trials: usize,
    pub n_start: usize,
    pub k_min: f64,
    pub k_max: f64,
    pub guidance: Vec<String>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            n_trials: 30,
            n_start: 10,
            k_min: 0.1,
            k_max: 25.0,
            guidance: vec!["none".into(), "identity".into(), "beta-vae".into()],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub k_values: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            k_values: vec![0.1, 0.5, 1.0, 3.0, 5.0, 10.0, 20.0],
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub seeds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { seeds: 5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<(RunConfig, String)> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| BcrError::config(format!("cannot parse config: {e}")))?;
        cfg.validate()?;
        Ok((cfg, text))
    }

    pub fn validate(&self) -> Result<()> {
        self.schema()?;
        let s = &self.split;
        if s.val_fraction <= 0.0 || s.test_fraction <= 0.0 || s.val_fraction + s.test_fraction >= 1.0
        {
            return Err(BcrError::config("split fractions must be positive and sum below 1"));
        }
        if self.backbone.k_mix == 0 || self.backbone.t_steps < 3 {
            return Err(BcrError::config("backbone needs k_mix >= 1 and t_steps >= 3"));
        }
        self.guidance_choice()?;
        self.gamma_family()?;
        self.anneal_family()?;
        self.sampler_kind()?;
        self.ref_type()?;
        if self.stage2.m < 2 {
            return Err(BcrError::config("stage2.m must be at least 2"));
        }
        if self.guidance_choice()? != GuidanceChoice::None {
            if !(3..=20).contains(&self.stage2.t_g) {
                return Err(BcrError::config("stage2.t_g outside [3, 20]"));
            }
            if !(0.1..=5.0).contains(&self.stage2.gamma_max) {
                return Err(BcrError::config("stage2.gamma_max outside [0.1, 5.0]"));
            }
            if self.stage2.gamma_min < 1e-8
                || self.stage2.gamma_min > (self.stage2.gamma_max - 0.1).max(1e-8)
            {
                return Err(BcrError::config("stage2.gamma_min outside [1e-8, gamma_max - 0.1]"));
            }
            if self.stage2.ratio.is_none() {
                return Err(BcrError::config("stage2.ratio required when guidance is enabled"));
            }
            if ![4usize, 8, 16, 32].contains(&self.stage2.vae_dim) {
                return Err(BcrError::config("stage2.vae_dim must be one of 4, 8, 16, 32"));
            }
        }
        if !(0.1..=25.0).contains(&self.stage3.k) {
            return Err(BcrError::config("stage3.k outside [0.1, 25.0]"));
        }
        if self.eval.seeds == 0 {
            return Err(BcrError::config("eval.seeds must be at least 1"));
        }
        self.search_space()?;
        Ok(())
    }

    pub fn schema(&self) -> Result<Schema> {
        let mut columns = Vec::new();
        for c in &self.dataset.columns {
            let kind = match c.kind.as_str() {
                "numeric" => ColumnKind::Numeric,
                "categorical" => ColumnKind::Categorical(c.categories.clone()),
                other => {
                    return Err(BcrError::config(format!(
                        "column {:?}: unknown kind {other:?} (numeric | categorical)",
                        c.name
                    )))
                }
            };
            columns.push(Column { name: c.name.clone(), kind });
        }
        let task = match self.dataset.target.task.as_str() {
            "binary" => Task::Binary,
            "multiclass" => Task::Multiclass(self.dataset.target.classes.len()),
            "regression" => Task::Regression,
            other => {
                return Err(BcrError::config(format!(
                    "dataset.target.task: unknown task {other:?} (binary | multiclass | regression)"
                )))
            }
        };
        Schema::new(
            columns,
            TargetSpec {
                name: self.dataset.target.name.clone(),
                task,
                classes: self.dataset.target.classes.clone(),
            },
        )
    }

    pub fn guidance_choice(&self) -> Result<GuidanceChoice> {
        parse_guidance(&self.stage2.guidance)
    }

    pub fn gamma_family(&self) -> Result<GammaFamily> {
        match self.stage2.family.as_str() {
            "constant" => Ok(GammaFamily::Constant),
            "linear" => Ok(GammaFamily::Linear),
            "cosine" => Ok(GammaFamily::Cosine),
            "sine" => Ok(GammaFamily::Sine),
            other => Err(BcrError::config(format!("stage2.family: unknown family {other:?}"))),
        }
    }

    pub fn anneal_family(&self) -> Result<AnnealFamily> {
        match self.stage2.vae_schedule.as_str() {
            "constant" => Ok(AnnealFamily::Constant),
            "linear" => Ok(AnnealFamily::Linear),
            "cosine" => Ok(AnnealFamily::Cosine),
            "sine" => Ok(AnnealFamily::Sine),
            "cyclical" => Ok(AnnealFamily::Cyclical),
            other => Err(BcrError::config(format!("stage2.vae_schedule: unknown family {other:?}"))),
        }
    }

    pub fn ref_type(&self) -> Result<Option<RefType>> {
        match self.stage2.ref_type.as_deref() {
            None => Ok(None),
            Some("class-conditional") => Ok(Some(RefType::ClassConditional)),
            Some("global") => Ok(Some(RefType::Global)),
            Some(other) => Err(BcrError::config(format!(
                "stage2.ref_type: unknown type {other:?} (class-conditional | global)"
            ))),
        }
    }

    pub fn sampler_kind(&self) -> Result<SamplerKind> {
        match self.stage3.sampler.as_str() {
            "chamfer" => Ok(SamplerKind::Chamfer),
            "stratified" => Ok(SamplerKind::Stratified),
            "iboss" => Ok(SamplerKind::Iboss),
            "hdbscan" => Ok(SamplerKind::Hdbscan),
            "md" => Ok(SamplerKind::Md),
            other => Err(BcrError::config(format!("stage3.sampler: unknown sampler {other:?}"))),
        }
    }

    pub fn stage2_params(&self) -> Result<Stage2Params> {
        let guidance = self.guidance_choice()?;
        let vae = guidance == GuidanceChoice::BetaVae;
        Ok(Stage2Params {
            k: self.stage3.k,
            guidance,
            family: self.gamma_family()?,
            gamma_max: self.stage2.gamma_max,
            gamma_min: self.stage2.gamma_min,
            t_g: self.stage2.t_g,
            ratio: if guidance == GuidanceChoice::None { None } else { self.stage2.ratio },
            vae_dim: vae.then_some(self.stage2.vae_dim),
            vae_schedule: if vae { Some(self.anneal_family()?) } else { None },
        })
    }

    pub fn search_space(&self) -> Result<SearchSpace> {
        let mut space = SearchSpace {
            k_min: self.search.k_min,
            k_max: self.search.k_max,
            ..SearchSpace::default()
        };
        space.guidance = self
            .search
            .guidance
            .iter()
            .map(|g| parse_guidance(g))
            .collect::<Result<Vec<_>>>()?;
        space.validate()?;
        Ok(space)
    }
}

fn parse_guidance(s: &str) -> Result<GuidanceChoice> {
    match s {
        "none" => Ok(GuidanceChoice::None),
        "identity" => Ok(GuidanceChoice::Identity),
        "beta-vae" => Ok(GuidanceChoice::BetaVae),
        other => Err(BcrError::config(format!(
            "unknown guidance {other:?} (none | identity | beta-vae)"
        ))),
    }
}

/// FNV-1a 64 over the raw config text; stable across runs and platforms.
pub fn config_hash(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}
