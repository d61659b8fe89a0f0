//! Run configuration: a TOML file with model / layout / prefill / task /
//! output sections, plus CLI flag overrides.
//!
//! Unknown keys are hard errors, not warnings — a typo like `bugdet` must
//! not silently run with defaults. Validation names the offending key path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{PrefillMode, ProxyMode};
use crate::error::{Error, Result};
use crate::eviction::{BudgetMode, EvictionPolicy};
use crate::layout::{build_layout, Alignment, PromptPosition, TokenLayout};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub rope_base: f32,
    pub seed: u64,
    pub mlp_ratio: f32,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            d_model: 16,
            d_head: 8,
            rope_base: 10000.0,
            seed: 0,
            mlp_ratio: 2.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayoutSection {
    pub prompt_len: usize,
    pub tiles: usize,
    pub tokens_per_tile: usize,
    pub frames: usize,
    pub tokens_per_frame: usize,
    /// "first" or "last".
    pub prompt_position: String,
}

impl Default for LayoutSection {
    fn default() -> Self {
        Self {
            prompt_len: 16,
            tiles: 8,
            tokens_per_tile: 64,
            frames: 0,
            tokens_per_frame: 0,
            prompt_position: "first".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrefillSection {
    /// "bulk", "blockwise", or "hybrid".
    pub mode: String,
    pub block_size: usize,
    /// "none" or "structure".
    pub align: String,
    /// "snapkv", "keydiff", or "random".
    pub policy: String,
    pub budget: usize,
    /// "static" or "dynamic".
    pub budget_mode: String,
    /// Required when `budget_mode = "dynamic"`; currently only "pilot"
    /// (a bulk pre-pass whose per-layer attention entropies weight the
    /// budget split).
    pub stats_source: Option<String>,
    pub protect_recent: bool,
    pub protect_prompt: bool,
    /// "prompt_first" or "block_local".
    pub proxy_mode: String,
}

impl Default for PrefillSection {
    fn default() -> Self {
        Self {
            mode: "blockwise".into(),
            block_size: 256,
            align: "none".into(),
            policy: "snapkv".into(),
            budget: 1024,
            budget_mode: "static".into(),
            stats_source: None,
            protect_recent: true,
            protect_prompt: true,
            proxy_mode: "prompt_first".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    /// When set, a needle task is generated on this tile/frame and
    /// retention metrics are reported.
    pub needle_segment: Option<u32>,
    /// Alignment strength of prompt queries with the needle direction.
    pub kappa: Option<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub csv: Option<PathBuf>,
    pub json: Option<PathBuf>,
    /// Report measured wall-clock times instead of zeros. Off by default so
    /// identical configurations produce byte-identical reports.
    pub wall_clock: bool,
}

/// The full configuration of one invocation.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub layout: LayoutSection,
    pub prefill: PrefillSection,
    pub task: TaskSection,
    pub output: OutputSection,
}

/// Flag-level overrides applied on top of the file (flags win).
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<String>,
    pub block_size: Option<usize>,
    pub policy: Option<String>,
    pub budget: Option<usize>,
    pub csv: Option<PathBuf>,
    pub json: Option<PathBuf>,
    pub wall_clock: bool,
}

/// Loads the optional TOML file, applies overrides, and validates.
pub fn parse_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut config = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str::<RunConfig>(&text)
                .map_err(|e| Error::Parse(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = overrides.seed {
        config.model.seed = seed;
    }
    if let Some(mode) = &overrides.mode {
        config.prefill.mode = mode.clone();
    }
    if let Some(b) = overrides.block_size {
        config.prefill.block_size = b;
    }
    if let Some(policy) = &overrides.policy {
        config.prefill.policy = policy.clone();
    }
    if let Some(m) = overrides.budget {
        config.prefill.budget = m;
    }
    if let Some(csv) = &overrides.csv {
        config.output.csv = Some(csv.clone());
    }
    if let Some(json) = &overrides.json {
        config.output.json = Some(json.clone());
    }
    if overrides.wall_clock {
        config.output.wall_clock = true;
    }
    config.validate()?;
    Ok(config)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.prompt_position()?;
        self.mode()?;
        self.align()?;
        self.policy()?;
        self.proxy_mode()?;
        self.budget_mode()?;
        if self.prefill.block_size == 0 {
            return Err(Error::InvalidConfiguration("prefill.block_size must be >= 1".into()));
        }
        if self.prefill.budget == 0 {
            return Err(Error::InvalidConfiguration("prefill.budget must be >= 1".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            layers: self.model.layers,
            heads: self.model.heads,
            d_model: self.model.d_model,
            d_head: self.model.d_head,
            rope_base: self.model.rope_base,
            seed: self.model.seed,
            mlp_ratio: self.model.mlp_ratio,
        }
    }

    pub fn prompt_position(&self) -> Result<PromptPosition> {
        match self.layout.prompt_position.as_str() {
            "first" => Ok(PromptPosition::First),
            "last" => Ok(PromptPosition::Last),
            other => Err(Error::InvalidConfiguration(format!(
                "layout.prompt_position must be \"first\" or \"last\", got \"{other}\""
            ))),
        }
    }

    pub fn build_layout(&self) -> Result<TokenLayout> {
        build_layout(
            self.layout.prompt_len,
            self.layout.tiles,
            self.layout.tokens_per_tile,
            self.layout.frames,
            self.layout.tokens_per_frame,
            self.prompt_position()?,
        )
    }

    pub fn mode(&self) -> Result<PrefillMode> {
        match self.prefill.mode.as_str() {
            "bulk" => Ok(PrefillMode::Bulk),
            "blockwise" => Ok(PrefillMode::Blockwise),
            "hybrid" => Ok(PrefillMode::Hybrid),
            other => Err(Error::InvalidConfiguration(format!(
                "prefill.mode must be \"bulk\", \"blockwise\", or \"hybrid\", got \"{other}\""
            ))),
        }
    }

    pub fn align(&self) -> Result<Alignment> {
        match self.prefill.align.as_str() {
            "none" => Ok(Alignment::None),
            "structure" => Ok(Alignment::Structure),
            other => Err(Error::InvalidConfiguration(format!(
                "prefill.align must be \"none\" or \"structure\", got \"{other}\""
            ))),
        }
    }

    pub fn policy(&self) -> Result<EvictionPolicy> {
        match self.prefill.policy.as_str() {
            "snapkv" => Ok(EvictionPolicy::QueryAware),
            "keydiff" => Ok(EvictionPolicy::QueryAgnostic),
            "random" => Ok(EvictionPolicy::RandomBaseline { seed: self.model.seed }),
            other => Err(Error::InvalidConfiguration(format!(
                "prefill.policy must be \"snapkv\", \"keydiff\", or \"random\", got \"{other}\""
            ))),
        }
    }

    pub fn proxy_mode(&self) -> Result<ProxyMode> {
        match self.prefill.proxy_mode.as_str() {
            "prompt_first" => Ok(ProxyMode::PromptFirst),
            "block_local" => Ok(ProxyMode::BlockLocal),
            other => Err(Error::InvalidConfiguration(format!(
                "prefill.proxy_mode must be \"prompt_first\" or \"block_local\", got \"{other}\""
            ))),
        }
    }

    pub fn budget_mode(&self) -> Result<BudgetMode> {
        match self.prefill.budget_mode.as_str() {
            "static" => Ok(BudgetMode::Static),
            "dynamic" => match self.prefill.stats_source.as_deref() {
                Some("pilot") => Ok(BudgetMode::Dynamic),
                Some(other) => Err(Error::InvalidConfiguration(format!(
                    "prefill.stats_source must be \"pilot\", got \"{other}\""
                ))),
                None => Err(Error::InvalidConfiguration(
                    "prefill.budget_mode = \"dynamic\" requires prefill.stats_source = \"pilot\""
                        .into(),
                )),
            },
            other => Err(Error::InvalidConfiguration(format!(
                "prefill.budget_mode must be \"static\" or \"dynamic\", got \"{other}\""
            ))),
        }
    }

    /// Canonical single-line echo for report rows; field order is fixed by
    /// the struct, so identical configs echo identically byte for byte.
    pub fn echo(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
