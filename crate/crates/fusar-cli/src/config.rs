//! Layered run configuration: TOML file < environment < flags.
//!
//! The resolved configuration is hashed (file bytes plus the effective
//! overrides) and that hash is stamped into every artifact a command writes.
//! Paths inside the config file resolve relative to the file's directory;
//! paths given on the command line resolve against the working directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fusar_core::concretize::{ConcretizerConfig, ConcretizerTemplates};
use fusar_core::dataset::{ForgeConfig, SplitSpec};
use fusar_core::eval::{GenerationConfig, JudgeConfig, LabelMapping, SafetyFlag};
use fusar_core::fuzz::{
    EntityScanner, FuzzifierConfig, FuzzifierTemplates, NumericScanner,
};
use fusar_core::gateway::{
    Gateway, GatewayConfig, GatewayMode, PurposeTag, RetryPolicy, DEFAULT_API_KEY_ENV,
};
use fusar_core::lists::load_terms;
use fusar_core::template::{load_template, Template};
use fusar_core::trace::MetricsConfig;

pub const ENV_MODE: &str = "FUSAR_MODE";
pub const ENV_SEED: &str = "FUSAR_SEED";
pub const ENV_OUT: &str = "FUSAR_OUT";
pub const ENV_MAX_IN_FLIGHT: &str = "FUSAR_MAX_IN_FLIGHT";

/// Command-line overrides (the highest-precedence layer).
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mode: Option<GatewayMode>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub max_in_flight: Option<usize>,
    pub judge: Option<String>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    mode: Option<String>,
    seed: Option<u64>,
    out_dir: Option<String>,
    fixtures_dir: Option<String>,
    templates_dir: Option<String>,
    max_in_flight: Option<usize>,
    #[serde(default)]
    gateway: FileGateway,
    #[serde(default)]
    models: FileModels,
    #[serde(default)]
    paths: FilePaths,
    #[serde(default)]
    rewrite: FileRewrite,
    #[serde(default)]
    fuzz: FileFuzz,
    #[serde(default)]
    generation: FileGeneration,
    #[serde(default)]
    dataset: FileDataset,
    #[serde(default)]
    judge: FileJudge,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileGateway {
    base_url: Option<String>,
    api_key_env: Option<String>,
    request_timeout_ms: Option<u64>,
    #[serde(default)]
    purpose_base_urls: BTreeMap<String, String>,
    #[serde(default)]
    purpose_api_key_envs: BTreeMap<String, String>,
    retry: Option<FileRetry>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileRetry {
    max_attempts: Option<u32>,
    backoff_ms: Option<Vec<u64>>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileModels {
    target: Option<String>,
    rewrite: Option<String>,
    fuzz: Option<String>,
    judge: Option<String>,
    reject: Option<String>,
    extract: Option<String>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FilePaths {
    blacklist: Option<String>,
    unit_table: Option<String>,
    lexicon: Option<String>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileRewrite {
    temperature: Option<f64>,
    max_tokens: Option<u32>,
    max_associations: Option<usize>,
    #[serde(default)]
    refusal_patterns: Vec<String>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileFuzz {
    temperature: Option<f64>,
    max_tokens: Option<u32>,
    max_steps: Option<usize>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileGeneration {
    temperature: Option<f64>,
    max_tokens: Option<u32>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileDataset {
    reject_max_tokens: Option<u32>,
    min_reject_words: Option<usize>,
    #[serde(default)]
    reject_markers: Vec<String>,
    splits: Option<Vec<FileSplit>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileSplit {
    name: String,
    fraction: f64,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileJudge {
    adapter: Option<String>,
    max_tokens: Option<u32>,
    #[serde(default)]
    adapters: BTreeMap<String, FileCustomAdapter>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileCustomAdapter {
    template: String,
    /// (leading word, "safe"|"unsafe") pairs.
    labels: Vec<(String, String)>,
}

/// Per-purpose model names.
#[derive(Debug, Clone, Serialize)]
pub struct Models {
    pub target: String,
    pub rewrite: String,
    pub fuzz: String,
    pub judge: String,
    pub reject: String,
    pub extract: String,
}

/// The fully layered and path-resolved configuration for one run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub mode: GatewayMode,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub fixtures_dir: PathBuf,
    pub templates_dir: PathBuf,
    pub blacklist_path: PathBuf,
    pub unit_table_path: PathBuf,
    pub lexicon_path: PathBuf,
    pub gateway: GatewayConfig,
    pub models: Models,
    pub rewrite_temperature: f64,
    pub rewrite_max_tokens: u32,
    pub max_associations: usize,
    pub refusal_patterns: Vec<String>,
    pub fuzz_temperature: f64,
    pub fuzz_max_tokens: u32,
    pub max_steps: usize,
    pub generation_temperature: f64,
    pub generation_max_tokens: u32,
    pub reject_max_tokens: u32,
    pub min_reject_words: usize,
    pub reject_markers: Vec<String>,
    pub splits: Vec<SplitSpec>,
    pub judge_adapter: String,
    pub judge_max_tokens: u32,
    custom_adapters: BTreeMap<String, FileCustomAdapter>,
    pub config_hash: String,
}

fn parse_purpose_map<T: Clone>(
    raw: &BTreeMap<String, T>,
    what: &str,
) -> Result<BTreeMap<PurposeTag, T>> {
    let mut out = BTreeMap::new();
    for (key, value) in raw {
        let purpose: PurposeTag = key
            .parse()
            .map_err(|e| anyhow::anyhow!("{what}: {e}"))?;
        out.insert(purpose, value.clone());
    }
    Ok(out)
}

fn env_var(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|v| !v.is_empty())
}

impl RunConfig {
    /// Loads the config file and applies environment and flag layers.
    pub fn load(config_path: &Path, overrides: &Overrides) -> Result<RunConfig> {
        let file_bytes = std::fs::read(config_path)
            .with_context(|| format!("cannot read config file {}", config_path.display()))?;
        let file: FileConfig = toml::from_str(std::str::from_utf8(&file_bytes)?)
            .with_context(|| format!("cannot parse config file {}", config_path.display()))?;
        let base = config_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let resolve = |p: &str| -> PathBuf {
            let path = PathBuf::from(p);
            if path.is_absolute() {
                path
            } else {
                base.join(path)
            }
        };

        // file < environment < flags, recording the effective overrides for
        // the config hash.
        let mut effective: Vec<String> = Vec::new();

        let mut mode_str = file.mode.clone().unwrap_or_else(|| "replay".to_string());
        if let Some(env_mode) = env_var(ENV_MODE) {
            mode_str = env_mode;
            effective.push(format!("mode={mode_str}"));
        }
        if let Some(flag_mode) = overrides.mode {
            mode_str = flag_mode.to_string();
            effective.push(format!("mode={mode_str}"));
        }
        let mode: GatewayMode = mode_str
            .parse()
            .map_err(|e: String| anyhow::anyhow!(e))?;

        let mut seed = file.seed.unwrap_or(0);
        if let Some(env_seed) = env_var(ENV_SEED) {
            seed = env_seed
                .parse()
                .with_context(|| format!("{ENV_SEED} must be an integer"))?;
            effective.push(format!("seed={seed}"));
        }
        if let Some(flag_seed) = overrides.seed {
            seed = flag_seed;
            effective.push(format!("seed={seed}"));
        }

        // The output directory never enters the config hash: it says where
        // artifacts land, not what gets computed.
        let mut out_dir = resolve(file.out_dir.as_deref().unwrap_or("out"));
        if let Some(env_out) = env_var(ENV_OUT) {
            out_dir = PathBuf::from(&env_out);
        }
        if let Some(flag_out) = &overrides.out {
            out_dir = flag_out.clone();
        }

        let mut max_in_flight = file.max_in_flight.unwrap_or(4);
        if let Some(env_mif) = env_var(ENV_MAX_IN_FLIGHT) {
            max_in_flight = env_mif
                .parse()
                .with_context(|| format!("{ENV_MAX_IN_FLIGHT} must be an integer"))?;
            effective.push(format!("max_in_flight={max_in_flight}"));
        }
        if let Some(flag_mif) = overrides.max_in_flight {
            max_in_flight = flag_mif;
            effective.push(format!("max_in_flight={max_in_flight}"));
        }

        let mut judge_adapter = file
            .judge
            .adapter
            .clone()
            .unwrap_or_else(|| "llama-guard".to_string());
        if let Some(flag_judge) = &overrides.judge {
            judge_adapter = flag_judge.clone();
            effective.push(format!("judge={judge_adapter}"));
        }

        let mut hasher = Sha256::new();
        hasher.update(&file_bytes);
        hasher.update(b"\0");
        hasher.update(effective.join(";").as_bytes());
        let config_hash = hex::encode(hasher.finalize());

        let retry = file.gateway.retry.as_ref();
        let gateway = GatewayConfig {
            base_url: file.gateway.base_url.clone().unwrap_or_default(),
            purpose_base_urls: parse_purpose_map(
                &file.gateway.purpose_base_urls,
                "gateway.purpose_base_urls",
            )?,
            api_key_env: file
                .gateway
                .api_key_env
                .clone()
                .unwrap_or_else(|| DEFAULT_API_KEY_ENV.to_string()),
            purpose_api_key_envs: parse_purpose_map(
                &file.gateway.purpose_api_key_envs,
                "gateway.purpose_api_key_envs",
            )?,
            max_in_flight,
            retry: RetryPolicy {
                max_attempts: retry.and_then(|r| r.max_attempts).unwrap_or(3),
                backoff_ms: retry
                    .and_then(|r| r.backoff_ms.clone())
                    .unwrap_or_else(|| vec![250, 1_000, 4_000]),
            },
            mode,
            fixtures_dir: resolve(file.fixtures_dir.as_deref().unwrap_or("fixtures")),
            request_timeout_ms: file.gateway.request_timeout_ms.unwrap_or(120_000),
        };

        let models = Models {
            target: file.models.target.clone().unwrap_or_default(),
            rewrite: file.models.rewrite.clone().unwrap_or_default(),
            fuzz: file.models.fuzz.clone().unwrap_or_default(),
            judge: file.models.judge.clone().unwrap_or_default(),
            reject: file.models.reject.clone().unwrap_or_default(),
            extract: file.models.extract.clone().unwrap_or_default(),
        };

        let splits = match &file.dataset.splits {
            Some(specs) => specs
                .iter()
                .map(|s| SplitSpec {
                    name: s.name.clone(),
                    fraction: s.fraction,
                })
                .collect(),
            None => SplitSpec::single(),
        };

        Ok(RunConfig {
            mode,
            seed,
            out_dir,
            fixtures_dir: gateway.fixtures_dir.clone(),
            templates_dir: resolve(file.templates_dir.as_deref().unwrap_or("templates")),
            blacklist_path: resolve(file.paths.blacklist.as_deref().unwrap_or("blacklist.txt")),
            unit_table_path: resolve(file.paths.unit_table.as_deref().unwrap_or("units.txt")),
            lexicon_path: resolve(file.paths.lexicon.as_deref().unwrap_or("conjunctions.txt")),
            gateway,
            models,
            rewrite_temperature: file.rewrite.temperature.unwrap_or(0.7),
            rewrite_max_tokens: file.rewrite.max_tokens.unwrap_or(1024),
            max_associations: file.rewrite.max_associations.unwrap_or(5),
            refusal_patterns: file.rewrite.refusal_patterns.clone(),
            fuzz_temperature: file.fuzz.temperature.unwrap_or(0.7),
            fuzz_max_tokens: file.fuzz.max_tokens.unwrap_or(2048),
            max_steps: file.fuzz.max_steps.unwrap_or(4),
            generation_temperature: file.generation.temperature.unwrap_or(0.0),
            generation_max_tokens: file.generation.max_tokens.unwrap_or(2048),
            reject_max_tokens: file.dataset.reject_max_tokens.unwrap_or(1024),
            min_reject_words: file.dataset.min_reject_words.unwrap_or(20),
            reject_markers: file.dataset.reject_markers.clone(),
            splits,
            judge_adapter,
            judge_max_tokens: file.judge.max_tokens.unwrap_or(64),
            custom_adapters: file.judge.adapters.clone(),
            config_hash,
        })
    }

    /// Referenced paths must exist before any work starts.
    pub fn validate(&self) -> Result<()> {
        for (what, path) in [
            ("templates_dir", &self.templates_dir),
            ("paths.blacklist", &self.blacklist_path),
            ("paths.unit_table", &self.unit_table_path),
            ("paths.lexicon", &self.lexicon_path),
        ] {
            if !path.exists() {
                bail!("{what} does not exist: {}", path.display());
            }
        }
        if self.gateway.mode == GatewayMode::Replay && !self.fixtures_dir.is_dir() {
            bail!(
                "replay mode needs an existing fixtures dir: {}",
                self.fixtures_dir.display()
            );
        }
        Ok(())
    }

    pub fn build_gateway(&self) -> Result<Gateway> {
        Ok(Gateway::new(self.gateway.clone())?)
    }

    pub fn template(&self, stem: &str) -> Result<Template> {
        Ok(load_template(&self.templates_dir, stem)?)
    }

    pub fn concretizer_config(&self) -> ConcretizerConfig {
        let mut cfg = ConcretizerConfig::new(&self.models.rewrite);
        cfg.temperature = self.rewrite_temperature;
        cfg.max_tokens = self.rewrite_max_tokens;
        cfg.max_associations = self.max_associations;
        if !self.refusal_patterns.is_empty() {
            cfg.refusal_patterns = self.refusal_patterns.clone();
        }
        cfg
    }

    pub fn concretizer_templates(&self) -> Result<ConcretizerTemplates> {
        Ok(ConcretizerTemplates {
            intent: self.template("intent")?,
            associate: self.template("associate")?,
            rewrite: self.template("rewrite")?,
        })
    }

    pub fn fuzzifier_config(&self) -> FuzzifierConfig {
        let mut cfg = FuzzifierConfig::new(
            &self.models.fuzz,
            &self.models.extract,
            &self.models.judge,
        );
        cfg.temperature = self.fuzz_temperature;
        cfg.max_tokens = self.fuzz_max_tokens;
        cfg.max_steps = self.max_steps;
        cfg
    }

    pub fn fuzzifier_templates(&self) -> Result<FuzzifierTemplates> {
        Ok(FuzzifierTemplates {
            classify: self.template("classify")?,
            entity: self.template("fuzz_entity")?,
            numeric: self.template("fuzz_numeric")?,
            truncate: self.template("fuzz_truncate")?,
            deconstruct: self.template("fuzz_deconstruct")?,
            reorganize: self.template("fuzz_reorganize")?,
            keep_judge: self.template("keep_judge")?,
        })
    }

    pub fn scanners(&self) -> Result<(NumericScanner, EntityScanner)> {
        let units = load_terms(&self.unit_table_path)?;
        let blacklist = load_terms(&self.blacklist_path)?;
        Ok((NumericScanner::new(&units)?, EntityScanner::new(&blacklist)?))
    }

    pub fn metrics_config(&self) -> Result<MetricsConfig> {
        let lexicon = load_terms(&self.lexicon_path)?;
        Ok(MetricsConfig::new(lexicon)?)
    }

    pub fn forge_config(&self) -> ForgeConfig {
        let mut cfg = ForgeConfig::new(&self.models.reject);
        cfg.max_tokens = self.reject_max_tokens;
        cfg.min_reject_words = self.min_reject_words;
        if !self.reject_markers.is_empty() {
            cfg.reject_markers = self.reject_markers.clone();
        }
        cfg
    }

    pub fn generation_config(&self) -> GenerationConfig {
        GenerationConfig {
            model: self.models.target.clone(),
            temperature: self.generation_temperature,
            max_tokens: self.generation_max_tokens,
        }
    }

    /// Resolves the configured judge adapter by name. Unknown names are a
    /// validation error.
    pub fn judge_config(&self) -> Result<JudgeConfig> {
        let name = self.judge_adapter.as_str();
        if name == "llama-guard" {
            return Ok(JudgeConfig {
                name: name.to_string(),
                model: self.models.judge.clone(),
                template: self.template("judge_llama_guard")?,
                mapping: LabelMapping::llama_guard_style(),
                max_tokens: self.judge_max_tokens,
            });
        }
        let Some(custom) = self.custom_adapters.get(name) else {
            bail!(
                "unknown judge adapter `{name}` (built-in: llama-guard; custom: {:?})",
                self.custom_adapters.keys().collect::<Vec<_>>()
            );
        };
        let stem = custom.template.trim_end_matches(".txt");
        let mut rules = Vec::new();
        for (word, flag) in &custom.labels {
            let flag = match flag.as_str() {
                "safe" => SafetyFlag::Safe,
                "unsafe" => SafetyFlag::Unsafe,
                other => bail!("adapter `{name}`: label flag must be safe|unsafe, got `{other}`"),
            };
            rules.push((word.clone(), flag));
        }
        if rules.is_empty() {
            bail!("adapter `{name}` has no label rules");
        }
        Ok(JudgeConfig {
            name: name.to_string(),
            model: self.models.judge.clone(),
            template: self.template(stem)?,
            mapping: LabelMapping { rules },
            max_tokens: self.judge_max_tokens,
        })
    }
}
