//! Run configuration: one TOML file with nested sections, environment
//! variable overrides (`ATTNRL_<SECTION>_<KEY>`), and strict unknown-key
//! rejection.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use attnrl_core::episodes::{
    CotEnv, DialogueEnv, Environment, EpisodeConfig, EpisodeKind, SalienceMode, SalientScope,
};
use attnrl_core::model::ModelConfig;
use attnrl_core::ppo::PPOConfig;
use attnrl_core::reward::{
    ClampConfig, LambdaMode, RepDenominator, RewardConfig, RewardWeights,
};
use attnrl_core::sample::SamplerConfig;

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every random stream in a run derives from it.
    pub seed: u64,
    pub iterations: usize,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub reward: RewardSection,
    pub ppo: PPOConfig,
    pub episode: EpisodeSection,
    pub history: HistorySection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            iterations: 100,
            model: ModelConfig::default(),
            sampler: SamplerConfig::default(),
            reward: RewardSection::default(),
            ppo: PPOConfig::default(),
            episode: EpisodeSection::default(),
            history: HistorySection::default(),
            paths: PathsSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSection {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub ngram_n: usize,
    pub rep_denominator: RepDenominator,
    pub lambda_mode: LambdaMode,
    pub lambda_final: f64,
    pub clamp: ClampSection,
}

impl Default for RewardSection {
    fn default() -> Self {
        let w = RewardWeights::default();
        RewardSection {
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            ngram_n: w.ngram_n,
            rep_denominator: RepDenominator::default(),
            lambda_mode: LambdaMode::default(),
            lambda_final: 2.0,
            clamp: ClampSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClampSection {
    pub enabled: bool,
    pub delta0: f64,
    pub kappa: f64,
}

impl Default for ClampSection {
    fn default() -> Self {
        let c = ClampConfig::default();
        ClampSection {
            enabled: c.enabled,
            delta0: c.delta0,
            kappa: c.kappa,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeSection {
    pub kind: EpisodeKind,
    pub turns: usize,
    pub block: usize,
    /// Environment stream seed; 0 derives from the master seed.
    pub env_seed: u64,
    pub max_response_tokens: usize,
    pub cot_max_reasoning: usize,
    pub salient_k: usize,
    pub salient_scope: SalientScope,
    /// Non-empty switches salience to explicit-keyword mode.
    pub keywords: Vec<String>,
    pub l_prime: usize,
    pub ban_eos: bool,
    pub n_keywords: usize,
    pub n_fillers: usize,
    pub cot_operands_min: usize,
    pub cot_operands_max: usize,
    pub cot_operand_lo: u32,
    pub cot_operand_hi: u32,
}

impl Default for EpisodeSection {
    fn default() -> Self {
        EpisodeSection {
            kind: EpisodeKind::Dialogue,
            turns: 3,
            block: 5,
            env_seed: 0,
            max_response_tokens: 6,
            cot_max_reasoning: 20,
            salient_k: 8,
            salient_scope: SalientScope::FullHistory,
            keywords: Vec::new(),
            l_prime: 1,
            ban_eos: true,
            n_keywords: 10,
            n_fillers: 10,
            cot_operands_min: 2,
            cot_operands_max: 4,
            cot_operand_lo: 1,
            cot_operand_hi: 9,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HistorySection {
    pub prune_max_len: usize,
    pub truncate_m: usize,
    pub mass_floor: f64,
}

impl Default for HistorySection {
    fn default() -> Self {
        HistorySection {
            prune_max_len: 128,
            truncate_m: 64,
            mass_floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub dumps: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            checkpoint: "checkpoint.ckpt".into(),
            metrics: "metrics.jsonl".into(),
            dumps: "dumps".into(),
        }
    }
}

impl RunConfig {
    /// Loads a config file (or defaults when `path` is None), applies
    /// `ATTNRL_*` environment overrides, then an optional seed override.
    pub fn load(
        path: Option<&Path>,
        env_vars: &[(String, String)],
        seed_override: Option<u64>,
        out_dir: Option<&Path>,
    ) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut value: toml::Value = text
            .parse()
            .map_err(|e| CliError::Config(format!("config parse error: {e}")))?;
        apply_env_overrides(&mut value, env_vars)?;
        let mut config: RunConfig = value
            .try_into()
            .map_err(|e| CliError::Config(format!("config error: {e}")))?;
        if let Some(seed) = seed_override {
            config.seed = seed;
        }
        if let Some(dir) = out_dir {
            config.paths.checkpoint = join_if_relative(dir, &config.paths.checkpoint);
            config.paths.metrics = join_if_relative(dir, &config.paths.metrics);
            config.paths.dumps = join_if_relative(dir, &config.paths.dumps);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !self.sampler.validate() {
            return Err(CliError::Config(
                "sampler: temperature must be > 0, 0 < top_p <= 1, top_k >= 1".into(),
            ));
        }
        self.ppo
            .validate()
            .map_err(|e| CliError::Config(format!("ppo: {e}")))?;
        if self.episode.turns < 1 {
            return Err(CliError::Config("episode.turns must be >= 1".into()));
        }
        if self.episode.block < 1 {
            return Err(CliError::Config("episode.block must be >= 1".into()));
        }
        if self.episode.salient_k < 1 {
            return Err(CliError::Config("episode.salient_k must be >= 1".into()));
        }
        if self.reward.alpha < 0.0 || self.reward.beta < 0.0 || self.reward.gamma < 0.0 {
            return Err(CliError::Config("reward weights must be >= 0".into()));
        }
        if self.reward.ngram_n < 1 {
            return Err(CliError::Config("reward.ngram_n must be >= 1".into()));
        }
        if self.history.truncate_m < 2 {
            return Err(CliError::Config("history.truncate_m must be >= 2".into()));
        }
        Ok(())
    }

    pub fn dump(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Environment stream seed (prompts, problems, candidate sampling).
    pub fn env_seed(&self) -> u64 {
        if self.episode.env_seed != 0 {
            self.episode.env_seed
        } else {
            attnrl_core::derive_seed(self.seed, &[0x456e76]) // "Env"
        }
    }

    /// Model initialization seed.
    pub fn model_seed(&self) -> u64 {
        if self.model.seed != 0 {
            self.model.seed
        } else {
            attnrl_core::derive_seed(self.seed, &[0x4d6f64]) // "Mod"
        }
    }

    pub fn build_environment(&self) -> Environment {
        match self.episode.kind {
            EpisodeKind::Dialogue => Environment::Dialogue(DialogueEnv::new(
                self.episode.n_keywords,
                self.episode.n_fillers,
            )),
            EpisodeKind::Cot => Environment::Cot(CotEnv::new()),
        }
    }

    /// Model config with the vocabulary size resolved against `env`.
    pub fn resolved_model(&self, env: &Environment) -> ModelConfig {
        let mut m = self.model.clone();
        if m.vocab_size == 0 {
            m.vocab_size = env.vocab().size();
        }
        m.seed = self.model_seed();
        m
    }

    pub fn reward_config(&self) -> RewardConfig {
        RewardConfig {
            weights: RewardWeights {
                alpha: self.reward.alpha,
                beta: self.reward.beta,
                gamma: self.reward.gamma,
                ngram_n: self.reward.ngram_n,
            },
            clamp: ClampConfig {
                enabled: self.reward.clamp.enabled,
                delta0: self.reward.clamp.delta0,
                kappa: self.reward.clamp.kappa,
            },
            rep_denominator: self.reward.rep_denominator,
            lambda_mode: self.reward.lambda_mode,
            lambda_final: self.reward.lambda_final,
        }
    }

    pub fn episode_config(&self, env: &Environment) -> EpisodeConfig {
        let salience = if self.episode.keywords.is_empty() {
            SalienceMode::IdfTopK {
                k: self.episode.salient_k,
            }
        } else {
            let vocab = env.vocab();
            SalienceMode::Keywords {
                ids: self
                    .episode
                    .keywords
                    .iter()
                    .filter_map(|w| vocab.id(&w.to_lowercase()))
                    .collect(),
            }
        };
        EpisodeConfig {
            kind: self.episode.kind,
            turns: self.episode.turns,
            block: self.episode.block,
            max_response_tokens: self.episode.max_response_tokens,
            cot_max_reasoning: self.episode.cot_max_reasoning,
            salience,
            scope: self.episode.salient_scope,
            l_prime: self.episode.l_prime,
            ban_eos: self.episode.ban_eos,
            prune_max_len: self.history.prune_max_len,
            truncate_m: self.history.truncate_m,
            mass_floor: self.history.mass_floor,
        }
    }
}

fn join_if_relative(dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

/// Applies `ATTNRL_<KEY>` / `ATTNRL_<SECTION>_<KEY>` overrides onto the raw
/// TOML tree (so unknown keys are still rejected during deserialization).
/// `reward.clamp` fields are addressed as `ATTNRL_REWARD_CLAMP_<KEY>`.
fn apply_env_overrides(
    value: &mut toml::Value,
    env_vars: &[(String, String)],
) -> Result<(), CliError> {
    const SECTIONS: [&str; 7] = [
        "model", "sampler", "reward", "ppo", "episode", "history", "paths",
    ];
    for (name, raw) in env_vars {
        let Some(rest) = name.strip_prefix("ATTNRL_") else {
            continue;
        };
        let lower = rest.to_lowercase();
        let parsed = parse_scalar(raw);
        let table = value
            .as_table_mut()
            .ok_or_else(|| CliError::Config("config root must be a table".into()))?;
        let section = SECTIONS
            .iter()
            .find(|s| lower == **s || lower.starts_with(&format!("{s}_")));
        match section {
            None => {
                // Top-level key (seed, iterations).
                table.insert(lower.clone(), parsed);
            }
            Some(&section) => {
                let key = lower[section.len() + 1..].to_string();
                let sect = table
                    .entry(section)
                    .or_insert_with(|| toml::Value::Table(Default::default()))
                    .as_table_mut()
                    .ok_or_else(|| {
                        CliError::Config(format!("section {section} is not a table"))
                    })?;
                if section == "reward" {
                    if let Some(clamp_key) = key.strip_prefix("clamp_") {
                        let clamp = sect
                            .entry("clamp")
                            .or_insert_with(|| toml::Value::Table(Default::default()))
                            .as_table_mut()
                            .ok_or_else(|| {
                                CliError::Config("reward.clamp is not a table".into())
                            })?;
                        clamp.insert(clamp_key.to_string(), parsed);
                        continue;
                    }
                }
                sect.insert(key, parsed);
            }
        }
    }
    Ok(())
}

fn parse_scalar(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    // Literal TOML (arrays etc.), else a plain string.
    if let Ok(v) = format!("v = {raw}").parse::<toml::Value>() {
        if let Some(inner) = v.get("v") {
            return inner.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_runnable() {
        let cfg = RunConfig::load(None, &[], None, None).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.ppo.epsilon, 0.1);
        assert_eq!(cfg.sampler.top_k, 50);
    }

    #[test]
    fn dump_round_trips() {
        let cfg = RunConfig::load(None, &[], Some(7), None).unwrap();
        let text = cfg.dump();
        let back: RunConfig = text.parse::<toml::Value>().unwrap().try_into().unwrap();
        assert_eq!(back.seed, 7);
        assert_eq!(cfg.dump(), back.dump());
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.toml");
        std::fs::write(&p, "[ppo]\nepsilonn = 0.2\n").unwrap();
        let err = RunConfig::load(Some(&p), &[], None, None).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("epsilonn"), "message must name the key: {msg}");
    }

    #[test]
    fn env_overrides_apply_and_typo_guard_holds() {
        let vars = vec![
            ("ATTNRL_SEED".to_string(), "9".to_string()),
            ("ATTNRL_PPO_EPSILON".to_string(), "0.2".to_string()),
            ("ATTNRL_REWARD_CLAMP_ENABLED".to_string(), "false".to_string()),
            ("ATTNRL_EPISODE_KIND".to_string(), "cot".to_string()),
            ("ATTNRL_SAMPLER_TOP_K".to_string(), "5".to_string()),
        ];
        let cfg = RunConfig::load(None, &vars, None, None).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.ppo.epsilon, 0.2);
        assert!(!cfg.reward.clamp.enabled);
        assert_eq!(cfg.episode.kind, EpisodeKind::Cot);
        assert_eq!(cfg.sampler.top_k, 5);

        let bad = vec![("ATTNRL_PPO_EPSILONN".to_string(), "0.3".to_string())];
        assert!(RunConfig::load(None, &bad, None, None).is_err());
    }

    #[test]
    fn seed_override_wins() {
        let cfg = RunConfig::load(None, &[], Some(123), None).unwrap();
        assert_eq!(cfg.seed, 123);
    }

    #[test]
    fn out_dir_prefixes_relative_paths() {
        let cfg = RunConfig::load(None, &[], None, Some(Path::new("/tmp/run"))).unwrap();
        assert_eq!(cfg.paths.metrics, PathBuf::from("/tmp/run/metrics.jsonl"));
    }
}
