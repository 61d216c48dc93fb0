//! Shared fixtures for the benchmark targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use attnrl_core::attn::{capture_precision, AggregatedAttention};
use attnrl_core::critic::CriticParams;
use attnrl_core::episodes::{DialogueEnv, EpisodeConfig, SalienceMode};
use attnrl_core::history::History;
use attnrl_core::model::{ModelConfig, PolicyParams};

pub struct Fixture {
    pub env: DialogueEnv,
    pub policy: PolicyParams,
    pub critic: CriticParams,
    pub ecfg: EpisodeConfig,
}

pub fn fixture() -> Fixture {
    let env = DialogueEnv::new(10, 10);
    let cfg = ModelConfig {
        vocab_size: env.vocab.size(),
        seed: 9,
        ..ModelConfig::default()
    };
    let policy = PolicyParams::init(&cfg).unwrap();
    let critic = CriticParams::init(cfg.d_model, 10);
    let ecfg = EpisodeConfig {
        turns: 3,
        max_response_tokens: 6,
        salience: SalienceMode::IdfTopK { k: 8 },
        ..EpisodeConfig::default()
    };
    Fixture {
        env,
        policy,
        critic,
        ecfg,
    }
}

/// A random normalized attention matrix in capture precision.
pub fn random_attention(steps: usize, hist_len: usize, seed: u64) -> AggregatedAttention {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..steps)
        .map(|_| {
            let raw: Vec<f64> = (0..hist_len).map(|_| rng.gen_range(0.01..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            raw.iter().map(|&x| capture_precision(x / sum)).collect()
        })
        .collect();
    AggregatedAttention::from_rows(rows, 1, 1)
}

pub fn random_history(len: usize, vocab: usize, seed: u64) -> History {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<u32> = (0..len)
        .map(|_| rng.gen_range(attnrl_core::text::RESERVED as u32..vocab as u32))
        .collect();
    let mut h = History::with_bos();
    h.push_prompt(&ids, 1);
    h
}
