//! Top-k / nucleus (top-p) sampling with temperature.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub top_k: usize,
    pub top_p: f64,
    pub temperature: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            top_k: 50,
            top_p: 0.9,
            temperature: 0.8,
        }
    }
}

impl SamplerConfig {
    /// Greedy decoding (argmax).
    pub fn greedy() -> Self {
        SamplerConfig {
            top_k: 1,
            top_p: 1.0,
            temperature: 1.0,
        }
    }

    pub fn validate(&self) -> bool {
        self.temperature > 0.0 && self.top_p > 0.0 && self.top_p <= 1.0 && self.top_k >= 1
    }
}

/// The filtered support after temperature, top-k, and nucleus truncation:
/// (token id, renormalized probability), sorted by descending probability
/// (ties by ascending id).
pub fn filtered_support(logits: &[f64], cfg: &SamplerConfig) -> Vec<(u32, f64)> {
    assert!(cfg.validate(), "invalid sampler config");
    assert!(!logits.is_empty());
    let max = logits
        .iter()
        .map(|&l| l / cfg.temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<(u32, f64)> = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| (i as u32, (l / cfg.temperature - max).exp()))
        .collect();
    let total: f64 = probs.iter().map(|(_, p)| p).sum();
    for (_, p) in &mut probs {
        *p /= total;
    }
    probs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    probs.truncate(cfg.top_k.min(probs.len()));
    // Smallest prefix of the sorted distribution with cumulative mass >= top_p.
    let mut cut = probs.len();
    let mut cum = 0.0;
    for (i, (_, p)) in probs.iter().enumerate() {
        cum += p;
        if cum >= cfg.top_p {
            cut = i + 1;
            break;
        }
    }
    probs.truncate(cut);
    let kept: f64 = probs.iter().map(|(_, p)| p).sum();
    for (_, p) in &mut probs {
        *p /= kept;
    }
    probs
}

/// Samples a token id from the filtered support. Deterministic given the RNG
/// state.
pub fn sample_token<R: Rng>(logits: &[f64], cfg: &SamplerConfig, rng: &mut R) -> u32 {
    let support = filtered_support(logits, cfg);
    if support.len() == 1 {
        return support[0].0;
    }
    let draw: f64 = rng.gen();
    let mut cum = 0.0;
    for &(id, p) in &support {
        cum += p;
        if draw < cum {
            return id;
        }
    }
    support.last().unwrap().0
}
