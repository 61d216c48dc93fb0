//! Independent brute-force reference implementations, used only by tests and
//! verification commands. Every formula here is written with naive loops and
//! shares no code with the production modules it checks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::history::History;
use crate::model::{DecodeSession, PolicyParams};
use crate::reward::{ClampConfig, RepDenominator, RewardBreakdown, RewardWeights};
use crate::text::{BOS, EOS};

/// One verified quantity: module value vs oracle value.
#[derive(Debug, Clone)]
pub struct OracleReport {
    pub quantity: String,
    pub module_value: f64,
    pub oracle_value: f64,
    pub abs_diff: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleReport {
    pub fn new(quantity: impl Into<String>, module: f64, oracle: f64, tolerance: f64) -> Self {
        let abs_diff = (module - oracle).abs();
        OracleReport {
            quantity: quantity.into(),
            module_value: module,
            oracle_value: oracle,
            abs_diff,
            tolerance,
            pass: abs_diff <= tolerance,
        }
    }
}

/// Naive re-computation of one turn's reward components. Everything is a
/// plain nested loop over the raw inputs.
#[allow(clippy::too_many_arguments)]
pub fn oracle_breakdown(
    rows: &[Vec<f64>],
    salient: &[usize],
    response: &[u32],
    history_ids: &[Option<u32>],
    turn: usize,
    w: &RewardWeights,
    clamp: &ClampConfig,
    denom: RepDenominator,
) -> RewardBreakdown {
    if response.is_empty() || rows.is_empty() {
        return RewardBreakdown {
            cov: 0.0,
            foc: 0.0,
            rep: 0.0,
            r_turn: 0.0,
            clamped_steps: 0,
            empty_response: true,
        };
    }

    // Coverage: (1 / (|y| |I|)) sum_s sum_{j in I} A[s][j].
    let mut cov_total = 0.0;
    for row in rows {
        for &j in salient {
            cov_total += row[j];
        }
    }
    let cov = cov_total / (rows.len() as f64 * salient.len() as f64);

    // Focus: -(1/|y|) sum_s max(H(A[s]), delta_t), natural log, 0 ln 0 = 0.
    let mut ent_sum = 0.0;
    let mut clamped_steps = 0;
    for row in rows {
        let mut h = 0.0;
        for &p in row {
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        let floor = clamp.delta0 + clamp.kappa * (turn as f64 - 1.0);
        let eff = if clamp.enabled && h < floor {
            clamped_steps += 1;
            floor
        } else {
            h
        };
        ent_sum += eff;
    }
    let foc = -ent_sum / rows.len() as f64;

    // Repetition: O(|y| * |H|) window scan, SUMMARY (None) never matches.
    let n = w.ngram_n;
    let rep = if response.len() < n {
        0.0
    } else {
        let mut hits = 0usize;
        let windows = response.len() - n + 1;
        for s in 0..windows {
            let gram = &response[s..s + n];
            let mut found = false;
            if history_ids.len() >= n {
                'outer: for t in 0..=history_ids.len() - n {
                    for k in 0..n {
                        match history_ids[t + k] {
                            Some(id) if id == gram[k] => {}
                            _ => continue 'outer,
                        }
                    }
                    found = true;
                    break;
                }
            }
            if found {
                hits += 1;
            }
        }
        let d = match denom {
            RepDenominator::NgramCount => windows.max(1) as f64,
            RepDenominator::ResponseLen => response.len().max(1) as f64,
        };
        hits as f64 / d
    };

    let r_turn = w.alpha * cov + w.beta * foc - w.gamma * rep;
    RewardBreakdown {
        cov,
        foc,
        rep,
        r_turn,
        clamped_steps,
        empty_response: false,
    }
}

/// Suffix returns by direct per-turn summation (left-to-right, unlike the
/// production right-to-left accumulation).
pub fn oracle_returns(rewards: &[f64], lambdas: &[f64]) -> Vec<f64> {
    let t = rewards.len();
    let mut out = Vec::with_capacity(t);
    for start in 0..t {
        let mut g = 0.0;
        for u in start..t {
            g += lambdas[u] * rewards[u];
        }
        out.push(g);
    }
    out
}

/// Exhaustively sums the probability of every token sequence up to
/// `max_len` (sequences terminate at EOS or the length cap). Must equal 1
/// for a normalized policy. Refuses configurations beyond vocab 5 / length 3.
pub fn enumerate_policy_mass(
    policy: &PolicyParams,
    history: &History,
    max_len: usize,
) -> Result<f64> {
    let vocab = policy.config.vocab_size;
    if vocab > 5 || max_len > 3 {
        return Err(Error::EnumerationTooLarge { vocab, max_len });
    }
    let (states, valid) = crate::model::encode(policy, history)?;
    let mut session = DecodeSession::new(policy, &states, valid);
    let mut prefix = vec![BOS];
    enumerate_rec(&mut session, &mut prefix, 1.0, max_len, vocab)
}

fn enumerate_rec(
    session: &mut DecodeSession,
    prefix: &mut Vec<u32>,
    mass: f64,
    remaining: usize,
    vocab: usize,
) -> Result<f64> {
    if remaining == 0 {
        return Ok(mass);
    }
    let out = session.step(prefix)?;
    let max = out.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = out.logits.iter().map(|&l| (l - max).exp()).sum();
    let probs: Vec<f64> = out.logits.iter().map(|&l| (l - max).exp() / total).collect();
    let mut acc = 0.0;
    for tok in 0..vocab as u32 {
        let p = mass * probs[tok as usize];
        if tok == EOS {
            acc += p;
        } else {
            prefix.push(tok);
            acc += enumerate_rec(session, prefix, p, remaining - 1, vocab)?;
            prefix.pop();
        }
    }
    Ok(acc)
}

/// Central finite differences of `f` at `params` for the given coordinates.
pub fn finite_diff_grad<F: Fn(&[f64]) -> f64>(
    f: F,
    params: &[f64],
    coords: &[usize],
    h: f64,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(coords.len());
    for &c in coords {
        let mut plus = params.to_vec();
        plus[c] += h;
        let mut minus = params.to_vec();
        minus[c] -= h;
        let (fp, fm) = (f(&plus), f(&minus));
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NumericalDivergence(
                "non-finite function value in finite differences".into(),
            ));
        }
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// A randomly generated single-turn reward case (valid capture-precision
/// attention rows, random history/response/salient set), for the
/// module-vs-oracle equivalence checks.
#[derive(Debug, Clone)]
pub struct RewardCase {
    pub rows: Vec<Vec<f64>>,
    pub salient: Vec<usize>,
    pub response: Vec<u32>,
    pub history_ids: Vec<Option<u32>>,
    pub turn: usize,
}

pub fn random_reward_case(rng: &mut ChaCha8Rng) -> RewardCase {
    let hist_len = rng.gen_range(2..=32usize);
    let resp_len = rng.gen_range(1..=16usize);
    let vocab = 24u32;
    let mut rows = Vec::with_capacity(resp_len);
    for _ in 0..resp_len {
        let raw: Vec<f64> = (0..hist_len).map(|_| rng.gen_range(0.0..1.0) + 1e-6).collect();
        let sum: f64 = raw.iter().sum();
        rows.push(
            raw.iter()
                .map(|&x| crate::attn::capture_precision(x / sum))
                .collect(),
        );
    }
    let n_salient = rng.gen_range(1..=hist_len.min(6));
    let mut salient: Vec<usize> = Vec::new();
    while salient.len() < n_salient {
        let j = rng.gen_range(0..hist_len);
        if !salient.contains(&j) {
            salient.push(j);
        }
    }
    salient.sort_unstable();
    let history_ids: Vec<Option<u32>> = (0..hist_len)
        .map(|_| {
            if rng.gen_bool(0.05) {
                None // summary pseudo-token
            } else {
                Some(rng.gen_range(5..vocab))
            }
        })
        .collect();
    // Bias the response toward copying history so repHist is exercised.
    let response: Vec<u32> = (0..resp_len)
        .map(|_| {
            if rng.gen_bool(0.5) {
                let p = rng.gen_range(0..hist_len);
                history_ids[p].unwrap_or(5)
            } else {
                rng.gen_range(5..vocab)
            }
        })
        .collect();
    RewardCase {
        rows,
        salient,
        response,
        history_ids,
        turn: rng.gen_range(1..=4),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;

    #[test]
    fn finite_diff_on_quadratic() {
        let g = finite_diff_grad(|p| p[0] * p[0], &[3.0], &[0], 1e-4).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-7);
        let g = finite_diff_grad(|_| 2.5, &[3.0], &[0], 1e-4).unwrap();
        assert!(g[0].abs() < 1e-10);
    }

    #[test]
    fn returns_match_production_for_small_t() {
        let rewards = [0.1, 0.2, 0.3];
        let lambdas = [1.0, 1.0, 2.0];
        let oracle = oracle_returns(&rewards, &lambdas);
        let module = crate::reward::cumulative_returns(
            &rewards,
            &crate::reward::ReturnWeights {
                lambdas: lambdas.to_vec(),
            },
        )
        .unwrap();
        for (a, b) in oracle.iter().zip(&module) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_attention_agrees_degenerately() {
        let rows = vec![vec![1.0, 0.0, 0.0]];
        let b = oracle_breakdown(
            &rows,
            &[0],
            &[7],
            &[Some(5), Some(6), Some(7)],
            1,
            &RewardWeights::default(),
            &ClampConfig::disabled(),
            RepDenominator::NgramCount,
        );
        assert_eq!(b.foc, 0.0);
        assert_eq!(b.cov, 1.0);
    }

    #[test]
    fn enumeration_mass_is_one_for_tiny_model() {
        let cfg = ModelConfig {
            vocab_size: 4,
            d_model: 8,
            layers: 1,
            heads: 1,
            max_len: 8,
            seed: 1,
        };
        let policy = PolicyParams::init(&cfg).unwrap();
        let mut h = History::with_bos();
        h.push_prompt(&[3], 1); // any in-vocab token
        let mass = enumerate_policy_mass(&policy, &h, 3).unwrap();
        assert!((mass - 1.0).abs() < 1e-6, "mass {mass}");
    }

    #[test]
    fn enumeration_refuses_large_configs() {
        let cfg = ModelConfig {
            vocab_size: 11,
            d_model: 8,
            layers: 1,
            heads: 1,
            max_len: 8,
            seed: 1,
        };
        let policy = PolicyParams::init(&cfg).unwrap();
        let h = History::with_bos();
        assert!(matches!(
            enumerate_policy_mass(&policy, &h, 3),
            Err(Error::EnumerationTooLarge { .. })
        ));
    }

    #[test]
    fn random_cases_agree_with_production_reward() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = RewardWeights::default();
        let clamp = ClampConfig::default();
        for _ in 0..200 {
            let case = random_reward_case(&mut rng);
            let oracle = oracle_breakdown(
                &case.rows,
                &case.salient,
                &case.response,
                &case.history_ids,
                case.turn,
                &w,
                &clamp,
                RepDenominator::NgramCount,
            );
            // Production path.
            let attn =
                crate::attn::AggregatedAttention::from_rows(case.rows.clone(), 1, 1);
            let salient = crate::text::SalientSet::new(
                case.salient.clone(),
                crate::text::SalientSource::IdfTopK,
            )
            .unwrap();
            let entries: Vec<crate::history::HistEntry> = case
                .history_ids
                .iter()
                .map(|id| match id {
                    Some(id) => crate::history::HistEntry::Tok {
                        id: *id,
                        origin: crate::history::Origin::Prompt { turn: 1 },
                    },
                    None => crate::history::HistEntry::Summary {
                        embedding: Vec::new(),
                    },
                })
                .collect();
            let history = History::from_entries(entries);
            let module = crate::reward::compute_breakdown(
                &attn,
                &salient,
                &case.response,
                &history,
                case.turn,
                &w,
                &clamp,
                RepDenominator::NgramCount,
            )
            .unwrap();
            assert!((module.cov - oracle.cov).abs() <= 1e-12);
            assert!((module.foc - oracle.foc).abs() <= 1e-12);
            assert!((module.rep - oracle.rep).abs() <= 1e-12);
            assert!((module.r_turn - oracle.r_turn).abs() <= 1e-12);
            assert_eq!(module.clamped_steps, oracle.clamped_steps);
        }
    }
}
