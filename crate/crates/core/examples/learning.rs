//! Learning-curve probe for the salient-echo dialogue task.
//!
//! Usage: learning <policy_lr> <critic_lr> <iterations> <seed>

use attnrl_core::critic::CriticParams;
use attnrl_core::episodes::{
    collect_batch, DialogueEnv, Environment, EpisodeConfig, ModelAgent, SalienceMode,
};
use attnrl_core::model::{ModelConfig, PolicyParams};
use attnrl_core::ppo::{train_iteration, Adam, PPOConfig};
use attnrl_core::reward::RewardConfig;
use attnrl_core::sample::SamplerConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let policy_lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(2e-5);
    let critic_lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-5);
    let iterations: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(300);
    let seed: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0);

    let env = DialogueEnv::new(10, 10);
    let cfg = ModelConfig {
        vocab_size: env.vocab.size(),
        seed,
        ..ModelConfig::default()
    };
    let mut policy = PolicyParams::init(&cfg).unwrap();
    let mut critic = CriticParams::init(cfg.d_model, seed ^ 0xc0ffee);
    let ecfg = EpisodeConfig {
        turns: 3,
        max_response_tokens: 6,
        salience: SalienceMode::IdfTopK { k: 8 },
        ..EpisodeConfig::default()
    };
    let rcfg = RewardConfig::default();
    let sampler = SamplerConfig::default();
    let pcfg = PPOConfig {
        policy_lr,
        critic_lr,
        ..PPOConfig::default()
    };
    let mut opt_p = Adam::new(policy.data.len());
    let mut opt_c = Adam::new(critic.data.len());
    let env = Environment::Dialogue(env);

    let mut baseline = None;
    let t0 = std::time::Instant::now();
    for i in 0..iterations {
        let batch = {
            let agent = ModelAgent {
                policy: &policy,
                critic: &critic,
            };
            collect_batch(
                &agent,
                &env,
                &ecfg,
                &rcfg,
                &sampler,
                pcfg.n_candidates,
                pcfg.batch_episodes,
                attnrl_core::derive_seed(seed, &[i as u64]),
            )
            .unwrap()
        };
        let m = train_iteration(
            &batch,
            &mut policy,
            &mut critic,
            &mut opt_p,
            &mut opt_c,
            &pcfg,
        )
        .unwrap();
        if baseline.is_none() {
            baseline = Some(m.mean_reward);
        }
        if i % 25 == 0 || i == iterations - 1 {
            println!(
                "iter {i:4}  reward {:+.4}  cov {:.4}  foc {:+.4}  rep {:.4}  kl {:+.2e}  clip {:.3}",
                m.mean_reward, m.cov, m.foc, m.rep, m.approx_kl, m.clip_fraction
            );
        }
        if i == iterations - 1 {
            let base = baseline.unwrap();
            let gain = (m.mean_reward - base) / base.abs();
            println!(
                "baseline {base:+.4} final {:+.4} improvement {:+.1}% wall {:.0}s",
                m.mean_reward,
                100.0 * gain,
                t0.elapsed().as_secs_f64()
            );
        }
    }
}
