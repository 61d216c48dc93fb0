//! Rough per-iteration timing at the default training scale.

use std::time::Instant;

use attnrl_core::critic::CriticParams;
use attnrl_core::episodes::{
    collect_batch, DialogueEnv, Environment, EpisodeConfig, ModelAgent, SalienceMode,
};
use attnrl_core::model::{ModelConfig, PolicyParams};
use attnrl_core::ppo::{train_iteration, Adam, PPOConfig};
use attnrl_core::reward::RewardConfig;
use attnrl_core::sample::SamplerConfig;

fn main() {
    let env = DialogueEnv::new(10, 10);
    let cfg = ModelConfig {
        vocab_size: env.vocab.size(),
        ..ModelConfig::default()
    };
    let mut policy = PolicyParams::init(&cfg).unwrap();
    let mut critic = CriticParams::init(cfg.d_model, 1);
    let ecfg = EpisodeConfig {
        turns: 3,
        max_response_tokens: 6,
        salience: SalienceMode::IdfTopK { k: 8 },
        ..EpisodeConfig::default()
    };
    let rcfg = RewardConfig::default();
    let sampler = SamplerConfig::default();
    let pcfg = PPOConfig::default();
    let mut opt_p = Adam::new(policy.data.len());
    let mut opt_c = Adam::new(critic.data.len());
    let env = Environment::Dialogue(env);

    let iters = 10;
    let mut collect_ms = 0.0;
    let mut train_ms = 0.0;
    for i in 0..iters {
        let t0 = Instant::now();
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
                i,
            )
            .unwrap()
        };
        let t1 = Instant::now();
        let metrics = train_iteration(
            &batch,
            &mut policy,
            &mut critic,
            &mut opt_p,
            &mut opt_c,
            &pcfg,
        )
        .unwrap();
        let t2 = Instant::now();
        collect_ms += t1.duration_since(t0).as_secs_f64() * 1e3;
        train_ms += t2.duration_since(t1).as_secs_f64() * 1e3;
        if i == 0 {
            println!("iter0 metrics: {metrics:?}");
        }
    }
    println!(
        "avg per iteration: collect {:.1} ms, train {:.1} ms, total {:.1} ms",
        collect_ms / iters as f64,
        train_ms / iters as f64,
        (collect_ms + train_ms) / iters as f64
    );
    println!(
        "projected 300 iterations: {:.1} s; x5 seeds: {:.1} s",
        (collect_ms + train_ms) / iters as f64 * 0.3,
        (collect_ms + train_ms) / iters as f64 * 1.5
    );
}
