//! Throwaway probe of the C6 acceptance configuration per seed.

use attnrl_cli::commands::{self, run_train};
use attnrl_cli::config::RunConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(600);
    let iters: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(300);
    let adv_norm: bool = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(false);
    let critic_lr: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(3e-4);
    let policy_lr: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let salient_k: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(8);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::load(None, &[], Some(seed), Some(dir.path())).unwrap();
    cfg.iterations = iters;
    cfg.ppo.policy_lr = policy_lr;
    cfg.episode.salient_k = salient_k;
    cfg.ppo.critic_lr = critic_lr;
    cfg.ppo.advantage_normalize = adv_norm;
    let outcome = run_train(&cfg).unwrap();
    let records = commands::read_metrics(&outcome.metrics).unwrap();
    let baseline = records.first().unwrap().mean_reward;
    let final_reward = records.last().unwrap().mean_reward;
    println!(
        "seed {seed} adv_norm {adv_norm} critic_lr {critic_lr} policy_lr {policy_lr} k {salient_k}: {baseline:+.4} -> {final_reward:+.4} ({:+.1}%)",
        100.0 * (final_reward - baseline) / baseline.abs()
    );
}
