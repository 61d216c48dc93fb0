//! Command implementations: train, rollout, eval, reward-inspect,
//! grad-check, ablate.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use attnrl_core::critic::{self, CriticParams};
use attnrl_core::episodes::{
    collect_batch, write_episode_dump, Environment, EpisodeKind, ModelAgent,
};
use attnrl_core::history::History;
use attnrl_core::model::{self, PolicyParams};
use attnrl_core::oracle::{self, OracleReport};
use attnrl_core::ppo::{train_iteration, Adam, TrainMetrics};
use attnrl_core::reward::compute_breakdown;
use attnrl_core::sample::SamplerConfig;

use crate::config::RunConfig;
use crate::CliError;

/// One metrics.jsonl line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: u64,
    pub mean_reward: f64,
    pub cov: f64,
    pub foc: f64,
    pub rep: f64,
    pub ppo_loss: f64,
    pub critic_loss: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub wall_ms: u64,
}

impl MetricsRecord {
    fn new(iter: u64, m: &TrainMetrics, wall_ms: u64) -> Self {
        MetricsRecord {
            iter,
            mean_reward: m.mean_reward,
            cov: m.cov,
            foc: m.foc,
            rep: m.rep,
            ppo_loss: m.ppo_loss,
            critic_loss: m.critic_loss,
            clip_fraction: m.clip_fraction,
            approx_kl: m.approx_kl,
            wall_ms,
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub iterations_run: u64,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub final_metrics: Option<TrainMetrics>,
}

const CHECKPOINT_EVERY: u64 = 50;

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

fn load_or_init(
    cfg: &RunConfig,
    env: &Environment,
    require_checkpoint: bool,
) -> Result<(PolicyParams, CriticParams, u64), CliError> {
    let model_cfg = cfg.resolved_model(env);
    if cfg.paths.checkpoint.exists() {
        let (policy, critic_raw, iter) = model::read_checkpoint(&cfg.paths.checkpoint)?;
        if policy.config.vocab_size != model_cfg.vocab_size {
            return Err(CliError::Config(format!(
                "checkpoint vocab_size {} does not match environment vocabulary {}",
                policy.config.vocab_size, model_cfg.vocab_size
            )));
        }
        let critic = CriticParams::from_vec(policy.config.d_model, critic_raw)?;
        Ok((policy, critic, iter as u64))
    } else if require_checkpoint {
        Err(CliError::Config(format!(
            "checkpoint {} not found (pass --fresh-init to start from scratch)",
            cfg.paths.checkpoint.display()
        )))
    } else {
        let policy = PolicyParams::init(&model_cfg)?;
        let critic = CriticParams::init(
            model_cfg.d_model,
            attnrl_core::derive_seed(cfg.seed, &[0x437269]), // "Cri"
        );
        Ok((policy, critic, 0))
    }
}

/// Runs `iterations` PPO iterations, appending one metrics line each and
/// checkpointing every 50 iterations and at exit. Resumes from an existing
/// checkpoint. On numerical divergence the rolled-back parameters are saved
/// before the error propagates (exit 3).
pub fn run_train(cfg: &RunConfig) -> Result<TrainOutcome, CliError> {
    let env = cfg.build_environment();
    let (mut policy, mut critic, start_iter) = load_or_init(cfg, &env, false)?;
    let ecfg = cfg.episode_config(&env);
    let rcfg = cfg.reward_config();
    let env_seed = cfg.env_seed();

    ensure_parent(&cfg.paths.checkpoint)?;
    ensure_parent(&cfg.paths.metrics)?;
    let mut metrics_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&cfg.paths.metrics)?;

    let mut opt_policy = Adam::new(policy.data.len());
    let mut opt_critic = Adam::new(critic.data.len());
    let mut final_metrics = None;

    let total = cfg.iterations as u64;
    for iter in start_iter..total {
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
                &cfg.sampler,
                cfg.ppo.n_candidates,
                cfg.ppo.batch_episodes,
                attnrl_core::derive_seed(env_seed, &[iter]),
            )?
        };
        let metrics = match train_iteration(
            &batch,
            &mut policy,
            &mut critic,
            &mut opt_policy,
            &mut opt_critic,
            &cfg.ppo,
        ) {
            Ok(m) => m,
            Err(e) => {
                // Parameters were rolled back; save them for post-mortem.
                model::write_checkpoint(&cfg.paths.checkpoint, &policy, &critic.data, iter as u32)?;
                return Err(e.into());
            }
        };
        let wall_ms = t0.elapsed().as_millis() as u64;
        let record = MetricsRecord::new(iter, &metrics, wall_ms);
        writeln!(metrics_file, "{}", serde_json::to_string(&record).unwrap())?;
        final_metrics = Some(metrics);
        if (iter + 1) % CHECKPOINT_EVERY == 0 {
            model::write_checkpoint(
                &cfg.paths.checkpoint,
                &policy,
                &critic.data,
                (iter + 1) as u32,
            )?;
        }
    }
    metrics_file.flush()?;
    model::write_checkpoint(&cfg.paths.checkpoint, &policy, &critic.data, total as u32)?;
    Ok(TrainOutcome {
        iterations_run: total.saturating_sub(start_iter),
        checkpoint: cfg.paths.checkpoint.clone(),
        metrics: cfg.paths.metrics.clone(),
        final_metrics,
    })
}

/// Rolls out episodes under the checkpoint (or a fresh initialization) and
/// writes one dump directory per episode.
pub fn run_rollout(
    cfg: &RunConfig,
    episodes: usize,
    fresh_init: bool,
) -> Result<Vec<PathBuf>, CliError> {
    let env = cfg.build_environment();
    let (policy, critic, _) = load_or_init(cfg, &env, !fresh_init)?;
    let ecfg = cfg.episode_config(&env);
    let rcfg = cfg.reward_config();
    let agent = ModelAgent {
        policy: &policy,
        critic: &critic,
    };
    let seed = attnrl_core::derive_seed(cfg.env_seed(), &[0x726f6c]); // "rol"
    let batch = collect_batch(
        &agent,
        &env,
        &ecfg,
        &rcfg,
        &cfg.sampler,
        cfg.ppo.n_candidates,
        episodes,
        seed,
    )?;
    std::fs::create_dir_all(&cfg.paths.dumps)?;
    let mut dirs = Vec::with_capacity(batch.len());
    for (e, rollout) in batch.iter().enumerate() {
        let dir = cfg.paths.dumps.join(format!("ep{e:04}"));
        write_episode_dump(&dir, &rollout.episode)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

/// Greedy-decoding evaluation summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub kind: String,
    pub episodes: usize,
    pub mean_episodic_reward: f64,
    pub std_episodic_reward: f64,
    pub mean_cov: f64,
    pub mean_foc: f64,
    pub mean_rep: f64,
    pub answer_accuracy: Option<f64>,
    pub checkpoint: String,
    pub checkpoint_iteration: u64,
}

/// Evaluates a checkpoint with greedy decoding (top_k = 1) over fresh
/// episodes and reports means and sample standard deviations.
pub fn run_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    episodes: usize,
) -> Result<EvalSummary, CliError> {
    let env = cfg.build_environment();
    let (policy, critic_raw, iter) = model::read_checkpoint(checkpoint)?;
    let critic = CriticParams::from_vec(policy.config.d_model, critic_raw)?;
    if policy.config.vocab_size != env.vocab().size() {
        return Err(CliError::Config(format!(
            "checkpoint vocab_size {} does not match environment vocabulary {}",
            policy.config.vocab_size,
            env.vocab().size()
        )));
    }
    let ecfg = cfg.episode_config(&env);
    let rcfg = cfg.reward_config();
    let agent = ModelAgent {
        policy: &policy,
        critic: &critic,
    };
    let greedy = SamplerConfig::greedy();
    let seed = attnrl_core::derive_seed(cfg.env_seed(), &[0x6576]); // "ev"
    let batch = collect_batch(&agent, &env, &ecfg, &rcfg, &greedy, 1, episodes, seed)?;

    let rewards: Vec<f64> = batch.iter().map(|r| r.episode.episodic_reward()).collect();
    let n = rewards.len().max(1) as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>()
        / (rewards.len().saturating_sub(1).max(1) as f64);
    let mut cov = 0.0;
    let mut foc = 0.0;
    let mut rep = 0.0;
    let mut turns = 0usize;
    let mut correct = 0usize;
    let mut cot = 0usize;
    for rollout in &batch {
        for turn in &rollout.episode.turns {
            cov += turn.reward.cov;
            foc += turn.reward.foc;
            rep += turn.reward.rep;
            turns += 1;
        }
        if let Some(ok) = rollout.episode.final_answer_correct {
            cot += 1;
            if ok {
                correct += 1;
            }
        }
    }
    let t = turns.max(1) as f64;
    Ok(EvalSummary {
        kind: match cfg.episode.kind {
            EpisodeKind::Dialogue => "dialogue".into(),
            EpisodeKind::Cot => "cot".into(),
        },
        episodes,
        mean_episodic_reward: mean,
        std_episodic_reward: var.sqrt(),
        mean_cov: cov / t,
        mean_foc: foc / t,
        mean_rep: rep / t,
        answer_accuracy: if cot > 0 {
            Some(correct as f64 / cot as f64)
        } else {
            None
        },
        checkpoint: checkpoint.display().to_string(),
        checkpoint_iteration: iter as u64,
    })
}

/// Minimal structural validation of a summary against the in-repo schema
/// (required keys plus primitive types).
pub fn validate_summary_schema(
    summary: &serde_json::Value,
    schema: &serde_json::Value,
) -> Result<(), CliError> {
    let obj = summary
        .as_object()
        .ok_or_else(|| CliError::Config("summary is not an object".into()))?;
    let required = schema["required"]
        .as_array()
        .ok_or_else(|| CliError::Config("schema missing required list".into()))?;
    for key in required {
        let key = key.as_str().unwrap_or_default();
        if !obj.contains_key(key) {
            return Err(CliError::Config(format!("summary missing field {key}")));
        }
    }
    let props = schema["properties"]
        .as_object()
        .ok_or_else(|| CliError::Config("schema missing properties".into()))?;
    for (key, value) in obj {
        let Some(spec) = props.get(key) else {
            return Err(CliError::Config(format!("summary has unknown field {key}")));
        };
        let types: Vec<String> = match &spec["type"] {
            serde_json::Value::String(s) => vec![s.clone()],
            serde_json::Value::Array(a) => a
                .iter()
                .filter_map(|t| t.as_str().map(String::from))
                .collect(),
            _ => vec![],
        };
        let ok = types.iter().any(|t| match t.as_str() {
            "number" => value.is_number(),
            "integer" => value.is_i64() || value.is_u64(),
            "string" => value.is_string(),
            "boolean" => value.is_boolean(),
            "null" => value.is_null(),
            "object" => value.is_object(),
            "array" => value.is_array(),
            _ => false,
        });
        if !ok {
            return Err(CliError::Config(format!(
                "summary field {key} has wrong type (expected {types:?})"
            )));
        }
    }
    Ok(())
}

/// Per-turn reward report computed from a dump.
#[derive(Debug, Clone, Serialize)]
pub struct InspectRow {
    pub turn: usize,
    pub cov: f64,
    pub foc: f64,
    pub rep: f64,
    pub r_turn: f64,
    pub clamped_steps: usize,
}

#[derive(Debug)]
pub struct InspectReport {
    pub rows: Vec<InspectRow>,
    /// Max absolute difference vs the dumped rewards.jsonl, if present.
    pub max_diff_vs_dump: Option<f64>,
}

/// Recomputes per-turn reward breakdowns from an episode dump (attn.bin +
/// tokens.txt) under the given config, printing a table and JSON lines.
/// Histories are rebuilt exactly as the rollout built them, so dumps written
/// without pruning/truncation reproduce in-process values bit-for-bit.
pub fn run_reward_inspect(cfg: &RunConfig, dump_dir: &Path) -> Result<InspectReport, CliError> {
    let env = cfg.build_environment();
    let ecfg = cfg.episode_config(&env);
    let rcfg = cfg.reward_config();
    let turns = attnrl_core::episodes::read_tokens_file(&dump_dir.join("tokens.txt"))?;
    let attns = attnrl_core::attn::read_attention_dump(&dump_dir.join("attn.bin"))?;
    if turns.len() != attns.len() {
        return Err(CliError::Config(format!(
            "dump mismatch: {} token turns vs {} attention turns",
            turns.len(),
            attns.len()
        )));
    }

    let ans_id = match &env {
        Environment::Cot(c) => Some(c.ans_id()),
        Environment::Dialogue(_) => None,
    };
    let mut history = History::with_bos();
    let mut rows = Vec::with_capacity(turns.len());
    for (i, (prompt, response)) in turns.iter().enumerate() {
        let t = i + 1;
        match cfg.episode.kind {
            EpisodeKind::Dialogue => {
                if t == 1 {
                    history.push_prompt(prompt, 1);
                } else {
                    history.push_sep();
                    history.push_response(&turns[i - 1].1, (t - 1) as u32);
                    history.push_sep();
                    history.push_prompt(prompt, t as u32);
                }
            }
            EpisodeKind::Cot => {
                if t == 1 {
                    history.push_prompt(prompt, 1);
                } else {
                    history.push_response(&turns[i - 1].1, (t - 1) as u32);
                    if prompt.as_slice() == [ans_id.unwrap_or(u32::MAX)] {
                        history.push_tok(
                            ans_id.unwrap(),
                            attnrl_core::history::Origin::Structural,
                        );
                    } else if !prompt.is_empty() {
                        history.push_prompt(prompt, t as u32);
                    }
                }
            }
        }
        let attn = &attns[i];
        if attn.hist_len != history.len() {
            return Err(CliError::Config(format!(
                "turn {t}: attention history length {} does not match rebuilt history {} \
                 (dumps from pruned/truncated histories cannot be re-inspected)",
                attn.hist_len,
                history.len()
            )));
        }
        let prompt_turn = match cfg.episode.kind {
            EpisodeKind::Dialogue => t as u32,
            EpisodeKind::Cot => 1,
        };
        let salient =
            attnrl_core::episodes::salient_positions(&history, env.idf(), &ecfg, prompt_turn)?;
        let b = compute_breakdown(
            attn,
            &salient,
            response,
            &history,
            t,
            &rcfg.weights,
            &rcfg.clamp,
            rcfg.rep_denominator,
        )?;
        rows.push(InspectRow {
            turn: t,
            cov: b.cov,
            foc: b.foc,
            rep: b.rep,
            r_turn: b.r_turn,
            clamped_steps: b.clamped_steps,
        });
    }

    let rewards_path = dump_dir.join("rewards.jsonl");
    let max_diff_vs_dump = if rewards_path.exists() {
        let dumped = attnrl_core::episodes::read_rewards_file(&rewards_path)?;
        let mut max_diff: f64 = 0.0;
        for (row, rec) in rows.iter().zip(&dumped) {
            for (a, b) in [
                (row.cov, rec.cov),
                (row.foc, rec.foc),
                (row.rep, rec.rep),
                (row.r_turn, rec.r_turn),
            ] {
                max_diff = max_diff.max((a - b).abs());
            }
        }
        Some(max_diff)
    } else {
        None
    };

    Ok(InspectReport {
        rows,
        max_diff_vs_dump,
    })
}

pub fn print_inspect_report(report: &InspectReport) {
    println!(
        "{:>4}  {:>10}  {:>10}  {:>10}  {:>10}  {:>13}",
        "turn", "cov", "foc", "rep", "r_turn", "clamped_steps"
    );
    for row in &report.rows {
        println!(
            "{:>4}  {:>10.6}  {:>10.6}  {:>10.6}  {:>10.6}  {:>13}",
            row.turn, row.cov, row.foc, row.rep, row.r_turn, row.clamped_steps
        );
    }
    for row in &report.rows {
        println!("{}", serde_json::to_string(row).unwrap());
    }
    if let Some(diff) = report.max_diff_vs_dump {
        println!("max |difference| vs dumped rewards.jsonl: {diff:.3e}");
    }
}

/// Brute-force verification suite behind `grad-check`: reward equivalence,
/// gradient checks for the policy objective and the critic loss, and
/// exhaustive policy-mass enumeration.
pub fn run_grad_check() -> Result<Vec<OracleReport>, CliError> {
    use attnrl_core::attn::AggregatedAttention;
    use attnrl_core::model::{ModelConfig, ModelGraph, ParamLayout};
    use attnrl_core::reward::{ClampConfig, RepDenominator, RewardWeights};
    use attnrl_core::tape::Tape;
    use attnrl_core::text::{SalientSet, SalientSource};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut reports = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    // Reward equivalence over random episodes.
    let w = RewardWeights::default();
    let clamp = ClampConfig::default();
    let mut max_diff = [0.0f64; 4]; // cov, foc, rep, r_turn
    for _ in 0..300 {
        let case = oracle::random_reward_case(&mut rng);
        let o = oracle::oracle_breakdown(
            &case.rows,
            &case.salient,
            &case.response,
            &case.history_ids,
            case.turn,
            &w,
            &clamp,
            RepDenominator::NgramCount,
        );
        let attn = AggregatedAttention::from_rows(case.rows.clone(), 1, 1);
        let salient = SalientSet::new(case.salient.clone(), SalientSource::IdfTopK)
            .map_err(attnrl_core::Error::from)?;
        let entries: Vec<attnrl_core::history::HistEntry> = case
            .history_ids
            .iter()
            .map(|id| match id {
                Some(id) => attnrl_core::history::HistEntry::Tok {
                    id: *id,
                    origin: attnrl_core::history::Origin::Prompt { turn: 1 },
                },
                None => attnrl_core::history::HistEntry::Summary {
                    embedding: Vec::new(),
                },
            })
            .collect();
        let history = History::from_entries(entries);
        let m = compute_breakdown(
            &attn,
            &salient,
            &case.response,
            &history,
            case.turn,
            &w,
            &clamp,
            RepDenominator::NgramCount,
        )?;
        max_diff[0] = max_diff[0].max((m.cov - o.cov).abs());
        max_diff[1] = max_diff[1].max((m.foc - o.foc).abs());
        max_diff[2] = max_diff[2].max((m.rep - o.rep).abs());
        max_diff[3] = max_diff[3].max((m.r_turn - o.r_turn).abs());
    }
    for (name, diff) in ["cov", "foc", "repHist", "R_turn"].iter().zip(max_diff) {
        reports.push(OracleReport::new(
            format!("reward/{name} max |module - oracle| (300 cases)"),
            diff,
            0.0,
            1e-12,
        ));
    }

    // Suffix-return equivalence.
    let mut ret_diff: f64 = 0.0;
    for _ in 0..200 {
        let t = rng.gen_range(1..=6usize);
        let rewards: Vec<f64> = (0..t).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let lambdas: Vec<f64> = (0..t).map(|_| rng.gen_range(0.0..3.0)).collect();
        let o = oracle::oracle_returns(&rewards, &lambdas);
        let m = attnrl_core::reward::cumulative_returns(
            &rewards,
            &attnrl_core::reward::ReturnWeights { lambdas },
        )?;
        for (a, b) in m.iter().zip(&o) {
            ret_diff = ret_diff.max((a - b).abs());
        }
    }
    reports.push(OracleReport::new(
        "returns max |module - oracle| (200 cases)",
        ret_diff,
        0.0,
        1e-12,
    ));

    // Gradient check: policy log-prob objective on the small config.
    let cfg = ModelConfig {
        vocab_size: 11,
        d_model: 8,
        layers: 1,
        heads: 1,
        max_len: 16,
        seed: 7,
    };
    let policy = PolicyParams::init(&cfg)?;
    let mut h = History::with_bos();
    h.push_prompt(&[5, 6, 7, 8], 1);
    let response = vec![9u32, 10, 5];
    let mut graph = ModelGraph::new(&policy);
    let enc = graph.encode(&h)?;
    let ctx = graph.prepare_cross(&enc);
    let lp = graph.log_prob_node(&ctx, &response)?;
    let loss = graph.tape.sum(lp);
    let grads = graph.backward(loss);
    let coords: Vec<usize> = (0..25)
        .map(|_| rng.gen_range(0..policy.data.len()))
        .collect();
    let h_clone = h.clone();
    let resp_clone = response.clone();
    let config_clone = cfg.clone();
    let fd = oracle::finite_diff_grad(
        move |data| {
            let p = PolicyParams {
                config: config_clone.clone(),
                layout: ParamLayout::build(&config_clone),
                data: data.to_vec(),
            };
            model::sequence_log_probs(&p, &h_clone, &resp_clone)
                .unwrap()
                .iter()
                .sum()
        },
        &policy.data,
        &coords,
        1e-4,
    )?;
    let mut max_rel: f64 = 0.0;
    for (&c, &numeric) in coords.iter().zip(&fd) {
        let analytic = grads.grad[c];
        let denom = numeric.abs().max(analytic.abs()).max(1e-8);
        max_rel = max_rel.max((numeric - analytic).abs() / denom);
    }
    reports.push(OracleReport::new(
        "policy log-prob gradient max relative error (25 coords)",
        max_rel,
        0.0,
        1e-3,
    ));

    // Gradient check: critic loss with respect to the head parameters.
    let critic = CriticParams::init(8, 3);
    let (states, valid) = model::encode(&policy, &h)?;
    let target = 0.4;
    let critic_loss_of = {
        let states = states.clone();
        let valid = valid.clone();
        move |data: &[f64]| {
            let c = CriticParams::from_vec(8, data.to_vec()).unwrap();
            let v = critic::value_from_states(&c, &states, &valid);
            (v - target) * (v - target)
        }
    };
    let mut tape = Tape::new(critic.data.len());
    let rows = states.len();
    let cols = states[0].len();
    let mut flat = Vec::with_capacity(rows * cols);
    for s in &states {
        flat.extend_from_slice(s);
    }
    let enc_node = tape.constant(attnrl_core::tape::Tensor::from_vec(rows, cols, flat));
    let v = critic::value_node(&mut tape, &critic, enc_node, &valid);
    let tgt = tape.scalar(target);
    let d = tape.sub(v, tgt);
    let sq = tape.mul(d, d);
    let cgrads = tape.backward(sq);
    let ccoords: Vec<usize> = (0..25)
        .map(|_| rng.gen_range(0..critic.data.len()))
        .collect();
    let cfd = oracle::finite_diff_grad(critic_loss_of, &critic.data, &ccoords, 1e-4)?;
    let mut cmax_rel: f64 = 0.0;
    for (&c, &numeric) in ccoords.iter().zip(&cfd) {
        let analytic = cgrads.grad[c];
        let denom = numeric.abs().max(analytic.abs()).max(1e-8);
        cmax_rel = cmax_rel.max((numeric - analytic).abs() / denom);
    }
    reports.push(OracleReport::new(
        "critic loss gradient max relative error (25 coords)",
        cmax_rel,
        0.0,
        1e-3,
    ));

    // Exhaustive policy mass.
    let tiny = ModelConfig {
        vocab_size: 4,
        d_model: 8,
        layers: 1,
        heads: 1,
        max_len: 8,
        seed: 5,
    };
    let tiny_policy = PolicyParams::init(&tiny)?;
    let mut th = History::with_bos();
    th.push_prompt(&[3], 1);
    let mass = oracle::enumerate_policy_mass(&tiny_policy, &th, 3)?;
    reports.push(OracleReport::new(
        "policy mass (vocab 4, max_len 3)",
        mass,
        1.0,
        1e-6,
    ));

    Ok(reports)
}

pub fn print_oracle_reports(reports: &[OracleReport]) -> bool {
    println!(
        "{:<55}  {:>14}  {:>14}  {:>10}  {:>9}  {}",
        "quantity", "module", "oracle", "|diff|", "tol", "status"
    );
    let mut all_pass = true;
    for r in reports {
        all_pass &= r.pass;
        println!(
            "{:<55}  {:>14.6e}  {:>14.6e}  {:>10.3e}  {:>9.1e}  {}",
            r.quantity,
            r.module_value,
            r.oracle_value,
            r.abs_diff,
            r.tolerance,
            if r.pass { "PASS" } else { "FAIL" }
        );
    }
    all_pass
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    NoHistoryCoverage,
    NoEntropyClamp,
    UniformLambda,
}

impl Ablation {
    pub fn parse(name: &str) -> Result<Self, CliError> {
        match name {
            "no-history-coverage" => Ok(Ablation::NoHistoryCoverage),
            "no-entropy-clamp" => Ok(Ablation::NoEntropyClamp),
            "uniform-lambda" => Ok(Ablation::UniformLambda),
            other => Err(CliError::Config(format!(
                "unknown ablation {other}; expected no-history-coverage, no-entropy-clamp, or uniform-lambda"
            ))),
        }
    }

    /// Flips exactly one configuration field.
    pub fn apply(&self, cfg: &mut RunConfig) {
        match self {
            Ablation::NoHistoryCoverage => {
                cfg.episode.salient_scope =
                    attnrl_core::episodes::SalientScope::CurrentPrompt;
            }
            Ablation::NoEntropyClamp => {
                cfg.reward.clamp.enabled = false;
            }
            Ablation::UniformLambda => {
                cfg.reward.lambda_mode = attnrl_core::reward::LambdaMode::Uniform;
            }
        }
    }
}

#[derive(Debug, Serialize)]
pub struct AblationArm {
    pub label: String,
    pub metrics_path: String,
    pub first_mean_reward: f64,
    pub final_mean_reward: f64,
    pub final_mean_foc: f64,
    pub eval: EvalSummary,
}

#[derive(Debug, Serialize)]
pub struct AblationSummary {
    pub ablation: String,
    pub base: AblationArm,
    pub ablated: AblationArm,
}

/// Runs matched-seed training for the base and ablated configurations and
/// reports both learning curves and final evaluations side by side.
pub fn run_ablation(
    cfg: &RunConfig,
    name: &str,
    eval_episodes: usize,
) -> Result<AblationSummary, CliError> {
    let ablation = Ablation::parse(name)?;
    let mut base_cfg = cfg.clone();
    relabel_paths(&mut base_cfg, "base");
    let mut ablated_cfg = cfg.clone();
    ablation.apply(&mut ablated_cfg);
    relabel_paths(&mut ablated_cfg, "ablated");

    let base = run_arm("base", &base_cfg, eval_episodes)?;
    let ablated = run_arm("ablated", &ablated_cfg, eval_episodes)?;
    Ok(AblationSummary {
        ablation: name.to_string(),
        base,
        ablated,
    })
}

fn relabel_paths(cfg: &mut RunConfig, label: &str) {
    let relabel = |p: &Path, label: &str| -> PathBuf {
        let stem = p.file_name().map(|f| f.to_string_lossy().to_string());
        match (p.parent(), stem) {
            (Some(dir), Some(stem)) => dir.join(format!("{label}_{stem}")),
            _ => PathBuf::from(format!("{label}_{}", p.display())),
        }
    };
    cfg.paths.checkpoint = relabel(&cfg.paths.checkpoint, label);
    cfg.paths.metrics = relabel(&cfg.paths.metrics, label);
    cfg.paths.dumps = relabel(&cfg.paths.dumps, label);
}

fn run_arm(label: &str, cfg: &RunConfig, eval_episodes: usize) -> Result<AblationArm, CliError> {
    if cfg.paths.metrics.exists() {
        std::fs::remove_file(&cfg.paths.metrics)?;
    }
    let outcome = run_train(cfg)?;
    let records = read_metrics(&outcome.metrics)?;
    let eval = run_eval(cfg, &outcome.checkpoint, eval_episodes)?;
    Ok(AblationArm {
        label: label.to_string(),
        metrics_path: outcome.metrics.display().to_string(),
        first_mean_reward: records.first().map(|r| r.mean_reward).unwrap_or(0.0),
        final_mean_reward: records.last().map(|r| r.mean_reward).unwrap_or(0.0),
        final_mean_foc: records.last().map(|r| r.foc).unwrap_or(0.0),
        eval,
    })
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, CliError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line)
                .map_err(|e| CliError::Config(format!("metrics parse error: {e}")))?,
        );
    }
    Ok(out)
}

pub fn print_ablation_summary(summary: &AblationSummary) {
    println!("ablation: {}", summary.ablation);
    println!(
        "{:<10} {:>14} {:>14} {:>12} {:>14}",
        "arm", "first_reward", "final_reward", "final_foc", "eval_reward"
    );
    for arm in [&summary.base, &summary.ablated] {
        println!(
            "{:<10} {:>14.4} {:>14.4} {:>12.4} {:>14.4}",
            arm.label,
            arm.first_mean_reward,
            arm.final_mean_reward,
            arm.final_mean_foc,
            arm.eval.mean_episodic_reward
        );
    }
    println!("{}", serde_json::to_string_pretty(summary).unwrap());
}
