//! Small differentiable encoder-decoder sequence model with cross-attention
//! exposed at every decoding step.
//!
//! Pre-LN transformer, f64 throughout, flat parameter vector with a named
//! layout map. Decoding recomputes the prefix each step (no KV cache for the
//! decoder side; encoder keys/values are built once per session).

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attn::{capture_precision, AttentionRecord};
use crate::error::{Error, Result};
use crate::history::{HistEntry, History};
use crate::tape::{Gradients, NodeId, Tape, Tensor};
use crate::text::PAD;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// 0 means "derive from the environment's vocabulary".
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            d_model: 64,
            layers: 2,
            heads: 2,
            max_len: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(Error::InvalidConfig("layers must be >= 1".into()));
        }
        if self.heads < 1 || self.d_model % self.heads != 0 {
            return Err(Error::InvalidConfig(
                "d_model must be divisible by heads".into(),
            ));
        }
        if self.vocab_size == 0 {
            return Err(Error::InvalidConfig("vocab_size not resolved".into()));
        }
        Ok(())
    }

    fn ff_hidden(&self) -> usize {
        2 * self.d_model
    }

    pub fn param_count(&self) -> usize {
        ParamLayout::build(self).total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BlockKind {
    Weight,
    Bias,
    LnGain,
    LnBias,
}

#[derive(Debug, Clone)]
struct Block {
    offset: usize,
    rows: usize,
    cols: usize,
    kind: BlockKind,
}

/// Named, disjoint blocks covering the flat parameter vector exactly.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    blocks: Vec<(String, Block)>,
    by_name: HashMap<String, usize>,
    pub total: usize,
}

impl ParamLayout {
    pub fn build(cfg: &ModelConfig) -> Self {
        struct Builder {
            blocks: Vec<(String, Block)>,
            total: usize,
        }
        impl Builder {
            fn push(&mut self, name: String, rows: usize, cols: usize, kind: BlockKind) {
                self.blocks.push((
                    name,
                    Block {
                        offset: self.total,
                        rows,
                        cols,
                        kind,
                    },
                ));
                self.total += rows * cols;
            }
            fn attn(&mut self, prefix: &str, d: usize, heads: usize) {
                for mat in ["wq", "wk", "wv"] {
                    // Head-major storage: head h is a contiguous d x d_head slab.
                    self.push(
                        format!("{prefix}.{mat}"),
                        heads * d,
                        d / heads,
                        BlockKind::Weight,
                    );
                }
                self.push(format!("{prefix}.wo"), d, d, BlockKind::Weight);
            }
            fn ln(&mut self, name: &str, d: usize) {
                self.push(format!("{name}.g"), 1, d, BlockKind::LnGain);
                self.push(format!("{name}.b"), 1, d, BlockKind::LnBias);
            }
            fn ffn(&mut self, prefix: &str, d: usize, ff: usize) {
                self.push(format!("{prefix}.w1"), d, ff, BlockKind::Weight);
                self.push(format!("{prefix}.b1"), 1, ff, BlockKind::Bias);
                self.push(format!("{prefix}.w2"), ff, d, BlockKind::Weight);
                self.push(format!("{prefix}.b2"), 1, d, BlockKind::Bias);
            }
        }

        let d = cfg.d_model;
        let ff = cfg.ff_hidden();
        let mut b = Builder {
            blocks: Vec::new(),
            total: 0,
        };
        b.push("tok_embed".into(), cfg.vocab_size, d, BlockKind::Weight);
        b.push("pos_embed".into(), cfg.max_len, d, BlockKind::Weight);
        for l in 0..cfg.layers {
            b.ln(&format!("enc{l}.ln1"), d);
            b.attn(&format!("enc{l}.self"), d, cfg.heads);
            b.ln(&format!("enc{l}.ln2"), d);
            b.ffn(&format!("enc{l}.ff"), d, ff);
        }
        b.ln("enc.final_ln", d);
        for l in 0..cfg.layers {
            b.ln(&format!("dec{l}.ln1"), d);
            b.attn(&format!("dec{l}.self"), d, cfg.heads);
            b.ln(&format!("dec{l}.ln2"), d);
            b.attn(&format!("dec{l}.cross"), d, cfg.heads);
            b.ln(&format!("dec{l}.ln3"), d);
            b.ffn(&format!("dec{l}.ff"), d, ff);
        }
        b.ln("dec.final_ln", d);
        b.push("out_proj".into(), d, cfg.vocab_size, BlockKind::Weight);
        b.push("out_bias".into(), 1, cfg.vocab_size, BlockKind::Bias);

        let by_name = b
            .blocks
            .iter()
            .enumerate()
            .map(|(i, (name, _))| (name.clone(), i))
            .collect();
        ParamLayout {
            blocks: b.blocks,
            by_name,
            total: b.total,
        }
    }

    fn get(&self, name: &str) -> &Block {
        let idx = *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter block {name}"));
        &self.blocks[idx].1
    }

    pub fn offset(&self, name: &str) -> usize {
        self.get(name).offset
    }

    pub fn shape(&self, name: &str) -> (usize, usize) {
        let b = self.get(name);
        (b.rows, b.cols)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blocks.iter().map(|(n, _)| n.as_str())
    }
}

/// Flat parameter store for the policy network.
#[derive(Debug, Clone)]
pub struct PolicyParams {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub data: Vec<f64>,
}

impl PolicyParams {
    /// Uniform(-1/sqrt(d_model), 1/sqrt(d_model)) weights, unit layer-norm
    /// gains, zero biases; seeded from the config.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::build(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let bound = 1.0 / (config.d_model as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let mut data = vec![0.0; layout.total];
        for (_, block) in &layout.blocks {
            let slice = &mut data[block.offset..block.offset + block.rows * block.cols];
            match block.kind {
                BlockKind::Weight => {
                    for x in slice.iter_mut() {
                        *x = dist.sample(&mut rng);
                    }
                }
                BlockKind::LnGain => slice.fill(1.0),
                BlockKind::Bias | BlockKind::LnBias => slice.fill(0.0),
            }
        }
        Ok(PolicyParams {
            config: config.clone(),
            layout,
            data,
        })
    }

    pub fn block(&self, name: &str) -> &[f64] {
        let b = self.layout.get(name);
        &self.data[b.offset..b.offset + b.rows * b.cols]
    }

    pub fn block_mut(&mut self, name: &str) -> &mut [f64] {
        let b = self.layout.get(name).clone();
        &mut self.data[b.offset..b.offset + b.rows * b.cols]
    }
}

/// Encoder output on some tape plus its validity mask (PAD positions false).
#[derive(Debug, Clone)]
pub struct EncOut {
    pub node: NodeId,
    pub valid: Vec<bool>,
}

/// Encoder output with per-layer/head cross-attention keys and values
/// prepared once so repeated decoder passes can share them.
pub struct EncCtx {
    pub enc: NodeId,
    pub valid: Vec<bool>,
    kv: Vec<Vec<(NodeId, NodeId)>>,
}

struct AttnNodes {
    wq: Vec<NodeId>,
    wk: Vec<NodeId>,
    wv: Vec<NodeId>,
    wo: NodeId,
}

struct LnNodes {
    g: NodeId,
    b: NodeId,
}

struct FfNodes {
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

struct EncLayerNodes {
    ln1: LnNodes,
    self_attn: AttnNodes,
    ln2: LnNodes,
    ff: FfNodes,
}

struct DecLayerNodes {
    ln1: LnNodes,
    self_attn: AttnNodes,
    ln2: LnNodes,
    cross_attn: AttnNodes,
    ln3: LnNodes,
    ff: FfNodes,
}

struct ParamNodes {
    tok: NodeId,
    pos: NodeId,
    enc_layers: Vec<EncLayerNodes>,
    enc_final: LnNodes,
    dec_layers: Vec<DecLayerNodes>,
    dec_final: LnNodes,
    out_w: NodeId,
    out_b: NodeId,
}

/// A computation graph over one parameter snapshot. Everything the model can
/// do — encoding, teacher-forced scoring, stepwise decoding with attention
/// capture — builds nodes here; `backward` differentiates any scalar node
/// with respect to the flat parameter vector.
pub struct ModelGraph<'p> {
    pub tape: Tape,
    params: &'p PolicyParams,
    nodes: Option<ParamNodes>,
}

impl<'p> ModelGraph<'p> {
    pub fn new(params: &'p PolicyParams) -> Self {
        ModelGraph {
            tape: Tape::new(params.data.len()),
            params,
            nodes: None,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    fn param(&mut self, name: &str) -> NodeId {
        let b = self.params.layout.get(name).clone();
        self.tape
            .param(&self.params.data, b.offset, b.rows, b.cols)
    }

    fn ln_nodes(&mut self, name: &str) -> LnNodes {
        LnNodes {
            g: self.param(&format!("{name}.g")),
            b: self.param(&format!("{name}.b")),
        }
    }

    fn attn_nodes(&mut self, prefix: &str) -> AttnNodes {
        let cfg = self.params.config.clone();
        let dh = cfg.d_model / cfg.heads;
        let mut per_head = |mat: &str| -> Vec<NodeId> {
            let b = self.params.layout.get(&format!("{prefix}.{mat}")).clone();
            (0..cfg.heads)
                .map(|h| {
                    self.tape.param(
                        &self.params.data,
                        b.offset + h * cfg.d_model * dh,
                        cfg.d_model,
                        dh,
                    )
                })
                .collect()
        };
        AttnNodes {
            wq: per_head("wq"),
            wk: per_head("wk"),
            wv: per_head("wv"),
            wo: self.param(&format!("{prefix}.wo")),
        }
    }

    fn ff_nodes(&mut self, prefix: &str) -> FfNodes {
        FfNodes {
            w1: self.param(&format!("{prefix}.w1")),
            b1: self.param(&format!("{prefix}.b1")),
            w2: self.param(&format!("{prefix}.w2")),
            b2: self.param(&format!("{prefix}.b2")),
        }
    }

    fn ensure_nodes(&mut self) {
        if self.nodes.is_some() {
            return;
        }
        let layers = self.params.config.layers;
        let nodes = ParamNodes {
            tok: self.param("tok_embed"),
            pos: self.param("pos_embed"),
            enc_layers: (0..layers)
                .map(|l| EncLayerNodes {
                    ln1: self.ln_nodes(&format!("enc{l}.ln1")),
                    self_attn: self.attn_nodes(&format!("enc{l}.self")),
                    ln2: self.ln_nodes(&format!("enc{l}.ln2")),
                    ff: self.ff_nodes(&format!("enc{l}.ff")),
                })
                .collect(),
            enc_final: self.ln_nodes("enc.final_ln"),
            dec_layers: (0..layers)
                .map(|l| DecLayerNodes {
                    ln1: self.ln_nodes(&format!("dec{l}.ln1")),
                    self_attn: self.attn_nodes(&format!("dec{l}.self")),
                    ln2: self.ln_nodes(&format!("dec{l}.ln2")),
                    cross_attn: self.attn_nodes(&format!("dec{l}.cross")),
                    ln3: self.ln_nodes(&format!("dec{l}.ln3")),
                    ff: self.ff_nodes(&format!("dec{l}.ff")),
                })
                .collect(),
            dec_final: self.ln_nodes("dec.final_ln"),
            out_w: self.param("out_proj"),
            out_b: self.param("out_bias"),
        };
        self.nodes = Some(nodes);
    }

    fn feed_forward(&mut self, x: NodeId, prefix_modules: usize, layer: usize, dec: bool) -> NodeId {
        // Resolve the ff node ids first to satisfy the borrow checker.
        let _ = prefix_modules;
        let (w1, b1, w2, b2) = {
            let nodes = self.nodes.as_ref().unwrap();
            let ff = if dec {
                &nodes.dec_layers[layer].ff
            } else {
                &nodes.enc_layers[layer].ff
            };
            (ff.w1, ff.b1, ff.w2, ff.b2)
        };
        let h = self.tape.matmul(x, w1);
        let h = self.tape.add_row(h, b1);
        let h = self.tape.tanh(h);
        let h = self.tape.matmul(h, w2);
        self.tape.add_row(h, b2)
    }

    /// Multi-head attention of `queries` against precomputed keys/values
    /// (one (k, v) per head). Returns the output projection; when `capture`
    /// is set, pushes each head's attention row for the last query position.
    #[allow(clippy::too_many_arguments)]
    fn attention_kv(
        &mut self,
        queries: NodeId,
        kv: &[(NodeId, NodeId)],
        mask: &[bool],
        wq: &[NodeId],
        wo: NodeId,
        capture: &mut Option<&mut Vec<Vec<f64>>>,
    ) -> NodeId {
        let dh = self.params.config.d_model / self.params.config.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(kv.len());
        for (h, &(k, v)) in kv.iter().enumerate() {
            let q = self.tape.matmul(queries, wq[h]);
            let scores = self.tape.matmul_transb(q, k);
            let scaled = self.tape.scale(scores, scale);
            let probs = self.tape.softmax_rows(scaled, mask.to_vec());
            if let Some(rows) = capture.as_deref_mut() {
                let t = self.tape.value(probs);
                let last = t.row(t.rows - 1);
                rows.push(last.iter().map(|&p| capture_precision(p)).collect());
            }
            heads.push(self.tape.matmul(probs, v));
        }
        let ctx = self.tape.concat_cols(heads);
        self.tape.matmul(ctx, wo)
    }

    fn kv_for(&mut self, src: NodeId, wk: &[NodeId], wv: &[NodeId]) -> Vec<(NodeId, NodeId)> {
        wk.iter()
            .zip(wv)
            .map(|(&k, &v)| (self.tape.matmul(src, k), self.tape.matmul(src, v)))
            .collect()
    }

    /// Encodes a history into per-position states (h x d node after final
    /// layer norm) and the validity mask.
    pub fn encode(&mut self, history: &History) -> Result<EncOut> {
        let cfg = self.params.config.clone();
        if history.is_empty() {
            return Err(Error::EmptyInput);
        }
        if history.len() > cfg.max_len {
            return Err(Error::HistoryTooLong {
                len: history.len(),
                max_len: cfg.max_len,
            });
        }
        self.ensure_nodes();
        let m = history.len();
        let mut ids = Vec::with_capacity(m);
        let mut overrides = Vec::new();
        let mut valid = Vec::with_capacity(m);
        for (i, entry) in history.entries().iter().enumerate() {
            match entry {
                HistEntry::Tok { id, .. } => {
                    if *id as usize >= cfg.vocab_size {
                        return Err(Error::TokenOutOfVocab {
                            id: *id,
                            vocab: cfg.vocab_size,
                        });
                    }
                    ids.push(*id);
                    valid.push(*id != PAD);
                }
                HistEntry::Summary { embedding } => {
                    ids.push(PAD);
                    overrides.push((i, embedding.clone()));
                    valid.push(true);
                }
            }
        }
        let (tok, pos) = {
            let nodes = self.nodes.as_ref().unwrap();
            (nodes.tok, nodes.pos)
        };
        let tok_e = self.tape.gather(tok, ids, overrides);
        let pos_ids: Vec<u32> = (0..m as u32).collect();
        let pos_e = self.tape.gather(pos, pos_ids, Vec::new());
        let mut x = self.tape.add(tok_e, pos_e);

        // Row-major m x m mask: every position may attend any valid position.
        let mut mask = vec![false; m * m];
        for i in 0..m {
            for j in 0..m {
                mask[i * m + j] = valid[j];
            }
        }
        for l in 0..cfg.layers {
            let (ln1, ln2, wq, wk, wv, wo) = {
                let nodes = self.nodes.as_ref().unwrap();
                let layer = &nodes.enc_layers[l];
                (
                    (layer.ln1.g, layer.ln1.b),
                    (layer.ln2.g, layer.ln2.b),
                    layer.self_attn.wq.clone(),
                    layer.self_attn.wk.clone(),
                    layer.self_attn.wv.clone(),
                    layer.self_attn.wo,
                )
            };
            let a = self.tape.layer_norm(x, ln1.0, ln1.1);
            let kv = self.kv_for(a, &wk, &wv);
            let sa = self.attention_kv(a, &kv, &mask, &wq, wo, &mut None);
            x = self.tape.add(x, sa);
            let f = self.tape.layer_norm(x, ln2.0, ln2.1);
            let ff = self.feed_forward(f, 0, l, false);
            x = self.tape.add(x, ff);
        }
        let (g, b) = {
            let nodes = self.nodes.as_ref().unwrap();
            (nodes.enc_final.g, nodes.enc_final.b)
        };
        let out = self.tape.layer_norm(x, g, b);
        Ok(EncOut { node: out, valid })
    }

    /// Builds per-layer/head cross-attention keys and values from an encoder
    /// output (or a constant snapshot of one).
    pub fn prepare_cross(&mut self, enc: &EncOut) -> EncCtx {
        self.ensure_nodes();
        let layers = self.params.config.layers;
        let mut kv = Vec::with_capacity(layers);
        for l in 0..layers {
            let (wk, wv) = {
                let nodes = self.nodes.as_ref().unwrap();
                (
                    nodes.dec_layers[l].cross_attn.wk.clone(),
                    nodes.dec_layers[l].cross_attn.wv.clone(),
                )
            };
            kv.push(self.kv_for(enc.node, &wk, &wv));
        }
        EncCtx {
            enc: enc.node,
            valid: enc.valid.clone(),
            kv,
        }
    }

    /// Wraps precomputed encoder state values as constants (rollout path:
    /// no gradient flows into the encoder).
    pub fn const_encoder(&mut self, states: &[Vec<f64>], valid: Vec<bool>) -> EncOut {
        let rows = states.len();
        let cols = states.first().map_or(0, |s| s.len());
        let mut data = Vec::with_capacity(rows * cols);
        for s in states {
            data.extend_from_slice(s);
        }
        let node = self.tape.constant(Tensor::from_vec(rows, cols, data));
        EncOut { node, valid }
    }

    /// One decoder pass over `prefix` (BOS + generated tokens). Returns the
    /// full logits node (p x V) and, when capturing, the per-layer/per-head
    /// cross-attention rows of the last position.
    fn decoder_pass(
        &mut self,
        ctx: &EncCtx,
        prefix: &[u32],
        mut capture: Option<&mut Vec<Vec<f64>>>,
    ) -> Result<NodeId> {
        let cfg = self.params.config.clone();
        if prefix.is_empty() {
            return Err(Error::EmptyInput);
        }
        if prefix.len() > cfg.max_len {
            return Err(Error::DecodeLengthExceeded);
        }
        self.ensure_nodes();
        for &id in prefix {
            if id as usize >= cfg.vocab_size {
                return Err(Error::TokenOutOfVocab {
                    id,
                    vocab: cfg.vocab_size,
                });
            }
        }
        let p = prefix.len();
        let h = ctx.valid.len();
        let (tok, pos) = {
            let nodes = self.nodes.as_ref().unwrap();
            (nodes.tok, nodes.pos)
        };
        let tok_e = self.tape.gather(tok, prefix.to_vec(), Vec::new());
        let pos_ids: Vec<u32> = (0..p as u32).collect();
        let pos_e = self.tape.gather(pos, pos_ids, Vec::new());
        let mut y = self.tape.add(tok_e, pos_e);

        let mut causal = vec![false; p * p];
        for i in 0..p {
            for j in 0..=i {
                causal[i * p + j] = true;
            }
        }
        let mut cross_mask = vec![false; p * h];
        for i in 0..p {
            for j in 0..h {
                cross_mask[i * h + j] = ctx.valid[j];
            }
        }

        for l in 0..cfg.layers {
            let (ln1, ln2, ln3, self_wq, self_wk, self_wv, self_wo, cross_wq, cross_wo) = {
                let nodes = self.nodes.as_ref().unwrap();
                let layer = &nodes.dec_layers[l];
                (
                    (layer.ln1.g, layer.ln1.b),
                    (layer.ln2.g, layer.ln2.b),
                    (layer.ln3.g, layer.ln3.b),
                    layer.self_attn.wq.clone(),
                    layer.self_attn.wk.clone(),
                    layer.self_attn.wv.clone(),
                    layer.self_attn.wo,
                    layer.cross_attn.wq.clone(),
                    layer.cross_attn.wo,
                )
            };
            let a = self.tape.layer_norm(y, ln1.0, ln1.1);
            let kv = self.kv_for(a, &self_wk, &self_wv);
            let sa = self.attention_kv(a, &kv, &causal, &self_wq, self_wo, &mut None);
            y = self.tape.add(y, sa);

            let c = self.tape.layer_norm(y, ln2.0, ln2.1);
            let mut layer_capture: Option<&mut Vec<Vec<f64>>> = capture.as_deref_mut();
            let ca = self.attention_kv(
                c,
                &ctx.kv[l],
                &cross_mask,
                &cross_wq,
                cross_wo,
                &mut layer_capture,
            );
            y = self.tape.add(y, ca);

            let f = self.tape.layer_norm(y, ln3.0, ln3.1);
            let ff = self.feed_forward(f, 0, l, true);
            y = self.tape.add(y, ff);
        }
        let (g, b, out_w, out_b) = {
            let nodes = self.nodes.as_ref().unwrap();
            (
                nodes.dec_final.g,
                nodes.dec_final.b,
                nodes.out_w,
                nodes.out_b,
            )
        };
        let y = self.tape.layer_norm(y, g, b);
        let logits = self.tape.matmul(y, out_w);
        Ok(self.tape.add_row(logits, out_b))
    }

    /// Teacher-forced per-token log-probabilities of `response` given the
    /// encoder context, as an m x 1 node. Uses the full softmax.
    pub fn log_prob_node(&mut self, ctx: &EncCtx, response: &[u32]) -> Result<NodeId> {
        if response.is_empty() {
            return Err(Error::EmptyInput);
        }
        // Decoder input is BOS + response[..-1]; position s predicts y_s.
        let mut prefix = Vec::with_capacity(response.len());
        prefix.push(crate::text::BOS);
        prefix.extend_from_slice(&response[..response.len() - 1]);
        let logits = self.decoder_pass(ctx, &prefix, None)?;
        let targets: Vec<usize> = response.iter().map(|&t| t as usize).collect();
        Ok(self.tape.pick_log_probs(logits, targets))
    }

    pub fn backward(&self, loss: NodeId) -> Gradients {
        self.tape.backward(loss)
    }
}

/// Per-step decoding output: next-token logits and the captured
/// per-layer/per-head cross-attention rows for this step.
pub struct StepOut {
    pub logits: Vec<f64>,
    pub captures: Vec<AttentionRecord>,
}

/// Incremental decoding session against a frozen encoder snapshot.
/// Each `step` recomputes the prefix through the decoder; cross-attention
/// keys/values are built once.
pub struct DecodeSession<'p> {
    graph: ModelGraph<'p>,
    ctx: EncCtx,
}

impl<'p> DecodeSession<'p> {
    pub fn new(params: &'p PolicyParams, enc_states: &[Vec<f64>], valid: Vec<bool>) -> Self {
        let mut graph = ModelGraph::new(params);
        let enc = graph.const_encoder(enc_states, valid);
        let ctx = graph.prepare_cross(&enc);
        DecodeSession { graph, ctx }
    }

    /// Logits over the vocabulary for the next token after `prefix`
    /// (prefix[0] must be BOS), plus captured cross-attention rows.
    pub fn step(&mut self, prefix: &[u32]) -> Result<StepOut> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let logits_node = self
            .graph
            .decoder_pass(&self.ctx, prefix, Some(&mut rows))?;
        let t = self.graph.tape.value(logits_node);
        let logits = t.row(t.rows - 1).to_vec();
        let step = prefix.len() - 1;
        let heads = self.graph.params.config.heads;
        let captures = rows
            .into_iter()
            .enumerate()
            .map(|(i, row)| AttentionRecord {
                layer: i / heads,
                head: i % heads,
                step,
                row,
            })
            .collect();
        Ok(StepOut { logits, captures })
    }

    /// Teacher-forced log-probs of a full response under this session's
    /// frozen encoder (values, not nodes).
    pub fn log_probs(&mut self, response: &[u32]) -> Result<Vec<f64>> {
        let node = self.graph.log_prob_node(&self.ctx, response)?;
        Ok(self.graph.tape.value(node).data.clone())
    }
}

/// Encoder states as plain values (one d_model vector per history position)
/// plus the validity mask.
pub fn encode(params: &PolicyParams, history: &History) -> Result<(Vec<Vec<f64>>, Vec<bool>)> {
    let mut graph = ModelGraph::new(params);
    let out = graph.encode(history)?;
    let t = graph.tape.value(out.node);
    let states = (0..t.rows).map(|i| t.row(i).to_vec()).collect();
    Ok((states, out.valid))
}

/// Teacher-forced per-token log-probabilities (values). The same graph path
/// the trainer differentiates, so repeated evaluation is bit-identical.
pub fn sequence_log_probs(
    params: &PolicyParams,
    history: &History,
    response: &[u32],
) -> Result<Vec<f64>> {
    let mut graph = ModelGraph::new(params);
    let enc = graph.encode(history)?;
    let ctx = graph.prepare_cross(&enc);
    let node = graph.log_prob_node(&ctx, response)?;
    Ok(graph.tape.value(node).data.clone())
}

// ---------------------------------------------------------------------------
// Checkpoints: magic "CKPT", u32 version, u32 iteration, model config
// (u32 vocab_size, d_model, layers, heads, max_len; u64 seed), u64 policy
// parameter count + f64 data, u64 critic parameter count + f64 data.
// Little-endian throughout.
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"CKPT";
const CKPT_VERSION: u32 = 1;

pub fn write_checkpoint(
    path: &Path,
    policy: &PolicyParams,
    critic: &[f64],
    iteration: u32,
) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CKPT_MAGIC)?;
    f.write_all(&CKPT_VERSION.to_le_bytes())?;
    f.write_all(&iteration.to_le_bytes())?;
    let c = &policy.config;
    for v in [c.vocab_size, c.d_model, c.layers, c.heads, c.max_len] {
        f.write_all(&(v as u32).to_le_bytes())?;
    }
    f.write_all(&c.seed.to_le_bytes())?;
    f.write_all(&(policy.data.len() as u64).to_le_bytes())?;
    for &x in &policy.data {
        f.write_all(&x.to_le_bytes())?;
    }
    f.write_all(&(critic.len() as u64).to_le_bytes())?;
    for &x in critic {
        f.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(PolicyParams, Vec<f64>, u32)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::CheckpointFormat("bad magic".into()));
    }
    let version = read_u32(&mut f)?;
    if version != CKPT_VERSION {
        return Err(Error::CheckpointFormat(format!(
            "unsupported version {version}"
        )));
    }
    let iteration = read_u32(&mut f)?;
    let config = ModelConfig {
        vocab_size: read_u32(&mut f)? as usize,
        d_model: read_u32(&mut f)? as usize,
        layers: read_u32(&mut f)? as usize,
        heads: read_u32(&mut f)? as usize,
        max_len: read_u32(&mut f)? as usize,
        seed: read_u64(&mut f)?,
    };
    config.validate().map_err(|e| {
        Error::CheckpointFormat(format!("invalid stored config: {e}"))
    })?;
    let layout = ParamLayout::build(&config);
    let n = read_u64(&mut f)? as usize;
    if n != layout.total {
        return Err(Error::CheckpointFormat(format!(
            "policy parameter count {n} does not match config ({})",
            layout.total
        )));
    }
    let mut data = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        f.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    let nc = read_u64(&mut f)? as usize;
    let mut critic = Vec::with_capacity(nc);
    for _ in 0..nc {
        f.read_exact(&mut buf)?;
        critic.push(f64::from_le_bytes(buf));
    }
    Ok((
        PolicyParams {
            config,
            layout,
            data,
        },
        critic,
        iteration,
    ))
}

fn read_u32(f: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    f.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(f: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    f.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
