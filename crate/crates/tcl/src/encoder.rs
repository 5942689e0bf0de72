//! The two-stream encoder: input embeddings over serialized sub-graphs,
//! structure-masked graph transformer blocks, and the cross-attentional
//! fusion stage producing dynamic node embeddings.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, Scalar, Tape, Tensor, Var, NEG_INF};
use crate::error::{Result, TclError};
use crate::tdig::{DepthConfig, NodeSequence};

/// Encoder hyper-parameters. Defaults: 64-dim embeddings, 16 heads, one
/// block, depth-5 sub-graphs, 0.6 input dropout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Max sub-graph depth k.
    pub depth: usize,
    /// Input-embedding dropout probability (train mode only).
    pub dropout: Scalar,
    /// Hidden width of the position-wise feed-forward sub-layer.
    pub ffn_hidden: usize,
    /// Give every head a full `dim`-wide projection instead of `dim/heads`.
    pub full_width_heads: bool,
    /// Serialized sequence length cap.
    pub max_seq_len: usize,
    /// Ablation: drop the time-interval embedding.
    pub no_te: bool,
    /// Ablation: drop the depth embedding.
    pub no_de: bool,
    /// Ablation: skip the cross-attention stage.
    pub no_ca: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 16,
            blocks: 1,
            depth: 5,
            dropout: 0.6,
            ffn_hidden: 64,
            full_width_heads: false,
            max_seq_len: (1 << 6) - 1,
            no_te: false,
            no_de: false,
            no_ca: false,
        }
    }
}

impl EncoderConfig {
    /// Defaults rescaled to a different embedding width.
    pub fn with_dim(dim: usize) -> Self {
        Self {
            dim,
            ffn_hidden: dim,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.blocks == 0 || self.depth == 0 {
            return Err(TclError::Config(
                "dim, heads, blocks, and depth must be positive".into(),
            ));
        }
        if !self.full_width_heads && self.dim % self.heads != 0 {
            return Err(TclError::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TclError::Config(format!(
                "dropout {} outside [0,1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn depth_config(&self) -> DepthConfig {
        DepthConfig {
            k: self.depth,
            max_seq_len: self.max_seq_len,
        }
    }

    fn head_width(&self) -> usize {
        if self.full_width_heads {
            self.dim
        } else {
            self.dim / self.heads
        }
    }

    fn qkv_width(&self) -> usize {
        self.heads * self.head_width()
    }
}

/// Parameter ids of one attention + feed-forward block.
#[derive(Debug, Clone)]
pub struct BlockIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

/// Parameter ids of the future-prediction head: two PReLU hidden layers
/// and a linear output.
#[derive(Debug, Clone)]
pub struct HeadIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub slope1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub slope2: ParamId,
    pub w3: ParamId,
    pub b3: ParamId,
}

/// Parameter ids of the discriminator's additive and multiplicative
/// interaction vectors.
#[derive(Debug, Clone)]
pub struct DiscIds {
    pub w_add: ParamId,
    pub w_mul: ParamId,
}

/// Typed index into the parameter registry.
#[derive(Debug, Clone)]
pub struct ModelLayout {
    pub node_emb: ParamId,
    pub depth_emb: ParamId,
    pub time_proj: ParamId,
    pub blocks: Vec<BlockIds>,
    pub cross: BlockIds,
    pub head: HeadIds,
    pub disc: DiscIds,
}

/// Every learned tensor, with a stable name-ordered registry used by the
/// optimizer, the checkpoint format, and gradient buffers.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub cfg: EncoderConfig,
    pub vocab_size: usize,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    pub layout: ModelLayout,
}

struct Registry<'r> {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    rng: &'r mut ChaCha20Rng,
    bound: Scalar,
}

impl Registry<'_> {
    fn add(&mut self, name: String, t: Tensor) -> ParamId {
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    fn weight(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let t = Tensor::uniform(self.rng, rows, cols, -self.bound, self.bound);
        self.add(name.to_string(), t)
    }

    fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name.to_string(), Tensor::zeros(rows, cols))
    }

    fn ones(&mut self, name: &str, cols: usize) -> ParamId {
        self.add(name.to_string(), Tensor::new(1, cols, vec![1.0; cols]))
    }

    fn scalar(&mut self, name: &str, x: Scalar) -> ParamId {
        self.add(name.to_string(), Tensor::scalar(x))
    }

    fn block(&mut self, prefix: &str, cfg: &EncoderConfig) -> BlockIds {
        let d = cfg.dim;
        let qkv = cfg.qkv_width();
        let f = cfg.ffn_hidden;
        BlockIds {
            wq: self.weight(&format!("{prefix}.wq"), d, qkv),
            wk: self.weight(&format!("{prefix}.wk"), d, qkv),
            wv: self.weight(&format!("{prefix}.wv"), d, qkv),
            wo: self.weight(&format!("{prefix}.wo"), qkv, d),
            ln1_gain: self.ones(&format!("{prefix}.ln1.gain"), d),
            ln1_bias: self.zeros(&format!("{prefix}.ln1.bias"), 1, d),
            ffn_w1: self.weight(&format!("{prefix}.ffn.w1"), d, f),
            ffn_b1: self.zeros(&format!("{prefix}.ffn.b1"), 1, f),
            ffn_w2: self.weight(&format!("{prefix}.ffn.w2"), f, d),
            ffn_b2: self.zeros(&format!("{prefix}.ffn.b2"), 1, d),
            ln2_gain: self.ones(&format!("{prefix}.ln2.gain"), d),
            ln2_bias: self.zeros(&format!("{prefix}.ln2.bias"), 1, d),
        }
    }
}

impl ModelParams {
    /// Initialize all tensors: weight matrices uniform in ±1/√dim, biases
    /// zero, layer-norm gains one, PReLU slopes 0.25. The registry order
    /// (and therefore the RNG consumption order) is fixed.
    pub fn init(cfg: &EncoderConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let d = cfg.dim;
        let bound = 1.0 / (d as Scalar).sqrt();
        let mut reg = Registry {
            names: Vec::new(),
            tensors: Vec::new(),
            rng: &mut rng,
            bound,
        };
        // +1 node row for the null sentinel; depth rows 0..=k plus one for
        // the sentinel depth
        let node_emb = reg.weight("node_embedding", vocab_size + 1, d);
        let depth_emb = reg.weight("depth_embedding", cfg.depth + 2, d);
        let time_proj = reg.weight("time_projection", d, 1);
        let blocks = (0..cfg.blocks)
            .map(|b| reg.block(&format!("block{b}"), cfg))
            .collect();
        let cross = reg.block("cross", cfg);
        let head = HeadIds {
            w1: reg.weight("head.w1", 2 * d, d),
            b1: reg.zeros("head.b1", 1, d),
            slope1: reg.scalar("head.slope1", 0.25),
            w2: reg.weight("head.w2", d, d),
            b2: reg.zeros("head.b2", 1, d),
            slope2: reg.scalar("head.slope2", 0.25),
            w3: reg.weight("head.w3", d, d),
            b3: reg.zeros("head.b3", 1, d),
        };
        let disc = DiscIds {
            w_add: reg.weight("disc.w_add", 1, d),
            w_mul: reg.weight("disc.w_mul", 1, d),
        };
        Ok(Self {
            cfg: cfg.clone(),
            vocab_size,
            names: reg.names,
            tensors: reg.tensors,
            layout: ModelLayout {
                node_emb,
                depth_emb,
                time_proj,
                blocks,
                cross,
                head,
                disc,
            },
        })
    }

    pub fn tensor(&self, pid: ParamId) -> &Tensor {
        &self.tensors[pid.0]
    }

    pub fn tensor_mut(&mut self, pid: ParamId) -> &mut Tensor {
        &mut self.tensors[pid.0]
    }

    pub fn name_of(&self, pid: ParamId) -> &str {
        &self.names[pid.0]
    }

    pub fn pid_by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn n_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors.iter().map(|t| t.shape()).collect()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

/// The model's parameters bound onto one tape as leaves. Binding clones
/// reference-counted buffers, never the data.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn bind(tape: &Tape, params: &ModelParams) -> Self {
        Self {
            vars: params
                .iter()
                .map(|(pid, _, t)| tape.param(pid, t))
                .collect(),
        }
    }

    /// Rebind from an explicit leaf list in registry order (used by the
    /// gradient checker to perturb parameters).
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, pid: ParamId) -> Var {
        self.vars[pid.0]
    }
}

/// Sum of node, depth, and time-interval embeddings for a serialized
/// sequence (ablations skip terms), with inverted dropout when a training
/// RNG is supplied.
pub fn input_embedding<R: Rng>(
    tape: &Tape,
    bp: &BoundParams,
    params: &ModelParams,
    seq: &NodeSequence,
    rng: Option<&mut R>,
) -> Var {
    let cfg = &params.cfg;
    let null_row = params.vocab_size as u32;
    let node_rows: Vec<u32> = seq
        .ids
        .iter()
        .map(|id| match id {
            Some(n) => {
                assert!(
                    (n.0 as usize) < params.vocab_size,
                    "unknown node id {} (vocabulary has {} entries)",
                    n.0,
                    params.vocab_size
                );
                n.0
            }
            None => null_row,
        })
        .collect();
    let mut e = tape.gather_rows(bp.var(params.layout.node_emb), &node_rows);
    if !cfg.no_de {
        let depth_rows: Vec<u32> = seq.depths.iter().map(|&d| d).collect();
        let e_depth = tape.gather_rows(bp.var(params.layout.depth_emb), &depth_rows);
        e = tape.add(e, e_depth);
    }
    if !cfg.no_te {
        // log1p keeps raw dataset-unit intervals on a workable scale and
        // maps a zero interval to a zero embedding
        let normalized: Vec<Scalar> = seq.deltas.iter().map(|&d| d.ln_1p() as Scalar).collect();
        let col = tape.constant(&Tensor::column(&normalized));
        let w_row = tape.transpose(bp.var(params.layout.time_proj));
        let e_time = tape.matmul(col, w_row);
        e = tape.add(e, e_time);
    }
    if let Some(rng) = rng {
        if cfg.dropout > 0.0 {
            e = tape.dropout(e, cfg.dropout, rng);
        }
    }
    e
}

/// Multi-head scaled dot-product attention over pre-projected `q`, `k`,
/// `v`, with an optional additive hard mask shared by all heads, followed
/// by the output projection.
fn masked_multi_head(
    tape: &Tape,
    cfg: &EncoderConfig,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<Arc<Vec<Scalar>>>,
    wo: Var,
) -> Var {
    let scale = 1.0 / (cfg.dim as Scalar).sqrt();
    let att = tape.multi_head_attention(q, k, v, cfg.heads, scale, mask);
    tape.matmul(att, wo)
}

/// Shared attention + feed-forward core: queries from `q_src`, keys and
/// values from `kv_src`, then the double layer-norm residual pattern
/// `LN(FFN(LN(O+Q)) + LN(O+Q))`.
fn block_core(
    tape: &Tape,
    bp: &BoundParams,
    cfg: &EncoderConfig,
    blk: &BlockIds,
    q_src: Var,
    kv_src: Var,
    mask: Option<Arc<Vec<Scalar>>>,
) -> Var {
    let q = tape.matmul(q_src, bp.var(blk.wq));
    let k = tape.matmul(kv_src, bp.var(blk.wk));
    let v = tape.matmul(kv_src, bp.var(blk.wv));
    let o = masked_multi_head(tape, cfg, q, k, v, mask, bp.var(blk.wo));
    // the residual adds the query projection; with full-width heads its
    // width no longer matches the model dim, so fall back to the block input
    let resid = if cfg.qkv_width() == cfg.dim { q } else { q_src };
    let r = tape.add(o, resid);
    let inner = tape.layer_norm(r, bp.var(blk.ln1_gain), bp.var(blk.ln1_bias));
    let hidden = tape.relu(tape.add_row(tape.matmul(inner, bp.var(blk.ffn_w1)), bp.var(blk.ffn_b1)));
    let ffn = tape.add_row(tape.matmul(hidden, bp.var(blk.ffn_w2)), bp.var(blk.ffn_b2));
    let out = tape.add(ffn, inner);
    tape.layer_norm(out, bp.var(blk.ln2_gain), bp.var(blk.ln2_bias))
}

/// One structure-masked graph transformer block. `mask` is the sequence's
/// m×m structure attention mask.
pub fn graph_transformer_block(
    tape: &Tape,
    bp: &BoundParams,
    params: &ModelParams,
    block_idx: usize,
    h: Var,
    mask: Arc<Vec<Scalar>>,
) -> Var {
    let blk = &params.layout.blocks[block_idx];
    block_core(tape, bp, &params.cfg, blk, h, h, Some(mask))
}

fn padding_mask(
    m_q: usize,
    m_k: usize,
    pad_k: Option<&[bool]>,
) -> Option<Arc<Vec<Scalar>>> {
    let pad = pad_k?;
    assert_eq!(pad.len(), m_k, "padding mask length mismatch");
    if pad.iter().all(|&v| v) {
        return None;
    }
    let mut mask = vec![0.0; m_q * m_k];
    for (j, &valid) in pad.iter().enumerate() {
        if !valid {
            for i in 0..m_q {
                mask[i * m_k + j] = NEG_INF;
            }
        }
    }
    Some(Arc::new(mask))
}

/// Cross-attention stage: stream u's queries attend over stream w's keys
/// and values and vice versa, through one shared set of projections.
/// `pad_*` mark valid positions (`false` entries are masked out of the
/// keys); `None` means no padding.
pub fn cross_attention_block(
    tape: &Tape,
    bp: &BoundParams,
    params: &ModelParams,
    h_u: Var,
    h_w: Var,
    pad_u: Option<&[bool]>,
    pad_w: Option<&[bool]>,
) -> (Var, Var) {
    let cfg = &params.cfg;
    let blk = &params.layout.cross;
    let (m_u, _) = tape.shape(h_u);
    let (m_w, _) = tape.shape(h_w);
    let mask_uw = padding_mask(m_u, m_w, pad_w);
    let mask_wu = padding_mask(m_w, m_u, pad_u);
    let out_u = block_core(tape, bp, cfg, blk, h_u, h_w, mask_uw);
    let out_w = block_core(tape, bp, cfg, blk, h_w, h_u, mask_wu);
    (out_u, out_w)
}

/// Encode a pair of serialized dependency sub-graphs and return the two
/// root-position embeddings (`1×dim` each). Passing a training RNG enables
/// input dropout.
pub fn two_stream_encode<R: Rng>(
    tape: &Tape,
    bp: &BoundParams,
    params: &ModelParams,
    seq_a: &NodeSequence,
    seq_b: &NodeSequence,
    mut rng: Option<&mut R>,
) -> (Var, Var) {
    let cfg = &params.cfg;
    let mut h_a = input_embedding(tape, bp, params, seq_a, rng.as_deref_mut());
    let mut h_b = input_embedding(tape, bp, params, seq_b, rng.as_deref_mut());
    for b in 0..cfg.blocks {
        h_a = graph_transformer_block(tape, bp, params, b, h_a, Arc::clone(&seq_a.mask));
        h_b = graph_transformer_block(tape, bp, params, b, h_b, Arc::clone(&seq_b.mask));
    }
    let (r_a, r_b) = if cfg.no_ca {
        (h_a, h_b)
    } else {
        cross_attention_block(tape, bp, params, h_a, h_b, None, None)
    };
    (tape.slice_rows(r_a, 0, 1), tape.slice_rows(r_b, 0, 1))
}
