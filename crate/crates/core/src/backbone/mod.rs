//! GCN encoder over the visible subgraph and the conditional cross-attention
//! decoder that predicts clean latents of the masked subgraph.

mod batch;
mod graph_ops;

use std::fmt;
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::GraphLatents;
use crate::error::{Error, Result};
use crate::mask_split::SubGraph;
use crate::nn::{AttnSegment, Bound, ParamId, ParamStore, Tape, Tensor, Var};

pub use batch::BatchSide;
pub use graph_ops::{dual_adjacency, gcn_layer, line_graph, normalize_adjacency, time_embedding, Activation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Vertex,
    Edge,
}

/// Which decoder stream attends to which encoder stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "NtoN")]
    NtoN,
    #[serde(rename = "EtoE")]
    EtoE,
    #[serde(rename = "NtoE")]
    NtoE,
    #[serde(rename = "EtoN")]
    EtoN,
    #[serde(rename = "NtoN&EtoE")]
    NtoNEtoE,
    #[serde(rename = "NtoE&EtoN")]
    NtoEEtoN,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::NtoN,
        Strategy::EtoE,
        Strategy::NtoE,
        Strategy::EtoN,
        Strategy::NtoNEtoE,
        Strategy::NtoEEtoN,
    ];

    /// `(query stream, key stream)` pairs.
    pub fn pairings(self) -> &'static [(Stream, Stream)] {
        use Stream::*;
        match self {
            Strategy::NtoN => &[(Vertex, Vertex)],
            Strategy::EtoE => &[(Edge, Edge)],
            Strategy::NtoE => &[(Vertex, Edge)],
            Strategy::EtoN => &[(Edge, Vertex)],
            Strategy::NtoNEtoE => &[(Vertex, Vertex), (Edge, Edge)],
            Strategy::NtoEEtoN => &[(Vertex, Edge), (Edge, Vertex)],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::NtoN => "NtoN",
            Strategy::EtoE => "EtoE",
            Strategy::NtoE => "NtoE",
            Strategy::EtoN => "EtoN",
            Strategy::NtoNEtoE => "NtoN&EtoE",
            Strategy::NtoEEtoN => "NtoE&EtoN",
        }
    }

    /// Fails when a graph lacks an encoder stream this strategy attends to.
    pub fn check_conditions(self, visible: &BatchSide) -> Result<()> {
        for &(_, key) in self.pairings() {
            if let Some(g) = visible.segs(key).iter().position(|r| r.is_empty()) {
                let what = if key == Stream::Vertex { "vertices" } else { "edges" };
                return Err(Error::Config(format!(
                    "strategy {self} attends to visible {what}, but graph {g} of the batch has none"
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Latent width `d = l·l·c`.
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub strategy: Strategy,
    pub self_loops: bool,
    /// Hidden width of the feed-forward sublayer as a multiple of `d`.
    pub ff_mult: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            layers: 4,
            heads: 4,
            strategy: Strategy::NtoNEtoE,
            self_loops: true,
            ff_mult: 2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || !self.width.is_multiple_of(2) {
            return Err(Error::Config(format!("width {} must be even and positive", self.width)));
        }
        if self.layers == 0 || self.ff_mult == 0 {
            return Err(Error::Config("layers and ff_mult must be positive".into()));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("{} heads do not divide width {}", self.heads, self.width)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct FeedForward {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl FeedForward {
    fn new(store: &mut ParamStore, name: &str, d: usize, h: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w1: store.normal(format!("{name}.w1"), &[d, h], (2.0 / d as f64).sqrt(), rng),
            b1: store.zeros(format!("{name}.b1"), &[h]),
            w2: store.normal(format!("{name}.w2"), &[h, d], 0.5 / (h as f64).sqrt(), rng),
            b2: store.zeros(format!("{name}.b2"), &[d]),
        }
    }

    /// `LN(x + W2·σ(W1·x + b1) + b2)`.
    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let h = tape.matmul(x, p[self.w1]);
        let h = tape.add_row(h, p[self.b1]);
        let h = tape.gelu(h);
        let h = tape.matmul(h, p[self.w2]);
        let h = tape.add_row(h, p[self.b2]);
        let r = tape.add(x, h);
        tape.layer_norm(r, 1e-5)
    }
}

#[derive(Debug, Clone)]
struct Projections {
    query: Stream,
    key: Stream,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

#[derive(Debug, Clone)]
struct Block {
    attn: Vec<Projections>,
    conv_v: ParamId,
    conv_e: ParamId,
    ff_v: FeedForward,
    ff_e: FeedForward,
}

#[derive(Debug, Clone)]
struct Head {
    w: ParamId,
    b: ParamId,
    skip: ParamId,
}

/// Encoder state after one layer.
#[derive(Debug, Clone, Copy)]
pub struct EncoderState {
    pub vertices: Var,
    pub edges: Var,
}

/// A cross-attention node recorded during a decoder pass.
#[derive(Debug, Clone, Copy)]
pub struct AttentionRecord {
    pub block: usize,
    pub query: Stream,
    pub key: Stream,
    pub node: Var,
}

pub struct DecoderOutput {
    pub vertices: Var,
    pub edges: Var,
    pub attention: Vec<AttentionRecord>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    params: ParamStore,
    encoder: Vec<(ParamId, ParamId)>,
    blocks: Vec<Block>,
    head_v: Head,
    head_e: Head,
}

#[derive(Serialize, Deserialize)]
struct BackboneCheckpoint {
    kind: String,
    manifest: BackboneConfig,
    params: ParamStore,
}

fn stream_var(s: Stream, v: Var, e: Var) -> Var {
    match s {
        Stream::Vertex => v,
        Stream::Edge => e,
    }
}

/// Rows of `segs` filled with the embedding of their graph's step.
fn time_rows(segs: &[std::ops::Range<usize>], t: &[usize], d: usize) -> Result<Tensor> {
    let n = segs.last().map_or(0, |r| r.end);
    let mut out = Tensor::zeros(&[n, d]);
    for (seg, &step) in segs.iter().zip(t) {
        let emb = time_embedding(step, d)?;
        for r in seg.clone() {
            out.data[r * d..(r + 1) * d].copy_from_slice(&emb);
        }
    }
    Ok(out)
}

impl Backbone {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.width;
        let std = 1.0 / (d as f64).sqrt();
        let encoder = (0..config.layers)
            .map(|l| {
                (
                    store.normal(format!("enc{l}.w_v"), &[d, d], std, &mut rng),
                    store.normal(format!("enc{l}.w_e"), &[d, d], std, &mut rng),
                )
            })
            .collect();
        let mut blocks = Vec::with_capacity(config.layers);
        for b in 0..config.layers {
            let attn = config
                .strategy
                .pairings()
                .iter()
                .map(|&(query, key)| {
                    let tag = format!("dec{b}.ca_{}{}", stream_tag(query), stream_tag(key));
                    Projections {
                        query,
                        key,
                        wq: store.normal(format!("{tag}.w_q"), &[d, d], std, &mut rng),
                        wk: store.normal(format!("{tag}.w_k"), &[d, d], std, &mut rng),
                        wv: store.normal(format!("{tag}.w_v"), &[d, d], std, &mut rng),
                    }
                })
                .collect();
            blocks.push(Block {
                attn,
                conv_v: store.normal(format!("dec{b}.conv_v"), &[d, d], std, &mut rng),
                conv_e: store.normal(format!("dec{b}.conv_e"), &[d, d], std, &mut rng),
                ff_v: FeedForward::new(&mut store, &format!("dec{b}.ff_v"), d, d * config.ff_mult, &mut rng),
                ff_e: FeedForward::new(&mut store, &format!("dec{b}.ff_e"), d, d * config.ff_mult, &mut rng),
            });
        }
        let mut head = |s: &str, rng: &mut ChaCha8Rng| Head {
            w: store.normal(format!("out_{s}.w"), &[d, d], std, rng),
            b: store.zeros(format!("out_{s}.b"), &[d]),
            skip: store.zeros(format!("out_{s}.skip"), &[d, d]),
        };
        let head_v = head("v", &mut rng);
        let head_e = head("e", &mut rng);
        Ok(Self {
            config,
            params: store,
            encoder,
            blocks,
            head_v,
            head_e,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Encoder parameter names (`enc*`), used to freeze or transfer the encoder.
    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        self.encoder.iter().flat_map(|&(v, e)| [v, e]).collect()
    }

    fn check_width(&self, side: &BatchSide) -> Result<()> {
        if side.width() != self.config.width {
            return Err(Error::Shape(format!(
                "latent width {} does not match backbone width {}",
                side.width(),
                self.config.width
            )));
        }
        Ok(())
    }

    /// All `L` per-layer states over the visible subgraphs.
    pub fn encoder_forward(&self, tape: &mut Tape, p: &Bound, visible: &BatchSide) -> Result<Vec<EncoderState>> {
        self.check_width(visible)?;
        if visible.vertex_segs.iter().any(|r| r.is_empty()) {
            return Err(Error::Invariant("visible subgraph has no vertices".into()));
        }
        let mut v = tape.constant(visible.vertices.clone());
        let mut e = tape.constant(visible.edges.clone());
        let mut states = Vec::with_capacity(self.config.layers);
        for &(wv, we) in &self.encoder {
            v = self.gcn(tape, visible.adjacency.clone(), v, p[wv]);
            e = self.gcn(tape, visible.dual.clone(), e, p[we]);
            states.push(EncoderState { vertices: v, edges: e });
        }
        Ok(states)
    }

    fn gcn(&self, tape: &mut Tape, adj: Rc<crate::nn::Csr>, x: Var, w: Var) -> Var {
        let h = tape.spmm(adj, x);
        let h = tape.matmul(h, w);
        tape.gelu(h)
    }

    /// Attention of the named decoder streams over the (time-embedded)
    /// condition streams. Named streams return the raw attention output;
    /// the others pass through unchanged.
    #[allow(clippy::too_many_arguments)]
    pub fn cross_attention(
        &self,
        tape: &mut Tape,
        p: &Bound,
        block: usize,
        query: (Var, Var),
        condition: (Var, Var),
        target: &BatchSide,
        visible: &BatchSide,
        records: &mut Vec<AttentionRecord>,
    ) -> Result<(Var, Var)> {
        self.config.strategy.check_conditions(visible)?;
        let blk = self.blocks.get(block).ok_or_else(|| Error::Config(format!("no decoder block {block}")))?;
        let (mut out_v, mut out_e) = query;
        for pr in &blk.attn {
            let qx = stream_var(pr.query, query.0, query.1);
            let cx = stream_var(pr.key, condition.0, condition.1);
            let q = tape.matmul(qx, p[pr.wq]);
            let k = tape.matmul(cx, p[pr.wk]);
            let v = tape.matmul(cx, p[pr.wv]);
            let segs: Vec<AttnSegment> = target
                .segs(pr.query)
                .iter()
                .zip(visible.segs(pr.key).iter())
                .map(|(q, k)| AttnSegment {
                    queries: q.clone(),
                    keys: k.clone(),
                })
                .collect();
            let a = tape.attention(q, k, v, self.config.heads, Rc::new(segs));
            records.push(AttentionRecord {
                block,
                query: pr.query,
                key: pr.key,
                node: a,
            });
            match pr.query {
                Stream::Vertex => out_v = a,
                Stream::Edge => out_e = a,
            }
        }
        Ok((out_v, out_e))
    }

    /// Cross-attention with residual, graph convolution on the masked
    /// structure, then the layer-normalized feed-forward.
    #[allow(clippy::too_many_arguments)]
    pub fn decoder_block(
        &self,
        tape: &mut Tape,
        p: &Bound,
        block: usize,
        h: (Var, Var),
        condition: (Var, Var),
        target: &BatchSide,
        visible: &BatchSide,
        records: &mut Vec<AttentionRecord>,
    ) -> Result<(Var, Var)> {
        let (av, ae) = self.cross_attention(tape, p, block, h, condition, target, visible, records)?;
        let blk = &self.blocks[block];
        let named = |s: Stream| blk.attn.iter().any(|pr| pr.query == s);
        let v = if named(Stream::Vertex) { tape.add(h.0, av) } else { h.0 };
        let e = if named(Stream::Edge) { tape.add(h.1, ae) } else { h.1 };
        let cv = self.gcn(tape, target.adjacency.clone(), v, p[blk.conv_v]);
        let ce = self.gcn(tape, target.dual.clone(), e, p[blk.conv_e]);
        let v = tape.add(v, cv);
        let e = tape.add(e, ce);
        Ok((blk.ff_v.forward(tape, p, v), blk.ff_e.forward(tape, p, e)))
    }

    /// Predicts clean masked latents from their noisy versions. Conditions
    /// are consumed deepest first; `t` holds one step per graph.
    #[allow(clippy::too_many_arguments)]
    pub fn decoder_forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        noisy_vertices: Var,
        noisy_edges: Var,
        t: &[usize],
        target: &BatchSide,
        visible: &BatchSide,
        conditions: &[EncoderState],
    ) -> Result<DecoderOutput> {
        self.check_width(target)?;
        if conditions.len() != self.config.layers {
            return Err(Error::Config(format!(
                "decoder needs {} condition states, got {}",
                self.config.layers,
                conditions.len()
            )));
        }
        if t.len() != target.num_graphs() || visible.num_graphs() != target.num_graphs() {
            return Err(Error::Shape("step count, target and visible batches disagree".into()));
        }
        let d = self.config.width;
        let tau_v = tape.constant(time_rows(&visible.vertex_segs, t, d)?);
        let tau_e = tape.constant(time_rows(&visible.edge_segs, t, d)?);
        let mut h = (noisy_vertices, noisy_edges);
        let mut attention = Vec::new();
        for (b, cond) in conditions.iter().rev().enumerate() {
            let cv = tape.add(cond.vertices, tau_v);
            let ce = tape.add(cond.edges, tau_e);
            h = self.decoder_block(tape, p, b, h, (cv, ce), target, visible, &mut attention)?;
        }
        let vertices = self.head(tape, p, &self.head_v, h.0, noisy_vertices);
        let edges = self.head(tape, p, &self.head_e, h.1, noisy_edges);
        Ok(DecoderOutput {
            vertices,
            edges,
            attention,
        })
    }

    fn head(&self, tape: &mut Tape, p: &Bound, head: &Head, h: Var, x_t: Var) -> Var {
        let o = tape.matmul(h, p[head.w]);
        let o = tape.add_row(o, p[head.b]);
        let s = tape.matmul(x_t, p[head.skip]);
        tape.add(o, s)
    }

    /// Per-layer encoder states of one subgraph, without gradients.
    pub fn encode(&self, g: &SubGraph) -> Result<Vec<GraphLatents>> {
        let side = BatchSide::new(&[g], self.config.self_loops)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let states = self.encoder_forward(&mut tape, &p, &side)?;
        states
            .iter()
            .map(|s| GraphLatents::new(tape.value(s.vertices).clone(), tape.value(s.edges).clone()))
            .collect()
    }

    /// Clean-latent prediction for one split, without gradients.
    pub fn denoise(&self, visible: &SubGraph, masked: &SubGraph, noisy: &GraphLatents, t: usize) -> Result<GraphLatents> {
        if noisy.vertices.shape != masked.vertices.shape || noisy.edges.shape != masked.edges.shape {
            return Err(Error::Shape("noisy latents do not match the masked subgraph".into()));
        }
        let vis = BatchSide::new(&[visible], self.config.self_loops)?;
        let tgt = BatchSide::new(&[masked], self.config.self_loops)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let conds = self.encoder_forward(&mut tape, &p, &vis)?;
        let nv = tape.constant(noisy.vertices.clone());
        let ne = tape.constant(noisy.edges.clone());
        let out = self.decoder_forward(&mut tape, &p, nv, ne, &[t], &tgt, &vis, &conds)?;
        GraphLatents::new(tape.value(out.vertices).clone(), tape.value(out.edges).clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let ck = BackboneCheckpoint {
            kind: "backbone".into(),
            manifest: self.config,
            params: self.params.clone(),
        };
        std::fs::write(path, serde_json::to_vec(&ck)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck: BackboneCheckpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ck.kind != "backbone" {
            return Err(Error::Format(format!("expected a backbone checkpoint, found {}", ck.kind)));
        }
        let mut b = Self::new(ck.manifest, 0)?;
        b.params.load_from(&ck.params)?;
        Ok(b)
    }
}

fn stream_tag(s: Stream) -> &'static str {
    match s {
        Stream::Vertex => "n",
        Stream::Edge => "e",
    }
}

#[cfg(test)]
mod tests;
