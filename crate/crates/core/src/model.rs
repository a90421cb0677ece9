//! Transformer next-item recommender with a pluggable attention sublayer.
//!
//! Each block is post-norm:
//! `X ← LN(X + Drop(Attn(X)))`, then `X ← LN(X + Drop(W₂·relu(W₁X + b₁) + b₂))`.
//! Item scores are inner products with the shared item embedding table.
//!
//! Table layout: row 0 is padding (kept at zero, never updated), rows
//! `1..=n_items` are items, and the following `m − 1` rows are the dummy
//! tokens. The positional table has one row per extended position.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::attention::{
    build_extended_sequence, miq_sublayer, AggregatorMode, AggregatorNodes, AttentionNodes, SublayerShape,
};
use crate::data::pad_truncate;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamId, ParamStore};
use crate::matrix::Matrix;
use crate::rng::RngStream;

pub const INIT_STD: f64 = 0.02;
pub const LAYER_NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionKind {
    /// Ordinary single-query causal self-attention.
    Single,
    /// Multi-item-query attention with a query window of `m`.
    #[default]
    Miq,
}

impl AttentionKind {
    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::Single => "single",
            AttentionKind::Miq => "miq",
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(AttentionKind::Single),
            "miq" => Ok(AttentionKind::Miq),
            other => Err(Error::InvalidParameter(format!("unknown attention `{other}` (expected single or miq)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_items: usize,
    pub d: usize,
    /// Real sequence length `T`.
    pub max_len: usize,
    pub blocks: usize,
    pub attention: AttentionKind,
    /// Query window; ignored (treated as 1) for [`AttentionKind::Single`].
    pub m: usize,
    pub dropout: f64,
    pub aggregator: AggregatorMode,
    /// Whether real positions may attend to dummy keys and values.
    pub dummy_kv: bool,
    pub heads: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_items: 0,
            d: 50,
            max_len: 200,
            blocks: 2,
            attention: AttentionKind::Miq,
            m: 1,
            dropout: 0.2,
            aggregator: AggregatorMode::Context,
            dummy_kv: true,
            heads: 1,
            seed: 42,
        }
    }
}

impl ModelConfig {
    /// Effective query window.
    pub fn window(&self) -> usize {
        match self.attention {
            AttentionKind::Single => 1,
            AttentionKind::Miq => self.m,
        }
    }

    pub fn extended_len(&self) -> usize {
        self.max_len + self.window() - 1
    }

    /// Embedding table rows: padding, items, dummies.
    pub fn table_rows(&self) -> usize {
        self.n_items + self.window()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.n_items == 0 {
            return bad("item vocabulary is empty".into());
        }
        if self.d == 0 || self.max_len == 0 || self.blocks == 0 || self.m == 0 {
            return bad(format!(
                "d, max_len, blocks and m must be >= 1 (got {}, {}, {}, {})",
                self.d, self.max_len, self.blocks, self.m
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("heads ({}) must divide d ({})", self.heads, self.d));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BlockParams {
    queries: Vec<ParamId>,
    key: ParamId,
    value: ParamId,
    aggregator: Option<[ParamId; 3]>,
    ffn_in: ParamId,
    ffn_in_bias: ParamId,
    ffn_out: ParamId,
    ffn_out_bias: ParamId,
    norm1: [ParamId; 2],
    norm2: [ParamId; 2],
}

/// Parameter names and shapes in initialization order.
fn layout(c: &ModelConfig) -> Vec<(String, usize, usize)> {
    let (d, m) = (c.d, c.window());
    let mut out =
        vec![(String::from("item_embedding"), c.table_rows(), d), (String::from("positional"), c.extended_len(), d)];
    for b in 0..c.blocks {
        for j in 0..m {
            out.push((format!("blocks.{b}.attn.w_q.{j}"), d, d));
        }
        out.push((format!("blocks.{b}.attn.w_k"), d, d));
        out.push((format!("blocks.{b}.attn.w_v"), d, d));
        if m > 1 {
            for w in ["w_q", "w_k", "w_v"] {
                out.push((format!("blocks.{b}.agg.{w}"), d, d));
            }
        }
        out.push((format!("blocks.{b}.ffn.w1"), d, d));
        out.push((format!("blocks.{b}.ffn.b1"), 1, d));
        out.push((format!("blocks.{b}.ffn.w2"), d, d));
        out.push((format!("blocks.{b}.ffn.b2"), 1, d));
        for ln in ["ln1", "ln2"] {
            out.push((format!("blocks.{b}.{ln}.gain"), 1, d));
            out.push((format!("blocks.{b}.{ln}.bias"), 1, d));
        }
    }
    out
}

fn initial_value(name: &str, rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
    if name.ends_with(".gain") {
        Matrix::filled(rows, cols, 1.0)
    } else if name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") {
        Matrix::zeros(rows, cols)
    } else {
        Matrix::from_fn(rows, cols, |_, _| rng.truncated_normal(INIT_STD))
    }
}

/// Graph handles for all non-table weights, created once per tape.
#[derive(Debug, Clone)]
pub struct BoundWeights {
    positional: NodeId,
    blocks: Vec<BoundBlock>,
}

#[derive(Debug, Clone)]
struct BoundBlock {
    attn: AttentionNodes,
    ffn_in: NodeId,
    ffn_in_bias: NodeId,
    ffn_out: NodeId,
    ffn_out_bias: NodeId,
    norm1: [NodeId; 2],
    norm2: [NodeId; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeqRecModel {
    config: ModelConfig,
    params: ParamStore,
    table: ParamId,
    positional: ParamId,
    blocks: Vec<BlockParams>,
}

impl SeqRecModel {
    /// Fresh model drawn from `RngStream::new(config.seed)`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(config.seed);
        let mut store = ParamStore::new();
        for (name, rows, cols) in layout(&config) {
            let value = initial_value(&name, rows, cols, &mut rng);
            store.add(name, value);
        }
        let table = store.find("item_embedding").expect("layout has an item table");
        store.value_mut(table).row_mut(0).fill(0.0);
        Self::from_store(config, store)
    }

    /// Wraps an existing parameter store, checking names and shapes.
    pub fn from_store(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != params.len() {
            return Err(Error::InvalidParameter(format!(
                "expected {} parameter matrices, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, rows, cols) in &expected {
            let id = params.find(name).ok_or_else(|| Error::InvalidParameter(format!("missing parameter `{name}`")))?;
            if params.value(id).shape() != (*rows, *cols) {
                return Err(Error::shape("parameter shape", (*rows, *cols), params.value(id).shape()));
            }
        }
        let id = |name: &str| params.find(name).expect("checked above");
        let m = config.window();
        let blocks = (0..config.blocks)
            .map(|b| BlockParams {
                queries: (0..m).map(|j| id(&format!("blocks.{b}.attn.w_q.{j}"))).collect(),
                key: id(&format!("blocks.{b}.attn.w_k")),
                value: id(&format!("blocks.{b}.attn.w_v")),
                aggregator: (m > 1).then(|| {
                    [
                        id(&format!("blocks.{b}.agg.w_q")),
                        id(&format!("blocks.{b}.agg.w_k")),
                        id(&format!("blocks.{b}.agg.w_v")),
                    ]
                }),
                ffn_in: id(&format!("blocks.{b}.ffn.w1")),
                ffn_in_bias: id(&format!("blocks.{b}.ffn.b1")),
                ffn_out: id(&format!("blocks.{b}.ffn.w2")),
                ffn_out_bias: id(&format!("blocks.{b}.ffn.b2")),
                norm1: [id(&format!("blocks.{b}.ln1.gain")), id(&format!("blocks.{b}.ln1.bias"))],
                norm2: [id(&format!("blocks.{b}.ln2.gain")), id(&format!("blocks.{b}.ln2.bias"))],
            })
            .collect();
        Ok(Self { table: id("item_embedding"), positional: id("positional"), blocks, config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn item_table(&self) -> ParamId {
        self.table
    }

    pub fn bind(&self, g: &mut Graph) -> BoundWeights {
        let p = &self.params;
        let blocks = self
            .blocks
            .iter()
            .map(|b| BoundBlock {
                attn: AttentionNodes {
                    queries: b.queries.iter().map(|&q| g.param(p, q)).collect(),
                    key: g.param(p, b.key),
                    value: g.param(p, b.value),
                    aggregator: b.aggregator.map(|[q, k, v]| AggregatorNodes {
                        query: g.param(p, q),
                        key: g.param(p, k),
                        value: g.param(p, v),
                    }),
                },
                ffn_in: g.param(p, b.ffn_in),
                ffn_in_bias: g.param(p, b.ffn_in_bias),
                ffn_out: g.param(p, b.ffn_out),
                ffn_out_bias: g.param(p, b.ffn_out_bias),
                norm1: [g.param(p, b.norm1[0]), g.param(p, b.norm1[1])],
                norm2: [g.param(p, b.norm2[0]), g.param(p, b.norm2[1])],
            })
            .collect();
        BoundWeights { positional: g.param(p, self.positional), blocks }
    }

    /// Checks that `row` is a padded row of item ids.
    pub fn check_row(&self, row: &[u32]) -> Result<()> {
        if row.len() != self.config.max_len {
            return Err(Error::shape("input row", (1, self.config.max_len), (1, row.len())));
        }
        match row.iter().find(|&&i| i as usize > self.config.n_items) {
            Some(&id) => Err(Error::UnknownItem { id, vocabulary: self.config.n_items }),
            None => Ok(()),
        }
    }

    /// Hidden states (`T × d`) of one padded row, dummy positions removed.
    pub fn forward_row(
        &self,
        g: &mut Graph,
        w: &BoundWeights,
        row: &[u32],
        training: bool,
        rng: &mut RngStream,
    ) -> Result<NodeId> {
        self.check_row(row)?;
        let c = &self.config;
        let m = c.window();
        let rate = c.dropout;
        let ids = build_extended_sequence(row, c.n_items, m);
        let x = g.embed(&self.params, self.table, &ids, true)?;
        let x = g.add(x, w.positional)?;
        let mut x = g.dropout(x, rate, rng, training)?;
        let shape = SublayerShape { real_len: c.max_len, m, mode: c.aggregator, dummy_kv: c.dummy_kv, heads: c.heads };
        for b in &w.blocks {
            let a = miq_sublayer(g, x, &b.attn, shape)?;
            let a = g.dropout(a, rate, rng, training)?;
            let r = g.add(x, a)?;
            x = g.layer_norm(r, b.norm1[0], b.norm1[1], LAYER_NORM_EPS)?;

            let h = g.matmul(x, b.ffn_in)?;
            let h = g.add_row(h, b.ffn_in_bias)?;
            let h = g.relu(h);
            let h = g.matmul(h, b.ffn_out)?;
            let h = g.add_row(h, b.ffn_out_bias)?;
            let h = g.dropout(h, rate, rng, training)?;
            let r = g.add(x, h)?;
            x = g.layer_norm(r, b.norm2[0], b.norm2[1], LAYER_NORM_EPS)?;
        }
        if m > 1 {
            x = g.slice_rows(x, m - 1, c.max_len)?;
        }
        Ok(x)
    }

    /// Hidden states for a batch of padded rows (`B × T × d`).
    pub fn forward(&self, rows: &[Vec<u32>], training: bool, rng: &mut RngStream) -> Result<Vec<Matrix>> {
        let mut g = Graph::new();
        let w = self.bind(&mut g);
        let mut out = Vec::with_capacity(rows.len());
        for row in rows {
            let h = self.forward_row(&mut g, &w, row, training, rng)?;
            out.push(g.value(h).clone());
        }
        Ok(out)
    }

    /// Inference-mode hidden states of one padded row.
    pub fn hidden(&self, row: &[u32]) -> Result<Matrix> {
        let mut g = Graph::new();
        let w = self.bind(&mut g);
        let h = self.forward_row(&mut g, &w, row, false, &mut RngStream::new(0))?;
        Ok(g.value(h).clone())
    }

    /// `logits[i − 1] = ⟨f, E_i⟩` for items `i ∈ 1..=n_items`.
    pub fn score_items(&self, f: &[f64]) -> Vec<f64> {
        let table = self.params.value(self.table);
        (1..=self.config.n_items).map(|i| table.row(i).iter().zip(f).map(|(a, b)| a * b).sum()).collect()
    }

    /// Item logits for the next step after `sequence` (most recent last).
    /// Zeros in `sequence` are padding.
    pub fn next_item_scores(&self, sequence: &[u32]) -> Result<Vec<f64>> {
        if sequence.iter().all(|&i| i == 0) {
            return Err(Error::EmptyInput("sequence"));
        }
        if let Some(&id) = sequence.iter().find(|&&i| i as usize > self.config.n_items) {
            return Err(Error::UnknownItem { id, vocabulary: self.config.n_items });
        }
        let row = pad_truncate(sequence, self.config.max_len);
        let h = self.hidden(&row)?;
        Ok(self.score_items(h.row(self.config.max_len - 1)))
    }

    /// All item ids ranked by descending score, ties by ascending id.
    pub fn predict_next(&self, sequence: &[u32]) -> Result<Vec<u32>> {
        let scores = self.next_item_scores(sequence)?;
        let mut ids: Vec<u32> = (1..=self.config.n_items as u32).collect();
        ids.sort_by(|&a, &b| scores[b as usize - 1].total_cmp(&scores[a as usize - 1]).then(a.cmp(&b)));
        Ok(ids)
    }

    /// Counts taken from the stored matrices.
    pub fn param_audit(&self) -> ParamAudit {
        let c = &self.config;
        let mut a = ParamAudit::default();
        for (_, p) in self.params.iter() {
            let n = p.value.len();
            let name = p.name.as_str();
            if name == "item_embedding" {
                a.item_embeddings = (c.n_items + 1) * p.value.cols();
                a.dummy_embeddings = n - a.item_embeddings;
            } else if name == "positional" {
                a.positional = c.max_len * p.value.cols();
                a.dummy_positional = n - a.positional;
            } else if name.contains(".attn.w_q.") {
                a.queries += n;
            } else if name.contains(".attn.") {
                a.keys_values += n;
            } else if name.contains(".agg.") {
                a.aggregator += n;
            } else if name.contains(".ffn.") {
                a.ffn += n;
            } else {
                a.norms += n;
            }
        }
        a
    }
}

/// Itemized parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamAudit {
    /// Padding row plus item rows: `(n_items + 1)·d`.
    pub item_embeddings: usize,
    /// `(m − 1)·d`.
    pub dummy_embeddings: usize,
    /// `T·d`.
    pub positional: usize,
    /// Positional rows of the dummy positions: `(m − 1)·d`.
    pub dummy_positional: usize,
    /// `L·m·d²`.
    pub queries: usize,
    /// `L·2d²`.
    pub keys_values: usize,
    /// `L·3d²` when `m > 1`, else 0.
    pub aggregator: usize,
    /// `L·(2d² + 2d)`.
    pub ffn: usize,
    /// `L·4d`.
    pub norms: usize,
}

impl ParamAudit {
    pub fn closed_form(c: &ModelConfig) -> Self {
        let (n, d, t, l, m) = (c.n_items, c.d, c.max_len, c.blocks, c.window());
        Self {
            item_embeddings: (n + 1) * d,
            dummy_embeddings: (m - 1) * d,
            positional: t * d,
            dummy_positional: (m - 1) * d,
            queries: l * m * d * d,
            keys_values: l * 2 * d * d,
            aggregator: if m > 1 { l * 3 * d * d } else { 0 },
            ffn: l * (2 * d * d + 2 * d),
            norms: l * 4 * d,
        }
    }

    pub fn total(&self) -> usize {
        self.item_embeddings
            + self.dummy_embeddings
            + self.positional
            + self.dummy_positional
            + self.queries
            + self.keys_values
            + self.aggregator
            + self.ffn
            + self.norms
    }

    /// Extra parameters relative to `baseline`, itemized.
    pub fn delta_over(&self, baseline: &ParamAudit) -> ParamDelta {
        ParamDelta {
            queries: self.queries - baseline.queries,
            dummy_embeddings: self.dummy_embeddings - baseline.dummy_embeddings,
            dummy_positional: self.dummy_positional - baseline.dummy_positional,
            aggregator: self.aggregator - baseline.aggregator,
        }
    }
}

/// Multi-item-query parameters beyond the single-query model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamDelta {
    /// `L·(m − 1)·d²`.
    pub queries: usize,
    /// `(m − 1)·d`.
    pub dummy_embeddings: usize,
    /// `(m − 1)·d`.
    pub dummy_positional: usize,
    /// `L·3d²` when `m > 1`.
    pub aggregator: usize,
}

impl ParamDelta {
    pub fn closed_form(d: usize, blocks: usize, m: usize) -> Self {
        Self {
            queries: blocks * (m - 1) * d * d,
            dummy_embeddings: (m - 1) * d,
            dummy_positional: (m - 1) * d,
            aggregator: if m > 1 { blocks * 3 * d * d } else { 0 },
        }
    }

    pub fn total(&self) -> usize {
        self.queries + self.dummy_embeddings + self.dummy_positional + self.aggregator
    }
}
