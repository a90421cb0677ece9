//! Single-query and multi-item-query causal attention.
//!
//! Sequences are handled in *extended* layout: `m − 1` dummy tokens are
//! prepended to the `T` real positions, so extended position `u` holds real
//! position `u − (m − 1)`. Query slot `j ∈ 0..m` of position `u` is projected
//! from the hidden state at `u − (m − 1) + j` with its own matrix `W_q[j]`;
//! slot `m − 1` is the position itself. For the first real positions the
//! earlier slots land on dummy states, which gives every real position a
//! full window of `m` query sources.
//!
//! Keys and values are shared by all slots. The `m` outputs of each real
//! position are merged by a query-level attention ([`query_level_aggregate`]);
//! dummy positions take the plain slot mean. With `m = 1` the sublayer is
//! exactly ordinary masked self-attention.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{FlopBucket, FlopCounter, Graph, NodeId};
use crate::matrix::Mask;

/// How the `m` per-slot outputs of a position are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AggregatorMode {
    /// Scores every slot against the mean of the slot outputs.
    #[default]
    Context,
    /// Scores every slot against the newest slot's output.
    Last,
    /// Full `m × m` self-attention over the slot outputs, averaged.
    Full,
}

impl AggregatorMode {
    pub fn name(self) -> &'static str {
        match self {
            AggregatorMode::Context => "context",
            AggregatorMode::Last => "last",
            AggregatorMode::Full => "full",
        }
    }
}

impl fmt::Display for AggregatorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggregatorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "context" => Ok(AggregatorMode::Context),
            "last" => Ok(AggregatorMode::Last),
            "full" => Ok(AggregatorMode::Full),
            other => Err(Error::InvalidParameter(alloc::format!(
                "unknown aggregator mode `{other}` (expected context, last or full)"
            ))),
        }
    }
}

/// Allows key `p` for query row `q` iff `p ≤ q`.
pub fn causal_mask(len: usize) -> Mask {
    Mask::from_fn(len, len, |q, p| p <= q)
}

/// Causal mask over the extended layout. With `dummy_kv` off, real rows
/// cannot see dummy keys; dummy rows still see the dummies before them.
pub fn window_mask(real_len: usize, m: usize, dummy_kv: bool) -> Mask {
    let dummies = m - 1;
    let n = real_len + dummies;
    Mask::from_fn(n, n, |q, p| p <= q && (dummy_kv || q < dummies || p >= dummies))
}

/// Reserved id of dummy token `j ∈ 0..m−1`; dummies follow the item ids.
pub fn dummy_id(n_items: usize, j: usize) -> u32 {
    (n_items + 1 + j) as u32
}

/// Prepends the `m − 1` dummy ids to a padded row.
pub fn build_extended_sequence(row: &[u32], n_items: usize, m: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(row.len() + m - 1);
    out.extend((0..m.saturating_sub(1)).map(|j| dummy_id(n_items, j)));
    out.extend_from_slice(row);
    out
}

/// Extended row that feeds query slot `slot` of every extended position,
/// clamped at the first dummy for the leading dummy rows.
pub fn query_sources(real_len: usize, m: usize, slot: usize) -> Vec<usize> {
    let n = real_len + m - 1;
    (0..n).map(|u| (u + slot).saturating_sub(m - 1)).collect()
}

/// Query-level aggregator weights.
#[derive(Debug, Clone, Copy)]
pub struct AggregatorNodes {
    pub query: NodeId,
    pub key: NodeId,
    pub value: NodeId,
}

/// Graph handles for one attention sublayer's weights.
#[derive(Debug, Clone)]
pub struct AttentionNodes {
    /// One `d × d` matrix per query slot (a single one for the baseline).
    pub queries: Vec<NodeId>,
    pub key: NodeId,
    pub value: NodeId,
    pub aggregator: Option<AggregatorNodes>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SublayerShape {
    pub real_len: usize,
    pub m: usize,
    pub mode: AggregatorMode,
    pub dummy_kv: bool,
    pub heads: usize,
}

fn with_bucket<T>(g: &mut Graph, bucket: FlopBucket, f: impl FnOnce(&mut Graph) -> Result<T>) -> Result<T> {
    let prev = g.set_flop_bucket(bucket);
    let out = f(g);
    g.set_flop_bucket(prev);
    out
}

/// Scaled dot-product attention on projected `q`, `k`, `v`.
fn attend(g: &mut Graph, q: NodeId, k: NodeId, v: NodeId, mask: &Mask, heads: usize) -> Result<NodeId> {
    let d = g.value(q).cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::InvalidParameter(alloc::format!("{heads} heads do not divide width {d}")));
    }
    if heads == 1 {
        return attend_head(g, q, k, v, mask);
    }
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        outs.push(attend_head(g, qh, kh, vh, mask)?);
    }
    g.concat_cols(&outs)
}

fn attend_head(g: &mut Graph, q: NodeId, k: NodeId, v: NodeId, mask: &Mask) -> Result<NodeId> {
    let d = g.value(q).cols();
    let scores = with_bucket(g, FlopBucket::Scores, |g| g.matmul_nt(q, k))?;
    let scores = g.scale(scores, 1.0 / libm::sqrt(d as f64));
    let weights = g.softmax(scores, Some(mask))?;
    with_bucket(g, FlopBucket::WeightedSum, |g| g.matmul(weights, v))
}

/// Baseline masked self-attention: `O_t = Σ_{p≤t} softmax_p(⟨h_t W_Q, h_p W_K⟩/√d) h_p W_V`.
pub fn single_query_attention(
    g: &mut Graph,
    h: NodeId,
    w_q: NodeId,
    w_k: NodeId,
    w_v: NodeId,
    mask: &Mask,
    heads: usize,
) -> Result<NodeId> {
    let real_len = g.value(h).rows();
    let mut outs = miq_attention(g, h, &[w_q], w_k, w_v, mask, heads, real_len)?;
    Ok(outs.remove(0))
}

/// Per-slot query matrices `Q_j = S_j W_q[j]` over the extended layout,
/// where row `u` of `S_j` is hidden row `u − (m − 1) + j`.
pub fn miq_queries(g: &mut Graph, h: NodeId, queries: &[NodeId], real_len: usize) -> Result<Vec<NodeId>> {
    let m = queries.len();
    let n = g.value(h).rows();
    if m == 0 || n != real_len + m - 1 {
        return Err(Error::shape("miq_queries", (n, g.value(h).cols()), (real_len + m.max(1) - 1, m)));
    }
    let mut out = Vec::with_capacity(m);
    for (slot, &w) in queries.iter().enumerate() {
        let src = if m == 1 { h } else { g.gather(h, &query_sources(real_len, m, slot))? };
        out.push(with_bucket(g, FlopBucket::Projection, |g| g.matmul(src, w))?);
    }
    Ok(out)
}

/// Multi-item-query attention: one output `O_j` (extended length × d) per
/// query slot, all attending over the same masked keys and values.
pub fn miq_attention(
    g: &mut Graph,
    h: NodeId,
    queries: &[NodeId],
    w_k: NodeId,
    w_v: NodeId,
    mask: &Mask,
    heads: usize,
    real_len: usize,
) -> Result<Vec<NodeId>> {
    let n = g.value(h).rows();
    if mask.shape() != (n, n) {
        return Err(Error::shape("miq_attention mask", (n, n), mask.shape()));
    }
    let k = with_bucket(g, FlopBucket::Projection, |g| g.matmul(h, w_k))?;
    let v = with_bucket(g, FlopBucket::Projection, |g| g.matmul(h, w_v))?;
    let qs = miq_queries(g, h, queries, real_len)?;
    qs.into_iter().map(|q| attend(g, q, k, v, mask, heads)).collect()
}

fn mean_of(g: &mut Graph, parts: &[NodeId]) -> Result<NodeId> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    Ok(if parts.len() == 1 { acc } else { g.scale(acc, 1.0 / parts.len() as f64) })
}

/// Weighted sum `Σ_j weights[:, j] ⊙ values[j]` (row-wise scaling).
fn column_weighted_sum(g: &mut Graph, values: &[NodeId], weights: NodeId) -> Result<NodeId> {
    let mut acc = g.mul_column(values[0], weights, 0)?;
    for (j, &v) in values.iter().enumerate().skip(1) {
        let term = g.mul_column(v, weights, j)?;
        acc = g.add(acc, term)?;
    }
    Ok(acc)
}

/// Query-level attention over slot outputs. `outputs[j]` holds `o_j` for
/// every position (one row each); returns one merged row per position.
///
/// * `Context`: `c = mean_j o_j`, `α = softmax_j(⟨c W_Q, o_j W_K⟩/√d)`,
///   `F = Σ_j α_j o_j W_V`.
/// * `Last`: as `Context` with `c = o_m`.
/// * `Full`: `A[j][p] = softmax_p(⟨o_j W_Q, o_p W_K⟩/√d)`,
///   `F = mean_j Σ_p A[j][p] o_p W_V`.
pub fn query_level_aggregate(
    g: &mut Graph,
    outputs: &[NodeId],
    agg: &AggregatorNodes,
    mode: AggregatorMode,
) -> Result<NodeId> {
    let m = outputs.len();
    if m == 0 {
        return Err(Error::EmptyInput("query_level_aggregate"));
    }
    let d = g.value(outputs[0]).cols();
    let inv_sqrt_d = 1.0 / libm::sqrt(d as f64);
    let keys = with_bucket(g, FlopBucket::AggProjection, |g| {
        outputs.iter().map(|&o| g.matmul(o, agg.key)).collect::<Result<Vec<_>>>()
    })?;
    let values = with_bucket(g, FlopBucket::AggProjection, |g| {
        outputs.iter().map(|&o| g.matmul(o, agg.value)).collect::<Result<Vec<_>>>()
    })?;
    match mode {
        AggregatorMode::Context | AggregatorMode::Last => {
            let anchor = if mode == AggregatorMode::Context { mean_of(g, outputs)? } else { outputs[m - 1] };
            let cq = with_bucket(g, FlopBucket::AggProjection, |g| g.matmul(anchor, agg.query))?;
            let scores = with_bucket(g, FlopBucket::AggScores, |g| {
                keys.iter().map(|&k| g.row_dot(cq, k)).collect::<Result<Vec<_>>>()
            })?;
            let scores = g.concat_cols(&scores)?;
            let scores = g.scale(scores, inv_sqrt_d);
            let alpha = g.softmax(scores, None)?;
            with_bucket(g, FlopBucket::AggWeightedSum, |g| column_weighted_sum(g, &values, alpha))
        }
        AggregatorMode::Full => {
            let qs = with_bucket(g, FlopBucket::AggProjection, |g| {
                outputs.iter().map(|&o| g.matmul(o, agg.query)).collect::<Result<Vec<_>>>()
            })?;
            let mut rows = Vec::with_capacity(m);
            for &q in &qs {
                let scores = with_bucket(g, FlopBucket::AggScores, |g| {
                    keys.iter().map(|&k| g.row_dot(q, k)).collect::<Result<Vec<_>>>()
                })?;
                let scores = g.concat_cols(&scores)?;
                let scores = g.scale(scores, inv_sqrt_d);
                let a = g.softmax(scores, None)?;
                rows.push(with_bucket(g, FlopBucket::AggWeightedSum, |g| column_weighted_sum(g, &values, a))?);
            }
            mean_of(g, &rows)
        }
    }
}

/// Full attention sublayer over an extended hidden matrix
/// (`real_len + m − 1` rows). Returns a matrix of the same shape.
pub fn miq_sublayer(g: &mut Graph, h: NodeId, w: &AttentionNodes, shape: SublayerShape) -> Result<NodeId> {
    let m = w.queries.len();
    if m != shape.m {
        return Err(Error::InvalidParameter(alloc::format!("{m} query matrices for window {}", shape.m)));
    }
    let mask = window_mask(shape.real_len, m, shape.dummy_kv);
    let outs = miq_attention(g, h, &w.queries, w.key, w.value, &mask, shape.heads, shape.real_len)?;
    if m == 1 {
        return Ok(outs[0]);
    }
    let agg = w
        .aggregator
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("multi-item query attention needs aggregator weights".into()))?;
    let dummies = m - 1;
    let real: Vec<NodeId> = outs.iter().map(|&o| g.slice_rows(o, dummies, shape.real_len)).collect::<Result<_>>()?;
    let merged = query_level_aggregate(g, &real, agg, shape.mode)?;
    let dummy_rows: Vec<NodeId> = outs.iter().map(|&o| g.slice_rows(o, 0, dummies)).collect::<Result<_>>()?;
    let dummy_mean = mean_of(g, &dummy_rows)?;
    g.concat_rows(&[dummy_mean, merged])
}

/// Closed-form multiply-add counts of one attention sublayer pass, itemized
/// like [`FlopBucket`]. With `T' = T + m − 1`:
///
/// | term | count |
/// |---|---|
/// | projections (K, V, m queries) | `(m + 2)·T'·d²` |
/// | scores | `m·T'²·d` |
/// | weighted sums | `m·T'²·d` |
/// | aggregator projections | context/last `(2m + 1)·T·d²`, full `3m·T·d²` |
/// | aggregator scores | context/last `m·T·d`, full `m²·T·d` |
/// | aggregator weighted sums | context/last `m·T·d`, full `m²·T·d` |
///
/// The aggregator terms are zero for `m = 1`. Head count does not change the
/// totals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AttentionFlops {
    pub projection: u64,
    pub scores: u64,
    pub weighted_sum: u64,
    pub agg_projection: u64,
    pub agg_scores: u64,
    pub agg_weighted_sum: u64,
}

impl AttentionFlops {
    pub fn from_counter(c: &FlopCounter) -> Self {
        Self {
            projection: c.get(FlopBucket::Projection),
            scores: c.get(FlopBucket::Scores),
            weighted_sum: c.get(FlopBucket::WeightedSum),
            agg_projection: c.get(FlopBucket::AggProjection),
            agg_scores: c.get(FlopBucket::AggScores),
            agg_weighted_sum: c.get(FlopBucket::AggWeightedSum),
        }
    }

    /// Score and weighted-sum work: `2·m·T'²·d`.
    pub fn attention_term(&self) -> u64 {
        self.scores + self.weighted_sum
    }

    /// Query-level score and weighted-sum work.
    pub fn aggregation_term(&self) -> u64 {
        self.agg_scores + self.agg_weighted_sum
    }

    pub fn total(&self) -> u64 {
        self.projection + self.attention_term() + self.agg_projection + self.aggregation_term()
    }
}

pub fn attention_flops(real_len: usize, d: usize, m: usize, mode: AggregatorMode) -> AttentionFlops {
    let (t, d, m) = (real_len as u64, d as u64, m as u64);
    let ext = t + m - 1;
    let mut f = AttentionFlops {
        projection: (m + 2) * ext * d * d,
        scores: m * ext * ext * d,
        weighted_sum: m * ext * ext * d,
        ..Default::default()
    };
    if m > 1 {
        match mode {
            AggregatorMode::Context | AggregatorMode::Last => {
                f.agg_projection = (2 * m + 1) * t * d * d;
                f.agg_scores = m * t * d;
                f.agg_weighted_sum = m * t * d;
            }
            AggregatorMode::Full => {
                f.agg_projection = 3 * m * t * d * d;
                f.agg_scores = m * m * t * d;
                f.agg_weighted_sum = m * m * t * d;
            }
        }
    }
    f
}
