//! Attention cost measurements: instrumented multiply-adds against the
//! closed form, wall time, and the parameter delta over the single-query
//! model.

use std::time::Instant;

use miqrec_core::attention::{
    attention_flops, miq_sublayer, AggregatorMode, AggregatorNodes, AttentionFlops, AttentionNodes, SublayerShape,
};
use miqrec_core::model::ParamDelta;
use miqrec_core::{AttentionKind, Graph, ModelConfig, Result, RngStream, SeqRecModel};

pub const BENCH_HEADER: &str = "T,d,m,mode,proj_closed,proj_counted,scores_closed,scores_counted,ws_closed,ws_counted,\
agg_proj_closed,agg_proj_counted,agg_scores_closed,agg_scores_counted,agg_ws_closed,agg_ws_counted,wall_ms,\
param_delta,param_delta_audit";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub t: usize,
    pub d: usize,
    pub m: usize,
    pub mode: AggregatorMode,
    pub closed: AttentionFlops,
    pub counted: AttentionFlops,
    pub wall_ms: f64,
    /// Closed-form parameter delta.
    pub param_delta: usize,
    /// Delta measured from instantiated models.
    pub param_delta_audit: usize,
}

impl BenchRow {
    pub fn consistent(&self) -> bool {
        self.closed == self.counted && self.param_delta == self.param_delta_audit
    }

    pub fn csv_line(&self) -> String {
        let (c, k) = (&self.closed, &self.counted);
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{:.3},{},{}",
            self.t,
            self.d,
            self.m,
            self.mode,
            c.projection,
            k.projection,
            c.scores,
            k.scores,
            c.weighted_sum,
            k.weighted_sum,
            c.agg_projection,
            k.agg_projection,
            c.agg_scores,
            k.agg_scores,
            c.agg_weighted_sum,
            k.agg_weighted_sum,
            self.wall_ms,
            self.param_delta,
            self.param_delta_audit
        )
    }
}

/// Runs one attention sublayer of length `t`, width `d`, window `m` on random
/// inputs and returns the counted multiply-adds and wall time.
pub fn measure(t: usize, d: usize, m: usize, mode: AggregatorMode, seed: u64) -> Result<(AttentionFlops, f64)> {
    let mut rng = RngStream::new(seed);
    let mut g = Graph::new();
    let h = g.constant(rng.normal_matrix(t + m - 1, d, 1.0));
    let mut w = || g.constant(rng.normal_matrix(d, d, 0.1));
    let nodes = AttentionNodes {
        queries: (0..m).map(|_| w()).collect(),
        key: w(),
        value: w(),
        aggregator: Some(AggregatorNodes { query: w(), key: w(), value: w() }),
    };
    let start = Instant::now();
    miq_sublayer(&mut g, h, &nodes, SublayerShape { real_len: t, m, mode, dummy_kv: true, heads: 1 })?;
    let wall = start.elapsed().as_secs_f64() * 1e3;
    Ok((AttentionFlops::from_counter(g.flops()), wall))
}

/// Parameter delta of a window-`m` model over the single-query model,
/// measured from instantiated parameter stores.
pub fn audited_delta(t: usize, d: usize, m: usize, blocks: usize) -> Result<usize> {
    let base =
        ModelConfig { n_items: 1, d, max_len: t, blocks, m, attention: AttentionKind::Single, ..Default::default() };
    let miq = ModelConfig { attention: AttentionKind::Miq, ..base.clone() };
    let (a, b) = (SeqRecModel::init(base)?.param_audit(), SeqRecModel::init(miq)?.param_audit());
    Ok(b.delta_over(&a).total())
}

pub fn run_grid(
    ts: &[usize],
    ds: &[usize],
    ms: &[usize],
    mode: AggregatorMode,
    blocks: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &t in ts {
        for &d in ds {
            for &m in ms {
                let (counted, wall_ms) = measure(t, d, m, mode, seed)?;
                rows.push(BenchRow {
                    t,
                    d,
                    m,
                    mode,
                    closed: attention_flops(t, d, m, mode),
                    counted,
                    wall_ms,
                    param_delta: ParamDelta::closed_form(d, blocks, m).total(),
                    param_delta_audit: audited_delta(t, d, m, blocks)?,
                });
            }
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = format!("{BENCH_HEADER}\n");
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

/// Fitted exponents over a grid: the attention term against `T + m − 1` for
/// each `(d, m)` series, and the aggregation term against `m` (points with
/// `m > 1`) for each `(T, d)` series. Series with fewer than two points are
/// skipped.
pub fn exponents(rows: &[BenchRow]) -> (Vec<f64>, Vec<f64>) {
    let mut attn = Vec::new();
    let mut agg = Vec::new();
    let mut keys: Vec<(usize, usize)> = rows.iter().map(|r| (r.d, r.m)).collect();
    keys.sort_unstable();
    keys.dedup();
    for (d, m) in keys {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.d == d && r.m == m)
            .map(|r| ((r.t + r.m - 1) as f64, r.counted.attention_term() as f64))
            .collect();
        if pts.len() >= 2 {
            attn.push(log_log_slope(&pts));
        }
    }
    let mut keys: Vec<(usize, usize)> = rows.iter().map(|r| (r.t, r.d)).collect();
    keys.sort_unstable();
    keys.dedup();
    for (t, d) in keys {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.t == t && r.d == d && r.m > 1)
            .map(|r| (r.m as f64, r.counted.aggregation_term() as f64))
            .collect();
        if pts.len() >= 2 {
            agg.push(log_log_slope(&pts));
        }
    }
    (attn, agg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_a_power_law() {
        let pts: Vec<(f64, f64)> = [2.0f64, 4.0, 8.0].iter().map(|&x| (x, 3.0 * x * x)).collect();
        assert!((log_log_slope(&pts) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn small_grid_is_consistent() {
        let rows = run_grid(&[4, 8], &[4], &[1, 2, 4], AggregatorMode::Full, 2, 1).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(BenchRow::consistent));
        let (attn, agg) = exponents(&rows);
        assert!(attn.iter().all(|e| (e - 2.0).abs() < 1e-9));
        assert!(agg.iter().all(|e| (e - 2.0).abs() < 1e-9));
        assert_eq!(bench_csv(&rows).lines().count(), 7);
    }
}
