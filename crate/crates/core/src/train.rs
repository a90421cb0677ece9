//! Sampled-negative binary cross-entropy training with Adam and early
//! stopping on validation NDCG@10.
//!
//! Every batch is split into fixed chunks of [`CHUNK_ROWS`] sequences. Each
//! chunk builds its own tape and gradient buffer, and chunk results are
//! summed in chunk order, so the trajectory does not depend on the executor.

use alloc::vec::Vec;

use crate::adam::{AdamConfig, AdamState};
use crate::data::{build_batch, Batch, Phase, SplitSet};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricReport};
use crate::exec::Executor;
use crate::graph::{Gradients, Graph, OpKind};
use crate::model::SeqRecModel;
use crate::ops::log_sigmoid;
use crate::rng::RngStream;

pub const CHUNK_ROWS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Validation cadence in epochs.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub exclude_history: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 128,
            max_epochs: 200,
            eval_every: 10,
            patience: 20,
            seed: 42,
            exclude_history: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg| Err(Error::InvalidParameter(msg));
        if !(self.adam.lr > 0.0) || !self.adam.lr.is_finite() {
            return bad(alloc::format!("lr must be > 0, got {}", self.adam.lr));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.eval_every == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs, eval_every and patience must be >= 1".into());
        }
        Ok(())
    }
}

/// Mean over valid positions of `−log σ(pos) − log(1 − σ(neg))`.
pub fn bce_loss(pos: &[f64], neg: &[f64], valid: &[bool]) -> Result<f64> {
    if pos.len() != neg.len() || pos.len() != valid.len() {
        return Err(Error::shape("bce_loss", (pos.len(), 1), (neg.len(), valid.len())));
    }
    let n = valid.iter().filter(|v| **v).count();
    if n == 0 {
        return Err(Error::DegenerateBatch);
    }
    let sum: f64 = (0..pos.len()).filter(|&i| valid[i]).map(|i| -log_sigmoid(pos[i]) - log_sigmoid(-neg[i])).sum();
    Ok(sum / n as f64)
}

fn dropout_stream(seed: u64, epoch: usize, row: usize) -> RngStream {
    RngStream::new(seed).derive((1 << 63) | ((epoch as u64) << 32) | row as u64)
}

/// Loss of rows `rows` of `batch`, each valid position weighted by
/// `weight`, with its parameter gradient.
fn chunk_gradients(
    model: &SeqRecModel,
    batch: &Batch,
    rows: core::ops::Range<usize>,
    weight: f64,
    training: bool,
    fault: Option<OpKind>,
    mut row_rng: impl FnMut(usize) -> RngStream,
) -> Result<(f64, Gradients)> {
    let mut g = Graph::new().with_fault(fault);
    let w = model.bind(&mut g);
    let table = model.item_table();
    let mut total = None;
    for r in rows {
        let mut rng = row_rng(r);
        let h = model.forward_row(&mut g, &w, &batch.inputs[r], training, &mut rng)?;
        let pos = g.embed(model.params(), table, &batch.targets[r], true)?;
        let neg = g.embed(model.params(), table, &batch.negatives[r], true)?;
        let pos = g.row_dot(h, pos)?;
        let neg = g.row_dot(h, neg)?;
        let weights: Vec<f64> = batch.valid[r].iter().map(|&v| if v { weight } else { 0.0 }).collect();
        let loss = g.bce(pos, neg, &weights)?;
        total = Some(match total {
            None => loss,
            Some(t) => g.add(t, loss)?,
        });
    }
    let mut grads = model.params().gradients_like();
    let Some(loss) = total else { return Ok((0.0, grads)) };
    let value = g.value(loss).get(0, 0);
    g.backward(loss, &mut grads)?;
    Ok((value, grads))
}

/// Mean-over-valid-positions loss and its gradient for a whole batch.
/// `row_rng(r)` supplies the dropout stream of row `r`.
pub fn batch_gradients<E: Executor>(
    model: &SeqRecModel,
    batch: &Batch,
    training: bool,
    row_rng: impl Fn(usize) -> RngStream + Sync,
    exec: &E,
) -> Result<(f64, Gradients)> {
    let valid = batch.valid_count();
    if valid == 0 {
        return Err(Error::DegenerateBatch);
    }
    let weight = 1.0 / valid as f64;
    let n = batch.inputs.len();
    let chunks = n.div_ceil(CHUNK_ROWS);
    let parts = exec.map(chunks, |c| {
        let rows = c * CHUNK_ROWS..((c + 1) * CHUNK_ROWS).min(n);
        chunk_gradients(model, batch, rows, weight, training, None, &row_rng)
    });
    let mut loss = 0.0;
    let mut grads = model.params().gradients_like();
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grads.add_assign(&g)?;
    }
    Ok((loss, grads))
}

/// Inference-mode batch loss and gradient on a single tape, optionally
/// with an injected pullback fault.
pub fn batch_loss(model: &SeqRecModel, batch: &Batch, fault: Option<OpKind>) -> Result<(f64, Gradients)> {
    let valid = batch.valid_count();
    if valid == 0 {
        return Err(Error::DegenerateBatch);
    }
    let rows = 0..batch.inputs.len();
    chunk_gradients(model, batch, rows, 1.0 / valid as f64, false, fault, |_| RngStream::new(0))
}

/// One pass over all users: shuffle, batch, one Adam step per batch.
/// Returns the mean batch loss.
pub fn train_epoch<E: Executor>(
    model: &mut SeqRecModel,
    adam: &mut AdamState,
    split: &SplitSet,
    tcfg: &TrainConfig,
    epoch: usize,
    exec: &E,
) -> Result<f64> {
    let mut rng = RngStream::new(tcfg.seed).derive(epoch as u64);
    let mut order: Vec<usize> = (0..split.users.len()).collect();
    rng.shuffle(&mut order);
    let len = model.config().max_len;
    let mut losses = Vec::new();
    for (b, users) in order.chunks(tcfg.batch_size.max(1)).enumerate() {
        let batch = build_batch(split, users, len, &mut rng)?;
        if batch.valid_count() == 0 {
            continue;
        }
        let base = b * tcfg.batch_size;
        let (loss, grads) = batch_gradients(model, &batch, true, |r| dropout_stream(tcfg.seed, epoch, base + r), exec)?;
        if !loss.is_finite() || grads.0.iter().any(|g| !g.all_finite()) {
            return Err(Error::Divergence { epoch, loss });
        }
        let params = model.params_mut();
        params.zero_grads();
        params.accumulate(&grads)?;
        adam.step(params);
        losses.push(loss);
    }
    if losses.is_empty() {
        return Err(Error::DegenerateBatch);
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Validation `(HR@10, NDCG@10)` on evaluation epochs.
    pub validation: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) whose weights are kept as best.
    pub best_epoch: Option<usize>,
    pub best_ndcg10: f64,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn evaluations(&self) -> usize {
        self.epochs.iter().filter(|e| e.validation.is_some()).count()
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub history: TrainHistory,
    /// Weights at the best validation NDCG@10.
    pub best: SeqRecModel,
}

fn validation(model: &SeqRecModel, split: &SplitSet, tcfg: &TrainConfig, exec: &impl Executor) -> Result<MetricReport> {
    evaluate(model, split, Phase::Valid, &[10], tcfg.exclude_history, exec)
}

/// Trains until `max_epochs` or until `patience` consecutive evaluations
/// fail to improve validation NDCG@10. `on_epoch` sees every record as it
/// is produced.
pub fn fit<E: Executor>(
    model: &mut SeqRecModel,
    split: &SplitSet,
    tcfg: &TrainConfig,
    exec: &E,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitOutcome> {
    tcfg.validate()?;
    let mut adam = AdamState::new(tcfg.adam, model.params())?;
    let mut history = TrainHistory { best_ndcg10: f64::NEG_INFINITY, ..Default::default() };
    let mut best = model.clone();
    let mut stale = 0;
    for epoch in 1..=tcfg.max_epochs {
        let loss = train_epoch(model, &mut adam, split, tcfg, epoch, exec)?;
        let mut record = EpochRecord { epoch, loss, validation: None };
        if epoch % tcfg.eval_every == 0 || epoch == tcfg.max_epochs {
            let report = validation(model, split, tcfg, exec)?;
            let m = report.at(10).expect("cutoff 10 requested");
            record.validation = Some((m.hr, m.ndcg));
            if m.ndcg > history.best_ndcg10 {
                history.best_ndcg10 = m.ndcg;
                history.best_epoch = Some(epoch);
                best = model.clone();
                stale = 0;
            } else {
                stale += 1;
            }
        }
        on_epoch(&record);
        history.epochs.push(record);
        if stale >= tcfg.patience {
            history.stopped_early = true;
            break;
        }
    }
    Ok(FitOutcome { history, best })
}
