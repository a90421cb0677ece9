//! Central finite-difference oracles for the tape.
//!
//! Errors are reported as `|g − ĝ| / max(1, |g|, |ĝ|)`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{training_row, Batch};
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, NodeId, OpKind, ParamStore};
use crate::matrix::{Mask, Matrix};
use crate::model::{ModelConfig, SeqRecModel};
use crate::rng::RngStream;
use crate::train::batch_loss;

/// Pass threshold on the relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Default central-difference step.
pub const EPSILON: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    libm::fabs(analytic - numeric) / 1f64.max(libm::fabs(analytic)).max(libm::fabs(numeric))
}

/// `(f(θ + εeᵢ) − f(θ − εeᵢ)) / 2ε` for every coordinate of `theta`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, theta: &[f64], eps: f64) -> Result<Vec<f64>> {
    let mut x = theta.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let up = f(&x);
        x[i] = orig - eps;
        let down = f(&x);
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(alloc::format!("finite difference at coordinate {i}")));
        }
        out.push((up - down) / (2.0 * eps));
    }
    Ok(out)
}

/// Central differences of `f` with respect to every parameter entry.
/// Parameters are restored exactly afterwards.
pub fn finite_diff_grad(
    mut f: impl FnMut(&ParamStore) -> Result<f64>,
    store: &mut ParamStore,
    eps: f64,
) -> Result<Gradients> {
    let mut grads = store.gradients_like();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for k in 0..store.value(id).len() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + eps;
            let up = f(store)?;
            store.value_mut(id).data_mut()[k] = orig - eps;
            let down = f(store)?;
            store.value_mut(id).data_mut()[k] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(alloc::format!("objective near {}[{k}]", store.get(id).name)));
            }
            grads.0[id.0].data_mut()[k] = (up - down) / (2.0 * eps);
        }
    }
    Ok(grads)
}

/// Worst relative error for one named parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupError {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

impl GroupError {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Per-parameter comparison of analytic and numeric gradients.
pub fn compare(store: &ParamStore, analytic: &Gradients, numeric: &Gradients) -> Vec<GroupError> {
    store
        .iter()
        .map(|(id, p)| {
            let worst = analytic
                .get(id)
                .data()
                .iter()
                .zip(numeric.get(id).data())
                .map(|(a, n)| relative_error(*a, *n))
                .fold(0.0, f64::max);
            GroupError { name: p.name.clone(), entries: p.value.len(), max_rel_error: worst }
        })
        .collect()
}

/// Outcome of the isolated pullback check for one op kind.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub op: OpKind,
    pub max_rel_error: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Inputs for one op: free variables plus, for parameter-backed ops, a store.
struct OpCase {
    inputs: Vec<Matrix>,
    store: ParamStore,
}

/// Checks the pullback of every differentiable op on a small random
/// instance. Only the op under test carries gradient, so an injected fault
/// is attributed to exactly one kind.
pub fn check_ops(seed: u64, fault: Option<OpKind>) -> Result<Vec<OpCheck>> {
    OpKind::DIFFERENTIABLE.iter().map(|&op| check_op(op, seed, fault)).collect()
}

fn case_for(op: OpKind, rng: &mut RngStream) -> OpCase {
    let mut n = |r: usize, c: usize| rng.normal_matrix(r, c, 1.0);
    let (inputs, store) = match op {
        OpKind::MatMul => (vec![n(3, 4), n(4, 2)], ParamStore::new()),
        OpKind::MatMulNt => (vec![n(3, 4), n(5, 4)], ParamStore::new()),
        OpKind::Add | OpKind::Mul | OpKind::RowDot => (vec![n(3, 4), n(3, 4)], ParamStore::new()),
        OpKind::AddRow => (vec![n(3, 4), n(1, 4)], ParamStore::new()),
        OpKind::Gather => (vec![n(4, 3)], ParamStore::new()),
        OpKind::SliceRows => (vec![n(5, 3)], ParamStore::new()),
        OpKind::ConcatRows => (vec![n(2, 3), n(3, 3)], ParamStore::new()),
        OpKind::SliceCols => (vec![n(3, 5)], ParamStore::new()),
        OpKind::ConcatCols => (vec![n(3, 2), n(3, 3)], ParamStore::new()),
        OpKind::Softmax => (vec![n(4, 4)], ParamStore::new()),
        OpKind::LayerNorm => (vec![n(3, 5), n(1, 5), n(1, 5)], ParamStore::new()),
        OpKind::Relu => {
            // keep entries away from the kink
            let mut x = n(3, 4);
            for v in x.data_mut() {
                *v += if *v >= 0.0 { 0.2 } else { -0.2 };
            }
            (vec![x], ParamStore::new())
        }
        OpKind::MulColumn => (vec![n(3, 4), n(3, 2)], ParamStore::new()),
        OpKind::Bce => (vec![n(4, 1), n(4, 1)], ParamStore::new()),
        OpKind::Param => {
            let mut s = ParamStore::new();
            s.add("p", n(2, 3));
            (vec![], s)
        }
        OpKind::Embed => {
            let mut s = ParamStore::new();
            s.add("table", n(5, 3));
            (vec![], s)
        }
        OpKind::Scale | OpKind::Dropout | OpKind::Sum | OpKind::Constant | OpKind::Variable => {
            (vec![n(3, 4)], ParamStore::new())
        }
    };
    OpCase { inputs, store }
}

fn apply(op: OpKind, g: &mut Graph, store: &ParamStore, xs: &[NodeId]) -> Result<NodeId> {
    use crate::graph::ParamId;
    Ok(match op {
        OpKind::MatMul => g.matmul(xs[0], xs[1])?,
        OpKind::MatMulNt => g.matmul_nt(xs[0], xs[1])?,
        OpKind::Add => g.add(xs[0], xs[1])?,
        OpKind::Mul => g.mul(xs[0], xs[1])?,
        OpKind::AddRow => g.add_row(xs[0], xs[1])?,
        OpKind::Scale => g.scale(xs[0], 0.7),
        OpKind::Gather => g.gather(xs[0], &[2, 0, 2, 3])?,
        OpKind::SliceRows => g.slice_rows(xs[0], 1, 3)?,
        OpKind::ConcatRows => g.concat_rows(xs)?,
        OpKind::SliceCols => g.slice_cols(xs[0], 1, 2)?,
        OpKind::ConcatCols => g.concat_cols(xs)?,
        OpKind::Softmax => g.softmax(xs[0], Some(&Mask::from_fn(4, 4, |i, j| j <= i)))?,
        OpKind::LayerNorm => g.layer_norm(xs[0], xs[1], xs[2], 1e-8)?,
        OpKind::Relu => g.relu(xs[0]),
        OpKind::Dropout => g.dropout(xs[0], 0.3, &mut RngStream::new(99), true)?,
        OpKind::RowDot => g.row_dot(xs[0], xs[1])?,
        OpKind::MulColumn => g.mul_column(xs[0], xs[1], 1)?,
        OpKind::Sum => g.sum(xs[0]),
        OpKind::Bce => g.bce(xs[0], xs[1], &[0.25, 0.0, 0.5, 0.25])?,
        OpKind::Param => g.param(store, ParamId(0)),
        OpKind::Embed => g.embed(store, ParamId(0), &[2, 3, 3, 1], true)?,
        OpKind::Constant | OpKind::Variable => xs[0],
    })
}

fn check_op(op: OpKind, seed: u64, fault: Option<OpKind>) -> Result<OpCheck> {
    let mut rng = RngStream::new(seed).derive(op as u64);
    let OpCase { inputs, mut store } = case_for(op, &mut rng);

    let forward = |inputs: &[Matrix], store: &ParamStore| -> Result<(Graph, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new().with_fault(fault);
        let xs: Vec<NodeId> = inputs.iter().map(|m| g.variable(m.clone())).collect();
        let out = apply(op, &mut g, store, &xs)?;
        Ok((g, xs, out))
    };

    let (mut g, xs, out) = forward(&inputs, &store)?;
    let (r, c) = g.value(out).shape();
    let weights = rng.normal_matrix(r, c, 1.0);
    let objective =
        |g: &Graph, out: NodeId| -> f64 { g.value(out).data().iter().zip(weights.data()).map(|(a, w)| a * w).sum() };
    let mut analytic = store.gradients_like();
    g.backward_from(out, weights.clone(), &mut analytic)?;

    let mut worst: f64 = 0.0;
    for (k, x) in xs.iter().enumerate() {
        let zero = Matrix::zeros(inputs[k].rows(), inputs[k].cols());
        let ga = g.grad(*x).unwrap_or(&zero).clone();
        let mut failure = None;
        let numeric = central_difference(
            |theta| {
                let mut perturbed = inputs.clone();
                perturbed[k] = Matrix::new(inputs[k].rows(), inputs[k].cols(), theta.to_vec()).expect("shape");
                match forward(&perturbed, &store) {
                    Ok((g2, _, o2)) => objective(&g2, o2),
                    Err(e) => {
                        failure = Some(e);
                        f64::NAN
                    }
                }
            },
            inputs[k].data(),
            EPSILON,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        for (a, n) in ga.data().iter().zip(numeric?) {
            worst = worst.max(relative_error(*a, n));
        }
    }
    if !store.is_empty() {
        let numeric = finite_diff_grad(
            |s| {
                let (g2, _, o2) = forward(&inputs, s)?;
                Ok(objective(&g2, o2))
            },
            &mut store,
            EPSILON,
        )?;
        for e in compare(&store, &analytic, &numeric) {
            worst = worst.max(e.max_rel_error);
        }
    }
    Ok(OpCheck { op, max_rel_error: worst })
}

/// Small random batch over `config`'s vocabulary for model-level checks.
pub fn probe_batch(config: &ModelConfig, rows: usize, rng: &mut RngStream) -> Batch {
    let n = config.n_items;
    let t = config.max_len;
    let mut batch =
        Batch { users: (0..rows).collect(), inputs: vec![], targets: vec![], negatives: vec![], valid: vec![] };
    for r in 0..rows {
        let len = 2 + (r * 3 + rng.below(t)) % t;
        let seq: Vec<u32> = (0..len + 1).map(|_| 1 + rng.below(n) as u32).collect();
        let (input, target, valid) = training_row(&seq, t);
        let neg = valid.iter().map(|&v| if v { 1 + rng.below(n) as u32 } else { 0 }).collect();
        batch.inputs.push(input);
        batch.targets.push(target);
        batch.negatives.push(neg);
        batch.valid.push(valid);
    }
    batch
}

/// Full-model gradient check: analytic gradients of the inference-mode
/// batch loss against central differences, per parameter matrix.
///
/// Weights are perturbed away from their small initial scale so that every
/// group carries a gradient well above the finite-difference noise. The
/// padding row is frozen and is excluded from the comparison.
pub fn check_model(config: &ModelConfig, seed: u64, fault: Option<OpKind>) -> Result<Vec<GroupError>> {
    let config = ModelConfig { dropout: 0.0, seed, ..config.clone() };
    let mut model = SeqRecModel::init(config.clone())?;
    let mut rng = RngStream::new(seed).derive(7);
    let table = model.item_table();
    for (id, p) in model.params_mut().iter_mut().enumerate() {
        let first = if id == table.0 { p.value.cols() } else { 0 };
        for v in &mut p.value.data_mut()[first..] {
            *v += 0.4 * rng.standard_normal();
        }
    }
    let batch = probe_batch(&config, 3, &mut rng);
    let (_, analytic) = batch_loss(&model, &batch, fault)?;
    let mut store = model.params().clone();
    let mut numeric = finite_diff_grad(
        |s| {
            let probe = SeqRecModel::from_store(config.clone(), s.clone())?;
            Ok(batch_loss(&probe, &batch, None)?.0)
        },
        &mut store,
        EPSILON,
    )?;
    numeric.0[table.0].row_mut(0).fill(0.0);
    Ok(compare(model.params(), &analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_derivative() {
        let g = central_difference(|t| t[0] * t[0], &[3.0], 1e-4).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_has_zero_derivative() {
        let g = central_difference(|_| 4.2, &[1.0, -2.0], 1e-4).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn random_quadratic_form_matches_closed_form() {
        // f(θ) = θᵀAθ with symmetric A → ∇f = 2Aθ
        let mut rng = RngStream::new(21);
        let b = rng.normal_matrix(4, 4, 1.0);
        let a = Matrix::from_fn(4, 4, |i, j| 0.5 * (b.get(i, j) + b.get(j, i)));
        let theta: Vec<f64> = (0..4).map(|_| rng.standard_normal()).collect();
        let f = |t: &[f64]| {
            let mut s = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    s += t[i] * a.get(i, j) * t[j];
                }
            }
            s
        };
        let num = central_difference(f, &theta, 1e-4).unwrap();
        for i in 0..4 {
            let exact: f64 = 2.0 * (0..4).map(|j| a.get(i, j) * theta[j]).sum::<f64>();
            assert!((num[i] - exact).abs() < 1e-7);
        }
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        assert!(matches!(central_difference(|t| 1.0 / (t[0] - t[0]), &[1.0], 1e-4), Err(Error::NonFinite(_))));
    }

    #[test]
    fn every_op_pullback_matches_finite_differences() {
        for check in check_ops(1, None).unwrap() {
            assert!(check.passed(), "{} rel err {}", check.op, check.max_rel_error);
        }
    }

    #[test]
    fn injected_fault_is_attributed_to_one_op() {
        for victim in [OpKind::Softmax, OpKind::LayerNorm, OpKind::Embed, OpKind::MatMulNt] {
            let checks = check_ops(1, Some(victim)).unwrap();
            let failing: Vec<OpKind> = checks.iter().filter(|c| !c.passed()).map(|c| c.op).collect();
            assert_eq!(failing, vec![victim]);
        }
    }

    fn reference_config() -> ModelConfig {
        ModelConfig { n_items: 12, d: 8, max_len: 6, blocks: 2, m: 3, ..Default::default() }
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let groups = check_model(&reference_config(), 5, None).unwrap();
        assert!(groups.iter().any(|g| g.name == "blocks.1.agg.w_v"));
        assert!(groups.iter().any(|g| g.name == "blocks.0.attn.w_q.2"));
        for g in &groups {
            assert!(g.passed(), "{} rel err {}", g.name, g.max_rel_error);
        }
    }

    #[test]
    fn model_variants_match_finite_differences() {
        use crate::attention::AggregatorMode;
        let variants = [
            ModelConfig { aggregator: AggregatorMode::Full, blocks: 1, ..reference_config() },
            ModelConfig { aggregator: AggregatorMode::Last, dummy_kv: false, blocks: 1, ..reference_config() },
            ModelConfig { heads: 2, blocks: 1, ..reference_config() },
        ];
        for c in &variants {
            for g in check_model(c, 6, None).unwrap() {
                assert!(g.passed(), "{c:?}: {} rel err {}", g.name, g.max_rel_error);
            }
        }
    }

    #[test]
    fn model_check_detects_a_broken_pullback() {
        let c = ModelConfig { blocks: 1, ..reference_config() };
        let groups = check_model(&c, 5, Some(OpKind::Softmax)).unwrap();
        assert!(groups.iter().any(|g| !g.passed()));
    }
}
