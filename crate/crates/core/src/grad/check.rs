//! Central finite-difference checks of parameter gradients.

use rand::Rng;

use super::graph::{Bindings, Graph, NodeId, Op};
use super::tensor::Tensor;
use crate::error::Result;
use crate::math::stream_rng;

/// Denominator floor for the entrywise relative error, so entries whose true
/// gradient is zero are judged on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Central differences of `f` with respect to every entry of `params`.
pub fn numeric_grad(
    f: &mut dyn FnMut(&[Tensor]) -> Result<f64>,
    params: &[Tensor],
    h: f64,
) -> Result<Vec<Tensor>> {
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Tensor::zeros(params[p].rows, params[p].cols);
        for i in 0..params[p].len() {
            let orig = work[p].data[i];
            work[p].data[i] = orig + h;
            let up = f(&work)?;
            work[p].data[i] = orig - h;
            let down = f(&work)?;
            work[p].data[i] = orig;
            g.data[i] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Largest entrywise relative error between two gradient lists.
pub fn max_rel_err(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data.iter().zip(&n.data).map(|(x, y)| rel_err(*x, *y)))
        .fold(0.0, f64::max)
}

/// Like [`max_rel_err`], but entries are compared against a floor of
/// `scale` times the largest analytic entry, so roundoff in entries that
/// are exactly zero does not dominate when the gradient is large.
pub fn max_scaled_err(analytic: &[Tensor], numeric: &[Tensor], scale: f64) -> f64 {
    let top = analytic
        .iter()
        .flat_map(|a| a.data.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (scale * top).max(REL_ERR_FLOOR);
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data.iter().zip(&n.data))
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn rand_tensor(rng: &mut impl Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Number of op kinds covered by [`op_instance`].
pub const N_OP_KINDS: usize = 23;

/// Builds a random instance of a single op applied to fresh inputs.
pub fn op_instance(kind: usize, rng: &mut impl Rng) -> (Graph, NodeId, Vec<Tensor>) {
    let mut g = Graph::new();
    let (m, n, k) = (3, 4, 2);
    let mut ins = Vec::new();
    let mut inp = |g: &mut Graph, r, c, rng: &mut _| {
        ins.push(rand_tensor(rng, r, c));
        g.input(r, c)
    };
    let y = match kind {
        0 => {
            let a = inp(&mut g, m, k, rng);
            let b = inp(&mut g, k, n, rng);
            g.matmul(a, b)
        }
        1 => {
            let a = inp(&mut g, m, n, rng);
            g.transpose(a)
        }
        2 => {
            let a = inp(&mut g, m, n, rng);
            let b = inp(&mut g, m, n, rng);
            g.add(a, b)
        }
        3 => {
            let a = inp(&mut g, m, n, rng);
            let b = inp(&mut g, m, n, rng);
            g.sub(a, b)
        }
        4 => {
            let a = inp(&mut g, m, n, rng);
            let b = inp(&mut g, m, n, rng);
            g.mul(a, b)
        }
        5 => {
            let a = inp(&mut g, m, n, rng);
            g.neg(a)
        }
        6 => {
            let a = inp(&mut g, m, n, rng);
            g.scale(a, -1.7)
        }
        7 => {
            let a = inp(&mut g, m, n, rng);
            g.offset(a, 0.3)
        }
        8 => {
            let a = inp(&mut g, m, n, rng);
            g.tanh(a)
        }
        9 => {
            let a = inp(&mut g, m, n, rng);
            g.sin(a)
        }
        10 => {
            let a = inp(&mut g, m, n, rng);
            g.cos(a)
        }
        11 => {
            let a = inp(&mut g, m, n, rng);
            g.exp(a)
        }
        12 => {
            let a = inp(&mut g, m, n, rng);
            g.square(a)
        }
        13 => {
            let a = inp(&mut g, m, n, rng);
            g.log_sigmoid(a)
        }
        14 => {
            let a = inp(&mut g, m, n, rng);
            g.sum_rows(a)
        }
        15 => {
            let a = inp(&mut g, m, n, rng);
            g.sum_cols(a)
        }
        16 => {
            let a = inp(&mut g, 1, n, rng);
            g.broadcast_rows(a, m)
        }
        17 => {
            let a = inp(&mut g, m, 1, rng);
            g.broadcast_cols(a, n)
        }
        18 => {
            let a = inp(&mut g, m, n, rng);
            g.reshape(a, 2, 6)
        }
        19 => {
            let a = inp(&mut g, m, n, rng);
            g.slice_cols(a, 1, 2)
        }
        20 => {
            let a = inp(&mut g, m, k, rng);
            g.pad_cols(a, 1, 5)
        }
        21 => {
            let a = inp(&mut g, m, k, rng);
            let b = inp(&mut g, m, n, rng);
            g.concat_cols(&[a, b])
        }
        22 => {
            let a = inp(&mut g, m, n, rng);
            g.logsumexp_cols(a)
        }
        _ => unreachable!(),
    };
    (g, y, ins)
}

/// Worst dot-product residual seen for one op kind.
#[derive(Clone, Debug)]
pub struct DotProductResult {
    pub op: &'static str,
    /// `max |<seed, J t> - <J^T seed, t>| / (1 + |<seed, J t>|)`.
    pub max_err: f64,
}

/// Compares every reverse-mode rule against the forward-mode evaluator on
/// `trials` random instances per op.
pub fn dot_product_tests(seed: u64, trials: usize) -> Result<Vec<DotProductResult>> {
    let mut rng = stream_rng(seed, 0);
    let mut out = Vec::with_capacity(N_OP_KINDS);
    for kind in 0..N_OP_KINDS {
        let mut worst = 0.0f64;
        let mut name = "";
        for _ in 0..trials {
            let (mut g, y, ins) = op_instance(kind, &mut rng);
            name = g.op(y).name();
            let leaves: Vec<NodeId> = (0..g.len())
                .map(NodeId)
                .filter(|n| matches!(g.op(*n), Op::Input(_)))
                .collect();
            let (r, c) = g.shape(y);
            let seed_t = rand_tensor(&mut rng, r, c);
            let tangents: Vec<Tensor> = ins.iter().map(|t| rand_tensor(&mut rng, t.rows, t.cols)).collect();
            let seed_node = g.input(r, c);
            let grads = g.vjp(y, seed_node, &leaves);
            let mut all_in = ins.clone();
            all_in.push(seed_t.clone());
            let back = g.eval(Bindings { inputs: &all_in, params: &[] }, &grads)?;
            let mut all_tan = tangents.clone();
            all_tan.push(Tensor::zeros(r, c));
            let fwd = g.jvp(
                Bindings { inputs: &all_in, params: &[] },
                Bindings { inputs: &all_tan, params: &[] },
                &[y],
            )?;
            let lhs: f64 = back.iter().zip(&tangents).map(|(b, t)| b.dot(t)).sum();
            let rhs = seed_t.dot(&fwd[0].1);
            worst = worst.max((lhs - rhs).abs() / (1.0 + rhs.abs()));
        }
        out.push(DotProductResult { op: name, max_err: worst });
    }
    Ok(out)
}
