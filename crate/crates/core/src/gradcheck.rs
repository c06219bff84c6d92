//! Finite-difference verification of [`Graph::backward`].
//!
//! The recorded tape is re-evaluated by a separate `f64` interpreter, so the
//! numerical derivative does not share arithmetic with the `f32` kernels it
//! checks. Central differences are taken on randomly sampled parameter
//! coordinates and compared against the analytic gradient.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, NodeId, Op};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::ElementwiseOp;

#[derive(Debug, Clone, PartialEq)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coords: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.coords.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self, tol: f64) -> Vec<&CoordCheck> {
        self.coords.iter().filter(|c| c.rel_error > tol).collect()
    }
}

/// |a − n| / max(|a|, |n|), with both-zero counted as agreement.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-300 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Compares analytic gradients of `loss` against central differences with step
/// `h` on up to `max_coords` parameter coordinates drawn with `seed`.
pub fn check_gradients(
    graph: &Graph,
    loss: NodeId,
    store: &ParamStore,
    max_coords: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut analytic = store.clone();
    analytic.zero_grad();
    graph.backward(loss, &mut analytic)?;

    let used: Vec<ParamId> = {
        let mut ids: Vec<ParamId> = graph
            .nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Param(p) => Some(p),
                _ => None,
            })
            .collect();
        ids.sort();
        ids.dedup();
        ids
    };
    let total: usize = used.iter().map(|&p| store.value(p).len()).sum();
    if total == 0 {
        return Err(Error::contract("graph has no parameters to check"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, total, max_coords.min(total)).into_vec();

    let mut coords = Vec::with_capacity(picks.len());
    for flat in picks {
        let (pid, idx) = locate(&used, store, flat);
        let plus = replay(graph, store, Some((pid, idx, h)))?[loss.0][0];
        let minus = replay(graph, store, Some((pid, idx, -h)))?[loss.0][0];
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.grad(pid).data()[idx] as f64;
        coords.push(CoordCheck {
            param: store.name(pid).to_string(),
            index: idx,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    Ok(GradCheckReport { coords })
}

fn locate(used: &[ParamId], store: &ParamStore, mut flat: usize) -> (ParamId, usize) {
    for &p in used {
        let n = store.value(p).len();
        if flat < n {
            return (p, flat);
        }
        flat -= n;
    }
    unreachable!("flat index beyond parameter count")
}

/// Evaluates every node of the tape in `f64`, optionally nudging one
/// parameter coordinate by `delta`.
pub fn replay(graph: &Graph, store: &ParamStore, nudge: Option<(ParamId, usize, f64)>) -> Result<Vec<Vec<f64>>> {
    let mut vals: Vec<Vec<f64>> = Vec::with_capacity(graph.nodes.len());
    for node in &graph.nodes {
        let shape = node.value.shape();
        let cols = *shape.last().unwrap_or(&1);
        let v: Vec<f64> = match &node.op {
            Op::Input => node.value.data().iter().map(|&x| x as f64).collect(),
            Op::Param(p) => {
                let mut v: Vec<f64> = store.value(*p).data().iter().map(|&x| x as f64).collect();
                if let Some((np, idx, d)) = nudge {
                    if np == *p {
                        v[idx] += d;
                    }
                }
                v
            }
            Op::MatMul(a, b) => {
                let k = graph.value(*a).last_dim();
                let n = graph.value(*b).last_dim();
                let m = vals[a.0].len() / k;
                let (av, bv) = (&vals[a.0], &vals[b.0]);
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        out[i * n + j] = (0..k).map(|p| av[i * k + p] * bv[p * n + j]).sum();
                    }
                }
                out
            }
            Op::Elementwise(op, a, b) => {
                let av = &vals[a.0];
                match op {
                    ElementwiseOp::Silu => av.iter().map(|&x| x / (1.0 + (-x).exp())).collect(),
                    ElementwiseOp::Tanh => av.iter().map(|&x| x.tanh()).collect(),
                    _ => {
                        let bv = &vals[b.expect("binary op").0];
                        let nb = bv.len();
                        av.iter()
                            .enumerate()
                            .map(|(i, &x)| {
                                let y = bv[i % nb];
                                match op {
                                    ElementwiseOp::Add => x + y,
                                    ElementwiseOp::Sub => x - y,
                                    _ => x * y,
                                }
                            })
                            .collect()
                    }
                }
            }
            Op::Exp(a) => vals[a.0].iter().map(|x| x.exp()).collect(),
            Op::Scale(a, k) => vals[a.0].iter().map(|x| x * *k as f64).collect(),
            Op::MulScalar(a, s) => {
                let k = vals[s.0][0];
                vals[a.0].iter().map(|x| x * k).collect()
            }
            Op::ConcatCols(parts) => {
                let rows = shape[0];
                let mut out = Vec::with_capacity(node.value.len());
                for i in 0..rows {
                    for p in parts {
                        let w = graph.value(*p).last_dim();
                        out.extend_from_slice(&vals[p.0][i * w..(i + 1) * w]);
                    }
                }
                out
            }
            Op::GatherRows(t, idx) => {
                let mut out = Vec::with_capacity(node.value.len());
                for &i in idx {
                    out.extend_from_slice(&vals[t.0][i * cols..(i + 1) * cols]);
                }
                out
            }
            Op::Transpose(a) => {
                let (m, n) = (shape[1], shape[0]);
                let av = &vals[a.0];
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        out[j * m + i] = av[i * n + j];
                    }
                }
                out
            }
            Op::L2NormalizeRows(a) => {
                let av = &vals[a.0];
                let mut out = vec![0.0; av.len()];
                for (orow, row) in out.chunks_mut(cols).zip(av.chunks(cols)) {
                    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                    for (o, x) in orow.iter_mut().zip(row) {
                        *o = x / norm;
                    }
                }
                out
            }
            Op::MseLoss(p, t) => {
                let (pv, tv) = (&vals[p.0], &vals[t.0]);
                let s: f64 = pv.iter().zip(tv).map(|(a, b)| (a - b) * (a - b)).sum();
                vec![s / pv.len() as f64]
            }
            Op::SoftCrossEntropy(l, targets) => {
                let lv = &vals[l.0];
                let n = graph.value(*l).last_dim();
                let m = lv.len() / n;
                let mut total = 0.0;
                for i in 0..m {
                    let row = &lv[i * n..(i + 1) * n];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                    for j in 0..n {
                        total -= targets.data()[i * n + j] as f64 * (row[j] - lse);
                    }
                }
                vec![total / m as f64]
            }
            Op::Mean(a) => {
                let av = &vals[a.0];
                vec![av.iter().sum::<f64>() / av.len() as f64]
            }
        };
        vals.push(v);
    }
    Ok(vals)
}
