use alloc::sync::Arc;
use alloc::vec::Vec;

use super::kernels;
use super::ops::permute_data;
use super::{AutogradError, Op, Tape, Tensor, Var};

/// Accumulated gradients of the parameter leaves of one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: usize,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a parameter leaf, or `None` when the root does not depend
    /// on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.idx).and_then(Option::take)
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[super::Node], i: usize) -> &'a mut [f64] {
    grads[i].get_or_insert_with(|| alloc::vec![0.0; nodes[i].value.numel()])
}

impl Tape {
    /// Propagates from the scalar `root` back to every parameter leaf.
    /// Consumes the tape: one backward per recorded graph.
    pub fn backward(self, root: Var) -> Result<Gradients, AutogradError> {
        let r = self.check(root)?;
        if self.nodes[r].value.numel() != 1 {
            return Err(AutogradError::NonScalarRoot(self.nodes[r].value.shape().to_vec()));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[r] = Some(alloc::vec![1.0]);

        for i in (0..=r).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let need = |j: usize| nodes[j].requires_grad;
            match &node.op {
                Op::Leaf => {}
                &Op::MatMul { a, b, m, k, n } => {
                    if need(a) {
                        kernels::mm_bt(&g, nodes[b].value.data(), slot(&mut grads, nodes, a), m, n, k);
                    }
                    if need(b) {
                        kernels::mm_at(nodes[a].value.data(), &g, slot(&mut grads, nodes, b), m, k, n);
                    }
                }
                &Op::BatchMatMul { a, b, batch, m, k, n, trans_b } => {
                    let (da, db) = (nodes[a].value.data(), nodes[b].value.data());
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let a_s = &da[bi * m * k..(bi + 1) * m * k];
                        let b_s = &db[bi * k * n..(bi + 1) * k * n];
                        if need(a) {
                            let ga = &mut slot(&mut grads, nodes, a)[bi * m * k..(bi + 1) * m * k];
                            if trans_b {
                                // b_s is [n,k]
                                kernels::mm(gs, b_s, ga, m, n, k);
                            } else {
                                kernels::mm_bt(gs, b_s, ga, m, n, k);
                            }
                        }
                        if need(b) {
                            let gb = &mut slot(&mut grads, nodes, b)[bi * k * n..(bi + 1) * k * n];
                            if trans_b {
                                // d b[j,p] = sum_i g[i,j] a[i,p]
                                kernels::mm_at(gs, a_s, gb, m, n, k);
                            } else {
                                kernels::mm_at(a_s, gs, gb, m, k, n);
                            }
                        }
                    }
                }
                &Op::Add { a, b } => {
                    for j in [a, b] {
                        if need(j) {
                            slot(&mut grads, nodes, j).iter_mut().zip(&g).for_each(|(s, v)| *s += v);
                        }
                    }
                }
                &Op::AddBias { x, bias } => {
                    if need(x) {
                        slot(&mut grads, nodes, x).iter_mut().zip(&g).for_each(|(s, v)| *s += v);
                    }
                    if need(bias) {
                        let d = nodes[bias].value.numel();
                        let gb = slot(&mut grads, nodes, bias);
                        for row in g.chunks(d) {
                            gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                        }
                    }
                }
                &Op::Mul { a, b } => {
                    if need(a) {
                        let other = nodes[b].value.data();
                        slot(&mut grads, nodes, a).iter_mut().zip(g.iter().zip(other)).for_each(|(s, (v, o))| *s += v * o);
                    }
                    if need(b) {
                        let other = nodes[a].value.data();
                        slot(&mut grads, nodes, b).iter_mut().zip(g.iter().zip(other)).for_each(|(s, (v, o))| *s += v * o);
                    }
                }
                &Op::Scale { x, factor } => {
                    slot(&mut grads, nodes, x).iter_mut().zip(&g).for_each(|(s, v)| *s += v * factor);
                }
                &Op::Reshape { x } => {
                    slot(&mut grads, nodes, x).iter_mut().zip(&g).for_each(|(s, v)| *s += v);
                }
                Op::Permute { x, axes } => {
                    let mut inverse = alloc::vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inverse[a] = i;
                    }
                    let back = permute_data(&g, node.value.shape(), &inverse);
                    slot(&mut grads, nodes, *x).iter_mut().zip(&back).for_each(|(s, v)| *s += v);
                }
                Op::GatherRows { table, rows } => {
                    let width = node.value.shape()[1];
                    let gt = slot(&mut grads, nodes, *table);
                    for (i, &r) in rows.iter().enumerate() {
                        let src = &g[i * width..(i + 1) * width];
                        gt[r * width..(r + 1) * width].iter_mut().zip(src).for_each(|(s, v)| *s += v);
                    }
                }
                Op::MaskedFill { x, mask } => {
                    slot(&mut grads, nodes, *x).iter_mut().zip(g.iter().zip(mask)).for_each(|(s, (v, &m))| {
                        if !m {
                            *s += v;
                        }
                    });
                }
                &Op::Softmax { x, outer, n, inner } => {
                    let y = node.value.data();
                    let gx = slot(&mut grads, nodes, x);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let d = nodes[gain].value.numel();
                    let gamma = nodes[gain].value.data();
                    let rows = inv_std.len();
                    if need(gain) {
                        let gg = slot(&mut grads, nodes, gain);
                        for r in 0..rows {
                            for j in 0..d {
                                gg[j] += g[r * d + j] * xhat[r * d + j];
                            }
                        }
                    }
                    if need(bias) {
                        let gb = slot(&mut grads, nodes, bias);
                        for row in g.chunks(d) {
                            gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                        }
                    }
                    if need(x) {
                        let gx = slot(&mut grads, nodes, x);
                        let df = d as f64;
                        for r in 0..rows {
                            let gr = &g[r * d..(r + 1) * d];
                            let hr = &xhat[r * d..(r + 1) * d];
                            let mut sum_dh = 0.0;
                            let mut sum_dh_h = 0.0;
                            for j in 0..d {
                                let dh = gr[j] * gamma[j];
                                sum_dh += dh;
                                sum_dh_h += dh * hr[j];
                            }
                            let inv = inv_std[r];
                            for j in 0..d {
                                let dh = gr[j] * gamma[j];
                                gx[r * d + j] += inv / df * (df * dh - sum_dh - hr[j] * sum_dh_h);
                            }
                        }
                    }
                }
                &Op::Gelu { x } => {
                    let xs = nodes[x].value.data();
                    slot(&mut grads, nodes, x)
                        .iter_mut()
                        .zip(g.iter().zip(xs))
                        .for_each(|(s, (v, &xv))| *s += v * kernels::gelu_grad(xv));
                }
                &Op::Tanh { x } => {
                    let y = node.value.data();
                    slot(&mut grads, nodes, x).iter_mut().zip(g.iter().zip(y)).for_each(|(s, (v, yv))| *s += v * (1.0 - yv * yv));
                }
                &Op::Sum { x } => {
                    let g0 = g[0];
                    slot(&mut grads, nodes, x).iter_mut().for_each(|s| *s += g0);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let classes = nodes[*logits].value.shape()[1];
                    let scale = g[0] / labels.len() as f64;
                    let gl = slot(&mut grads, nodes, *logits);
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            gl[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                        }
                    }
                }
            }
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) if node.requires_grad => Some(Tensor { shape: node.value.shape().to_vec(), data: Arc::new(g) }),
                _ => None,
            })
            .collect();
        Ok(Gradients { tape: self.id, grads })
    }
}
