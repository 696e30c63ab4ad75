//! Reverse-mode automatic differentiation over the tensor op set.
//!
//! A `Tape` records eager forward computation into an append-only arena;
//! `backward` walks the nodes in reverse insertion order (which is a reverse
//! topological order, since operands always precede results) and accumulates
//! adjoints. One tape is single-threaded; independent tapes may run in
//! parallel, one per batch shard.

use crate::error::{Error, Result};
use crate::tensor::{self, Mask, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    /// a[m,n] + bias[1,n] broadcast over rows.
    AddRowBroadcast(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var, Option<Mask>),
    Sum(Var),
    Reshape(Var),
    /// einsum("mhp,nmd->hpnd", alpha, stacked per-head projections).
    MixHeads { alpha: Var, heads: Var },
    /// einsum("hq,qnd->hnd", r, stacked pseudo outputs).
    CollapseHp { r: Var, stacked: Var },
    SelectAxis0(Var, usize),
    StackAxis0(Vec<Var>),
    SwapAxes01(Var),
    Rotary { x: Var, theta: f64, positions: Vec<usize> },
    GatherRows { table: Var, ids: Vec<usize>, valid: Vec<bool> },
    /// Sum over valid positions of BCE-with-logits; logits and targets [n,1].
    BceWithLogitsSum { logits: Var, targets: Vec<f64>, valid: Vec<bool> },
    /// Sum over valid positions of squared error; predictions [n,1].
    SquaredErrorSum { pred: Var, targets: Vec<f64>, valid: Vec<bool> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients for registered parameters, in registration order.
pub struct Gradients {
    by_slot: Vec<Tensor>,
}

impl Gradients {
    pub fn slot(&self, i: usize) -> &Tensor {
        &self.by_slot[i]
    }

    pub fn len(&self) -> usize {
        self.by_slot.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_slot.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.by_slot.iter()
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for g in &mut self.by_slot {
            *g = g.scale(s);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        for (a, b) in self.by_slot.iter_mut().zip(other.by_slot.iter()) {
            *a = a.add(b)?;
        }
        Ok(())
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    param_slots: Vec<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_slots: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Register a trainable parameter; its gradient appears in `Gradients`.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.param_slots.push(v.0);
        v
    }

    /// A value that participates in the graph but receives no gradient slot.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn add_row_broadcast(&mut self, a: Var, bias: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(bias);
        if av.shape().len() != 2 || bv.shape() != [1, av.cols()] {
            return Err(Error::shape("add_row_broadcast", av.shape(), bv.shape()));
        }
        let (m, n) = (av.rows(), av.cols());
        let value = Tensor::from_fn(&[m, n], |ix| av.at(ix) + bv.at(&[0, ix[1]]));
        Ok(self.push(value, Op::AddRowBroadcast(a, bias)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().map(|&v| v.max(0.0)).collect(),
        )
        .expect("same shape");
        self.push(value, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Mask>) -> Result<Var> {
        let value = tensor::softmax_rows(self.value(a), mask)?;
        Ok(self.push(value, Op::SoftmaxRows(a, mask.cloned())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(value, Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Pseudo-head mixing: alpha [H,H,P] against stacked projections [N,H,d],
    /// producing [H,P,N,d].
    pub fn mix_heads(&mut self, alpha: Var, heads: Var) -> Result<Var> {
        let value = tensor::contract("mhp,nmd->hpnd", &[self.value(alpha), self.value(heads)])?;
        Ok(self.push(value, Op::MixHeads { alpha, heads }))
    }

    /// Collapse [Q=H*P, N, d] pseudo outputs with r [H, Q] into [H, N, d].
    pub fn collapse_hp(&mut self, r: Var, stacked: Var) -> Result<Var> {
        let value = tensor::contract("hq,qnd->hnd", &[self.value(r), self.value(stacked)])?;
        Ok(self.push(value, Op::CollapseHp { r, stacked }))
    }

    pub fn select_axis0(&mut self, a: Var, index: usize) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() < 2 || index >= av.shape()[0] {
            return Err(Error::InvalidShape {
                shape: av.shape().to_vec(),
                reason: format!("select_axis0 index {index} out of range"),
            });
        }
        let inner: usize = av.shape()[1..].iter().product();
        let value = Tensor::new(
            av.shape()[1..].to_vec(),
            av.data()[index * inner..(index + 1) * inner].to_vec(),
        )?;
        Ok(self.push(value, Op::SelectAxis0(a, index)))
    }

    pub fn stack_axis0(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Other("stack_axis0 of empty list".into()));
        }
        let inner_shape = self.value(parts[0]).shape().to_vec();
        let mut data = Vec::new();
        for &p in parts {
            if self.value(p).shape() != inner_shape.as_slice() {
                return Err(Error::shape("stack_axis0", &inner_shape, self.value(p).shape()));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&inner_shape);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::StackAxis0(parts.to_vec())))
    }

    pub fn swap_axes01(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).swap_axes01()?;
        Ok(self.push(value, Op::SwapAxes01(a)))
    }

    pub fn rotary(&mut self, x: Var, theta: f64, positions: &[usize]) -> Result<Var> {
        let value = crate::attention::rotary_positions(self.value(x), theta, positions)?;
        Ok(self.push(
            value,
            Op::Rotary {
                x,
                theta,
                positions: positions.to_vec(),
            },
        ))
    }

    /// Embedding lookup with zero rows at invalid (padded) positions.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize], valid: &[bool]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 || ids.len() != valid.len() {
            return Err(Error::InvalidShape {
                shape: tv.shape().to_vec(),
                reason: "gather_rows expects a 2-D table and ids/valid of equal length".into(),
            });
        }
        let d = tv.cols();
        let mut data = vec![0.0; ids.len() * d];
        for (i, (&id, &ok)) in ids.iter().zip(valid).enumerate() {
            if ok {
                if id >= tv.rows() {
                    return Err(Error::Other(format!("token id {id} out of vocabulary")));
                }
                data[i * d..(i + 1) * d].copy_from_slice(&tv.data()[id * d..(id + 1) * d]);
            }
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
                valid: valid.to_vec(),
            },
        ))
    }

    /// Numerically stable sum of binary cross-entropy with logits over valid
    /// positions: sum over i of max(z,0) - z*y + ln(1 + exp(-|z|)).
    pub fn bce_with_logits_sum(&mut self, logits: Var, targets: &[f64], valid: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.numel() != targets.len() || targets.len() != valid.len() {
            return Err(Error::shape("bce_with_logits", lv.shape(), &[targets.len()]));
        }
        let mut sum = 0.0;
        for ((&z, &y), &ok) in lv.data().iter().zip(targets).zip(valid) {
            if ok {
                sum += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            }
        }
        let value = Tensor::scalar(sum);
        Ok(self.push(
            value,
            Op::BceWithLogitsSum {
                logits,
                targets: targets.to_vec(),
                valid: valid.to_vec(),
            },
        ))
    }

    pub fn squared_error_sum(&mut self, pred: Var, targets: &[f64], valid: &[bool]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.numel() != targets.len() || targets.len() != valid.len() {
            return Err(Error::shape("squared_error", pv.shape(), &[targets.len()]));
        }
        let mut sum = 0.0;
        for ((&p, &y), &ok) in pv.data().iter().zip(targets).zip(valid) {
            if ok {
                sum += (p - y) * (p - y);
            }
        }
        let value = Tensor::scalar(sum);
        Ok(self.push(
            value,
            Op::SquaredErrorSum {
                pred,
                targets: targets.to_vec(),
                valid: valid.to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar loss. Each node is visited exactly once in
    /// reverse topological order; adjoints of values consumed more than once
    /// accumulate by summation.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);

        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {
                    // Re-store so parameter slots can read it after the sweep.
                    adj[id] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let bt = self.nodes[b.0].value.transpose()?;
                    let at = self.nodes[a.0].value.transpose()?;
                    let da = tensor::matmul(&g, &bt)?;
                    let db = tensor::matmul(&at, &g)?;
                    accumulate(&mut adj, *a, da)?;
                    accumulate(&mut adj, *b, db)?;
                }
                Op::Transpose(a) => {
                    accumulate(&mut adj, *a, g.transpose()?)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone())?;
                    accumulate(&mut adj, *b, g)?;
                }
                Op::AddRowBroadcast(a, bias) => {
                    let (m, n) = (g.rows(), g.cols());
                    let mut db = Tensor::zeros(&[1, n]);
                    for i in 0..m {
                        for j in 0..n {
                            let v = db.at(&[0, j]) + g.at(&[i, j]);
                            db.set(&[0, j], v);
                        }
                    }
                    accumulate(&mut adj, *a, g)?;
                    accumulate(&mut adj, *bias, db)?;
                }
                Op::Scale(a, s) => {
                    accumulate(&mut adj, *a, g.scale(*s))?;
                }
                Op::Relu(a) => {
                    let av = &self.nodes[a.0].value;
                    let da = Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(av.data())
                            .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                            .collect(),
                    )?;
                    accumulate(&mut adj, *a, da)?;
                }
                Op::SoftmaxRows(a, _mask) => {
                    // y ⊙ (g − <g, y>_row); masked entries have y = 0.
                    let y = &self.nodes[id].value;
                    let (m, n) = (y.rows(), y.cols());
                    let mut da = Tensor::zeros(&[m, n]);
                    for i in 0..m {
                        let mut dot = 0.0;
                        for j in 0..n {
                            dot += g.at(&[i, j]) * y.at(&[i, j]);
                        }
                        for j in 0..n {
                            da.set(&[i, j], y.at(&[i, j]) * (g.at(&[i, j]) - dot));
                        }
                    }
                    accumulate(&mut adj, *a, da)?;
                }
                Op::Sum(a) => {
                    let av = &self.nodes[a.0].value;
                    accumulate(&mut adj, *a, Tensor::full(av.shape(), g.data()[0]))?;
                }
                Op::Reshape(a) => {
                    let av = &self.nodes[a.0].value;
                    accumulate(&mut adj, *a, g.reshape(av.shape())?)?;
                }
                Op::MixHeads { alpha, heads } => {
                    let al = &self.nodes[alpha.0].value;
                    let hs = &self.nodes[heads.0].value;
                    let (sm, sh, sp) = (al.shape()[0], al.shape()[1], al.shape()[2]);
                    let (sn, sd) = (hs.shape()[0], hs.shape()[2]);
                    let mut dalpha = Tensor::zeros(&[sm, sh, sp]);
                    let mut dheads = Tensor::zeros(&[sn, sm, sd]);
                    for h in 0..sh {
                        for p in 0..sp {
                            for n in 0..sn {
                                for m in 0..sm {
                                    let mut dot = 0.0;
                                    let a = al.at(&[m, h, p]);
                                    for d in 0..sd {
                                        let gv = g.at(&[h, p, n, d]);
                                        dot += gv * hs.at(&[n, m, d]);
                                        if a != 0.0 {
                                            let cur = dheads.at(&[n, m, d]);
                                            dheads.set(&[n, m, d], cur + a * gv);
                                        }
                                    }
                                    let cur = dalpha.at(&[m, h, p]);
                                    dalpha.set(&[m, h, p], cur + dot);
                                }
                            }
                        }
                    }
                    accumulate(&mut adj, *alpha, dalpha)?;
                    accumulate(&mut adj, *heads, dheads)?;
                }
                Op::CollapseHp { r, stacked } => {
                    let rv = &self.nodes[r.0].value;
                    let sv = &self.nodes[stacked.0].value;
                    let (rh, rq) = (rv.shape()[0], rv.shape()[1]);
                    let (sn, sd) = (sv.shape()[1], sv.shape()[2]);
                    let mut dr = Tensor::zeros(&[rh, rq]);
                    let mut ds = Tensor::zeros(&[rq, sn, sd]);
                    for h in 0..rh {
                        for q in 0..rq {
                            let c = rv.at(&[h, q]);
                            let mut dot = 0.0;
                            for n in 0..sn {
                                for d in 0..sd {
                                    let gv = g.at(&[h, n, d]);
                                    dot += gv * sv.at(&[q, n, d]);
                                    if c != 0.0 {
                                        let cur = ds.at(&[q, n, d]);
                                        ds.set(&[q, n, d], cur + c * gv);
                                    }
                                }
                            }
                            dr.set(&[h, q], dot);
                        }
                    }
                    accumulate(&mut adj, *r, dr)?;
                    accumulate(&mut adj, *stacked, ds)?;
                }
                Op::SelectAxis0(a, index) => {
                    let av = &self.nodes[a.0].value;
                    let inner: usize = av.shape()[1..].iter().product();
                    let mut da = vec![0.0; av.numel()];
                    da[index * inner..(index + 1) * inner].copy_from_slice(g.data());
                    accumulate(&mut adj, *a, Tensor::new(av.shape().to_vec(), da)?)?;
                }
                Op::StackAxis0(parts) => {
                    let inner: usize = g.shape()[1..].iter().product();
                    for (i, &p) in parts.iter().enumerate() {
                        let part = Tensor::new(
                            g.shape()[1..].to_vec(),
                            g.data()[i * inner..(i + 1) * inner].to_vec(),
                        )?;
                        accumulate(&mut adj, p, part)?;
                    }
                }
                Op::SwapAxes01(a) => {
                    accumulate(&mut adj, *a, g.swap_axes01()?)?;
                }
                Op::Rotary { x, theta, positions } => {
                    // The rotation is orthogonal; its transpose rotates by -angle.
                    let neg: Vec<f64> = positions.iter().map(|&p| -(p as f64)).collect();
                    let da = crate::attention::rotary_with_positions(&g, *theta, &neg)?;
                    accumulate(&mut adj, *x, da)?;
                }
                Op::GatherRows { table, ids, valid } => {
                    let tv = &self.nodes[table.0].value;
                    let d = tv.cols();
                    let mut dt = Tensor::zeros(&[tv.rows(), d]);
                    for (i, (&id, &ok)) in ids.iter().zip(valid).enumerate() {
                        if ok {
                            for j in 0..d {
                                let cur = dt.at(&[id, j]);
                                dt.set(&[id, j], cur + g.at(&[i, j]));
                            }
                        }
                    }
                    accumulate(&mut adj, *table, dt)?;
                }
                Op::BceWithLogitsSum { logits, targets, valid } => {
                    let lv = &self.nodes[logits.0].value;
                    let gs = g.data()[0];
                    let data = lv
                        .data()
                        .iter()
                        .zip(targets)
                        .zip(valid)
                        .map(|((&z, &y), &ok)| {
                            if ok {
                                gs * (sigmoid(z) - y)
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(&mut adj, *logits, Tensor::new(lv.shape().to_vec(), data)?)?;
                }
                Op::SquaredErrorSum { pred, targets, valid } => {
                    let pv = &self.nodes[pred.0].value;
                    let gs = g.data()[0];
                    let data = pv
                        .data()
                        .iter()
                        .zip(targets)
                        .zip(valid)
                        .map(|((&p, &y), &ok)| if ok { gs * 2.0 * (p - y) } else { 0.0 })
                        .collect();
                    accumulate(&mut adj, *pred, Tensor::new(pv.shape().to_vec(), data)?)?;
                }
            }
        }

        let by_slot = self
            .param_slots
            .iter()
            .map(|&slot| {
                adj[slot]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[slot].value.shape()))
            })
            .collect();
        Ok(Gradients { by_slot })
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, delta: Tensor) -> Result<()> {
    match &mut adj[v.0] {
        Some(existing) => {
            *existing = existing.add(&delta)?;
        }
        slot @ None => {
            *slot = Some(delta);
        }
    }
    Ok(())
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GradcheckStatus {
    Ran,
    Skipped { reason: String },
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub status: GradcheckStatus,
    pub per_param: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn skipped(reason: impl Into<String>) -> Self {
        GradcheckReport {
            status: GradcheckStatus::Skipped { reason: reason.into() },
            per_param: Vec::new(),
            max_rel_err: 0.0,
            tol: 0.0,
            passed: true,
        }
    }
}

/// Compare tape gradients with central finite differences for every entry of
/// every parameter. The error is |g - fd| / max(|g|, |fd|, 1), so it reads as
/// a relative error for O(1) gradients and an absolute one near zero.
pub fn gradcheck<F>(build: F, params: &[(String, Tensor)], eps: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 1e-8 && eps < 1e-2) {
        return Err(Error::InvalidConfig(format!(
            "gradcheck eps {eps} outside (1e-8, 1e-2)"
        )));
    }

    let run = |values: &[Tensor]| -> Result<(f64, Option<Gradients>, bool)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        let value = tape.value(loss).data()[0];
        Ok((value, Some(tape.backward(loss)?), true))
    };

    let base_values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let (base_loss, grads, _) = run(&base_values)?;
    let grads = grads.expect("gradients present");
    if !base_loss.is_finite() {
        return Err(Error::NonFinite("gradcheck forward loss".into()));
    }

    let forward_only = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut per_param = Vec::with_capacity(params.len());
    let mut overall: f64 = 0.0;
    for (pi, (name, base)) in params.iter().enumerate() {
        let g = grads.slot(pi);
        let mut worst: f64 = 0.0;
        for e in 0..base.numel() {
            let mut plus = base_values.to_vec();
            let mut minus = base_values.to_vec();
            let mut pd = base.data().to_vec();
            pd[e] += eps;
            plus[pi] = Tensor::new(base.shape().to_vec(), pd.clone())?;
            pd[e] = base.data()[e] - eps;
            minus[pi] = Tensor::new(base.shape().to_vec(), pd)?;
            let fp = forward_only(&plus)?;
            let fm = forward_only(&minus)?;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite(format!("finite differences of `{name}`")));
            }
            let fd = (fp - fm) / (2.0 * eps);
            let gv = g.data()[e];
            let err = (gv - fd).abs() / gv.abs().max(fd.abs()).max(1.0);
            worst = worst.max(err);
        }
        overall = overall.max(worst);
        per_param.push(ParamCheck {
            name: name.clone(),
            max_rel_err: worst,
        });
    }

    Ok(GradcheckReport {
        status: GradcheckStatus::Ran,
        per_param,
        max_rel_err: overall,
        tol,
        passed: overall <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn random_tensor(rng: &mut CounterRng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.symmetric())
    }

    #[test]
    fn sum_of_matrix_has_all_ones_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::full(&[2, 2], 3.0));
        let loss = tape.sum(w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.slot(0), &Tensor::full(&[2, 2], 1.0));
    }

    #[test]
    fn softmax_row_sums_are_constant_so_gradient_vanishes() {
        let mut rng = CounterRng::new(2);
        let mut tape = Tape::new();
        let s = tape.param(random_tensor(&mut rng, &[3, 5]));
        let y = tape.softmax_rows(s, None).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.slot(0).max_abs() <= 1e-10);
    }

    #[test]
    fn value_feeding_two_consumers_accumulates_both() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(&[2, 3], 1.5));
        let s1 = tape.sum(x);
        let s2 = tape.sum(x);
        let loss = tape.add(s1, s2).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.slot(0), &Tensor::full(&[2, 3], 2.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2, 2]));
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss(_)));
    }

    #[test]
    fn quadratic_scalar_gradcheck() {
        let params = vec![("w".to_string(), Tensor::new(vec![1, 1], vec![3.0]).unwrap())];
        let report = gradcheck(
            |tape, vars| {
                let sq = tape.matmul(vars[0], vars[0])?;
                Ok(tape.sum(sq))
            },
            &params,
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
        // And the analytic gradient itself is 2w = 6.
        let mut tape = Tape::new();
        let w = tape.param(Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        let sq = tape.matmul(w, w).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert!((grads.slot(0).data()[0] - 6.0).abs() <= 1e-8);
    }

    #[test]
    fn eps_outside_range_rejected() {
        let params = vec![("w".to_string(), Tensor::scalar(1.0))];
        let err = gradcheck(|tape, vars| Ok(tape.sum(vars[0])), &params, 0.5, 1e-4).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    /// Randomized gradcheck across every differentiable op.
    #[test]
    fn per_op_randomized_gradchecks() {
        let mut rng = CounterRng::new(99);

        // matmul + transpose + add + scale + relu chain
        let params = vec![
            ("a".into(), random_tensor(&mut rng, &[3, 4])),
            ("b".into(), random_tensor(&mut rng, &[4, 2])),
            ("c".into(), random_tensor(&mut rng, &[3, 2])),
        ];
        let report = gradcheck(
            |tape, v| {
                let ab = tape.matmul(v[0], v[1])?;
                let sum = tape.add(ab, v[2])?;
                let act = tape.relu(sum);
                let scaled = tape.scale(act, 1.7);
                Ok(tape.sum(scaled))
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "chain: {}", report.max_rel_err);

        // masked softmax
        let mask = Mask::from_fn(3, 4, |i, j| j <= i + 1);
        let params = vec![("s".into(), random_tensor(&mut rng, &[3, 4]))];
        let report = gradcheck(
            |tape, v| {
                let y = tape.softmax_rows(v[0], Some(&mask))?;
                let yy = tape.matmul(y, y)?; // non-constant reduction of softmax rows
                Ok(tape.sum(yy))
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "softmax: {}", report.max_rel_err);

        // mix_heads + select + swap + reshape + collapse
        let (h, p, n, d) = (2, 3, 2, 2);
        let params = vec![
            ("alpha".into(), random_tensor(&mut rng, &[h, h, p])),
            ("heads".into(), random_tensor(&mut rng, &[n, h, d])),
            ("r".into(), random_tensor(&mut rng, &[h, h * p])),
        ];
        let report = gradcheck(
            |tape, v| {
                let mixed = tape.mix_heads(v[0], v[1])?; // [h,p,n,d]
                let flat = tape.reshape(mixed, &[h * p, n, d])?;
                let collapsed = tape.collapse_hp(v[2], flat)?; // [h,n,d]
                let swapped = tape.swap_axes01(collapsed)?;
                let first = tape.select_axis0(swapped, 0)?;
                let sq = tape.matmul(first, first)?; // [h,d]x... shapes: [h,d]? ensure square
                Ok(tape.sum(sq))
            },
            &params,
            1e-5,
            1e-4,
        );
        // The matmul above requires h == d; with h=d=2 it holds.
        let report = report.unwrap();
        assert!(report.passed, "mix/collapse: {}", report.max_rel_err);

        // rotary + add_row_broadcast + gather + bce
        let table = random_tensor(&mut rng, &[5, 4]);
        let wq = random_tensor(&mut rng, &[4, 4]);
        let bias = random_tensor(&mut rng, &[1, 4]);
        let params = vec![
            ("table".into(), table),
            ("wq".into(), wq),
            ("bias".into(), bias),
        ];
        let ids = [0usize, 3, 2, 4];
        let valid = [true, true, false, true];
        let targets = [1.0, 0.0, 0.0, 1.0];
        let positions = [0usize, 1, 2, 3];
        let report = gradcheck(
            |tape, v| {
                let x = tape.gather_rows(v[0], &ids, &valid)?;
                let q = tape.matmul(x, v[1])?;
                let q = tape.add_row_broadcast(q, v[2])?;
                let q = tape.rotary(q, 100.0, &positions)?;
                let qt = tape.transpose(q)?;
                let s = tape.matmul(q, qt)?;
                let w = tape.softmax_rows(s, None)?;
                let first_col = tape.matmul(w, q)?;
                let logits = tape.reshape(first_col, &[16, 1])?;
                let t16: Vec<f64> = (0..16).map(|i| targets[i % 4]).collect();
                let v16: Vec<bool> = (0..16).map(|i| valid[i / 4]).collect();
                tape.bce_with_logits_sum(logits, &t16, &v16)
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "gather/rotary/bce: {}", report.max_rel_err);

        // squared error head
        let params = vec![("p".into(), random_tensor(&mut rng, &[4, 1]))];
        let report = gradcheck(
            |tape, v| tape.squared_error_sum(v[0], &[0.5, -1.0, 2.0, 0.0], &[true, true, true, false]),
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "squared error: {}", report.max_rel_err);
    }

    #[test]
    fn stack_axis0_gradient_splits() {
        let mut rng = CounterRng::new(7);
        let params = vec![
            ("a".into(), random_tensor(&mut rng, &[2, 3])),
            ("b".into(), random_tensor(&mut rng, &[2, 3])),
        ];
        let report = gradcheck(
            |tape, v| {
                let st = tape.stack_axis0(&[v[0], v[1], v[0]])?;
                let flat = tape.reshape(st, &[6, 3])?;
                let ft = tape.transpose(flat)?;
                let sq = tape.matmul(flat, ft)?;
                Ok(tape.sum(sq))
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "stack: {}", report.max_rel_err);
    }
}
