//! Tape-based reverse-mode differentiation.
//!
//! Every primitive evaluates eagerly and appends a node to the tape, so node
//! indices are a topological order by construction. `backward` walks the tape
//! once in reverse.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm_into, Real, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `[.., k] x [k, n]`, leading axes flattened into rows.
    MatMul { a: NodeId, b: NodeId },
    /// `[B, m, k] x [B, k, n]`, or `[B, n, k]` when `b_t`.
    BatchMatMul { a: NodeId, b: NodeId, b_t: bool },
    Add { a: NodeId, b: NodeId },
    /// `b` matches the trailing axes of `a`.
    AddBroadcast { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, k: f64 },
    Relu { a: NodeId },
    Softmax { a: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, rstd: Vec<f64> },
    Gather { table: NodeId, ids: Vec<usize> },
    Reshape { a: NodeId },
    Permute { a: NodeId, perm: Vec<usize> },
    Conv2dS2 { input: NodeId, kernel: NodeId },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, mask: Vec<bool>, count: usize },
    Sum { a: NodeId },
}

#[derive(Debug, Clone)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Gradients keyed by parameter name.
pub type GradientMap<T> = BTreeMap<String, Tensor<T>>;

/// Ordered record of executed primitives.
#[derive(Debug, Clone, Default)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, NodeId>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient stored on a node by the last `backward` call.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].value.grad()
    }

    pub fn param_node(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> NodeId {
        debug_assert!(value.is_finite(), "non-finite value from {op:?}");
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Registers a named trainable leaf. Registering the same name twice
    /// returns the existing node.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let mut v = value.clone();
        v.clear_grad();
        let id = self.push(v, Op::Leaf, true);
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (&k, lead) = sa
            .split_last()
            .ok_or_else(|| Error::Shape("matmul of empty shape".into()))?;
        if sb.len() != 2 || sb[0] != k {
            return Err(Error::Shape(format!(
                "matmul of {sa:?} and {sb:?}: inner extents differ"
            )));
        }
        let n = sb[1];
        let rows: usize = lead.iter().product();
        let mut out = vec![T::zero(); rows * n];
        gemm_into(rows, k, n, self.value(a).values(), false, self.value(b).values(), false, &mut out, false);
        let mut shape = lead.to_vec();
        shape.push(n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b }, rg))
    }

    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, b_t: bool) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bad = || Error::Shape(format!("batch_matmul of {sa:?} and {sb:?} (b_t={b_t})"));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if b_t { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![T::zero(); bs * m * n];
        let av = self.value(a).values();
        let bv = self.value(b).values();
        for i in 0..bs {
            gemm_into(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * n..(i + 1) * k * n],
                b_t,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![bs, m, n], out)?, Op::BatchMatMul { a, b, b_t }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a).values(), self.value(b).values(), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b }, rg))
    }

    pub fn add_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Shape(format!("cannot broadcast {sb:?} onto {sa:?}")));
        }
        let bv = self.value(b).values();
        let n = bv.len();
        let out: Vec<T> = self
            .value(a)
            .values()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % n])
            .collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBroadcast { a, b }, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a).values(), self.value(b).values(), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let kk = T::from_f64_lossy(k);
        let v = self.value(a);
        let out = Tensor::new(v.shape().to_vec(), v.values().iter().map(|&x| x * kk).collect())
            .expect("shape preserved");
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale { a, k }, rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.values().iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect(),
        )
        .expect("shape preserved");
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu { a }, rg)
    }

    /// Sign pattern of every ReLU input recorded so far, in execution order.
    /// Two evaluations with equal patterns lie on the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { a } => Some(a),
                _ => None,
            })
            .flat_map(|a| self.value(a).values().iter().map(|&x| x > T::zero()))
            .collect()
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let last = v.shape().len() - 1;
        let out = v.softmax(last).expect("last axis is valid");
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax { a }, rg)
    }

    /// Layer normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm over width {d} with gain {:?} and bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xv = self.value(x).values();
        let g = self.value(gain).values();
        let b = self.value(bias).values();
        let rows = xv.len() / d;
        let mut out = vec![T::zero(); xv.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..d {
                let xh = T::from_f64_lossy((row[j].as_f64() - mean) * rs);
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gain, bias, rstd }, rg))
    }

    /// Row lookup: `table [V, d]` indexed by `ids` gives `[ids.len(), d]`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(Error::Shape(format!("gather from non-matrix {st:?}")));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::IdOutOfRange { id: bad, size: v });
        }
        if ids.is_empty() {
            return Err(Error::Empty("gather index list"));
        }
        let tv = self.value(table).values();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(Tensor::new(vec![ids.len(), d], out)?, Op::Gather { table, ids: ids.to_vec() }, rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape { a }, rg))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("invalid permutation {perm:?} for shape {s:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let out = permute_values(self.value(a).values(), &s, perm);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Permute { a, perm: perm.to_vec() }, rg))
    }

    /// Stride-2 3x3 convolution with one cell of zero padding on each side.
    ///
    /// `input [B, T, F, C_in]`, `kernel [3, 3, C_in, C_out]`, output
    /// `[B, ceil(T/2), ceil(F/2), C_out]`. No bias, no activation.
    pub fn conv2d_s2(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        if si.len() != 4 || sk.len() != 4 || sk[0] != 3 || sk[1] != 3 {
            return Err(Error::Shape(format!("conv2d_s2 of input {si:?} with kernel {sk:?}")));
        }
        if si[3] != sk[2] {
            return Err(Error::Shape(format!(
                "conv2d_s2 channel mismatch: input {si:?} has {} channels, kernel {sk:?} expects {}",
                si[3], sk[2]
            )));
        }
        let geo = ConvGeo::new(&si, sk[3]);
        let mut out = vec![T::zero(); geo.out_len()];
        conv_forward(&geo, self.value(input).values(), self.value(kernel).values(), &mut out);
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(
            Tensor::new(vec![geo.b, geo.to, geo.fo, geo.co], out)?,
            Op::Conv2dS2 { input, kernel },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under `logits [n, V]`,
    /// restricted to positions where `mask` is true.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], mask: &[bool]) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || targets.len() != mask.len() {
            return Err(Error::Shape(format!(
                "cross_entropy logits {s:?} with {} targets and {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let v = s[1];
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyBatch);
        }
        let lv = self.value(logits).values();
        let mut total = 0.0f64;
        for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if !m {
                continue;
            }
            if t >= v {
                return Err(Error::IdOutOfRange { id: t, size: v });
            }
            let row = &lv[i * v..(i + 1) * v];
            total -= log_softmax_at(row, t);
        }
        let loss = T::from_f64_lossy(total / count as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), count },
            rg,
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).values().iter().map(|v| v.as_f64()).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(T::from_f64_lossy(s)), Op::Sum { a }, rg)
    }

    fn same_shape(&self, what: &str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Reverse sweep from the scalar `loss`. Gradients are zeroed first and
    /// accumulated additively; every registered parameter gets an entry
    /// (all zeros when unreachable).
    pub fn backward(&mut self, loss: NodeId) -> Result<GradientMap<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for n in &mut self.nodes {
            n.value.clear_grad();
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads)?;
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("backward through node {idx}")));
            }
            self.nodes[idx].value.set_grad(g)?;
        }
        let mut out = GradientMap::new();
        for (name, &id) in &self.params {
            let v = &self.nodes[id.0].value;
            let g = v.grad().map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); v.len()]);
            out.insert(name.clone(), Tensor::new(v.shape().to_vec(), g)?);
        }
        Ok(out)
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let needs = |id: NodeId| nodes[id.0].requires_grad;
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[id.0].requires_grad {
                return;
            }
            let slot = grads[id.0].get_or_insert_with(|| vec![T::zero(); nodes[id.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let rows = g.len() / n;
                let av = self.value(*a).values();
                let bv = self.value(*b).values();
                acc(*a, &mut |ga| gemm_into(rows, n, k, g, false, bv, true, ga, true));
                acc(*b, &mut |gb| gemm_into(k, rows, n, av, true, g, false, gb, true));
            }
            Op::BatchMatMul { a, b, b_t } => {
                let sa = self.shape(*a);
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = g.len() / (bs * m);
                let av = self.value(*a).values();
                let bv = self.value(*b).values();
                acc(*a, &mut |ga| {
                    for i in 0..bs {
                        // dA = dC @ op(B)^T
                        gemm_into(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &bv[i * k * n..(i + 1) * k * n],
                            !*b_t,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            true,
                        );
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..bs {
                        let gs = &g[i * m * n..(i + 1) * m * n];
                        let a_s = &av[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if *b_t {
                            // B is [n, k]: dB = dC^T @ A
                            gemm_into(n, m, k, gs, true, a_s, false, out, true);
                        } else {
                            gemm_into(k, m, n, a_s, true, gs, false, out, true);
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                acc(*a, &mut |ga| add_assign(ga, g));
                acc(*b, &mut |gb| add_assign(gb, g));
            }
            Op::AddBroadcast { a, b } => {
                acc(*a, &mut |ga| add_assign(ga, g));
                acc(*b, &mut |gb| {
                    let n = gb.len();
                    for (i, &x) in g.iter().enumerate() {
                        gb[i % n] = gb[i % n] + x;
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).values();
                let bv = self.value(*b).values();
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * bv[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..g.len() {
                        gb[i] = gb[i] + g[i] * av[i];
                    }
                });
            }
            Op::Scale { a, k } => {
                let kk = T::from_f64_lossy(*k);
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * kk;
                    }
                });
            }
            Op::Relu { a } => {
                let y = node.value.values();
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        if y[i] > T::zero() {
                            ga[i] = ga[i] + g[i];
                        }
                    }
                });
            }
            Op::Softmax { a } => {
                let y = node.value.values();
                let n = *node.value.shape().last().unwrap();
                acc(*a, &mut |ga| {
                    for (r, (yr, gr)) in y.chunks(n).zip(g.chunks(n)).enumerate() {
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for j in 0..n {
                            ga[r * n + j] = ga[r * n + j] + yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, rstd } => {
                let d = self.shape(*gain)[0];
                let xv = self.value(*x).values();
                let gv = self.value(*gain).values();
                let xhat = |r: usize, j: usize| -> f64 {
                    let row = &xv[r * d..(r + 1) * d];
                    let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
                    (row[j].as_f64() - mean) * rstd[r]
                };
                let rows = rstd.len();
                if needs(*gain) || needs(*bias) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            let gy = g[r * d + j];
                            dg[j] = dg[j] + gy * T::from_f64_lossy(xhat(r, j));
                            db[j] = db[j] + gy;
                        }
                    }
                    acc(*gain, &mut |s| add_assign(s, &dg));
                    acc(*bias, &mut |s| add_assign(s, &db));
                }
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        let row = &xv[r * d..(r + 1) * d];
                        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
                        let xh: Vec<f64> = row.iter().map(|v| (v.as_f64() - mean) * rstd[r]).collect();
                        let gxh: Vec<f64> =
                            (0..d).map(|j| g[r * d + j].as_f64() * gv[j].as_f64()).collect();
                        let m1 = gxh.iter().sum::<f64>() / d as f64;
                        let m2 = gxh.iter().zip(&xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            let v = rstd[r] * (gxh[j] - m1 - xh[j] * m2);
                            gx[r * d + j] = gx[r * d + j] + T::from_f64_lossy(v);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = self.shape(*table)[1];
                acc(*table, &mut |gt| {
                    for (row, &i) in ids.iter().enumerate() {
                        add_assign(&mut gt[i * d..(i + 1) * d], &g[row * d..(row + 1) * d]);
                    }
                });
            }
            Op::Reshape { a } => acc(*a, &mut |ga| add_assign(ga, g)),
            Op::Permute { a, perm } => {
                let out_shape = node.value.shape();
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_values(g, out_shape, &inv);
                acc(*a, &mut |ga| add_assign(ga, &back));
            }
            Op::Conv2dS2 { input, kernel } => {
                let si = self.shape(*input);
                let co = self.shape(*kernel)[3];
                let geo = ConvGeo::new(si, co);
                let iv = self.value(*input).values();
                let kv = self.value(*kernel).values();
                acc(*input, &mut |gi| conv_backward_input(&geo, g, kv, gi));
                acc(*kernel, &mut |gk| conv_backward_kernel(&geo, g, iv, gk));
            }
            Op::CrossEntropy { logits, targets, mask, count } => {
                let v = self.shape(*logits)[1];
                let lv = self.value(*logits).values();
                let scale = g[0].as_f64() / *count as f64;
                acc(*logits, &mut |gl| {
                    for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        let row = &lv[i * v..(i + 1) * v];
                        let max = row.iter().fold(f64::NEG_INFINITY, |a, b| a.max(b.as_f64()));
                        let z: f64 = row.iter().map(|x| (x.as_f64() - max).exp()).sum();
                        for j in 0..v {
                            let p = (row[j].as_f64() - max).exp() / z;
                            let d = if j == t { p - 1.0 } else { p };
                            gl[i * v + j] = gl[i * v + j] + T::from_f64_lossy(d * scale);
                        }
                    }
                });
            }
            Op::Sum { a } => {
                let g0 = g[0];
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x = *x + g0));
            }
        }
        Ok(())
    }
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_assign<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn log_softmax_at<T: Real>(row: &[T], t: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, b| a.max(b.as_f64()));
    let z: f64 = row.iter().map(|x| (x.as_f64() - max).exp()).sum();
    row[t].as_f64() - max - z.ln()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_values<T: Real>(values: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(values.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..values.len() {
        out.push(values[offset]);
        // odometer increment over output coordinates
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

struct ConvGeo {
    b: usize,
    t: usize,
    f: usize,
    ci: usize,
    to: usize,
    fo: usize,
    co: usize,
}

impl ConvGeo {
    fn new(input_shape: &[usize], co: usize) -> Self {
        let (b, t, f, ci) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
        Self { b, t, f, ci, to: t.div_ceil(2), fo: f.div_ceil(2), co }
    }

    fn out_len(&self) -> usize {
        self.b * self.to * self.fo * self.co
    }

    /// Calls `visit(in_offset, kernel_offset, out_offset)` for every in-bounds
    /// tap, with offsets pointing at channel 0.
    #[inline]
    fn for_each_tap(&self, mut visit: impl FnMut(usize, usize, usize)) {
        for bi in 0..self.b {
            for ot in 0..self.to {
                for of in 0..self.fo {
                    let out_off = ((bi * self.to + ot) * self.fo + of) * self.co;
                    for dt in 0..3 {
                        let it = (2 * ot + dt) as isize - 1;
                        if it < 0 || it as usize >= self.t {
                            continue;
                        }
                        for df in 0..3 {
                            let iff = (2 * of + df) as isize - 1;
                            if iff < 0 || iff as usize >= self.f {
                                continue;
                            }
                            let in_off = ((bi * self.t + it as usize) * self.f + iff as usize) * self.ci;
                            let k_off = (dt * 3 + df) * self.ci * self.co;
                            visit(in_off, k_off, out_off);
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Real>(geo: &ConvGeo, input: &[T], kernel: &[T], out: &mut [T]) {
    let (ci, co) = (geo.ci, geo.co);
    geo.for_each_tap(|in_off, k_off, out_off| {
        let o = &mut out[out_off..out_off + co];
        for c in 0..ci {
            let x = input[in_off + c];
            let krow = &kernel[k_off + c * co..k_off + (c + 1) * co];
            for (ov, &kv) in o.iter_mut().zip(krow) {
                *ov = *ov + x * kv;
            }
        }
    });
}

fn conv_backward_input<T: Real>(geo: &ConvGeo, g: &[T], kernel: &[T], gi: &mut [T]) {
    let (ci, co) = (geo.ci, geo.co);
    geo.for_each_tap(|in_off, k_off, out_off| {
        let go = &g[out_off..out_off + co];
        for c in 0..ci {
            let krow = &kernel[k_off + c * co..k_off + (c + 1) * co];
            let s: T = go.iter().zip(krow).map(|(&a, &b)| a * b).sum();
            gi[in_off + c] = gi[in_off + c] + s;
        }
    });
}

fn conv_backward_kernel<T: Real>(geo: &ConvGeo, g: &[T], input: &[T], gk: &mut [T]) {
    let (ci, co) = (geo.ci, geo.co);
    geo.for_each_tap(|in_off, k_off, out_off| {
        let go = &g[out_off..out_off + co];
        for c in 0..ci {
            let x = input[in_off + c];
            let krow = &mut gk[k_off + c * co..k_off + (c + 1) * co];
            for (kv, &gv) in krow.iter_mut().zip(go) {
                *kv = *kv + x * gv;
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::new();
        let th = g.param("theta", &t(&[1], &[3.0]));
        let sq = g.mul(th, th).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads["theta"].values(), &[6.0]);
        assert_eq!(g.grad(th).unwrap(), &[6.0]);
    }

    #[test]
    fn constant_loss_zero_grads() {
        let mut g = Graph::<f64>::new();
        let _p = g.param("p", &t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[1], &[5.0]));
        let grads = g.backward(c).unwrap();
        assert_eq!(grads["p"].values(), &[0.0, 0.0]);
    }

    #[test]
    fn unused_param_exact_zero() {
        let mut g = Graph::<f64>::new();
        let a = g.param("a", &t(&[2], &[1.0, -2.0]));
        let _b = g.param("b", &t(&[3], &[1.0, 2.0, 3.0]));
        let l = g.sum(a);
        let grads = g.backward(l).unwrap();
        assert!(grads["b"].values().iter().all(|&v| v == 0.0));
        assert_eq!(grads["a"].values(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let a = g.param("a", &t(&[2], &[1.0, -2.0]));
        assert!(matches!(g.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_twice_does_not_double_count() {
        let mut g = Graph::<f64>::new();
        let a = g.param("a", &t(&[1], &[2.0]));
        let sq = g.mul(a, a).unwrap();
        let l = g.sum(sq);
        let first = g.backward(l).unwrap();
        let second = g.backward(l).unwrap();
        assert_eq!(first["a"].values(), second["a"].values());
    }

    #[test]
    fn cross_entropy_uniform() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(&[3, 4]));
        let ce = g.cross_entropy(l, &[0, 1, 3], &[true, true, true]).unwrap();
        assert!((g.value(ce).values()[0] - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_perfect_prediction() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(t(&[1, 3], &[0.0, 60.0, 0.0]));
        let ce = g.cross_entropy(l, &[1], &[true]).unwrap();
        assert!(g.value(ce).values()[0] < 1e-20);
    }

    #[test]
    fn cross_entropy_mask_truncates() {
        let logits = [0.3, -1.0, 2.0, 1.5, 0.1, -0.4];
        let mut g = Graph::<f64>::new();
        let l = g.constant(t(&[2, 3], &logits));
        // second row predicts class 0 badly, but it is masked out
        let masked = g.cross_entropy(l, &[2, 2], &[true, false]).unwrap();
        let l1 = g.constant(t(&[1, 3], &logits[..3]));
        let trunc = g.cross_entropy(l1, &[2], &[true]).unwrap();
        assert_eq!(g.value(masked).values(), g.value(trunc).values());
        let l2 = g.constant(t(&[2, 3], &logits));
        assert!(matches!(g.cross_entropy(l2, &[0, 0], &[false, false]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn conv_shapes_and_zero_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::filled(&[1, 100, 80, 1], 0.5));
        let k = g.param("k", &Tensor::zeros(&[3, 3, 1, 4]));
        let y = g.conv2d_s2(x, k).unwrap();
        assert_eq!(g.shape(y), &[1, 50, 40, 4]);
        assert!(g.value(y).values().iter().all(|&v| v == 0.0));
        let bad = g.param("bad", &Tensor::zeros(&[3, 3, 2, 4]));
        assert!(matches!(g.conv2d_s2(x, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn permute_roundtrip() {
        let vals: Vec<f64> = (0..24).map(f64::from).collect();
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 3, 4], &vals));
        let p = g.permute(a, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        // element [k, i, j] == a[i, j, k]
        let (i, j, k) = (1, 2, 1);
        assert_eq!(g.value(p).values()[(k * 2 + i) * 3 + j], vals[(i * 3 + j) * 4 + k]);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back).values(), &vals[..]);
    }
}
