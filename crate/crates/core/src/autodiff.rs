//! Coarse-grained reverse-mode differentiation.
//!
//! Every node holds a dense row-major matrix. Images are `pixels × channels`,
//! per-Gaussian quantities are `gaussians × width`, losses are `1 × 1`.
//! Geometry never enters the tape: compositing is recorded as a fixed
//! linear map given by a [`RenderPlan`].

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mlp::{gemm, sigmoid};
use crate::raster::RenderPlan;

/// Clamp applied to probabilities inside the cross-entropy.
pub const BCE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Caller-chosen handle of a trainable tensor.
pub type ParamId = usize;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Gather(Var, Arc<[usize]>),
    Concat(Vec<Var>),
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Composite(Var, Arc<RenderPlan>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Pin(Var, Arc<[f64]>),
    L1Masked { a: Var, b: Var, mask: Arc<[f64]>, count: f64 },
    MseMasked { a: Var, b: Var, mask: Arc<[f64]>, count: f64 },
    Scl { s: Var, r: Var, mask: Arc<[f64]>, width: usize, count: f64 },
    Bce { p: Var, target: Arc<[f64]> },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Clone, Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// Gradients keyed by parameter handle.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.map.get(&id).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.map.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Mask entry count; an empty mask yields a zero loss rather than 0/0.
fn mask_count(mask: &[f64]) -> f64 {
    mask.iter().filter(|&&m| m != 0.0).count() as f64
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            param: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(value.len(), rows * cols, "constant shape");
        self.push(rows, cols, value, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(value.len(), rows * cols, "parameter shape");
        let v = self.push(rows, cols, value, Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// Selects rows of `x`.
    pub fn gather(&mut self, x: Var, rows: Arc<[usize]>) -> Var {
        let n = self.node(x);
        let c = n.cols;
        let mut value = Vec::with_capacity(rows.len() * c);
        for &r in rows.iter() {
            value.extend_from_slice(&n.value[r * c..(r + 1) * c]);
        }
        let rg = n.requires_grad;
        self.push(rows.len(), c, value, Op::Gather(x, rows), rg)
    }

    /// Column concatenation; single-row parts are broadcast over all rows.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.iter().map(|&p| self.node(p).rows).max().unwrap_or(0);
        let mut cols = 0;
        for &p in parts {
            let n = self.node(p);
            if n.rows != rows && n.rows != 1 {
                return Err(Error::dim("concat rows", rows, n.rows));
            }
            cols += n.cols;
        }
        let mut value = vec![0.0; rows * cols];
        let mut off = 0;
        for &p in parts {
            let n = self.node(p);
            for r in 0..rows {
                let src = if n.rows == 1 { 0 } else { r };
                value[r * cols + off..r * cols + off + n.cols].copy_from_slice(&n.value[src * n.cols..(src + 1) * n.cols]);
            }
            off += n.cols;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(rows, cols, value, Op::Concat(parts.to_vec()), rg))
    }

    /// `x·Wᵀ + b` with `w: out × in` and `b: 1 × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (rows, inputs) = self.shape(x);
        let (outputs, w_in) = self.shape(w);
        if w_in != inputs {
            return Err(Error::dim("linear inputs", w_in, inputs));
        }
        if self.node(b).value.len() != outputs {
            return Err(Error::dim("linear bias", outputs, self.node(b).value.len()));
        }
        let mut value = vec![0.0; rows * outputs];
        for r in 0..rows {
            value[r * outputs..(r + 1) * outputs].copy_from_slice(&self.node(b).value);
        }
        gemm(
            rows,
            inputs,
            outputs,
            &self.node(x).value,
            (inputs as isize, 1),
            &self.node(w).value,
            (1, inputs as isize),
            &mut value,
            1.0,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(rows, outputs, value, Op::Linear { x, w, b }, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let n = self.node(x);
        let value = n.value.iter().map(|&v| f(v)).collect();
        let (rows, cols, rg) = (n.rows, n.cols, n.requires_grad);
        self.push(rows, cols, value, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// `x·scale + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, |v| v * scale + shift, Op::Affine(x, scale))
    }

    /// Splats a per-Gaussian attribute; the background is a fixed constant.
    pub fn composite(&mut self, x: Var, plan: Arc<RenderPlan>, background: &[f64]) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if rows != plan.source_count {
            return Err(Error::dim("composite attribute", plan.source_count, rows));
        }
        let img = plan.composite(&self.node(x).value, cols, background)?;
        let rg = self.rg(x);
        Ok(self.push(plan.pixel_count(), cols, img.into_vec(), Op::Composite(x, plan), rg))
    }

    fn broadcast_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ra != rb {
            return Err(Error::dim(format!("{what} rows"), ra, rb));
        }
        if ca != cb && ca != 1 && cb != 1 {
            return Err(Error::dim(format!("{what} channels"), ca, cb));
        }
        Ok((ra, ca.max(cb)))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (rows, cols) = self.broadcast_shape(a, b, what)?;
        let (na, nb) = (self.node(a), self.node(b));
        let mut value = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let x = na.value[r * na.cols + if na.cols == 1 { 0 } else { c }];
                let y = nb.value[r * nb.cols + if nb.cols == 1 { 0 } else { c }];
                value.push(f(x, y));
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(rows, cols, value, op, rg))
    }

    /// Elementwise sum; a single-channel operand is broadcast across channels.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `x·(1 − m) + m` per row: rows where `m = 1` are pinned to one.
    pub fn pin(&mut self, x: Var, mask: Arc<[f64]>) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if mask.len() != rows {
            return Err(Error::dim("pin mask", rows, mask.len()));
        }
        let n = self.node(x);
        let mut value = n.value.clone();
        for r in 0..rows {
            for v in &mut value[r * cols..(r + 1) * cols] {
                *v = *v * (1.0 - mask[r]) + mask[r];
            }
        }
        let rg = n.requires_grad;
        Ok(self.push(rows, cols, value, Op::Pin(x, mask), rg))
    }

    fn check_pair(&self, a: Var, b: Var, mask: &[f64], what: &str) -> Result<(usize, usize)> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if (ra, ca) != (rb, cb) {
            return Err(Error::Shape(format!("{what}: {ra}x{ca} vs {rb}x{cb}")));
        }
        if mask.len() != ra {
            return Err(Error::dim(format!("{what} mask"), ra, mask.len()));
        }
        Ok((ra, ca))
    }

    /// Mean of `|a − b|` over masked pixels and all channels.
    pub fn l1_masked(&mut self, a: Var, b: Var, mask: Arc<[f64]>) -> Result<Var> {
        let (rows, cols) = self.check_pair(a, b, &mask, "l1")?;
        let count = mask_count(&mask) * cols as f64;
        let (va, vb) = (&self.node(a).value, &self.node(b).value);
        let mut sum = 0.0;
        for r in 0..rows {
            if mask[r] == 0.0 {
                continue;
            }
            for c in 0..cols {
                sum += mask[r] * (va[r * cols + c] - vb[r * cols + c]).abs();
            }
        }
        let value = if count > 0.0 { sum / count } else { 0.0 };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(1, 1, vec![value], Op::L1Masked { a, b, mask, count }, rg))
    }

    /// Mean of `(a − b)²` over masked pixels and all channels.
    pub fn mse_masked(&mut self, a: Var, b: Var, mask: Arc<[f64]>) -> Result<Var> {
        let (rows, cols) = self.check_pair(a, b, &mask, "mse")?;
        let count = mask_count(&mask) * cols as f64;
        let (va, vb) = (&self.node(a).value, &self.node(b).value);
        let mut sum = 0.0;
        for r in 0..rows {
            if mask[r] == 0.0 {
                continue;
            }
            for c in 0..cols {
                let d = va[r * cols + c] - vb[r * cols + c];
                sum += mask[r] * d * d;
            }
        }
        let value = if count > 0.0 { sum / count } else { 0.0 };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(1, 1, vec![value], Op::MseMasked { a, b, mask, count }, rg))
    }

    /// Structural consistency between image-shaped `s` and `r` (`width` columns).
    pub fn scl(&mut self, s: Var, r: Var, mask: Arc<[f64]>, width: usize) -> Result<Var> {
        let (rows, cols) = self.check_pair(s, r, &mask, "scl")?;
        if width == 0 || rows % width != 0 {
            return Err(Error::Shape(format!("scl: {rows} pixels not divisible by width {width}")));
        }
        let (vs, vr) = (&self.node(s).value, &self.node(r).value);
        let (sum, count) = scl_eval(vs, vr, &mask, width, rows / width, cols, None);
        let value = if count > 0.0 { sum / count } else { 0.0 };
        let rg = self.rg(s) || self.rg(r);
        Ok(self.push(1, 1, vec![value], Op::Scl { s, r, mask, width, count }, rg))
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 targets.
    pub fn bce(&mut self, p: Var, target: Arc<[f64]>) -> Result<Var> {
        let n = self.node(p);
        if n.value.len() != target.len() {
            return Err(Error::dim("bce target", n.value.len(), target.len()));
        }
        let count = target.len() as f64;
        let sum: f64 = n
            .value
            .iter()
            .zip(target.iter())
            .map(|(&p, &t)| {
                let q = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(t * q.ln() + (1.0 - t) * (1.0 - q).ln())
            })
            .sum();
        let value = if count > 0.0 { sum / count } else { 0.0 };
        let rg = n.requires_grad;
        Ok(self.push(1, 1, vec![value], Op::Bce { p, target }, rg))
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut value = 0.0;
        for &(v, w) in terms {
            if self.node(v).value.len() != 1 {
                return Err(Error::dim("weighted_sum term", 1, self.node(v).value.len()));
            }
            value += w * self.node(v).value[0];
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(1, 1, vec![value], Op::WeightedSum(terms.to_vec()), rg))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.node(loss);
        if root.value.len() != 1 {
            return Err(Error::dim("loss", 1, root.value.len()));
        }
        if !root.value[0].is_finite() {
            return Err(Error::NonFinite(format!("loss value {}", root.value[0])));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            if let Some(id) = node.param {
                match out.map.get_mut(&id) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        out.map.insert(id, g);
                    }
                }
            }
        }
        Ok(out)
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::Gather(x, idx) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, &r) in idx.iter().enumerate() {
                        for c in 0..cols {
                            gx[r * cols + c] += g[i * cols + c];
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.nodes[p.0].cols;
                    let pr = self.nodes[p.0].rows;
                    if let Some(gp) = self.slot(grads, p) {
                        for r in 0..rows {
                            let dst = if pr == 1 { 0 } else { r };
                            for c in 0..pc {
                                gp[dst * pc + c] += g[r * cols + off + c];
                            }
                        }
                    }
                    off += pc;
                }
            }
            Op::Linear { x, w, b } => {
                let inputs = self.nodes[x.0].cols;
                if let Some(gx) = self.slot(grads, *x) {
                    // dx = dy · W
                    gemm(rows, cols, inputs, g, (cols as isize, 1), &self.nodes[w.0].value, (inputs as isize, 1), gx, 1.0);
                }
                let xv = &self.nodes[x.0].value;
                if let Some(gw) = self.slot(grads, *w) {
                    // dW = dyᵀ · x
                    gemm(cols, rows, inputs, g, (1, cols as isize), xv, (inputs as isize, 1), gw, 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] += g[r * cols + c];
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = &self.nodes[x.0].value;
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        let y = node.value[i];
                        gx[i] += g[i] * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        let y = node.value[i];
                        gx[i] += g[i] * (1.0 - y * y);
                    }
                }
            }
            Op::Affine(x, scale) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * scale;
                    }
                }
            }
            Op::Composite(x, plan) => {
                if let Some(gx) = self.slot(grads, *x) {
                    plan.composite_backward(g, cols, gx);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sb = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0), (*b, sb)] {
                    let vc = self.nodes[v.0].cols;
                    if let Some(gv) = self.slot(grads, v) {
                        for r in 0..rows {
                            for c in 0..cols {
                                let dst = r * vc + if vc == 1 { 0 } else { c };
                                gv[dst] += s * g[r * cols + c];
                            }
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, o) in [(*a, *b), (*b, *a)] {
                    let vc = self.nodes[v.0].cols;
                    let oc = self.nodes[o.0].cols;
                    let ov = &self.nodes[o.0].value;
                    if let Some(gv) = self.slot(grads, v) {
                        for r in 0..rows {
                            for c in 0..cols {
                                let dst = r * vc + if vc == 1 { 0 } else { c };
                                let other = ov[r * oc + if oc == 1 { 0 } else { c }];
                                gv[dst] += other * g[r * cols + c];
                            }
                        }
                    }
                }
            }
            Op::Pin(x, mask) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..rows {
                        let k = 1.0 - mask[r];
                        for c in 0..cols {
                            gx[r * cols + c] += g[r * cols + c] * k;
                        }
                    }
                }
            }
            Op::L1Masked { a, b, mask, count } | Op::MseMasked { a, b, mask, count } => {
                if *count == 0.0 {
                    return;
                }
                let squared = matches!(node.op, Op::MseMasked { .. });
                let (ac, av, bv) = (self.nodes[a.0].cols, &self.nodes[a.0].value, &self.nodes[b.0].value);
                let mut d = vec![0.0; av.len()];
                for r in 0..mask.len() {
                    if mask[r] == 0.0 {
                        continue;
                    }
                    for c in 0..ac {
                        let i = r * ac + c;
                        let diff = av[i] - bv[i];
                        let dd = if squared { 2.0 * diff } else { sign(diff) };
                        d[i] = g[0] * mask[r] * dd / count;
                    }
                }
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(&d).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(&d).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Scl { s, r, mask, width, count } => {
                if *count == 0.0 {
                    return;
                }
                let sc = self.nodes[s.0].cols;
                let npix = self.nodes[s.0].rows;
                let mut d = vec![0.0; npix * sc];
                scl_eval(
                    &self.nodes[s.0].value,
                    &self.nodes[r.0].value,
                    mask,
                    *width,
                    npix / width,
                    sc,
                    Some((&mut d, g[0] / count)),
                );
                if let Some(gs) = self.slot(grads, *s) {
                    gs.iter_mut().zip(&d).for_each(|(x, y)| *x += y);
                }
                if let Some(gr) = self.slot(grads, *r) {
                    gr.iter_mut().zip(&d).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Bce { p, target } => {
                let pv = &self.nodes[p.0].value;
                let n = target.len() as f64;
                if let Some(gp) = self.slot(grads, *p) {
                    for i in 0..pv.len() {
                        let q = pv[i];
                        if q < BCE_EPS || q > 1.0 - BCE_EPS {
                            continue;
                        }
                        let t = target[i];
                        gp[i] += g[0] * (-(t / q) + (1.0 - t) / (1.0 - q)) / n;
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if let Some(gv) = self.slot(grads, v) {
                        gv[0] += w * g[0];
                    }
                }
            }
        }
    }
}

/// Sum and count of `|∇s − ∇r|` over forward differences whose both
/// endpoints lie in the mask. With `grad`, also accumulates `∂/∂s` scaled by
/// the given factor (the gradient with respect to `r` is its negation).
pub(crate) fn scl_eval(
    s: &[f64],
    r: &[f64],
    mask: &[f64],
    width: usize,
    height: usize,
    channels: usize,
    mut grad: Option<(&mut [f64], f64)>,
) -> (f64, f64) {
    let mut sum = 0.0;
    let mut count = 0.0;
    let mut visit = |p: usize, q: usize, grad: &mut Option<(&mut [f64], f64)>| {
        for c in 0..channels {
            let (i, j) = (p * channels + c, q * channels + c);
            let diff = (s[j] - s[i]) - (r[j] - r[i]);
            sum += diff.abs();
            count += 1.0;
            if let Some((d, k)) = grad.as_mut() {
                let sg = sign(diff) * *k;
                d[j] += sg;
                d[i] -= sg;
            }
        }
    };
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            if mask[p] == 0.0 {
                continue;
            }
            if x + 1 < width && mask[p + 1] != 0.0 {
                visit(p, p + 1, &mut grad);
            }
            if y + 1 < height && mask[p + width] != 0.0 {
                visit(p, p + width, &mut grad);
            }
        }
    }
    (sum, count)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) {
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
            assert!(err < 1e-5, "component {i}: fd {fd} vs analytic {}", analytic[i]);
        }
    }

    fn mlp_loss(tape: &mut Tape, x: &[f64], w: &[f64], b: &[f64]) -> Var {
        let xv = tape.param(0, 2, 3, x.to_vec());
        let wv = tape.param(1, 2, 3, w.to_vec());
        let bv = tape.param(2, 1, 2, b.to_vec());
        let h = tape.linear(xv, wv, bv).unwrap();
        let s = tape.sigmoid(h);
        let t = tape.tanh(s);
        let target = tape.constant(2, 2, vec![0.1, 0.2, 0.3, 0.4]);
        tape.mse_masked(t, target, Arc::from(vec![1.0, 1.0])).unwrap()
    }

    #[test]
    fn linear_chain_matches_finite_differences() {
        let x = [0.3, -0.2, 0.5, 0.1, 0.7, -0.4];
        let w = [0.2, -0.5, 0.3, 0.9, 0.1, -0.3];
        let b = [0.05, -0.1];
        let mut tape = Tape::new();
        let loss = mlp_loss(&mut tape, &x, &w, &b);
        let g = tape.backward(loss).unwrap();
        let eval = |x: &[f64], w: &[f64], b: &[f64]| {
            let mut t = Tape::new();
            let l = mlp_loss(&mut t, x, w, b);
            t.scalar(l)
        };
        fd_check(|v| eval(v, &w, &b), &x, g.get(0).unwrap());
        fd_check(|v| eval(&x, v, &b), &w, g.get(1).unwrap());
        fd_check(|v| eval(&x, &w, v), &b, g.get(2).unwrap());
    }

    #[test]
    fn concat_broadcast_and_gather_gradients() {
        let f = |a: &[f64], e: &[f64]| {
            let mut t = Tape::new();
            let av = t.param(0, 3, 2, a.to_vec());
            let ev = t.param(1, 1, 2, e.to_vec());
            let g = t.gather(av, Arc::from(vec![2usize, 0, 2]));
            let c = t.concat(&[g, ev]).unwrap();
            let sq = t.mul(c, c).unwrap();
            let z = t.constant(3, 4, vec![0.0; 12]);
            let l = t.l1_masked(sq, z, Arc::from(vec![1.0, 0.0, 1.0])).unwrap();
            let grads = t.backward(l).unwrap();
            (t.scalar(l), grads)
        };
        let a = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let e = [0.7, -0.8];
        let (_, g) = f(&a, &e);
        fd_check(|v| f(v, &e).0, &a, g.get(0).unwrap());
        fd_check(|v| f(&a, v).0, &e, g.get(1).unwrap());
    }

    #[test]
    fn broadcast_mul_add_pin_gradients() {
        let f = |v: &[f64], s: &[f64]| {
            let mut t = Tape::new();
            let vv = t.param(0, 2, 1, v.to_vec());
            let sv = t.param(1, 2, 3, s.to_vec());
            let m = t.mul(vv, sv).unwrap();
            let a = t.add(m, vv).unwrap();
            let d = t.sub(a, sv).unwrap();
            let p = t.pin(d, Arc::from(vec![0.0, 0.3])).unwrap();
            let q = t.affine(p, 0.5, 0.5);
            let z = t.constant(2, 3, vec![0.1; 6]);
            let l = t.mse_masked(q, z, Arc::from(vec![1.0, 1.0])).unwrap();
            let grads = t.backward(l).unwrap();
            (t.scalar(l), grads)
        };
        let v = [0.4, 0.9];
        let s = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let (_, g) = f(&v, &s);
        fd_check(|x| f(x, &s).0, &v, g.get(0).unwrap());
        fd_check(|x| f(&v, x).0, &s, g.get(1).unwrap());
    }

    #[test]
    fn bce_of_half_is_ln2() {
        let mut t = Tape::new();
        let p = t.constant(4, 1, vec![0.5; 4]);
        let l = t.bce(p, Arc::from(vec![1.0, 0.0, 1.0, 0.0])).unwrap();
        assert!((t.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn constants_receive_no_gradient_and_unused_params_are_absent() {
        let mut t = Tape::new();
        let a = t.param(0, 1, 1, vec![2.0]);
        let _unused = t.param(1, 1, 1, vec![3.0]);
        let c = t.constant(1, 1, vec![5.0]);
        let m = t.mul(a, c).unwrap();
        let l = t.weighted_sum(&[(m, 1.0)]).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(0), Some(&[5.0][..]));
        assert!(g.get(1).is_none());
    }

    #[test]
    fn l1_subgradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let a = t.param(0, 2, 1, vec![0.5, 0.5]);
        let b = t.constant(2, 1, vec![0.5, 0.5]);
        let l = t.l1_masked(a, b, Arc::from(vec![1.0, 1.0])).unwrap();
        assert_eq!(t.backward(l).unwrap().get(0), Some(&[0.0, 0.0][..]));
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let mut t = Tape::new();
        let a = t.param(0, 1, 1, vec![f64::NAN]);
        let l = t.weighted_sum(&[(a, 1.0)]).unwrap();
        assert!(matches!(t.backward(l), Err(Error::NonFinite(_))));
    }

    #[test]
    fn scl_gradient_matches_finite_differences() {
        let mask: Arc<[f64]> = Arc::from(vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0]);
        let f = |s: &[f64]| {
            let mut t = Tape::new();
            let sv = t.param(0, 6, 1, s.to_vec());
            let rv = t.constant(6, 1, vec![0.0, 0.5, 0.2, 0.9, 0.1, 0.4]);
            let l = t.scl(sv, rv, mask.clone(), 3).unwrap();
            let g = t.backward(l).unwrap();
            (t.scalar(l), g)
        };
        let s = [0.3, 0.1, 0.7, 0.25, 0.6, 0.05];
        let (_, g) = f(&s);
        fd_check(|x| f(x).0, &s, g.get(0).unwrap());
    }
}
