//! Reverse-mode automatic differentiation over a recording tape.
//!
//! Ops append value nodes to the [`Tape`]; each recorded node stores a
//! backward closure that routes the incoming gradient to its parents.
//! `backward` walks nodes in reverse creation order (a valid reverse
//! topological order, since parents always precede children) and
//! accumulates gradients into the leaves marked `requires_grad`. Leaf
//! gradients persist across `backward` calls until [`Tape::clear_grads`].
//!
//! Tensors are f32; reductions accumulate in f64.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(&self) -> usize {
        self.0
    }
}

struct Node {
    op: &'static str,
    back: Box<dyn Fn(&[Tensor], &Tensor, &mut GradSink)>,
}

/// Accumulator for parent gradients during a backward sweep.
pub struct GradSink<'a> {
    values: &'a [Tensor],
    requires: &'a [bool],
    bufs: &'a mut [Option<Tensor>],
}

impl GradSink<'_> {
    /// Run `f` over the gradient buffer of `parent`, allocating a zeroed
    /// buffer on first touch. No-op when the parent does not need grad.
    pub fn accum(&mut self, parent: usize, f: impl FnOnce(&mut [f32])) {
        if !self.requires[parent] {
            return;
        }
        let shape = self.values[parent].shape().to_vec();
        let buf = self.bufs[parent].get_or_insert_with(|| Tensor::zeros(shape));
        f(buf.data_mut());
    }
}

#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    nodes: Vec<Option<Node>>,
    requires: Vec<bool>,
    grads: Vec<Option<Tensor>>,
    recording: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            nodes: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
            recording: true,
        }
    }

    /// When recording is off, ops still compute values but register no
    /// backward nodes, so the tape is a cheap evaluator.
    pub fn set_recording(&mut self, on: bool) {
        self.recording = on;
    }

    pub fn recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Accumulated gradient of a leaf; `None` before the first backward
    /// pass that reaches it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn clear_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.values.push(t);
        self.nodes.push(None);
        self.requires.push(requires_grad && self.recording);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf_from(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.leaf(t.clone(), requires_grad)
    }

    fn next_id(&self) -> usize {
        self.values.len()
    }

    fn push_node(
        &mut self,
        out: Tensor,
        parents: &[usize],
        op: &'static str,
        back: impl Fn(&[Tensor], &Tensor, &mut GradSink) + 'static,
    ) -> Var {
        let needs = self.recording && parents.iter().any(|&p| self.requires[p]);
        self.values.push(out);
        self.requires.push(needs);
        self.grads.push(None);
        if needs {
            self.nodes.push(Some(Node { op, back: Box::new(back) }));
        } else {
            self.nodes.push(None);
        }
        Var(self.values.len() - 1)
    }

    fn check_same_shape(&self, a: Var, b: Var, context: &'static str) -> Result<()> {
        if self.values[a.0].same_shape(&self.values[b.0]) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                context,
                expected: self.values[a.0].shape().to_vec(),
                got: self.values[b.0].shape().to_vec(),
            })
        }
    }

    /// Backpropagate from a scalar loss. Leaf gradients accumulate; call
    /// [`Tape::clear_grads`] between optimization steps.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.values[loss.0].is_scalar() {
            return Err(Error::NonScalarLoss(self.values[loss.0].shape().to_vec()));
        }
        if !self.requires[loss.0] {
            return Err(Error::invalid(
                "loss does not depend on any requires_grad leaf (or recording was off)",
            ));
        }
        let n = self.values.len();
        let mut bufs: Vec<Option<Tensor>> = Vec::with_capacity(n);
        bufs.resize_with(n, || None);
        bufs[loss.0] = Some(Tensor::scalar(1.0));

        let values: &[Tensor] = &self.values;
        let nodes: &[Option<Node>] = &self.nodes;
        let requires: &[bool] = &self.requires;
        let grads = &mut self.grads;

        for i in (0..=loss.0).rev() {
            let Some(g) = bufs[i].take() else { continue };
            if !g.all_finite() {
                let op = nodes[i].as_ref().map(|n| n.op).unwrap_or("leaf");
                return Err(Error::NonFiniteGrad { op });
            }
            match &nodes[i] {
                Some(node) => {
                    let mut sink = GradSink { values, requires, bufs: &mut bufs };
                    (node.back)(values, &g, &mut sink);
                }
                None => {
                    if requires[i] {
                        match &mut grads[i] {
                            Some(acc) => {
                                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                    *a += b;
                                }
                            }
                            slot => *slot = Some(g),
                        }
                    }
                }
            }
        }
        Ok(())
    }

    // ---- elementwise arithmetic ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "add")?;
        let out = self.values[a.0].add(&self.values[b.0])?;
        let (pa, pb) = (a.0, b.0);
        Ok(self.push_node(out, &[pa, pb], "add", move |_, g, sink| {
            sink.accum(pa, |d| {
                for (x, y) in d.iter_mut().zip(g.data()) {
                    *x += y;
                }
            });
            sink.accum(pb, |d| {
                for (x, y) in d.iter_mut().zip(g.data()) {
                    *x += y;
                }
            });
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "sub")?;
        let out = self.values[a.0].sub(&self.values[b.0])?;
        let (pa, pb) = (a.0, b.0);
        Ok(self.push_node(out, &[pa, pb], "sub", move |_, g, sink| {
            sink.accum(pa, |d| {
                for (x, y) in d.iter_mut().zip(g.data()) {
                    *x += y;
                }
            });
            sink.accum(pb, |d| {
                for (x, y) in d.iter_mut().zip(g.data()) {
                    *x -= y;
                }
            });
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "mul")?;
        let out = self.values[a.0].mul(&self.values[b.0])?;
        let (pa, pb) = (a.0, b.0);
        Ok(self.push_node(out, &[pa, pb], "mul", move |vals, g, sink| {
            sink.accum(pa, |d| {
                for ((x, y), v) in d.iter_mut().zip(g.data()).zip(vals[pb].data()) {
                    *x += y * v;
                }
            });
            sink.accum(pb, |d| {
                for ((x, y), v) in d.iter_mut().zip(g.data()).zip(vals[pa].data()) {
                    *x += y * v;
                }
            });
        }))
    }

    /// `x * mul + add` elementwise, f64 coefficients.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let out = self.values[x.0].affine(mul, add);
        let p = x.0;
        self.push_node(out, &[p], "affine", move |_, g, sink| {
            sink.accum(p, |d| {
                for (x, y) in d.iter_mut().zip(g.data()) {
                    *x += (*y as f64 * mul) as f32;
                }
            });
        })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.values[x.0].map(|v| v * v);
        let p = x.0;
        self.push_node(out, &[p], "square", move |vals, g, sink| {
            sink.accum(p, |d| {
                for ((x, y), v) in d.iter_mut().zip(g.data()).zip(vals[p].data()) {
                    *x += 2.0 * v * y;
                }
            });
        })
    }

    /// Elementwise square root; inputs must be non-negative (and bounded
    /// away from zero wherever gradients are needed).
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.values[x.0].data().iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("sqrt input has negative entries"));
        }
        let out = self.values[x.0].map(f32::sqrt);
        let p = x.0;
        let out_id = self.next_id();
        Ok(self.push_node(out, &[p], "sqrt", move |vals, g, sink| {
            sink.accum(p, |d| {
                for ((x, y), s) in d.iter_mut().zip(g.data()).zip(vals[out_id].data()) {
                    *x += y * 0.5 / s;
                }
            });
        }))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.values[x.0].map(f32::exp);
        let p = x.0;
        let out_id = self.next_id();
        self.push_node(out, &[p], "exp", move |vals, g, sink| {
            sink.accum(p, |d| {
                for ((x, y), e) in d.iter_mut().zip(g.data()).zip(vals[out_id].data()) {
                    *x += y * e;
                }
            });
        })
    }

    /// Natural log; inputs must be strictly positive.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.values[x.0].data().iter().any(|&v| v <= 0.0) {
            return Err(Error::invalid("ln input has non-positive entries"));
        }
        let out = self.values[x.0].map(f32::ln);
        let p = x.0;
        Ok(self.push_node(out, &[p], "ln", move |vals, g, sink| {
            sink.accum(p, |d| {
                for ((x, y), v) in d.iter_mut().zip(g.data()).zip(vals[p].data()) {
                    *x += y / v;
                }
            });
        }))
    }

    // ---- activations ----

    /// ReLU with subgradient 0 at the origin.
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.values[x.0].map(|v| v.max(0.0));
        let p = x.0;
        self.push_node(out, &[p], "relu", move |vals, g, sink| {
            sink.accum(p, |d| {
                for ((x, y), v) in d.iter_mut().zip(g.data()).zip(vals[p].data()) {
                    if *v > 0.0 {
                        *x += y;
                    }
                }
            });
        })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.values[x.0].map(|v| v * sigmoid(v));
        let p = x.0;
        self.push_node(out, &[p], "silu", move |vals, g, sink| {
            sink.accum(p, |d| {
                for ((x, y), v) in d.iter_mut().zip(g.data()).zip(vals[p].data()) {
                    let s = sigmoid(*v);
                    *x += y * s * (1.0 + v * (1.0 - s));
                }
            });
        })
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.values[x.0].sum() as f32);
        let p = x.0;
        self.push_node(out, &[p], "sum_all", move |_, g, sink| {
            let gv = g.item();
            sink.accum(p, |d| {
                for x in d.iter_mut() {
                    *x += gv;
                }
            });
        })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.values[x.0].numel();
        let out = Tensor::scalar(self.values[x.0].mean() as f32);
        let p = x.0;
        self.push_node(out, &[p], "mean_all", move |_, g, sink| {
            let gv = g.item() / n as f32;
            sink.accum(p, |d| {
                for x in d.iter_mut() {
                    *x += gv;
                }
            });
        })
    }

    // ---- structure ----

    /// Concatenate two `[C,H,W]` tensors along channels.
    pub fn concat_ch(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, ha, wa) = self.values[a.0].dims3()?;
        let (cb, hb, wb) = self.values[b.0].dims3()?;
        if (ha, wa) != (hb, wb) {
            return Err(Error::ShapeMismatch {
                context: "concat_ch",
                expected: vec![ha, wa],
                got: vec![hb, wb],
            });
        }
        let mut data = Vec::with_capacity((ca + cb) * ha * wa);
        data.extend_from_slice(self.values[a.0].data());
        data.extend_from_slice(self.values[b.0].data());
        let out = Tensor::new(vec![ca + cb, ha, wa], data)?;
        let (pa, pb) = (a.0, b.0);
        let split = ca * ha * wa;
        Ok(self.push_node(out, &[pa, pb], "concat_ch", move |_, g, sink| {
            sink.accum(pa, |d| {
                for (x, y) in d.iter_mut().zip(&g.data()[..split]) {
                    *x += y;
                }
            });
            sink.accum(pb, |d| {
                for (x, y) in d.iter_mut().zip(&g.data()[split..]) {
                    *x += y;
                }
            });
        }))
    }

    /// Channels `[start, start+len)` of a `[C,H,W]` tensor.
    pub fn narrow_ch(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (c, h, w) = self.values[x.0].dims3()?;
        if start + len > c || len == 0 {
            return Err(Error::invalid(format!(
                "narrow_ch range {start}..{} out of {c} channels",
                start + len
            )));
        }
        let plane = h * w;
        let data = self.values[x.0].data()[start * plane..(start + len) * plane].to_vec();
        let out = Tensor::new(vec![len, h, w], data)?;
        let p = x.0;
        Ok(self.push_node(out, &[p], "narrow_ch", move |_, g, sink| {
            sink.accum(p, |d| {
                for (x, y) in d[start * plane..].iter_mut().zip(g.data()) {
                    *x += y;
                }
            });
        }))
    }

    // ---- linear layers ----

    /// `w: [O, I]`, `x: [I]` -> `[O]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (wshape, xshape) = (self.values[w.0].shape(), self.values[x.0].shape());
        let (o, i) = match (wshape, xshape) {
            ([o, i], [ix]) if i == ix => (*o, *i),
            _ => {
                return Err(Error::ShapeMismatch {
                    context: "matvec",
                    expected: wshape.to_vec(),
                    got: xshape.to_vec(),
                })
            }
        };
        let wd = self.values[w.0].data();
        let xd = self.values[x.0].data();
        let mut out = vec![0.0f32; o];
        for r in 0..o {
            let row = &wd[r * i..(r + 1) * i];
            let mut acc = 0.0f64;
            for (a, b) in row.iter().zip(xd) {
                acc += *a as f64 * *b as f64;
            }
            out[r] = acc as f32;
        }
        let out = Tensor::new(vec![o], out)?;
        let (pw, px) = (w.0, x.0);
        Ok(self.push_node(out, &[pw, px], "matvec", move |vals, g, sink| {
            let gd = g.data();
            sink.accum(pw, |d| {
                let xd = vals[px].data();
                for r in 0..o {
                    let gr = gd[r];
                    for (dst, xv) in d[r * i..(r + 1) * i].iter_mut().zip(xd) {
                        *dst += gr * xv;
                    }
                }
            });
            sink.accum(px, |d| {
                let wd = vals[pw].data();
                for r in 0..o {
                    let gr = gd[r];
                    for (dst, wv) in d.iter_mut().zip(&wd[r * i..(r + 1) * i]) {
                        *dst += gr * wv;
                    }
                }
            });
        }))
    }

    // ---- convolution and resampling ----

    /// 2D convolution, stride 1, zero 'same' padding, odd square kernel.
    /// `x: [Ci,H,W]`, `w: [Co,Ci,k,k]`, optional `b: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (ci, h, wd) = self.values[x.0].dims3()?;
        let ws = self.values[w.0].shape().to_vec();
        let (co, k) = match ws[..] {
            [co, wci, kh, kw] if wci == ci && kh == kw && kh % 2 == 1 => (co, kh),
            _ => {
                return Err(Error::ShapeMismatch {
                    context: "conv2d weights",
                    expected: vec![0, ci, 0, 0],
                    got: ws,
                })
            }
        };
        if let Some(bv) = b {
            if self.values[bv.0].shape() != [co] {
                return Err(Error::ShapeMismatch {
                    context: "conv2d bias",
                    expected: vec![co],
                    got: self.values[bv.0].shape().to_vec(),
                });
            }
        }
        let out = conv2d_forward(
            &self.values[x.0],
            &self.values[w.0],
            b.map(|bv| self.values[bv.0].clone()),
            co,
            k,
        )?;
        let (px, pw) = (x.0, w.0);
        let pb = b.map(|v| v.0);
        Ok(self.push_node(out, &[px, pw], "conv2d", move |vals, g, sink| {
            sink.accum(px, |d| conv2d_back_input(d, &vals[pw], g, ci, h, wd, co, k));
            sink.accum(pw, |d| conv2d_back_weight(d, &vals[px], g, ci, h, wd, co, k));
            if let Some(pb) = pb {
                sink.accum(pb, |d| {
                    let plane = h * wd;
                    for c in 0..co {
                        let mut acc = 0.0f64;
                        for v in &g.data()[c * plane..(c + 1) * plane] {
                            acc += *v as f64;
                        }
                        d[c] += acc as f32;
                    }
                });
            }
        }))
    }

    /// Block average pooling by integer factor.
    pub fn avg_pool(&mut self, x: Var, f: usize) -> Result<Var> {
        let (c, h, w) = self.values[x.0].dims3()?;
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::invalid(format!(
                "avg_pool factor {f} must divide {h}x{w}"
            )));
        }
        let (oh, ow) = (h / f, w / f);
        let xv = &self.values[x.0];
        let inv = 1.0 / (f * f) as f64;
        let mut out = vec![0.0f32; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xcol in 0..ow {
                    let mut acc = 0.0f64;
                    for dy in 0..f {
                        let row = xv.row(ch, y * f + dy);
                        for dx in 0..f {
                            acc += row[xcol * f + dx] as f64;
                        }
                    }
                    out[(ch * oh + y) * ow + xcol] = (acc * inv) as f32;
                }
            }
        }
        let out = Tensor::new(vec![c, oh, ow], out)?;
        let p = x.0;
        Ok(self.push_node(out, &[p], "avg_pool", move |_, g, sink| {
            sink.accum(p, |d| {
                let gd = g.data();
                let scale = (inv) as f32;
                for ch in 0..c {
                    for y in 0..oh {
                        for xcol in 0..ow {
                            let gv = gd[(ch * oh + y) * ow + xcol] * scale;
                            for dy in 0..f {
                                let base = (ch * h + y * f + dy) * w + xcol * f;
                                for dx in 0..f {
                                    d[base + dx] += gv;
                                }
                            }
                        }
                    }
                }
            });
        }))
    }

    /// Nearest-neighbor upsampling by integer factor.
    pub fn upsample_nearest(&mut self, x: Var, f: usize) -> Result<Var> {
        if f == 0 {
            return Err(Error::invalid("upsample factor must be positive"));
        }
        let (c, h, w) = self.values[x.0].dims3()?;
        let (oh, ow) = (h * f, w * f);
        let xv = &self.values[x.0];
        let mut out = vec![0.0f32; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                let src = xv.row(ch, y / f);
                let dst = &mut out[(ch * oh + y) * ow..(ch * oh + y + 1) * ow];
                for xcol in 0..ow {
                    dst[xcol] = src[xcol / f];
                }
            }
        }
        let out = Tensor::new(vec![c, oh, ow], out)?;
        let p = x.0;
        Ok(self.push_node(out, &[p], "upsample_nearest", move |_, g, sink| {
            sink.accum(p, |d| {
                let gd = g.data();
                for ch in 0..c {
                    for y in 0..oh {
                        let grow = &gd[(ch * oh + y) * ow..(ch * oh + y + 1) * ow];
                        let base = (ch * h + y / f) * w;
                        for xcol in 0..ow {
                            d[base + xcol / f] += grow[xcol];
                        }
                    }
                }
            });
        }))
    }

    /// Per-channel bias add over spatial dims: `x: [C,H,W]`, `v: [C]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (c, h, w) = self.values[x.0].dims3()?;
        if self.values[v.0].shape() != [c] {
            return Err(Error::ShapeMismatch {
                context: "add_channel",
                expected: vec![c],
                got: self.values[v.0].shape().to_vec(),
            });
        }
        let plane = h * w;
        let mut out = self.values[x.0].clone();
        for ch in 0..c {
            let bias = self.values[v.0].data()[ch];
            for e in &mut out.data_mut()[ch * plane..(ch + 1) * plane] {
                *e += bias;
            }
        }
        let (px, pv) = (x.0, v.0);
        Ok(self.push_node(out, &[px, pv], "add_channel", move |_, g, sink| {
            sink.accum(px, |d| {
                for (x, y) in d.iter_mut().zip(g.data()) {
                    *x += y;
                }
            });
            sink.accum(pv, |d| {
                for ch in 0..c {
                    let mut acc = 0.0f64;
                    for v in &g.data()[ch * plane..(ch + 1) * plane] {
                        acc += *v as f64;
                    }
                    d[ch] += acc as f32;
                }
            });
        }))
    }

    // ---- normalization ----

    /// GroupNorm over `[C,H,W]` with per-channel scale `gamma` and shift
    /// `beta`. Population statistics per group, epsilon 1e-5.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (c, h, w) = self.values[x.0].dims3()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::invalid(format!(
                "group_norm: {groups} groups must divide {c} channels"
            )));
        }
        for (v, name) in [(gamma, "gamma"), (beta, "beta")] {
            if self.values[v.0].shape() != [c] {
                return Err(Error::ShapeMismatch {
                    context: if name == "gamma" { "group_norm gamma" } else { "group_norm beta" },
                    expected: vec![c],
                    got: self.values[v.0].shape().to_vec(),
                });
            }
        }
        let cg = c / groups;
        let plane = h * w;
        let gsize = cg * plane;
        let xd = self.values[x.0].data();
        let gam = self.values[gamma.0].data();
        let bet = self.values[beta.0].data();
        let mut out = vec![0.0f32; c * plane];
        let mut mu = vec![0.0f64; groups];
        let mut inv_n = vec![0.0f64; groups];
        for grp in 0..groups {
            let s = grp * gsize;
            let slice = &xd[s..s + gsize];
            let mean = slice.iter().map(|&v| v as f64).sum::<f64>() / gsize as f64;
            let var = slice
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
                / gsize as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            mu[grp] = mean;
            inv_n[grp] = inv;
            for lc in 0..cg {
                let ch = grp * cg + lc;
                let (gm, bt) = (gam[ch] as f64, bet[ch] as f64);
                for j in 0..plane {
                    let xhat = (xd[ch * plane + j] as f64 - mean) * inv;
                    out[ch * plane + j] = (gm * xhat + bt) as f32;
                }
            }
        }
        let out = Tensor::new(vec![c, h, w], out)?;
        let (px, pg, pb) = (x.0, gamma.0, beta.0);
        Ok(self.push_node(out, &[px, pg, pb], "group_norm", move |vals, g, sink| {
            let xd = vals[px].data();
            let gam = vals[pg].data();
            let gd = g.data();
            sink.accum(pg, |d| {
                for ch in 0..c {
                    let grp = ch / cg;
                    let mut acc = 0.0f64;
                    for j in 0..plane {
                        let xhat = (xd[ch * plane + j] as f64 - mu[grp]) * inv_n[grp];
                        acc += gd[ch * plane + j] as f64 * xhat;
                    }
                    d[ch] += acc as f32;
                }
            });
            sink.accum(pb, |d| {
                for ch in 0..c {
                    let mut acc = 0.0f64;
                    for j in 0..plane {
                        acc += gd[ch * plane + j] as f64;
                    }
                    d[ch] += acc as f32;
                }
            });
            sink.accum(px, |d| {
                for grp in 0..groups {
                    let (mean, inv) = (mu[grp], inv_n[grp]);
                    let mut sum_gh = 0.0f64;
                    let mut sum_ghx = 0.0f64;
                    for lc in 0..cg {
                        let ch = grp * cg + lc;
                        let gm = gam[ch] as f64;
                        for j in 0..plane {
                            let gh = gd[ch * plane + j] as f64 * gm;
                            let xhat = (xd[ch * plane + j] as f64 - mean) * inv;
                            sum_gh += gh;
                            sum_ghx += gh * xhat;
                        }
                    }
                    let m = gsize as f64;
                    let (mean_gh, mean_ghx) = (sum_gh / m, sum_ghx / m);
                    for lc in 0..cg {
                        let ch = grp * cg + lc;
                        let gm = gam[ch] as f64;
                        for j in 0..plane {
                            let gh = gd[ch * plane + j] as f64 * gm;
                            let xhat = (xd[ch * plane + j] as f64 - mean) * inv;
                            d[ch * plane + j] +=
                                ((gh - mean_gh - xhat * mean_ghx) * inv) as f32;
                        }
                    }
                }
            });
        }))
    }

    /// Unit-normalize the channel vector at each spatial position:
    /// `y[c,p] = x[c,p] / sqrt(sum_c x[c,p]^2 + eps)`.
    pub fn channel_l2norm(&mut self, x: Var, eps: f32) -> Result<Var> {
        let (c, h, w) = self.values[x.0].dims3()?;
        let plane = h * w;
        let xd = self.values[x.0].data();
        let mut inv_norm = vec![0.0f32; plane];
        for j in 0..plane {
            let mut s = 0.0f64;
            for ch in 0..c {
                let v = xd[ch * plane + j] as f64;
                s += v * v;
            }
            inv_norm[j] = (1.0 / (s + eps as f64).sqrt()) as f32;
        }
        let mut out = vec![0.0f32; c * plane];
        for ch in 0..c {
            for j in 0..plane {
                out[ch * plane + j] = xd[ch * plane + j] * inv_norm[j];
            }
        }
        let out = Tensor::new(vec![c, h, w], out)?;
        let p = x.0;
        let out_id = self.next_id();
        Ok(self.push_node(out, &[p], "channel_l2norm", move |vals, g, sink| {
            let yd = vals[out_id].data();
            let gd = g.data();
            sink.accum(p, |d| {
                for j in 0..plane {
                    let mut dot = 0.0f64;
                    for ch in 0..c {
                        dot += gd[ch * plane + j] as f64 * yd[ch * plane + j] as f64;
                    }
                    let inv = inv_norm[j];
                    for ch in 0..c {
                        let idx = ch * plane + j;
                        d[idx] += (gd[idx] as f64 - yd[idx] as f64 * dot) as f32 * inv;
                    }
                }
            });
        }))
    }

    /// Custom unary op: caller supplies the forward output and a closure
    /// mapping the output gradient to the input gradient contribution.
    pub fn custom_unary(
        &mut self,
        x: Var,
        out: Tensor,
        op: &'static str,
        back: impl Fn(&Tensor) -> Tensor + 'static,
    ) -> Var {
        let p = x.0;
        self.push_node(out, &[p], op, move |_, g, sink| {
            let contrib = back(g);
            sink.accum(p, |d| {
                for (x, y) in d.iter_mut().zip(contrib.data()) {
                    *x += y;
                }
            });
        })
    }
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<Tensor>,
    co: usize,
    k: usize,
) -> Result<Tensor> {
    let (ci, h, wd) = x.dims3()?;
    let p = k / 2;
    let plane = h * wd;
    let mut out = vec![0.0f32; co * plane];
    if let Some(b) = &b {
        for c in 0..co {
            out[c * plane..(c + 1) * plane].fill(b.data()[c]);
        }
    }
    let wdat = w.data();
    for oc in 0..co {
        for icn in 0..ci {
            for kh in 0..k {
                let oh_lo = p.saturating_sub(kh);
                let oh_hi = (h + p).saturating_sub(kh).min(h);
                for kw in 0..k {
                    let wv = wdat[((oc * ci + icn) * k + kh) * k + kw];
                    if wv == 0.0 {
                        continue;
                    }
                    let s = kw as isize - p as isize;
                    let lo = (-s).max(0) as usize;
                    let hi = ((wd as isize - s).min(wd as isize)).max(0) as usize;
                    if lo >= hi {
                        continue;
                    }
                    let n = hi - lo;
                    for oh in oh_lo..oh_hi {
                        let ih = oh + kh - p;
                        let src_start = (icn * h + ih) * wd + (lo as isize + s) as usize;
                        let dst_start = (oc * h + oh) * wd + lo;
                        let src = &x.data()[src_start..src_start + n];
                        let dst = &mut out[dst_start..dst_start + n];
                        for j in 0..n {
                            dst[j] += wv * src[j];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![co, h, wd], out)
}

fn conv2d_back_input(
    gx: &mut [f32],
    w: &Tensor,
    g: &Tensor,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    k: usize,
) {
    let p = k / 2;
    let wdat = w.data();
    for oc in 0..co {
        for icn in 0..ci {
            for kh in 0..k {
                let oh_lo = p.saturating_sub(kh);
                let oh_hi = (h + p).saturating_sub(kh).min(h);
                for kw in 0..k {
                    let wv = wdat[((oc * ci + icn) * k + kh) * k + kw];
                    if wv == 0.0 {
                        continue;
                    }
                    let s = kw as isize - p as isize;
                    let lo = (-s).max(0) as usize;
                    let hi = ((wd as isize - s).min(wd as isize)).max(0) as usize;
                    if lo >= hi {
                        continue;
                    }
                    let n = hi - lo;
                    for oh in oh_lo..oh_hi {
                        let ih = oh + kh - p;
                        let src_start = (oc * h + oh) * wd + lo;
                        let dst_start = (icn * h + ih) * wd + (lo as isize + s) as usize;
                        let src = &g.data()[src_start..src_start + n];
                        let dst = &mut gx[dst_start..dst_start + n];
                        for j in 0..n {
                            dst[j] += wv * src[j];
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_back_weight(
    gw: &mut [f32],
    x: &Tensor,
    g: &Tensor,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    k: usize,
) {
    let p = k / 2;
    for oc in 0..co {
        for icn in 0..ci {
            for kh in 0..k {
                let oh_lo = p.saturating_sub(kh);
                let oh_hi = (h + p).saturating_sub(kh).min(h);
                for kw in 0..k {
                    let s = kw as isize - p as isize;
                    let lo = (-s).max(0) as usize;
                    let hi = ((wd as isize - s).min(wd as isize)).max(0) as usize;
                    if lo >= hi {
                        continue;
                    }
                    let n = hi - lo;
                    let mut acc = 0.0f64;
                    for oh in oh_lo..oh_hi {
                        let ih = oh + kh - p;
                        let gs = (oc * h + oh) * wd + lo;
                        let xs = (icn * h + ih) * wd + (lo as isize + s) as usize;
                        let grow = &g.data()[gs..gs + n];
                        let xrow = &x.data()[xs..xs + n];
                        let mut row_acc = 0.0f32;
                        for j in 0..n {
                            row_acc += grow[j] * xrow[j];
                        }
                        acc += row_acc as f64;
                    }
                    gw[((oc * ci + icn) * k + kh) * k + kw] += acc as f32;
                }
            }
        }
    }
}

/// Finite-difference gradient checking used by the test suites.
pub mod fd {
    use super::{Tape, Var};
    use crate::tensor::Tensor;

    /// Relative error with a unit floor, so near-zero gradients are
    /// compared absolutely.
    pub fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1.0)
    }

    fn eval<F>(build: &mut F, inputs: &[Tensor]) -> f64
    where
        F: FnMut(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        tape.set_recording(false);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf_from(t, false)).collect();
        let loss = build(&mut tape, &vars);
        assert!(tape.value(loss).is_scalar(), "fd check needs a scalar loss");
        tape.value(loss).item() as f64
    }

    /// Analytic gradients of `build` w.r.t. every tensor in `inputs`.
    pub fn analytic_grads<F>(build: &mut F, inputs: &[Tensor]) -> Vec<Tensor>
    where
        F: FnMut(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf_from(t, true)).collect();
        let loss = build(&mut tape, &vars);
        tape.backward(loss).expect("backward failed in fd check");
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| {
                tape.grad(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
            })
            .collect()
    }

    /// Fourth-order central finite difference for one element. The wide
    /// stencil tolerates the f32 rounding of the loss at step sizes large
    /// enough to rise above that noise.
    pub fn central_diff<F>(build: &mut F, inputs: &[Tensor], ti: usize, ei: usize, eps: f64) -> f64
    where
        F: FnMut(&mut Tape, &[Var]) -> Var,
    {
        let at = |build: &mut F, delta: f64| {
            let mut shifted = inputs.to_vec();
            shifted[ti].data_mut()[ei] = (shifted[ti].data()[ei] as f64 + delta) as f32;
            eval(build, &shifted)
        };
        let f_p2 = at(build, 2.0 * eps);
        let f_p1 = at(build, eps);
        let f_m1 = at(build, -eps);
        let f_m2 = at(build, -2.0 * eps);
        (-f_p2 + 8.0 * f_p1 - 8.0 * f_m1 + f_m2) / (12.0 * eps)
    }

    /// Max relative error between analytic and finite-difference
    /// gradients over every element of every input.
    pub fn max_rel_err<F>(mut build: F, inputs: &[Tensor], eps: f64) -> f64
    where
        F: FnMut(&mut Tape, &[Var]) -> Var,
    {
        let grads = analytic_grads(&mut build, inputs);
        let mut worst = 0.0f64;
        for (ti, t) in inputs.iter().enumerate() {
            for ei in 0..t.numel() {
                let fdg = central_diff(&mut build, inputs, ti, ei, eps);
                let ag = grads[ti].data()[ei] as f64;
                worst = worst.max(rel_err(ag, fdg));
            }
        }
        worst
    }

    /// Like [`max_rel_err`] but only over the given `(input, element)`
    /// pairs, for use on large parameter tensors.
    pub fn max_rel_err_sampled<F>(
        mut build: F,
        inputs: &[Tensor],
        eps: f64,
        samples: &[(usize, usize)],
    ) -> f64
    where
        F: FnMut(&mut Tape, &[Var]) -> Var,
    {
        let grads = analytic_grads(&mut build, inputs);
        let mut worst = 0.0f64;
        for &(ti, ei) in samples {
            let fdg = central_diff(&mut build, inputs, ti, ei, eps);
            let ag = grads[ti].data()[ei] as f64;
            worst = worst.max(rel_err(ag, fdg));
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn randn(shape: &[usize], idx: u64) -> Tensor {
        Tensor::randn(shape.to_vec(), &mut rng::stream(11, rng::salt::TEST, idx))
    }

    #[test]
    fn quadratic_hand_oracle() {
        // f(x) = sum((2x+1)^2), df/dx = 8x+4.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, -2.0]).unwrap(), true);
        let y = tape.affine(x, 2.0, 1.0);
        let sq = tape.square(y);
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[12.0, -12.0]);
    }

    #[test]
    fn grads_accumulate_until_cleared() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let sq = tape.square(x);
        tape.backward(sq).unwrap();
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 12.0);
        tape.clear_grads();
        assert!(tape.grad(x).is_none());
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(randn(&[4], 0), true);
        let y = tape.square(x);
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn loss_without_grad_leaves_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(2.0));
        let y = tape.square(x);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn relu_subgradient_zero_at_origin() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap(), true);
        let r = tape.relu(x);
        let loss = tape.sum_all(r);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn non_finite_gradient_names_the_op() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(5.0), true);
        let e1 = tape.exp(x);
        let e2 = tape.exp(e1); // exp(148.4) overflows to inf
        let loss = tape.sum_all(e2);
        match tape.backward(loss) {
            Err(Error::NonFiniteGrad { op }) => assert_eq!(op, "exp"),
            other => panic!("expected NonFiniteGrad, got {other:?}"),
        }
    }

    #[test]
    fn inference_mode_records_nothing() {
        let mut tape = Tape::new();
        tape.set_recording(false);
        let x = tape.leaf(randn(&[4], 1), true);
        let y = tape.square(x);
        let loss = tape.sum_all(y);
        assert!(tape.backward(loss).is_err());
    }

    #[test]
    fn elementwise_ops_match_fd() {
        let a = randn(&[2, 3, 3], 2);
        let b = randn(&[2, 3, 3], 3);
        let e = fd::max_rel_err(
            |t, v| {
                let s = t.add(v[0], v[1]).unwrap();
                let m = t.mul(s, v[0]).unwrap();
                let d = t.sub(m, v[1]).unwrap();
                let q = t.square(d);
                t.mean_all(q)
            },
            &[a, b],
            3e-2,
        );
        assert!(e < 1e-4, "rel err {e}");
    }

    #[test]
    fn transcendental_ops_match_fd() {
        let x = randn(&[8], 4).map(|v| v.abs() + 0.5);
        let e = fd::max_rel_err(
            |t, v| {
                let l = t.ln(v[0]).unwrap();
                let s = t.sqrt(v[0]).unwrap();
                let ee = t.exp(l);
                let a = t.add(s, ee).unwrap();
                t.sum_all(a)
            },
            &[x],
            2e-2,
        );
        assert!(e < 1e-4, "rel err {e}");
    }

    #[test]
    fn activations_match_fd() {
        // Keep inputs away from the relu kink where FD is invalid.
        let x = randn(&[12], 5).map(|v| if v.abs() < 0.15 { v + 0.3 } else { v });
        let e = fd::max_rel_err(
            |t, v| {
                let r = t.relu(v[0]);
                let s = t.silu(v[0]);
                let a = t.add(r, s).unwrap();
                let q = t.square(a);
                t.sum_all(q)
            },
            &[x],
            3e-2,
        );
        assert!(e < 1e-4, "rel err {e}");
    }

    #[test]
    fn structure_ops_match_fd() {
        let a = randn(&[2, 4, 4], 6);
        let b = randn(&[3, 4, 4], 7);
        let e = fd::max_rel_err(
            |t, v| {
                let c = t.concat_ch(v[0], v[1]).unwrap();
                let n = t.narrow_ch(c, 1, 3).unwrap();
                let q = t.square(n);
                t.mean_all(q)
            },
            &[a, b],
            3e-2,
        );
        assert!(e < 1e-4, "rel err {e}");
    }

    #[test]
    fn matvec_matches_fd() {
        let w = randn(&[5, 7], 8);
        let x = randn(&[7], 9);
        let e = fd::max_rel_err(
            |t, v| {
                let y = t.matvec(v[0], v[1]).unwrap();
                let q = t.square(y);
                t.sum_all(q)
            },
            &[w, x],
            3e-2,
        );
        assert!(e < 1e-4, "rel err {e}");
    }

    #[test]
    fn conv2d_matches_fd() {
        let x = randn(&[2, 5, 6], 10);
        let w = randn(&[3, 2, 3, 3], 11).affine(0.4, 0.0);
        let b = randn(&[3], 12);
        let e = fd::max_rel_err(
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2])).unwrap();
                let q = t.square(y);
                t.mean_all(q)
            },
            &[x, w, b],
            3e-2,
        );
        assert!(e < 1e-4, "rel err {e}");
    }

    #[test]
    fn conv2d_identity_kernel_preserves_input() {
        let x = randn(&[2, 4, 4], 13);
        let mut w = Tensor::zeros(vec![2, 2, 3, 3]);
        // center tap of the matching in/out channel
        for c in 0..2 {
            let idx = ((c * 2 + c) * 3 + 1) * 3 + 1;
            w.data_mut()[idx] = 1.0;
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w);
        let y = tape.conv2d(xv, wv, None).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn pool_and_upsample_match_fd() {
        let x = randn(&[2, 4, 4], 14);
        let e = fd::max_rel_err(
            |t, v| {
                let d = t.avg_pool(v[0], 2).unwrap();
                let u = t.upsample_nearest(d, 2).unwrap();
                let q = t.square(u);
                t.sum_all(q)
            },
            &[x],
            3e-2,
        );
        assert!(e < 1e-4, "rel err {e}");
    }

    #[test]
    fn avg_pool_rejects_non_divisible() {
        let mut tape = Tape::new();
        let x = tape.constant(randn(&[1, 5, 4], 15));
        assert!(tape.avg_pool(x, 2).is_err());
    }

    #[test]
    fn group_norm_matches_fd() {
        let x = randn(&[4, 3, 3], 16);
        let gamma = randn(&[4], 17).affine(0.3, 1.0);
        let beta = randn(&[4], 18).affine(0.3, 0.0);
        let e = fd::max_rel_err(
            |t, v| {
                let y = t.group_norm(v[0], v[1], v[2], 2).unwrap();
                let s = t.silu(y);
                let q = t.square(s);
                t.sum_all(q)
            },
            &[x, gamma, beta],
            2e-2,
        );
        assert!(e < 2e-4, "rel err {e}");
    }

    #[test]
    fn group_norm_normalizes_each_group() {
        let x = randn(&[4, 5, 5], 19).affine(3.0, 7.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::full(vec![4], 1.0));
        let b = tape.constant(Tensor::zeros(vec![4]));
        let y = tape.group_norm(xv, g, b, 2).unwrap();
        let out = tape.value(y);
        for grp in 0..2 {
            let vals: Vec<f32> = (0..2 * 25)
                .map(|j| out.data()[grp * 2 * 25 + j])
                .collect();
            let t = Tensor::new(vec![50], vals).unwrap();
            assert!(t.mean().abs() < 1e-5);
            assert!((t.variance() - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn add_channel_matches_fd() {
        let x = randn(&[3, 4, 4], 20);
        let v = randn(&[3], 21);
        let e = fd::max_rel_err(
            |t, vars| {
                let y = t.add_channel(vars[0], vars[1]).unwrap();
                let q = t.square(y);
                t.mean_all(q)
            },
            &[x, v],
            3e-2,
        );
        assert!(e < 1e-4, "rel err {e}");
    }

    #[test]
    fn channel_l2norm_matches_fd() {
        let x = randn(&[4, 3, 3], 22);
        let e = fd::max_rel_err(
            |t, v| {
                let y = t.channel_l2norm(v[0], 1e-6).unwrap();
                let q = t.square(y);
                t.sum_all(q)
            },
            &[x],
            2e-2,
        );
        assert!(e < 2e-4, "rel err {e}");
    }

    #[test]
    fn channel_l2norm_produces_unit_vectors() {
        let x = randn(&[5, 2, 2], 23).affine(2.0, 0.5);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = tape.channel_l2norm(xv, 1e-10).unwrap();
        let out = tape.value(y);
        for j in 0..4 {
            let s: f64 = (0..5)
                .map(|c| (out.data()[c * 4 + j] as f64).powi(2))
                .sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn mul_routes_gradients_to_both_factors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.leaf(Tensor::scalar(-4.0), true);
        let z = tape.mul(x, y).unwrap();
        tape.backward(z).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), -4.0);
        assert_eq!(tape.grad(y).unwrap().item(), 3.0);
    }
}
