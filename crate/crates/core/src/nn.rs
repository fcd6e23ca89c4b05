//! Small UNet backbone shared by the noise predictor and the
//! data-consistency residual network.
//!
//! Structure: 3x3 stem, encoder levels of residual blocks with 2x average
//! pooling between levels, a middle block, then a mirrored decoder using
//! nearest-neighbor upsampling and channel-concatenated skips. Each
//! residual block is GroupNorm -> SiLU -> conv, with a per-channel add of
//! a projected sinusoidal timestep embedding between the two convs. The
//! second conv of every block and the output head start at zero, so a
//! freshly initialized network is the zero map.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub widths: Vec<usize>,
    pub blocks_per_level: usize,
    pub groups: usize,
    pub time_embed_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: 3,
            out_channels: 3,
            widths: vec![32, 64, 128],
            blocks_per_level: 2,
            groups: 8,
            time_embed_dim: 64,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if self.widths.is_empty() {
            return Err(Error::invalid("at least one level width required"));
        }
        if self.blocks_per_level == 0 {
            return Err(Error::invalid("blocks_per_level must be positive"));
        }
        if self.groups == 0 || self.widths.iter().any(|w| w % self.groups != 0) {
            return Err(Error::invalid(format!(
                "groups {} must divide every level width {:?}",
                self.groups, self.widths
            )));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::invalid("time_embed_dim must be even and >= 2"));
        }
        Ok(())
    }

    /// Input spatial size must be divisible by this (one 2x pool per
    /// additional level).
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.widths.len() - 1)
    }
}

#[derive(Clone)]
pub(crate) struct Conv {
    pub w: Tensor,
    pub b: Tensor,
}

impl Conv {
    fn init<R: Rng + ?Sized>(ci: usize, co: usize, k: usize, rng: &mut R) -> Self {
        let std = (2.0 / (ci * k * k) as f64).sqrt();
        Conv {
            w: Tensor::randn(vec![co, ci, k, k], rng).affine(std, 0.0),
            b: Tensor::zeros(vec![co]),
        }
    }

    fn zero(ci: usize, co: usize, k: usize) -> Self {
        Conv { w: Tensor::zeros(vec![co, ci, k, k]), b: Tensor::zeros(vec![co]) }
    }
}

#[derive(Clone)]
pub(crate) struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

impl Dense {
    fn init<R: Rng + ?Sized>(i: usize, o: usize, rng: &mut R) -> Self {
        let std = (2.0 / i as f64).sqrt();
        Dense {
            w: Tensor::randn(vec![o, i], rng).affine(std, 0.0),
            b: Tensor::zeros(vec![o]),
        }
    }
}

#[derive(Clone)]
pub(crate) struct Norm {
    pub g: Tensor,
    pub b: Tensor,
}

impl Norm {
    fn init(c: usize) -> Self {
        Norm { g: Tensor::full(vec![c], 1.0), b: Tensor::zeros(vec![c]) }
    }
}

#[derive(Clone)]
pub(crate) struct ResBlock {
    pub n1: Norm,
    pub c1: Conv,
    pub emb: Dense,
    pub n2: Norm,
    pub c2: Conv,
    pub skip: Option<Conv>,
}

impl ResBlock {
    fn init<R: Rng + ?Sized>(ci: usize, co: usize, ted: usize, rng: &mut R) -> Self {
        ResBlock {
            n1: Norm::init(ci),
            c1: Conv::init(ci, co, 3, rng),
            emb: Dense::init(ted, co, rng),
            n2: Norm::init(co),
            // residual branch closes at zero so the block starts as a
            // (projected) identity
            c2: Conv::zero(co, co, 3),
            skip: if ci != co { Some(Conv::init(ci, co, 1, rng)) } else { None },
        }
    }
}

#[derive(Clone)]
pub struct Backbone {
    cfg: NetConfig,
    stem: Conv,
    enc: Vec<Vec<ResBlock>>,
    mid: ResBlock,
    dec: Vec<Vec<ResBlock>>,
    t1: Dense,
    t2: Dense,
    out_norm: Norm,
    out_conv: Conv,
}

// Bound (tape-resident) mirrors of the parameter structs.
struct BConv {
    w: Var,
    b: Var,
}
struct BDense {
    w: Var,
    b: Var,
}
struct BNorm {
    g: Var,
    b: Var,
}
struct BRes {
    n1: BNorm,
    c1: BConv,
    emb: BDense,
    n2: BNorm,
    c2: BConv,
    skip: Option<BConv>,
}

struct Binder<'t> {
    tape: &'t mut Tape,
    requires: bool,
    order: Vec<Var>,
}

impl Binder<'_> {
    fn leaf(&mut self, t: &Tensor) -> Var {
        let v = self.tape.leaf_from(t, self.requires);
        self.order.push(v);
        v
    }

    fn conv(&mut self, c: &Conv) -> BConv {
        BConv { w: self.leaf(&c.w), b: self.leaf(&c.b) }
    }

    fn dense(&mut self, d: &Dense) -> BDense {
        BDense { w: self.leaf(&d.w), b: self.leaf(&d.b) }
    }

    fn norm(&mut self, n: &Norm) -> BNorm {
        BNorm { g: self.leaf(&n.g), b: self.leaf(&n.b) }
    }

    fn res(&mut self, r: &ResBlock) -> BRes {
        BRes {
            n1: self.norm(&r.n1),
            c1: self.conv(&r.c1),
            emb: self.dense(&r.emb),
            n2: self.norm(&r.n2),
            c2: self.conv(&r.c2),
            skip: r.skip.as_ref().map(|s| self.conv(s)),
        }
    }
}

/// Sinusoidal position embedding of an integer timestep.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0f32; dim];
    for i in 0..half {
        let denom = if half > 1 { (half - 1) as f64 } else { 1.0 };
        let freq = (-(10000.0f64.ln()) * i as f64 / denom).exp();
        let arg = t as f64 * freq;
        data[i] = arg.sin() as f32;
        data[half + i] = arg.cos() as f32;
    }
    Tensor::new(vec![dim], data).expect("static shape")
}

impl Backbone {
    /// Deterministic He-style initialization from a seeded generator.
    pub fn init<R: Rng + ?Sized>(cfg: NetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let ted = cfg.time_embed_dim;
        let levels = cfg.widths.len();
        let stem = Conv::init(cfg.in_channels, cfg.widths[0], 3, rng);
        let mut enc = Vec::with_capacity(levels);
        for li in 0..levels {
            let mut blocks = Vec::with_capacity(cfg.blocks_per_level);
            for bi in 0..cfg.blocks_per_level {
                let ci = if bi == 0 {
                    if li == 0 { cfg.widths[0] } else { cfg.widths[li - 1] }
                } else {
                    cfg.widths[li]
                };
                blocks.push(ResBlock::init(ci, cfg.widths[li], ted, rng));
            }
            enc.push(blocks);
        }
        let bottom = *cfg.widths.last().unwrap();
        let mid = ResBlock::init(bottom, bottom, ted, rng);
        let mut dec = Vec::new();
        for li in (0..levels - 1).rev() {
            let mut blocks = Vec::with_capacity(cfg.blocks_per_level);
            for bi in 0..cfg.blocks_per_level {
                let ci = if bi == 0 {
                    cfg.widths[li + 1] + cfg.widths[li]
                } else {
                    cfg.widths[li]
                };
                blocks.push(ResBlock::init(ci, cfg.widths[li], ted, rng));
            }
            dec.push(blocks);
        }
        let t1 = Dense::init(ted, ted, rng);
        let t2 = Dense::init(ted, ted, rng);
        let out_norm = Norm::init(cfg.widths[0]);
        let out_conv = Conv::zero(cfg.widths[0], cfg.out_channels, 3);
        Ok(Backbone { cfg, stem, enc, mid, dec, t1, t2, out_norm, out_conv })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    /// Run the network on a tape. When `train_params` is set, parameters
    /// are bound as gradient leaves and returned in traversal order
    /// (matching [`Backbone::visit`]).
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        t: usize,
        train_params: bool,
    ) -> Result<(Var, Vec<Var>)> {
        if t == 0 {
            return Err(Error::TimestepRange { t: 0, t_max: usize::MAX });
        }
        let (c, h, w) = tape.value(x).dims3()?;
        if c != self.cfg.in_channels {
            return Err(Error::ShapeMismatch {
                context: "backbone input channels",
                expected: vec![self.cfg.in_channels, h, w],
                got: vec![c, h, w],
            });
        }
        let div = self.cfg.spatial_divisor();
        if h % div != 0 || w % div != 0 || h / div == 0 || w / div == 0 {
            return Err(Error::invalid(format!(
                "input {h}x{w} must be divisible by {div} for {} levels",
                self.cfg.widths.len()
            )));
        }

        let mut binder = Binder { tape, requires: train_params, order: Vec::new() };
        let stem = binder.conv(&self.stem);
        let enc: Vec<Vec<BRes>> = self.enc.iter().map(|l| l.iter().map(|b| binder.res(b)).collect()).collect();
        let mid = binder.res(&self.mid);
        let dec: Vec<Vec<BRes>> = self.dec.iter().map(|l| l.iter().map(|b| binder.res(b)).collect()).collect();
        let t1 = binder.dense(&self.t1);
        let t2 = binder.dense(&self.t2);
        let out_norm = binder.norm(&self.out_norm);
        let out_conv = binder.conv(&self.out_conv);
        let order = binder.order;

        // timestep embedding MLP
        let emb0 = tape.constant(sinusoidal_embedding(t, self.cfg.time_embed_dim));
        let e1 = dense_fwd(tape, &t1, emb0)?;
        let e1 = tape.silu(e1);
        let temb = dense_fwd(tape, &t2, e1)?;
        let temb = tape.silu(temb);

        let groups = self.cfg.groups;
        let levels = self.cfg.widths.len();
        let mut hcur = tape.conv2d(x, stem.w, Some(stem.b))?;
        let mut skips: Vec<Var> = Vec::with_capacity(levels - 1);
        for (li, level) in enc.iter().enumerate() {
            for block in level {
                hcur = res_fwd(tape, block, hcur, temb, groups)?;
            }
            if li < levels - 1 {
                skips.push(hcur);
                hcur = tape.avg_pool(hcur, 2)?;
            }
        }
        hcur = res_fwd(tape, &mid, hcur, temb, groups)?;
        for level in &dec {
            let skip = skips.pop().expect("one skip per decoder level");
            hcur = tape.upsample_nearest(hcur, 2)?;
            hcur = tape.concat_ch(hcur, skip)?;
            for block in level {
                hcur = res_fwd(tape, block, hcur, temb, groups)?;
            }
        }
        let hn = tape.group_norm(hcur, out_norm.g, out_norm.b, groups)?;
        let ha = tape.silu(hn);
        let out = tape.conv2d(ha, out_conv.w, Some(out_conv.b))?;
        Ok((out, order))
    }

    /// Convenience: evaluate without recording anything.
    pub fn infer(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        tape.set_recording(false);
        let xv = tape.leaf_from(x, false);
        let (out, _) = self.forward(&mut tape, xv, t, false)?;
        Ok(tape.value(out).clone())
    }

    /// Visit parameters with stable names, in the same traversal order
    /// the forward pass binds them.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        visit_conv("stem", &self.stem, f);
        for (li, level) in self.enc.iter().enumerate() {
            for (bi, b) in level.iter().enumerate() {
                visit_res(&format!("enc{li}.b{bi}"), b, f);
            }
        }
        visit_res("mid", &self.mid, f);
        for (di, level) in self.dec.iter().enumerate() {
            for (bi, b) in level.iter().enumerate() {
                visit_res(&format!("dec{di}.b{bi}"), b, f);
            }
        }
        visit_dense("t1", &self.t1, f);
        visit_dense("t2", &self.t2, f);
        f("out.norm.g".into(), &self.out_norm.g);
        f("out.norm.b".into(), &self.out_norm.b);
        visit_conv("out.conv", &self.out_conv, f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        visit_conv_mut("stem", &mut self.stem, f);
        for (li, level) in self.enc.iter_mut().enumerate() {
            for (bi, b) in level.iter_mut().enumerate() {
                visit_res_mut(&format!("enc{li}.b{bi}"), b, f);
            }
        }
        visit_res_mut("mid", &mut self.mid, f);
        for (di, level) in self.dec.iter_mut().enumerate() {
            for (bi, b) in level.iter_mut().enumerate() {
                visit_res_mut(&format!("dec{di}.b{bi}"), b, f);
            }
        }
        visit_dense_mut("t1", &mut self.t1, f);
        visit_dense_mut("t2", &mut self.t2, f);
        f("out.norm.g".into(), &mut self.out_norm.g);
        f("out.norm.b".into(), &mut self.out_norm.b);
        visit_conv_mut("out.conv", &mut self.out_conv, f);
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = Vec::new();
        self.visit(&mut |_, t| v.push(t));
        v
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Mutable references in the same traversal order as [`Backbone::visit`]
    /// (field-by-field so the borrows stay disjoint).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = Vec::new();
        v.push(&mut self.stem.w);
        v.push(&mut self.stem.b);
        for level in &mut self.enc {
            for b in level {
                push_res(&mut v, b);
            }
        }
        push_res(&mut v, &mut self.mid);
        for level in &mut self.dec {
            for b in level {
                push_res(&mut v, b);
            }
        }
        v.push(&mut self.t1.w);
        v.push(&mut self.t1.b);
        v.push(&mut self.t2.w);
        v.push(&mut self.t2.b);
        v.push(&mut self.out_norm.g);
        v.push(&mut self.out_norm.b);
        v.push(&mut self.out_conv.w);
        v.push(&mut self.out_conv.b);
        v
    }

    /// Replace all parameters from a traversal-order list (e.g. an EMA
    /// shadow).
    pub fn set_params(&mut self, new: &[Tensor]) -> Result<()> {
        let mut idx = 0usize;
        let mut err = None;
        self.visit_mut(&mut |name, t| {
            if err.is_some() {
                return;
            }
            match new.get(idx) {
                Some(nt) if nt.same_shape(t) => *t = nt.clone(),
                Some(nt) => {
                    err = Some(Error::ShapeMismatch {
                        context: "set_params",
                        expected: t.shape().to_vec(),
                        got: nt.shape().to_vec(),
                    });
                    log::debug!("set_params mismatch at {name}");
                }
                None => err = Some(Error::invalid("set_params: too few tensors")),
            }
            idx += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if idx != new.len() {
            return Err(Error::invalid("set_params: too many tensors"));
        }
        Ok(())
    }

    /// Build from named tensors (checkpoint load); every parameter must
    /// be present with the right shape.
    pub fn from_named(
        cfg: NetConfig,
        mut lookup: impl FnMut(&str) -> Option<Tensor>,
    ) -> Result<Self> {
        let mut rng = crate::rng::stream(0, crate::rng::salt::INIT, 0);
        let mut net = Backbone::init(cfg, &mut rng)?;
        let mut err: Option<Error> = None;
        net.visit_mut(&mut |name, t| {
            if err.is_some() {
                return;
            }
            match lookup(&name) {
                Some(nt) if nt.same_shape(t) => *t = nt,
                Some(nt) => {
                    err = Some(Error::ShapeMismatch {
                        context: "from_named",
                        expected: t.shape().to_vec(),
                        got: nt.shape().to_vec(),
                    })
                }
                None => err = Some(Error::Checkpoint(format!("missing tensor {name}"))),
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(net),
        }
    }

    /// Add noise to every parameter (zero-initialized heads included);
    /// gradient-flow test support.
    pub fn randomize_params<R: Rng + ?Sized>(&mut self, scale: f64, rng: &mut R) {
        self.visit_mut(&mut |_, t| {
            let noise = Tensor::randn(t.shape().to_vec(), rng);
            *t = t.zip(&noise, |a, n| (a as f64 + scale * n as f64) as f32).expect("same shape");
        });
    }
}

fn push_res<'a>(v: &mut Vec<&'a mut Tensor>, r: &'a mut ResBlock) {
    v.push(&mut r.n1.g);
    v.push(&mut r.n1.b);
    v.push(&mut r.c1.w);
    v.push(&mut r.c1.b);
    v.push(&mut r.emb.w);
    v.push(&mut r.emb.b);
    v.push(&mut r.n2.g);
    v.push(&mut r.n2.b);
    v.push(&mut r.c2.w);
    v.push(&mut r.c2.b);
    if let Some(s) = &mut r.skip {
        v.push(&mut s.w);
        v.push(&mut s.b);
    }
}

fn dense_fwd(tape: &mut Tape, d: &BDense, x: Var) -> Result<Var> {
    let y = tape.matvec(d.w, x)?;
    tape.add(y, d.b)
}

fn res_fwd(tape: &mut Tape, r: &BRes, x: Var, temb: Var, groups: usize) -> Result<Var> {
    let h = tape.group_norm(x, r.n1.g, r.n1.b, groups)?;
    let h = tape.silu(h);
    let h = tape.conv2d(h, r.c1.w, Some(r.c1.b))?;
    let e = dense_fwd(tape, &r.emb, temb)?;
    let h = tape.add_channel(h, e)?;
    let h = tape.group_norm(h, r.n2.g, r.n2.b, groups)?;
    let h = tape.silu(h);
    let h = tape.conv2d(h, r.c2.w, Some(r.c2.b))?;
    let sk = match &r.skip {
        Some(s) => tape.conv2d(x, s.w, Some(s.b))?,
        None => x,
    };
    tape.add(sk, h)
}

fn visit_conv<'a>(p: &str, c: &'a Conv, f: &mut dyn FnMut(String, &'a Tensor)) {
    f(format!("{p}.w"), &c.w);
    f(format!("{p}.b"), &c.b);
}

fn visit_dense<'a>(p: &str, d: &'a Dense, f: &mut dyn FnMut(String, &'a Tensor)) {
    f(format!("{p}.w"), &d.w);
    f(format!("{p}.b"), &d.b);
}

fn visit_res<'a>(p: &str, r: &'a ResBlock, f: &mut dyn FnMut(String, &'a Tensor)) {
    f(format!("{p}.n1.g"), &r.n1.g);
    f(format!("{p}.n1.b"), &r.n1.b);
    visit_conv(&format!("{p}.c1"), &r.c1, f);
    visit_dense(&format!("{p}.emb"), &r.emb, f);
    f(format!("{p}.n2.g"), &r.n2.g);
    f(format!("{p}.n2.b"), &r.n2.b);
    visit_conv(&format!("{p}.c2"), &r.c2, f);
    if let Some(s) = &r.skip {
        visit_conv(&format!("{p}.skip"), s, f);
    }
}

fn visit_conv_mut(p: &str, c: &mut Conv, f: &mut dyn FnMut(String, &mut Tensor)) {
    f(format!("{p}.w"), &mut c.w);
    f(format!("{p}.b"), &mut c.b);
}

fn visit_dense_mut(p: &str, d: &mut Dense, f: &mut dyn FnMut(String, &mut Tensor)) {
    f(format!("{p}.w"), &mut d.w);
    f(format!("{p}.b"), &mut d.b);
}

fn visit_res_mut(p: &str, r: &mut ResBlock, f: &mut dyn FnMut(String, &mut Tensor)) {
    f(format!("{p}.n1.g"), &mut r.n1.g);
    f(format!("{p}.n1.b"), &mut r.n1.b);
    visit_conv_mut(&format!("{p}.c1"), &mut r.c1, f);
    visit_dense_mut(&format!("{p}.emb"), &mut r.emb, f);
    f(format!("{p}.n2.g"), &mut r.n2.g);
    f(format!("{p}.n2.b"), &mut r.n2.b);
    visit_conv_mut(&format!("{p}.c2"), &mut r.c2, f);
    if let Some(s) = &mut r.skip {
        visit_conv_mut(&format!("{p}.skip"), s, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fd;
    use crate::rng;

    fn tiny_cfg() -> NetConfig {
        NetConfig {
            in_channels: 3,
            out_channels: 3,
            widths: vec![4, 8],
            blocks_per_level: 1,
            groups: 2,
            time_embed_dim: 8,
        }
    }

    #[test]
    fn config_validation() {
        assert!(NetConfig::default().validate().is_ok());
        assert!(NetConfig { groups: 5, ..NetConfig::default() }.validate().is_err());
        assert!(NetConfig { widths: vec![], ..NetConfig::default() }.validate().is_err());
        assert!(NetConfig { time_embed_dim: 7, ..NetConfig::default() }.validate().is_err());
        assert!(NetConfig { blocks_per_level: 0, ..NetConfig::default() }.validate().is_err());
    }

    #[test]
    fn freshly_initialized_network_is_the_zero_map() {
        let mut r = rng::stream(1, rng::salt::INIT, 0);
        let net = Backbone::init(tiny_cfg(), &mut r).unwrap();
        let x = Tensor::randn(vec![3, 8, 8], &mut r);
        let y = net.infer(&x, 3).unwrap();
        assert_eq!(y.shape(), &[3, 8, 8]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_follows_out_channels() {
        let mut r = rng::stream(2, rng::salt::INIT, 0);
        let cfg = NetConfig { out_channels: 6, ..tiny_cfg() };
        let net = Backbone::init(cfg, &mut r).unwrap();
        let x = Tensor::randn(vec![3, 8, 12], &mut r);
        let y = net.infer(&x, 1).unwrap();
        assert_eq!(y.shape(), &[6, 8, 12]);
    }

    #[test]
    fn input_validation() {
        let mut r = rng::stream(3, rng::salt::INIT, 0);
        let net = Backbone::init(tiny_cfg(), &mut r).unwrap();
        let bad_ch = Tensor::zeros(vec![4, 8, 8]);
        assert!(net.infer(&bad_ch, 1).is_err());
        let bad_div = Tensor::zeros(vec![3, 9, 8]);
        assert!(net.infer(&bad_div, 1).is_err());
        let ok = Tensor::zeros(vec![3, 8, 8]);
        assert!(net.infer(&ok, 0).is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = Backbone::init(tiny_cfg(), &mut rng::stream(7, rng::salt::INIT, 0)).unwrap();
        let b = Backbone::init(tiny_cfg(), &mut rng::stream(7, rng::salt::INIT, 0)).unwrap();
        let c = Backbone::init(tiny_cfg(), &mut rng::stream(8, rng::salt::INIT, 0)).unwrap();
        let pa = a.params();
        let pb = b.params();
        let pc = c.params();
        assert!(pa.iter().zip(&pb).all(|(x, y)| x.data() == y.data()));
        assert!(pa.iter().zip(&pc).any(|(x, y)| x.data() != y.data()));
    }

    #[test]
    fn bind_order_matches_visit_order() {
        let mut r = rng::stream(4, rng::salt::INIT, 0);
        let net = Backbone::init(tiny_cfg(), &mut r).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![3, 8, 8]));
        let (_, order) = net.forward(&mut tape, x, 1, true).unwrap();
        let params = net.params();
        assert_eq!(order.len(), params.len());
        for (v, p) in order.iter().zip(&params) {
            assert_eq!(tape.value(*v).shape(), p.shape());
            assert_eq!(tape.value(*v).data(), p.data());
        }
    }

    #[test]
    fn params_mut_matches_visit_order() {
        let mut r = rng::stream(9, rng::salt::INIT, 0);
        let mut net = Backbone::init(tiny_cfg(), &mut r).unwrap();
        let visited: Vec<Tensor> = net.params().into_iter().cloned().collect();
        let muts = net.params_mut();
        assert_eq!(muts.len(), visited.len());
        for (m, v) in muts.iter().zip(&visited) {
            assert_eq!(m.data(), v.data());
        }
    }

    #[test]
    fn composed_network_gradients_match_fd() {
        let mut r = rng::stream(5, rng::salt::INIT, 0);
        let mut net = Backbone::init(tiny_cfg(), &mut r).unwrap();
        // jitter parameters so zero-initialized heads pass gradients
        net.randomize_params(0.05, &mut r);
        let x = Tensor::randn(vec![3, 8, 8], &mut r).affine(0.3, 0.0);
        let target = Tensor::randn(vec![3, 8, 8], &mut r).affine(0.3, 0.0);
        let e = fd::max_rel_err(
            |t, v| {
                let (out, _) = net.forward(t, v[0], 5, false).unwrap();
                let tv = t.constant(target.clone());
                let d = t.sub(out, tv).unwrap();
                let q = t.square(d);
                t.mean_all(q)
            },
            &[x.clone()],
            2e-2,
        );
        assert!(e < 5e-4, "input-gradient rel err {e}");
    }

    #[test]
    fn parameter_gradients_match_fd_on_samples() {
        let mut r = rng::stream(6, rng::salt::INIT, 0);
        let mut net = Backbone::init(tiny_cfg(), &mut r).unwrap();
        net.randomize_params(0.05, &mut r);
        let x = Tensor::randn(vec![3, 8, 8], &mut r).affine(0.3, 0.0);
        let target = Tensor::randn(vec![3, 8, 8], &mut r).affine(0.3, 0.0);

        // analytic gradients through the real forward pass
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (out, order) = net.forward(&mut tape, xv, 5, true).unwrap();
        let tv = tape.constant(target.clone());
        let d = tape.sub(out, tv).unwrap();
        let q = tape.square(d);
        let loss = tape.mean_all(q);
        tape.backward(loss).unwrap();
        let analytic: Vec<Tensor> = order
            .iter()
            .zip(net.params())
            .map(|(v, p)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
            .collect();

        // finite differences via a closure that rebuilds the network
        // from the perturbed tensor list (evaluation only)
        let inputs: Vec<Tensor> = net.params().into_iter().cloned().collect();
        let mut build = |t: &mut Tape, v: &[Var]| {
            let mut net2 =
                Backbone::init(tiny_cfg(), &mut rng::stream(6, rng::salt::INIT, 0)).unwrap();
            let mut idx = 0;
            net2.visit_mut(&mut |_, p| {
                *p = t.value(v[idx]).clone();
                idx += 1;
            });
            let xv = t.constant(x.clone());
            let (out, _) = net2.forward(t, xv, 5, false).unwrap();
            let tv = t.constant(target.clone());
            let d = t.sub(out, tv).unwrap();
            let q = t.square(d);
            t.mean_all(q)
        };
        let mut worst = 0.0f64;
        for ti in (0..inputs.len()).step_by(3) {
            let ei = (7 * ti) % inputs[ti].numel();
            let fdg = fd::central_diff(&mut build, &inputs, ti, ei, 2e-2);
            let ag = analytic[ti].data()[ei] as f64;
            worst = worst.max(fd::rel_err(ag, fdg));
        }
        assert!(worst < 5e-4, "param-gradient rel err {worst}");
    }
}
