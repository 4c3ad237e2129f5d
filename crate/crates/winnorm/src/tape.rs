//! Reverse-mode differentiation over a recorded tape of primitive ops.
//!
//! The tape owns every intermediate tensor. Ops append a node whose VJP
//! closure maps the output gradient to gradients for each parent; backward
//! walks nodes in exact reverse recording order, which is a reverse
//! topological order because parents always precede children. Leaf
//! gradients accumulate across backward calls until `zero_grad`.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Dims4, Real, Tensor4};
use crate::window::Region;

pub type VarId = usize;

/// Context handed to a VJP closure during backward.
pub struct VjpCtx<'a, T: Real> {
    values: &'a [Tensor4<T>],
    parents: &'a [VarId],
    out: VarId,
    pub grad_out: &'a Tensor4<T>,
}

impl<'a, T: Real> VjpCtx<'a, T> {
    /// Value of the i-th parent.
    pub fn input(&self, i: usize) -> &'a Tensor4<T> {
        &self.values[self.parents[i]]
    }

    /// Value the node produced in the forward pass.
    pub fn output(&self) -> &'a Tensor4<T> {
        &self.values[self.out]
    }
}

type Vjp<T> = Box<dyn Fn(&VjpCtx<'_, T>) -> Vec<Tensor4<T>>>;

struct Node<T: Real> {
    parents: Vec<VarId>,
    vjp: Option<Vjp<T>>,
    needs_grad: bool,
    is_param: bool,
}

/// Elementwise op kinds for the generic dispatcher.
#[derive(Clone, Copy, Debug)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
    Div,
    Sqrt,
    Exp,
    Log,
    MaxWithScalar,
}

/// Second operand of an elementwise op.
#[derive(Clone, Copy, Debug)]
pub enum Operand<T> {
    None,
    Scalar(T),
    Var(VarId),
}

pub struct Tape<T: Real> {
    values: Vec<Tensor4<T>>,
    nodes: Vec<Node<T>>,
    /// Persistent leaf gradients, accumulated across backward calls.
    grads: Vec<Option<Tensor4<T>>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { values: Vec::new(), nodes: Vec::new(), grads: Vec::new(), grad_enabled: true }
    }

    /// Tape that stores values only; no VJPs are recorded and backward is
    /// unavailable. Used for evaluation passes.
    pub fn inference() -> Self {
        Tape { values: Vec::new(), nodes: Vec::new(), grads: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor4<T> {
        &self.values[id]
    }

    pub fn grad(&self, id: VarId) -> Option<&Tensor4<T>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn zero_grad(&mut self) {
        for g in self.grads.iter_mut() {
            *g = None;
        }
    }

    /// Register an input tensor. It becomes a parameter leaf when its
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: Tensor4<T>) -> VarId {
        let is_param = t.requires_grad;
        self.push(t, Vec::new(), None, is_param)
    }

    /// Register a non-differentiable input.
    pub fn constant(&mut self, t: Tensor4<T>) -> VarId {
        self.push(t, Vec::new(), None, false)
    }

    fn push(
        &mut self,
        value: Tensor4<T>,
        parents: Vec<VarId>,
        vjp: Option<Vjp<T>>,
        is_param: bool,
    ) -> VarId {
        let needs_grad = self.grad_enabled
            && (is_param || parents.iter().any(|&p| self.nodes[p].needs_grad));
        let id = self.values.len();
        self.values.push(value);
        self.nodes.push(Node {
            parents,
            vjp: if needs_grad { vjp } else { None },
            needs_grad,
            is_param,
        });
        self.grads.push(None);
        id
    }

    fn record(
        &mut self,
        op: &'static str,
        out: Tensor4<T>,
        parents: Vec<VarId>,
        vjp: Vjp<T>,
    ) -> Result<VarId> {
        if !out.all_finite() {
            return Err(Error::degenerate(op, "non-finite value in output".to_string()));
        }
        Ok(self.push(out, parents, Some(vjp), false))
    }

    /// Seed the scalar `loss` with 1 and propagate. Leaf gradients
    /// accumulate additively across calls until `zero_grad`.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.values[loss].dims() != (1, 1, 1, 1) {
            return Err(Error::NonScalarLoss(self.values[loss].dims()));
        }
        if !self.grad_enabled {
            return Err(Error::InvalidConfig("backward on an inference tape".into()));
        }
        let mut scratch: Vec<Option<Tensor4<T>>> = vec![None; self.nodes.len()];
        scratch[loss] = Some(Tensor4::scalar(T::ONE));
        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = scratch[id].take() else { continue };
            if self.nodes[id].is_param {
                match &mut self.grads[id] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *b;
                        }
                    }
                    slot => *slot = Some(g.clone()),
                }
            }
            if let Some(vjp) = &self.nodes[id].vjp {
                let ctx = VjpCtx {
                    values: &self.values,
                    parents: &self.nodes[id].parents,
                    out: id,
                    grad_out: &g,
                };
                let parent_grads = vjp(&ctx);
                debug_assert_eq!(parent_grads.len(), self.nodes[id].parents.len());
                for (&pid, pg) in self.nodes[id].parents.iter().zip(parent_grads) {
                    if !self.nodes[pid].needs_grad {
                        continue;
                    }
                    match &mut scratch[pid] {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                                *a += *b;
                            }
                        }
                        slot => *slot = Some(pg),
                    }
                }
            }
        }
        Ok(())
    }

    // -----------------------------------------------------------------
    // Elementwise ops
    // -----------------------------------------------------------------

    /// Generic dispatcher mirroring the op-kind surface. The named
    /// methods below are the ones the rest of the crate calls.
    pub fn elementwise(&mut self, op: ElemOp, a: VarId, b: Operand<T>) -> Result<VarId> {
        match (op, b) {
            (ElemOp::Add, Operand::Var(b)) => self.add(a, b),
            (ElemOp::Sub, Operand::Var(b)) => self.sub(a, b),
            (ElemOp::Mul, Operand::Var(b)) => self.mul(a, b),
            (ElemOp::Div, Operand::Var(b)) => self.div(a, b),
            (ElemOp::Add, Operand::Scalar(s)) => self.add_scalar(a, s),
            (ElemOp::Sub, Operand::Scalar(s)) => self.add_scalar(a, -s),
            (ElemOp::Mul, Operand::Scalar(s)) => self.mul_scalar(a, s),
            (ElemOp::Div, Operand::Scalar(s)) => self.mul_scalar(a, T::ONE / s),
            (ElemOp::Sqrt, Operand::None) => self.sqrt(a),
            (ElemOp::Exp, Operand::None) => self.exp(a),
            (ElemOp::Log, Operand::None) => self.ln(a),
            (ElemOp::MaxWithScalar, Operand::Scalar(s)) => self.max_scalar(a, s),
            (op, b) => Err(Error::InvalidConfig(format!(
                "elementwise {op:?} does not accept operand {b:?}"
            ))),
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: VarId,
        b: VarId,
        fwd: fn(T, T) -> T,
        da: fn(T, T, T) -> T, // (g, a, b) -> grad wrt a element
        db: fn(T, T, T) -> T, // (g, a, b) -> grad wrt b element
    ) -> Result<VarId> {
        let ad = self.values[a].dims();
        let bd = self.values[b].dims();
        let broadcast_ok = |x: usize, full: usize| x == full || x == 1;
        if !(broadcast_ok(bd.0, ad.0)
            && broadcast_ok(bd.1, ad.1)
            && broadcast_ok(bd.2, ad.2)
            && broadcast_ok(bd.3, ad.3))
        {
            return Err(Error::shape(name, format!("{bd:?} not broadcastable to {ad:?}")));
        }

        let out = {
            let av = self.values[a].data();
            let bv = self.values[b].data();
            let mut out = Tensor4::zeros(ad);
            if ad == bd {
                for ((o, &x), &y) in out.data_mut().iter_mut().zip(av).zip(bv) {
                    *o = fwd(x, y);
                }
            } else {
                let bs = broadcast_strides(ad, bd);
                let data = out.data_mut();
                let mut ai = 0;
                for ni in 0..ad.0 {
                    for ci in 0..ad.1 {
                        for hi in 0..ad.2 {
                            let base = ni * bs.0 + ci * bs.1 + hi * bs.2;
                            for wi in 0..ad.3 {
                                data[ai] = fwd(av[ai], bv[base + wi * bs.3]);
                                ai += 1;
                            }
                        }
                    }
                }
            }
            out
        };

        self.record(
            name,
            out,
            vec![a, b],
            Box::new(move |ctx| {
                let av = ctx.input(0);
                let bv = ctx.input(1);
                let g = ctx.grad_out.data();
                let mut ga = Tensor4::zeros(ad);
                let mut gb = Tensor4::zeros(bd);
                if ad == bd {
                    for i in 0..g.len() {
                        ga.data_mut()[i] = da(g[i], av.data()[i], bv.data()[i]);
                        gb.data_mut()[i] = db(g[i], av.data()[i], bv.data()[i]);
                    }
                } else {
                    let bs = broadcast_strides(ad, bd);
                    let mut ai = 0;
                    for ni in 0..ad.0 {
                        for ci in 0..ad.1 {
                            for hi in 0..ad.2 {
                                let base = ni * bs.0 + ci * bs.1 + hi * bs.2;
                                for wi in 0..ad.3 {
                                    let bi = base + wi * bs.3;
                                    let (x, y) = (av.data()[ai], bv.data()[bi]);
                                    ga.data_mut()[ai] = da(g[ai], x, y);
                                    gb.data_mut()[bi] += db(g[ai], x, y);
                                    ai += 1;
                                }
                            }
                        }
                    }
                }
                vec![ga, gb]
            }),
        )
    }

    /// `a + b`; `b` may broadcast from any dims of extent 1.
    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary("add", a, b, |x, y| x + y, |g, _, _| g, |g, _, _| g)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary("sub", a, b, |x, y| x - y, |g, _, _| g, |g, _, _| -g)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary("mul", a, b, |x, y| x * y, |g, _, y| g * y, |g, x, _| g * x)
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary("div", a, b, |x, y| x / y, |g, _, y| g / y, |g, x, y| -g * x / (y * y))
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: VarId,
        fwd: impl Fn(T) -> T,
        vjp: impl Fn(&VjpCtx<'_, T>) -> Vec<Tensor4<T>> + 'static,
    ) -> Result<VarId> {
        let mut out = Tensor4::zeros(self.values[a].dims());
        for (o, &x) in out.data_mut().iter_mut().zip(self.values[a].data()) {
            *o = fwd(x);
        }
        self.record(name, out, vec![a], Box::new(vjp))
    }

    pub fn add_scalar(&mut self, a: VarId, s: T) -> Result<VarId> {
        self.unary("add_scalar", a, |x| x + s, |ctx| vec![ctx.grad_out.clone()])
    }

    pub fn mul_scalar(&mut self, a: VarId, s: T) -> Result<VarId> {
        self.unary("mul_scalar", a, |x| x * s, move |ctx| {
            let mut g = ctx.grad_out.clone();
            for v in g.data_mut() {
                *v = *v * s;
            }
            vec![g]
        })
    }

    pub fn sqrt(&mut self, a: VarId) -> Result<VarId> {
        self.unary("sqrt", a, |x| x.sqrt(), |ctx| {
            let half = T::from_f64(0.5);
            let mut g = ctx.grad_out.clone();
            for (v, &o) in g.data_mut().iter_mut().zip(ctx.output().data()) {
                *v = *v * half / o;
            }
            vec![g]
        })
    }

    pub fn exp(&mut self, a: VarId) -> Result<VarId> {
        self.unary("exp", a, |x| x.exp(), |ctx| {
            let mut g = ctx.grad_out.clone();
            for (v, &o) in g.data_mut().iter_mut().zip(ctx.output().data()) {
                *v = *v * o;
            }
            vec![g]
        })
    }

    pub fn ln(&mut self, a: VarId) -> Result<VarId> {
        self.unary("log", a, |x| x.ln(), |ctx| {
            let mut g = ctx.grad_out.clone();
            for (v, &x) in g.data_mut().iter_mut().zip(ctx.input(0).data()) {
                *v = *v / x;
            }
            vec![g]
        })
    }

    pub fn max_scalar(&mut self, a: VarId, s: T) -> Result<VarId> {
        self.unary("max_scalar", a, |x| x.maximum(s), move |ctx| {
            let mut g = ctx.grad_out.clone();
            for (v, &x) in g.data_mut().iter_mut().zip(ctx.input(0).data()) {
                if x <= s {
                    *v = T::ZERO;
                }
            }
            vec![g]
        })
    }

    pub fn relu(&mut self, a: VarId) -> Result<VarId> {
        self.max_scalar(a, T::ZERO)
    }

    // -----------------------------------------------------------------
    // Reductions
    // -----------------------------------------------------------------

    /// Per-(n, c) population mean over the region pixels: (N,C,H,W) -> (N,C,1,1).
    pub fn reduce_mean_region(&mut self, f: VarId, region: &Region) -> Result<VarId> {
        let dims = self.values[f].dims();
        let (n, c, h, w) = dims;
        region.validate(h, w, n * c)?;
        for plane in 0..n * c {
            if region.count(h, w, plane) == 0 {
                return Err(Error::EmptyRegion);
            }
        }
        let out = {
            let v = self.values[f].data();
            let mut out = Tensor4::zeros((n, c, 1, 1));
            for plane in 0..n * c {
                out.data_mut()[plane] = region_sum(v, plane, h, w, region)
                    / T::from_f64(region.count(h, w, plane) as f64);
            }
            out
        };
        let region = region.clone();
        self.record(
            "reduce_mean_region",
            out,
            vec![f],
            Box::new(move |ctx| {
                let g = ctx.grad_out.data();
                let mut df = Tensor4::zeros(dims);
                for plane in 0..n * c {
                    let scale = g[plane] / T::from_f64(region.count(h, w, plane) as f64);
                    region_add(df.data_mut(), plane, h, w, &region, scale);
                }
                vec![df]
            }),
        )
    }

    /// Per-channel population mean over batch and space: (N,C,H,W) -> (1,C,1,1).
    pub fn reduce_mean_nhw(&mut self, f: VarId) -> Result<VarId> {
        let dims = self.values[f].dims();
        let (n, c, h, w) = dims;
        if n * h * w == 0 {
            return Err(Error::EmptyRegion);
        }
        let count = T::from_f64((n * h * w) as f64);
        let out = {
            let v = self.values[f].data();
            let mut out = Tensor4::zeros((1, c, 1, 1));
            for ci in 0..c {
                let mut acc = T::ZERO;
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    for &x in &v[base..base + h * w] {
                        acc += x;
                    }
                }
                out.data_mut()[ci] = acc / count;
            }
            out
        };
        self.record(
            "reduce_mean_nhw",
            out,
            vec![f],
            Box::new(move |ctx| {
                let g = ctx.grad_out.data();
                let mut df = Tensor4::zeros(dims);
                for ni in 0..n {
                    for ci in 0..c {
                        let scale = g[ci] / count;
                        let base = (ni * c + ci) * h * w;
                        for v in &mut df.data_mut()[base..base + h * w] {
                            *v = scale;
                        }
                    }
                }
                vec![df]
            }),
        )
    }

    /// Sum of every element: (N,C,H,W) -> scalar.
    pub fn reduce_sum_all(&mut self, f: VarId) -> Result<VarId> {
        let dims = self.values[f].dims();
        let mut acc = T::ZERO;
        for &x in self.values[f].data() {
            acc += x;
        }
        self.record(
            "reduce_sum_all",
            Tensor4::scalar(acc),
            vec![f],
            Box::new(move |ctx| {
                let g = ctx.grad_out.data()[0];
                vec![Tensor4::full(dims, g)]
            }),
        )
    }

    /// Mean of every element: (N,C,H,W) -> scalar.
    pub fn reduce_mean_all(&mut self, f: VarId) -> Result<VarId> {
        let len = self.values[f].len();
        let s = self.reduce_sum_all(f)?;
        self.mul_scalar(s, T::ONE / T::from_f64(len as f64))
    }

    // -----------------------------------------------------------------
    // Network primitives
    // -----------------------------------------------------------------

    /// 3x3 convolution, stride in {1, 2}, zero padding in {0, 1}.
    pub fn conv2d(&mut self, f: VarId, k: VarId, stride: usize, pad: usize) -> Result<VarId> {
        let fd = self.values[f].dims();
        let kd = self.values[k].dims();
        let (n, cin, h, w) = fd;
        let (cout, kcin, kh, kw) = kd;
        if kcin != cin || kh != 3 || kw != 3 {
            return Err(Error::shape("conv2d", format!("kernel {kd:?} vs input {fd:?}")));
        }
        if !(stride == 1 || stride == 2) || pad > 1 {
            return Err(Error::InvalidConfig(format!("conv2d stride {stride} pad {pad}")));
        }
        if h + 2 * pad < 3 || w + 2 * pad < 3 {
            return Err(Error::shape("conv2d", format!("plane {h}x{w} too small for 3x3")));
        }
        let ho = (h + 2 * pad - 3) / stride + 1;
        let wo = (w + 2 * pad - 3) / stride + 1;

        let out = {
            let fv = self.values[f].data();
            let kv = self.values[k].data();
            let mut out = Tensor4::zeros((n, cout, ho, wo));
            kernels::conv2d_forward(fv, kv, out.data_mut(), (n, cin, h, w), cout, stride, pad);
            out
        };
        self.record(
            "conv2d",
            out,
            vec![f, k],
            Box::new(move |ctx| {
                let fv = ctx.input(0).data();
                let kv = ctx.input(1).data();
                let g = ctx.grad_out.data();
                let mut df = Tensor4::zeros(fd);
                let mut dk = Tensor4::zeros(kd);
                kernels::conv2d_backward_input(g, kv, df.data_mut(), (n, cin, h, w), cout, stride, pad);
                kernels::conv2d_backward_kernel(g, fv, dk.data_mut(), (n, cin, h, w), cout, stride, pad);
                vec![df, dk]
            }),
        )
    }

    /// 2x2 average pooling with stride 2. H and W must be even.
    pub fn avgpool2(&mut self, f: VarId) -> Result<VarId> {
        let (n, c, h, w) = self.values[f].dims();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("avgpool2", format!("odd plane {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let quarter = T::from_f64(0.25);
        let out = {
            let v = self.values[f].data();
            let mut out = Tensor4::zeros((n, c, ho, wo));
            let od = out.data_mut();
            for plane in 0..n * c {
                let ib = plane * h * w;
                let ob = plane * ho * wo;
                for y in 0..ho {
                    for x in 0..wo {
                        let i = ib + 2 * y * w + 2 * x;
                        od[ob + y * wo + x] =
                            (v[i] + v[i + 1] + v[i + w] + v[i + w + 1]) * quarter;
                    }
                }
            }
            out
        };
        self.record(
            "avgpool2",
            out,
            vec![f],
            Box::new(move |ctx| {
                let g = ctx.grad_out.data();
                let mut df = Tensor4::zeros((n, c, h, w));
                let dd = df.data_mut();
                for plane in 0..n * c {
                    let ib = plane * h * w;
                    let ob = plane * ho * wo;
                    for y in 0..ho {
                        for x in 0..wo {
                            let gv = g[ob + y * wo + x] * quarter;
                            let i = ib + 2 * y * w + 2 * x;
                            dd[i] += gv;
                            dd[i + 1] += gv;
                            dd[i + w] += gv;
                            dd[i + w + 1] += gv;
                        }
                    }
                }
                vec![df]
            }),
        )
    }

    /// Spatial mean per (n, c): (N,C,H,W) -> (N,C,1,1).
    pub fn global_avgpool(&mut self, f: VarId) -> Result<VarId> {
        self.reduce_mean_region(f, &Region::Full)
    }

    /// Fully connected head: x (N,D,1,1) with weights (K,D,1,1) and
    /// optional bias (1,K,1,1) -> logits (N,K,1,1).
    pub fn linear(&mut self, x: VarId, w: VarId, bias: Option<VarId>) -> Result<VarId> {
        let xd = self.values[x].dims();
        let wd = self.values[w].dims();
        let (n, d) = (xd.0, xd.1);
        let (k, wdin) = (wd.0, wd.1);
        if xd.2 != 1 || xd.3 != 1 || wd.2 != 1 || wd.3 != 1 || wdin != d {
            return Err(Error::shape("linear", format!("x {xd:?} w {wd:?}")));
        }
        if let Some(b) = bias {
            let bd = self.values[b].dims();
            if bd != (1, k, 1, 1) {
                return Err(Error::shape("linear", format!("bias {bd:?}, want (1,{k},1,1)")));
            }
        }
        let out = {
            let xv = self.values[x].data();
            let wv = self.values[w].data();
            let bv = bias.map(|b| self.values[b].data().to_vec());
            let mut out = Tensor4::zeros((n, k, 1, 1));
            let od = out.data_mut();
            for ni in 0..n {
                for ki in 0..k {
                    let mut acc = match &bv {
                        Some(b) => b[ki],
                        None => T::ZERO,
                    };
                    let xrow = &xv[ni * d..(ni + 1) * d];
                    let wrow = &wv[ki * d..(ki + 1) * d];
                    for (xi, wi) in xrow.iter().zip(wrow) {
                        acc += *xi * *wi;
                    }
                    od[ni * k + ki] = acc;
                }
            }
            out
        };
        let mut parents = vec![x, w];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        self.record(
            "linear",
            out,
            parents,
            Box::new(move |ctx| {
                let xv = ctx.input(0).data();
                let wv = ctx.input(1).data();
                let g = ctx.grad_out.data();
                let mut dx = Tensor4::zeros((n, d, 1, 1));
                let mut dw = Tensor4::zeros((k, d, 1, 1));
                for ni in 0..n {
                    for ki in 0..k {
                        let gv = g[ni * k + ki];
                        let wrow = &wv[ki * d..(ki + 1) * d];
                        let xrow = &xv[ni * d..(ni + 1) * d];
                        let dxrow = &mut dx.data_mut()[ni * d..(ni + 1) * d];
                        for di in 0..d {
                            dxrow[di] += gv * wrow[di];
                        }
                        let dwrow = &mut dw.data_mut()[ki * d..(ki + 1) * d];
                        for di in 0..d {
                            dwrow[di] += gv * xrow[di];
                        }
                    }
                }
                let mut grads = vec![dx, dw];
                if has_bias {
                    let mut dbias = Tensor4::zeros((1, k, 1, 1));
                    for ni in 0..n {
                        for ki in 0..k {
                            dbias.data_mut()[ki] += g[ni * k + ki];
                        }
                    }
                    grads.push(dbias);
                }
                grads
            }),
        )
    }

    /// Stable log-softmax over the channel axis of (N,K,1,1).
    pub fn log_softmax(&mut self, x: VarId) -> Result<VarId> {
        let xd = self.values[x].dims();
        let (n, k) = (xd.0, xd.1);
        if xd.2 != 1 || xd.3 != 1 || k < 2 {
            return Err(Error::shape("log_softmax", format!("want (N,K,1,1), got {xd:?}")));
        }
        let out = {
            let xv = self.values[x].data();
            let mut out = Tensor4::zeros(xd);
            for ni in 0..n {
                let row = &xv[ni * k..(ni + 1) * k];
                let mut mx = row[0];
                for &v in row {
                    mx = mx.maximum(v);
                }
                let mut z = T::ZERO;
                for &v in row {
                    z += (v - mx).exp();
                }
                let lz = z.ln() + mx;
                for (o, &v) in out.data_mut()[ni * k..(ni + 1) * k].iter_mut().zip(row) {
                    *o = v - lz;
                }
            }
            out
        };
        self.record(
            "log_softmax",
            out,
            vec![x],
            Box::new(move |ctx| {
                let ls = ctx.output().data();
                let g = ctx.grad_out.data();
                let mut dx = Tensor4::zeros(xd);
                for ni in 0..n {
                    let mut gsum = T::ZERO;
                    for ki in 0..k {
                        gsum += g[ni * k + ki];
                    }
                    for ki in 0..k {
                        let i = ni * k + ki;
                        dx.data_mut()[i] = g[i] - ls[i].exp() * gsum;
                    }
                }
                vec![dx]
            }),
        )
    }

    /// Mean over the batch of -log softmax(logits)[label]: (N,K,1,1) -> scalar.
    pub fn cross_entropy(&mut self, logits: VarId, labels: &[usize]) -> Result<VarId> {
        let xd = self.values[logits].dims();
        let (n, k) = (xd.0, xd.1);
        if xd.2 != 1 || xd.3 != 1 || k < 2 {
            return Err(Error::shape("cross_entropy", format!("logits {xd:?}")));
        }
        if labels.len() != n {
            return Err(Error::shape("cross_entropy", format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidConfig(format!("label {bad} out of range 0..{k}")));
        }
        let ls = self.log_softmax(logits)?;
        let labels = labels.to_vec();
        let out = {
            let lsv = self.values[ls].data();
            let mut acc = T::ZERO;
            for (ni, &y) in labels.iter().enumerate() {
                acc += lsv[ni * k + y];
            }
            Tensor4::scalar(-acc / T::from_f64(n as f64))
        };
        self.record(
            "cross_entropy",
            out,
            vec![ls],
            Box::new(move |ctx| {
                let g = ctx.grad_out.data()[0];
                let scale = -g / T::from_f64(n as f64);
                let mut dls = Tensor4::zeros(xd);
                for (ni, &y) in labels.iter().enumerate() {
                    dls.data_mut()[ni * k + y] = scale;
                }
                vec![dls]
            }),
        )
    }
}

fn broadcast_strides(full: Dims4, b: Dims4) -> (usize, usize, usize, usize) {
    let size = b.1 * b.2 * b.3;
    (
        if b.0 == full.0 { size } else { 0 },
        if b.1 == full.1 { b.2 * b.3 } else { 0 },
        if b.2 == full.2 { b.3 } else { 0 },
        if b.3 == full.3 { 1 } else { 0 },
    )
}

fn region_sum<T: Real>(v: &[T], plane: usize, h: usize, w: usize, region: &Region) -> T {
    let base = plane * h * w;
    let mut acc = T::ZERO;
    match region {
        Region::Full => {
            for &x in &v[base..base + h * w] {
                acc += x;
            }
        }
        Region::Window(win) => {
            for y in win.y0..win.y1 {
                for &x in &v[base + y * w + win.x0..base + y * w + win.x1] {
                    acc += x;
                }
            }
        }
        Region::Blocks(blocks) => {
            for b in blocks {
                for y in b.y0..b.y1 {
                    for &x in &v[base + y * w + b.x0..base + y * w + b.x1] {
                        acc += x;
                    }
                }
            }
        }
        Region::Mask(m) => {
            for (i, &keep) in m.bits().iter().enumerate() {
                if keep {
                    acc += v[base + i];
                }
            }
        }
        Region::PerPlane(masks) => {
            for (i, &keep) in masks[plane].bits().iter().enumerate() {
                if keep {
                    acc += v[base + i];
                }
            }
        }
    }
    acc
}

fn region_add<T: Real>(v: &mut [T], plane: usize, h: usize, w: usize, region: &Region, value: T) {
    let base = plane * h * w;
    match region {
        Region::Full => {
            for x in &mut v[base..base + h * w] {
                *x += value;
            }
        }
        Region::Window(win) => {
            for y in win.y0..win.y1 {
                for x in &mut v[base + y * w + win.x0..base + y * w + win.x1] {
                    *x += value;
                }
            }
        }
        Region::Blocks(blocks) => {
            for b in blocks {
                for y in b.y0..b.y1 {
                    for x in &mut v[base + y * w + b.x0..base + y * w + b.x1] {
                        *x += value;
                    }
                }
            }
        }
        Region::Mask(m) => {
            for (i, &keep) in m.bits().iter().enumerate() {
                if keep {
                    v[base + i] += value;
                }
            }
        }
        Region::PerPlane(masks) => {
            for (i, &keep) in masks[plane].bits().iter().enumerate() {
                if keep {
                    v[base + i] += value;
                }
            }
        }
    }
}

impl<T: Real> Tape<T> {
    /// Population mean and variance over a region, per (n, c), built from
    /// the reduction primitives so both statistics stay differentiable.
    pub fn reduce_mean_var_region(&mut self, f: VarId, region: &Region) -> Result<(VarId, VarId)> {
        let mean = self.reduce_mean_region(f, region)?;
        let centered = self.sub(f, mean)?;
        let sq = self.mul(centered, centered)?;
        let var = self.reduce_mean_region(sq, region)?;
        Ok((mean, var))
    }
}
