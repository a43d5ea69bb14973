use rayon::prelude::*;

use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<R: Real> {
    Constant,
    Param,
    Conv1d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        dilation: usize,
        pad_left: usize,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    LeakyRelu {
        x: Var,
        slope: R,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddChannel {
        x: Var,
        e: Var,
    },
    Scale {
        x: Var,
        c: R,
    },
    Sum {
        x: Var,
    },
    MeanAbsDiff {
        x: Var,
        target: Vec<R>,
    },
}

#[derive(Debug, Clone)]
struct Node<R: Real> {
    shape: Vec<usize>,
    value: Vec<R>,
    op: Op<R>,
    requires_grad: bool,
}

/// Parameters of a [`ParamStore`] bound as leaves of one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: super::ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Records executed operations; [`Graph::backward`] replays them in reverse.
#[derive(Debug, Clone, Default)]
pub struct Graph<R: Real> {
    nodes: Vec<Node<R>>,
    grads: Vec<Option<Vec<R>>>,
    backward_done: bool,
}

/// Output length of a "same"-padded convolution: `ceil(t / stride)`.
pub fn conv_output_len(t: usize, stride: usize) -> usize {
    t.div_ceil(stride)
}

/// Left padding for a "same"-padded convolution. Symmetric for stride 1 and
/// odd kernels; otherwise the left side receives the larger half.
pub fn conv_padding(t: usize, kernel: usize, stride: usize, dilation: usize) -> usize {
    let out = conv_output_len(t, stride);
    let span = (kernel - 1) * dilation + 1;
    let needed = ((out.saturating_sub(1)) * stride + span).saturating_sub(t);
    needed - needed / 2
}

/// Valid output range `[lo, hi)` for which `t * stride + off` indexes inside `0..t_in`.
fn tap_range(off: isize, stride: usize, t_in: usize, t_out: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off < 0 { ((-off) + s - 1) / s } else { 0 };
    let last = t_in as isize - 1 - off;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let lo = (lo as usize).min(t_out);
    let hi = (hi as usize).min(t_out);
    (lo, hi.max(lo))
}

struct ConvGeom {
    cin: usize,
    cout: usize,
    k: usize,
    t_in: usize,
    t_out: usize,
    stride: usize,
    dilation: usize,
    pad_left: usize,
}

impl ConvGeom {
    fn offset(&self, kk: usize) -> isize {
        (kk * self.dilation) as isize - self.pad_left as isize
    }
}

const PAR_THRESHOLD: usize = 1 << 15;

fn conv_forward_one<R: Real>(g: &ConvGeom, x: &[R], w: &[R], bias: Option<&[R]>, out: &mut [R]) {
    for o in 0..g.cout {
        let row = &mut out[o * g.t_out..(o + 1) * g.t_out];
        let b0 = bias.map(|b| b[o]).unwrap_or_else(R::zero);
        row.iter_mut().for_each(|v| *v = b0);
        for c in 0..g.cin {
            let xr = &x[c * g.t_in..(c + 1) * g.t_in];
            for kk in 0..g.k {
                let wv = w[(o * g.cin + c) * g.k + kk];
                let off = g.offset(kk);
                let (lo, hi) = tap_range(off, g.stride, g.t_in, g.t_out);
                if lo >= hi {
                    continue;
                }
                if g.stride == 1 {
                    let start = (lo as isize + off) as usize;
                    let xs = &xr[start..start + (hi - lo)];
                    for (r, &xv) in row[lo..hi].iter_mut().zip(xs) {
                        *r = *r + wv * xv;
                    }
                } else {
                    for t in lo..hi {
                        let idx = (t as isize * g.stride as isize + off) as usize;
                        row[t] = row[t] + wv * xr[idx];
                    }
                }
            }
        }
    }
}

/// Accumulates gradients for one batch element into `dx`, `dw`, `db`.
fn conv_backward_one<R: Real>(
    g: &ConvGeom,
    x: &[R],
    w: &[R],
    dy: &[R],
    mut dx: Option<&mut [R]>,
    mut dw: Option<&mut [R]>,
    mut db: Option<&mut [R]>,
) {
    for o in 0..g.cout {
        let dyr = &dy[o * g.t_out..(o + 1) * g.t_out];
        if let Some(db) = db.as_deref_mut() {
            db[o] = db[o] + dyr.iter().copied().sum::<R>();
        }
        for c in 0..g.cin {
            let xr = &x[c * g.t_in..(c + 1) * g.t_in];
            for kk in 0..g.k {
                let widx = (o * g.cin + c) * g.k + kk;
                let wv = w[widx];
                let off = g.offset(kk);
                let (lo, hi) = tap_range(off, g.stride, g.t_in, g.t_out);
                if lo >= hi {
                    continue;
                }
                if g.stride == 1 {
                    let start = (lo as isize + off) as usize;
                    let n = hi - lo;
                    if let Some(dw) = dw.as_deref_mut() {
                        let mut acc = R::zero();
                        for (&d, &xv) in dyr[lo..hi].iter().zip(&xr[start..start + n]) {
                            acc = acc + d * xv;
                        }
                        dw[widx] = dw[widx] + acc;
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        let dxr = &mut dx[c * g.t_in + start..c * g.t_in + start + n];
                        for (r, &d) in dxr.iter_mut().zip(&dyr[lo..hi]) {
                            *r = *r + wv * d;
                        }
                    }
                } else {
                    let mut acc = R::zero();
                    for t in lo..hi {
                        let idx = (t as isize * g.stride as isize + off) as usize;
                        acc = acc + dyr[t] * xr[idx];
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[c * g.t_in + idx] = dx[c * g.t_in + idx] + wv * dyr[t];
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[widx] = dw[widx] + acc;
                    }
                }
            }
        }
    }
}

fn add_into<R: Real>(dst: &mut [R], src: &[R]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<R>, op: Op<R>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<R> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[R] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<R> {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("consistent node")
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, t: &Tensor<R>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Constant, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<R>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "constant shape {shape:?} vs {} values",
                data.len()
            )));
        }
        Ok(self.push(shape.to_vec(), data, Op::Constant, false))
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&mut self, t: &Tensor<R>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param, true)
    }

    /// Binds every parameter of `store` as a gradient-receiving leaf.
    pub fn bind(&mut self, store: &ParamStore<R>) -> Bound {
        let vars = store.iter().map(|(_, _, t)| self.leaf(t)).collect();
        Bound { vars }
    }

    /// Binds every parameter as a constant, for inference without gradients.
    pub fn bind_frozen(&mut self, store: &ParamStore<R>) -> Bound {
        let vars = store.iter().map(|(_, _, t)| self.constant(t)).collect();
        Bound { vars }
    }

    /// 1-D cross-correlation over `[B, C_in, T]` with "same" zero padding;
    /// output length `ceil(T / stride)`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        dilation: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 {
            return Err(Error::shape(format!(
                "conv1d expects x [B, C, T] and w [C_out, C_in, K], got {xs:?} and {ws:?}"
            )));
        }
        let (b, cin, t_in) = (xs[0], xs[1], xs[2]);
        let (cout, wcin, k) = (ws[0], ws[1], ws[2]);
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv1d channel mismatch: input has {cin}, weight expects {wcin}"
            )));
        }
        if !matches!(k, 1 | 3 | 5) {
            return Err(Error::invalid(format!(
                "conv1d kernel size {k} not in {{1, 3, 5}}"
            )));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::invalid("conv1d stride and dilation must be >= 1"));
        }
        if t_in == 0 {
            return Err(Error::shape("conv1d on empty time axis"));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return Err(Error::shape(format!(
                    "conv1d bias shape {:?}, expected [{cout}]",
                    self.shape(bv)
                )));
            }
        }
        let t_out = conv_output_len(t_in, stride);
        let pad_left = conv_padding(t_in, k, stride, dilation);
        let geom = ConvGeom {
            cin,
            cout,
            k,
            t_in,
            t_out,
            stride,
            dilation,
            pad_left,
        };
        let mut out = vec![R::zero(); b * cout * t_out];
        {
            let xv = self.value(x);
            let wv = self.value(w);
            let bv = bias.map(|bb| self.value(bb));
            let work = cin * cout * k * t_out;
            if b > 1 && work >= PAR_THRESHOLD {
                out.par_chunks_mut(cout * t_out)
                    .enumerate()
                    .for_each(|(bi, ob)| {
                        conv_forward_one(
                            &geom,
                            &xv[bi * cin * t_in..(bi + 1) * cin * t_in],
                            wv,
                            bv,
                            ob,
                        )
                    });
            } else {
                for (bi, ob) in out.chunks_mut(cout * t_out).enumerate() {
                    conv_forward_one(
                        &geom,
                        &xv[bi * cin * t_in..(bi + 1) * cin * t_in],
                        wv,
                        bv,
                        ob,
                    );
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|bb| self.rg(bb));
        Ok(self.push(
            vec![b, cout, t_out],
            out,
            Op::Conv1d {
                x,
                w,
                bias,
                stride,
                dilation,
                pad_left,
            },
            rg,
        ))
    }

    /// Repeats every time step `factor` times.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::invalid("upsample factor must be >= 1"));
        }
        let xs = self.shape(x).to_vec();
        let t = *xs
            .last()
            .ok_or_else(|| Error::shape("upsample on scalar"))?;
        let rows = self.value(x).len() / t.max(1);
        let mut out = Vec::with_capacity(rows * t * factor);
        for row in self.value(x).chunks(t) {
            for &v in row {
                out.extend(std::iter::repeat_n(v, factor));
            }
        }
        let mut shape = xs;
        *shape.last_mut().expect("non-scalar") = t * factor;
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Upsample { x, factor }, rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: R) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| if v >= R::zero() { v } else { slope * v })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, Op::LeakyRelu { x, slope }, rg)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&p, &q)| p + q)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Add { a, b }, rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&p, &q)| p * q)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Mul { a, b }, rg))
    }

    /// `x[B, C, T] + e[B, C]`, broadcasting `e` over time.
    pub fn add_channel(&mut self, x: Var, e: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let es = self.shape(e).to_vec();
        if xs.len() != 3 || es != [xs[0], xs[1]] {
            return Err(Error::shape(format!(
                "add_channel expects x [B, C, T] and e [B, C], got {xs:?} and {es:?}"
            )));
        }
        let t = xs[2];
        let ev = self.value(e);
        let out = self
            .value(x)
            .chunks(t)
            .zip(ev)
            .flat_map(|(row, &bias)| row.iter().map(move |&v| v + bias))
            .collect();
        let rg = self.rg(x) || self.rg(e);
        Ok(self.push(xs, out, Op::AddChannel { x, e }, rg))
    }

    pub fn scale(&mut self, x: Var, c: R) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, Op::Scale { x, c }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum::<R>();
        let rg = self.rg(x);
        self.push(vec![], vec![s], Op::Sum { x }, rg)
    }

    /// `mean |x - target|` over all elements; `target` is a constant.
    pub fn mean_abs_diff(&mut self, x: Var, target: &[R]) -> Result<Var> {
        if self.value(x).len() != target.len() {
            return Err(Error::LengthMismatch {
                context: "mean_abs_diff",
                expected: self.value(x).len(),
                got: target.len(),
            });
        }
        if target.is_empty() {
            return Err(Error::invalid("mean_abs_diff on empty tensor"));
        }
        let n = R::of(target.len() as f64);
        let total = self
            .value(x)
            .iter()
            .zip(target)
            .map(|(&p, &q)| (p - q).abs())
            .sum::<R>();
        let rg = self.rg(x);
        Ok(self.push(
            vec![],
            vec![total / n],
            Op::MeanAbsDiff {
                x,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse-mode pass from a scalar `loss`. Only one pass per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autograd(
                "backward already ran on this graph; reset it before running again".into(),
            ));
        }
        if self.node(loss).value.len() != 1 || !self.node(loss).shape.is_empty() {
            return Err(Error::Autograd(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<R>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![R::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<R>>], v: Var, g: Vec<R>) {
        match &mut grads[v.0] {
            Some(existing) => add_into(existing, &g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, gy: &[R], grads: &mut [Option<Vec<R>>]) {
        match &self.nodes[i].op {
            Op::Constant | Op::Param => {}
            Op::Conv1d {
                x,
                w,
                bias,
                stride,
                dilation,
                pad_left,
            } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (b, cin, t_in) = (xs[0], xs[1], xs[2]);
                let (cout, k) = (ws[0], ws[2]);
                let t_out = self.nodes[i].shape[2];
                let geom = ConvGeom {
                    cin,
                    cout,
                    k,
                    t_in,
                    t_out,
                    stride: *stride,
                    dilation: *dilation,
                    pad_left: *pad_left,
                };
                let xv = self.value(*x);
                let wv = self.value(*w);
                let need_dx = self.rg(*x);
                let need_dw = self.rg(*w);
                let need_db = bias.is_some_and(|bb| self.rg(bb));
                let per_batch = |bi: usize| {
                    let mut dx = need_dx.then(|| vec![R::zero(); cin * t_in]);
                    let mut dw = need_dw.then(|| vec![R::zero(); cout * cin * k]);
                    let mut db = need_db.then(|| vec![R::zero(); cout]);
                    conv_backward_one(
                        &geom,
                        &xv[bi * cin * t_in..(bi + 1) * cin * t_in],
                        wv,
                        &gy[bi * cout * t_out..(bi + 1) * cout * t_out],
                        dx.as_deref_mut(),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    (dx, dw, db)
                };
                let work = cin * cout * k * t_out;
                let parts: Vec<_> = if b > 1 && work >= PAR_THRESHOLD {
                    (0..b).into_par_iter().map(per_batch).collect()
                } else {
                    (0..b).map(per_batch).collect()
                };
                let mut dx_all = need_dx.then(|| Vec::with_capacity(b * cin * t_in));
                let mut dw_all = need_dw.then(|| vec![R::zero(); cout * cin * k]);
                let mut db_all = need_db.then(|| vec![R::zero(); cout]);
                // fixed batch order keeps the reduction deterministic
                for (dx, dw, db) in parts {
                    if let (Some(all), Some(part)) = (dx_all.as_mut(), dx) {
                        all.extend(part);
                    }
                    if let (Some(all), Some(part)) = (dw_all.as_mut(), dw) {
                        add_into(all, &part);
                    }
                    if let (Some(all), Some(part)) = (db_all.as_mut(), db) {
                        add_into(all, &part);
                    }
                }
                if let Some(g) = dx_all {
                    self.accumulate(grads, *x, g);
                }
                if let Some(g) = dw_all {
                    self.accumulate(grads, *w, g);
                }
                if let (Some(g), Some(bb)) = (db_all, bias) {
                    self.accumulate(grads, *bb, g);
                }
            }
            Op::Upsample { x, factor } => {
                let g: Vec<R> = gy
                    .chunks(*factor)
                    .map(|c| c.iter().copied().sum::<R>())
                    .collect();
                self.accumulate(grads, *x, g);
            }
            Op::LeakyRelu { x, slope } => {
                let g = self
                    .value(*x)
                    .iter()
                    .zip(gy)
                    .map(|(&v, &d)| if v > R::zero() { d } else { *slope * d })
                    .collect();
                self.accumulate(grads, *x, g);
            }
            Op::Add { a, b } => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, gy.to_vec());
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, gy.to_vec());
                }
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    let g = gy
                        .iter()
                        .zip(self.value(*b))
                        .map(|(&d, &v)| d * v)
                        .collect();
                    self.accumulate(grads, *a, g);
                }
                if self.rg(*b) {
                    let g = gy
                        .iter()
                        .zip(self.value(*a))
                        .map(|(&d, &v)| d * v)
                        .collect();
                    self.accumulate(grads, *b, g);
                }
            }
            Op::AddChannel { x, e } => {
                if self.rg(*x) {
                    self.accumulate(grads, *x, gy.to_vec());
                }
                if self.rg(*e) {
                    let t = self.shape(*x)[2];
                    let g = gy.chunks(t).map(|c| c.iter().copied().sum::<R>()).collect();
                    self.accumulate(grads, *e, g);
                }
            }
            Op::Scale { x, c } => {
                let g = gy.iter().map(|&d| d * *c).collect();
                self.accumulate(grads, *x, g);
            }
            Op::Sum { x } => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![gy[0]; n]);
            }
            Op::MeanAbsDiff { x, target } => {
                let scale = gy[0] / R::of(target.len() as f64);
                let g = self
                    .value(*x)
                    .iter()
                    .zip(target)
                    .map(|(&p, &q)| {
                        let d = p - q;
                        if d > R::zero() {
                            scale
                        } else if d < R::zero() {
                            -scale
                        } else {
                            R::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, g);
            }
        }
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[R]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copies parameter gradients into the store. Parameters the loss does
    /// not reach receive zeros.
    pub fn write_grads(&self, bound: &Bound, store: &mut ParamStore<R>) -> Result<()> {
        if !self.backward_done {
            return Err(Error::Autograd("write_grads before backward".into()));
        }
        for (i, (_, t)) in store.iter_mut().enumerate() {
            let v = bound.vars[i];
            let g = self
                .grad(v)
                .map(<[R]>::to_vec)
                .unwrap_or_else(|| vec![R::zero(); t.len()]);
            t.set_grad(g)?;
        }
        Ok(())
    }

    /// Drops recorded gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }
}
