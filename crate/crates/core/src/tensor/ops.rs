use serde::{Deserialize, Serialize};

use super::tape::{Node, Tape, Var};
use super::{Element, Tensor};
use crate::error::{Error, Result};

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Zero padding so the output length equals the input length.
    #[default]
    Same,
    /// No padding; output length is `L - K + 1`.
    Valid,
}

/// Elementwise maps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Log,
    Pow(f64),
    AddScalar(f64),
    MulScalar(f64),
}

/// Running statistics of one batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T = f32> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Element> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: BATCHNORM_MOMENTUM,
            eps: BATCHNORM_EPS,
        }
    }
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    AddRowBias {
        x: Var,
        bias: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Lincomb {
        a: Var,
        b: Var,
        wa: f64,
        wb: f64,
    },
    Unary {
        x: Var,
        kind: Unary,
    },
    Softmax {
        x: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<f64>,
        geom: BnGeom,
        train: bool,
    },
    Reshape {
        x: Var,
    },
    ConcatCols {
        a: Var,
        b: Var,
        rows: usize,
        ca: usize,
        cb: usize,
    },
    Scale {
        x: Var,
        s: Var,
    },
    MulConst {
        x: Var,
        factor: Vec<T>,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    SumLast {
        x: Var,
        cols: usize,
    },
    Pick {
        x: Var,
        index: Vec<usize>,
        cols: usize,
    },
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    batch: usize,
    c_in: usize,
    len: usize,
    c_out: usize,
    kernel: usize,
    pad_left: usize,
    len_out: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BnGeom {
    batch: usize,
    channels: usize,
    len: usize,
}

impl BnGeom {
    #[inline]
    fn at(&self, b: usize, c: usize, t: usize) -> usize {
        (b * self.channels + c) * self.len + t
    }
}

fn sum_wide<T: Element>(xs: impl IntoIterator<Item = T>) -> f64 {
    xs.into_iter().map(Element::wide).sum()
}

fn zeros<T: Element>(n: usize) -> Vec<T> {
    vec![T::zero(); n]
}

impl<T: Element> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::AddRowBias { x, bias } => vec![*x, *bias],
            Op::Add(a, b) | Op::Mul(a, b) | Op::Lincomb { a, b, .. } => vec![*a, *b],
            Op::Unary { x, .. }
            | Op::Softmax { x }
            | Op::MaxPool { x, .. }
            | Op::Reshape { x }
            | Op::MulConst { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::SumLast { x, .. }
            | Op::Pick { x, .. } => vec![*x],
            Op::Conv1d { x, w, b, .. } => vec![*x, *w, *b],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatCols { a, b, .. } => vec![*a, *b],
            Op::Scale { x, s } => vec![*x, *s],
        }
    }

    /// Vector-Jacobian products for every input that needs a gradient.
    pub(crate) fn backward(
        &self,
        nodes: &[Node<T>],
        out: &Tensor<T>,
        dy: &[T],
    ) -> Vec<(Var, Vec<T>)> {
        let needs = |v: &Var| nodes[v.0].requires_grad;
        let val = |v: &Var| nodes[v.0].value.data();
        let mut grads = Vec::new();
        match self {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (val(a), val(b));
                if needs(a) {
                    let mut da = zeros(m * k);
                    for i in 0..m {
                        let dyr = &dy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let br = &bv[p * n..(p + 1) * n];
                            let s: f64 = dyr.iter().zip(br).map(|(x, y)| x.wide() * y.wide()).sum();
                            da[i * k + p] = T::lit(s);
                        }
                    }
                    grads.push((*a, da));
                }
                if needs(b) {
                    let mut acc = vec![0f64; k * n];
                    for i in 0..m {
                        let dyr = &dy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p].wide();
                            let row = &mut acc[p * n..(p + 1) * n];
                            for (r, g) in row.iter_mut().zip(dyr) {
                                *r += x * g.wide();
                            }
                        }
                    }
                    grads.push((*b, acc.into_iter().map(T::lit).collect()));
                }
            }
            Op::AddRowBias { x, bias } => {
                if needs(x) {
                    grads.push((*x, dy.to_vec()));
                }
                if needs(bias) {
                    let n = nodes[bias.0].value.len();
                    let mut acc = vec![0f64; n];
                    for row in dy.chunks(n) {
                        for (a, g) in acc.iter_mut().zip(row) {
                            *a += g.wide();
                        }
                    }
                    grads.push((*bias, acc.into_iter().map(T::lit).collect()));
                }
            }
            Op::Add(a, b) => {
                if needs(a) {
                    grads.push((*a, dy.to_vec()));
                }
                if needs(b) {
                    grads.push((*b, dy.to_vec()));
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    grads.push((*a, dy.iter().zip(val(b)).map(|(g, y)| *g * *y).collect()));
                }
                if needs(b) {
                    grads.push((*b, dy.iter().zip(val(a)).map(|(g, x)| *g * *x).collect()));
                }
            }
            Op::Lincomb { a, b, wa, wb } => {
                for (v, w) in [(a, *wa), (b, *wb)] {
                    if needs(v) {
                        grads.push((*v, dy.iter().map(|g| T::lit(g.wide() * w)).collect()));
                    }
                }
            }
            Op::Unary { x, kind } => {
                let xv = val(x);
                let y = out.data();
                let g: Vec<T> = match *kind {
                    Unary::Relu => dy
                        .iter()
                        .zip(xv)
                        .map(|(g, x)| if *x > T::zero() { *g } else { T::zero() })
                        .collect(),
                    Unary::Sigmoid => dy
                        .iter()
                        .zip(y)
                        .map(|(g, y)| *g * *y * (T::one() - *y))
                        .collect(),
                    Unary::Log => dy.iter().zip(xv).map(|(g, x)| *g / *x).collect(),
                    Unary::Pow(e) => {
                        let e_t = T::lit(e);
                        let em1 = T::lit(e - 1.0);
                        dy.iter()
                            .zip(xv)
                            .map(|(g, x)| *g * e_t * x.powf(em1))
                            .collect()
                    }
                    Unary::AddScalar(_) => dy.to_vec(),
                    Unary::MulScalar(c) => {
                        let c = T::lit(c);
                        dy.iter().map(|g| *g * c).collect()
                    }
                };
                grads.push((*x, g));
            }
            Op::Softmax { x } => {
                let y = out.data();
                let n = *out.shape().last().unwrap_or(&1);
                let mut g = zeros(y.len());
                for ((gr, yr), dr) in g.chunks_mut(n).zip(y.chunks(n)).zip(dy.chunks(n)) {
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a.wide() * b.wide()).sum();
                    for ((o, yi), di) in gr.iter_mut().zip(yr).zip(dr) {
                        *o = T::lit(yi.wide() * (di.wide() - dot));
                    }
                }
                grads.push((*x, g));
            }
            Op::Conv1d { x, w, b, geom } => {
                let g = *geom;
                let (xv, wv) = (val(x), val(w));
                let k = g.kernel;
                let x_at = |bi: usize, c: usize| bi * g.c_in * g.len + c * g.len;
                let y_at = |bi: usize, o: usize| bi * g.c_out * g.len_out + o * g.len_out;
                if needs(x) {
                    let mut dx = vec![0f64; xv.len()];
                    for bi in 0..g.batch {
                        for o in 0..g.c_out {
                            let dyr = &dy[y_at(bi, o)..y_at(bi, o) + g.len_out];
                            for c in 0..g.c_in {
                                let xo = x_at(bi, c);
                                for kk in 0..k {
                                    let wk = wv[(o * g.c_in + c) * k + kk].wide();
                                    let (lo, hi) = valid_range(g, kk);
                                    for t in lo..hi {
                                        dx[xo + t + kk - g.pad_left] += wk * dyr[t].wide();
                                    }
                                }
                            }
                        }
                    }
                    grads.push((*x, dx.into_iter().map(T::lit).collect()));
                }
                if needs(w) {
                    let mut dw = vec![0f64; wv.len()];
                    for bi in 0..g.batch {
                        for o in 0..g.c_out {
                            let dyr = &dy[y_at(bi, o)..y_at(bi, o) + g.len_out];
                            for c in 0..g.c_in {
                                let xr = &xv[x_at(bi, c)..x_at(bi, c) + g.len];
                                for kk in 0..k {
                                    let (lo, hi) = valid_range(g, kk);
                                    let mut s = 0f64;
                                    for t in lo..hi {
                                        s += dyr[t].wide() * xr[t + kk - g.pad_left].wide();
                                    }
                                    dw[(o * g.c_in + c) * k + kk] += s;
                                }
                            }
                        }
                    }
                    grads.push((*w, dw.into_iter().map(T::lit).collect()));
                }
                if needs(b) {
                    let mut db = vec![0f64; g.c_out];
                    for bi in 0..g.batch {
                        for (o, acc) in db.iter_mut().enumerate() {
                            *acc += sum_wide(dy[y_at(bi, o)..y_at(bi, o) + g.len_out].iter().copied());
                        }
                    }
                    grads.push((*b, db.into_iter().map(T::lit).collect()));
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = zeros(nodes[x.0].value.len());
                for (src, g) in argmax.iter().zip(dy) {
                    dx[*src] = dx[*src] + *g;
                }
                grads.push((*x, dx));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                geom,
                train,
            } => {
                let gm = val(gamma);
                let count = (geom.batch * geom.len) as f64;
                let mut dgamma = vec![0f64; geom.channels];
                let mut dbeta = vec![0f64; geom.channels];
                for c in 0..geom.channels {
                    for b in 0..geom.batch {
                        for t in 0..geom.len {
                            let i = geom.at(b, c, t);
                            dgamma[c] += dy[i].wide() * xhat[i].wide();
                            dbeta[c] += dy[i].wide();
                        }
                    }
                }
                if needs(x) {
                    let mut dx = zeros(dy.len());
                    for c in 0..geom.channels {
                        let gc = gm[c].wide();
                        let is = inv_std[c];
                        for b in 0..geom.batch {
                            for t in 0..geom.len {
                                let i = geom.at(b, c, t);
                                let dxhat = dy[i].wide() * gc;
                                dx[i] = if *train {
                                    // dxhat sums are dbeta*gamma and dgamma*gamma
                                    let v = count * dxhat - dbeta[c] * gc - xhat[i].wide() * dgamma[c] * gc;
                                    T::lit(is / count * v)
                                } else {
                                    T::lit(dxhat * is)
                                };
                            }
                        }
                    }
                    grads.push((*x, dx));
                }
                if needs(gamma) {
                    grads.push((*gamma, dgamma.into_iter().map(T::lit).collect()));
                }
                if needs(beta) {
                    grads.push((*beta, dbeta.into_iter().map(T::lit).collect()));
                }
            }
            Op::Reshape { x } => grads.push((*x, dy.to_vec())),
            Op::ConcatCols { a, b, rows, ca, cb } => {
                let w = ca + cb;
                if needs(a) {
                    let mut g = Vec::with_capacity(rows * ca);
                    for r in 0..*rows {
                        g.extend_from_slice(&dy[r * w..r * w + ca]);
                    }
                    grads.push((*a, g));
                }
                if needs(b) {
                    let mut g = Vec::with_capacity(rows * cb);
                    for r in 0..*rows {
                        g.extend_from_slice(&dy[r * w + ca..(r + 1) * w]);
                    }
                    grads.push((*b, g));
                }
            }
            Op::Scale { x, s } => {
                let sv = val(s)[0];
                if needs(x) {
                    grads.push((*x, dy.iter().map(|g| *g * sv).collect()));
                }
                if needs(s) {
                    let d: f64 = dy.iter().zip(val(x)).map(|(g, x)| g.wide() * x.wide()).sum();
                    grads.push((*s, vec![T::lit(d)]));
                }
            }
            Op::MulConst { x, factor } => {
                grads.push((*x, dy.iter().zip(factor).map(|(g, f)| *g * *f).collect()));
            }
            Op::Sum { x } => grads.push((*x, vec![dy[0]; nodes[x.0].value.len()])),
            Op::Mean { x } => {
                let n = nodes[x.0].value.len();
                let g = T::lit(dy[0].wide() / n as f64);
                grads.push((*x, vec![g; n]));
            }
            Op::SumLast { x, cols } => {
                let mut g = Vec::with_capacity(nodes[x.0].value.len());
                for d in dy {
                    g.extend(std::iter::repeat_n(*d, *cols));
                }
                grads.push((*x, g));
            }
            Op::Pick { x, index, cols } => {
                let mut g = zeros(nodes[x.0].value.len());
                for (r, (&j, d)) in index.iter().zip(dy).enumerate() {
                    g[r * cols + j] = *d;
                }
                grads.push((*x, g));
            }
        }
        grads
    }
}

/// Output positions `t` for which input index `t + kk - pad_left` lies inside the signal.
#[inline]
fn valid_range(g: ConvGeom, kk: usize) -> (usize, usize) {
    let lo = g.pad_left.saturating_sub(kk);
    let hi = (g.len + g.pad_left).saturating_sub(kk).min(g.len_out);
    (lo, hi.max(lo))
}

impl<T: Element> Tape<T> {
    fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Self::shape_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m * n);
        let mut acc = vec![0f64; n];
        for i in 0..m {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for p in 0..k {
                let x = av[i * k + p].wide();
                for (r, y) in acc.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *r += x * y.wide();
                }
            }
            out.extend(acc.iter().map(|&v| T::lit(v)));
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }))
    }

    /// Adds a `[n]` bias to every row of a `[m×n]` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Self::shape_err("add_row_bias", &sx, &sb));
        }
        let bv = self.value(bias).data().to_vec();
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(sx[1])
            .flat_map(|row| row.iter().zip(&bv).map(|(a, b)| *a + *b))
            .collect();
        let value = Tensor::new(sx, data)?;
        Ok(self.push(value, Op::AddRowBias { x, bias }))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Self::shape_err(op, sa, sb));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(sa.to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// `wa·a + wb·b`, evaluated in `f64` and rounded once.
    pub fn lincomb(&mut self, a: Var, wa: f64, b: Var, wb: f64) -> Result<Var> {
        let value = self.zip_same("lincomb", a, b, |x, y| T::lit(wa * x.wide() + wb * y.wide()))?;
        Ok(self.push(value, Op::Lincomb { a, b, wa, wb }))
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let xv = self.value(x);
        let strict_positive = match kind {
            Unary::Log => true,
            Unary::Pow(e) => e.fract() != 0.0 || e < 0.0,
            _ => false,
        };
        if strict_positive {
            let op = if matches!(kind, Unary::Log) { "log" } else { "pow" };
            if let Some((index, v)) = xv.data().iter().enumerate().find(|(_, v)| !(**v > T::zero())) {
                return Err(Error::Domain {
                    op,
                    index,
                    value: v.wide(),
                });
            }
        }
        let data: Vec<T> = match kind {
            Unary::Relu => xv.data().iter().map(|v| v.max(T::zero())).collect(),
            Unary::Sigmoid => xv
                .data()
                .iter()
                .map(|v| T::one() / (T::one() + (-*v).exp()))
                .collect(),
            Unary::Log => xv.data().iter().map(|v| v.ln()).collect(),
            Unary::Pow(e) => {
                let e = T::lit(e);
                xv.data().iter().map(|v| v.powf(e)).collect()
            }
            Unary::AddScalar(c) => {
                let c = T::lit(c);
                xv.data().iter().map(|v| *v + c).collect()
            }
            Unary::MulScalar(c) => {
                let c = T::lit(c);
                xv.data().iter().map(|v| *v * c).collect()
            }
        };
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Unary { x, kind }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu).expect("relu is total")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid).expect("sigmoid is total")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    pub fn pow(&mut self, x: Var, exponent: f64) -> Result<Var> {
        self.unary(x, Unary::Pow(exponent))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::AddScalar(c)).expect("add_scalar is total")
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::MulScalar(c)).expect("mul_scalar is total")
    }

    /// Softmax over the last axis, shifted by the row maximum.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = match xv.shape().last() {
            Some(&n) if n > 0 => n,
            _ => {
                return Err(Error::Contract(format!(
                    "softmax needs a non-empty last axis, got {:?}",
                    xv.shape()
                )))
            }
        };
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(n) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.wide()));
            let exps: Vec<f64> = row.iter().map(|v| (v.wide() - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| T::lit(e / total)));
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Softmax { x }))
    }

    /// Stride-1 cross-correlation. `x` is `[C_in×L]` or `[B×C_in×L]`, `w` is
    /// `[C_out×C_in×K]`, `bias` is `[C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Var, padding: Padding) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(bias).to_vec();
        let (batch, c_in, len, batched) = match sx.as_slice() {
            [c, l] => (1, *c, *l, false),
            [b, c, l] => (*b, *c, *l, true),
            _ => return Err(Self::shape_err("conv1d", &sx, &sw)),
        };
        if sw.len() != 3 || sw[1] != c_in || sw[2] == 0 {
            return Err(Self::shape_err("conv1d", &sx, &sw));
        }
        let (c_out, kernel) = (sw[0], sw[2]);
        if sb != [c_out] {
            return Err(Self::shape_err("conv1d bias", &sw, &sb));
        }
        let (pad_left, len_out) = match padding {
            Padding::Valid => {
                if kernel > len {
                    return Err(Error::InputTooShort {
                        op: "conv1d",
                        len,
                        kernel,
                    });
                }
                (0, len - kernel + 1)
            }
            Padding::Same => ((kernel - 1) / 2, len),
        };
        let geom = ConvGeom {
            batch,
            c_in,
            len,
            c_out,
            kernel,
            pad_left,
            len_out,
        };
        let (xv, wv, bv) = (
            self.value(x).data(),
            self.value(w).data(),
            self.value(bias).data(),
        );
        let mut out = Vec::with_capacity(batch * c_out * len_out);
        let mut acc = vec![0f64; len_out];
        for bi in 0..batch {
            for o in 0..c_out {
                acc.iter_mut().for_each(|v| *v = bv[o].wide());
                for c in 0..c_in {
                    let xr = &xv[(bi * c_in + c) * len..(bi * c_in + c + 1) * len];
                    for kk in 0..kernel {
                        let wk = wv[(o * c_in + c) * kernel + kk].wide();
                        let (lo, hi) = valid_range(geom, kk);
                        for t in lo..hi {
                            acc[t] += wk * xr[t + kk - pad_left].wide();
                        }
                    }
                }
                out.extend(acc.iter().map(|&v| T::lit(v)));
            }
        }
        let shape = if batched {
            vec![batch, c_out, len_out]
        } else {
            vec![c_out, len_out]
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Conv1d { x, w, b: bias, geom }))
    }

    /// Max over non-overlapping windows of the last axis; the trailing
    /// remainder is dropped and ties route to the lowest index.
    pub fn maxpool1d(&mut self, x: Var, pool: usize) -> Result<Var> {
        if pool == 0 {
            return Err(Error::Config("maxpool1d pool size must be at least 1".into()));
        }
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let Some(&len) = shape.last() else {
            return Err(Self::shape_err("maxpool1d", &shape, &[pool]));
        };
        let out_len = len / pool;
        let outer: usize = shape[..shape.len() - 1].iter().product();
        let mut data = Vec::with_capacity(outer * out_len);
        let mut argmax = Vec::with_capacity(outer * out_len);
        for r in 0..outer {
            let row = &xv.data()[r * len..(r + 1) * len];
            for j in 0..out_len {
                let mut best = j * pool;
                for i in j * pool + 1..(j + 1) * pool {
                    if row[i] > row[best] {
                        best = i;
                    }
                }
                data.push(row[best]);
                argmax.push(r * len + best);
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = out_len;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }))
    }

    /// Batch normalization over `[B×C×L]` (or `[B×C]`) per channel.
    ///
    /// In training mode the batch statistics normalize the input and update
    /// `state` (biased variance for normalization, unbiased for the running
    /// estimate). In eval mode the running statistics are used as constants.
    pub fn batchnorm1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
        train: bool,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let geom = match sx.as_slice() {
            [b, c] => BnGeom {
                batch: *b,
                channels: *c,
                len: 1,
            },
            [b, c, l] => BnGeom {
                batch: *b,
                channels: *c,
                len: *l,
            },
            _ => return Err(Self::shape_err("batchnorm1d", &sx, self.shape(gamma))),
        };
        let ch = [geom.channels];
        if self.shape(gamma) != ch || self.shape(beta) != ch || state.running_mean.shape() != ch {
            return Err(Self::shape_err("batchnorm1d", &sx, self.shape(gamma)));
        }
        let count = geom.batch * geom.len;
        if train && count < 2 {
            return Err(Error::DegenerateBatch {
                op: "batchnorm1d",
                per_channel: count,
            });
        }
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = zeros(xv.len());
        let mut out = zeros(xv.len());
        let mut inv_std = vec![0f64; geom.channels];
        for c in 0..geom.channels {
            let (mean, var) = if train {
                let mut s = 0f64;
                for b in 0..geom.batch {
                    for t in 0..geom.len {
                        s += xv[geom.at(b, c, t)].wide();
                    }
                }
                let mean = s / count as f64;
                let mut ss = 0f64;
                for b in 0..geom.batch {
                    for t in 0..geom.len {
                        let d = xv[geom.at(b, c, t)].wide() - mean;
                        ss += d * d;
                    }
                }
                let var = ss / count as f64;
                let m = state.momentum;
                let rm = &mut state.running_mean.data_mut()[c];
                *rm = T::lit((1.0 - m) * rm.wide() + m * mean);
                let unbiased = ss / (count - 1) as f64;
                let rv = &mut state.running_var.data_mut()[c];
                *rv = T::lit((1.0 - m) * rv.wide() + m * unbiased);
                (mean, var)
            } else {
                (
                    state.running_mean.data()[c].wide(),
                    state.running_var.data()[c].wide(),
                )
            };
            let is = 1.0 / (var + state.eps).sqrt();
            inv_std[c] = is;
            let (g, be) = (gv[c].wide(), bv[c].wide());
            for b in 0..geom.batch {
                for t in 0..geom.len {
                    let i = geom.at(b, c, t);
                    let h = (xv[i].wide() - mean) * is;
                    xhat[i] = T::lit(h);
                    out[i] = T::lit(g * h + be);
                }
            }
        }
        let value = Tensor::new(sx, out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                geom,
                train,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// Joins `[B×Da]` and `[B×Db]` into `[B×(Da+Db)]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Self::shape_err("concat_cols", &sa, &sb));
        }
        let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&av[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&bv[r * cb..(r + 1) * cb]);
        }
        let value = Tensor::new(vec![rows, ca + cb], data)?;
        Ok(self.push(value, Op::ConcatCols { a, b, rows, ca, cb }))
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Self::shape_err("scale", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).data()[0];
        let xv = self.value(x);
        let value = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| *v * sv).collect())?;
        Ok(self.push(value, Op::Scale { x, s }))
    }

    /// Elementwise product with a fixed (non-differentiable) factor, e.g. a dropout mask.
    pub fn mul_const(&mut self, x: Var, factor: Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != factor.shape() {
            return Err(Self::shape_err("mul_const", xv.shape(), factor.shape()));
        }
        let data = xv.data().iter().zip(factor.data()).map(|(a, b)| *a * *b).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(
            value,
            Op::MulConst {
                x,
                factor: factor.into_data(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = sum_wide(self.value(x).data().iter().copied());
        self.push(Tensor::scalar(T::lit(s)), Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let s = sum_wide(self.value(x).data().iter().copied()) / n as f64;
        Ok(self.push(Tensor::scalar(T::lit(s)), Op::Mean { x }))
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some((&cols, lead)) = shape.split_last() else {
            return Err(Error::Contract("sum_last on a rank-0 tensor".into()));
        };
        let data: Vec<T> = if cols == 0 {
            vec![T::zero(); lead.iter().product()]
        } else {
            self.value(x)
                .data()
                .chunks(cols)
                .map(|r| T::lit(sum_wide(r.iter().copied())))
                .collect()
        };
        let value = Tensor::new(lead.to_vec(), data)?;
        Ok(self.push(value, Op::SumLast { x, cols }))
    }

    /// `out[i] = x[i, index[i]]` for a `[B×C]` matrix.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != index.len() {
            return Err(Self::shape_err("pick", &shape, &[index.len()]));
        }
        let cols = shape[1];
        if let Some(bad) = index.iter().find(|&&j| j >= cols) {
            return Err(Error::Contract(format!("pick index {bad} out of range for {cols} columns")));
        }
        let xv = self.value(x).data();
        let data = index.iter().enumerate().map(|(r, &j)| xv[r * cols + j]).collect();
        let value = Tensor::new(vec![index.len()], data)?;
        Ok(self.push(
            value,
            Op::Pick {
                x,
                index: index.to_vec(),
                cols,
            },
        ))
    }
}
