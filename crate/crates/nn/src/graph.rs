//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! Parameters enter either as trainable nodes (their gradients are collected
//! into [`ParamGrads`]) or as constants, which is how frozen networks take
//! part in a pass: gradients still flow through them to their inputs.

use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{dims5, shape_like, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Var, pad: [usize; 3] },
    AvgPool { x: Var, f: [usize; 3] },
    Upsample { x: Var, f: [usize; 3] },
    Concat { a: Var, b: Var },
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Clamp { x: Var, lo: T, hi: T },
    Add(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Normalize(Var),
    Reshape(Var),
    MeanSpatial(Var),
}

pub struct Graph<T> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Input or constant; receives a gradient but is never updated.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// A parameter of `store`. When `trainable` is false the value enters as a constant.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId, trainable: bool) -> Var {
        let value = store.get(id).clone();
        if trainable {
            self.push(value, Op::Param(id))
        } else {
            self.push(value, Op::Leaf)
        }
    }

    /// Stride-1 convolution over rank-4 `[n,c,h,w]` or rank-5 `[n,c,d,h,w]`
    /// inputs with a rank-5 kernel `[o,c,kd,kh,kw]` and zero padding.
    pub fn conv(&mut self, x: Var, w: Var, b: Var, pad: [usize; 3]) -> Var {
        let out = conv_forward(self.value(x), self.value(w), self.value(b), pad);
        self.push(out, Op::Conv { x, w, b, pad })
    }

    /// Average pooling with non-overlapping blocks of size `f` (`[fd, fh, fw]`).
    pub fn avg_pool(&mut self, x: Var, f: [usize; 3]) -> Var {
        let out = avg_pool_forward(self.value(x), f);
        self.push(out, Op::AvgPool { x, f })
    }

    /// Nearest-neighbour upsampling by integer factors.
    pub fn upsample(&mut self, x: Var, f: [usize; 3]) -> Var {
        let out = upsample_forward(self.value(x), f);
        self.push(out, Op::Upsample { x, f })
    }

    /// Channel concatenation (dimension 1).
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (n, ca, sa) = dims5(va.shape());
        let (nb, cb, sb) = dims5(vb.shape());
        assert_eq!((n, sa), (nb, sb), "concat: incompatible shapes");
        let vol = sa.iter().product::<usize>();
        let mut data = Vec::with_capacity(va.numel() + vb.numel());
        for i in 0..n {
            data.extend_from_slice(&va.data()[i * ca * vol..(i + 1) * ca * vol]);
            data.extend_from_slice(&vb.data()[i * cb * vol..(i + 1) * cb * vol]);
        }
        let shape = shape_like(va.shape(), n, ca + cb, sa);
        let out = Tensor::from_vec(&shape, data).expect("concat shape");
        self.push(out, Op::Concat { a, b })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::of(slope);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        self.push(out, Op::LeakyRelu(x, s))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(out, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::tanh);
        self.push(out, Op::Tanh(x))
    }

    /// Elementwise clamp; the gradient passes only where the input is inside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::of(lo), T::of(hi));
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(out, Op::Clamp { x, lo, hi })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// `x [n, in] · wᵀ + b` with `w [out, in]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (n, din) = (vx.shape()[0], vx.shape()[1]);
        let dout = vw.shape()[0];
        assert_eq!(vw.shape()[1], din, "linear: input width mismatch");
        let mut data = Vec::with_capacity(n * dout);
        for i in 0..n {
            let row = &vx.data()[i * din..(i + 1) * din];
            for o in 0..dout {
                let wrow = &vw.data()[o * din..(o + 1) * din];
                data.push(dot(row, wrow) + vb.data()[o]);
            }
        }
        let out = Tensor::from_vec(&[n, dout], data).expect("linear shape");
        self.push(out, Op::Linear { x, w, b })
    }

    /// Row-wise L2 normalization of `[n, d]`.
    pub fn normalize(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (n, d) = (vx.shape()[0], vx.shape()[1]);
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(d).take(n) {
            let norm = row_norm(row);
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let out = Tensor::from_vec(&[n, d], data).expect("normalize shape");
        self.push(out, Op::Normalize(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self
            .value(x)
            .clone()
            .reshape(shape)
            .expect("reshape: element count mismatch");
        self.push(out, Op::Reshape(x))
    }

    /// Mean over all spatial positions: `[n, c, ...] -> [n, c]`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (n, c) = (vx.shape()[0], vx.shape()[1]);
        let vol = vx.numel() / (n * c).max(1);
        let inv = T::one() / T::of(vol as f64);
        let data = vx
            .data()
            .chunks(vol)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::from_vec(&[n, c], data).expect("mean shape");
        self.push(out, Op::MeanSpatial(x))
    }

    /// Propagates the given output gradients back through the tape.
    pub fn backward(&self, seeds: Vec<(Var, Tensor<T>)>) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.values.len()];
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.values[v.0].shape(), "seed gradient shape");
            accumulate(&mut grads, v, g);
        }
        let mut params = ParamGrads::new(0);
        for idx in (0..self.values.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.ops[idx] {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Param(id) => params.accumulate(*id, &g),
                Op::Conv { x, w, b, pad } => {
                    let (gx, gw, gb) = conv_backward(&self.values[x.0], &self.values[w.0], &g, *pad);
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AvgPool { x, f } => {
                    let gx = avg_pool_backward(self.values[x.0].shape(), &g, *f);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Upsample { x, f } => {
                    let gx = upsample_backward(self.values[x.0].shape(), &g, *f);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Concat { a, b } => {
                    let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
                    let (n, ca, s) = dims5(sa);
                    let (_, cb, _) = dims5(sb);
                    let vol = s.iter().product::<usize>();
                    let mut ga = Vec::with_capacity(n * ca * vol);
                    let mut gb = Vec::with_capacity(n * cb * vol);
                    for chunk in g.data().chunks((ca + cb) * vol) {
                        ga.extend_from_slice(&chunk[..ca * vol]);
                        gb.extend_from_slice(&chunk[ca * vol..]);
                    }
                    accumulate(&mut grads, *a, Tensor::from_vec(sa, ga).expect("concat grad"));
                    accumulate(&mut grads, *b, Tensor::from_vec(sb, gb).expect("concat grad"));
                }
                Op::Relu(x) => {
                    let gx = zip_map(&g, &self.values[x.0], |g, v| if v > T::zero() { g } else { T::zero() });
                    accumulate(&mut grads, *x, gx);
                }
                Op::LeakyRelu(x, s) => {
                    let s = *s;
                    let gx = zip_map(&g, &self.values[x.0], |g, v| if v > T::zero() { g } else { g * s });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let gx = zip_map(&g, &self.values[idx], |g, y| g * y * (T::one() - y));
                    accumulate(&mut grads, *x, gx);
                }
                Op::Tanh(x) => {
                    let gx = zip_map(&g, &self.values[idx], |g, y| g * (T::one() - y * y));
                    accumulate(&mut grads, *x, gx);
                }
                Op::Clamp { x, lo, hi } => {
                    let (lo, hi) = (*lo, *hi);
                    let gx = zip_map(&g, &self.values[x.0], |g, v| if v >= lo && v <= hi { g } else { T::zero() });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Linear { x, w, b } => {
                    let (vx, vw) = (&self.values[x.0], &self.values[w.0]);
                    let (n, din) = (vx.shape()[0], vx.shape()[1]);
                    let dout = vw.shape()[0];
                    let mut gx = vec![T::zero(); n * din];
                    let mut gw = vec![T::zero(); dout * din];
                    let mut gb = vec![T::zero(); dout];
                    for i in 0..n {
                        let row = &vx.data()[i * din..(i + 1) * din];
                        let grow = &mut gx[i * din..(i + 1) * din];
                        for o in 0..dout {
                            let go = g.data()[i * dout + o];
                            gb[o] += go;
                            axpy(go, &vw.data()[o * din..(o + 1) * din], grow);
                            axpy(go, row, &mut gw[o * din..(o + 1) * din]);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(vx.shape(), gx).expect("linear grad"));
                    accumulate(&mut grads, *w, Tensor::from_vec(vw.shape(), gw).expect("linear grad"));
                    accumulate(&mut grads, *b, Tensor::from_vec(&[dout], gb).expect("linear grad"));
                }
                Op::Normalize(x) => {
                    let vx = &self.values[x.0];
                    let vy = &self.values[idx];
                    let d = vx.shape()[1];
                    let mut gx = Vec::with_capacity(vx.numel());
                    for ((xr, yr), gr) in vx.data().chunks(d).zip(vy.data().chunks(d)).zip(g.data().chunks(d)) {
                        let norm = row_norm(xr);
                        let yg = dot(yr, gr);
                        gx.extend(yr.iter().zip(gr).map(|(&y, &g)| (g - y * yg) / norm));
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(vx.shape(), gx).expect("normalize grad"));
                }
                Op::Reshape(x) => {
                    let gx = g.reshape(self.values[x.0].shape()).expect("reshape grad");
                    accumulate(&mut grads, *x, gx);
                }
                Op::MeanSpatial(x) => {
                    let vx = &self.values[x.0];
                    let (n, c) = (vx.shape()[0], vx.shape()[1]);
                    let vol = vx.numel() / (n * c).max(1);
                    let inv = T::one() / T::of(vol as f64);
                    let mut gx = Vec::with_capacity(vx.numel());
                    for &gv in g.data() {
                        gx.extend(std::iter::repeat(gv * inv).take(vol));
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(vx.shape(), gx).expect("mean grad"));
                }
            }
        }
        Grads { nodes: grads, params }
    }
}

/// Result of [`Graph::backward`].
pub struct Grads<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: ParamGrads<T>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient with respect to an input/constant node.
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> &ParamGrads<T> {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads<T> {
        self.params
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<T: Scalar>(g: &Tensor<T>, v: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = g.data().iter().zip(v.data()).map(|(&g, &v)| f(g, v)).collect();
    Tensor::from_vec(g.shape(), data).expect("same shape")
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y += alpha * x;
    }
}

fn row_norm<T: Scalar>(row: &[T]) -> T {
    dot(row, row).sqrt().max(T::of(1e-12))
}

/// Output range `[lo, hi)` of positions whose input index `o + k - p` lies in `[0, len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, k: usize, p: usize) -> (usize, usize) {
    let lo = p.saturating_sub(k);
    let hi = (in_len + p).saturating_sub(k).min(out_len);
    (lo, hi.max(lo))
}

struct ConvGeom {
    n: usize,
    c: usize,
    o: usize,
    s: [usize; 3],
    k: [usize; 3],
    os: [usize; 3],
}

fn conv_geom(xs: &[usize], ws: &[usize], pad: [usize; 3]) -> ConvGeom {
    let (n, c, s) = dims5(xs);
    let &[o, cw, kd, kh, kw] = ws else {
        panic!("conv kernel must be rank 5, got {ws:?}")
    };
    assert_eq!(c, cw, "conv: channel mismatch");
    let k = [kd, kh, kw];
    let os = [0, 1, 2].map(|i| s[i] + 2 * pad[i] + 1 - k[i]);
    ConvGeom { n, c, o, s, k, os }
}

fn conv_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, pad: [usize; 3]) -> Tensor<T> {
    let ConvGeom { n, c, o, s, k, os } = conv_geom(x.shape(), w.shape(), pad);
    let (ivol, ovol) = (s.iter().product::<usize>(), os.iter().product::<usize>());
    let mut out = vec![T::zero(); n * o * ovol];
    let (xd, wd) = (x.data(), w.data());
    for ni in 0..n {
        for oi in 0..o {
            let obase = (ni * o + oi) * ovol;
            out[obase..obase + ovol].iter_mut().for_each(|v| *v = b.data()[oi]);
            for ci in 0..c {
                let ibase = (ni * c + ci) * ivol;
                for a in 0..k[0] {
                    let (z0, z1) = valid_range(os[0], s[0], a, pad[0]);
                    for bq in 0..k[1] {
                        let (y0, y1) = valid_range(os[1], s[1], bq, pad[1]);
                        for cq in 0..k[2] {
                            let (x0, x1) = valid_range(os[2], s[2], cq, pad[2]);
                            let wv = wd[(((oi * c + ci) * k[0] + a) * k[1] + bq) * k[2] + cq];
                            for z in z0..z1 {
                                let zi = z + a - pad[0];
                                for y in y0..y1 {
                                    let yi = y + bq - pad[1];
                                    let orow = obase + (z * os[1] + y) * os[2];
                                    let irow = ibase + (zi * s[1] + yi) * s[2];
                                    let xi0 = x0 + cq - pad[2];
                                    axpy(wv, &xd[irow + xi0..irow + xi0 + (x1 - x0)], &mut out[orow + x0..orow + x1]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let shape = shape_like(x.shape(), n, o, os);
    Tensor::from_vec(&shape, out).expect("conv shape")
}

fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    pad: [usize; 3],
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let ConvGeom { n, c, o, s, k, os } = conv_geom(x.shape(), w.shape(), pad);
    let (ivol, ovol) = (s.iter().product::<usize>(), os.iter().product::<usize>());
    let mut gx = vec![T::zero(); x.numel()];
    let mut gw = vec![T::zero(); w.numel()];
    let mut gb = vec![T::zero(); o];
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    for ni in 0..n {
        for oi in 0..o {
            let obase = (ni * o + oi) * ovol;
            gb[oi] += gd[obase..obase + ovol].iter().copied().sum::<T>();
            for ci in 0..c {
                let ibase = (ni * c + ci) * ivol;
                for a in 0..k[0] {
                    let (z0, z1) = valid_range(os[0], s[0], a, pad[0]);
                    for bq in 0..k[1] {
                        let (y0, y1) = valid_range(os[1], s[1], bq, pad[1]);
                        for cq in 0..k[2] {
                            let (x0, x1) = valid_range(os[2], s[2], cq, pad[2]);
                            let widx = (((oi * c + ci) * k[0] + a) * k[1] + bq) * k[2] + cq;
                            let wv = wd[widx];
                            let mut acc = T::zero();
                            for z in z0..z1 {
                                let zi = z + a - pad[0];
                                for y in y0..y1 {
                                    let yi = y + bq - pad[1];
                                    let orow = obase + (z * os[1] + y) * os[2];
                                    let irow = ibase + (zi * s[1] + yi) * s[2];
                                    let xi0 = x0 + cq - pad[2];
                                    let grow = &gd[orow + x0..orow + x1];
                                    acc += dot(grow, &xd[irow + xi0..irow + xi0 + (x1 - x0)]);
                                    axpy(wv, grow, &mut gx[irow + xi0..irow + xi0 + (x1 - x0)]);
                                }
                            }
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::from_vec(x.shape(), gx).expect("conv grad x"),
        Tensor::from_vec(w.shape(), gw).expect("conv grad w"),
        Tensor::from_vec(&[o], gb).expect("conv grad b"),
    )
}

fn pooled_dims(shape: &[usize], f: [usize; 3]) -> (usize, usize, [usize; 3], [usize; 3]) {
    let (n, c, s) = dims5(shape);
    for i in 0..3 {
        assert!(f[i] > 0 && s[i] % f[i] == 0, "pool factor {f:?} does not divide {s:?}");
    }
    (n, c, s, [s[0] / f[0], s[1] / f[1], s[2] / f[2]])
}

fn avg_pool_forward<T: Scalar>(x: &Tensor<T>, f: [usize; 3]) -> Tensor<T> {
    let (n, c, s, ps) = pooled_dims(x.shape(), f);
    let inv = T::one() / T::of((f[0] * f[1] * f[2]) as f64);
    let pvol = ps.iter().product::<usize>();
    let ivol = s.iter().product::<usize>();
    let mut out = vec![T::zero(); n * c * pvol];
    for nc in 0..n * c {
        for z in 0..s[0] {
            for y in 0..s[1] {
                for xq in 0..s[2] {
                    let o = nc * pvol + ((z / f[0]) * ps[1] + y / f[1]) * ps[2] + xq / f[2];
                    out[o] += x.data()[nc * ivol + (z * s[1] + y) * s[2] + xq];
                }
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::from_vec(&shape_like(x.shape(), n, c, ps), out).expect("pool shape")
}

fn avg_pool_backward<T: Scalar>(xshape: &[usize], g: &Tensor<T>, f: [usize; 3]) -> Tensor<T> {
    let (n, c, s, ps) = pooled_dims(xshape, f);
    let inv = T::one() / T::of((f[0] * f[1] * f[2]) as f64);
    let pvol = ps.iter().product::<usize>();
    let ivol = s.iter().product::<usize>();
    let mut gx = vec![T::zero(); n * c * ivol];
    for nc in 0..n * c {
        for z in 0..s[0] {
            for y in 0..s[1] {
                for xq in 0..s[2] {
                    let o = nc * pvol + ((z / f[0]) * ps[1] + y / f[1]) * ps[2] + xq / f[2];
                    gx[nc * ivol + (z * s[1] + y) * s[2] + xq] = g.data()[o] * inv;
                }
            }
        }
    }
    Tensor::from_vec(xshape, gx).expect("pool grad")
}

fn upsample_forward<T: Scalar>(x: &Tensor<T>, f: [usize; 3]) -> Tensor<T> {
    let (n, c, s) = dims5(x.shape());
    let us = [s[0] * f[0], s[1] * f[1], s[2] * f[2]];
    let (ivol, uvol) = (s.iter().product::<usize>(), us.iter().product::<usize>());
    let mut out = Vec::with_capacity(n * c * uvol);
    for nc in 0..n * c {
        for z in 0..us[0] {
            for y in 0..us[1] {
                let row = nc * ivol + ((z / f[0]) * s[1] + y / f[1]) * s[2];
                out.extend((0..us[2]).map(|xq| x.data()[row + xq / f[2]]));
            }
        }
    }
    Tensor::from_vec(&shape_like(x.shape(), n, c, us), out).expect("upsample shape")
}

fn upsample_backward<T: Scalar>(xshape: &[usize], g: &Tensor<T>, f: [usize; 3]) -> Tensor<T> {
    let (n, c, s) = dims5(xshape);
    let us = [s[0] * f[0], s[1] * f[1], s[2] * f[2]];
    let (ivol, uvol) = (s.iter().product::<usize>(), us.iter().product::<usize>());
    let mut gx = vec![T::zero(); n * c * ivol];
    for nc in 0..n * c {
        for z in 0..us[0] {
            for y in 0..us[1] {
                let row = nc * ivol + ((z / f[0]) * s[1] + y / f[1]) * s[2];
                let grow = nc * uvol + (z * us[1] + y) * us[2];
                for xq in 0..us[2] {
                    gx[row + xq / f[2]] += g.data()[grow + xq];
                }
            }
        }
    }
    Tensor::from_vec(xshape, gx).expect("upsample grad")
}
