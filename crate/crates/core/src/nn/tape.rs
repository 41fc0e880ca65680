//! Reverse-mode differentiation over a recorded sequence of tensor ops.

use super::tensor::Tensor;
use crate::scalar::Scalar;

pub type NodeId = usize;

const NORM_EPS: f64 = 1e-5;

/// A named, shaped block of trainable values.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> ParamTensor<T> {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

enum Op<T> {
    Input,
    Conv {
        x: NodeId,
        weight: usize,
        bias: usize,
        geom: ConvGeom,
        cols: Option<Vec<T>>,
    },
    InstanceNorm {
        x: NodeId,
        inv_std: Vec<T>,
    },
    Relu(NodeId),
    LeakyRelu(NodeId, T),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Add(NodeId, NodeId),
    Concat(NodeId, NodeId),
    Upsample2(NodeId),
    Softmax(NodeId),
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Grads<T> {
    /// One buffer per parameter tensor; empty when not requested.
    pub params: Vec<Vec<T>>,
    /// Gradient with respect to the first input node.
    pub input: Tensor<T>,
}

/// Forward trace of one network evaluation.
pub struct Tape<'p, T> {
    params: &'p [ParamTensor<T>],
    nodes: Vec<Node<T>>,
}

fn im2col<T: Scalar>(x: &Tensor<T>, g: ConvGeom, ho: usize, wo: usize) -> Vec<T> {
    let (h, w) = (x.height, x.width);
    let k = g.kernel;
    let n = ho * wo;
    let mut cols = vec![T::zero(); g.cin * k * k * n];
    for ci in 0..g.cin {
        let plane = x.channel(ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if g.stride == 1 {
                        // ix = ox + kx - pad
                        let lo = g.pad.saturating_sub(kx);
                        let hi = (w + g.pad).saturating_sub(kx).min(wo);
                        if lo < hi {
                            let s0 = lo + kx - g.pad;
                            dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: ConvGeom, h: usize, w: usize, ho: usize, wo: usize) -> Tensor<T> {
    let k = g.kernel;
    let n = ho * wo;
    let mut out = Tensor::zeros(g.cin, h, w);
    for ci in 0..g.cin {
        let plane = &mut out.data[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oy * wo..(oy + 1) * wo];
                    if g.stride == 1 {
                        let lo = g.pad.saturating_sub(kx);
                        let hi = (w + g.pad).saturating_sub(kx).min(wo);
                        if lo < hi {
                            let d0 = lo + kx - g.pad;
                            for (d, &s) in dst[d0..d0 + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                                *d += s;
                            }
                        }
                    } else {
                        for (ox, &s) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p [ParamTensor<T>]) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(64),
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn into_value(mut self, id: NodeId) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[id].value, Tensor::zeros(0, 0, 0))
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, x: Tensor<T>) -> NodeId {
        self.push(Op::Input, x)
    }

    pub fn conv(&mut self, x: NodeId, weight: usize, bias: usize, geom: ConvGeom) -> NodeId {
        let input = &self.nodes[x].value;
        debug_assert_eq!(input.channels, geom.cin);
        let (ho, wo) = (geom.out_size(input.height), geom.out_size(input.width));
        let n = ho * wo;
        let kk = geom.cin * geom.kernel * geom.kernel;
        let cols = if geom.is_pointwise() {
            None
        } else {
            Some(im2col(input, geom, ho, wo))
        };
        let w = &self.params[weight].data;
        let b = &self.params[bias].data;
        let mut out = Tensor::zeros(geom.cout, ho, wo);
        for (co, chunk) in out.data.chunks_mut(n).enumerate() {
            chunk.fill(b[co]);
        }
        let src: &[T] = cols.as_deref().unwrap_or(&input.data);
        T::gemm(
            geom.cout,
            kk,
            n,
            T::one(),
            w,
            kk as isize,
            1,
            src,
            n as isize,
            1,
            T::one(),
            &mut out.data,
            n as isize,
            1,
        );
        self.push(
            Op::Conv {
                x,
                weight,
                bias,
                geom,
                cols,
            },
            out,
        )
    }

    pub fn instance_norm(&mut self, x: NodeId) -> NodeId {
        let input = &self.nodes[x].value;
        let p = input.plane();
        let pn = T::from_usize(p).unwrap();
        let eps = T::lit(NORM_EPS);
        let mut out = input.clone();
        let mut inv_std = Vec::with_capacity(input.channels);
        for c in 0..input.channels {
            let ch = &mut out.data[c * p..(c + 1) * p];
            let mean = ch.iter().copied().sum::<T>() / pn;
            let var = ch.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / pn;
            let is = T::one() / (var + eps).sqrt();
            for v in ch.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(Op::InstanceNorm { x, inv_std }, out)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.map(|a| if a < T::zero() { T::zero() } else { a });
        self.push(Op::Relu(x), v)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let s = T::lit(slope);
        let v = self.nodes[x].value.map(|a| if a > T::zero() { a } else { a * s });
        self.push(Op::LeakyRelu(x, s), v)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.map(|a| a.tanh());
        self.push(Op::Tanh(x), v)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.map(|a| {
            if a >= T::zero() {
                T::one() / (T::one() + (-a).exp())
            } else {
                let e = a.exp();
                e / (T::one() + e)
            }
        });
        self.push(Op::Sigmoid(x), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.nodes[a].value.clone();
        v.add_assign(&self.nodes[b].value);
        self.push(Op::Add(a, b), v)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        debug_assert_eq!((ta.height, ta.width), (tb.height, tb.width));
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        data.extend_from_slice(&ta.data);
        data.extend_from_slice(&tb.data);
        let v = Tensor {
            channels: ta.channels + tb.channels,
            height: ta.height,
            width: ta.width,
            data,
        };
        self.push(Op::Concat(a, b), v)
    }

    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let input = &self.nodes[x].value;
        let (h, w) = (input.height, input.width);
        let mut out = Tensor::zeros(input.channels, 2 * h, 2 * w);
        for c in 0..input.channels {
            let src = input.channel(c);
            let dst = &mut out.data[c * 4 * h * w..(c + 1) * 4 * h * w];
            for y in 0..2 * h {
                let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
                for (x2, d) in dst[y * 2 * w..(y + 1) * 2 * w].iter_mut().enumerate() {
                    *d = srow[x2 / 2];
                }
            }
        }
        self.push(Op::Upsample2(x), out)
    }

    /// Softmax across channels at every pixel.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let input = &self.nodes[x].value;
        let (c, p) = (input.channels, input.plane());
        let mut out = input.clone();
        for i in 0..p {
            let mut m = T::neg_infinity();
            for k in 0..c {
                m = m.max(out.data[k * p + i]);
            }
            let mut s = T::zero();
            for k in 0..c {
                let e = (out.data[k * p + i] - m).exp();
                out.data[k * p + i] = e;
                s += e;
            }
            for k in 0..c {
                out.data[k * p + i] /= s;
            }
        }
        self.push(Op::Softmax(x), out)
    }

    /// Propagates `seed` (the gradient at `output`) back through the tape.
    ///
    /// Parameter gradients are only accumulated when `want_params` is set;
    /// the input gradient is always returned.
    pub fn backward(&self, output: NodeId, seed: &Tensor<T>, want_params: bool) -> Grads<T> {
        assert!(seed.same_shape(&self.nodes[output].value), "seed shape");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output] = Some(seed.clone());
        let mut pgrads: Vec<Vec<T>> = if want_params {
            self.params.iter().map(|p| vec![T::zero(); p.len()]).collect()
        } else {
            Vec::new()
        };

        fn accum<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
            match slot {
                Some(acc) => acc.add_assign(&g),
                None => *slot = Some(g),
            }
        }

        for id in (0..=output).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {
                    grads[id] = Some(gy);
                }
                Op::Conv {
                    x,
                    weight,
                    bias,
                    geom,
                    cols,
                } => {
                    let input = &self.nodes[*x].value;
                    let (ho, wo) = (node.value.height, node.value.width);
                    let n = ho * wo;
                    let kk = geom.cin * geom.kernel * geom.kernel;
                    let src: &[T] = cols.as_deref().unwrap_or(&input.data);
                    if want_params {
                        let (gw, gb) = if weight < bias {
                            let (lo, hi) = pgrads.split_at_mut(*bias);
                            (&mut lo[*weight], &mut hi[0])
                        } else {
                            let (lo, hi) = pgrads.split_at_mut(*weight);
                            (&mut hi[0], &mut lo[*bias])
                        };
                        T::gemm(
                            geom.cout,
                            n,
                            kk,
                            T::one(),
                            &gy.data,
                            n as isize,
                            1,
                            src,
                            1,
                            n as isize,
                            T::one(),
                            gw,
                            kk as isize,
                            1,
                        );
                        for (co, g) in gb.iter_mut().enumerate() {
                            *g += gy.data[co * n..(co + 1) * n].iter().copied().sum::<T>();
                        }
                    }
                    let w = &self.params[*weight].data;
                    let mut gcols = vec![T::zero(); kk * n];
                    T::gemm(
                        kk,
                        geom.cout,
                        n,
                        T::one(),
                        w,
                        1,
                        kk as isize,
                        &gy.data,
                        n as isize,
                        1,
                        T::zero(),
                        &mut gcols,
                        n as isize,
                        1,
                    );
                    let gx = if geom.is_pointwise() {
                        Tensor {
                            channels: geom.cin,
                            height: input.height,
                            width: input.width,
                            data: gcols,
                        }
                    } else {
                        col2im(&gcols, *geom, input.height, input.width, ho, wo)
                    };
                    accum(&mut grads[*x], gx);
                }
                Op::InstanceNorm { x, inv_std } => {
                    let y = &node.value;
                    let p = y.plane();
                    let pn = T::from_usize(p).unwrap();
                    let mut gx = gy;
                    for (c, &is) in inv_std.iter().enumerate() {
                        let yc = &y.data[c * p..(c + 1) * p];
                        let gc = &mut gx.data[c * p..(c + 1) * p];
                        let mean_g = gc.iter().copied().sum::<T>() / pn;
                        let mean_gy = gc.iter().zip(yc).map(|(&g, &v)| g * v).sum::<T>() / pn;
                        for (g, &v) in gc.iter_mut().zip(yc) {
                            *g = is * (*g - mean_g - v * mean_gy);
                        }
                    }
                    accum(&mut grads[*x], gx);
                }
                Op::Relu(x) => {
                    let mut gx = gy;
                    for (g, &v) in gx.data.iter_mut().zip(&node.value.data) {
                        if v <= T::zero() {
                            *g = T::zero();
                        }
                    }
                    accum(&mut grads[*x], gx);
                }
                Op::LeakyRelu(x, s) => {
                    let mut gx = gy;
                    for (g, &v) in gx.data.iter_mut().zip(&self.nodes[*x].value.data) {
                        if v <= T::zero() {
                            *g *= *s;
                        }
                    }
                    accum(&mut grads[*x], gx);
                }
                Op::Tanh(x) => {
                    let mut gx = gy;
                    for (g, &v) in gx.data.iter_mut().zip(&node.value.data) {
                        *g *= T::one() - v * v;
                    }
                    accum(&mut grads[*x], gx);
                }
                Op::Sigmoid(x) => {
                    let mut gx = gy;
                    for (g, &v) in gx.data.iter_mut().zip(&node.value.data) {
                        *g *= v * (T::one() - v);
                    }
                    accum(&mut grads[*x], gx);
                }
                Op::Add(a, b) => {
                    if a == b {
                        let mut g2 = gy;
                        g2.scale(T::lit(2.0));
                        accum(&mut grads[*a], g2);
                    } else {
                        accum(&mut grads[*b], gy.clone());
                        accum(&mut grads[*a], gy);
                    }
                }
                Op::Concat(a, b) => {
                    let ca = self.nodes[*a].value.channels;
                    let p = gy.plane();
                    let (lo, hi) = gy.data.split_at(ca * p);
                    let ga = Tensor {
                        channels: ca,
                        height: gy.height,
                        width: gy.width,
                        data: lo.to_vec(),
                    };
                    let gb = Tensor {
                        channels: gy.channels - ca,
                        height: gy.height,
                        width: gy.width,
                        data: hi.to_vec(),
                    };
                    accum(&mut grads[*a], ga);
                    accum(&mut grads[*b], gb);
                }
                Op::Upsample2(x) => {
                    let input = &self.nodes[*x].value;
                    let (h, w) = (input.height, input.width);
                    let mut gx = Tensor::zeros(input.channels, h, w);
                    for c in 0..input.channels {
                        let src = &gy.data[c * 4 * h * w..(c + 1) * 4 * h * w];
                        let dst = &mut gx.data[c * h * w..(c + 1) * h * w];
                        for y in 0..2 * h {
                            let drow = &mut dst[(y / 2) * w..(y / 2 + 1) * w];
                            for (x2, &g) in src[y * 2 * w..(y + 1) * 2 * w].iter().enumerate() {
                                drow[x2 / 2] += g;
                            }
                        }
                    }
                    accum(&mut grads[*x], gx);
                }
                Op::Softmax(x) => {
                    let pm = &node.value;
                    let (c, p) = (pm.channels, pm.plane());
                    let mut gx = gy;
                    for i in 0..p {
                        let mut dot = T::zero();
                        for k in 0..c {
                            dot += gx.data[k * p + i] * pm.data[k * p + i];
                        }
                        for k in 0..c {
                            let idx = k * p + i;
                            gx.data[idx] = pm.data[idx] * (gx.data[idx] - dot);
                        }
                    }
                    accum(&mut grads[*x], gx);
                }
            }
        }

        let input = grads
            .get_mut(0)
            .and_then(Option::take)
            .unwrap_or_else(|| {
                let v = &self.nodes[0].value;
                Tensor::zeros(v.channels, v.height, v.width)
            });
        Grads {
            params: pgrads,
            input,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &[f64], b: &[f64], g: ConvGeom) -> Tensor<f64> {
        let (ho, wo) = (g.out_size(x.height), g.out_size(x.width));
        let mut out = Tensor::zeros(g.cout, ho, wo);
        for co in 0..g.cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co];
                    for ci in 0..g.cin {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < x.height && (ix as usize) < x.width {
                                    acc += w[((co * g.cin + ci) * g.kernel + ky) * g.kernel + kx]
                                        * x.data[(ci * x.height + iy as usize) * x.width + ix as usize];
                                }
                            }
                        }
                    }
                    out.data[(co * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_matches_direct_sum() {
        for geom in [
            ConvGeom { cin: 2, cout: 3, kernel: 3, stride: 1, pad: 1 },
            ConvGeom { cin: 2, cout: 3, kernel: 3, stride: 2, pad: 1 },
            ConvGeom { cin: 3, cout: 2, kernel: 1, stride: 1, pad: 0 },
        ] {
            let x = Tensor::from_vec(geom.cin, 5, 6, pseudo(geom.cin * 30, 1)).unwrap();
            let params = vec![
                ParamTensor {
                    shape: vec![geom.cout, geom.cin, geom.kernel, geom.kernel],
                    data: pseudo(geom.cout * geom.cin * geom.kernel * geom.kernel, 2),
                },
                ParamTensor { shape: vec![geom.cout], data: pseudo(geom.cout, 3) },
            ];
            let mut tape = Tape::new(&params);
            let i = tape.input(x.clone());
            let o = tape.conv(i, 0, 1, geom);
            let expect = naive_conv(&x, &params[0].data, &params[1].data, geom);
            for (a, b) in tape.value(o).data.iter().zip(&expect.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Finite-difference check of every op's input gradient using a random
    /// linear functional of the output.
    #[test]
    fn op_gradients_match_finite_differences() {
        type Build = fn(&mut Tape<f64>, NodeId) -> NodeId;
        let geom = ConvGeom { cin: 2, cout: 2, kernel: 3, stride: 2, pad: 1 };
        let cases: Vec<(&str, Build)> = vec![
            ("conv", |t, i| t.conv(i, 0, 1, ConvGeom { cin: 2, cout: 2, kernel: 3, stride: 2, pad: 1 })),
            ("norm", |t, i| t.instance_norm(i)),
            ("relu", |t, i| t.relu(i)),
            ("leaky", |t, i| t.leaky_relu(i, 0.2)),
            ("tanh", |t, i| t.tanh(i)),
            ("sigmoid", |t, i| t.sigmoid(i)),
            ("add", |t, i| {
                let r = t.tanh(i);
                t.add(i, r)
            }),
            ("concat", |t, i| {
                let r = t.sigmoid(i);
                t.concat(r, i)
            }),
            ("up", |t, i| t.upsample2(i)),
            ("softmax", |t, i| t.softmax(i)),
        ];
        let params = vec![
            ParamTensor { shape: vec![2, 2, 3, 3], data: pseudo(36, 9) },
            ParamTensor { shape: vec![2], data: pseudo(2, 10) },
        ];
        let _ = geom;
        for (name, build) in cases {
            let x0 = Tensor::from_vec(2, 4, 4, pseudo(32, 5)).unwrap();
            let eval = |x: &Tensor<f64>| -> (f64, Tensor<f64>, Grads<f64>) {
                let mut t = Tape::new(&params);
                let i = t.input(x.clone());
                let o = build(&mut t, i);
                let v = t.value(o).clone();
                let w = Tensor::from_vec(v.channels, v.height, v.width, pseudo(v.len(), 77)).unwrap();
                let f = v.data.iter().zip(&w.data).map(|(a, b)| a * b).sum();
                let g = t.backward(o, &w, true);
                (f, v, g)
            };
            let (_, _, g) = eval(&x0);
            let h = 1e-6;
            for k in 0..x0.len() {
                let mut xp = x0.clone();
                xp.data[k] += h;
                let mut xm = x0.clone();
                xm.data[k] -= h;
                let fd = (eval(&xp).0 - eval(&xm).0) / (2.0 * h);
                assert!(
                    (fd - g.input.data[k]).abs() < 1e-6 * (1.0 + fd.abs()),
                    "{name}[{k}]: fd {fd} vs {}",
                    g.input.data[k]
                );
            }
        }
    }
}
