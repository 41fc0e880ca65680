//! The six networks of the framework: two translation generators, two
//! patch discriminators and two residual U-Net segmentors, all built from
//! the same small CNN toolkit.
//!
//! Every architecture is written once against [`Builder`]; a shape-only
//! builder enumerates the convolution layers (and therefore the parameter
//! layout) while the tape builder evaluates the network.

use std::fmt;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::bytes::{put_scalars, put_u32, put_u64, ByteReader};
use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::losses::GanVariant;
use crate::nn::{ConvGeom, Grads, NodeId, ParamTensor, Tape, Tensor};
use crate::rng::{rng_for, Stream};
use crate::scalar::{DType, Scalar};

const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NetworkKind {
    Generator,
    Discriminator,
    Segmentor,
}

impl NetworkKind {
    fn code(self) -> u32 {
        match self {
            NetworkKind::Generator => 1,
            NetworkKind::Discriminator => 2,
            NetworkKind::Segmentor => 3,
        }
    }

    fn from_code(c: u32) -> Option<Self> {
        match c {
            1 => Some(NetworkKind::Generator),
            2 => Some(NetworkKind::Discriminator),
            3 => Some(NetworkKind::Segmentor),
            _ => None,
        }
    }
}

/// Architecture hyperparameters.
///
/// Channel count at level `i` is `width * 2^i`. Layer layouts:
///
/// * generator: 3x3 stem, `depth` stride-2 downsampling convs,
///   `res_blocks` residual blocks at the bottleneck, `depth` upsample+conv
///   stages, 3x3 head with `tanh`. Instance norm after every inner conv.
/// * discriminator: `depth` stride-2 3x3 convs with leaky ReLU (instance
///   norm from the second on), then a 3x3 conv to a one-channel patch map.
/// * segmentor: residual U-Net with `depth` levels, one residual block per
///   encoder level, skip concatenation in the decoder and a 1x1 head with a
///   per-pixel softmax over `num_classes`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkSpec {
    pub kind: NetworkKind,
    pub width: usize,
    pub depth: usize,
    /// Output classes; only meaningful for segmentors.
    pub num_classes: usize,
    /// Bottleneck residual blocks; only meaningful for generators.
    pub res_blocks: usize,
}

impl NetworkSpec {
    pub fn generator(width: usize, depth: usize, res_blocks: usize) -> Self {
        Self {
            kind: NetworkKind::Generator,
            width,
            depth,
            num_classes: 0,
            res_blocks,
        }
    }

    pub fn discriminator(width: usize, depth: usize) -> Self {
        Self {
            kind: NetworkKind::Discriminator,
            width,
            depth,
            num_classes: 0,
            res_blocks: 0,
        }
    }

    pub fn segmentor(width: usize, depth: usize, num_classes: usize) -> Self {
        Self {
            kind: NetworkKind::Segmentor,
            width,
            depth,
            num_classes,
            res_blocks: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 4 {
            return Err(Error::Config(format!("network width must be >= 4, got {}", self.width)));
        }
        if self.depth < 1 || self.depth > 6 {
            return Err(Error::Config(format!("network depth must be in 1..=6, got {}", self.depth)));
        }
        if self.kind == NetworkKind::Segmentor && self.num_classes < 2 {
            return Err(Error::Config(format!(
                "segmentor needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Convolution layers in evaluation order.
    pub fn conv_layers(&self) -> Vec<ConvGeom> {
        let mut shapes = ShapeBuilder::default();
        match self.kind {
            NetworkKind::Generator => {
                generator(&mut shapes, self, ());
            }
            NetworkKind::Discriminator => {
                discriminator(&mut shapes, self, ());
            }
            NetworkKind::Segmentor => {
                segmentor(&mut shapes, self, ());
            }
        }
        shapes.layers
    }

    pub fn param_count(&self) -> usize {
        self.conv_layers()
            .iter()
            .map(|g| g.kernel * g.kernel * g.cin * g.cout + g.cout)
            .sum()
    }

    /// Side length of the discriminator patch grid for an `n`-pixel side.
    pub fn patch_size(&self, n: usize) -> usize {
        (0..self.depth).fold(n, |s, _| s.div_ceil(2))
    }

    fn check_input<T: Scalar>(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels != 1 {
            return Err(Error::Input(format!("expected a 1-channel image, got {}", x.channels)));
        }
        if x.height == 0 || x.width == 0 {
            return Err(Error::Input("empty image".into()));
        }
        if self.kind != NetworkKind::Discriminator {
            let m = 1usize << self.depth;
            if x.height % m != 0 || x.width % m != 0 {
                return Err(Error::Input(format!(
                    "image {}x{} is not divisible by {m} (depth {})",
                    x.height, x.width, self.depth
                )));
            }
        }
        Ok(())
    }
}

/// Operations an architecture description needs.
trait Builder {
    type N: Copy;
    fn conv(&mut self, x: Self::N, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self::N;
    fn norm(&mut self, x: Self::N) -> Self::N;
    fn relu(&mut self, x: Self::N) -> Self::N;
    fn leaky(&mut self, x: Self::N) -> Self::N;
    fn tanh(&mut self, x: Self::N) -> Self::N;
    fn add(&mut self, a: Self::N, b: Self::N) -> Self::N;
    fn concat(&mut self, a: Self::N, b: Self::N) -> Self::N;
    fn up(&mut self, x: Self::N) -> Self::N;
    fn softmax(&mut self, x: Self::N) -> Self::N;

    fn conv_norm_relu(&mut self, x: Self::N, cin: usize, cout: usize, stride: usize) -> Self::N {
        let y = self.conv(x, cin, cout, 3, stride);
        let y = self.norm(y);
        self.relu(y)
    }
}

#[derive(Default)]
struct ShapeBuilder {
    layers: Vec<ConvGeom>,
}

impl Builder for ShapeBuilder {
    type N = ();
    fn conv(&mut self, _: (), cin: usize, cout: usize, kernel: usize, stride: usize) {
        self.layers.push(ConvGeom {
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
        });
    }
    fn norm(&mut self, _: ()) {}
    fn relu(&mut self, _: ()) {}
    fn leaky(&mut self, _: ()) {}
    fn tanh(&mut self, _: ()) {}
    fn add(&mut self, _: (), _: ()) {}
    fn concat(&mut self, _: (), _: ()) {}
    fn up(&mut self, _: ()) {}
    fn softmax(&mut self, _: ()) {}
}

struct TapeBuilder<'t, 'p, T> {
    tape: &'t mut Tape<'p, T>,
    next_conv: usize,
}

impl<T: Scalar> Builder for TapeBuilder<'_, '_, T> {
    type N = NodeId;
    fn conv(&mut self, x: NodeId, cin: usize, cout: usize, kernel: usize, stride: usize) -> NodeId {
        let i = self.next_conv;
        self.next_conv += 1;
        let geom = ConvGeom {
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
        };
        self.tape.conv(x, 2 * i, 2 * i + 1, geom)
    }
    fn norm(&mut self, x: NodeId) -> NodeId {
        self.tape.instance_norm(x)
    }
    fn relu(&mut self, x: NodeId) -> NodeId {
        self.tape.relu(x)
    }
    fn leaky(&mut self, x: NodeId) -> NodeId {
        self.tape.leaky_relu(x, LEAKY_SLOPE)
    }
    fn tanh(&mut self, x: NodeId) -> NodeId {
        self.tape.tanh(x)
    }
    fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.tape.add(a, b)
    }
    fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.tape.concat(a, b)
    }
    fn up(&mut self, x: NodeId) -> NodeId {
        self.tape.upsample2(x)
    }
    fn softmax(&mut self, x: NodeId) -> NodeId {
        self.tape.softmax(x)
    }
}

fn channels(spec: &NetworkSpec, level: usize) -> usize {
    spec.width << level
}

fn generator<B: Builder>(b: &mut B, spec: &NetworkSpec, x: B::N) -> B::N {
    let mut h = b.conv_norm_relu(x, 1, spec.width, 1);
    for i in 1..=spec.depth {
        h = b.conv_norm_relu(h, channels(spec, i - 1), channels(spec, i), 2);
    }
    let c = channels(spec, spec.depth);
    for _ in 0..spec.res_blocks {
        let r = b.conv_norm_relu(h, c, c, 1);
        let r = b.conv(r, c, c, 3, 1);
        let r = b.norm(r);
        h = b.add(h, r);
    }
    for i in (1..=spec.depth).rev() {
        let u = b.up(h);
        h = b.conv_norm_relu(u, channels(spec, i), channels(spec, i - 1), 1);
    }
    let out = b.conv(h, spec.width, 1, 3, 1);
    b.tanh(out)
}

/// Produces patch logits; the realness head is applied by the caller.
fn discriminator<B: Builder>(b: &mut B, spec: &NetworkSpec, x: B::N) -> B::N {
    let mut h = b.conv(x, 1, spec.width, 3, 2);
    h = b.leaky(h);
    for i in 1..spec.depth {
        h = b.conv(h, channels(spec, i - 1), channels(spec, i), 3, 2);
        h = b.norm(h);
        h = b.leaky(h);
    }
    b.conv(h, channels(spec, spec.depth - 1), 1, 3, 1)
}

fn residual<B: Builder>(b: &mut B, x: B::N, c: usize) -> B::N {
    let r = b.conv_norm_relu(x, c, c, 1);
    let r = b.conv(r, c, c, 3, 1);
    let r = b.norm(r);
    let s = b.add(x, r);
    b.relu(s)
}

fn segmentor<B: Builder>(b: &mut B, spec: &NetworkSpec, x: B::N) -> B::N {
    let mut skips = Vec::with_capacity(spec.depth + 1);
    let h = b.conv_norm_relu(x, 1, spec.width, 1);
    let mut h = residual(b, h, spec.width);
    skips.push(h);
    for i in 1..=spec.depth {
        h = b.conv_norm_relu(h, channels(spec, i - 1), channels(spec, i), 2);
        h = residual(b, h, channels(spec, i));
        skips.push(h);
    }
    for i in (1..=spec.depth).rev() {
        let c = channels(spec, i - 1);
        let u = b.up(h);
        let u = b.conv_norm_relu(u, channels(spec, i), c, 1);
        let cat = b.concat(u, skips[i - 1]);
        h = b.conv_norm_relu(cat, 2 * c, c, 1);
    }
    let logits = b.conv(h, spec.width, spec.num_classes, 1, 1);
    b.softmax(logits)
}

/// Short stable hash of a network's spec and parameter bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fingerprint(pub u64);

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// Per-pixel class distribution, `num_classes x height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap<T> {
    pub probs: Tensor<T>,
}

impl<T: Scalar> ProbabilityMap<T> {
    /// Wraps a tensor after checking the per-pixel simplex constraint.
    pub fn new(probs: Tensor<T>) -> Result<Self> {
        let p = probs.plane();
        let tol = T::lit(1e-5);
        for i in 0..p {
            let mut s = T::zero();
            for k in 0..probs.channels {
                let v = probs.data[k * p + i];
                if !(v >= T::zero()) {
                    return Err(Error::Input(format!("negative or NaN probability at pixel {i}")));
                }
                s += v;
            }
            if (s - T::one()).abs() > tol {
                return Err(Error::Input(format!("probabilities at pixel {i} sum to {s}")));
            }
        }
        Ok(Self { probs })
    }

    pub(crate) fn new_unchecked(probs: Tensor<T>) -> Self {
        Self { probs }
    }

    /// One-hot map of `label` over `num_classes`.
    pub fn one_hot(label: &LabelMap, num_classes: usize) -> Result<Self> {
        let p = label.len();
        let mut t = Tensor::zeros(num_classes, label.height, label.width);
        for (i, &c) in label.data.iter().enumerate() {
            let c = c as usize;
            if c >= num_classes {
                return Err(Error::Input(format!("class {c} >= {num_classes}")));
            }
            t.data[c * p + i] = T::one();
        }
        Ok(Self { probs: t })
    }

    pub fn uniform(num_classes: usize, height: usize, width: usize) -> Self {
        let v = T::one() / T::from_usize(num_classes).unwrap();
        Self {
            probs: Tensor::filled(num_classes, height, width, v),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.probs.channels
    }

    pub fn height(&self) -> usize {
        self.probs.height
    }

    pub fn width(&self) -> usize {
        self.probs.width
    }

    pub fn pixels(&self) -> usize {
        self.probs.plane()
    }

    #[inline]
    pub fn at(&self, class: usize, pixel: usize) -> T {
        self.probs.data[class * self.pixels() + pixel]
    }

    /// Arg-max label map; ties go to the lowest class index.
    pub fn argmax(&self) -> LabelMap {
        let p = self.pixels();
        let data = (0..p)
            .map(|i| {
                let mut best = 0;
                for k in 1..self.num_classes() {
                    if self.at(k, i) > self.at(best, i) {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap::new(self.height(), self.width(), data)
    }
}

/// Forward evaluation retaining everything needed for backpropagation.
pub struct Trace<'p, T> {
    tape: Tape<'p, T>,
    output: NodeId,
}

impl<T: Scalar> Trace<'_, T> {
    pub fn output(&self) -> &Tensor<T> {
        self.tape.value(self.output)
    }

    pub fn into_output(self) -> Tensor<T> {
        self.tape.into_value(self.output)
    }

    pub fn backward(&self, seed: &Tensor<T>, want_params: bool) -> Grads<T> {
        self.tape.backward(self.output, seed, want_params)
    }
}

/// A parameterized network: its spec and flat ordered parameter tensors.
///
/// Parameters are laid out as `(weight, bias)` pairs per convolution in
/// [`NetworkSpec::conv_layers`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkHandle<T> {
    spec: NetworkSpec,
    params: Vec<ParamTensor<T>>,
}

/// Deterministic fan-in scaled Gaussian initialization.
pub fn build_network<T: Scalar>(spec: NetworkSpec, init_seed: u64) -> Result<NetworkHandle<T>> {
    spec.validate()?;
    let mut rng = rng_for(init_seed, Stream::Init, spec.kind.code() as u64);
    let mut params = Vec::new();
    for g in spec.conv_layers() {
        let fan_in = (g.cin * g.kernel * g.kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let mut w = ParamTensor::zeros(vec![g.cout, g.cin, g.kernel, g.kernel]);
        for v in &mut w.data {
            *v = T::lit(normal.sample(&mut rng));
        }
        params.push(w);
        params.push(ParamTensor::zeros(vec![g.cout]));
    }
    Ok(NetworkHandle { spec, params })
}

impl<T: Scalar> NetworkHandle<T> {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[ParamTensor<T>] {
        &self.params
    }

    /// Mutable parameter access; any write changes the fingerprint.
    pub fn params_mut(&mut self) -> &mut [ParamTensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(ParamTensor::len).sum()
    }

    pub fn fingerprint(&self) -> Fingerprint {
        let mut h = Sha256::new();
        h.update(self.header_bytes());
        let mut buf = Vec::new();
        for p in &self.params {
            buf.clear();
            for &v in &p.data {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        let digest = h.finalize();
        Fingerprint(u64::from_le_bytes(digest[..8].try_into().unwrap()))
    }

    fn expect_kind(&self, kind: NetworkKind) -> Result<()> {
        if self.spec.kind != kind {
            return Err(Error::Input(format!(
                "expected a {kind:?} network, got {:?}",
                self.spec.kind
            )));
        }
        Ok(())
    }

    /// Traced forward pass for training. Discriminators return
    /// probabilities under [`GanVariant::Vanilla`] and raw scores otherwise.
    pub fn trace(&self, x: &Tensor<T>, variant: GanVariant) -> Result<Trace<'_, T>> {
        self.spec.check_input(x)?;
        let mut tape = Tape::new(&self.params);
        let input = tape.input(x.clone());
        let mut b = TapeBuilder {
            tape: &mut tape,
            next_conv: 0,
        };
        let output = match self.spec.kind {
            NetworkKind::Generator => generator(&mut b, &self.spec, input),
            NetworkKind::Segmentor => segmentor(&mut b, &self.spec, input),
            NetworkKind::Discriminator => {
                let logits = discriminator(&mut b, &self.spec, input);
                match variant {
                    GanVariant::Vanilla => b.tape.sigmoid(logits),
                    GanVariant::LeastSquares => logits,
                }
            }
        };
        Ok(Trace { tape, output })
    }

    // Binary layout: magic, version, dtype, kind, width, depth, classes,
    // res_blocks, tensor count, tensors (ndim, dims, values), fingerprint.
    fn header_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_u32(&mut out, T::DTYPE.code());
        put_u32(&mut out, self.spec.kind.code());
        for v in [self.spec.width, self.spec.depth, self.spec.num_classes, self.spec.res_blocks] {
            put_u32(&mut out, v as u32);
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(NET_MAGIC);
        put_u32(&mut out, NET_VERSION);
        out.extend_from_slice(&self.header_bytes());
        put_u32(&mut out, self.params.len() as u32);
        for p in &self.params {
            put_u32(&mut out, p.shape.len() as u32);
            for &d in &p.shape {
                put_u32(&mut out, d as u32);
            }
            put_scalars(&mut out, &p.data);
        }
        put_u64(&mut out, self.fingerprint().0);
        out
    }

    pub(crate) fn read_from(r: &mut ByteReader<'_>) -> Result<Self> {
        let bad = Error::Checkpoint;
        if r.take(4).map_err(bad)? != NET_MAGIC {
            return Err(Error::Checkpoint("bad network magic".into()));
        }
        let version = r.u32().map_err(bad)?;
        if version != NET_VERSION {
            return Err(Error::Checkpoint(format!("unsupported network version {version}")));
        }
        let dtype = DType::from_code(r.u32().map_err(bad)?);
        if dtype != Some(T::DTYPE) {
            return Err(Error::Checkpoint(format!(
                "scalar type mismatch: file {dtype:?}, expected {:?}",
                T::DTYPE
            )));
        }
        let kind = NetworkKind::from_code(r.u32().map_err(bad)?)
            .ok_or_else(|| Error::Checkpoint("unknown network kind".into()))?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32().map_err(bad)? as usize;
        }
        let spec = NetworkSpec {
            kind,
            width: dims[0],
            depth: dims[1],
            num_classes: dims[2],
            res_blocks: dims[3],
        };
        spec.validate()
            .map_err(|e| Error::Checkpoint(format!("invalid stored spec: {e}")))?;
        let layers = spec.conv_layers();
        let count = r.u32().map_err(bad)? as usize;
        if count != 2 * layers.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {count}",
                2 * layers.len()
            )));
        }
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let ndim = r.u32().map_err(bad)? as usize;
            if ndim > 8 {
                return Err(Error::Checkpoint("implausible tensor rank".into()));
            }
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()
                .map_err(bad)?;
            let data = r.scalars::<T>().map_err(bad)?;
            if data.len() != shape.iter().product::<usize>() {
                return Err(Error::Checkpoint("tensor size does not match its shape".into()));
            }
            params.push(ParamTensor { shape, data });
        }
        for (i, g) in layers.iter().enumerate() {
            let w = [g.cout, g.cin, g.kernel, g.kernel];
            if params[2 * i].shape != w || params[2 * i + 1].shape != [g.cout] {
                return Err(Error::Checkpoint(format!("layer {i} has unexpected shape")));
            }
        }
        let stored = Fingerprint(r.u64().map_err(bad)?);
        let net = NetworkHandle { spec, params };
        let actual = net.fingerprint();
        if actual != stored {
            return Err(Error::Checkpoint(format!(
                "fingerprint mismatch: stored {stored}, computed {actual}"
            )));
        }
        Ok(net)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let net = Self::read_from(&mut r)?;
        if !r.is_at_end() {
            return Err(Error::Checkpoint("trailing bytes after network".into()));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

const NET_MAGIC: &[u8; 4] = b"MSNW";
const NET_VERSION: u32 = 1;

/// `G(x)`: same-shape output in `[-1, 1]`.
pub fn translate<T: Scalar>(g: &NetworkHandle<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    g.expect_kind(NetworkKind::Generator)?;
    Ok(g.trace(x, GanVariant::Vanilla)?.into_output())
}

/// Patch realness grid: in `(0, 1)` for the vanilla head, raw scores for
/// least squares.
pub fn discriminate<T: Scalar>(
    d: &NetworkHandle<T>,
    x: &Tensor<T>,
    variant: GanVariant,
) -> Result<Tensor<T>> {
    d.expect_kind(NetworkKind::Discriminator)?;
    Ok(d.trace(x, variant)?.into_output())
}

pub fn segment<T: Scalar>(s: &NetworkHandle<T>, x: &Tensor<T>) -> Result<ProbabilityMap<T>> {
    s.expect_kind(NetworkKind::Segmentor)?;
    Ok(ProbabilityMap::new_unchecked(
        s.trace(x, GanVariant::Vanilla)?.into_output(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(n: usize, seed: u64) -> Tensor<f64> {
        let mut s = seed;
        let data = (0..n * n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::from_vec(1, n, n, data).unwrap()
    }

    /// Closed-form parameter count of a generator, independent of
    /// `conv_layers`.
    fn generator_params(w: usize, d: usize, r: usize) -> usize {
        let conv = |k: usize, i: usize, o: usize| k * k * i * o + o;
        let c = |l: usize| w << l;
        let mut n = conv(3, 1, w) + conv(3, w, 1);
        for i in 1..=d {
            n += conv(3, c(i - 1), c(i)) + conv(3, c(i), c(i - 1));
        }
        n + r * 2 * conv(3, c(d), c(d))
    }

    #[test]
    fn generator_param_count_matches_formula() {
        // width 8, depth 2, 2 residual blocks:
        // stem 80, head 73, level 1 down/up 1168 + 1160, level 2 down/up
        // 4640 + 4624, residual convs 4 x 9248
        let spec = NetworkSpec::generator(8, 2, 2);
        let expected = generator_params(8, 2, 2);
        assert_eq!(expected, 48737);
        let net = build_network::<f64>(spec, 1).unwrap();
        assert_eq!(net.param_count(), expected);
        assert_eq!(spec.param_count(), expected);
    }

    #[test]
    fn segmentor_param_count_matches_formula() {
        let (w, d, c) = (4usize, 2usize, 4usize);
        let conv = |k: usize, i: usize, o: usize| k * k * i * o + o;
        let ch = |l: usize| w << l;
        let res = |c: usize| 2 * conv(3, c, c);
        let mut n = conv(3, 1, w) + res(w) + conv(1, w, c);
        for i in 1..=d {
            n += conv(3, ch(i - 1), ch(i)) + res(ch(i));
            n += conv(3, ch(i), ch(i - 1)) + conv(3, 2 * ch(i - 1), ch(i - 1));
        }
        let net = build_network::<f32>(NetworkSpec::segmentor(w, d, c), 0).unwrap();
        assert_eq!(net.param_count(), n);
    }

    #[test]
    fn fingerprints_track_seed_and_params() {
        let spec = NetworkSpec::discriminator(4, 2);
        let a = build_network::<f64>(spec, 3).unwrap();
        let b = build_network::<f64>(spec, 3).unwrap();
        let c = build_network::<f64>(spec, 4).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
        let mut d = a.clone();
        d.params_mut()[1].data[0] += 1e-12;
        assert_ne!(a.fingerprint(), d.fingerprint());
        assert!(a.params().iter().all(|p| p.data.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn invalid_specs() {
        assert!(build_network::<f64>(NetworkSpec::generator(2, 1, 1), 0).is_err());
        assert!(build_network::<f64>(NetworkSpec::generator(4, 0, 1), 0).is_err());
        assert!(build_network::<f64>(NetworkSpec::segmentor(4, 1, 1), 0).is_err());
    }

    #[test]
    fn translate_contract() {
        let g = build_network::<f64>(NetworkSpec::generator(4, 2, 1), 9).unwrap();
        let x = image(16, 1);
        let y = translate(&g, &x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
        assert_eq!(translate(&g, &x).unwrap(), y);
        let zero = Tensor::zeros(1, 16, 16);
        let z = translate(&g, &zero).unwrap();
        assert!(z.data.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
        assert!(matches!(translate(&g, &image(10, 1)), Err(Error::Input(_))));
        let s = build_network::<f64>(NetworkSpec::segmentor(4, 1, 3), 0).unwrap();
        assert!(translate(&s, &x).is_err());
    }

    #[test]
    fn discriminator_patch_grid() {
        for (n, depth) in [(64usize, 3usize), (16, 2), (20, 3), (33, 1)] {
            let spec = NetworkSpec::discriminator(4, depth);
            let d = build_network::<f64>(spec, 1).unwrap();
            let out = discriminate(&d, &image(n, 2), GanVariant::Vanilla).unwrap();
            // each stride-2, pad-1, 3x3 conv maps n -> ceil(n / 2)
            let mut expect = n;
            for _ in 0..depth {
                expect = (expect + 1) / 2;
            }
            assert_eq!((out.height, out.width), (expect, expect));
            assert_eq!(spec.patch_size(n), expect);
            assert!(out.data.iter().all(|&v| v > 0.0 && v < 1.0));
            let again = discriminate(&d, &image(n, 2), GanVariant::Vanilla).unwrap();
            assert_eq!(out, again);
        }
    }

    #[test]
    fn segment_is_a_simplex_and_pure() {
        let s = build_network::<f64>(NetworkSpec::segmentor(4, 2, 4), 5).unwrap();
        let before = s.fingerprint();
        let x = image(16, 3);
        let p = segment(&s, &x).unwrap();
        assert!(ProbabilityMap::new(p.probs.clone()).is_ok());
        assert_eq!(segment(&s, &x).unwrap(), p);
        assert_eq!(s.fingerprint(), before);
        assert_eq!(p.num_classes(), 4);
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        let t = Tensor::from_vec(2, 1, 2, vec![0.5, 0.2, 0.5, 0.8]).unwrap();
        let p = ProbabilityMap::new(t).unwrap();
        assert_eq!(p.argmax().data, vec![0, 1]);
    }

    #[test]
    fn checkpoint_round_trip_and_tamper() {
        let net = build_network::<f32>(NetworkSpec::segmentor(4, 1, 3), 2).unwrap();
        let bytes = net.to_bytes();
        let back = NetworkHandle::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.fingerprint(), net.fingerprint());
        assert_eq!(back, net);
        let mut tampered = bytes.clone();
        let mid = bytes.len() / 2;
        tampered[mid] ^= 0x40;
        assert!(NetworkHandle::<f32>::from_bytes(&tampered).is_err());
        assert!(NetworkHandle::<f32>::from_bytes(&bytes[..bytes.len() - 5]).is_err());
        assert!(NetworkHandle::<f64>::from_bytes(&bytes).is_err());
    }
}
