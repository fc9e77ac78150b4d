//! Dense 3D tensor kernels with explicit backward passes: 3x3x3 and 1x1x1
//! convolutions (zero padding, stride 1 or 2), LeakyReLU, x2 trilinear
//! upsampling and channel concatenation.
//!
//! Kernels are generic over the element type so the same code can be
//! differentiated numerically in 64-bit.

use std::ops::{Add, AddAssign, Mul};

pub trait Real:
    Copy + Default + PartialOrd + Add<Output = Self> + AddAssign + Mul<Output = Self>
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Channel-major volume stack; each channel is x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Self {
            channels,
            dims,
            data: vec![T::default(); channels * dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn volume(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let v = self.volume();
        &self.data[c * v..(c + 1) * v]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let v = self.volume();
        &mut self.data[c * v..(c + 1) * v]
    }
}

/// Geometry of one convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    /// 3 (padding 1) or 1 (no padding).
    pub kernel: usize,
    /// 1 or 2; 1x1 kernels support stride 1 only.
    pub stride: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kernel.pow(3)
    }

    pub fn out_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        dims.map(|d| d.div_ceil(self.stride))
    }
}

/// Zero-padded flat layout used by stride-1 3x3x3 convolutions: each tap
/// becomes a constant offset, so a layer is a sum of long shifted axpys.
#[derive(Debug, Clone, Copy)]
struct Padded {
    dims: [usize; 3],
    px: usize,
    plane: usize,
    len: usize,
    /// Flat range `[lo, hi)` covering every interior voxel.
    lo: usize,
    hi: usize,
}

const CHUNK: usize = 1024;

impl Padded {
    fn new(dims: [usize; 3]) -> Self {
        let (px, py, pz) = (dims[0] + 2, dims[1] + 2, dims[2] + 2);
        let plane = px * py;
        let at = |x: usize, y: usize, z: usize| x + y * px + z * plane;
        Self {
            dims,
            px,
            plane,
            len: plane * pz,
            lo: at(1, 1, 1),
            hi: at(dims[0], dims[1], dims[2]) + 1,
        }
    }

    /// Offset of tap `kz * 9 + ky * 3 + kx`.
    fn offsets(&self) -> [isize; 27] {
        std::array::from_fn(|t| {
            let (kz, ky, kx) = (t / 9, (t / 3) % 3, t % 3);
            (kx as isize - 1)
                + (ky as isize - 1) * self.px as isize
                + (kz as isize - 1) * self.plane as isize
        })
    }

    fn pad<T: Real>(&self, t: &Tensor<T>) -> Vec<T> {
        let [nx, ny, nz] = self.dims;
        let mut out = vec![T::default(); t.channels * self.len];
        for c in 0..t.channels {
            let src = t.channel(c);
            let dst = &mut out[c * self.len..(c + 1) * self.len];
            for z in 0..nz {
                for y in 0..ny {
                    let s = (z * ny + y) * nx;
                    let d = (z + 1) * self.plane + (y + 1) * self.px + 1;
                    dst[d..d + nx].copy_from_slice(&src[s..s + nx]);
                }
            }
        }
        out
    }

    /// Copies interior voxels of a buffer that starts at flat index `lo`.
    fn unpad_into<T: Real>(&self, span: &[T], dst: &mut [T]) {
        let [nx, ny, nz] = self.dims;
        for z in 0..nz {
            for y in 0..ny {
                let d = (z * ny + y) * nx;
                let s = (z + 1) * self.plane + (y + 1) * self.px + 1 - self.lo;
                dst[d..d + nx].copy_from_slice(&span[s..s + nx]);
            }
        }
    }
}

#[inline]
fn axpy<T: Real>(acc: &mut [T], src: &[T], w: T) {
    for (a, &x) in acc.iter_mut().zip(src) {
        *a += w * x;
    }
}

#[inline]
fn shifted(base: usize, off: isize) -> usize {
    (base as isize + off) as usize
}

fn conv3_forward_padded<T: Real>(input: &Tensor<T>, w: &[T], b: &[T], s: ConvShape) -> Tensor<T> {
    let l = Padded::new(input.dims);
    let offs = l.offsets();
    let inp = l.pad(input);
    let span = l.hi - l.lo;
    let mut out_pad = vec![T::default(); s.cout * span];
    for c0 in (0..span).step_by(CHUNK) {
        let n = CHUNK.min(span - c0);
        for o in 0..s.cout {
            let acc = &mut out_pad[o * span + c0..o * span + c0 + n];
            acc.fill(b[o]);
            for i in 0..s.cin {
                let src = &inp[i * l.len..(i + 1) * l.len];
                let wk = &w[(o * s.cin + i) * 27..][..27];
                for (t, &off) in offs.iter().enumerate() {
                    let st = shifted(l.lo + c0, off);
                    axpy(acc, &src[st..st + n], wk[t]);
                }
            }
        }
    }
    let mut out = Tensor::zeros(s.cout, input.dims);
    for o in 0..s.cout {
        l.unpad_into(&out_pad[o * span..(o + 1) * span], out.channel_mut(o));
    }
    out
}

fn conv3_backward_padded<T: Real>(
    input: &Tensor<T>,
    w: &[T],
    gout: &Tensor<T>,
    s: ConvShape,
    gw: &mut [f64],
    want_input: bool,
) -> Option<Tensor<T>> {
    let l = Padded::new(input.dims);
    let offs = l.offsets();
    let inp = l.pad(input);
    // Padding positions of the output gradient must be exact zeros: they
    // take part in the shifted products below.
    let gpad = l.pad(gout);
    let span = l.hi - l.lo;
    let mut gin_pad = want_input.then(|| vec![T::default(); s.cin * span]);
    for c0 in (0..span).step_by(CHUNK) {
        let n = CHUNK.min(span - c0);
        let at = l.lo + c0;
        for o in 0..s.cout {
            let go = &gpad[o * l.len + at..o * l.len + at + n];
            for i in 0..s.cin {
                let src = &inp[i * l.len..(i + 1) * l.len];
                let base = (o * s.cin + i) * 27;
                for (t, &off) in offs.iter().enumerate() {
                    let st = shifted(at, off);
                    gw[base + t] += dot(go, &src[st..st + n]);
                }
            }
        }
        if let Some(gin) = gin_pad.as_mut() {
            for i in 0..s.cin {
                let acc = &mut gin[i * span + c0..i * span + c0 + n];
                for o in 0..s.cout {
                    let g = &gpad[o * l.len..(o + 1) * l.len];
                    let wk = &w[(o * s.cin + i) * 27..][..27];
                    for (t, &off) in offs.iter().enumerate() {
                        let st = shifted(at, -off);
                        axpy(acc, &g[st..st + n], wk[t]);
                    }
                }
            }
        }
    }
    gin_pad.map(|buf| {
        let mut gin = Tensor::zeros(s.cin, input.dims);
        for i in 0..s.cin {
            l.unpad_into(&buf[i * span..(i + 1) * span], gin.channel_mut(i));
        }
        gin
    })
}

/// Parity-split layout used by stride-2 3x3x3 convolutions. The zero-padded
/// input is split into 8 sub-volumes by coordinate parity; every tap then
/// reads one sub-volume at a constant flat offset from the output voxel.
#[derive(Debug, Clone, Copy)]
struct Polyphase {
    in_dims: [usize; 3],
    out_dims: [usize; 3],
    qx: usize,
    qplane: usize,
    /// Length of one sub-volume.
    len: usize,
    /// Flat range `[0, span)` covering every output voxel.
    span: usize,
}

impl Polyphase {
    fn new(in_dims: [usize; 3], out_dims: [usize; 3]) -> Self {
        let q = out_dims.map(|n| n + 1);
        let qplane = q[0] * q[1];
        Self {
            in_dims,
            out_dims,
            qx: q[0],
            qplane,
            len: qplane * q[2],
            span: (out_dims[0] - 1) + (out_dims[1] - 1) * q[0] + (out_dims[2] - 1) * qplane + 1,
        }
    }

    /// `(sub-volume, offset)` of tap `kz * 9 + ky * 3 + kx`.
    fn taps(&self) -> [(usize, usize); 27] {
        std::array::from_fn(|t| {
            let k = [t % 3, (t / 3) % 3, t / 9];
            let phase = (k[0] & 1) + 2 * (k[1] & 1) + 4 * (k[2] & 1);
            (
                phase,
                k[0] / 2 + (k[1] / 2) * self.qx + (k[2] / 2) * self.qplane,
            )
        })
    }

    /// Input voxel `p` sits at padded coordinate `p + 1`; returns its
    /// `(sub-volume, flat index)`.
    #[inline]
    fn locate(&self, p: [usize; 3]) -> (usize, usize) {
        let q = p.map(|v| v + 1);
        let phase = (q[0] & 1) + 2 * (q[1] & 1) + 4 * (q[2] & 1);
        (
            phase,
            q[0] / 2 + (q[1] / 2) * self.qx + (q[2] / 2) * self.qplane,
        )
    }

    fn split<T: Real>(&self, t: &Tensor<T>) -> Vec<T> {
        let [mx, my, mz] = self.in_dims;
        let mut out = vec![T::default(); t.channels * 8 * self.len];
        for c in 0..t.channels {
            let src = t.channel(c);
            let dst = &mut out[c * 8 * self.len..(c + 1) * 8 * self.len];
            for z in 0..mz {
                for y in 0..my {
                    for x in 0..mx {
                        let (ph, q) = self.locate([x, y, z]);
                        dst[ph * self.len + q] = src[(z * my + y) * mx + x];
                    }
                }
            }
        }
        out
    }

    fn merge_into<T: Real>(&self, phases: &[T], dst: &mut [T]) {
        let [mx, my, mz] = self.in_dims;
        for z in 0..mz {
            for y in 0..my {
                for x in 0..mx {
                    let (ph, q) = self.locate([x, y, z]);
                    dst[(z * my + y) * mx + x] = phases[ph * self.len + q];
                }
            }
        }
    }

    /// Output voxel `(x, y, z)` lives at `x + y qx + z qplane`.
    fn out_index(&self, x: usize, y: usize, z: usize) -> usize {
        x + y * self.qx + z * self.qplane
    }

    fn unpad_into<T: Real>(&self, span: &[T], dst: &mut [T]) {
        let [nx, ny, nz] = self.out_dims;
        for z in 0..nz {
            for y in 0..ny {
                let s = self.out_index(0, y, z);
                dst[(z * ny + y) * nx..][..nx].copy_from_slice(&span[s..s + nx]);
            }
        }
    }

    /// Output gradient in the strided output layout, zero between rows.
    fn pad_out<T: Real>(&self, g: &[T]) -> Vec<T> {
        let [nx, ny, nz] = self.out_dims;
        let mut out = vec![T::default(); self.span];
        for z in 0..nz {
            for y in 0..ny {
                let d = self.out_index(0, y, z);
                out[d..d + nx].copy_from_slice(&g[(z * ny + y) * nx..][..nx]);
            }
        }
        out
    }
}

fn conv3_forward_strided<T: Real>(input: &Tensor<T>, w: &[T], b: &[T], s: ConvShape) -> Tensor<T> {
    let out_dims = s.out_dims(input.dims);
    let l = Polyphase::new(input.dims, out_dims);
    let taps = l.taps();
    let inp = l.split(input);
    let mut out = Tensor::zeros(s.cout, out_dims);
    let mut acc = vec![T::default(); l.span];
    for o in 0..s.cout {
        acc.fill(b[o]);
        for i in 0..s.cin {
            let src = &inp[i * 8 * l.len..(i + 1) * 8 * l.len];
            let wk = &w[(o * s.cin + i) * 27..][..27];
            for (t, &(ph, off)) in taps.iter().enumerate() {
                let st = ph * l.len + off;
                axpy(&mut acc, &src[st..st + l.span], wk[t]);
            }
        }
        l.unpad_into(&acc, out.channel_mut(o));
    }
    out
}

fn conv3_backward_strided<T: Real>(
    input: &Tensor<T>,
    w: &[T],
    gout: &Tensor<T>,
    s: ConvShape,
    gw: &mut [f64],
    want_input: bool,
) -> Option<Tensor<T>> {
    let l = Polyphase::new(input.dims, gout.dims);
    let taps = l.taps();
    let inp = l.split(input);
    let mut gphase = want_input.then(|| vec![T::default(); s.cin * 8 * l.len]);
    for o in 0..s.cout {
        let go = l.pad_out(gout.channel(o));
        for i in 0..s.cin {
            let src = &inp[i * 8 * l.len..(i + 1) * 8 * l.len];
            let base = (o * s.cin + i) * 27;
            for (t, &(ph, off)) in taps.iter().enumerate() {
                let st = ph * l.len + off;
                gw[base + t] += dot(&go, &src[st..st + l.span]);
            }
            if let Some(gp) = gphase.as_mut() {
                let dst = &mut gp[i * 8 * l.len..(i + 1) * 8 * l.len];
                for (t, &(ph, off)) in taps.iter().enumerate() {
                    let st = ph * l.len + off;
                    axpy(&mut dst[st..st + l.span], &go, w[base + t]);
                }
            }
        }
    }
    gphase.map(|gp| {
        let mut gin = Tensor::zeros(s.cin, input.dims);
        for i in 0..s.cin {
            l.merge_into(&gp[i * 8 * l.len..(i + 1) * 8 * l.len], gin.channel_mut(i));
        }
        gin
    })
}

pub fn conv_forward<T: Real>(input: &Tensor<T>, w: &[T], b: &[T], s: ConvShape) -> Tensor<T> {
    debug_assert_eq!(input.channels, s.cin);
    debug_assert_eq!(w.len(), s.weight_len());
    if s.kernel == 1 {
        assert_eq!(s.stride, 1, "1x1 convolutions are stride 1");
        let mut out = Tensor::zeros(s.cout, input.dims);
        for o in 0..s.cout {
            let oc = out.channel_mut(o);
            oc.fill(b[o]);
            for i in 0..s.cin {
                let wv = w[o * s.cin + i];
                for (y, &x) in oc.iter_mut().zip(input.channel(i)) {
                    *y += wv * x;
                }
            }
        }
        return out;
    }
    match s.stride {
        1 => conv3_forward_padded(input, w, b, s),
        2 => conv3_forward_strided(input, w, b, s),
        other => panic!("unsupported stride {other}"),
    }
}

/// Accumulates weight and bias gradients into `gw`/`gb` (64-bit) and returns
/// the input gradient when `want_input` is set.
pub fn conv_backward<T: Real>(
    input: &Tensor<T>,
    w: &[T],
    gout: &Tensor<T>,
    s: ConvShape,
    gw: &mut [f64],
    gb: &mut [f64],
    want_input: bool,
) -> Option<Tensor<T>> {
    let mut gin = want_input.then(|| Tensor::zeros(s.cin, input.dims));
    for (o, b) in gb.iter_mut().enumerate().take(s.cout) {
        *b += gout.channel(o).iter().map(|v| v.to_f64()).sum::<f64>();
    }
    if s.kernel == 1 {
        for o in 0..s.cout {
            let go = gout.channel(o);
            for i in 0..s.cin {
                let ic = input.channel(i);
                gw[o * s.cin + i] += dot(go, ic);
                if let Some(gin) = gin.as_mut() {
                    let wv = w[o * s.cin + i];
                    for (g, &x) in gin.channel_mut(i).iter_mut().zip(go) {
                        *g += wv * x;
                    }
                }
            }
        }
        return gin;
    }
    match s.stride {
        1 => conv3_backward_padded(input, w, gout, s, gw, want_input),
        2 => conv3_backward_strided(input, w, gout, s, gw, want_input),
        other => panic!("unsupported stride {other}"),
    }
}

/// Dot product with eight independent partial sums.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    let mut lanes = [T::default(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut tail = T::default();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    lanes.iter().map(|v| v.to_f64()).sum::<f64>() + tail.to_f64()
}

pub fn leaky_relu<T: Real>(t: &mut Tensor<T>, slope: T) {
    for v in &mut t.data {
        if *v < T::default() {
            *v = *v * slope;
        }
    }
}

/// Multiplies `grad` by the activation derivative, read off the activation
/// output (its sign matches the input's for a positive slope).
pub fn leaky_relu_backward<T: Real>(grad: &mut Tensor<T>, out: &Tensor<T>, slope: T) {
    for (g, &y) in grad.data.iter_mut().zip(&out.data) {
        if y < T::default() {
            *g = *g * slope;
        }
    }
}

/// One axis of x2 linear upsampling with half-voxel centers and edge clamp:
/// `out[2m] = .75 in[m] + .25 in[m-1]`, `out[2m+1] = .75 in[m] + .25 in[m+1]`.
fn upsample_axis<T: Real>(
    src: &[T],
    channels: usize,
    dims: [usize; 3],
    axis: usize,
) -> (Vec<T>, [usize; 3]) {
    let mut od = dims;
    od[axis] *= 2;
    let n = dims[axis];
    let in_strides = [1, dims[0], dims[0] * dims[1]];
    let out_strides = [1, od[0], od[0] * od[1]];
    let (iv, ov) = (dims.iter().product::<usize>(), od.iter().product::<usize>());
    let mut out = vec![T::default(); channels * ov];
    let (q, t) = (T::from_f64(0.25), T::from_f64(0.75));
    for c in 0..channels {
        let s = &src[c * iv..(c + 1) * iv];
        let d = &mut out[c * ov..(c + 1) * ov];
        for (idx, _) in s.iter().enumerate() {
            let m = (idx / in_strides[axis]) % n;
            let oidx = {
                let mut x = [
                    idx % dims[0],
                    (idx / dims[0]) % dims[1],
                    idx / (dims[0] * dims[1]),
                ];
                x[axis] = 2 * m;
                x[0] + out_strides[1] * x[1] + out_strides[2] * x[2]
            };
            let prev = idx - if m > 0 { in_strides[axis] } else { 0 };
            let next = idx + if m + 1 < n { in_strides[axis] } else { 0 };
            d[oidx] = t * s[idx] + q * s[prev];
            d[oidx + out_strides[axis]] = t * s[idx] + q * s[next];
        }
    }
    (out, od)
}

fn upsample_axis_backward<T: Real>(
    g: &[T],
    channels: usize,
    in_dims: [usize; 3],
    axis: usize,
) -> Vec<T> {
    let mut od = in_dims;
    od[axis] *= 2;
    let n = in_dims[axis];
    let in_strides = [1, in_dims[0], in_dims[0] * in_dims[1]];
    let out_strides = [1, od[0], od[0] * od[1]];
    let (iv, ov) = (
        in_dims.iter().product::<usize>(),
        od.iter().product::<usize>(),
    );
    let mut out = vec![T::default(); channels * iv];
    let (q, t) = (T::from_f64(0.25), T::from_f64(0.75));
    for c in 0..channels {
        let gs = &g[c * ov..(c + 1) * ov];
        let d = &mut out[c * iv..(c + 1) * iv];
        for idx in 0..iv {
            let m = (idx / in_strides[axis]) % n;
            let mut x = [
                idx % in_dims[0],
                (idx / in_dims[0]) % in_dims[1],
                idx / (in_dims[0] * in_dims[1]),
            ];
            x[axis] = 2 * m;
            let oidx = x[0] + out_strides[1] * x[1] + out_strides[2] * x[2];
            let (ge, go) = (gs[oidx], gs[oidx + out_strides[axis]]);
            let prev = idx - if m > 0 { in_strides[axis] } else { 0 };
            let next = idx + if m + 1 < n { in_strides[axis] } else { 0 };
            d[idx] += t * ge + t * go;
            d[prev] += q * ge;
            d[next] += q * go;
        }
    }
    out
}

pub fn upsample2<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let (mut data, mut dims) = (t.data.clone(), t.dims);
    for axis in 0..3 {
        (data, dims) = upsample_axis(&data, t.channels, dims, axis);
    }
    Tensor {
        channels: t.channels,
        dims,
        data,
    }
}

/// Adjoint of [`upsample2`]; `in_dims` are the dims before upsampling.
pub fn upsample2_backward<T: Real>(g: &Tensor<T>, in_dims: [usize; 3]) -> Tensor<T> {
    let mut data = g.data.clone();
    let mut dims = g.dims;
    for axis in (0..3).rev() {
        dims[axis] /= 2;
        data = upsample_axis_backward(&data, g.channels, dims, axis);
    }
    debug_assert_eq!(dims, in_dims);
    Tensor {
        channels: g.channels,
        dims,
        data,
    }
}

pub fn concat<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(a.dims, b.dims);
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor {
        channels: a.channels + b.channels,
        dims: a.dims,
        data,
    }
}

/// Splits a concatenated gradient back into its `(first, second)` parts.
pub fn split<T: Real>(g: Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let v = g.volume();
    let mut data = g.data;
    let tail = data.split_off(first * v);
    (
        Tensor {
            channels: first,
            dims: g.dims,
            data,
        },
        Tensor {
            channels: g.channels - first,
            dims: g.dims,
            data: tail,
        },
    )
}
