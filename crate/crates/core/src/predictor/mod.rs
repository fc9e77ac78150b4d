//! Learnable registration model: a small 3D encoder-decoder mapping the
//! (fixed, moving) pair to a displacement field, with a hand-written
//! reverse pass and an AdamW trainer state.
//!
//! Network, for `channels = [c1, .., cL]`:
//!
//! ```text
//! f0 = act(conv3(input, 2 -> c1))                   full resolution
//! fl = act(conv3/2(f(l-1) -> cl))                   l = 1..L, halves each dim
//! x  = fL
//! x  = act(conv3(concat(up(x), fl) -> cl))          l = L-1 .. 1
//! u  = conv1(concat(up(x), f0) -> 3)                displacement head
//! ```

mod checkpoint;
pub mod layers;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{read_checkpoint, write_checkpoint, MAGIC_CHECKPOINT};
use layers::{
    concat, conv_backward, conv_forward, leaky_relu, leaky_relu_backward, split, upsample2,
    upsample2_backward, ConvShape, Real, Tensor,
};

use crate::error::{OfgError, Result};
use crate::optimizer::AdamMoments;
use crate::volume::{DisplacementField, ScalarVolume};

/// Scale of the uniform initialization of the displacement head, so that an
/// untrained model predicts a near-identity warp.
pub const HEAD_INIT_SCALE: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    /// Channels of the stride-2 encoder levels; the length is the number of
    /// downsamplings.
    pub channels: Vec<usize>,
    pub leaky_slope: f32,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            channels: vec![8, 16],
            leaky_slope: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Stem,
    Down(usize),
    Decode(usize),
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layer {
    role: Role,
    shape: ConvShape,
    offset: usize,
}

impl Layer {
    fn weights<'a, T>(&self, p: &'a [T]) -> &'a [T] {
        &p[self.offset..self.offset + self.shape.weight_len()]
    }

    fn bias<'a, T>(&self, p: &'a [T]) -> &'a [T] {
        let start = self.offset + self.shape.weight_len();
        &p[start..start + self.shape.cout]
    }

    fn len(&self) -> usize {
        self.shape.weight_len() + self.shape.cout
    }
}

impl Architecture {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(OfgError::InvalidConfig(format!(
                "architecture needs at least one level with non-zero channels, got {:?}",
                self.channels
            )));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(OfgError::InvalidConfig(
                "leaky slope must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }

    /// Channels of encoder feature `f_l`.
    fn feature_channels(&self, l: usize) -> usize {
        self.channels[l.saturating_sub(1)]
    }

    /// Layers in parameter-layout order: stem, downs, decoders (coarse to
    /// fine), head. Each layer stores weights then biases.
    fn layers(&self) -> Vec<Layer> {
        let conv = |cin, cout, kernel, stride| ConvShape {
            cin,
            cout,
            kernel,
            stride,
        };
        let levels = self.levels();
        let mut specs = vec![(Role::Stem, conv(2, self.feature_channels(0), 3, 1))];
        for l in 1..=levels {
            specs.push((
                Role::Down(l),
                conv(self.feature_channels(l - 1), self.feature_channels(l), 3, 2),
            ));
        }
        let mut x = self.feature_channels(levels);
        for l in (1..levels).rev() {
            let out = self.feature_channels(l);
            specs.push((Role::Decode(l), conv(x + out, out, 3, 1)));
            x = out;
        }
        specs.push((Role::Head, conv(x + self.feature_channels(0), 3, 1, 1)));
        let mut offset = 0;
        specs
            .into_iter()
            .map(|(role, shape)| {
                let layer = Layer {
                    role,
                    shape,
                    offset,
                };
                offset += layer.len();
                layer
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(Layer::len).sum()
    }

    fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        let factor = 1usize << self.levels();
        if dims.iter().any(|d| d % factor != 0) {
            return Err(OfgError::InvalidGrid(format!(
                "predictor with {} downsamplings needs every dimension divisible by {factor}, got {dims:?}",
                self.levels()
            )));
        }
        Ok(())
    }
}

/// Anything that maps an image pair to a displacement field and can be
/// trained from a gradient with respect to that field.
pub trait RegistrationModel {
    type Cache;

    fn predict(
        &self,
        fixed: &ScalarVolume,
        moving: &ScalarVolume,
    ) -> Result<(DisplacementField, Self::Cache)>;

    /// Gradient of a scalar loss with respect to every parameter, given the
    /// loss gradient with respect to the predicted field.
    fn backward(&self, cache: &Self::Cache, field_grad: &DisplacementField) -> Result<Vec<f32>>;

    fn params(&self) -> &[f32];

    fn params_mut(&mut self) -> &mut [f32];
}

/// Weights and biases of the encoder-decoder, flattened in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    arch: Architecture,
    values: Vec<f32>,
}

/// Activations recorded by [`PredictorParams::predict`] for the reverse pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T = f32> {
    dims: [usize; 3],
    input: Tensor<T>,
    /// Post-activation encoder features `f_0 .. f_L`.
    features: Vec<Tensor<T>>,
    /// `(concatenated input, post-activation output)` per decoder layer, in
    /// execution order.
    decoded: Vec<(Tensor<T>, Tensor<T>)>,
    head_input: Tensor<T>,
}

impl PredictorParams {
    pub fn from_values(arch: Architecture, values: Vec<f32>) -> Result<Self> {
        arch.validate()?;
        if values.len() != arch.param_count() {
            return Err(OfgError::LengthMismatch {
                expected: arch.param_count(),
                actual: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(OfgError::NonFinite {
                what: "predictor parameters",
                index,
            });
        }
        Ok(Self { arch, values })
    }

    /// All-zero parameters: the model predicts exactly the zero field.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        let n = arch.param_count();
        Self::from_values(arch, vec![0.0; n])
    }

    /// He-uniform hidden layers (LeakyReLU gain), zero hidden biases, and a
    /// head drawn uniformly at [`HEAD_INIT_SCALE`].
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0f32; arch.param_count()];
        let gain = (2.0 / (1.0 + arch.leaky_slope.powi(2) as f64)).sqrt();
        for layer in arch.layers() {
            let w = layer.shape.weight_len();
            let (lo, hi) = (layer.offset, layer.offset + layer.len());
            if layer.role == Role::Head {
                for v in &mut values[lo..hi] {
                    *v = rng.gen_range(-HEAD_INIT_SCALE..HEAD_INIT_SCALE);
                }
            } else {
                let fan_in = (layer.shape.cin * layer.shape.kernel.pow(3)) as f64;
                let bound = (gain * (3.0 / fan_in).sqrt()) as f32;
                for v in &mut values[lo..lo + w] {
                    *v = rng.gen_range(-bound..bound);
                }
            }
        }
        Self::from_values(arch, values)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Multiplies the head weights and biases by `factor` (used to give
    /// gradient checks a non-degenerate head).
    pub fn scale_head(&mut self, factor: f32) {
        let head = *self.arch.layers().last().expect("head layer");
        for v in &mut self.values[head.offset..head.offset + head.len()] {
            *v *= factor;
        }
    }

    fn input_tensor<T: Real>(fixed: &ScalarVolume, moving: &ScalarVolume) -> Tensor<T> {
        let dims = fixed.grid().dims();
        let data = fixed
            .data()
            .iter()
            .chain(moving.data())
            .map(|&v| T::from_f64(v as f64))
            .collect();
        Tensor {
            channels: 2,
            dims,
            data,
        }
    }

    pub fn predict(
        &self,
        fixed: &ScalarVolume,
        moving: &ScalarVolume,
    ) -> Result<(DisplacementField, ForwardCache)> {
        let (out, cache) = self.forward::<f32>(fixed, moving, &self.values)?;
        let flat: Vec<f32> = (0..out.volume())
            .flat_map(|v| (0..3).map(move |c| (c, v)))
            .map(|(c, v)| out.channel(c)[v])
            .collect();
        let field = DisplacementField::from_interleaved(*fixed.grid(), &flat)?;
        Ok((field, cache))
    }

    /// The same network evaluated entirely in `f64` with the given parameter
    /// values, returning per-voxel displacements. Used as a numerical
    /// reference for the `f32` path.
    pub fn predict_f64(
        &self,
        fixed: &ScalarVolume,
        moving: &ScalarVolume,
        values: &[f64],
    ) -> Result<Vec<[f64; 3]>> {
        if values.len() != self.values.len() {
            return Err(OfgError::LengthMismatch {
                expected: self.values.len(),
                actual: values.len(),
            });
        }
        let (out, _) = self.forward::<f64>(fixed, moving, values)?;
        Ok((0..out.volume())
            .map(|v| std::array::from_fn(|c| out.channel(c)[v]))
            .collect())
    }

    fn forward<T: Real>(
        &self,
        fixed: &ScalarVolume,
        moving: &ScalarVolume,
        p: &[T],
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        fixed.grid().ensure_same(moving.grid())?;
        let dims = fixed.grid().dims();
        self.arch.check_dims(dims)?;
        let slope = T::from_f64(self.arch.leaky_slope as f64);
        let levels = self.arch.levels();
        let input = Self::input_tensor::<T>(fixed, moving);

        let mut features: Vec<Tensor<T>> = Vec::with_capacity(levels + 1);
        let mut decoded = Vec::new();
        let mut x: Option<Tensor<T>> = None;
        let mut head_out = None;
        for layer in &self.arch.layers() {
            let (w, b, s) = (layer.weights(p), layer.bias(p), layer.shape);
            match layer.role {
                Role::Stem => {
                    let mut f = conv_forward(&input, w, b, s);
                    leaky_relu(&mut f, slope);
                    features.push(f);
                }
                Role::Down(l) => {
                    let mut f = conv_forward(&features[l - 1], w, b, s);
                    leaky_relu(&mut f, slope);
                    features.push(f);
                }
                Role::Decode(l) => {
                    let prev = x.take().unwrap_or_else(|| features[levels].clone());
                    let cat = concat(&upsample2(&prev), &features[l]);
                    let mut out = conv_forward(&cat, w, b, s);
                    leaky_relu(&mut out, slope);
                    x = Some(out.clone());
                    decoded.push((cat, out));
                }
                Role::Head => {
                    let prev = x.take().unwrap_or_else(|| features[levels].clone());
                    let cat = concat(&upsample2(&prev), &features[0]);
                    head_out = Some((conv_forward(&cat, w, b, s), cat));
                }
            }
        }
        let (out, head_input) = head_out.expect("architecture ends with a head");
        Ok((
            out,
            ForwardCache {
                dims,
                input,
                features,
                decoded,
                head_input,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &ForwardCache,
        field_grad: &DisplacementField,
    ) -> Result<Vec<f32>> {
        if field_grad.grid().dims() != cache.dims {
            return Err(OfgError::GridMismatch {
                left: cache.dims,
                right: field_grad.grid().dims(),
            });
        }
        let p = &self.values;
        let slope = self.arch.leaky_slope;
        let levels = self.arch.levels();
        let layers = self.arch.layers();
        let mut grads = vec![0.0f64; p.len()];

        let mut gout = Tensor::<f32>::zeros(3, cache.dims);
        for (v, g) in field_grad.data().iter().enumerate() {
            for (c, &x) in g.iter().enumerate() {
                gout.channel_mut(c)[v] = x;
            }
        }
        let mut gfeat: Vec<Option<Tensor<f32>>> = vec![None; levels + 1];
        let add_feat = |slot: &mut Option<Tensor<f32>>, g: Tensor<f32>| match slot {
            Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b),
            None => *slot = Some(g),
        };

        let grad_slices = |grads: &mut [f64], layer: &Layer| -> (usize, usize) {
            let _ = grads;
            (layer.offset, layer.offset + layer.shape.weight_len())
        };

        // Decoder path, fine to coarse.
        let mut decoded = cache.decoded.iter().rev();
        let mut g_prev: Option<(Tensor<f32>, [usize; 3])> = None;
        for layer in layers.iter().rev() {
            let (w, s) = (layer.weights(p), layer.shape);
            let (wo, bo) = grad_slices(&mut grads, layer);
            match layer.role {
                Role::Head => {
                    let (gw, rest) = grads[wo..].split_at_mut(bo - wo);
                    let gin = conv_backward(
                        &cache.head_input,
                        w,
                        &gout,
                        s,
                        gw,
                        &mut rest[..s.cout],
                        true,
                    )
                    .expect("input gradient requested");
                    let (g_up, g_f0) = split(gin, s.cin - self.arch.feature_channels(0));
                    add_feat(&mut gfeat[0], g_f0);
                    let coarse = cache.features[1].dims;
                    g_prev = Some((upsample2_backward(&g_up, coarse), coarse));
                }
                Role::Decode(l) => {
                    let (cat, out) = decoded.next().expect("one cache entry per decoder layer");
                    let (mut g, _) = g_prev.take().expect("gradient flows from the finer level");
                    leaky_relu_backward(&mut g, out, slope);
                    let (gw, rest) = grads[wo..].split_at_mut(bo - wo);
                    let gin = conv_backward(cat, w, &g, s, gw, &mut rest[..s.cout], true)
                        .expect("input gradient requested");
                    let (g_up, g_fl) = split(gin, s.cin - self.arch.feature_channels(l));
                    add_feat(&mut gfeat[l], g_fl);
                    let coarse = cache.features[l + 1].dims;
                    g_prev = Some((upsample2_backward(&g_up, coarse), coarse));
                }
                Role::Down(l) => {
                    if let Some((g, _)) = g_prev.take() {
                        // Innermost decoder input is the deepest feature map.
                        add_feat(&mut gfeat[levels], g);
                    }
                    let mut g = gfeat[l].take().expect("every feature receives a gradient");
                    leaky_relu_backward(&mut g, &cache.features[l], slope);
                    let (gw, rest) = grads[wo..].split_at_mut(bo - wo);
                    let gin = conv_backward(
                        &cache.features[l - 1],
                        w,
                        &g,
                        s,
                        gw,
                        &mut rest[..s.cout],
                        true,
                    )
                    .expect("input gradient requested");
                    add_feat(&mut gfeat[l - 1], gin);
                }
                Role::Stem => {
                    let mut g = gfeat[0].take().expect("stem output receives a gradient");
                    leaky_relu_backward(&mut g, &cache.features[0], slope);
                    let (gw, rest) = grads[wo..].split_at_mut(bo - wo);
                    conv_backward(&cache.input, w, &g, s, gw, &mut rest[..s.cout], false);
                }
            }
        }
        Ok(grads.into_iter().map(|g| g as f32).collect())
    }
}

impl RegistrationModel for PredictorParams {
    type Cache = ForwardCache;

    fn predict(
        &self,
        fixed: &ScalarVolume,
        moving: &ScalarVolume,
    ) -> Result<(DisplacementField, ForwardCache)> {
        PredictorParams::predict(self, fixed, moving)
    }

    fn backward(&self, cache: &ForwardCache, field_grad: &DisplacementField) -> Result<Vec<f32>> {
        PredictorParams::backward(self, cache, field_grad)
    }

    fn params(&self) -> &[f32] {
        &self.values
    }

    fn params_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }
}

/// AdamW state for the predictor parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    moments: AdamMoments,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl TrainState {
    pub fn new(param_count: usize) -> Self {
        Self {
            moments: AdamMoments::new(param_count),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.moments.steps()
    }

    /// Decoupled weight decay `p <- p (1 - lr wd)` followed by an Adam step.
    pub fn update(
        &mut self,
        params: &mut [f32],
        grads: &[f32],
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.moments.len() {
            return Err(OfgError::LengthMismatch {
                expected: self.moments.len(),
                actual: grads.len(),
            });
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(OfgError::NonFinite {
                what: "predictor gradient",
                index,
            });
        }
        let decay = 1.0 - lr * weight_decay;
        let mut decayed: Vec<f64> = params.iter().map(|&p| p as f64 * decay).collect();
        self.moments.step(
            grads.iter().map(|&g| g as f64),
            lr,
            (self.beta1, self.beta2, self.eps),
            |i, d| decayed[i] += d,
        )?;
        for (p, d) in params.iter_mut().zip(decayed) {
            *p = d as f32;
        }
        Ok(())
    }
}
