use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Activation, Layer, LayerCache, LayerGrads, LayerSpec};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Channels of the generator encoder at full width.
pub const GENERATOR_ENCODER: [usize; 7] = [64, 128, 256, 512, 512, 512, 512];
/// Channels of the discriminator encoder at full width; its decoder mirrors
/// them.
pub const DISCRIMINATOR_ENCODER: [usize; 4] = [64, 128, 256, 512];

fn scale_channels(channels: &[usize], multiplier: f64) -> Vec<usize> {
    channels
        .iter()
        .map(|&c| ((c as f64 * multiplier).round() as usize).max(1))
        .collect()
}

/// Skip-connected encoder-decoder.
///
/// Encoder: stride-2 convolutions. Decoder level `j` is a stride-2
/// transposed convolution followed by a stride-1 convolution over
/// `[upsampled ∥ encoder activation at the same resolution]`, where the
/// last level pairs with the network input itself. A stride-1 `tanh`
/// convolution produces the output image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub input_size: usize,
    pub input_channels: usize,
    pub output_channels: usize,
    pub encoder_channels: Vec<usize>,
    pub width_multiplier: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            input_size: 256,
            input_channels: 4,
            output_channels: 3,
            encoder_channels: GENERATOR_ENCODER.to_vec(),
            width_multiplier: 1.0,
        }
    }
}

impl GeneratorSpec {
    pub fn with_width(width_multiplier: f64) -> Self {
        GeneratorSpec {
            width_multiplier,
            ..Self::default()
        }
    }

    /// Five-level variant on 32×32 inputs at 1/8 width, small enough for
    /// finite-difference gradient checks.
    pub fn test_scale() -> Self {
        GeneratorSpec {
            input_size: 32,
            encoder_channels: GENERATOR_ENCODER[..5].to_vec(),
            width_multiplier: 0.125,
            ..Self::default()
        }
    }

    pub fn depth(&self) -> usize {
        self.encoder_channels.len()
    }

    pub fn encoder_widths(&self) -> Vec<usize> {
        scale_channels(&self.encoder_channels, self.width_multiplier)
    }

    /// Output channels of the decoder levels: the encoder list reversed.
    pub fn decoder_widths(&self) -> Vec<usize> {
        let mut v = self.encoder_widths();
        v.reverse();
        v
    }

    pub fn encoder_layers(&self) -> Vec<LayerSpec> {
        self.encoder_widths()
            .into_iter()
            .map(|c| LayerSpec::conv(2, c))
            .collect()
    }

    pub fn deconv_layers(&self) -> Vec<LayerSpec> {
        self.decoder_widths()
            .into_iter()
            .map(LayerSpec::deconv)
            .collect()
    }

    pub fn fuse_layers(&self) -> Vec<LayerSpec> {
        self.decoder_widths()
            .into_iter()
            .map(|c| LayerSpec::conv(1, c))
            .collect()
    }

    pub fn head_layer(&self) -> LayerSpec {
        LayerSpec::head(self.output_channels, Activation::Tanh)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("generator: {m}")));
        if self.encoder_channels.is_empty() {
            return bad("encoder needs at least one layer".into());
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return bad(format!("width multiplier must be positive, got {}", self.width_multiplier));
        }
        if self.input_channels == 0 || self.output_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        let factor = 1usize << self.depth();
        if self.input_size == 0 || !self.input_size.is_multiple_of(factor) {
            return bad(format!(
                "input size {} is not divisible by 2^{}",
                self.input_size,
                self.depth()
            ));
        }
        Ok(())
    }
}

/// Plain encoder-decoder emitting one logit per input pixel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub input_size: usize,
    pub input_channels: usize,
    pub encoder_channels: Vec<usize>,
    pub width_multiplier: f64,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec {
            input_size: 256,
            input_channels: 7,
            encoder_channels: DISCRIMINATOR_ENCODER.to_vec(),
            width_multiplier: 1.0,
        }
    }
}

impl DiscriminatorSpec {
    pub fn with_width(width_multiplier: f64) -> Self {
        DiscriminatorSpec {
            width_multiplier,
            ..Self::default()
        }
    }

    pub fn test_scale() -> Self {
        DiscriminatorSpec {
            input_size: 32,
            width_multiplier: 0.125,
            ..Self::default()
        }
    }

    pub fn encoder_widths(&self) -> Vec<usize> {
        scale_channels(&self.encoder_channels, self.width_multiplier)
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let enc = self.encoder_widths();
        let mut v: Vec<LayerSpec> = enc.iter().map(|&c| LayerSpec::conv(2, c)).collect();
        v.extend(enc.iter().rev().map(|&c| LayerSpec::deconv(c)));
        v.push(LayerSpec::head(1, Activation::None));
        v
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("discriminator: {m}")));
        if self.encoder_channels.is_empty() {
            return bad("encoder needs at least one layer".into());
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return bad(format!("width multiplier must be positive, got {}", self.width_multiplier));
        }
        let factor = 1usize << self.encoder_channels.len();
        if self.input_size == 0 || !self.input_size.is_multiple_of(factor) {
            return bad(format!("input size {} is not divisible by {factor}", self.input_size));
        }
        Ok(())
    }
}

/// Named layers of one network, in a fixed order shared by gradients,
/// caches, optimizer state and checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    names: Vec<String>,
    layers: Vec<Layer<T>>,
}

/// Per-layer gradients, indexed like [`Network::layers`].
pub type Grads<T> = Vec<LayerGrads<T>>;

/// Per-layer training caches, indexed like [`Network::layers`].
pub struct ForwardCache<T> {
    layers: Vec<Option<LayerCache<T>>>,
}

impl<T: Real> ForwardCache<T> {
    /// Activated output of layer `i`.
    pub fn output(&self, i: usize) -> Option<&Tensor<T>> {
        self.layers.get(i)?.as_ref().map(LayerCache::output)
    }
}

impl<T: Real> Network<T> {
    fn build(specs: Vec<(String, LayerSpec, usize)>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (names, layers) = specs
            .into_iter()
            .map(|(name, spec, cin)| (name, Layer::new(spec, cin, &mut rng)))
            .unzip();
        Network { names, layers }
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn zero_grads(&self) -> Grads<T> {
        self.layers.iter().map(Layer::zero_grads).collect()
    }

    /// Trainable parameter count (weights, biases, normalization scales and
    /// shifts).
    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Layer::parameter_count).sum()
    }

    /// Every stored array as `(name, shape, values)`.
    pub fn named_arrays(&self) -> Vec<(String, Vec<usize>, &[T])> {
        self.names
            .iter()
            .zip(&self.layers)
            .flat_map(|(prefix, layer)| {
                layer
                    .arrays()
                    .into_iter()
                    .map(move |(suffix, shape, data)| (format!("{prefix}.{suffix}"), shape, data))
            })
            .collect()
    }

    pub fn named_arrays_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        self.names
            .iter()
            .zip(self.layers.iter_mut())
            .flat_map(|(prefix, layer)| {
                layer
                    .arrays_mut()
                    .into_iter()
                    .map(move |(suffix, data)| (format!("{prefix}.{suffix}"), data))
            })
            .collect()
    }

    pub fn update_running_stats(&mut self, cache: &ForwardCache<T>) {
        for (layer, c) in self.layers.iter_mut().zip(&cache.layers) {
            if let Some(c) = c {
                layer.update_running_stats(c);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.named_arrays()
            .iter()
            .all(|(_, _, data)| data.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.to_f64().unwrap()).unwrap()).collect();
                Layer {
                    spec: l.spec,
                    in_channels: l.in_channels,
                    weight: conv(&l.weight),
                    bias: conv(&l.bias),
                    norm: l.norm.as_ref().map(|bn| super::layers::BatchNorm {
                        gamma: conv(&bn.gamma),
                        beta: conv(&bn.beta),
                        running_mean: conv(&bn.running_mean),
                        running_var: conv(&bn.running_var),
                    }),
                }
            })
            .collect();
        Network {
            names: self.names.clone(),
            layers,
        }
    }
}

/// Shape of each activation produced by a forward pass, as
/// `(layer name, [channels, height, width])`.
pub type ShapeTrace = Vec<(String, [usize; 3])>;

fn trace_push<T: Real>(trace: &mut Option<&mut ShapeTrace>, name: &str, t: &Tensor<T>) {
    if let Some(trace) = trace.as_deref_mut() {
        trace.push((name.to_string(), [t.channels(), t.height(), t.width()]));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T = f32> {
    spec: GeneratorSpec,
    net: Network<T>,
}

impl<T: Real> Generator<T> {
    pub fn new(spec: GeneratorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let depth = spec.depth();
        let enc = spec.encoder_widths();
        let dec = spec.decoder_widths();
        let mut layers = Vec::new();
        let mut cin = spec.input_channels;
        for (i, l) in spec.encoder_layers().into_iter().enumerate() {
            layers.push((format!("encoder.{i}"), l, cin));
            cin = l.out_channels;
        }
        for (j, (up, fuse)) in spec.deconv_layers().into_iter().zip(spec.fuse_layers()).enumerate() {
            let skip = depth - 1 - j;
            let skip_channels = if skip == 0 { spec.input_channels } else { enc[skip - 1] };
            layers.push((format!("decoder.{j}.up"), up, cin));
            layers.push((format!("decoder.{j}.fuse"), fuse, dec[j] + skip_channels));
            cin = fuse.out_channels;
        }
        layers.push(("head".to_string(), spec.head_layer(), cin));
        Ok(Generator {
            spec,
            net: Network::build(layers, seed),
        })
    }

    pub fn from_parts(spec: GeneratorSpec, net: Network<T>) -> Self {
        Generator { spec, net }
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn network(&self) -> &Network<T> {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network<T> {
        &mut self.net
    }

    fn up_index(&self, j: usize) -> usize {
        self.spec.depth() + 2 * j
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = self.spec.input_size;
        let want = [x.batch(), self.spec.input_channels, s, s];
        if x.shape() != want || x.batch() == 0 {
            return Err(Error::shape(format!("{want:?}"), format!("{:?}", x.shape())));
        }
        Ok(())
    }

    /// Inference pass with running normalization statistics.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_traced(x, None)
    }

    pub fn forward_traced(&self, x: &Tensor<T>, mut trace: Option<&mut ShapeTrace>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let depth = self.spec.depth();
        let layers = self.net.layers();
        let names = self.net.names();
        let mut skips = vec![x.clone()];
        let mut h = x.clone();
        for i in 0..depth {
            h = layers[i].forward(&h);
            trace_push(&mut trace, &names[i], &h);
            if i + 1 < depth {
                skips.push(h.clone());
            }
        }
        for j in 0..depth {
            let up = self.up_index(j);
            let d = layers[up].forward(&h);
            trace_push(&mut trace, &names[up], &d);
            let cat = Tensor::concat_channels(&d, &skips[depth - 1 - j]);
            h = layers[up + 1].forward(&cat);
            trace_push(&mut trace, &names[up + 1], &h);
        }
        let out = layers[3 * depth].forward(&h);
        trace_push(&mut trace, &names[3 * depth], &out);
        Ok(out)
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.check_input(x)?;
        let depth = self.spec.depth();
        let layers = self.net.layers();
        let mut caches: Vec<Option<LayerCache<T>>> = (0..layers.len()).map(|_| None).collect();
        let mut skips = vec![x.clone()];
        let mut h = x.clone();
        for i in 0..depth {
            let (out, c) = layers[i].forward_train(h);
            caches[i] = Some(c);
            if i + 1 < depth {
                skips.push(out.clone());
            }
            h = out;
        }
        for j in 0..depth {
            let up = self.up_index(j);
            let (d, c) = layers[up].forward_train(h);
            caches[up] = Some(c);
            let cat = Tensor::concat_channels(&d, &skips[depth - 1 - j]);
            let (out, c) = layers[up + 1].forward_train(cat);
            caches[up + 1] = Some(c);
            h = out;
        }
        let (out, c) = layers[3 * depth].forward_train(h);
        caches[3 * depth] = Some(c);
        Ok((out, ForwardCache { layers: caches }))
    }

    /// Backpropagates `grad_out` (gradient w.r.t. the generator output)
    /// and returns parameter gradients.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_out: Tensor<T>) -> Grads<T> {
        let depth = self.spec.depth();
        let layers = self.net.layers();
        let c = |i: usize| cache.layers[i].as_ref().expect("missing layer cache");
        let mut grads = self.net.zero_grads();
        let head = 3 * depth;
        let mut g = layers[head]
            .backward(c(head), grad_out, &mut grads[head], true)
            .unwrap();
        let mut skip_grads: Vec<Option<Tensor<T>>> = (0..depth).map(|_| None).collect();
        for j in (0..depth).rev() {
            let up = self.up_index(j);
            let gcat = layers[up + 1]
                .backward(c(up + 1), g, &mut grads[up + 1], true)
                .unwrap();
            let (gd, gskip) = gcat.split_channels(layers[up].spec.out_channels);
            skip_grads[depth - 1 - j] = Some(gskip);
            g = layers[up].backward(c(up), gd, &mut grads[up], true).unwrap();
        }
        for i in (0..depth).rev() {
            if i + 1 < depth {
                g.add_assign(skip_grads[i + 1].as_ref().unwrap());
            }
            match layers[i].backward(c(i), g, &mut grads[i], i > 0) {
                Some(next) => g = next,
                None => break,
            }
        }
        grads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T = f32> {
    spec: DiscriminatorSpec,
    net: Network<T>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(spec: DiscriminatorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::new();
        let mut cin = spec.input_channels;
        let n_enc = spec.encoder_channels.len();
        for (i, l) in spec.layers().into_iter().enumerate() {
            let name = if i < n_enc {
                format!("encoder.{i}")
            } else if i < 2 * n_enc {
                format!("decoder.{}", i - n_enc)
            } else {
                "head".to_string()
            };
            layers.push((name, l, cin));
            cin = l.out_channels;
        }
        Ok(Discriminator {
            spec,
            net: Network::build(layers, seed),
        })
    }

    pub fn from_parts(spec: DiscriminatorSpec, net: Network<T>) -> Self {
        Discriminator { spec, net }
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn network(&self) -> &Network<T> {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network<T> {
        &mut self.net
    }

    fn check_input(&self, z: &Tensor<T>) -> Result<()> {
        if z.channels() != self.spec.input_channels {
            return Err(Error::shape(
                format!("{} input channels [candidate RGB, input RGB, mask]", self.spec.input_channels),
                format!("{} channels", z.channels()),
            ));
        }
        let s = self.spec.input_size;
        if z.height() != s || z.width() != s || z.batch() == 0 {
            return Err(Error::shape(
                format!("[B, {}, {s}, {s}]", self.spec.input_channels),
                format!("{:?}", z.shape()),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_traced(z, None)
    }

    pub fn forward_traced(&self, z: &Tensor<T>, mut trace: Option<&mut ShapeTrace>) -> Result<Tensor<T>> {
        self.check_input(z)?;
        let mut h = z.clone();
        for (layer, name) in self.net.layers().iter().zip(self.net.names()) {
            h = layer.forward(&h);
            trace_push(&mut trace, name, &h);
        }
        Ok(h)
    }

    pub fn forward_train(&self, z: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.check_input(z)?;
        let mut h = z.clone();
        let mut caches = Vec::with_capacity(self.net.layers().len());
        for layer in self.net.layers() {
            let (out, c) = layer.forward_train(h);
            caches.push(Some(c));
            h = out;
        }
        Ok((h, ForwardCache { layers: caches }))
    }

    /// Returns parameter gradients and, when `want_input`, the gradient
    /// w.r.t. the 7-channel input.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_out: Tensor<T>, want_input: bool) -> (Grads<T>, Option<Tensor<T>>) {
        let mut grads = self.net.zero_grads();
        let mut g = Some(grad_out);
        for (i, layer) in self.net.layers().iter().enumerate().rev() {
            let c = cache.layers[i].as_ref().expect("missing layer cache");
            g = layer.backward(c, g.take().unwrap(), &mut grads[i], i > 0 || want_input);
        }
        (grads, g)
    }
}
