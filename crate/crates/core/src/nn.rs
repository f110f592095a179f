//! Small convolutional and fully connected networks with named output heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

/// One trunk layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv2d { out_channels: usize, kernel: usize, #[serde(default = "one")] stride: usize },
    MaxPool { kernel: usize },
    Dense { out_dim: usize },
    Activation(Activation),
}

fn one() -> usize {
    1
}

impl LayerSpec {
    fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool { .. } => "max_pool",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Activation(Activation::Relu) => "relu",
            LayerSpec::Activation(Activation::Tanh) => "tanh",
        }
    }
}

/// Trunk architecture shared by every head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Three conv layers (16, 32, 32 filters, max-pool after the first) and a 64-unit dense layer.
    pub fn small_cnn() -> Self {
        use LayerSpec::*;
        NetworkSpec {
            layers: vec![
                Conv2d { out_channels: 16, kernel: 3, stride: 1 },
                Activation(self::Activation::Relu),
                MaxPool { kernel: 2 },
                Conv2d { out_channels: 32, kernel: 3, stride: 1 },
                Activation(self::Activation::Relu),
                Conv2d { out_channels: 32, kernel: 3, stride: 1 },
                Activation(self::Activation::Relu),
                Dense { out_dim: 64 },
                Activation(self::Activation::Relu),
            ],
        }
    }

    /// Fully connected ReLU trunk with the given hidden widths.
    pub fn mlp(hidden: &[usize]) -> Self {
        let layers = hidden
            .iter()
            .flat_map(|&h| [LayerSpec::Dense { out_dim: h }, LayerSpec::Activation(Activation::Relu)])
            .collect();
        NetworkSpec { layers }
    }

    fn has_relu(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerSpec::Activation(Activation::Relu)))
    }
}

/// A named output head: a dense layer on top of the trunk features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub name: String,
    pub out_dim: usize,
    /// Scales the default init; small values give near-uniform initial policies.
    pub init_gain: f64,
}

/// A named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    Conv { w: usize, b: usize },
    Pool(usize),
    Dense { w: usize, b: usize },
    Act(Activation),
}

/// Tape handles for every parameter, in parameter order.
pub struct ParamVars<'t>(pub Vec<Var<'t>>);

/// Trunk features plus one output per head.
pub struct NetOutput<'t> {
    pub features: Var<'t>,
    pub heads: Vec<Var<'t>>,
    pub params: ParamVars<'t>,
}

/// A feed-forward network: a shared trunk followed by dense heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    input_shape: Vec<usize>,
    feature_dim: usize,
    layers: Vec<Layer>,
    heads: Vec<(HeadSpec, usize, usize)>,
    params: Vec<Param>,
}

impl Network {
    /// Builds and initialises a network with He/LeCun-style uniform fan-in init.
    pub fn new(spec: &NetworkSpec, input_shape: &[usize], heads: &[HeadSpec], seed: u64) -> Result<Self> {
        if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
            return Err(Error::config(format!("invalid network input shape {input_shape:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut layers = Vec::new();
        let mut shape = input_shape.to_vec();
        let relu_trunk = spec.has_relu();

        for (i, layer) in spec.layers.iter().enumerate() {
            let name = format!("trunk.{i}.{}", layer.kind());
            match *layer {
                LayerSpec::Conv2d { out_channels, kernel, stride } => {
                    if stride != 1 {
                        return Err(Error::config(format!("layer {name}: only stride 1 is supported, got {stride}")));
                    }
                    if kernel % 2 == 0 || kernel == 0 {
                        return Err(Error::config(format!("layer {name}: kernel must be odd, got {kernel}")));
                    }
                    if shape.len() != 3 {
                        return Err(Error::config(format!(
                            "layer {name}: expects [C,H,W] input, got {shape:?}"
                        )));
                    }
                    let fan_in = shape[0] * kernel * kernel;
                    let w = init_uniform(&mut rng, &[out_channels, shape[0], kernel, kernel], fan_in, relu_trunk, 1.0);
                    params.push(Param { name: format!("{name}.weight"), tensor: w });
                    params.push(Param { name: format!("{name}.bias"), tensor: Tensor::zeros(&[out_channels]).with_grad() });
                    layers.push(Layer::Conv { w: params.len() - 2, b: params.len() - 1 });
                    shape = vec![out_channels, shape[1], shape[2]];
                }
                LayerSpec::MaxPool { kernel } => {
                    if shape.len() != 3 || kernel == 0 || shape[1] < kernel || shape[2] < kernel {
                        return Err(Error::config(format!("layer {name}: cannot pool {shape:?} with kernel {kernel}")));
                    }
                    layers.push(Layer::Pool(kernel));
                    shape = vec![shape[0], shape[1] / kernel, shape[2] / kernel];
                }
                LayerSpec::Dense { out_dim } => {
                    if out_dim == 0 {
                        return Err(Error::config(format!("layer {name}: zero width")));
                    }
                    let fan_in: usize = shape.iter().product();
                    let w = init_uniform(&mut rng, &[fan_in, out_dim], fan_in, relu_trunk, 1.0);
                    params.push(Param { name: format!("{name}.weight"), tensor: w });
                    params.push(Param { name: format!("{name}.bias"), tensor: Tensor::zeros(&[out_dim]).with_grad() });
                    layers.push(Layer::Dense { w: params.len() - 2, b: params.len() - 1 });
                    shape = vec![out_dim];
                }
                LayerSpec::Activation(a) => layers.push(Layer::Act(a)),
            }
        }

        let feature_dim: usize = shape.iter().product();
        let mut head_params = Vec::new();
        for head in heads {
            if head.out_dim == 0 {
                return Err(Error::config(format!("head {}: zero output width", head.name)));
            }
            let w = init_uniform(&mut rng, &[feature_dim, head.out_dim], feature_dim, false, head.init_gain);
            params.push(Param { name: format!("{}.weight", head.name), tensor: w });
            params.push(Param { name: format!("{}.bias", head.name), tensor: Tensor::zeros(&[head.out_dim]).with_grad() });
            head_params.push((head.clone(), params.len() - 2, params.len() - 1));
        }

        Ok(Network {
            spec: spec.clone(),
            input_shape: input_shape.to_vec(),
            feature_dim,
            layers,
            heads: head_params,
            params,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Width of the trunk output (the representation fed to the heads).
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn head_specs(&self) -> impl Iterator<Item = &HeadSpec> {
        self.heads.iter().map(|(h, _, _)| h)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Copies parameter values from a network of identical architecture.
    pub fn copy_params_from(&mut self, other: &Network) -> Result<()> {
        if self.spec != other.spec || self.input_shape != other.input_shape || self.params.len() != other.params.len() {
            return Err(Error::config("copy_params_from: architectures differ"));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.tensor.shape() != src.tensor.shape() {
                return Err(Error::config(format!("copy_params_from: shape mismatch at {}", dst.name)));
            }
            dst.tensor.values_mut().copy_from_slice(src.tensor.values());
        }
        Ok(())
    }

    /// Order-sensitive hash of all parameter bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for v in p.tensor.values() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    fn check_input(&self, input: &Tensor) -> Result<usize> {
        let shape = input.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            let first = self
                .spec
                .layers
                .first()
                .map(|l| format!("trunk.0.{}", l.kind()))
                .unwrap_or_else(|| "head".to_string());
            return Err(Error::config(format!(
                "layer {first} expects input [B, {}], got {shape:?}",
                self.input_shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
            )));
        }
        Ok(shape[0])
    }

    /// Registers parameters on `tape`; `trainable` controls whether they receive gradients.
    pub fn register<'t>(&self, tape: &'t Tape, trainable: bool) -> ParamVars<'t> {
        ParamVars(
            self.params
                .iter()
                .map(|p| {
                    if trainable {
                        tape.variable(p.tensor.shape(), p.tensor.values().to_vec())
                    } else {
                        tape.constant(p.tensor.shape(), p.tensor.values().to_vec())
                    }
                })
                .collect(),
        )
    }

    /// Forward pass recording onto `tape`. `input` is `[B, ...input_shape]`.
    pub fn forward<'t>(&self, tape: &'t Tape, input: &Tensor, trainable: bool) -> Result<NetOutput<'t>> {
        let batch = self.check_input(input)?;
        let params = self.register(tape, trainable);
        let x = tape.leaf(input);
        let features = self.trunk(x, &params, batch);
        let heads = self
            .heads
            .iter()
            .map(|(_, w, b)| features.linear(params.0[*w], Some(params.0[*b])))
            .collect();
        Ok(NetOutput { features, heads, params })
    }

    /// Trunk features only, `[B, feature_dim]`.
    pub fn features<'t>(&self, tape: &'t Tape, input: &Tensor, trainable: bool) -> Result<NetOutput<'t>> {
        let batch = self.check_input(input)?;
        let params = self.register(tape, trainable);
        let x = tape.leaf(input);
        let features = self.trunk(x, &params, batch);
        Ok(NetOutput { features, heads: Vec::new(), params })
    }

    fn trunk<'t>(&self, input: Var<'t>, params: &ParamVars<'t>, batch: usize) -> Var<'t> {
        let mut x = input;
        let mut spatial = self.input_shape.len() == 3;
        if !spatial {
            x = x.reshape(&[batch, self.input_shape.iter().product()]);
        }
        for layer in &self.layers {
            x = match *layer {
                Layer::Conv { w, b } => x.conv2d(params.0[w], params.0[b]),
                Layer::Pool(k) => x.max_pool(k),
                Layer::Dense { w, b } => {
                    if spatial {
                        let flat = x.numel() / batch;
                        x = x.reshape(&[batch, flat]);
                        spatial = false;
                    }
                    x.linear(params.0[w], Some(params.0[b]))
                }
                Layer::Act(Activation::Relu) => x.relu(),
                Layer::Act(Activation::Tanh) => x.tanh(),
            };
        }
        if spatial {
            let flat = x.numel() / batch;
            x = x.reshape(&[batch, flat]);
        }
        x
    }

    /// Adds the gradients recorded on `tape` into the parameter gradient buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape, vars: &ParamVars<'_>) {
        for (p, v) in self.params.iter_mut().zip(&vars.0) {
            tape.accumulate_into(*v, &mut p.tensor);
        }
    }

    /// Evaluates every head without keeping a differentiable graph.
    pub fn infer(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let out = self.forward(&tape, input, false)?;
        Ok(out.heads.iter().map(|h| h.to_tensor()).collect())
    }

    /// Trunk features `[B, feature_dim]` without a differentiable graph.
    pub fn infer_features(&self, input: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(self.features(&tape, input, false)?.features.to_tensor())
    }

    /// Replaces every parameter with zeros.
    pub fn zero_params(&mut self) {
        for p in &mut self.params {
            p.tensor.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, relu: bool, gain: f64) -> Tensor {
    let base = if relu { 6.0 } else { 3.0 };
    let bound = gain * (base / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), values).expect("init shape").with_grad()
}

/// A network with a policy-logits head and a scalar value head on one trunk.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyValueNet {
    net: Network,
    n_actions: usize,
}

/// Policy logits `[B, A]` and values `[B]` on a tape.
pub struct PvOutput<'t> {
    pub logits: Var<'t>,
    pub values: Var<'t>,
    pub params: ParamVars<'t>,
}

impl PolicyValueNet {
    pub fn new(spec: &NetworkSpec, input_shape: &[usize], n_actions: usize, seed: u64) -> Result<Self> {
        let heads = [
            HeadSpec { name: "policy".into(), out_dim: n_actions, init_gain: 0.01 },
            HeadSpec { name: "value".into(), out_dim: 1, init_gain: 1.0 },
        ];
        Ok(PolicyValueNet { net: Network::new(spec, input_shape, &heads, seed)?, n_actions })
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn forward<'t>(&self, tape: &'t Tape, input: &Tensor, trainable: bool) -> Result<PvOutput<'t>> {
        let out = self.net.forward(tape, input, trainable)?;
        let batch = input.shape()[0];
        Ok(PvOutput { logits: out.heads[0], values: out.heads[1].reshape(&[batch]), params: out.params })
    }

    /// Logits `[B, A]` and values `[B]` without gradient bookkeeping.
    pub fn infer(&self, input: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let mut heads = self.net.infer(input)?;
        let values = heads.pop().expect("value head").into_values();
        let logits = heads.pop().expect("policy head");
        Ok((logits, values))
    }
}

/// A classifier: trunk (the encoder) plus one linear head over classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    net: Network,
    n_classes: usize,
}

impl Classifier {
    pub fn new(spec: &NetworkSpec, input_shape: &[usize], n_classes: usize, seed: u64) -> Result<Self> {
        let heads = [HeadSpec { name: "classifier".into(), out_dim: n_classes, init_gain: 1.0 }];
        Ok(Classifier { net: Network::new(spec, input_shape, &heads, seed)?, n_classes })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn forward<'t>(&self, tape: &'t Tape, input: &Tensor, trainable: bool) -> Result<NetOutput<'t>> {
        self.net.forward(tape, input, trainable)
    }

    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.net.infer(input)?.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn identity_dense_head_passes_input_through() {
        let spec = NetworkSpec { layers: vec![] };
        let heads = [HeadSpec { name: "out".into(), out_dim: 3, init_gain: 1.0 }];
        let mut net = Network::new(&spec, &[3], &heads, 0).unwrap();
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        net.params_mut()[0].tensor.values_mut().copy_from_slice(&eye);
        let x = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, 1.5]).unwrap();
        assert_eq!(net.infer(&x).unwrap()[0].values(), x.values());
    }

    #[test]
    fn zero_parameters_give_zero_outputs() {
        let mut net = PolicyValueNet::new(&NetworkSpec::small_cnn(), &[3, 7, 7], 4, 3).unwrap();
        net.network_mut().zero_params();
        let x = Tensor::new(vec![2, 3, 7, 7], (0..294).map(|i| i as f64 / 294.0).collect()).unwrap();
        let (logits, values) = net.infer(&x).unwrap();
        assert!(logits.values().iter().all(|&v| v == 0.0));
        assert!(values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn different_seeds_give_different_parameters() {
        let a = PolicyValueNet::new(&NetworkSpec::mlp(&[8]), &[4], 2, 1).unwrap();
        let b = PolicyValueNet::new(&NetworkSpec::mlp(&[8]), &[4], 2, 2).unwrap();
        let c = PolicyValueNet::new(&NetworkSpec::mlp(&[8]), &[4], 2, 1).unwrap();
        assert_ne!(a.network().checksum(), b.network().checksum());
        assert_eq!(a, c);
    }

    #[test]
    fn input_shape_mismatch_names_the_layer() {
        let net = PolicyValueNet::new(&NetworkSpec::small_cnn(), &[3, 9, 9], 4, 0).unwrap();
        let err = net.infer(&Tensor::zeros(&[1, 3, 7, 7])).unwrap_err();
        assert!(err.to_string().contains("trunk.0.conv2d"), "{err}");
    }

    #[test]
    fn stride_other_than_one_is_rejected() {
        let spec = NetworkSpec { layers: vec![LayerSpec::Conv2d { out_channels: 2, kernel: 3, stride: 2 }] };
        assert!(matches!(Network::new(&spec, &[1, 5, 5], &[], 0), Err(Error::Config(_))));
    }

    #[test]
    fn heads_share_trunk_features() {
        let net = PolicyValueNet::new(&NetworkSpec::mlp(&[5]), &[3], 2, 9).unwrap();
        let tape = Tape::new();
        let x = Tensor::new(vec![1, 3], vec![0.1, 0.2, 0.3]).unwrap();
        let out = net.network().forward(&tape, &x, false).unwrap();
        let feats = out.features.value();
        // Recompute each head from the single feature vector.
        for (h, (_, w, b)) in out.heads.iter().zip(&net.network().heads) {
            let wv = net.network().params()[*w].tensor.values();
            let bv = net.network().params()[*b].tensor.values();
            let od = bv.len();
            for o in 0..od {
                let direct: f64 = bv[o] + (0..feats.len()).map(|i| feats[i] * wv[i * od + o]).sum::<f64>();
                assert!((direct - h.value()[o]).abs() < 1e-12);
            }
        }
    }
}
