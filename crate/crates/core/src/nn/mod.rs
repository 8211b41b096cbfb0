//! Layer stacks with one or two dense output heads.
//!
//! Parameters are stored as plain values so a [`Network`] is `Send + Sync`.
//! Forward passes take parameter tensors explicitly: pass [`Network::leaves`]
//! to differentiate with respect to the weights, or let [`Network::forward`]
//! use detached copies.

mod checkpoint;

use jacmatch_autodiff::{Tape, Tensor};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{read_tensors, write_tensors};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    /// Flattens its input, then `x W + b` with `W: (inputs, outputs)`.
    Dense { inputs: usize, outputs: usize },
    /// 3x3 kernel, stride 1, zero padding 1.
    Conv2d { in_channels: usize, out_channels: usize },
    Relu,
    Sigmoid,
    /// 2x2 window, stride 2.
    MaxPool2,
    GlobalAvgPool,
    Softmax { temperature: f64 },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::MaxPool2 => "maxpool",
            LayerKind::GlobalAvgPool => "global-avg-pool",
            LayerKind::Softmax { .. } => "softmax",
        }
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerKind::Dense { inputs, outputs } => vec![vec![inputs, outputs], vec![outputs]],
            LayerKind::Conv2d {
                in_channels,
                out_channels,
            } => vec![vec![out_channels, in_channels, 3, 3], vec![out_channels]],
            _ => Vec::new(),
        }
    }

    /// `(fan_in, fan_out)` of the weight.
    fn fans(&self) -> Option<(usize, usize)> {
        match *self {
            LayerKind::Dense { inputs, outputs } => Some((inputs, outputs)),
            LayerKind::Conv2d {
                in_channels,
                out_channels,
            } => Some((in_channels * 9, out_channels * 9)),
            _ => None,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("{}: {msg}", self.name())));
        match *self {
            LayerKind::Dense { inputs, outputs } => {
                let n: usize = input.iter().product();
                if n != inputs {
                    return bad(format!("expects {inputs} inputs, got shape {input:?}"));
                }
                Ok(vec![outputs])
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return bad(format!("expects ({in_channels}, H, W), got {input:?}"));
                }
                Ok(vec![out_channels, input[1], input[2]])
            }
            LayerKind::MaxPool2 => {
                if input.len() != 3 || input[1] < 2 || input[2] < 2 {
                    return bad(format!("expects (C, H, W) with H, W >= 2, got {input:?}"));
                }
                Ok(vec![input[0], input[1] / 2, input[2] / 2])
            }
            LayerKind::GlobalAvgPool => {
                if input.len() != 3 {
                    return bad(format!("expects (C, H, W), got {input:?}"));
                }
                Ok(vec![input[0]])
            }
            LayerKind::Softmax { temperature } => {
                if !(temperature > 0.0) {
                    return bad(format!("temperature must be positive, got {temperature}"));
                }
                Ok(input.to_vec())
            }
            LayerKind::Relu | LayerKind::Sigmoid => Ok(input.to_vec()),
        }
    }

    fn apply(&self, params: &[Tensor], x: &Tensor) -> Result<Tensor> {
        Ok(match *self {
            LayerKind::Dense { outputs, .. } => {
                let b = x.shape()[0];
                let flat = x.reshape(&[b, x.numel() / b])?;
                let bias = params[1].broadcast_to(&[b, outputs], &[1])?;
                flat.matmul(&params[0])?.add(&bias)?
            }
            LayerKind::Conv2d { .. } => x.conv2d(&params[0], Some(&params[1]))?,
            LayerKind::Relu => x.relu()?,
            LayerKind::Sigmoid => x.sigmoid()?,
            LayerKind::MaxPool2 => x.max_pool2d()?,
            LayerKind::GlobalAvgPool => x.global_avg_pool()?,
            LayerKind::Softmax { temperature } => x.softmax(temperature)?,
        })
    }
}

/// A parameter value.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        Param {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::new(self.data.clone(), &self.shape).expect("parameter shape matches data")
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Param {
            shape: t.shape().to_vec(),
            data: t.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub params: Vec<Param>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    /// The only head of a one-headed net; the teacher-matched head of a
    /// two-headed net.
    Source,
    /// Second head of a two-headed net, trained on the target task.
    Target,
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Head::Source => "source",
            Head::Target => "target",
        }
    }
}

/// Output of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Pre-softmax logits per head, `(B, k)`.
    pub heads: Vec<Tensor>,
    /// Outputs of the trunk positions in `feature_taps`, `(B, C, H, W)`.
    pub taps: Vec<Tensor>,
}

impl ForwardPass {
    pub fn head(&self, head: Head) -> Result<&Tensor> {
        match head {
            Head::Source => Ok(&self.heads[0]),
            Head::Target => self.heads.get(1).ok_or(Error::UnknownHead("target")),
        }
    }
}

/// ReLU sign bits and max-pool argmax positions for one input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationPattern {
    /// One entry per ReLU layer; `true` where the pre-activation is positive.
    pub relu_signs: Vec<Vec<bool>>,
    /// One entry per max-pool layer; winning position `0..4` of each window.
    pub pool_argmax: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    trunk: Vec<Layer>,
    heads: Vec<Layer>,
    feature_taps: Vec<usize>,
    /// Per-sample output shape of each trunk layer.
    shapes: Vec<Vec<usize>>,
}

impl Network {
    pub fn builder(input_shape: &[usize]) -> NetworkBuilder {
        NetworkBuilder {
            input_shape: input_shape.to_vec(),
            trunk: Vec::new(),
            heads: Vec::new(),
            taps: Vec::new(),
        }
    }

    /// Assembles a network from explicit layers, validating shapes.
    pub fn from_layers(
        input_shape: &[usize],
        trunk: Vec<Layer>,
        heads: Vec<Layer>,
        feature_taps: Vec<usize>,
    ) -> Result<Network> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad input shape {input_shape:?}")));
        }
        if heads.is_empty() || heads.len() > 2 {
            return Err(Error::InvalidArgument(format!(
                "a network needs one or two heads, got {}",
                heads.len()
            )));
        }
        let mut shapes = Vec::with_capacity(trunk.len());
        let mut cur = input_shape.to_vec();
        for layer in &trunk {
            check_params(layer)?;
            cur = layer.kind.output_shape(&cur)?;
            shapes.push(cur.clone());
        }
        for head in &heads {
            if !matches!(head.kind, LayerKind::Dense { .. }) {
                return Err(Error::InvalidArgument("heads must be dense layers".into()));
            }
            check_params(head)?;
            head.kind.output_shape(&cur)?;
        }
        for &t in &feature_taps {
            match shapes.get(t) {
                Some(s) if s.len() == 3 => {}
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "feature tap {t} is not a trunk position with a spatial output"
                    )))
                }
            }
        }
        Ok(Network {
            input_shape: input_shape.to_vec(),
            trunk,
            heads,
            feature_taps,
            shapes,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn trunk(&self) -> &[Layer] {
        &self.trunk
    }

    pub fn heads(&self) -> &[Layer] {
        &self.heads
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn feature_taps(&self) -> &[usize] {
        &self.feature_taps
    }

    /// Per-sample output shape of trunk position `pos`.
    pub fn trunk_shape(&self, pos: usize) -> Option<&[usize]> {
        self.shapes.get(pos).map(|s| s.as_slice())
    }

    pub fn outputs(&self, head: Head) -> Result<usize> {
        match self.head_layer(head)?.kind {
            LayerKind::Dense { outputs, .. } => Ok(outputs),
            _ => unreachable!("heads are dense"),
        }
    }

    fn head_layer(&self, head: Head) -> Result<&Layer> {
        match head {
            Head::Source => Ok(&self.heads[0]),
            Head::Target => self.heads.get(1).ok_or(Error::UnknownHead("target")),
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.trunk.iter().chain(&self.heads)
    }

    /// Parameter names in canonical order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, l) in self.trunk.iter().enumerate() {
            if !l.params.is_empty() {
                names.push(format!("trunk.{i}.weight"));
                names.push(format!("trunk.{i}.bias"));
            }
        }
        for (i, _) in self.heads.iter().enumerate() {
            let h = if i == 0 { "source" } else { "target" };
            names.push(format!("head.{h}.weight"));
            names.push(format!("head.{h}.bias"));
        }
        names
    }

    /// Parameters in canonical order.
    pub fn params(&self) -> Vec<Param> {
        self.layers().flat_map(|l| l.params.iter().cloned()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers().flat_map(|l| &l.params).map(|p| p.data.len()).sum()
    }

    /// Detached parameter tensors in canonical order.
    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.layers().flat_map(|l| l.params.iter().map(Param::tensor)).collect()
    }

    /// Parameter tensors recorded as leaves on `tape`.
    pub fn leaves(&self, tape: &Tape) -> Vec<Tensor> {
        self.param_tensors().iter().map(|t| tape.leaf(t)).collect()
    }

    /// Copy of this network with new parameter values (canonical order).
    pub fn with_params(&self, params: Vec<Param>) -> Result<Network> {
        let mut net = self.clone();
        let mut it = params.into_iter();
        let names = self.param_names();
        let mut idx = 0;
        for layer in net.trunk.iter_mut().chain(net.heads.iter_mut()) {
            for p in layer.params.iter_mut() {
                let new = it
                    .next()
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", names[idx])))?;
                if new.shape != p.shape || new.data.len() != p.data.len() {
                    return Err(Error::Shape {
                        what: names[idx].clone(),
                        expected: p.shape.clone(),
                        got: new.shape,
                    });
                }
                *p = new;
                idx += 1;
            }
        }
        if it.next().is_some() {
            return Err(Error::Checkpoint("too many parameters".into()));
        }
        Ok(net)
    }

    /// Forward pass with explicit parameter tensors (canonical order).
    /// `x` is batched: `(B, input_shape..)`.
    pub fn forward_with(&self, params: &[Tensor], x: &Tensor) -> Result<ForwardPass> {
        if x.ndim() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            let mut expected = vec![x.shape().first().copied().unwrap_or(1)];
            expected.extend(&self.input_shape);
            return Err(Error::Shape {
                what: "network input".into(),
                expected,
                got: x.shape().to_vec(),
            });
        }
        let expected: usize = self.layers().map(|l| l.params.len()).sum();
        if params.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "expected {expected} parameter tensors, got {}",
                params.len()
            )));
        }
        let mut off = 0;
        let mut h = x.clone();
        let mut taps = Vec::with_capacity(self.feature_taps.len());
        let mut tapped: Vec<Option<Tensor>> = vec![None; self.trunk.len()];
        for (i, layer) in self.trunk.iter().enumerate() {
            let n = layer.params.len();
            h = layer.kind.apply(&params[off..off + n], &h)?;
            off += n;
            if self.feature_taps.contains(&i) {
                tapped[i] = Some(h.clone());
            }
        }
        for &t in &self.feature_taps {
            taps.push(tapped[t].clone().expect("tap recorded"));
        }
        let mut heads = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            heads.push(head.kind.apply(&params[off..off + 2], &h)?);
            off += 2;
        }
        Ok(ForwardPass { heads, taps })
    }

    /// Logits of `head` using this network's own (detached) parameters.
    pub fn forward(&self, x: &Tensor, head: Head) -> Result<Tensor> {
        self.head_layer(head)?;
        Ok(self.forward_with(&self.param_tensors(), x)?.head(head)?.clone())
    }

    /// Forward pass for one unbatched input given as a flat slice; returns the
    /// logits of `head`.
    pub fn eval(&self, x: &[f64], head: Head) -> Result<Vec<f64>> {
        let mut shape = vec![1];
        shape.extend(&self.input_shape);
        Ok(self.forward(&Tensor::new(x.to_vec(), &shape)?, head)?.to_vec())
    }

    /// Whether every trunk nonlinearity is piecewise linear.
    pub fn is_piecewise_linear(&self) -> bool {
        self.smooth_layer().is_none()
    }

    fn smooth_layer(&self) -> Option<(usize, &LayerKind)> {
        self.trunk
            .iter()
            .enumerate()
            .find(|(_, l)| matches!(l.kind, LayerKind::Sigmoid | LayerKind::Softmax { .. }))
            .map(|(i, l)| (i, &l.kind))
    }

    /// Sign and argmax record of the trunk for one unbatched input.
    pub fn activation_pattern(&self, x: &[f64]) -> Result<ActivationPattern> {
        if let Some((index, kind)) = self.smooth_layer() {
            return Err(Error::SmoothNonlinearity {
                index,
                kind: kind.name().into(),
            });
        }
        if x.len() != self.input_len() {
            return Err(Error::Shape {
                what: "network input".into(),
                expected: self.input_shape.clone(),
                got: vec![x.len()],
            });
        }
        let mut shape = vec![1];
        shape.extend(&self.input_shape);
        let mut h = Tensor::new(x.to_vec(), &shape)?;
        let params = self.param_tensors();
        let mut off = 0;
        let mut pattern = ActivationPattern {
            relu_signs: Vec::new(),
            pool_argmax: Vec::new(),
        };
        for layer in &self.trunk {
            match layer.kind {
                LayerKind::Relu => pattern.relu_signs.push(h.data().iter().map(|&v| v > 0.0).collect()),
                LayerKind::MaxPool2 => pattern.pool_argmax.push(pool_winners(h.shape(), h.data())),
                _ => {}
            }
            let n = layer.params.len();
            h = layer.kind.apply(&params[off..off + n], &h)?;
            off += n;
        }
        Ok(pattern)
    }

    /// Permutes the output units of trunk layer `layer` (dense or conv) and the
    /// matching inputs of the layer that consumes them. New unit `j` is old
    /// unit `perm[j]`. The network function is unchanged.
    pub fn permute_hidden(&self, layer: usize, perm: &[usize]) -> Result<Network> {
        let units = match self.trunk.get(layer).map(|l| &l.kind) {
            Some(LayerKind::Dense { outputs, .. }) => *outputs,
            Some(LayerKind::Conv2d { out_channels, .. }) => *out_channels,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "trunk position {layer} is not a dense or conv layer"
                )))
            }
        };
        if perm.len() != units {
            return Err(Error::InvalidArgument(format!(
                "permutation has length {}, layer has {units} units",
                perm.len()
            )));
        }
        let mut seen = vec![false; units];
        for &p in perm {
            if p >= units || std::mem::replace(&mut seen[p], true) {
                return Err(Error::InvalidArgument(format!("{perm:?} is not a permutation")));
            }
        }
        let mut net = self.clone();
        permute_outputs(&mut net.trunk[layer], perm);

        let mut consumer = None;
        for i in layer + 1..net.trunk.len() {
            match net.trunk[i].kind {
                LayerKind::Dense { .. } | LayerKind::Conv2d { .. } => {
                    consumer = Some(i);
                    break;
                }
                LayerKind::Softmax { .. } => {
                    return Err(Error::InvalidArgument(
                        "softmax between permuted layer and its consumer".into(),
                    ))
                }
                _ => {}
            }
        }
        match consumer {
            Some(i) => {
                let block = block_size(&net.shapes[i - 1]);
                permute_inputs(&mut net.trunk[i], perm, block);
            }
            None => {
                let block = block_size(net.shapes.last().expect("trunk has the permuted layer"));
                for head in net.heads.iter_mut() {
                    permute_inputs(head, perm, block);
                }
            }
        }
        Ok(net)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let entries: Vec<(String, Param)> = self.param_names().into_iter().zip(self.params()).collect();
        write_tensors(path, &entries)
    }

    /// Copy of this network with parameters read from a checkpoint. Entries
    /// with other names are ignored; missing names and shape mismatches are
    /// rejected.
    pub fn load(&self, path: &std::path::Path) -> Result<Network> {
        let entries = read_tensors(path)?;
        self.with_named_params(&entries)
    }

    pub fn with_named_params(&self, entries: &[(String, Param)]) -> Result<Network> {
        let mut params = Vec::new();
        for (name, current) in self.param_names().into_iter().zip(self.params()) {
            let (_, p) = entries
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if p.shape != current.shape {
                return Err(Error::Shape {
                    what: name,
                    expected: current.shape,
                    got: p.shape.clone(),
                });
            }
            params.push(p.clone());
        }
        self.with_params(params)
    }
}

fn check_params(layer: &Layer) -> Result<()> {
    let shapes = layer.kind.param_shapes();
    let ok = shapes.len() == layer.params.len()
        && shapes
            .iter()
            .zip(&layer.params)
            .all(|(s, p)| *s == p.shape && p.data.len() == s.iter().product::<usize>());
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{} parameters do not match shapes {shapes:?}",
            layer.kind.name()
        )))
    }
}

/// Elements per unit when a layer's output is flattened: `H*W` for feature
/// maps, 1 for vectors.
fn block_size(shape: &[usize]) -> usize {
    shape.iter().skip(1).product()
}

fn pool_winners(shape: &[usize], data: &[f64]) -> Vec<u8> {
    let nd = shape.len();
    let (h, w) = (shape[nd - 2], shape[nd - 1]);
    let lead: usize = shape[..nd - 2].iter().product();
    let mut out = Vec::with_capacity(lead * (h / 2) * (w / 2));
    for l in 0..lead {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                let mut best = 0u8;
                let at = |k: u8| data[l * h * w + (2 * i + (k / 2) as usize) * w + 2 * j + (k % 2) as usize];
                for k in 1..4u8 {
                    if at(k) > at(best) {
                        best = k;
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

fn permute_outputs(layer: &mut Layer, perm: &[usize]) {
    let old_w = layer.params[0].data.clone();
    let old_b = layer.params[1].data.clone();
    match layer.kind {
        LayerKind::Dense { inputs, outputs } => {
            for i in 0..inputs {
                for (j, &p) in perm.iter().enumerate() {
                    layer.params[0].data[i * outputs + j] = old_w[i * outputs + p];
                }
            }
        }
        LayerKind::Conv2d { in_channels, .. } => {
            let blk = in_channels * 9;
            for (j, &p) in perm.iter().enumerate() {
                layer.params[0].data[j * blk..(j + 1) * blk].copy_from_slice(&old_w[p * blk..(p + 1) * blk]);
            }
        }
        _ => unreachable!("only parameterized layers are permuted"),
    }
    for (j, &p) in perm.iter().enumerate() {
        layer.params[1].data[j] = old_b[p];
    }
}

fn permute_inputs(layer: &mut Layer, perm: &[usize], block: usize) {
    let old = layer.params[0].data.clone();
    match layer.kind {
        LayerKind::Dense { outputs, .. } => {
            for (c, &p) in perm.iter().enumerate() {
                for q in 0..block {
                    let (dst, src) = ((c * block + q) * outputs, (p * block + q) * outputs);
                    layer.params[0].data[dst..dst + outputs].copy_from_slice(&old[src..src + outputs]);
                }
            }
        }
        LayerKind::Conv2d {
            in_channels,
            out_channels,
        } => {
            for o in 0..out_channels {
                for (c, &p) in perm.iter().enumerate() {
                    let dst = (o * in_channels + c) * 9;
                    let src = (o * in_channels + p) * 9;
                    layer.params[0].data[dst..dst + 9].copy_from_slice(&old[src..src + 9]);
                }
            }
        }
        _ => unreachable!("only parameterized layers consume permuted units"),
    }
}

pub struct NetworkBuilder {
    input_shape: Vec<usize>,
    trunk: Vec<LayerKind>,
    heads: Vec<usize>,
    taps: Vec<usize>,
}

impl NetworkBuilder {
    fn current_shape(&self) -> Result<Vec<usize>> {
        let mut s = self.input_shape.clone();
        for k in &self.trunk {
            s = k.output_shape(&s)?;
        }
        Ok(s)
    }

    pub fn layer(mut self, kind: LayerKind) -> Self {
        self.trunk.push(kind);
        self
    }

    /// Dense layer with `outputs` units; its input size is inferred.
    pub fn dense(self, outputs: usize) -> Self {
        let inputs = self.current_shape().map(|s| s.iter().product()).unwrap_or(0);
        self.layer(LayerKind::Dense { inputs, outputs })
    }

    /// 3x3 conv layer with `out_channels` filters; input channels are inferred.
    pub fn conv(self, out_channels: usize) -> Self {
        let in_channels = self.current_shape().ok().and_then(|s| s.first().copied()).unwrap_or(0);
        self.layer(LayerKind::Conv2d {
            in_channels,
            out_channels,
        })
    }

    pub fn relu(self) -> Self {
        self.layer(LayerKind::Relu)
    }

    pub fn sigmoid(self) -> Self {
        self.layer(LayerKind::Sigmoid)
    }

    pub fn maxpool(self) -> Self {
        self.layer(LayerKind::MaxPool2)
    }

    pub fn gap(self) -> Self {
        self.layer(LayerKind::GlobalAvgPool)
    }

    pub fn softmax(self, temperature: f64) -> Self {
        self.layer(LayerKind::Softmax { temperature })
    }

    /// Exposes the output of the most recently added layer as a feature tap.
    pub fn tap(mut self) -> Self {
        if let Some(last) = self.trunk.len().checked_sub(1) {
            self.taps.push(last);
        }
        self
    }

    /// Adds a dense head with `k` outputs. The first head is the source head.
    pub fn head(mut self, k: usize) -> Self {
        self.heads.push(k);
        self
    }

    /// Glorot-uniform weights from `seed`, zero biases.
    pub fn build(self, seed: u64) -> Result<Network> {
        let features: usize = self.current_shape()?.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |kind: LayerKind| -> Result<Layer> {
            let params = match kind.fans() {
                Some((fan_in, fan_out)) => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let dist = Uniform::new(-a, a).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                    let shapes = kind.param_shapes();
                    let n: usize = shapes[0].iter().product();
                    vec![
                        Param {
                            shape: shapes[0].clone(),
                            data: (0..n).map(|_| dist.sample(&mut rng)).collect(),
                        },
                        Param::zeros(&shapes[1]),
                    ]
                }
                None => Vec::new(),
            };
            Ok(Layer { kind, params })
        };
        let trunk = self.trunk.into_iter().map(&mut init).collect::<Result<Vec<_>>>()?;
        let heads = self
            .heads
            .into_iter()
            .map(|k| {
                init(LayerKind::Dense {
                    inputs: features,
                    outputs: k,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Network::from_layers(&self.input_shape, trunk, heads, self.taps)
    }
}

/// Reference architectures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", from = "ArchitectureRepr")]
pub enum Architecture {
    /// conv8 - relu - pool - conv16 - relu - pool - GAP - dense. Taps after
    /// the first relu, the first pool and the second relu.
    Vgg2t,
    /// conv8 - relu - pool - GAP - dense. Taps after the relu and the pool.
    Vgg1s,
    /// Dense hidden layers with the given activation.
    Mlp { hidden: Vec<usize>, activation: Activation },
}

// serde ignores unknown keys on unit variants of tagged enums
#[derive(Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
enum ArchitectureRepr {
    Vgg2t {},
    Vgg1s {},
    Mlp { hidden: Vec<usize>, activation: Activation },
}

impl From<ArchitectureRepr> for Architecture {
    fn from(r: ArchitectureRepr) -> Self {
        match r {
            ArchitectureRepr::Vgg2t {} => Architecture::Vgg2t,
            ArchitectureRepr::Vgg1s {} => Architecture::Vgg1s,
            ArchitectureRepr::Mlp { hidden, activation } => Architecture::Mlp { hidden, activation },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl Architecture {
    /// Builds the network with a source head of `k` outputs and, if given, a
    /// target head of `target` outputs.
    pub fn build(&self, input_shape: &[usize], k: usize, target: Option<usize>, seed: u64) -> Result<Network> {
        let b = Network::builder(input_shape);
        let b = match self {
            Architecture::Vgg2t => b.conv(8).relu().tap().maxpool().tap().conv(16).relu().tap().maxpool().gap(),
            Architecture::Vgg1s => b.conv(8).relu().tap().maxpool().tap().gap(),
            Architecture::Mlp { hidden, activation } => {
                let mut b = b;
                for &h in hidden {
                    b = b.dense(h);
                    b = match activation {
                        Activation::Relu => b.relu(),
                        Activation::Sigmoid => b.sigmoid(),
                    };
                }
                b
            }
        };
        let b = b.head(k);
        let b = match target {
            Some(t) => b.head(t),
            None => b,
        };
        b.build(seed)
    }
}
