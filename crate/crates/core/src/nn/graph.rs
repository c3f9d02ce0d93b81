use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ops;
use super::tensor::Tensor;
use crate::error::{shape_mismatch, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Operator {
    ConvRelu,
    Conv,
    MaxPool,
    Deconv,
    Concat,
    Sigmoid,
}

impl Operator {
    pub fn has_params(self) -> bool {
        matches!(self, Operator::ConvRelu | Operator::Conv | Operator::Deconv)
    }
}

/// One row of a layer table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub operator: Operator,
    pub kernel: Option<(usize, usize)>,
    pub out_channels: usize,
    pub stride: Option<usize>,
    pub inputs: Vec<String>,
}

impl LayerSpec {
    pub fn new(
        name: &str,
        operator: Operator,
        kernel: Option<(usize, usize)>,
        out_channels: usize,
        stride: Option<usize>,
        inputs: &[&str],
    ) -> Self {
        Self {
            name: name.to_owned(),
            operator,
            kernel,
            out_channels,
            stride,
            inputs: inputs.iter().map(|s| (*s).to_owned()).collect(),
        }
    }

    pub fn conv_relu(name: &str, input: &str, out_channels: usize) -> Self {
        Self::new(name, Operator::ConvRelu, Some((3, 3)), out_channels, Some(1), &[input])
    }

    pub fn conv(name: &str, input: &str, out_channels: usize) -> Self {
        Self::new(name, Operator::Conv, Some((3, 3)), out_channels, Some(1), &[input])
    }

    pub fn max_pool(name: &str, input: &str, channels: usize) -> Self {
        Self::new(name, Operator::MaxPool, Some((2, 2)), channels, Some(2), &[input])
    }

    pub fn deconv(name: &str, input: &str, out_channels: usize) -> Self {
        Self::new(name, Operator::Deconv, Some((2, 2)), out_channels, Some(2), &[input])
    }

    pub fn concat(name: &str, inputs: &[&str], out_channels: usize) -> Self {
        Self::new(name, Operator::Concat, None, out_channels, None, inputs)
    }

    pub fn sigmoid(name: &str, input: &str, channels: usize) -> Self {
        Self::new(name, Operator::Sigmoid, None, channels, None, &[input])
    }
}

/// Named inputs with channel counts, ordered layers, and named outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub inputs: Vec<(String, usize)>,
    pub layers: Vec<LayerSpec>,
    pub outputs: Vec<String>,
}

#[derive(Clone, Debug)]
struct Node {
    slots: Vec<usize>,
    in_channels: usize,
    param: Option<usize>,
}

/// Kernel and bias of one parameterized layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub name: String,
    /// `[out, in, kh, kw]` for convolutions, `[in, out, kh, kw]` for deconvolutions.
    pub kernel_shape: [usize; 4],
    pub kernel: Vec<f32>,
    pub bias: Vec<f32>,
}

impl LayerParams {
    pub fn len(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Gradients with the same layout as a network's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Vec<f32>, Vec<f32>)>,
}

impl Gradients {
    pub fn add(&mut self, other: &Gradients) {
        for ((k, b), (ok, ob)) in self.layers.iter_mut().zip(&other.layers) {
            k.iter_mut().zip(ok).for_each(|(a, b)| *a += b);
            b.iter_mut().zip(ob).for_each(|(a, b)| *a += b);
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for (k, b) in &mut self.layers {
            k.iter_mut().chain(b.iter_mut()).for_each(|v| *v *= factor);
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|(k, b)| k.iter().chain(b))
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flat_map(|(k, b)| k.iter().chain(b)).all(|v| v.is_finite())
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.norm();
        if norm > max_norm {
            self.scale((max_norm / norm) as f32);
        }
        norm
    }
}

/// Every intermediate value of one forward pass, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct Trace {
    values: Vec<Tensor>,
    argmax: Vec<Option<Vec<u32>>>,
    outputs: Vec<usize>,
}

impl Trace {
    pub fn output(&self, i: usize) -> &Tensor {
        &self.values[self.outputs[i]]
    }

    pub fn into_outputs(mut self) -> Vec<Tensor> {
        self.outputs
            .iter()
            .map(|&s| std::mem::replace(&mut self.values[s], Tensor::zeros(0, 0, 0)))
            .collect()
    }
}

/// A validated layer graph with its parameters.
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    nodes: Vec<Node>,
    outputs: Vec<usize>,
    params: Vec<LayerParams>,
    multiple: usize,
}

impl Network {
    /// Validates the graph and draws seeded He-scaled truncated-normal
    /// weights; biases start at zero.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let (nodes, outputs, shapes, multiple) = validate(&spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = shapes
            .into_iter()
            .map(|(name, kernel_shape, fan_in)| {
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let n: usize = kernel_shape.iter().product();
                let kernel = (0..n)
                    .map(|_| loop {
                        let v: f64 = normal.sample(&mut rng);
                        if v.abs() <= 2.0 * std {
                            break v as f32;
                        }
                    })
                    .collect();
                let bias_len = if spec_operator(&spec, &name) == Operator::Deconv {
                    kernel_shape[1]
                } else {
                    kernel_shape[0]
                };
                LayerParams {
                    name,
                    kernel_shape,
                    kernel,
                    bias: vec![0.0; bias_len],
                }
            })
            .collect();
        Ok(Self {
            spec,
            nodes,
            outputs,
            params,
            multiple,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    pub fn layer(&self, name: &str) -> Option<&LayerParams> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(LayerParams::len).sum()
    }

    /// Spatial sizes must be divisible by this (2 to the number of poolings
    /// on the deepest path).
    pub fn required_multiple(&self) -> usize {
        self.multiple
    }

    /// Replaces one layer's values; shapes must match and values be finite.
    pub fn set_layer(&mut self, name: &str, kernel: Vec<f32>, bias: Vec<f32>) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Network(format!("no parameterized layer named {name}")))?;
        if kernel.len() != p.kernel.len() || bias.len() != p.bias.len() {
            return Err(shape_mismatch(
                format!("{}+{} values for {name}", p.kernel.len(), p.bias.len()),
                format!("{}+{}", kernel.len(), bias.len()),
            ));
        }
        if !kernel.iter().chain(&bias).all(|v| v.is_finite()) {
            return Err(Error::Network(format!("non-finite weights for {name}")));
        }
        p.kernel = kernel;
        p.bias = bias;
        Ok(())
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            layers: self
                .params
                .iter()
                .map(|p| (vec![0.0; p.kernel.len()], vec![0.0; p.bias.len()]))
                .collect(),
        }
    }

    /// `θ ← θ − lr·g`.
    pub fn sgd_step(&mut self, grads: &Gradients, learning_rate: f32) {
        for (p, (gk, gb)) in self.params.iter_mut().zip(&grads.layers) {
            p.kernel.iter_mut().zip(gk).for_each(|(w, g)| *w -= learning_rate * g);
            p.bias.iter_mut().zip(gb).for_each(|(w, g)| *w -= learning_rate * g);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.kernel.iter().chain(&p.bias).all(|v| v.is_finite()))
    }

    /// SHA-256 over layer names and little-endian values, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for v in p.kernel.iter().chain(&p.bias) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn check_inputs(&self, inputs: &[&Tensor]) -> Result<()> {
        if inputs.len() != self.spec.inputs.len() {
            return Err(Error::Network(format!(
                "expected {} inputs, got {}",
                self.spec.inputs.len(),
                inputs.len()
            )));
        }
        let (h, w) = (inputs[0].height(), inputs[0].width());
        for ((name, c), t) in self.spec.inputs.iter().zip(inputs) {
            if t.channels() != *c || t.height() != h || t.width() != w {
                return Err(shape_mismatch(
                    format!("{name}: {c} channels at {h}x{w}"),
                    format!("{} channels at {}x{}", t.channels(), t.height(), t.width()),
                ));
            }
        }
        if h == 0 || w == 0 || h % self.multiple != 0 || w % self.multiple != 0 {
            return Err(Error::InvalidArgument(format!(
                "spatial size {h}x{w} must be a positive multiple of {}",
                self.multiple
            )));
        }
        Ok(())
    }

    fn eval_layer(&self, i: usize, values: &[Tensor]) -> (Tensor, Option<Vec<u32>>) {
        let layer = &self.spec.layers[i];
        let node = &self.nodes[i];
        let x = &values[node.slots[0]];
        match layer.operator {
            Operator::ConvRelu | Operator::Conv => {
                let p = &self.params[node.param.expect("conv has params")];
                let mut y = ops::conv_forward(x, &p.kernel, &p.bias, layer.out_channels, p.kernel_shape[2]);
                if layer.operator == Operator::ConvRelu {
                    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                }
                (y, None)
            }
            Operator::Deconv => {
                let p = &self.params[node.param.expect("deconv has params")];
                (ops::deconv_forward(x, &p.kernel, &p.bias, layer.out_channels), None)
            }
            Operator::MaxPool => {
                let (y, idx) = ops::maxpool_forward(x);
                (y, Some(idx))
            }
            Operator::Concat => {
                let parts: Vec<&Tensor> = node.slots.iter().map(|&s| &values[s]).collect();
                (Tensor::concat(&parts).expect("validated spatial sizes"), None)
            }
            Operator::Sigmoid => {
                let mut y = x.clone();
                y.data_mut().iter_mut().for_each(|v| *v = ops::sigmoid(*v));
                (y, None)
            }
        }
    }

    /// Forward pass keeping every activation.
    pub fn forward(&self, inputs: &[&Tensor]) -> Result<Trace> {
        self.check_inputs(inputs)?;
        let mut values: Vec<Tensor> = inputs.iter().map(|t| (*t).clone()).collect();
        let mut argmax = vec![None; self.nodes.len()];
        for i in 0..self.nodes.len() {
            let (y, idx) = self.eval_layer(i, &values);
            values.push(y);
            argmax[i] = idx;
        }
        Ok(Trace {
            values,
            argmax,
            outputs: self.outputs.clone(),
        })
    }

    /// Forward pass that frees activations after their last use.
    pub fn infer(&self, inputs: &[&Tensor]) -> Result<Vec<Tensor>> {
        self.check_inputs(inputs)?;
        let n_in = inputs.len();
        let mut last_use = vec![usize::MAX; n_in + self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            for &s in &node.slots {
                last_use[s] = i;
            }
        }
        for &o in &self.outputs {
            last_use[o] = usize::MAX;
        }
        let mut values: Vec<Tensor> = inputs.iter().map(|t| (*t).clone()).collect();
        for i in 0..self.nodes.len() {
            let (y, _) = self.eval_layer(i, &values);
            values.push(y);
            for &s in &self.nodes[i].slots {
                if last_use[s] == i {
                    values[s] = Tensor::zeros(0, 0, 0);
                }
            }
        }
        Ok(self
            .outputs
            .iter()
            .map(|&s| std::mem::replace(&mut values[s], Tensor::zeros(0, 0, 0)))
            .collect())
    }

    /// Backpropagates `output_grads` (one per network output, `None` for
    /// outputs that do not reach the loss). Returns parameter gradients and,
    /// when requested, gradients for the network inputs.
    pub fn backward(
        &self,
        trace: &Trace,
        output_grads: &[Option<Tensor>],
        need_input_grads: bool,
    ) -> (Gradients, Vec<Option<Tensor>>) {
        let n_in = self.spec.inputs.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; trace.values.len()];
        for (&slot, g) in self.outputs.iter().zip(output_grads) {
            if let Some(g) = g {
                accumulate(&mut grads[slot], g.clone());
            }
        }
        let mut pg = self.zero_gradients();
        for i in (0..self.nodes.len()).rev() {
            let Some(mut g) = grads[n_in + i].take() else {
                continue;
            };
            let layer = &self.spec.layers[i];
            let node = &self.nodes[i];
            let wants = |s: usize| s >= n_in || need_input_grads;
            let x = &trace.values[node.slots[0]];
            let y = &trace.values[n_in + i];
            match layer.operator {
                Operator::ConvRelu | Operator::Conv => {
                    if layer.operator == Operator::ConvRelu {
                        for (gv, yv) in g.data_mut().iter_mut().zip(y.data()) {
                            if *yv <= 0.0 {
                                *gv = 0.0;
                            }
                        }
                    }
                    let pi = node.param.expect("conv has params");
                    let p = &self.params[pi];
                    let (gk, gb) = &mut pg.layers[pi];
                    let dx = ops::conv_backward(
                        x,
                        &p.kernel,
                        layer.out_channels,
                        p.kernel_shape[2],
                        &g,
                        gk,
                        gb,
                        wants(node.slots[0]),
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut grads[node.slots[0]], dx);
                    }
                }
                Operator::Deconv => {
                    let pi = node.param.expect("deconv has params");
                    let p = &self.params[pi];
                    let (gk, gb) = &mut pg.layers[pi];
                    let dx = ops::deconv_backward(
                        x,
                        &p.kernel,
                        layer.out_channels,
                        &g,
                        gk,
                        gb,
                        wants(node.slots[0]),
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut grads[node.slots[0]], dx);
                    }
                }
                Operator::MaxPool => {
                    if wants(node.slots[0]) {
                        let idx = trace.argmax[i].as_ref().expect("pool trace");
                        let dx = ops::maxpool_backward(x.shape(), idx, &g);
                        accumulate(&mut grads[node.slots[0]], dx);
                    }
                }
                Operator::Concat => {
                    let mut start = 0;
                    for &s in &node.slots {
                        let c = trace.values[s].channels();
                        if wants(s) {
                            accumulate(&mut grads[s], g.slice_channels(start, c));
                        }
                        start += c;
                    }
                }
                Operator::Sigmoid => {
                    for (gv, s) in g.data_mut().iter_mut().zip(y.data()) {
                        *gv *= s * (1.0 - s);
                    }
                    if wants(node.slots[0]) {
                        accumulate(&mut grads[node.slots[0]], g);
                    }
                }
            }
        }
        let input_grads = grads.into_iter().take(n_in).collect();
        (pg, input_grads)
    }

    /// Channels entering `layer`.
    pub fn input_channels(&self, layer: &str) -> Option<usize> {
        self.spec
            .layers
            .iter()
            .position(|l| l.name == layer)
            .map(|i| self.nodes[i].in_channels)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn spec_operator(spec: &NetworkSpec, name: &str) -> Operator {
    spec.layers
        .iter()
        .find(|l| l.name == name)
        .map(|l| l.operator)
        .expect("validated name")
}

type Validated = (Vec<Node>, Vec<usize>, Vec<(String, [usize; 4], usize)>, usize);

fn validate(spec: &NetworkSpec) -> Result<Validated> {
    let bad = |msg: String| Error::Network(msg);
    if spec.inputs.is_empty() {
        return Err(bad("network has no inputs".into()));
    }
    let mut slot_of: HashMap<&str, usize> = HashMap::new();
    // (channels, pooling depth) per slot
    let mut info: Vec<(usize, u32)> = Vec::new();
    for (name, c) in &spec.inputs {
        if slot_of.insert(name, info.len()).is_some() {
            return Err(bad(format!("duplicate name {name}")));
        }
        info.push((*c, 0));
    }
    let mut nodes = Vec::new();
    let mut shapes = Vec::new();
    let mut max_depth = 0;
    for layer in &spec.layers {
        let name = &layer.name;
        if slot_of.contains_key(name.as_str()) {
            return Err(bad(format!("duplicate name {name}")));
        }
        if layer.inputs.is_empty() {
            return Err(bad(format!("{name} has no inputs")));
        }
        let slots = layer
            .inputs
            .iter()
            .map(|i| {
                slot_of
                    .get(i.as_str())
                    .copied()
                    .ok_or_else(|| bad(format!("{name} reads unknown layer {i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if layer.operator != Operator::Concat && slots.len() != 1 {
            return Err(bad(format!("{name} takes exactly one input")));
        }
        let (cin, depth) = info[slots[0]];
        let expect_kernel = |k: (usize, usize), stride: usize| -> Result<()> {
            if layer.kernel != Some(k) || layer.stride.unwrap_or(1) != stride {
                return Err(bad(format!(
                    "{name}: expected kernel {}x{} stride {stride}",
                    k.0, k.1
                )));
            }
            Ok(())
        };
        let mut param = None;
        let (cout, out_depth) = match layer.operator {
            Operator::ConvRelu | Operator::Conv => {
                let k = layer.kernel.map(|k| k.0).unwrap_or(0);
                if k % 2 == 0 {
                    return Err(bad(format!("{name}: convolution kernel must be odd and square")));
                }
                expect_kernel((k, k), 1)?;
                param = Some(shapes.len());
                shapes.push((name.clone(), [layer.out_channels, cin, k, k], cin * k * k));
                (layer.out_channels, depth)
            }
            Operator::Deconv => {
                expect_kernel((2, 2), 2)?;
                if depth == 0 {
                    return Err(bad(format!("{name} upsamples past the input resolution")));
                }
                param = Some(shapes.len());
                shapes.push((name.clone(), [cin, layer.out_channels, 2, 2], cin));
                (layer.out_channels, depth - 1)
            }
            Operator::MaxPool => {
                expect_kernel((2, 2), 2)?;
                (cin, depth + 1)
            }
            Operator::Concat => {
                let mut total = 0;
                for &s in &slots {
                    if info[s].1 != depth {
                        return Err(bad(format!("{name}: concat inputs differ in spatial size")));
                    }
                    total += info[s].0;
                }
                (total, depth)
            }
            Operator::Sigmoid => (cin, depth),
        };
        if layer.out_channels != cout || cout == 0 {
            return Err(bad(format!(
                "{name}: declared {} output channels, inferred {cout}",
                layer.out_channels
            )));
        }
        max_depth = max_depth.max(out_depth);
        slot_of.insert(name, info.len());
        info.push((cout, out_depth));
        nodes.push(Node {
            slots,
            in_channels: cin,
            param,
        });
    }
    let outputs = spec
        .outputs
        .iter()
        .map(|o| {
            let s = *slot_of.get(o.as_str()).ok_or_else(|| bad(format!("unknown output {o}")))?;
            if info[s].1 != 0 {
                return Err(bad(format!("output {o} is not at input resolution")));
            }
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((nodes, outputs, shapes, 1 << max_depth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_unet() -> NetworkSpec {
        NetworkSpec {
            inputs: vec![("x".into(), 2)],
            layers: vec![
                LayerSpec::conv_relu("c1", "x", 4),
                LayerSpec::max_pool("p1", "c1", 4),
                LayerSpec::conv_relu("c2", "p1", 6),
                LayerSpec::deconv("u1", "c2", 3),
                LayerSpec::concat("cat", &["u1", "c1"], 7),
                LayerSpec::conv("c3", "cat", 2),
                LayerSpec::sigmoid("out", "c3", 2),
                LayerSpec::conv("side", "c1", 1),
            ],
            outputs: vec!["out".into(), "side".into()],
        }
    }

    fn random(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn loss(net: &Network, x: &Tensor, g0: &Tensor, g1: &Tensor) -> f64 {
        let out = net.infer(&[x]).unwrap();
        let d = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(p, q)| *p as f64 * *q as f64).sum::<f64>();
        d(&out[0], g0) + d(&out[1], g1)
    }

    #[test]
    fn validation_rejects_malformed_graphs() {
        let mut s = tiny_unet();
        s.layers[4].out_channels = 8;
        assert!(Network::new(s, 0).is_err());

        let mut s = tiny_unet();
        s.layers[4].inputs = vec!["u1".into(), "p1".into()];
        assert!(Network::new(s, 0).is_err());

        let mut s = tiny_unet();
        s.layers[2].inputs = vec!["missing".into()];
        assert!(Network::new(s, 0).is_err());

        let mut s = tiny_unet();
        s.layers[3].name = "c1".into();
        assert!(Network::new(s, 0).is_err());
    }

    #[test]
    fn forward_and_infer_agree() {
        let net = Network::new(tiny_unet(), 3).unwrap();
        assert_eq!(net.required_multiple(), 2);
        let x = random(2, 6, 8, 1);
        let a = net.forward(&[&x]).unwrap().into_outputs();
        let b = net.infer(&[&x]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].shape(), (2, 6, 8));
        assert!(net.infer(&[&random(2, 5, 8, 1)]).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Network::new(tiny_unet(), 9).unwrap();
        let b = Network::new(tiny_unet(), 9).unwrap();
        let c = Network::new(tiny_unet(), 10).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut net = Network::new(tiny_unet(), 5).unwrap();
        // non-zero biases so relu masks are exercised away from ties
        for name in ["c1", "c2", "u1", "c3", "side"] {
            let p = net.layer(name).unwrap().clone();
            let bias = (0..p.bias.len()).map(|i| 0.05 * (i as f32 + 1.0)).collect();
            net.set_layer(name, p.kernel, bias).unwrap();
        }
        let x = random(2, 4, 6, 2);
        let g0 = random(2, 4, 6, 3);
        let g1 = random(1, 4, 6, 4);
        let trace = net.forward(&[&x]).unwrap();
        let (pg, ig) = net.backward(&trace, &[Some(g0.clone()), Some(g1.clone())], true);
        let h = 1e-2f32;

        let dx = ig[0].as_ref().unwrap();
        for i in (0..x.data().len()).step_by(5) {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let num = (loss(&net, &xp, &g0, &g1) - loss(&net, &xm, &g0, &g1)) / (2.0 * h as f64);
            assert!((num - dx.data()[i] as f64).abs() < 2e-2 * (1.0 + num.abs()), "x[{i}] {num} vs {}", dx.data()[i]);
        }

        for (li, p) in net.params().to_vec().iter().enumerate() {
            for i in (0..p.kernel.len()).step_by(7) {
                let mut probe = net.clone();
                let mut k = p.kernel.clone();
                k[i] += h;
                probe.set_layer(&p.name, k.clone(), p.bias.clone()).unwrap();
                let up = loss(&probe, &x, &g0, &g1);
                k[i] -= 2.0 * h;
                probe.set_layer(&p.name, k, p.bias.clone()).unwrap();
                let down = loss(&probe, &x, &g0, &g1);
                let num = (up - down) / (2.0 * h as f64);
                let ana = pg.layers[li].0[i] as f64;
                assert!((num - ana).abs() < 2e-2 * (1.0 + num.abs()), "{}[{i}] {num} vs {ana}", p.name);
            }
        }
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let net = Network::new(tiny_unet(), 1).unwrap();
        let mut g = net.zero_gradients();
        g.layers[0].0.iter_mut().for_each(|v| *v = 3.0);
        let before = g.clip_global_norm(5.0);
        assert!(before > 5.0);
        assert!((g.norm() - 5.0).abs() < 1e-4);
        let mut small = net.zero_gradients();
        small.layers[0].1[0] = 1.0;
        small.clip_global_norm(5.0);
        assert_eq!(small.layers[0].1[0], 1.0);
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut net = Network::new(tiny_unet(), 1).unwrap();
        let before = net.layer("c1").unwrap().bias[0];
        let mut g = net.zero_gradients();
        g.layers[0].1[0] = 2.0;
        net.sgd_step(&g, 0.5);
        assert_eq!(net.layer("c1").unwrap().bias[0], before - 1.0);
    }
}
