//! Static computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in topological order by the builder methods; each node
//! names its input nodes and its parameters. A forward pass produces a Tape
//! of node values; backward walks the tape in reverse and accumulates
//! parameter gradients in the parameter store.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::ops::{backward_op, forward_op, forward_op_f64, OpKind, ValF64};
use crate::nn::tensor::Tensor;

pub type NodeId = usize;
pub type ParamId = usize;

/// Named trainable tensor.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: OpKind,
    pub inputs: Vec<NodeId>,
    pub params: Vec<ParamId>,
}

/// Values produced by one forward pass, indexed by node id. Scalar
/// reductions also keep their exact f64 value.
pub struct Tape {
    pub values: Vec<Tensor>,
    pub scalars: Vec<Option<f64>>,
}

impl Tape {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Param>,
    param_index: HashMap<String, ParamId>,
    output: Option<NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    pub fn set_output(&mut self, id: NodeId) {
        assert!(id < self.nodes.len(), "output node out of range");
        self.output = Some(id);
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.param_index.get(name).copied()
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.param_id(name).map(|i| &self.params[i])
    }

    pub fn add_param(&mut self, name: &str, mut value: Tensor) -> Result<ParamId> {
        if self.param_index.contains_key(name) {
            return Err(Error::Graph(format!("duplicate parameter name '{name}'")));
        }
        value.enable_grad();
        let id = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            value,
        });
        self.param_index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Replace a parameter's data (shape must match).
    pub fn set_param_data(&mut self, name: &str, data: &[f32]) -> Result<()> {
        let id = self
            .param_id(name)
            .ok_or_else(|| Error::Graph(format!("unknown parameter '{name}'")))?;
        let value = &mut self.params[id].value;
        if value.numel() != data.len() {
            return Err(Error::Shape(format!(
                "parameter '{name}' has {} elements, got {}",
                value.numel(),
                data.len()
            )));
        }
        value.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn push(&mut self, op: OpKind, inputs: Vec<NodeId>, params: Vec<ParamId>) -> NodeId {
        for &i in &inputs {
            assert!(i < self.nodes.len(), "input node id out of range");
        }
        for &p in &params {
            assert!(p < self.params.len(), "parameter id out of range");
        }
        self.nodes.push(Node { op, inputs, params });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(OpKind::Input(name.to_string()), vec![], vec![])
    }

    // Builder helpers. Convolutions create He-initialized weights and zero
    // biases named `{name}.w` / `{name}.b`.

    pub fn conv3d(
        &mut self,
        x: NodeId,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        let w = he_normal(vec![cout, cin, k, k, k], cin * k * k * k, rng);
        let wid = self.add_param(&format!("{name}.w"), w)?;
        let bid = self.add_param(&format!("{name}.b"), Tensor::zeros(vec![cout]))?;
        Ok(self.push(OpKind::Conv { stride, padding }, vec![x], vec![wid, bid]))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        let w = he_normal(vec![cout, cin, k, k], cin * k * k, rng);
        let wid = self.add_param(&format!("{name}.w"), w)?;
        let bid = self.add_param(&format!("{name}.b"), Tensor::zeros(vec![cout]))?;
        Ok(self.push(OpKind::Conv { stride, padding }, vec![x], vec![wid, bid]))
    }

    pub fn tconv3d(
        &mut self,
        x: NodeId,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        let w = he_normal(vec![cin, cout, k, k, k], cin * k * k * k, rng);
        let wid = self.add_param(&format!("{name}.w"), w)?;
        let bid = self.add_param(&format!("{name}.b"), Tensor::zeros(vec![cout]))?;
        Ok(self.push(
            OpKind::ConvTranspose { stride, padding: 0 },
            vec![x],
            vec![wid, bid],
        ))
    }

    pub fn instance_norm(&mut self, x: NodeId, name: &str, channels: usize) -> Result<NodeId> {
        let gid = self.add_param(
            &format!("{name}.g"),
            Tensor::new(vec![channels], vec![1.0; channels])?,
        )?;
        let bid = self.add_param(&format!("{name}.b"), Tensor::zeros(vec![channels]))?;
        Ok(self.push(OpKind::InstanceNorm { eps: 1e-5 }, vec![x], vec![gid, bid]))
    }

    pub fn batch_norm(&mut self, x: NodeId, name: &str, channels: usize) -> Result<NodeId> {
        let gid = self.add_param(
            &format!("{name}.g"),
            Tensor::new(vec![channels], vec![1.0; channels])?,
        )?;
        let bid = self.add_param(&format!("{name}.b"), Tensor::zeros(vec![channels]))?;
        Ok(self.push(OpKind::BatchNorm { eps: 1e-5 }, vec![x], vec![gid, bid]))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(OpKind::Relu, vec![x], vec![])
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f32) -> NodeId {
        self.push(OpKind::LeakyRelu { slope }, vec![x], vec![])
    }

    pub fn maxpool(&mut self, x: NodeId, k: usize, s: usize) -> NodeId {
        self.push(OpKind::MaxPool { k, s }, vec![x], vec![])
    }

    pub fn avgpool(&mut self, x: NodeId, k: usize, s: usize) -> NodeId {
        self.push(OpKind::AvgPool { k, s }, vec![x], vec![])
    }

    pub fn softmax_channels(&mut self, x: NodeId) -> NodeId {
        self.push(OpKind::SoftmaxChannels, vec![x], vec![])
    }

    pub fn concat_channels(&mut self, xs: &[NodeId]) -> NodeId {
        self.push(OpKind::ConcatChannels, xs.to_vec(), vec![])
    }

    pub fn dense(
        &mut self,
        x: NodeId,
        name: &str,
        fin: usize,
        fout: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        let w = he_normal(vec![fout, fin], fin, rng);
        let wid = self.add_param(&format!("{name}.w"), w)?;
        let bid = self.add_param(&format!("{name}.b"), Tensor::zeros(vec![fout]))?;
        Ok(self.push(OpKind::Dense, vec![x], vec![wid, bid]))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        self.push(OpKind::GlobalAvgPool, vec![x], vec![])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(OpKind::Sum, vec![x], vec![])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(OpKind::Mul, vec![a, b], vec![])
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> NodeId {
        self.push(OpKind::Scale { c }, vec![x], vec![])
    }

    pub fn dice_ce(
        &mut self,
        probs: NodeId,
        target: NodeId,
        dice_weight: f32,
        ce_weight: f32,
    ) -> NodeId {
        self.push(
            OpKind::DiceCeLoss {
                dice_weight,
                ce_weight,
            },
            vec![probs, target],
            vec![],
        )
    }

    /// Evaluate every node up to and including the output node.
    pub fn forward(&self, feeds: &HashMap<String, Tensor>) -> Result<Tape> {
        let last = self
            .output
            .ok_or_else(|| Error::Graph("graph has no output node".into()))?;
        let mut values: Vec<Tensor> = Vec::with_capacity(last + 1);
        let mut scalars: Vec<Option<f64>> = Vec::with_capacity(last + 1);
        for node in &self.nodes[..=last] {
            let (value, scalar) = match &node.op {
                OpKind::Input(name) => {
                    let t = feeds.get(name).ok_or_else(|| {
                        Error::Graph(format!("missing feed for input '{name}'"))
                    })?;
                    (t.clone(), None)
                }
                op => {
                    let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| &values[i]).collect();
                    let ps: Vec<&Tensor> =
                        node.params.iter().map(|&p| &self.params[p].value).collect();
                    forward_op(op, &ins, &ps)?
                }
            };
            values.push(value);
            scalars.push(scalar);
        }
        Ok(Tape { values, scalars })
    }

    /// Forward pass returning just the output tensor.
    pub fn forward_value(&self, feeds: &HashMap<String, Tensor>) -> Result<Tensor> {
        let tape = self.forward(feeds)?;
        Ok(tape.values[self.output.unwrap()].clone())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.zero_grad();
        }
    }

    /// Reverse-mode pass from the (scalar) output node. Parameter gradients
    /// accumulate into the parameter store; call [`Graph::zero_grads`] first
    /// unless accumulation is intended. Gradients reaching input nodes are
    /// returned keyed by input name.
    pub fn backward(&mut self, tape: &Tape) -> Result<HashMap<String, Vec<f32>>> {
        let out = self
            .output
            .ok_or_else(|| Error::Graph("graph has no output node".into()))?;
        if tape.values.len() <= out {
            return Err(Error::Graph("tape does not cover the output node".into()));
        }
        if tape.values[out].numel() != 1 {
            return Err(Error::Graph(format!(
                "loss node must be scalar, has shape {:?}",
                tape.values[out].shape()
            )));
        }
        let mut input_grads = HashMap::new();
        let mut node_grads: Vec<Option<Vec<f32>>> = vec![None; out + 1];
        node_grads[out] = Some(vec![1.0]);
        for id in (0..=out).rev() {
            let dy = match node_grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            if let OpKind::Input(name) = &node.op {
                input_grads.insert(name.clone(), dy);
                continue;
            }
            let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| &tape.values[i]).collect();
            let ps: Vec<&Tensor> = node.params.iter().map(|&p| &self.params[p].value).collect();
            let (in_grads, param_grads) =
                backward_op(&node.op, &ins, &ps, &tape.values[id], &dy)?;
            for (slot, g) in node.inputs.iter().zip(in_grads) {
                if let Some(g) = g {
                    match &mut node_grads[*slot] {
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(g.iter()) {
                                *a += v;
                            }
                        }
                        none => *none = Some(g),
                    }
                }
            }
            for (pid, g) in node.params.iter().zip(param_grads) {
                if let Some(g) = g {
                    let grad = self.params[*pid]
                        .value
                        .grad
                        .as_mut()
                        .expect("parameters always carry grad buffers");
                    for (a, v) in grad.iter_mut().zip(g.iter()) {
                        *a += v;
                    }
                }
            }
        }
        Ok(input_grads)
    }

    /// Loss value as f64, preferring the exact reduction value on the tape.
    pub fn loss_value(&self, tape: &Tape) -> Result<f64> {
        let out = self.output.unwrap();
        let v = &tape.values[out];
        if v.numel() != 1 {
            return Err(Error::Graph("loss node must be scalar".into()));
        }
        Ok(tape.scalars[out].unwrap_or(v.data()[0] as f64))
    }

    /// Evaluate the scalar output in float64 end to end with an independent
    /// shadow interpreter over the same node list. Float32 forward rounding
    /// would otherwise swamp finite differences at coordinates whose true
    /// derivative is zero (a conv bias feeding an instance norm, say).
    pub fn eval_loss_f64(&self, feeds: &HashMap<String, Tensor>) -> Result<f64> {
        let output = self
            .output
            .ok_or_else(|| Error::Graph("graph has no output node".into()))?;
        let mut vals: Vec<Option<ValF64>> = Vec::with_capacity(output + 1);
        for node in self.nodes.iter().take(output + 1) {
            let v = match &node.op {
                OpKind::Input(name) => {
                    let t = feeds
                        .get(name)
                        .ok_or_else(|| Error::Graph(format!("missing feed '{name}'")))?;
                    ValF64::from_tensor(t)
                }
                op => {
                    let ins: Vec<&ValF64> = node
                        .inputs
                        .iter()
                        .map(|&id| vals[id].as_ref().unwrap())
                        .collect();
                    let ps: Vec<ValF64> = node
                        .params
                        .iter()
                        .map(|&pid| ValF64::from_tensor(&self.params[pid].value))
                        .collect();
                    let prefs: Vec<&ValF64> = ps.iter().collect();
                    forward_op_f64(op, &ins, &prefs)?
                }
            };
            vals.push(Some(v));
        }
        let out = vals[output].as_ref().unwrap();
        if out.data.len() != 1 {
            return Err(Error::Graph("loss output is not scalar".into()));
        }
        Ok(out.data[0])
    }

    /// Central finite-difference check of parameter gradients.
    ///
    /// Samples at least 32 parameter coordinates (or every coordinate if
    /// fewer exist) and returns the maximum relative error
    /// |analytic - numeric| / max(1e-6, |numeric|). The numeric side uses
    /// [`Graph::eval_loss_f64`] and divides by the realized float32 delta.
    pub fn gradient_check(
        &mut self,
        feeds: &HashMap<String, Tensor>,
        eps: f32,
        seed: u64,
    ) -> Result<f64> {
        let tape = self.forward(feeds)?;
        self.zero_grads();
        self.backward(&tape)?;
        let analytic: Vec<Vec<f32>> = self
            .params
            .iter()
            .map(|p| p.value.grad.clone().unwrap())
            .collect();

        let mut coords: Vec<(usize, usize)> = Vec::new();
        for (pi, p) in self.params.iter().enumerate() {
            for j in 0..p.value.numel() {
                coords.push((pi, j));
            }
        }
        let total = coords.len();
        let want = total.min(32);
        if total > want {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in 0..want {
                let j = rng.random_range(i..total);
                coords.swap(i, j);
            }
            coords.truncate(want);
        }

        let mut max_err = 0f64;
        for (pi, j) in coords {
            let orig = self.params[pi].value.data()[j];
            let plus = orig + eps;
            let minus = orig - eps;
            self.params[pi].value.data_mut()[j] = plus;
            let lp = self.eval_loss_f64(feeds)?;
            self.params[pi].value.data_mut()[j] = minus;
            let lm = self.eval_loss_f64(feeds)?;
            self.params[pi].value.data_mut()[j] = orig;
            let delta = plus as f64 - minus as f64;
            if delta == 0.0 {
                continue;
            }
            let numeric = (lp - lm) / delta;
            let err = (analytic[pi][j] as f64 - numeric).abs() / numeric.abs().max(1e-6);
            if err > max_err {
                max_err = err;
            }
        }
        Ok(max_err)
    }
}

/// He-normal initialization: std = sqrt(2 / fan_in).
pub fn he_normal(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(shape, data).expect("shape matches generated data")
}
