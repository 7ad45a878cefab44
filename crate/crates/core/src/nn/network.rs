use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layer::{softmax, Layer, LayerSpec, Scratch, Shape};
use super::tensor::Tensor;
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub input: Shape,
    pub layers: Vec<Layer>,
    pub loss: LossKind,
}

/// Per-layer parameter gradients, shaped like the layer's weights and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f32>>,
    pub bias: Vec<Vec<f32>>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    fn fill_zero(&mut self) {
        for g in self.weights.iter_mut().chain(self.bias.iter_mut()) {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn scale(&mut self, k: f32) {
        for g in self.weights.iter_mut().chain(self.bias.iter_mut()) {
            g.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f32 {
        self.weights
            .iter()
            .chain(&self.bias)
            .flat_map(|g| g.iter())
            .fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// Cached activations and buffers for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Trace {
    acts: Vec<Vec<f32>>,
    aux: Vec<Vec<u32>>,
    grad_a: Vec<f32>,
    grad_b: Vec<f32>,
    scratch: Scratch,
}

impl Network {
    /// Builds a network from layer specs and initializes weights from `seed`.
    pub fn new(input: Shape, specs: &[LayerSpec], loss: LossKind, seed: u64) -> Result<Self, NnError> {
        if specs.is_empty() {
            return Err(NnError::Config("network needs at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = input;
        for spec in specs {
            let layer = Layer::new(*spec, shape)?;
            shape = layer.output;
            layers.push(layer);
        }
        let net = Self { input, layers, loss };
        net.validate()?;
        let mut net = net;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut net.layers {
            layer.init(&mut rng);
        }
        Ok(net)
    }

    /// Checks that layer shapes compose and the loss matches the output layer.
    pub fn validate(&self) -> Result<(), NnError> {
        let mut shape = self.input;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.input != shape {
                return Err(NnError::Config(format!("layer {i} expects {:?}, receives {shape:?}", layer.input)));
            }
            let expected = layer.spec.output_shape(shape)?;
            if expected != layer.output {
                return Err(NnError::Config(format!("layer {i} output {:?} != {expected:?}", layer.output)));
            }
            let probe = Layer::new(layer.spec, shape)?;
            if probe.weights.len() != layer.weights.len() || probe.bias.len() != layer.bias.len() {
                return Err(NnError::Config(format!("layer {i} parameter sizes do not match its spec")));
            }
            shape = layer.output;
        }
        let last = self.layers.last().map(|l| l.spec);
        match (self.loss, last) {
            (LossKind::CrossEntropy, Some(LayerSpec::Softmax)) | (LossKind::Mse, Some(LayerSpec::LinearOutput)) => Ok(()),
            (loss, last) => Err(NnError::Config(format!("loss {loss:?} does not match output layer {last:?}"))),
        }
    }

    pub fn output_shape(&self) -> Shape {
        self.layers.last().map(|l| l.output).unwrap_or(self.input)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Forward pass over a single sample (`input` shape) or a batch
    /// (leading batch dimension).
    pub fn forward(&self, input: &Tensor) -> Result<Tensor, NnError> {
        let per = self.input.len();
        let dims = self.input.dims();
        let batch = if input.shape() == dims.as_slice() {
            None
        } else if input.shape().len() == dims.len() + 1 && input.shape()[1..] == dims[..] {
            Some(input.shape()[0])
        } else {
            return Err(NnError::Shape(format!("input {:?} does not match network input {dims:?}", input.shape())));
        };
        let out_len = self.output_shape().len();
        let mut trace = Trace::default();
        let mut out = Vec::with_capacity(out_len * batch.unwrap_or(1));
        for sample in input.data().chunks_exact(per) {
            out.extend_from_slice(self.forward_traced(sample, &mut trace));
        }
        let shape = match batch {
            Some(n) => vec![n, out_len],
            None => vec![out_len],
        };
        let t = Tensor::new(shape, out)?;
        if !t.all_finite() {
            return Err(NnError::NonFinite("forward output".into()));
        }
        Ok(t)
    }

    /// Single-sample prediction.
    pub fn predict(&self, x: &[f32]) -> Result<Vec<f32>, NnError> {
        self.check_input(x)?;
        let mut trace = Trace::default();
        let y = self.forward_traced(x, &mut trace).to_vec();
        if y.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite("forward output".into()));
        }
        Ok(y)
    }

    pub(crate) fn predict_with(&self, x: &[f32], trace: &mut Trace) -> Result<Vec<f32>, NnError> {
        self.check_input(x)?;
        Ok(self.forward_traced(x, trace).to_vec())
    }

    fn check_input(&self, x: &[f32]) -> Result<(), NnError> {
        if x.len() != self.input.len() {
            return Err(NnError::Shape(format!("input has {} values, network expects {}", x.len(), self.input.len())));
        }
        Ok(())
    }

    fn forward_traced<'t>(&self, x: &[f32], trace: &'t mut Trace) -> &'t [f32] {
        let n = self.layers.len();
        trace.acts.resize_with(n + 1, Vec::new);
        trace.aux.resize_with(n, Vec::new);
        trace.acts[0].clear();
        trace.acts[0].extend_from_slice(x);
        for (i, layer) in self.layers.iter().enumerate() {
            let (done, rest) = trace.acts.split_at_mut(i + 1);
            layer.forward(&done[i], &mut rest[0], &mut trace.aux[i], &mut trace.scratch);
        }
        &trace.acts[n]
    }

    fn check_target(&self, t: &[f32]) -> Result<(), NnError> {
        if t.len() != self.output_shape().len() {
            return Err(NnError::Shape(format!(
                "target has {} values, network outputs {}",
                t.len(),
                self.output_shape().len()
            )));
        }
        Ok(())
    }

    /// Loss of one traced sample and the gradient w.r.t. the input of the
    /// first layer that backward has to visit (written to `trace.grad_a`).
    /// Returns `(loss, index of that layer + 1)`.
    fn loss_head(&self, trace: &mut Trace, target: &[f32]) -> (f32, usize) {
        let n = self.layers.len();
        match self.loss {
            LossKind::CrossEntropy => {
                // Softmax and cross-entropy are fused: dL/dz = p * sum(t) - t.
                let z = &trace.acts[n - 1];
                let p = &trace.acts[n];
                let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
                let t_sum: f32 = target.iter().sum();
                let loss = -target.iter().zip(z).map(|(t, zi)| t * (zi - lse)).sum::<f32>();
                trace.grad_a.clear();
                trace.grad_a.extend(p.iter().zip(target).map(|(pi, ti)| pi * t_sum - ti));
                (loss, n - 1)
            }
            LossKind::Mse => {
                let y = &trace.acts[n];
                let k = y.len() as f32;
                let loss = y.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f32>() / k;
                trace.grad_a.clear();
                trace.grad_a.extend(y.iter().zip(target).map(|(a, b)| 2.0 * (a - b) / k));
                (loss, n)
            }
        }
    }

    /// Forward + backward on one sample, accumulating into `grads`.
    fn accumulate(&self, x: &[f32], target: &[f32], trace: &mut Trace, grads: &mut Gradients) -> f32 {
        self.forward_traced(x, trace);
        let (loss, upto) = self.loss_head(trace, target);
        for i in (0..upto).rev() {
            let layer = &self.layers[i];
            let need_dx = i > 0;
            let mut dx = std::mem::take(&mut trace.grad_b);
            layer.backward(
                &trace.acts[i],
                &trace.acts[i + 1],
                &trace.aux[i],
                &trace.grad_a,
                need_dx.then_some(&mut dx),
                &mut grads.weights[i],
                &mut grads.bias[i],
                &mut trace.scratch,
            );
            trace.grad_b = std::mem::replace(&mut trace.grad_a, dx);
        }
        loss
    }

    /// Mean loss and mean gradients over a batch.
    pub fn loss_and_gradients(&self, inputs: &[&[f32]], targets: &[&[f32]]) -> Result<(f32, Gradients), NnError> {
        let mut grads = Gradients::zeros_like(self);
        let mut trace = Trace::default();
        let loss = self.batch_gradients(inputs, targets, &mut trace, &mut grads)?;
        Ok((loss, grads))
    }

    pub(crate) fn batch_gradients(
        &self,
        inputs: &[&[f32]],
        targets: &[&[f32]],
        trace: &mut Trace,
        grads: &mut Gradients,
    ) -> Result<f32, NnError> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(NnError::Shape(format!("{} inputs vs {} targets", inputs.len(), targets.len())));
        }
        grads.fill_zero();
        let mut total = 0.0f64;
        for (x, t) in inputs.iter().zip(targets) {
            self.check_input(x)?;
            self.check_target(t)?;
            total += self.accumulate(x, t, trace, grads) as f64;
        }
        let k = 1.0 / inputs.len() as f32;
        grads.scale(k);
        Ok((total / inputs.len() as f64) as f32)
    }

    /// Gradients of the mean loss for a batch given as tensors (`[n, ..]`
    /// or a single sample).
    pub fn backward(&self, input: &Tensor, target: &Tensor) -> Result<Gradients, NnError> {
        let per_in = self.input.len();
        let per_out = self.output_shape().len();
        if input.is_empty() || !input.len().is_multiple_of(per_in) || !target.len().is_multiple_of(per_out) {
            return Err(NnError::Shape("input/target sizes do not match the network".into()));
        }
        let xs: Vec<&[f32]> = input.data().chunks_exact(per_in).collect();
        let ts: Vec<&[f32]> = target.data().chunks_exact(per_out).collect();
        Ok(self.loss_and_gradients(&xs, &ts)?.1)
    }

    /// Mean loss without gradients.
    pub fn loss(&self, inputs: &[&[f32]], targets: &[&[f32]]) -> Result<f32, NnError> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(NnError::Shape(format!("{} inputs vs {} targets", inputs.len(), targets.len())));
        }
        let mut trace = Trace::default();
        let mut total = 0.0f64;
        for (x, t) in inputs.iter().zip(targets) {
            self.check_input(x)?;
            self.check_target(t)?;
            self.forward_traced(x, &mut trace);
            total += self.loss_head(&mut trace, t).0 as f64;
        }
        Ok((total / inputs.len() as f64) as f32)
    }

    pub fn output_probabilities(logits: &[f32]) -> Vec<f32> {
        let mut p = vec![0.0; logits.len()];
        softmax(logits, &mut p);
        p
    }
}
