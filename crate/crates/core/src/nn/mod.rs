//! A small feed-forward network stack with hand-written reverse mode.
//!
//! Every parameterized model in the crate (encoder, attribute classifier,
//! ratio critic, task head, offline attacker) is an [`MlpNet`]: dense layers
//! with LeakyReLU between them, optional inverted dropout on hidden
//! activations, and a configurable output head.
//!
//! A forward pass returns a [`Trace`] holding the intermediates; `backward`
//! consumes the trace plus the gradient of a scalar loss with respect to the
//! network output, accumulates parameter gradients into the net's buffers,
//! and returns the gradient with respect to the inputs so callers can chain
//! networks together.

mod loss;
mod optim;

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::rng::Rng;

pub use loss::{accuracy, argmax_rows, bce_with_logits, cross_entropy, log_softmax, sigmoid, softmax};
pub use optim::{AdamW, OptimConfig};

/// Negative slope of the hidden LeakyReLU.
pub const LEAKY_SLOPE: f64 = 0.01;

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NET_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Logits,
    Sigmoid,
    Softmax,
}

/// Dense layer computing `x W + b`, with `W` stored as inputs × outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }
}

/// Hidden width, depth and dropout of a network family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub hidden: usize,
    /// Number of dense layers, including the output layer.
    pub layers: usize,
    pub dropout: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden: 128,
            layers: 3,
            dropout: 0.1,
        }
    }
}

impl NetConfig {
    pub fn dims(&self, inputs: usize, outputs: usize) -> Vec<usize> {
        let mut dims = vec![inputs];
        dims.extend(std::iter::repeat_n(self.hidden, self.layers.saturating_sub(1)));
        dims.push(outputs);
        dims
    }

    pub fn build(&self, inputs: usize, outputs: usize, head: Head, rng: &mut Rng) -> Result<MlpNet> {
        MlpNet::new(&self.dims(inputs, outputs), head, self.dropout, rng)
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if self.layers == 0 || (self.layers > 1 && self.hidden == 0) {
            return Err(validation(format!("{what}: needs >= 1 layer and hidden >= 1")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(validation(format!("{what}: dropout must lie in [0, 1)")));
        }
        Ok(())
    }
}

/// Multi-layer perceptron with gradient buffers.
#[derive(Debug)]
pub struct MlpNet {
    layers: Vec<Dense>,
    grads: Vec<Dense>,
    head: Head,
    dropout: f64,
    id: u64,
    version: u64,
}

impl Clone for MlpNet {
    fn clone(&self) -> Self {
        MlpNet {
            layers: self.layers.clone(),
            grads: self.grads.clone(),
            head: self.head,
            dropout: self.dropout,
            id: fresh_id(),
            version: 0,
        }
    }
}

/// Intermediates of one forward pass, consumed by [`MlpNet::backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    net_id: u64,
    version: u64,
    /// Input to each dense layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
    output: Array2<f64>,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn into_output(self) -> Array2<f64> {
        self.output
    }
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn apply_head(head: Head, mut z: Array2<f64>) -> Array2<f64> {
    match head {
        Head::Logits => z,
        Head::Sigmoid => {
            z.mapv_inplace(sigmoid);
            z
        }
        Head::Softmax => softmax(z.view()),
    }
}

impl MlpNet {
    /// Layer widths `dims = [inputs, hidden.., outputs]`; weights and biases
    /// are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn new(dims: &[usize], head: Head, dropout: f64, rng: &mut Rng) -> Result<Self> {
        let mut net = Self::zeros(dims, head, dropout)?;
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.inputs() as f64).sqrt();
            layer.weight.map_inplace(|w| *w = rng.gen_range(-bound..bound));
            layer.bias.map_inplace(|b| *b = rng.gen_range(-bound..bound));
        }
        Ok(net)
    }

    /// All-zero parameters.
    pub fn zeros(dims: &[usize], head: Head, dropout: f64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(validation(format!("mlp dims {dims:?}: need >= 2 positive widths")));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(validation(format!("dropout {dropout} outside [0, 1)")));
        }
        let layers: Vec<Dense> = dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Ok(MlpNet {
            grads: layers.clone(),
            layers,
            head,
            dropout,
            id: fresh_id(),
            version: 0,
        })
    }

    pub fn from_layers(layers: Vec<Dense>, head: Head, dropout: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(validation("mlp needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.outputs() || l.inputs() == 0 || l.outputs() == 0 {
                return Err(validation(format!("layer {i}: inconsistent weight/bias shapes")));
            }
            if let Some(next) = layers.get(i + 1) {
                if next.inputs() != l.outputs() {
                    return Err(validation(format!(
                        "layer {} expects {} inputs, layer {i} produces {}",
                        i + 1,
                        next.inputs(),
                        l.outputs()
                    )));
                }
            }
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(validation(format!("dropout {dropout} outside [0, 1)")));
        }
        Ok(MlpNet {
            grads: layers.iter().map(|l| Dense::zeros(l.inputs(), l.outputs())).collect(),
            layers,
            head,
            dropout,
            id: fresh_id(),
            version: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Mutable parameters; invalidates outstanding traces.
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.version += 1;
        &mut self.layers
    }

    pub fn grads(&self) -> &[Dense] {
        &self.grads
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.weight.fill(0.0);
            g.bias.fill(0.0);
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameters flattened layer by layer (weights row-major, then bias).
    pub fn flat_params(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        flatten(&self.grads)
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(validation(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                values.len()
            )));
        }
        let mut it = values.iter().copied();
        for layer in self.layers_mut() {
            layer.weight.iter_mut().chain(layer.bias.iter_mut()).for_each(|p| *p = it.next().unwrap());
        }
        Ok(())
    }

    /// Order-sensitive checksum of the parameters.
    pub fn checksum(&self) -> u64 {
        self.flat_params()
            .iter()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, v| (h ^ v.to_bits()).wrapping_mul(0x100_0000_01b3))
    }

    pub(crate) fn params_and_grads_mut(&mut self) -> (&mut [Dense], &mut [Dense]) {
        self.version += 1;
        (&mut self.layers, &mut self.grads)
    }

    /// Forward pass keeping intermediates. Dropout is active only in train mode.
    pub fn forward(&self, inputs: ArrayView2<'_, f64>, train: bool, rng: &mut Rng) -> Result<Trace> {
        if inputs.ncols() != self.input_dim() {
            return Err(validation(format!(
                "network expects {} input columns, got {}",
                self.input_dim(),
                inputs.ncols()
            )));
        }
        let n_layers = self.layers.len();
        let mut layer_inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers - 1);
        let mut masks = Vec::with_capacity(n_layers - 1);
        let mut a = inputs.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut h = a.dot(&layer.weight);
            h += &layer.bias;
            layer_inputs.push(a);
            if i + 1 == n_layers {
                a = h;
                break;
            }
            let mut act = h.mapv(leaky);
            let mask = if train && self.dropout > 0.0 {
                let keep = 1.0 / (1.0 - self.dropout);
                let m = Array2::from_shape_simple_fn(act.raw_dim(), || {
                    if rng.gen::<f64>() < self.dropout {
                        0.0
                    } else {
                        keep
                    }
                });
                act *= &m;
                Some(m)
            } else {
                None
            };
            pre.push(h);
            masks.push(mask);
            a = act;
        }
        Ok(Trace {
            net_id: self.id,
            version: self.version,
            inputs: layer_inputs,
            pre,
            masks,
            output: apply_head(self.head, a),
        })
    }

    /// Inference-mode output.
    pub fn predict(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        // dropout is off, so the generator is never consulted
        let mut unused = Rng::new(0);
        Ok(self.forward(inputs, false, &mut unused)?.into_output())
    }

    /// Accumulate parameter gradients for a loss whose gradient with respect
    /// to the network output is `upstream`; returns the input gradient.
    pub fn backward(&mut self, trace: &Trace, upstream: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut grads = std::mem::take(&mut self.grads);
        let out = self.backprop(trace, upstream, Some(&mut grads));
        self.grads = grads;
        out
    }

    /// Input gradient only; parameter buffers are left untouched.
    pub fn input_gradient(&self, trace: &Trace, upstream: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.backprop(trace, upstream, None)
    }

    fn backprop(
        &self,
        trace: &Trace,
        upstream: ArrayView2<'_, f64>,
        mut sink: Option<&mut Vec<Dense>>,
    ) -> Result<Array2<f64>> {
        if trace.net_id != self.id || trace.version != self.version {
            return Err(Error::State(
                "trace does not belong to the current parameters of this network".into(),
            ));
        }
        if upstream.dim() != trace.output.dim() {
            return Err(validation(format!(
                "upstream gradient shape {:?} does not match output {:?}",
                upstream.dim(),
                trace.output.dim()
            )));
        }
        let mut g = match self.head {
            Head::Logits => upstream.to_owned(),
            Head::Sigmoid => {
                let mut g = upstream.to_owned();
                Zip::from(&mut g).and(&trace.output).for_each(|g, &s| *g *= s * (1.0 - s));
                g
            }
            Head::Softmax => {
                let s = &trace.output;
                let dot = (&upstream * s).sum_axis(Axis(1)).insert_axis(Axis(1));
                s * &(&upstream - &dot)
            }
        };
        for i in (0..self.layers.len()).rev() {
            if let Some(grads) = sink.as_deref_mut() {
                let gl = &mut grads[i];
                ndarray::linalg::general_mat_mul(1.0, &trace.inputs[i].t(), &g, 1.0, &mut gl.weight);
                gl.bias += &g.sum_axis(Axis(0));
            }
            let mut g_in = g.dot(&self.layers[i].weight.t());
            if i > 0 {
                if let Some(m) = &trace.masks[i - 1] {
                    g_in *= m;
                }
                Zip::from(&mut g_in)
                    .and(&trace.pre[i - 1])
                    .for_each(|g, &h| *g *= if h > 0.0 { 1.0 } else { LEAKY_SLOPE });
            }
            g = g_in;
        }
        Ok(g)
    }

    pub fn to_checkpoint(&self) -> NetCheckpoint {
        NetCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            head: self.head,
            dropout: self.dropout,
            layers: self
                .layers
                .iter()
                .map(|l| LayerCheckpoint {
                    inputs: l.inputs(),
                    outputs: l.outputs(),
                    weight: l.weight.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
            manifest: None,
        }
    }

    pub fn from_checkpoint(ck: &NetCheckpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(validation(format!("unsupported checkpoint format {:?}", ck.format)));
        }
        let layers = ck
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let weight = Array2::from_shape_vec((l.inputs, l.outputs), l.weight.clone())
                    .map_err(|e| validation(format!("checkpoint layer {i}: {e}")))?;
                Ok(Dense {
                    weight,
                    bias: Array1::from(l.bias.clone()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers, ck.head, ck.dropout)
    }
}

fn flatten(layers: &[Dense]) -> Vec<f64> {
    layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied()).collect()
}

pub const CHECKPOINT_FORMAT: &str = "dismi-mlp/1";

/// JSON checkpoint of an [`MlpNet`]. Weights are stored row-major with shape
/// `inputs × outputs`, so a layer computes `x · W + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetCheckpoint {
    pub format: String,
    pub head: Head,
    pub dropout: f64,
    pub layers: Vec<LayerCheckpoint>,
    /// Provenance hash of the run that wrote the file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCheckpoint {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Uniformly drawn row indices (with replacement).
pub fn sample_rows(n: usize, m: usize, rng: &mut Rng) -> Vec<usize> {
    (0..m).map(|_| rng.gen_range(0..n)).collect()
}

/// One minibatch cross-entropy step on a logits-head classifier.
pub fn ce_step(
    net: &mut MlpNet,
    opt: &mut AdamW,
    inputs: ArrayView2<'_, f64>,
    labels: &[usize],
    rng: &mut Rng,
) -> Result<f64> {
    let trace = net.forward(inputs, true, rng)?;
    let (loss, grad) = cross_entropy(trace.output().view(), labels)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("cross-entropy loss is {loss}")));
    }
    net.backward(&trace, grad.view())?;
    opt.step(net)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn random_inputs(n: usize, d: usize, rng: &mut Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((n, d), || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = MlpNet::zeros(&[3, 4, 2], Head::Logits, 0.0).unwrap();
        let out = net.predict(array![[1.0, -2.0, 3.0]].view()).unwrap();
        assert_eq!(out, array![[0.0, 0.0]]);
    }

    #[test]
    fn symmetric_softmax_is_half() {
        let net = MlpNet::new(&[2, 2], Head::Softmax, 0.0, &mut Rng::new(1)).unwrap();
        let mut net = net;
        net.layers_mut()[0].bias.fill(0.0);
        let out = net.predict(array![[0.0, 0.0]].view()).unwrap();
        assert_eq!(out, array![[0.5, 0.5]]);
    }

    #[test]
    fn inference_is_deterministic() {
        let mut rng = Rng::new(5);
        let net = MlpNet::new(&[4, 8, 8, 3], Head::Softmax, 0.3, &mut rng).unwrap();
        let x = random_inputs(6, 4, &mut rng);
        let a = net.forward(x.view(), false, &mut Rng::new(1)).unwrap();
        let b = net.forward(x.view(), false, &mut Rng::new(2)).unwrap();
        assert_eq!(a.output(), b.output());
        for row in a.output().outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_validation_error() {
        let net = MlpNet::new(&[4, 2], Head::Logits, 0.0, &mut Rng::new(1)).unwrap();
        let err = net.predict(Array2::zeros((2, 3)).view()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn stale_trace_is_state_error() {
        let mut rng = Rng::new(2);
        let mut net = MlpNet::new(&[2, 3, 1], Head::Logits, 0.0, &mut rng).unwrap();
        let x = random_inputs(4, 2, &mut rng);
        let trace = net.forward(x.view(), false, &mut rng).unwrap();
        net.layers_mut()[0].weight[[0, 0]] += 1.0;
        let up = Array2::ones((4, 1));
        assert!(matches!(net.backward(&trace, up.view()), Err(Error::State(_))));
        let other = net.clone();
        let trace = other.forward(x.view(), false, &mut rng).unwrap();
        assert!(matches!(net.backward(&trace, up.view()), Err(Error::State(_))));
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut rng = Rng::new(3);
        let mut net = MlpNet::new(&[3, 5, 2], Head::Softmax, 0.0, &mut rng).unwrap();
        let x = random_inputs(7, 3, &mut rng);
        let trace = net.forward(x.view(), false, &mut rng).unwrap();
        let gx = net.backward(&trace, Array2::zeros((7, 2)).view()).unwrap();
        assert!(net.flat_grads().iter().all(|&g| g == 0.0));
        assert!(gx.iter().all(|&g| g == 0.0));
        // equal upstream on every softmax output is also a constant loss
        net.zero_grad();
        let trace = net.forward(x.view(), false, &mut rng).unwrap();
        net.backward(&trace, Array2::ones((7, 2)).view()).unwrap();
        assert!(net.flat_grads().iter().all(|&g| g.abs() < 1e-15));
    }

    #[test]
    fn dropout_uses_inverted_scaling() {
        let mut net = MlpNet::zeros(&[1, 2000, 1], Head::Logits, 0.5).unwrap();
        {
            let layers = net.layers_mut();
            layers[0].weight.fill(1.0);
            layers[1].weight.fill(1.0 / 2000.0);
        }
        let x = array![[1.0]];
        let eval = net.predict(x.view()).unwrap()[[0, 0]];
        assert!((eval - 1.0).abs() < 1e-12);
        let train = net.forward(x.view(), true, &mut Rng::new(4)).unwrap().output()[[0, 0]];
        assert!((train - 1.0).abs() < 0.1, "{train}");
        assert_ne!(train, eval);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let net = MlpNet::new(&[3, 4, 2], Head::Sigmoid, 0.1, &mut Rng::new(8)).unwrap();
        let json = serde_json::to_string(&net.to_checkpoint()).unwrap();
        let ck: NetCheckpoint = serde_json::from_str(&json).unwrap();
        let back = MlpNet::from_checkpoint(&ck).unwrap();
        assert_eq!(back.layers(), net.layers());
        assert_eq!(back.head(), Head::Sigmoid);
        let mut bad = ck.clone();
        bad.layers[1].inputs = 5;
        assert!(MlpNet::from_checkpoint(&bad).is_err());
    }

    #[test]
    fn flat_params_roundtrip() {
        let mut net = MlpNet::new(&[2, 3, 2], Head::Logits, 0.0, &mut Rng::new(9)).unwrap();
        let mut p = net.flat_params();
        assert_eq!(p.len(), net.num_params());
        p[0] = 42.0;
        net.set_flat_params(&p).unwrap();
        assert_eq!(net.layers()[0].weight[[0, 0]], 42.0);
        assert!(net.set_flat_params(&p[1..]).is_err());
    }
}
