use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{self, ConvGeometry};
use super::spec::{LayerSpec, NetworkSpec, Shape};
use super::{Scalar, Tensor4};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Weights and biases of one layer; both empty for parameter-free layers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerParams<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> LayerParams<T> {
    fn zeros_like(other: &Self) -> Self {
        Self {
            weights: vec![T::zero(); other.weights.len()],
            bias: vec![T::zero(); other.bias.len()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InitRecord {
    pub scheme: String,
    pub seed: u64,
}

/// A network's parameters together with the spec and input shape they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    spec: NetworkSpec,
    input: Shape,
    shapes: Vec<Shape>,
    pub layers: Vec<LayerParams<T>>,
    pub init: InitRecord,
}

/// Same layout as the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(model: &ModelParams<T>) -> Self {
        Self {
            layers: model.layers.iter().map(LayerParams::zeros_like).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += *y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += *y);
        }
    }

    pub fn buffers(&self) -> impl Iterator<Item = &[T]> {
        self.layers.iter().flat_map(|l| [&l.weights[..], &l.bias[..]])
    }

    pub fn all_finite(&self) -> bool {
        self.buffers().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Per-layer state recorded by a forward pass.
pub struct Trace<T> {
    start: usize,
    /// `acts[i]` is the input of layer `start + i`; the last entry is the final output.
    pub acts: Vec<Tensor4<T>>,
    argmax: Vec<Option<Vec<usize>>>,
    masks: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Trace<T> {
    pub fn output(&self) -> &Tensor4<T> {
        self.acts.last().expect("trace holds the input")
    }

    /// Input of `layer`, if the trace covers it.
    pub fn input_of(&self, layer: usize) -> Option<&Tensor4<T>> {
        self.acts.get(layer.checked_sub(self.start)?)
    }

    /// Argmax routing recorded by a pooling `layer`.
    pub fn argmax(&self, layer: usize) -> Option<&[usize]> {
        self.argmax.get(layer.checked_sub(self.start)?)?.as_deref()
    }
}

fn fan_in(layer: &LayerSpec, input: Shape) -> usize {
    match *layer {
        LayerSpec::Conv { kernel, .. } => input[0] * kernel * kernel,
        _ => input.iter().product(),
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Weights drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    pub fn new(spec: NetworkSpec, input: Shape, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(spec, input, "uniform_inv_sqrt_fan_in", seed, |fan, n| {
            let bound = 1.0 / (fan as f64).sqrt();
            (0..n).map(|_| T::from_f64(rng.gen_range(-bound..=bound))).collect()
        })
    }

    pub fn zeros(spec: NetworkSpec, input: Shape) -> Result<Self> {
        Self::build(spec, input, "zeros", 0, |_, n| vec![T::zero(); n])
    }

    fn build(
        spec: NetworkSpec,
        input: Shape,
        scheme: &str,
        seed: u64,
        mut weights: impl FnMut(usize, usize) -> Vec<T>,
    ) -> Result<Self> {
        let shapes = spec.shapes(input)?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut cur = input;
        for (l, out) in spec.layers.iter().zip(&shapes) {
            layers.push(match *l {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    ..
                } => LayerParams {
                    weights: weights(fan_in(l, cur), out_channels * cur[0] * kernel * kernel),
                    bias: vec![T::zero(); out_channels],
                },
                LayerSpec::FullyConnected { out_features } => LayerParams {
                    weights: weights(fan_in(l, cur), out_features * cur.iter().product::<usize>()),
                    bias: vec![T::zero(); out_features],
                },
                _ => LayerParams::default(),
            });
            cur = *out;
        }
        Ok(Self {
            spec,
            input,
            shapes,
            layers,
            init: InitRecord {
                scheme: scheme.to_string(),
                seed,
            },
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    /// Output shape of every layer.
    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn classes(&self) -> usize {
        self.shapes.last().expect("validated spec is non-empty")[0]
    }

    pub fn buffers(&self) -> impl Iterator<Item = &[T]> {
        self.layers.iter().flat_map(|l| [&l.weights[..], &l.bias[..]])
    }

    pub fn buffers_mut(&mut self) -> impl Iterator<Item = &mut Vec<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weights, &mut l.bias])
    }

    pub fn param_count(&self) -> usize {
        self.buffers().map(|b| b.len()).sum()
    }

    fn layer_input(&self, i: usize) -> Shape {
        if i == 0 {
            self.input
        } else {
            self.shapes[i - 1]
        }
    }

    /// Runs layers `0..upto`, recording what the backward pass needs.
    pub fn forward<R: Rng + ?Sized>(&self, x: &Tensor4<T>, mode: Mode, rng: &mut R, upto: usize) -> Result<Trace<T>> {
        self.forward_from(0, x, mode, rng, upto)
    }

    /// Runs layers `start..upto` on `x`, the input of layer `start`.
    pub fn forward_from<R: Rng + ?Sized>(
        &self,
        start: usize,
        x: &Tensor4<T>,
        mode: Mode,
        rng: &mut R,
        upto: usize,
    ) -> Result<Trace<T>> {
        let upto = upto.min(self.spec.layers.len());
        let [_, c, h, w] = x.dims();
        if start > upto || [c, h, w] != self.layer_input(start) {
            return Err(Error::Contract(format!(
                "input {c}x{h}x{w} does not match layer {start} input {:?}",
                self.layer_input(start.min(self.spec.layers.len() - 1))
            )));
        }
        let mut acts = Vec::with_capacity(upto - start + 1);
        let mut argmax = Vec::with_capacity(upto - start);
        let mut masks = Vec::with_capacity(upto - start);
        acts.push(x.clone());
        for i in start..upto {
            let inp = acts.last().expect("seeded with input");
            let (mut arg, mut mask) = (None, None);
            let out = match self.spec.layers[i] {
                LayerSpec::Conv { stride, pad, kernel, .. } => {
                    let s = self.layer_input(i);
                    let g = ConvGeometry::new(s[0], s[1], s[2], kernel, stride, pad)?;
                    let p = &self.layers[i];
                    let [oc, oh, ow] = self.shapes[i];
                    let mut out = Tensor4::zeros([inp.batch(), oc, oh, ow]);
                    let mut cols = vec![T::zero(); g.patch_len() * g.out_plane()];
                    for n in 0..inp.batch() {
                        ops::conv_sample_forward(inp.sample(n), &p.weights, &p.bias, &g, &mut cols, out.sample_mut(n));
                    }
                    out
                }
                LayerSpec::Relu => ops::relu_forward(inp),
                LayerSpec::MaxPool(pp) => {
                    let (out, a) = ops::maxpool_forward(inp, &pp)?;
                    arg = Some(a);
                    out
                }
                LayerSpec::FullyConnected { .. } => {
                    let p = &self.layers[i];
                    ops::fc_forward(inp, &p.weights, &p.bias)?
                }
                LayerSpec::Dropout { p } => {
                    let (out, m) = ops::dropout_forward(inp, p, mode == Mode::Train, rng);
                    mask = m;
                    out
                }
                LayerSpec::SoftmaxLoss => inp.clone(),
            };
            acts.push(out);
            argmax.push(arg);
            masks.push(mask);
        }
        Ok(Trace {
            start,
            acts,
            argmax,
            masks,
        })
    }

    /// Logits in evaluation mode.
    pub fn logits(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let n = self.spec.layers.len() - 1;
        let mut trace = self.forward(x, Mode::Eval, &mut rand::rngs::mock::StepRng::new(0, 0), n)?;
        Ok(trace.acts.pop().expect("non-empty trace"))
    }

    /// Activations just before the first fully connected layer, in evaluation mode.
    pub fn features(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let cut = self
            .spec
            .feature_cut()
            .ok_or_else(|| Error::Contract("network has no fully connected layer".into()))?;
        let mut trace = self.forward(x, Mode::Eval, &mut rand::rngs::mock::StepRng::new(0, 0), cut)?;
        Ok(trace.acts.pop().expect("non-empty trace"))
    }

    pub fn predict(&self, x: &Tensor4<T>) -> Result<Vec<u32>> {
        let logits = self.logits(x)?;
        let c = self.classes();
        Ok(logits
            .data()
            .chunks_exact(c)
            .map(|row| {
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                best as u32
            })
            .collect())
    }

    /// Summed softmax loss over the batch, and the gradient of
    /// `scale * summed loss` with respect to every parameter.
    pub fn loss_and_grad<R: Rng + ?Sized>(
        &self,
        x: &Tensor4<T>,
        labels: &[u32],
        mode: Mode,
        rng: &mut R,
        scale: T,
    ) -> Result<(f64, Gradients<T>)> {
        let n_layers = self.spec.layers.len();
        let trace = self.forward(x, mode, rng, n_layers)?;
        let classes = self.classes();
        let (loss, g) = ops::softmax_loss_sum(trace.output().data(), classes, labels, scale)?;
        let mut grads = Gradients::zeros_like(self);
        let mut grad = Tensor4::from_vec([x.batch(), classes, 1, 1], g)?;

        for i in (0..n_layers - 1).rev() {
            let inp = &trace.acts[i];
            let need_gx = i > 0;
            grad = match self.spec.layers[i] {
                LayerSpec::Conv { stride, pad, kernel, .. } => {
                    let s = self.layer_input(i);
                    let g = ConvGeometry::new(s[0], s[1], s[2], kernel, stride, pad)?;
                    let p = &self.layers[i];
                    let gl = &mut grads.layers[i];
                    let mut gx = Tensor4::zeros(inp.dims());
                    let mut cols = vec![T::zero(); g.patch_len() * g.out_plane()];
                    for n in 0..inp.batch() {
                        ops::conv_sample_backward(
                            inp.sample(n),
                            &p.weights,
                            grad.sample(n),
                            &g,
                            &mut cols,
                            &mut gl.weights,
                            &mut gl.bias,
                            need_gx.then(|| gx.sample_mut(n)),
                        );
                    }
                    gx
                }
                LayerSpec::Relu => ops::relu_backward(inp, &grad),
                LayerSpec::MaxPool(_) => {
                    let arg = trace.argmax[i].as_ref().expect("pool records argmax");
                    ops::maxpool_backward(&grad, arg, inp.dims())
                }
                LayerSpec::FullyConnected { .. } => {
                    let gl = &mut grads.layers[i];
                    ops::fc_backward(inp, &self.layers[i].weights, &grad, &mut gl.weights, &mut gl.bias, need_gx)
                        .unwrap_or_else(|| Tensor4::zeros([0, 0, 0, 0]))
                }
                LayerSpec::Dropout { .. } => ops::dropout_backward(&grad, trace.masks[i].as_deref()),
                LayerSpec::SoftmaxLoss => unreachable!("softmax loss is the final layer"),
            };
        }
        Ok((loss, grads))
    }

    /// Mean loss in evaluation mode.
    pub fn mean_loss(&self, x: &Tensor4<T>, labels: &[u32]) -> Result<f64> {
        let logits = self.logits(x)?;
        Ok(ops::softmax_loss(logits.data(), self.classes(), labels)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::INPUT_SHAPE;

    #[test]
    fn parameter_shapes() {
        let m = ModelParams::<f32>::new(NetworkSpec::net_small(10), INPUT_SHAPE, 1).unwrap();
        assert_eq!(m.layers[0].weights.len(), 64 * 3 * 25);
        assert_eq!(m.layers[3].weights.len(), 128 * 64 * 25);
        assert_eq!(m.layers[6].weights.len(), 256 * 128 * 25);
        assert_eq!(m.layers[8].weights.len(), 512 * 256 * 64);
        assert_eq!(m.layers[10].weights.len(), 10 * 512);
        let bound = 1.0 / (75f32).sqrt();
        assert!(m.layers[0].weights.iter().all(|w| w.abs() <= bound));
        assert!(m.layers[0].bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn features_and_logits_shapes() {
        let m = ModelParams::<f32>::new(NetworkSpec::net_small(5), INPUT_SHAPE, 2).unwrap();
        let x = Tensor4::zeros([2, 3, 32, 32]);
        assert_eq!(m.features(&x).unwrap().dims(), [2, 256, 8, 8]);
        assert_eq!(m.logits(&x).unwrap().dims(), [2, 5, 1, 1]);
        assert!(m.logits(&Tensor4::zeros([1, 3, 16, 16])).is_err());
    }

    #[test]
    fn sgd_step_decreases_single_example_loss() {
        let spec = NetworkSpec {
            name: "tiny".into(),
            layers: vec![
                LayerSpec::conv(4, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::pool(3, 2, 0, true),
                LayerSpec::fc(6),
                LayerSpec::Dropout { p: 0.5 },
                LayerSpec::fc(3),
                LayerSpec::SoftmaxLoss,
            ],
        };
        for seed in 0..20 {
            let m = ModelParams::<f64>::new(spec.clone(), [3, 8, 8], seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let x = Tensor4::from_fn([1, 3, 8, 8], |_| rng.gen_range(-0.5..0.5));
            let label = [(seed % 3) as u32];
            let before = m.mean_loss(&x, &label).unwrap();
            let (_, g) = m.loss_and_grad(&x, &label, Mode::Eval, &mut rng, 1.0).unwrap();
            let mut stepped = m.clone();
            for (p, gb) in stepped.buffers_mut().zip(g.buffers()) {
                p.iter_mut().zip(gb).for_each(|(w, d)| *w -= 1e-4 * d);
            }
            assert!(stepped.mean_loss(&x, &label).unwrap() < before, "seed {seed}");
        }
    }
}
