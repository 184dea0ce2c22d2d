use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{Mode, ModelParams, Trace};
use super::spec::{LayerSpec, NetworkSpec, Shape};
use super::Tensor4;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub batch: usize,
    pub input: Shape,
    /// Coordinates checked per parameter buffer; `None` checks every one.
    /// A quarter of the budget goes to the largest analytic gradients, the
    /// rest is drawn uniformly.
    pub samples_per_buffer: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            batch: 2,
            input: [3, 8, 8],
            samples_per_buffer: Some(100),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub layer: usize,
    pub bias: bool,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates whose every step size crossed a kink; not compared.
    pub kinks_skipped: usize,
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-8)
}

/// Central-difference check of every backward pass in `spec`, in 64-bit with
/// dropout in evaluation mode.
pub fn gradient_check(spec: &NetworkSpec, seed: u64, eps: f64) -> Result<GradCheckReport> {
    gradient_check_with(
        spec,
        seed,
        &GradCheckOptions {
            eps,
            ..GradCheckOptions::default()
        },
    )
}

pub fn gradient_check_with(spec: &NetworkSpec, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ModelParams::<f64>::new(spec.clone(), opts.input, rng.gen())?;
    for l in &mut model.layers {
        l.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
    }
    let [c, h, w] = opts.input;
    let x = Tensor4::from_fn([opts.batch, c, h, w], |_| rng.gen_range(-0.5..0.5));
    let classes = model.classes();
    let labels: Vec<u32> = (0..opts.batch).map(|_| rng.gen_range(0..classes as u32)).collect();

    let (_, grads) = model.loss_and_grad(&x, &labels, Mode::Eval, &mut rng, 1.0 / opts.batch as f64)?;
    let logits_layer = spec.layers.len() - 1;
    let base = model.forward(&x, Mode::Eval, &mut rng, logits_layer)?;

    let mut report = GradCheckReport {
        checked: 0,
        kinks_skipped: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for layer in 0..model.layers.len() {
        if !spec.layers[layer].has_params() {
            continue;
        }
        // Perturbing this layer leaves everything before it unchanged.
        let input = base.input_of(layer).expect("trace covers every layer").clone();
        let run = |m: &ModelParams<f64>, rng: &mut ChaCha8Rng| -> Result<(Vec<f64>, Vec<usize>)> {
            let t = m.forward_from(layer, &input, Mode::Eval, rng, logits_layer)?;
            Ok((t.output().data().to_vec(), signature(m.spec(), &t, layer, logits_layer)))
        };
        let (_, reference) = run(&model, &mut rng)?;
        for bias in [false, true] {
            let analytic = if bias {
                grads.layers[layer].bias.clone()
            } else {
                grads.layers[layer].weights.clone()
            };
            for i in pick_coordinates(&analytic, opts.samples_per_buffer, &mut rng) {
                let orig = *coord(&mut model, layer, bias, i);
                let mut eps = opts.eps;
                let mut numeric = None;
                // A step that flips a ReLU or pooling decision measures the
                // slope of a different linear piece; shrink it until both
                // sides stay on the piece of the unperturbed point.
                for _ in 0..KINK_RETRIES {
                    *coord(&mut model, layer, bias, i) = orig + eps;
                    let (plus, sig_plus) = run(&model, &mut rng)?;
                    *coord(&mut model, layer, bias, i) = orig - eps;
                    let (minus, sig_minus) = run(&model, &mut rng)?;
                    *coord(&mut model, layer, bias, i) = orig;
                    if sig_plus == reference && sig_minus == reference {
                        numeric = Some(loss_difference(&plus, &minus, classes, &labels) / (2.0 * eps));
                        break;
                    }
                    eps /= 10.0;
                }
                let Some(numeric) = numeric else {
                    report.kinks_skipped += 1;
                    continue;
                };
                let err = rel_error(analytic[i], numeric);
                report.checked += 1;
                if err > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = report.max_rel_error.max(err);
                    report.worst = Some(Mismatch {
                        layer,
                        bias,
                        index: i,
                        analytic: analytic[i],
                        numeric,
                        rel_error: err,
                    });
                }
            }
        }
    }
    Ok(report)
}

const KINK_RETRIES: usize = 4;

/// ReLU on/off states and pooling argmaxes of layers `from..to`.
fn signature(spec: &NetworkSpec, t: &Trace<f64>, from: usize, to: usize) -> Vec<usize> {
    let mut sig = Vec::new();
    for layer in from..to {
        match spec.layers[layer] {
            LayerSpec::Relu => {
                let inp = t.input_of(layer).expect("trace covers layer");
                sig.extend(inp.data().iter().map(|&v| usize::from(v > 0.0)));
            }
            LayerSpec::MaxPool(_) => sig.extend_from_slice(t.argmax(layer).expect("pool records argmax")),
            _ => {}
        }
    }
    sig
}

/// Mean softmax loss at `plus` minus mean loss at `minus`, computed from the
/// logit differences so the common part of the two losses cancels exactly.
pub fn loss_difference(plus: &[f64], minus: &[f64], classes: usize, labels: &[u32]) -> f64 {
    let mut total = 0.0;
    for ((p, m), &y) in plus.chunks_exact(classes).zip(minus.chunks_exact(classes)).zip(labels) {
        let max = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut base = 0.0;
        let mut change = 0.0;
        for (&pj, &mj) in p.iter().zip(m) {
            let e = (mj - max).exp();
            base += e;
            change += e * (pj - mj).exp_m1();
        }
        total += (change / base).ln_1p() - (p[y as usize] - m[y as usize]);
    }
    total / labels.len().max(1) as f64
}

fn coord(m: &mut ModelParams<f64>, layer: usize, bias: bool, i: usize) -> &mut f64 {
    let l = &mut m.layers[layer];
    if bias {
        &mut l.bias[i]
    } else {
        &mut l.weights[i]
    }
}

fn pick_coordinates(analytic: &[f64], budget: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = analytic.len();
    let budget = match budget {
        Some(b) if b < n => b,
        _ => return (0..n).collect(),
    };
    let mut by_size: Vec<usize> = (0..n).collect();
    by_size.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()).then(a.cmp(&b)));
    let mut picked: Vec<usize> = by_size[..budget / 4].to_vec();
    let mut taken = vec![false; n];
    picked.iter().for_each(|&i| taken[i] = true);
    let rest: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
    picked.extend(index::sample(rng, rest.len(), budget - picked.len()).into_iter().map(|j| rest[j]));
    picked
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_mean_loss(logits: &[f64], classes: usize, labels: &[u32]) -> f64 {
        let mut total = 0.0;
        for (row, &y) in logits.chunks_exact(classes).zip(labels) {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            total += z.ln() - row[y as usize];
        }
        total / labels.len() as f64
    }

    #[test]
    fn loss_difference_matches_direct_subtraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let classes = rng.gen_range(2..7);
            let n = rng.gen_range(1..4);
            let minus: Vec<f64> = (0..n * classes).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let plus: Vec<f64> = minus.iter().map(|m| m + rng.gen_range(-0.5..0.5)).collect();
            let labels: Vec<u32> = (0..n).map(|_| rng.gen_range(0..classes as u32)).collect();
            let direct = naive_mean_loss(&plus, classes, &labels) - naive_mean_loss(&minus, classes, &labels);
            assert!((loss_difference(&plus, &minus, classes, &labels) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn smooth_network_checks_every_coordinate() {
        let spec = NetworkSpec {
            name: "linear".into(),
            layers: vec![LayerSpec::fc(6), LayerSpec::fc(4), LayerSpec::SoftmaxLoss],
        };
        let opts = GradCheckOptions {
            input: [2, 3, 3],
            samples_per_buffer: None,
            ..GradCheckOptions::default()
        };
        let r = gradient_check_with(&spec, 1, &opts).unwrap();
        assert_eq!(r.checked, 18 * 6 + 6 + 6 * 4 + 4);
        assert_eq!(r.kinks_skipped, 0);
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    #[test]
    fn small_conv_stack_passes() {
        let spec = NetworkSpec {
            name: "tiny".into(),
            layers: vec![
                LayerSpec::conv(3, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::pool(3, 2, 0, true),
                LayerSpec::conv(4, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::fc(5),
                LayerSpec::Dropout { p: 0.5 },
                LayerSpec::fc(3),
                LayerSpec::SoftmaxLoss,
            ],
        };
        let a = gradient_check(&spec, 4, 1e-5).unwrap();
        assert!(a.checked > 100);
        assert!(a.max_rel_error < 1e-4, "{a:?}");
        // Dropout is off, so the check is a pure function of the seed.
        assert_eq!(gradient_check(&spec, 4, 1e-5).unwrap(), a);
    }

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert_eq!(rel_error(1.0, 1.0), 0.0);
        assert!((rel_error(1.0, 3.0) - 0.5).abs() < 1e-15);
        assert!(rel_error(1e-10, 0.0) <= 1e-2);
    }
}
