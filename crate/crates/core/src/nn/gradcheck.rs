//! Central finite-difference gradient checking (64-bit).

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;

use super::activation::{relu, relu_backward};
use super::batchnorm::{batchnorm_backward, batchnorm_forward, BatchNorm, Mode};
use super::conv::{conv2d_backward, conv2d_forward};
use super::layer::{stack_backward, stack_forward, ConvLayer, LayerCache};
use super::loss::mse_loss;
use super::tensor::Tensor4;
use crate::error::Result;
use crate::rng::{derive_seed, sample_stream, SampleRng};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Index of the coordinate with the largest relative error.
    pub worst_index: Option<usize>,
    /// Coordinates skipped because every tried step crossed a ReLU kink.
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tolerance
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst_index = other.worst_index.map(|i| i + self.checked);
        }
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
    }

    fn record(&mut self, index: usize, analytic: f64, numeric: f64) {
        let rel = relative_error(analytic, numeric);
        if rel > self.max_rel_error || self.worst_index.is_none() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst_index = Some(index);
        }
        self.max_abs_error = self.max_abs_error.max((analytic - numeric).abs());
        self.checked += 1;
    }
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Compares `analytic` against central differences of a smooth scalar function.
pub fn check_gradient(
    f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    step: f64,
) -> GradCheckReport {
    assert_eq!(
        x.len(),
        analytic.len(),
        "one analytic partial per coordinate"
    );
    let numeric = central_difference(f, x, step);
    let mut report = GradCheckReport::default();
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        report.record(i, a, n);
    }
    report
}

/// Like [`check_gradient`] for piecewise-smooth functions. `f` also returns a
/// signature of its active linear piece (e.g. a hash of ReLU on/off states).
/// When a probe crosses a kink the step is shrunk up to twice; coordinates
/// that still straddle a kink are counted in `skipped_kinks`.
pub fn check_gradient_piecewise(
    mut f: impl FnMut(&[f64]) -> (f64, u64),
    x: &[f64],
    analytic: &[f64],
    step: f64,
) -> GradCheckReport {
    assert_eq!(
        x.len(),
        analytic.len(),
        "one analytic partial per coordinate"
    );
    let (_, base_sig) = f(x);
    let mut probe = x.to_vec();
    let mut report = GradCheckReport::default();
    for i in 0..x.len() {
        let mut numeric = None;
        for h in [step, step / 10.0, step / 100.0] {
            probe[i] = x[i] + h;
            let (up, s_up) = f(&probe);
            probe[i] = x[i] - h;
            let (down, s_down) = f(&probe);
            probe[i] = x[i];
            if s_up == base_sig && s_down == base_sig {
                numeric = Some((up - down) / (2.0 * h));
                break;
            }
        }
        match numeric {
            Some(n) => report.record(i, analytic[i], n),
            None => report.skipped_kinks += 1,
        }
    }
    report
}

/// Per-tensor results for a layer stack.
#[derive(Debug, Clone, Default)]
pub struct StackReport {
    pub input: GradCheckReport,
    /// `(layer, tensor name, report)`
    pub params: Vec<(usize, &'static str, GradCheckReport)>,
}

impl StackReport {
    pub fn overall(&self) -> GradCheckReport {
        let mut all = self.input.clone();
        for (_, _, r) in &self.params {
            all.merge(r);
        }
        all
    }
}

fn relu_signature(caches: &[LayerCache<f64>]) -> u64 {
    let mut h = DefaultHasher::new();
    for c in caches {
        if let Some(z) = &c.pre_activation {
            for &v in z.data() {
                (v > 0.0).hash(&mut h);
            }
        }
    }
    h.finish()
}

const TENSOR_NAMES: [&str; 4] = ["kernels", "bias", "gamma", "beta"];

/// Checks input and parameter gradients of a layer stack against finite
/// differences of the scalar probe `L = sum(w * stack(x))`, with `w` drawn from `seed`.
pub fn check_stack(
    layers: &[ConvLayer<f64>],
    input: &Tensor4<f64>,
    mode: Mode,
    seed: u64,
    step: f64,
) -> Result<StackReport> {
    let (out, caches) = stack_forward(layers, input, mode)?;
    let mut rng = sample_stream(seed, 0);
    let weights = Tensor4::from_fn(out.shape(), |_| rng.random_range(-1.0..1.0));
    let (input_grad, grads) = stack_backward(layers, &caches, &weights, true)?;
    let input_grad = input_grad.expect("input gradient requested");

    let eval = |ls: &[ConvLayer<f64>], x: &Tensor4<f64>| -> (f64, u64) {
        let (y, c) = stack_forward(ls, x, mode).expect("shapes validated by the first pass");
        let v = y
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        (v, relu_signature(&c))
    };

    let mut report = StackReport {
        input: check_gradient_piecewise(
            |xs| {
                eval(
                    layers,
                    &Tensor4::from_vec(input.shape(), xs.to_vec()).expect("same shape"),
                )
            },
            input.data(),
            input_grad.data(),
            step,
        ),
        params: Vec::new(),
    };

    for (li, lg) in grads.iter().enumerate() {
        for (ti, analytic) in lg.slices().into_iter().enumerate() {
            let base: Vec<f64> = {
                let mut copy = layers[li].clone();
                copy.params_mut()[ti].to_vec()
            };
            let r = check_gradient_piecewise(
                |ps| {
                    let mut trial = layers.to_vec();
                    trial[li].params_mut()[ti].copy_from_slice(ps);
                    eval(&trial, input)
                },
                &base,
                analytic,
                step,
            );
            report.params.push((li, TENSOR_NAMES[ti], r));
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Component {
    Conv,
    Relu,
    BatchNormTrain,
    BatchNormInfer,
    Loss,
    /// Three conv/ReLU/BN layers end to end.
    Stack,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Conv,
        Component::Relu,
        Component::BatchNormTrain,
        Component::BatchNormInfer,
        Component::Loss,
        Component::Stack,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Conv => "conv",
            Component::Relu => "relu",
            Component::BatchNormTrain => "batchnorm-train",
            Component::BatchNormInfer => "batchnorm-infer",
            Component::Loss => "loss",
            Component::Stack => "stack",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteCase {
    pub component: Component,
    /// Input tensor shape.
    pub shape: [usize; 4],
    pub report: GradCheckReport,
}

fn random_tensor(rng: &mut SampleRng, shape: [usize; 4]) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn dot(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn relu_sig(z: &Tensor4<f64>) -> u64 {
    let mut h = DefaultHasher::new();
    for &v in z.data() {
        (v > 0.0).hash(&mut h);
    }
    h.finish()
}

fn check_conv(rng: &mut SampleRng) -> Result<([usize; 4], GradCheckReport)> {
    let f = [1, 3, 5][rng.random_range(0..3)];
    let shape = [
        rng.random_range(1..=3),
        rng.random_range(1..=3),
        rng.random_range(1..=6),
        rng.random_range(1..=6),
    ];
    let out_ch = rng.random_range(1..=3);
    let x = random_tensor(rng, shape);
    let k = random_tensor(rng, [out_ch, shape[1], f, f]);
    let b: Vec<f64> = (0..out_ch).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = random_tensor(rng, [shape[0], out_ch, shape[2], shape[3]]);
    let g = conv2d_backward(&w, &x, &k, true)?;
    let loss = |x: &Tensor4<f64>, k: &Tensor4<f64>, b: &[f64]| {
        dot(&conv2d_forward(x, k, b).expect("valid shapes"), &w)
    };
    let mut r = check_gradient(
        |v| {
            loss(
                &Tensor4::from_vec(shape, v.to_vec()).expect("shape"),
                &k,
                &b,
            )
        },
        x.data(),
        g.input.as_ref().expect("requested").data(),
        DEFAULT_STEP,
    );
    r.merge(&check_gradient(
        |v| {
            loss(
                &x,
                &Tensor4::from_vec(k.shape(), v.to_vec()).expect("shape"),
                &b,
            )
        },
        k.data(),
        g.kernels.data(),
        DEFAULT_STEP,
    ));
    r.merge(&check_gradient(
        |v| loss(&x, &k, v),
        &b,
        &g.bias,
        DEFAULT_STEP,
    ));
    Ok((shape, r))
}

fn check_relu(rng: &mut SampleRng) -> Result<([usize; 4], GradCheckReport)> {
    let shape = [
        rng.random_range(1..=3),
        rng.random_range(1..=4),
        rng.random_range(1..=5),
        rng.random_range(1..=5),
    ];
    let x = random_tensor(rng, shape);
    let w = random_tensor(rng, shape);
    let g = relu_backward(&w, &x)?;
    let r = check_gradient_piecewise(
        |v| {
            let t = Tensor4::from_vec(shape, v.to_vec()).expect("shape");
            (dot(&relu(&t), &w), relu_sig(&t))
        },
        x.data(),
        g.data(),
        DEFAULT_STEP,
    );
    Ok((shape, r))
}

fn check_batchnorm(rng: &mut SampleRng, mode: Mode) -> Result<([usize; 4], GradCheckReport)> {
    let shape = [
        rng.random_range(2..=4),
        rng.random_range(1..=3),
        rng.random_range(1..=4),
        rng.random_range(1..=4),
    ];
    let c = shape[1];
    let x = random_tensor(rng, shape);
    let mut bn = BatchNorm::<f64>::new(c);
    for ch in 0..c {
        bn.gamma[ch] = rng.random_range(0.5..1.5);
        bn.beta[ch] = rng.random_range(-0.5..0.5);
        bn.running_mean[ch] = rng.random_range(-0.5..0.5);
        bn.running_var[ch] = rng.random_range(0.5..2.0);
    }
    let w = random_tensor(rng, shape);
    let (_, cache) = batchnorm_forward(&x, &bn, mode)?;
    let g = batchnorm_backward(&w, &cache, &bn)?;
    let loss = |x: &Tensor4<f64>, bn: &BatchNorm<f64>| {
        dot(&batchnorm_forward(x, bn, mode).expect("valid").0, &w)
    };
    let mut r = check_gradient(
        |v| loss(&Tensor4::from_vec(shape, v.to_vec()).expect("shape"), &bn),
        x.data(),
        g.input.data(),
        DEFAULT_STEP,
    );
    let with = |gamma: Option<&[f64]>, beta: Option<&[f64]>| {
        let mut b = bn.clone();
        if let Some(v) = gamma {
            b.gamma = v.to_vec();
        }
        if let Some(v) = beta {
            b.beta = v.to_vec();
        }
        b
    };
    r.merge(&check_gradient(
        |v| loss(&x, &with(Some(v), None)),
        &bn.gamma,
        &g.gamma,
        DEFAULT_STEP,
    ));
    r.merge(&check_gradient(
        |v| loss(&x, &with(None, Some(v))),
        &bn.beta,
        &g.beta,
        DEFAULT_STEP,
    ));
    Ok((shape, r))
}

fn check_loss(rng: &mut SampleRng) -> Result<([usize; 4], GradCheckReport)> {
    let shape = [
        rng.random_range(1..=4),
        rng.random_range(1..=3),
        rng.random_range(1..=5),
        rng.random_range(1..=5),
    ];
    let pred = random_tensor(rng, shape);
    let target = random_tensor(rng, shape);
    let (_, g) = mse_loss(&pred, &target)?;
    let r = check_gradient(
        |v| {
            mse_loss(
                &Tensor4::from_vec(shape, v.to_vec()).expect("shape"),
                &target,
            )
            .expect("same shape")
            .0
        },
        pred.data(),
        g.data(),
        DEFAULT_STEP,
    );
    Ok((shape, r))
}

fn check_three_layers(rng: &mut SampleRng, seed: u64) -> Result<([usize; 4], GradCheckReport)> {
    let f = [1, 3][rng.random_range(0..2)];
    let width = rng.random_range(1..=3);
    let io = rng.random_range(1..=2);
    let shape = [
        rng.random_range(2..=3),
        io,
        rng.random_range(2..=4),
        rng.random_range(2..=4),
    ];
    let mut layers = vec![
        ConvLayer::<f64>::zeros(io, width, f, true, true)?,
        ConvLayer::zeros(width, width, f, true, true)?,
        ConvLayer::zeros(width, io, f, false, false)?,
    ];
    for l in &mut layers {
        l.init_glorot(rng);
        for b in &mut l.bias {
            *b = rng.random_range(-0.1..0.1);
        }
    }
    let x = random_tensor(rng, shape);
    let r = check_stack(&layers, &x, Mode::Train, seed, DEFAULT_STEP)?.overall();
    Ok((shape, r))
}

/// Randomized gradient checks: `cases` random shapes for every [`Component`].
pub fn gradient_suite(cases: usize, seed: u64) -> Result<Vec<SuiteCase>> {
    let mut out = Vec::with_capacity(cases * Component::ALL.len());
    for component in Component::ALL {
        let stream_seed = derive_seed(seed, component.name());
        for i in 0..cases {
            let mut rng = sample_stream(stream_seed, i as u64);
            let (shape, report) = match component {
                Component::Conv => check_conv(&mut rng)?,
                Component::Relu => check_relu(&mut rng)?,
                Component::BatchNormTrain => check_batchnorm(&mut rng, Mode::Train)?,
                Component::BatchNormInfer => check_batchnorm(&mut rng, Mode::Infer)?,
                Component::Loss => check_loss(&mut rng)?,
                Component::Stack => {
                    check_three_layers(&mut rng, derive_seed(stream_seed, &i.to_string()))?
                }
            };
            out.push(SuiteCase {
                component,
                shape,
                report,
            });
        }
    }
    Ok(out)
}
