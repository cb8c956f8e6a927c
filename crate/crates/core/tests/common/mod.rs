//! Shared oracles for the integration tests.

#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use xsit::encoder::{EncoderConfig, InputDims};
use xsit::model::{Model, ModelConfig};
use xsit::psp::PspConfig;
use xsit::tensor::{Graph, Tensor, Var};
use xsit::train::weighted_bce_graph;

pub const FD_STEP: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-6;
pub const ABS_FLOOR: f64 = 1e-8;

/// Analytic `a` against numeric `n`: relative error below [`REL_TOL`] with
/// an absolute floor of [`ABS_FLOOR`].
pub fn grad_close(a: f64, n: f64) -> bool {
    (a - n).abs() <= REL_TOL * a.abs().max(n.abs()) + ABS_FLOOR
}

pub fn normal(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Like [`normal`] but every entry at least `margin` away from zero.
pub fn away_from_zero(shape: &[usize], seed: u64, margin: f64) -> Tensor<f64> {
    let mut t = normal(shape, seed);
    for x in t.data_mut() {
        *x += margin.copysign(*x);
    }
    t
}

/// Fixed weights for reducing an op's output to a scalar, so every output
/// element contributes with a different coefficient.
fn readout(n: usize) -> Tensor<f64> {
    let data = (0..n).map(|i| ((i as f64) * 1.37 + 0.4).sin() + 0.1).collect();
    Tensor::new(vec![n], data).unwrap()
}

fn weighted_sum(g: &mut Graph<f64>, out: Var) -> Var {
    let n = g.value(out).numel();
    let flat = g.reshape(out, &[n]).unwrap();
    let w = g.constant(readout(n)).unwrap();
    let p = g.mul(flat, w).unwrap();
    g.sum(p).unwrap()
}

/// Worst-case comparison of one gradient check.
#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub failures: usize,
    /// Largest `|a − n| / (REL_TOL·max(|a|,|n|) + ABS_FLOOR)`; below 1 passes.
    pub worst_ratio: f64,
    pub worst: String,
}

impl GradCheck {
    fn new() -> Self {
        GradCheck {
            checked: 0,
            failures: 0,
            worst_ratio: 0.0,
            worst: String::new(),
        }
    }

    fn record(&mut self, what: impl FnOnce() -> String, a: f64, n: f64) {
        self.checked += 1;
        let ratio = (a - n).abs() / (REL_TOL * a.abs().max(n.abs()) + ABS_FLOOR);
        if !grad_close(a, n) {
            self.failures += 1;
        }
        if ratio > self.worst_ratio {
            self.worst_ratio = ratio;
            self.worst = format!("{}: analytic {a:e} numeric {n:e}", what());
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

/// Central differences of `Σ_k r_k·op(inputs)_k` against the tape gradient of
/// every input element.
pub fn check_op(
    inputs: &[Tensor<f64>],
    op: impl Fn(&mut Graph<f64>, &[Var]) -> xsit::Result<Var>,
) -> GradCheck {
    let eval = |inputs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
        let out = op(&mut g, &vars).unwrap();
        let l = weighted_sum(&mut g, out);
        g.value(l).data()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone()).unwrap()).collect();
    let out = op(&mut g, &vars).unwrap();
    let l = weighted_sum(&mut g, out);
    g.backward(l).unwrap();

    let mut report = GradCheck::new();
    let mut probe = inputs.to_vec();
    for (j, &v) in vars.iter().enumerate() {
        let analytic = g
            .grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[j].numel()]);
        for k in 0..inputs[j].numel() {
            let x = inputs[j].data()[k];
            probe[j].data_mut()[k] = x + FD_STEP;
            let up = eval(&probe);
            probe[j].data_mut()[k] = x - FD_STEP;
            let down = eval(&probe);
            probe[j].data_mut()[k] = x;
            report.record(|| format!("input {j}[{k}]"), analytic[k], (up - down) / (2.0 * FD_STEP));
        }
    }
    report
}

/// `d=2, p=0, H=1, D=8, L=1`: 20 patches of 15 vertices, 3 channels.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            latent_dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 4,
            dropout: 0.0,
        },
        psp: PspConfig::default(),
        dims: InputDims {
            seq_len: 20,
            patch_vertices: 15,
            channels: 3,
        },
    }
}

/// A tiny `f64` model with spread-out scaler logits, so no weight sits on
/// the survival threshold, and prototypes away from the rectifier's kink.
pub fn tiny_model() -> Model<f64> {
    let mut m = Model::init(tiny_model_config(), 11).unwrap().cast::<f64>();
    let n = m.n_patches();
    m.scaler.logits = Tensor::new(vec![n], (0..n).map(|i| (i as f64 * 0.9).sin()).collect()).unwrap();
    let shape = m.bank.xi.shape().to_vec();
    m.bank.xi = away_from_zero(&shape, 12, 0.05);
    m
}

const LABELS: [u8; 2] = [1, 0];
const CLASS_WEIGHTS: [f64; 2] = [0.7, 1.6];

fn model_loss(model: &Model<f64>, x: &Tensor<f64>) -> f64 {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false).unwrap();
    let xv = g.constant(x.clone()).unwrap();
    let f = model.forward(&mut g, &vars, xv, None).unwrap();
    let l = weighted_bce_graph(&mut g, f.probability, &LABELS, CLASS_WEIGHTS).unwrap();
    g.value(l).data()[0]
}

/// Every parameter of [`tiny_model`] under the weighted BCE of a batch of
/// two random samples.
pub fn check_tiny_model() -> GradCheck {
    let mut model = tiny_model();
    let d = model.config.dims;
    let x = normal(&[2, d.seq_len, d.patch_vertices, d.channels], 13);

    let mut g = Graph::new();
    let vars = model.bind(&mut g, true).unwrap();
    let xv = g.constant(x.clone()).unwrap();
    let f = model.forward(&mut g, &vars, xv, None).unwrap();
    let l = weighted_bce_graph(&mut g, f.probability, &LABELS, CLASS_WEIGHTS).unwrap();
    g.backward(l).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .all
        .iter()
        .zip(model.named())
        .map(|(&v, (_, t))| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let names: Vec<String> = model.named().into_iter().map(|(n, _)| n).collect();

    let mut report = GradCheck::new();
    for (j, name) in names.iter().enumerate() {
        for k in 0..analytic[j].len() {
            let x0 = model.named()[j].1.data()[k];
            model.named_mut()[j].1.data_mut()[k] = x0 + FD_STEP;
            let up = model_loss(&model, &x);
            model.named_mut()[j].1.data_mut()[k] = x0 - FD_STEP;
            let down = model_loss(&model, &x);
            model.named_mut()[j].1.data_mut()[k] = x0;
            report.record(|| format!("{name}[{k}]"), analytic[j][k], (up - down) / (2.0 * FD_STEP));
        }
    }
    report
}

/// Strictly positive entries in `[lo, lo + 1)`.
pub fn positive(shape: &[usize], seed: u64, lo: f64) -> Tensor<f64> {
    let mut t = normal(shape, seed);
    for x in t.data_mut() {
        *x = lo + (x.sin() + 1.0) / 2.0;
    }
    t
}

type Op = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> xsit::Result<Var>>;

/// One gradient check per differentiable graph operation, with inputs kept
/// away from kinks and singularities.
pub fn op_cases() -> Vec<(&'static str, Vec<Tensor<f64>>, Op)> {
    let n = normal;
    vec![
        ("matmul", vec![n(&[3, 4], 1), n(&[4, 2], 2)], Box::new(|g, v| g.matmul(v[0], v[1]))),
        (
            "matmul_batched",
            vec![n(&[2, 3, 4], 3), n(&[2, 4, 5], 4)],
            Box::new(|g, v| g.matmul(v[0], v[1])),
        ),
        (
            "matmul_shared_rhs",
            vec![n(&[2, 3, 4], 5), n(&[4, 2], 6)],
            Box::new(|g, v| g.matmul(v[0], v[1])),
        ),
        ("add", vec![n(&[2, 3], 7), n(&[2, 3], 8)], Box::new(|g, v| g.add(v[0], v[1]))),
        ("add_broadcast", vec![n(&[2, 3, 4], 9), n(&[4], 10)], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![n(&[2, 3], 11), n(&[3], 12)], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", vec![n(&[2, 3], 13), n(&[2, 3], 14)], Box::new(|g, v| g.mul(v[0], v[1]))),
        (
            "div",
            vec![n(&[2, 3], 15), positive(&[3], 16, 0.5)],
            Box::new(|g, v| g.div(v[0], v[1])),
        ),
        ("affine", vec![n(&[5], 17)], Box::new(|g, v| g.affine(v[0], -1.5, 0.25))),
        ("scale", vec![n(&[5], 18)], Box::new(|g, v| g.scale(v[0], 0.3))),
        ("relu", vec![away_from_zero(&[8], 19, 0.01)], Box::new(|g, v| g.relu(v[0]))),
        ("gelu", vec![n(&[8], 20)], Box::new(|g, v| g.gelu(v[0]))),
        ("ln", vec![positive(&[6], 21, 0.2)], Box::new(|g, v| g.ln(v[0]))),
        (
            "clamp",
            vec![Tensor::new(vec![5], vec![-2.0, -0.3, 0.1, 0.7, 2.5]).unwrap()],
            Box::new(|g, v| g.clamp(v[0], -1.0, 1.0)),
        ),
        ("sum", vec![n(&[2, 3], 22)], Box::new(|g, v| g.sum(v[0]))),
        ("mean", vec![n(&[2, 3], 23)], Box::new(|g, v| g.mean(v[0]))),
        ("sum_axis", vec![n(&[2, 3, 4], 24)], Box::new(|g, v| g.sum_axis(v[0], 1))),
        ("reshape", vec![n(&[2, 6], 25)], Box::new(|g, v| g.reshape(v[0], &[3, 4]))),
        ("permute", vec![n(&[2, 3, 4], 26)], Box::new(|g, v| g.permute(v[0], &[2, 0, 1]))),
        ("transpose", vec![n(&[2, 3, 4], 27)], Box::new(|g, v| g.transpose(v[0], 1, 2))),
        (
            "concat",
            vec![n(&[2, 3], 28), n(&[2, 2], 29)],
            Box::new(|g, v| g.concat(&[v[0], v[1]], 1)),
        ),
        ("slice", vec![n(&[4, 3], 30)], Box::new(|g, v| g.slice(v[0], 0, 1, 2))),
        ("softmax_last", vec![n(&[3, 5], 31)], Box::new(|g, v| g.softmax(v[0], 1))),
        ("softmax_first", vec![n(&[4, 2], 32)], Box::new(|g, v| g.softmax(v[0], 0))),
        (
            "layernorm",
            vec![n(&[3, 6], 33), n(&[6], 34), n(&[6], 35)],
            Box::new(|g, v| g.layernorm(v[0], v[1], v[2], 1)),
        ),
        (
            "cosine_shared",
            vec![n(&[2, 3, 5], 36), n(&[3, 5], 37)],
            Box::new(|g, v| g.cosine(v[0], v[1], 1e-8)),
        ),
        (
            "cosine_paired",
            vec![n(&[3, 5], 38), n(&[3, 5], 39)],
            Box::new(|g, v| g.cosine(v[0], v[1], 1e-8)),
        ),
        (
            "rectified_cosine",
            vec![away_from_zero(&[3, 5], 40, 0.01), away_from_zero(&[3, 5], 41, 0.01)],
            Box::new(|g, v| {
                let (a, b) = (g.relu(v[0])?, g.relu(v[1])?);
                g.cosine(a, b, 1e-8)
            }),
        ),
    ]
}

/// A dataset small enough to train on in a second: 20 patches of 15 vertices.
pub fn tiny_synth_spec(seed: u64) -> xsit::synth::SynthSpec {
    xsit::synth::SynthSpec {
        mesh_order: 2,
        patch_order: 0,
        lesion_patches: vec![0, 7],
        train: 40,
        val: 16,
        test: 16,
        seed,
        ..Default::default()
    }
}

pub fn tiny_run_config(seed: u64, epochs: usize) -> xsit::train::RunConfig {
    let mut c = xsit::train::RunConfig::default();
    let t = tiny_model_config();
    c.encoder = EncoderConfig { dropout: 0.1, ..t.encoder };
    c.train.epochs = epochs;
    c.train.batch_size = 8;
    c.train.projection_period = 1;
    c.train.learning_rate = 1e-3;
    c.train.seed = seed;
    c
}
