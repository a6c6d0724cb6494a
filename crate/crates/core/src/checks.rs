//! Numerical self-checks run by `qta check`: FFT round trips against a naive
//! DFT, count-sketch unbiasedness, the FFT MCB path against the direct
//! outer-product sketch, and finite-difference gradient checks of every
//! differentiable operation and architecture.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::SourceInfo;
use crate::encoders::{lstm_on_tape, tokenize, LstmParams, Vocab};
use crate::error::{Error, Result};
use crate::fusion::{gate_on_tape, softplus_on_tape, QuestionTypeSet};
use crate::models::{build_model, Architecture, EncodedSample, GateGranularity, ModelDims, ModelSpec};
use crate::numerics::{fft1, ElementwiseOp, grad_check, ifft1, streams, ComplexVector, ParamStore, Rng, Tape, Tensor, Var};
use crate::par;
use crate::sketch::{count_sketch, mcb_fuse, mcb_on_tape, outer_sketch_direct, SketchParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Sketch,
    Fft,
    McbOracle,
    Grad,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Sketch, Suite::Fft, Suite::McbOracle, Suite::Grad];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Sketch => "sketch",
            Suite::Fft => "fft",
            Suite::McbOracle => "mcb-oracle",
            Suite::Grad => "grad",
        }
    }

    pub fn parse(s: &str) -> Option<Suite> {
        Suite::ALL.into_iter().find(|x| x.name() == s)
    }

    /// Trials used when none are requested.
    pub fn default_trials(self) -> usize {
        match self {
            Suite::Sketch => 1000,
            Suite::Fft => 4,
            Suite::McbOracle => 100,
            Suite::Grad => 1,
        }
    }
}

/// One measured quantity compared against its threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl Measurement {
    fn below(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Measurement {
            name: name.into(),
            value,
            threshold,
            passed: value < threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub suite: String,
    pub trials: usize,
    pub seed: u64,
    pub passed: bool,
    pub measurements: Vec<Measurement>,
}

pub const FFT_TOLERANCE: f64 = 1e-9;
pub const ORACLE_TOLERANCE: f64 = 1e-9;
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_EPS: f64 = 1e-5;

pub fn run_suite(suite: Suite, trials: Option<usize>, eps: Option<f64>, seed: u64) -> Result<CheckResult> {
    let trials = trials.unwrap_or(suite.default_trials());
    if trials == 0 {
        return Err(Error::Config("trials must be positive".into()));
    }
    let measurements = match suite {
        Suite::Sketch => sketch_suite(trials, seed)?,
        Suite::Fft => fft_suite(trials, seed)?,
        Suite::McbOracle => vec![mcb_oracle(trials, seed)?],
        Suite::Grad => grad_suite(eps.unwrap_or(DEFAULT_EPS), seed)?,
    };
    Ok(CheckResult {
        suite: suite.name().into(),
        trials,
        seed,
        passed: measurements.iter().all(|m| m.passed),
        measurements,
    })
}

fn random_vec(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()
}

/// Mean and standard error of `⟨cs(a), cs(v)⟩` over independent hash draws.
pub fn sketch_inner_product_stats(a: &[f64], v: &[f64], b: usize, draws: usize, seed: u64) -> Result<(f64, f64)> {
    let at = Tensor::vector(a);
    let vt = Tensor::vector(v);
    let root = Rng::new(seed);
    let samples = par::map_range(draws, |k| -> Result<f64> {
        let p = SketchParams::new(a.len(), b, root.split(streams::CHECK, k as u64).next_u64())?;
        count_sketch(&at, &p)?.dot(&count_sketch(&vt, &p)?)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok((mean, (var / n).sqrt()))
}

fn sketch_suite(draws: usize, seed: u64) -> Result<Vec<Measurement>> {
    let mut rng = Rng::new(seed).split(streams::CHECK, 1 << 32);
    let a = random_vec(64, &mut rng);
    let v = random_vec(64, &mut rng);
    let exact: f64 = a.iter().zip(&v).map(|(x, y)| x * y).sum();
    let (mean, se) = sketch_inner_product_stats(&a, &v, 32, draws, seed)?;
    let z = (mean - exact).abs() / se.max(f64::MIN_POSITIVE);

    let p = SketchParams::new(64, 32, seed)?;
    let (alpha, beta) = (0.7, -1.3);
    let mix: Vec<f64> = a.iter().zip(&v).map(|(x, y)| alpha * x + beta * y).collect();
    let lhs = count_sketch(&Tensor::vector(&mix), &p)?;
    let ca = count_sketch(&Tensor::vector(&a), &p)?;
    let cv = count_sketch(&Tensor::vector(&v), &p)?;
    let rhs = ca.scale(alpha).elementwise(&cv.scale(beta), ElementwiseOp::Add)?;
    Ok(vec![
        Measurement {
            name: format!("unbiasedness z-score (mean {mean:.6}, exact {exact:.6}, se {se:.6})"),
            value: z,
            threshold: 3.0,
            passed: z <= 3.0,
        },
        Measurement::below("linearity max error", lhs.max_abs_diff(&rhs), 1e-12),
    ])
}

fn naive_dft(re: &[f64], im: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = re.len();
    let mut out_re = vec![0.0; n];
    let mut out_im = vec![0.0; n];
    for k in 0..n {
        for t in 0..n {
            let ang = -2.0 * std::f64::consts::PI * ((k * t) % n) as f64 / n as f64;
            let (s, c) = ang.sin_cos();
            out_re[k] += re[t] * c - im[t] * s;
            out_im[k] += re[t] * s + im[t] * c;
        }
    }
    (out_re, out_im)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn fft_suite(trials: usize, seed: u64) -> Result<Vec<Measurement>> {
    let errors = par::map_range(64, |i| -> Result<(f64, f64, f64)> {
        let n = i + 1;
        let mut rng = Rng::new(seed).split(streams::CHECK, n as u64);
        let (mut round, mut dft, mut lin) = (0.0f64, 0.0f64, 0.0f64);
        for _ in 0..trials {
            let re = random_vec(n, &mut rng);
            let im = random_vec(n, &mut rng);
            let x = ComplexVector::from_parts(&re, &im);
            let fx = fft1(&x)?;
            let back = ifft1(&fx)?;
            round = round.max(max_diff(&back.re(), &re)).max(max_diff(&back.im(), &im));
            let (dr, di) = naive_dft(&re, &im);
            dft = dft.max(max_diff(&fx.re(), &dr)).max(max_diff(&fx.im(), &di));
            let y = random_vec(n, &mut rng);
            let fy = fft1(&ComplexVector::from_real(&y))?;
            let sum: Vec<f64> = re.iter().zip(&y).map(|(a, b)| 2.0 * a - 3.0 * b).collect();
            let fs = fft1(&ComplexVector::from_parts(&sum, &im.iter().map(|v| 2.0 * v).collect::<Vec<_>>()))?;
            let expect_re: Vec<f64> = fx.re().iter().zip(fy.re()).map(|(a, b)| 2.0 * a - 3.0 * b).collect();
            let expect_im: Vec<f64> = fx.im().iter().zip(fy.im()).map(|(a, b)| 2.0 * a - 3.0 * b).collect();
            lin = lin.max(max_diff(&fs.re(), &expect_re)).max(max_diff(&fs.im(), &expect_im));
        }
        Ok((round, dft, lin))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let worst = |f: fn(&(f64, f64, f64)) -> f64| errors.iter().map(f).fold(0.0, f64::max);
    Ok(vec![
        Measurement::below("round trip max error (n = 1..64)", worst(|e| e.0), FFT_TOLERANCE),
        Measurement::below("fft vs naive dft max error", worst(|e| e.1), FFT_TOLERANCE),
        Measurement::below("linearity max error", worst(|e| e.2), FFT_TOLERANCE),
    ])
}

/// Max abs difference between [`mcb_fuse`] and the direct outer-product
/// sketch over random instances with `n1, n2, b ≤ 16`.
pub fn mcb_oracle_error(trials: usize, seed: u64) -> Result<f64> {
    let root = Rng::new(seed);
    let errs = par::map_range(trials, |k| -> Result<f64> {
        let mut rng = root.split(streams::CHECK, (2 << 32) + k as u64);
        let n1 = 1 + rng.below(16);
        let n2 = 1 + rng.below(16);
        let b = 1 + rng.below(16);
        let (h, w) = (1 + rng.below(3), 1 + rng.below(3));
        let p_img = SketchParams::new(n1, b, rng.next_u64())?;
        let p_txt = SketchParams::new(n2, b, rng.next_u64())?;
        let image = Tensor::new(vec![n1, h, w], random_vec(n1 * h * w, &mut rng))?;
        let text = Tensor::vector(&random_vec(n2, &mut rng));
        let fused = mcb_fuse(&image, &text, &p_img, &p_txt)?;
        let mut worst = 0.0f64;
        for s in 0..h * w {
            let col: Vec<f64> = (0..n1).map(|c| image.data()[c * h * w + s]).collect();
            let col = Tensor::vector(&col);
            let direct = outer_sketch_direct(&col, &text, &p_img, &p_txt)?;
            for j in 0..b {
                worst = worst.max((fused.data()[j * h * w + s] - direct.data()[j]).abs());
            }
        }
        Ok(worst)
    });
    errs.into_iter().try_fold(0.0f64, |m, e| Ok(m.max(e?)))
}

fn mcb_oracle(trials: usize, seed: u64) -> Result<Measurement> {
    Ok(Measurement::below(
        format!("mcb vs direct sketch max abs error ({trials} instances)"),
        mcb_oracle_error(trials, seed)?,
        ORACLE_TOLERANCE,
    ))
}

/// Gradient check of a tape computation with respect to its input tensors.
/// Non-scalar outputs are reduced with fixed random weights so every output
/// element contributes.
pub fn tape_grad_check<F>(inputs: &[Tensor], eps: f64, seed: u64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let start: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    let unflatten = |flat: &[f64]| -> Result<Vec<Tensor>> {
        let mut off = 0;
        shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let t = Tensor::new(s.clone(), flat[off..off + n].to_vec());
                off += n;
                t
            })
            .collect()
    };
    grad_check(
        |flat| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = unflatten(flat)?.into_iter().map(|t| tape.input(t)).collect();
            let out = build(&mut tape, &vars)?;
            let loss = weighted_sum(&mut tape, out, seed)?;
            tape.check_finite()?;
            let grads = tape.backward(loss)?;
            let mut g = Vec::with_capacity(flat.len());
            for (v, s) in vars.iter().zip(&shapes) {
                match grads.wrt(*v) {
                    Some(t) => g.extend_from_slice(t.data()),
                    None => g.extend(std::iter::repeat_n(0.0, s.iter().product())),
                }
            }
            Ok((tape.value(loss).item(), g))
        },
        &start,
        eps,
    )
}

/// Gradient check with respect to every tensor of a parameter store.
pub fn store_grad_check<F>(store: &ParamStore, eps: f64, seed: u64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut probe = store.clone();
    grad_check(
        |flat| {
            probe.assign_flat(flat)?;
            let mut tape = Tape::new();
            let out = build(&mut tape, &probe)?;
            let loss = weighted_sum(&mut tape, out, seed)?;
            tape.check_finite()?;
            let grads = tape.backward(loss)?;
            Ok((tape.value(loss).item(), probe.flatten_grads(&grads)))
        },
        &store.flatten(),
        eps,
    )
}

fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let value = tape.value(out);
    if value.len() == 1 {
        return Ok(out);
    }
    let mut rng = Rng::new(seed).split(streams::CHECK, 3 << 32);
    let w = Tensor::new(value.shape().to_vec(), random_vec(value.len(), &mut rng))?;
    let w = tape.constant(w);
    let prod = tape.mul(out, w);
    Ok(tape.sum(prod))
}

fn rand_tensor(shape: Vec<usize>, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, random_vec(n, rng)).unwrap()
}

/// Spec, vocabulary, type set, answers and encoded samples of a toy problem.
pub type ToyProblem = (ModelSpec, Vocab, QuestionTypeSet, Vec<String>, Vec<EncodedSample>);

/// Sources, vocabulary and samples of the toy problem used by the model
/// gradient checks: two types, three answers, two sources sharing a 2×1 grid.
pub fn toy_problem(arch: Architecture, seed: u64) -> Result<ToyProblem> {
    let mut spec = ModelSpec::new(arch);
    spec.seed = seed;
    spec.dims = ModelDims {
        word_dim: 4,
        lstm_hidden: 4,
        w2v_dim: 4,
        nmt_dim: 4,
        mlp_hidden: 5,
        sketch_width: 8,
        type_embedding: 3,
    };
    spec.sources = vec![
        SourceInfo {
            name: "a".into(),
            shape: [2, 2, 1],
        },
        SourceInfo {
            name: "b".into(),
            shape: [3, 2, 1],
        },
    ];
    let questions = ["what color is it", "is there a dog here", "what"];
    let vocab = Vocab::build(questions);
    let types = QuestionTypeSet::new(vec!["color".into(), "presence".into()])?;
    let answers = vec!["red".to_string(), "yes".into(), "no".into()];
    let mut rng = Rng::new(seed).split(streams::CHECK, 4 << 32);
    let samples = questions
        .iter()
        .enumerate()
        .map(|(i, q)| {
            Ok(EncodedSample {
                tokens: tokenize(q, &vocab)?,
                question_type: i % 2,
                answer: i % 3,
                visual: vec![random_vec(4, &mut rng), random_vec(6, &mut rng)],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((spec, vocab, types, answers, samples))
}

/// Full-model gradient check on the toy problem.
pub fn model_grad_error(arch: Architecture, granularity: GateGranularity, nonneg: bool, eps: f64, seed: u64) -> Result<f64> {
    let (mut spec, vocab, types, answers, samples) = toy_problem(arch, seed)?;
    spec.gate_granularity = granularity;
    spec.nonneg_gate = nonneg;
    let mut model = build_model(&spec, &vocab, &types, &answers)?;
    // Move the gate away from all-ones so its gradient is exercised generically.
    if let Some(id) = model.params().id("qta.w") {
        let mut rng = Rng::new(seed).split(streams::CHECK, 5 << 32);
        let w = model.params_mut().get_mut(id);
        for v in w.data_mut() {
            *v += rng.uniform_range(-0.5, 0.5);
        }
    }
    let batch: Vec<&EncodedSample> = samples.iter().collect();
    model.grad_check(&batch, 0.3, eps)
}

fn grad_suite(eps: f64, seed: u64) -> Result<Vec<Measurement>> {
    let mut rng = Rng::new(seed).split(streams::CHECK, 6 << 32);
    let mut out = Vec::new();
    let mut push = |name: &str, err: f64| out.push(Measurement::below(name, err, GRAD_TOLERANCE));

    let (a, b) = (rand_tensor(vec![3, 4], &mut rng), rand_tensor(vec![4, 2], &mut rng));
    push("matmul", tape_grad_check(&[a.clone(), b], eps, seed, |t, v| Ok(t.matmul(v[0], v[1])))?);
    let c = rand_tensor(vec![3, 4], &mut rng);
    push(
        "elementwise add/sub/mul",
        tape_grad_check(&[a.clone(), c.clone()], eps, seed, |t, v| {
            let s = t.add(v[0], v[1]);
            let d = t.sub(v[0], v[1]);
            Ok(t.mul(s, d))
        })?,
    );
    let bias = rand_tensor(vec![4], &mut rng);
    push(
        "add_row, scale",
        tape_grad_check(&[a.clone(), bias], eps, seed, |t, v| {
            let y = t.add_row(v[0], v[1]);
            Ok(t.scale(y, -1.5))
        })?,
    );
    push("relu", tape_grad_check(std::slice::from_ref(&a), eps, seed, |t, v| Ok(t.relu(v[0])))?);
    push("sigmoid", tape_grad_check(std::slice::from_ref(&a), eps, seed, |t, v| Ok(t.sigmoid(v[0])))?);
    push("tanh", tape_grad_check(std::slice::from_ref(&a), eps, seed, |t, v| Ok(t.tanh(v[0])))?);
    push(
        "concat, slice",
        tape_grad_check(&[a.clone(), c.clone()], eps, seed, |t, v| {
            let cat = t.concat(&[v[0], v[1]]);
            Ok(t.slice(cat, 2, 7))
        })?,
    );
    let table = rand_tensor(vec![5, 3], &mut rng);
    push(
        "gather, sum_rows",
        tape_grad_check(&[table], eps, seed, |t, v| {
            let g = t.gather(v[0], &[4, 0, 4]);
            let s = t.sum_rows(v[0], &[vec![1, 2, 2], vec![], vec![3]]);
            Ok(t.add(g, s))
        })?,
    );
    push(
        "softmax cross-entropy",
        tape_grad_check(std::slice::from_ref(&a), eps, seed, |t, v| Ok(t.softmax_xent(v[0], &[0, 3, 1])))?,
    );
    push("softplus", tape_grad_check(std::slice::from_ref(&a), eps, seed, |t, v| Ok(softplus_on_tape(t, v[0])))?);

    let (x, w1, b1, w2, b2) = (
        rand_tensor(vec![3, 6], &mut rng),
        rand_tensor(vec![6, 5], &mut rng),
        rand_tensor(vec![5], &mut rng),
        rand_tensor(vec![5, 4], &mut rng),
        rand_tensor(vec![4], &mut rng),
    );
    push(
        "mlp head",
        tape_grad_check(&[x, w1, b1, w2, b2], eps, seed, |t, v| {
            let h = t.affine(v[0], v[1], v[2]);
            let h = t.relu(h);
            let logits = t.affine(h, v[3], v[4]);
            Ok(t.softmax_xent(logits, &[1, 0, 3]))
        })?,
    );

    let lstm = LstmParams::init(3, 8, &mut rng);
    let mut store = ParamStore::new();
    let emb = store.insert("embedding", rand_tensor(vec![6, 3], &mut rng));
    let handles = lstm.register(&mut store, "lstm");
    let seqs = vec![vec![1, 2, 3, 4, 5], vec![2], vec![5, 5, 1]];
    push(
        "2-layer lstm (len <= 5, H = 8)",
        store_grad_check(&store, eps, seed, |t, s| {
            let e = t.param(s, emb);
            lstm_on_tape(t, s, e, &seqs, &handles)
        })?,
    );

    let (x, w) = (rand_tensor(vec![3, 6], &mut rng), rand_tensor(vec![6, 2], &mut rng));
    push(
        "qta gate (elementwise)",
        tape_grad_check(&[x, w], eps, seed, |t, v| gate_on_tape(t, v[0], v[1], &[1, 0, 1], 1))?,
    );
    let (x, w) = (rand_tensor(vec![3, 6], &mut rng), rand_tensor(vec![3, 2], &mut rng));
    push(
        "qta gate (channel, spatial 2)",
        tape_grad_check(&[x, w], eps, seed, |t, v| gate_on_tape(t, v[0], v[1], &[0, 1, 1], 2))?,
    );
    let (x, e) = (rand_tensor(vec![3, 4], &mut rng), rand_tensor(vec![2, 3], &mut rng));
    push(
        "qt concat",
        tape_grad_check(&[x, e], eps, seed, |t, v| {
            let emb = t.gather(v[1], &[1, 1, 0]);
            Ok(t.concat(&[v[0], emb]))
        })?,
    );
    let p_img = Arc::new(SketchParams::new(3, 8, seed ^ 11)?);
    let p_txt = Arc::new(SketchParams::new(4, 8, seed ^ 12)?);
    let (img, txt) = (rand_tensor(vec![2, 6], &mut rng), rand_tensor(vec![2, 4], &mut rng));
    push(
        "mcb pooling (b = 8, spatial 2)",
        tape_grad_check(&[img, txt], eps, seed, |t, v| mcb_on_tape(t, v[0], v[1], &p_img, &p_txt, 2))?,
    );

    for arch in Architecture::ALL {
        push(&format!("model {}", arch.name()), model_grad_error(arch, GateGranularity::Element, false, eps, seed)?);
    }
    push(
        "model CATL-QTA (channel gate, non-negative)",
        model_grad_error(Architecture::CatLQta, GateGranularity::Channel, true, eps, seed)?,
    );
    Ok(out)
}
