//! Central-difference gradient checks for every tape primitive, the three
//! pretraining losses, and the episode loss through both encoders.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{BenchmarkParams, MlmTargets, SyntheticBenchmark};
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::objectives::{ccr_loss, crr_loss, mlm_loss};
use crate::sampling::{EpisodeSampler, EpisodeSpec};
use crate::tensor::{
    finite_difference_check, relative_error, GradCheckFailure, GradCheckReport, ParamId, Primitive, Tape, Tensor, Var,
};
use crate::training::{episode_loss, MapreModel, ModelConfig};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Result of one named check at one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub seed: u64,
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl CheckOutcome {
    fn from_report(name: &str, seed: u64, r: &GradCheckReport) -> Self {
        Self { name: name.to_string(), seed, checked: r.checked, max_rel_error: r.max_rel_error, passed: r.passed() }
    }
}

/// Names of the loss-level checks, in suite order.
pub const LOSS_CHECKS: [&str; 4] = ["ccr_loss", "crr_loss", "mlm_loss", "episode_loss"];

fn normal(rng: &mut crate::Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("shape matches data")
}

/// Contracts `x` with a fixed random weight so every output coordinate
/// influences the scalar differently.
fn project(tape: &mut Tape, x: Var, rng: &mut crate::Rng) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let w = tape.constant(normal(rng, &shape));
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

/// Checks one primitive on random inputs drawn from `seed`.
pub fn check_primitive(p: Primitive, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let mut rng = crate::seeded_rng(seed);
    let proj_seed: u64 = rng.random();
    let run = |inputs: Vec<Tensor>, f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>| {
        finite_difference_check(
            |t: &mut Tape, v: &[Var]| {
                let out = f(t, v)?;
                project(t, out, &mut crate::seeded_rng(proj_seed))
            },
            &inputs,
            STEP,
            tolerance,
        )
    };
    match p {
        Primitive::MatMul => {
            run(vec![normal(&mut rng, &[3, 4]), normal(&mut rng, &[4, 2])], &|t, v| t.matmul(v[0], v[1]))
        }
        Primitive::Add => run(vec![normal(&mut rng, &[3, 4]), normal(&mut rng, &[4])], &|t, v| t.add(v[0], v[1])),
        Primitive::Sub => run(vec![normal(&mut rng, &[3, 4]), normal(&mut rng, &[3, 4])], &|t, v| t.sub(v[0], v[1])),
        Primitive::Mul => run(vec![normal(&mut rng, &[3, 4]), normal(&mut rng, &[3, 4])], &|t, v| t.mul(v[0], v[1])),
        Primitive::Scale => run(vec![normal(&mut rng, &[3, 4])], &|t, v| t.scale(v[0], -1.7)),
        Primitive::Concat => {
            run(vec![normal(&mut rng, &[3, 2]), normal(&mut rng, &[3, 4])], &|t, v| t.concat(&[v[0], v[1]]))
        }
        Primitive::GatherRows => run(vec![normal(&mut rng, &[5, 3])], &|t, v| t.gather_rows(v[0], &[4, 0, 4, 2])),
        Primitive::Embedding => run(vec![normal(&mut rng, &[6, 3])], &|t, v| t.embedding(v[0], &[1, 5, 1, 0])),
        Primitive::MeanAxis => run(vec![normal(&mut rng, &[3, 4])], &|t, v| {
            let a = t.mean_axis(v[0], 0)?;
            let b = t.mean_axis(v[0], 1)?;
            let bt = t.transpose(b)?;
            t.concat(&[a, bt])
        }),
        Primitive::LayerNorm => {
            run(vec![normal(&mut rng, &[3, 5]), normal(&mut rng, &[5]), normal(&mut rng, &[5])], &|t, v| {
                t.layer_norm(v[0], v[1], v[2], 1e-5)
            })
        }
        Primitive::Gelu => run(vec![normal(&mut rng, &[3, 4])], &|t, v| t.gelu(v[0])),
        Primitive::Softmax => run(vec![normal(&mut rng, &[3, 4])], &|t, v| t.softmax(v[0])),
        Primitive::LogSoftmax => run(vec![normal(&mut rng, &[3, 4])], &|t, v| t.log_softmax(v[0])),
        Primitive::CrossEntropy => {
            let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
            run(vec![normal(&mut rng, &[4, 5])], &|t, v| t.cross_entropy(v[0], &targets))
        }
        Primitive::Dot => run(vec![normal(&mut rng, &[6]), normal(&mut rng, &[6])], &|t, v| t.dot(v[0], v[1])),
        Primitive::Transpose => run(vec![normal(&mut rng, &[3, 4])], &|t, v| t.transpose(v[0])),
    }
}

fn rows(rng: &mut crate::Rng, n: usize, d: usize) -> Vec<Tensor> {
    (0..n).map(|_| normal(rng, &[d])).collect()
}

/// Checks one of [`LOSS_CHECKS`] at `seed`.
pub fn check_loss(name: &str, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let mut rng = crate::seeded_rng(seed);
    match name {
        "ccr_loss" => {
            let n = 4;
            let params = rows(&mut rng, 2 * n, 6);
            finite_difference_check(|t, v| ccr_loss(t, &v[..n], &v[n..], 0.7), &params, STEP, tolerance)
        }
        "crr_loss" => {
            let (n, m) = (5, 3);
            let params = rows(&mut rng, n + m, 6);
            let relation_of: Vec<usize> = (0..n).map(|i| i % m).collect();
            finite_difference_check(|t, v| crr_loss(t, &v[..n], &v[n..], &relation_of, 0.7), &params, STEP, tolerance)
        }
        "mlm_loss" => {
            let (len, d, vocab) = (6, 4, 9);
            let targets = MlmTargets {
                positions: vec![1, 4, 1],
                original_ids: (0..3).map(|_| rng.random_range(0..vocab)).collect(),
            };
            let params = vec![normal(&mut rng, &[len, d]), normal(&mut rng, &[d, vocab]), normal(&mut rng, &[vocab])];
            finite_difference_check(|t, v| mlm_loss(t, v[0], &targets, v[1], v[2]), &params, STEP, tolerance)
        }
        "episode_loss" => check_episode_loss(seed, tolerance),
        other => Err(crate::Error::invalid(format!("unknown loss check `{other}`"))),
    }
}

/// Gradient check of `f` with respect to every model parameter it touches.
pub fn check_model<F>(model: &mut MapreModel, f: F, h: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&MapreModel, &mut Tape) -> Result<Var>,
{
    let eval = |model: &MapreModel| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(model, &mut tape)?;
        Ok(tape.scalar(out))
    };
    let mut tape = Tape::new();
    let out = f(model, &mut tape)?;
    let grads = tape.backward(out)?;
    let mut used: Vec<(ParamId, Vec<f64>)> = tape
        .param_vars()
        .map(|(id, var)| {
            let g = grads.get(var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; model.store.get(id).numel()]);
            (id, g)
        })
        .collect();
    used.sort_by_key(|(id, _)| *id);

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, failures: Vec::new() };
    for (id, analytic) in &used {
        for (c, &a) in analytic.iter().enumerate() {
            let orig = model.store.get(*id).data()[c];
            model.store.get_mut(*id).data_mut()[c] = orig + h;
            let plus = eval(model)?;
            model.store.get_mut(*id).data_mut()[c] = orig - h;
            let minus = eval(model)?;
            model.store.get_mut(*id).data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(a, numeric);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(err);
            if err >= tolerance || !err.is_finite() {
                report.failures.push(GradCheckFailure {
                    param: id.index(),
                    coord: c,
                    analytic: a,
                    numeric,
                    rel_error: err,
                });
            }
        }
    }
    Ok(report)
}

/// Episode cross-entropy through a tiny model, checked over all encoder
/// parameters and both coefficients.
fn check_episode_loss(seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let params = BenchmarkParams {
        pretrain_relations: 2,
        train_relations: 4,
        validation_relations: 1,
        test_relations: 1,
        entities_per_relation: 3,
        sentences_per_triple: 2,
        vocab_size: 48,
        seed,
        ..Default::default()
    };
    let bench = SyntheticBenchmark::generate(&params)?;
    let config = ModelConfig {
        encoder: EncoderConfig {
            num_layers: 1,
            model_dim: 4,
            num_heads: 2,
            feedforward_dim: 8,
            vocab_size: bench.vocab.len(),
            max_len: 16,
            dropout: 0.0,
        },
        ..Default::default()
    };
    let mut model = MapreModel::new(config, seed)?;
    let sampler = EpisodeSampler::new(&bench.fewshot.train, &bench.catalog)?;
    let episode = sampler.sample(EpisodeSpec { ways: 3, shots: 2, queries: 2 }, &mut crate::seeded_rng(seed))?;
    check_model(&mut model, |m, tape| episode_loss(m, tape, &bench.vocab, &bench.catalog, &episode), STEP, tolerance)
}

/// Every primitive and every loss at every seed.
pub fn run_suite(seeds: &[u64], tolerance: f64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for &seed in seeds {
        for p in Primitive::ALL {
            out.push(CheckOutcome::from_report(p.name(), seed, &check_primitive(p, seed, tolerance)?));
        }
        for name in LOSS_CHECKS {
            out.push(CheckOutcome::from_report(name, seed, &check_loss(name, seed, tolerance)?));
        }
    }
    Ok(out)
}
