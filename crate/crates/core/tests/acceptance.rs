//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::collections::HashSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::dot;
use mapre::corpus::{BenchmarkParams, Instance, SyntheticBenchmark};
use mapre::gradsuite::{run_suite, TOLERANCE};
use mapre::objectives::{ccr_loss, crr_loss};
use mapre::sampling::{EpisodeSampler, EpisodeSpec, MatchingSampler};
use mapre::tensor::{Tape, Tensor, Var};
use mapre::training::{
    evaluate_fewshot, finetune_fewshot, finetune_supervised, pretrain, score_episode, Ablation, Checkpoint,
    FewShotConfig, MapreModel, ModelConfig, PretrainConfig, SupervisedConfig, Variant,
};
use rand::Rng as _;

const GRAD_SEEDS: u64 = 10;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const ORACLE_TOL: f64 = 1e-10;
const BLANK_RANGE: (f64, f64) = (0.68, 0.72);
const FEWSHOT_MIN: f64 = 0.85;
const BASELINE_GAP: f64 = 0.15;
const ORDER_SLACK: f64 = 0.01;
const ZEROSHOT_MIN: f64 = 0.40;
const LOW_RESOURCE_CHANCE_MULTIPLE: f64 = 3.0;
const FULL_DATA_MIN: f64 = 0.95;
const EVAL_EPISODES: usize = 500;
const EVAL_SEED: u64 = 99;
const INIT_SEED: u64 = 11;

struct Report {
    failed: usize,
}

impl Report {
    fn record(&mut self, id: usize, title: &str, pass: bool, detail: String) {
        if !pass {
            self.failed += 1;
        }
        println!("criterion {id} {}: {title}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn gradient_suite() -> (bool, String) {
    let seeds: Vec<u64> = (0..GRAD_SEEDS).collect();
    let start = Instant::now();
    let outcomes = run_suite(&seeds, TOLERANCE).expect("gradient suite runs");
    let elapsed = start.elapsed();
    let worst = outcomes.iter().map(|o| o.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<String> = outcomes.iter().filter(|o| !o.passed).map(|o| format!("{}@{}", o.name, o.seed)).collect();
    let pass = failed.is_empty() && worst < TOLERANCE && elapsed < GRAD_BUDGET;
    (pass, format!("{} checks, max rel error {worst:.2e}, {elapsed:.1?}, failures {failed:?}", outcomes.len()))
}

fn ccr_oracle(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> f64 {
    let n = a.len();
    let all: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let mut sum = 0.0;
    for i in 0..2 * n {
        let positive = if i < n { i + n } else { i - n };
        let denom: f64 = (0..2 * n).filter(|&k| k != i).map(|k| (dot(all[i], all[k]) / tau).exp()).sum();
        sum += -((dot(all[i], all[positive]) / tau).exp() / denom).ln();
    }
    sum / (2 * n) as f64
}

fn crr_oracle(w: &[Vec<f64>], v: &[Vec<f64>], rel: &[usize], tau: f64) -> f64 {
    let mut sum = 0.0;
    for (i, wi) in w.iter().enumerate() {
        let denom: f64 = v.iter().map(|vj| (dot(wi, vj) / tau).exp()).sum();
        sum += -((dot(wi, &v[rel[i]]) / tau).exp() / denom).ln();
    }
    sum / w.len() as f64
}

fn leaves(tape: &mut Tape, rows: &[Vec<f64>]) -> Vec<Var> {
    rows.iter().map(|r| tape.leaf(Tensor::vector(r.clone()))).collect()
}

fn ccr(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> f64 {
    let mut tape = Tape::new();
    let (va, vb) = (leaves(&mut tape, a), leaves(&mut tape, b));
    let l = ccr_loss(&mut tape, &va, &vb, tau).unwrap();
    tape.scalar(l)
}

fn crr(w: &[Vec<f64>], v: &[Vec<f64>], rel: &[usize], tau: f64) -> f64 {
    let mut tape = Tape::new();
    let (vw, vv) = (leaves(&mut tape, w), leaves(&mut tape, v));
    let l = crr_loss(&mut tape, &vw, &vv, rel, tau).unwrap();
    tape.scalar(l)
}

fn loss_oracles() -> (bool, String) {
    let mut rng = mapre::seeded_rng(31);
    let mut draw =
        |n: usize| -> Vec<Vec<f64>> { (0..n).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect() };
    let mut worst: f64 = 0.0;
    for n in 2..=8 {
        for k in 0..20 {
            let (a, b) = (draw(n), draw(n));
            worst = worst.max((ccr(&a, &b, 0.7) - ccr_oracle(&a, &b, 0.7)).abs());
            let (w, v) = (draw(n), draw(n.div_ceil(2)));
            let rel: Vec<usize> = (0..n).map(|i| (i + k) % v.len()).collect();
            worst = worst.max((crr(&w, &v, &rel, 0.7) - crr_oracle(&w, &v, &rel, 0.7)).abs());
        }
    }
    let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let hand_ccr = format!("{:.4}", ccr(&e, &e, 1.0));
    let hand_crr = format!("{:.4}", crr(&[vec![1.0, 0.0]], &e, &[0], 1.0));
    let pass = worst <= ORACLE_TOL && hand_ccr == "0.5514" && hand_crr == "0.3133";
    (pass, format!("max |loss - oracle| {worst:.1e}, CCR {hand_ccr}, CRR {hand_crr}"))
}

fn sampler_invariants(bench: &SyntheticBenchmark) -> (bool, String) {
    let matching = MatchingSampler::new(&bench.pretrain);
    let mut rng = mapre::seeded_rng(41);
    let mut distinct = 0;
    let (mut blanked, mut mentions) = (0usize, 0usize);
    for _ in 0..1000 {
        let batch = matching.sample(8, 0.7, &mut rng).unwrap();
        let rels: HashSet<&str> = batch.relations().collect();
        distinct += usize::from(rels.len() == batch.len());
        for p in &batch.pairs {
            for flag in [p.blank_a.0, p.blank_a.1, p.blank_b.0, p.blank_b.1] {
                if mentions < 10_000 {
                    blanked += usize::from(flag);
                    mentions += 1;
                }
            }
        }
    }
    let rate = blanked as f64 / mentions as f64;

    let splits = [
        (&bench.fewshot.train, &bench.fewshot.train_relations),
        (&bench.fewshot.validation, &bench.fewshot.validation_relations),
        (&bench.fewshot.test, &bench.fewshot.test_relations),
    ];
    let mut good_episodes = 0;
    for i in 0..1000 {
        let (instances, relations) = splits[i % 3];
        let sampler = EpisodeSampler::new(instances, &bench.catalog).unwrap();
        let ways = relations.len().min(5);
        let ep = sampler.sample(EpisodeSpec { ways, shots: 1, queries: 5 }, &mut rng).unwrap();
        let support: HashSet<&Instance> = ep.support.iter().flatten().collect();
        let queries: HashSet<&Instance> = ep.queries.iter().map(|q| &q.instance).collect();
        let contained = ep.relations.iter().all(|r| relations.contains(r))
            && ep.support.iter().flatten().chain(queries.iter().copied()).all(|x| relations.contains(&x.relation));
        let disjoint = support.is_disjoint(&queries) && queries.len() == ep.queries.len();
        good_episodes += usize::from(contained && disjoint);
    }
    let pass = distinct == 1000 && good_episodes == 1000 && (BLANK_RANGE.0..=BLANK_RANGE.1).contains(&rate);
    (pass, format!("{distinct}/1000 relation-distinct batches, {good_episodes}/1000 valid episodes, blank rate {rate:.4} over {mentions} mentions"))
}

struct Trained {
    bench: SyntheticBenchmark,
    held_out: Vec<Instance>,
    pretrained: MapreModel,
    config: ModelConfig,
}

fn held_out_accuracy(t: &Trained, model: &MapreModel, shots: usize, coef: (f64, f64)) -> f64 {
    let spec = EpisodeSpec { ways: 5, shots, queries: 5 };
    evaluate_fewshot(model, &t.bench.vocab, &t.bench.catalog, &t.held_out, spec, coef, EVAL_EPISODES, EVAL_SEED)
        .unwrap()
        .accuracy
}

fn finetuned(t: &Trained, start: &MapreModel, ablation: Ablation) -> MapreModel {
    let mut m = start.clone();
    let config = FewShotConfig { ablation, ..Default::default() };
    finetune_fewshot(&mut m, &t.bench.vocab, &t.bench.catalog, &t.bench.fewshot.train, &config).unwrap();
    m
}

fn learnability(t: &Trained, both: &MapreModel) -> (bool, String) {
    let acc = held_out_accuracy(t, both, 1, both.coefficients());
    let before = held_out_accuracy(t, &t.pretrained, 1, t.pretrained.coefficients());
    let random = MapreModel::new(t.config.clone(), INIT_SEED).unwrap();
    let random_acc = held_out_accuracy(t, &random, 1, random.coefficients());
    let scratch = finetuned(t, &random, Ablation::Both);
    let scratch_acc = held_out_accuracy(t, &scratch, 1, scratch.coefficients());
    let pass = acc >= FEWSHOT_MIN && acc - random_acc >= BASELINE_GAP;
    (
        pass,
        format!(
            "held-out 5-way 1-shot {acc:.3} (need >= {FEWSHOT_MIN}, {before:.3} before fine-tuning); untrained random init {random_acc:.3} (gap {:.3}, need >= {BASELINE_GAP}); random init fine-tuned without pretraining {scratch_acc:.3} (gap {:.3})",
            acc - random_acc,
            acc - scratch_acc
        ),
    )
}

fn ablation_order(t: &Trained, both: &MapreModel) -> (bool, String) {
    let acc_both = held_out_accuracy(t, both, 1, both.coefficients());
    let agnostic = finetuned(t, &t.pretrained, Ablation::LabelAgnostic);
    let acc_agnostic = held_out_accuracy(t, &agnostic, 1, agnostic.coefficients());
    let aware = finetuned(t, &t.pretrained, Ablation::LabelAware);
    let acc_aware = held_out_accuracy(t, &aware, 1, aware.coefficients());
    let pass = acc_both + ORDER_SLACK >= acc_agnostic
        && acc_agnostic + ORDER_SLACK >= acc_aware
        && acc_both + ORDER_SLACK >= acc_aware;
    (pass, format!("both {acc_both:.3}, label-agnostic {acc_agnostic:.3}, label-aware {acc_aware:.3}"))
}

fn zero_shot(t: &Trained) -> (bool, String) {
    let aware = finetuned(t, &t.pretrained, Ablation::LabelAware);
    let acc = held_out_accuracy(t, &aware, 0, (0.0, 1.0));
    (acc >= ZEROSHOT_MIN, format!("held-out 5-way zero-shot {acc:.3} (need >= {ZEROSHOT_MIN})"))
}

fn supervised(t: &Trained) -> (bool, String) {
    let catalog = t.bench.supervised_catalog().unwrap();
    let chance = 1.0 / catalog.len() as f64;
    let mut pass = true;
    let mut parts = Vec::new();
    for fraction in [0.01, 1.0] {
        for variant in [Variant::L, Variant::R] {
            let mut m = t.pretrained.clone();
            let config = SupervisedConfig { variant, train_fraction: fraction, ..Default::default() };
            let r = finetune_supervised(
                &mut m,
                &t.bench.vocab,
                &catalog,
                &t.bench.supervised_train,
                &t.bench.supervised_test,
                &config,
            )
            .unwrap();
            let need = if fraction < 1.0 { LOW_RESOURCE_CHANCE_MULTIPLE * chance } else { FULL_DATA_MIN };
            let ok = if fraction < 1.0 { r.accuracy > need } else { r.accuracy >= need };
            pass &= ok;
            parts.push(format!(
                "{variant:?}@{fraction} {:.3} on {} instances (need {need:.3})",
                r.accuracy, r.train_instances
            ));
        }
    }
    (pass, format!("{} relations, chance {chance:.3}; {}", catalog.len(), parts.join(", ")))
}

fn run_cli(dir: &Path, args: &[&str]) -> serde_json::Value {
    let out = Command::new(env!("CARGO_BIN_EXE_mapre"))
        .current_dir(dir)
        .env_remove("MAPRE_SEED")
        .args(args)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn reproducibility(t: &Trained, both: &MapreModel) -> (bool, String) {
    let bytes = Checkpoint::from_model(both, 300, serde_json::json!({})).to_bytes().unwrap();
    let restored = Checkpoint::from_bytes(&bytes).unwrap().to_model().unwrap();
    let bytes_again = Checkpoint::from_model(&restored, 300, serde_json::json!({})).to_bytes().unwrap();
    let sampler = EpisodeSampler::new(&t.held_out, &t.bench.catalog).unwrap();
    let mut rng = mapre::seeded_rng(5);
    let mut exact = true;
    for _ in 0..20 {
        let ep = sampler.sample(EpisodeSpec { ways: 5, shots: 1, queries: 5 }, &mut rng).unwrap();
        let (a, b) = (both.coefficients(), restored.coefficients());
        let x = score_episode(both, &t.bench.vocab, &t.bench.catalog, &ep, a.0, a.1).unwrap();
        let y = score_episode(&restored, &t.bench.vocab, &t.bench.catalog, &ep, b.0, b.1).unwrap();
        exact &= x.iter().flatten().zip(y.iter().flatten()).all(|(p, q)| p.to_bits() == q.to_bits());
    }

    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let common = ["-o", "run_root=\"runs\"", "-o", "paths.corpus=\"corpus\"", "-o", "seed=13"];
    run_cli(d, &[&["gen-corpus"][..], &common].concat());
    let stages: [&[&str]; 2] = [
        &["pretrain", "-o", "pretrain.steps=40", "-o", "pretrain.warmup_steps=5"],
        &["finetune-fewshot", "-o", "fewshot.iterations=20", "-o", "fewshot.warmup_steps=5", "-o", "eval.episodes=50"],
    ];
    let mut identical = true;
    for stage in stages {
        let args = [stage, &common].concat();
        let (a, b) = (run_cli(d, &args), run_cli(d, &args));
        let read = |s: &serde_json::Value| std::fs::read(d.join(s["metrics"].as_str().unwrap())).unwrap();
        identical &= read(&a) == read(&b);
    }
    let pass = bytes == bytes_again && exact && identical;
    (
        pass,
        format!(
            "checkpoint bytes identical {}, reloaded forward bit-exact {exact}, repeated CLI runs give identical metrics {identical}",
            bytes == bytes_again
        ),
    )
}

fn main() {
    let mut report = Report { failed: 0 };
    let (p, d) = gradient_suite();
    report.record(1, "gradient suite", p, d);
    let (p, d) = loss_oracles();
    report.record(2, "loss oracles", p, d);

    let bench = SyntheticBenchmark::generate(&BenchmarkParams::default()).unwrap();
    let (p, d) = sampler_invariants(&bench);
    report.record(3, "sampler invariants", p, d);

    let start = Instant::now();
    let config = ModelConfig::default();
    let mut pretrained = MapreModel::new(config.clone(), INIT_SEED).unwrap();
    pretrain(&mut pretrained, &bench.vocab, &bench.catalog, &bench.pretrain, &PretrainConfig::default()).unwrap();
    let mut held_out = bench.fewshot.validation.clone();
    held_out.extend(bench.fewshot.test.iter().cloned());
    let t = Trained { bench, held_out, pretrained, config };
    let both = finetuned(&t, &t.pretrained, Ablation::Both);
    println!("pretraining and fine-tuning took {:.1?}", start.elapsed());

    let (p, d) = learnability(&t, &both);
    report.record(4, "end-to-end learnability", p, d);
    let (p, d) = ablation_order(&t, &both);
    report.record(5, "ablation ordering", p, d);
    let (p, d) = zero_shot(&t);
    report.record(6, "zero-shot", p, d);
    let (p, d) = supervised(&t);
    report.record(7, "supervised low-resource", p, d);
    let (p, d) = reproducibility(&t, &both);
    report.record(8, "checkpoint round trip and determinism", p, d);

    println!("{} of 8 criteria passed", 8 - report.failed);
    if report.failed > 0 {
        std::process::exit(1);
    }
}
