//! Acceptance gate. Every test prints one `criterion N ... PASS|FAIL` line.
//! Run with `cargo test --test acceptance -- --nocapture` to see them.
//!
//! The tests share one lock so the timed criteria are not disturbed by each
//! other, and the trained model of the overfit criterion is reused by the
//! ablation criterion.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use blockdiff::ablation::ablate;
use blockdiff::assignment::{build_cost, optimal_assign, CostMatrix, LossWeights};
use blockdiff::block::{encode_blocks, pbes_decode, BlockIndices, ScaleSpec, Span, Triple, TripleSet};
use blockdiff::config::RunConfig;
use blockdiff::data::{synth_corpus, Corpus, SooRule, SynthSpec};
use blockdiff::diffusion::{ddim_step, forward_noise, gaussian, NoiseSchedule, SamplingPlan, ScheduleKind};
use blockdiff::eval::{evaluate, MatchMode};
use blockdiff::infer::{infer_corpus, InferConfig};
use blockdiff::network::{forward_graph, ModelConfig, ModelParams};
use blockdiff::probs::BlockProbabilities;
use blockdiff::tensor::{gradient_check, Graph, Rng, Tensor};
use blockdiff::train::{loss, loss_graph, train};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    println!("criterion {n} ({name}): {status} {detail}");
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn linear() -> NoiseSchedule {
    NoiseSchedule::build(1000, ScheduleKind::Linear, 1e-4, 0.02).unwrap()
}

fn random_span(len: usize, rng: &mut Rng) -> Span {
    let start = rng.below(len);
    let width = if rng.chance(0.4) { 1 } else { 1 + rng.below(4) };
    Span::new(start, (start + width - 1).min(len - 1))
}

/// Triple sets mixing fresh pairs, shared entities, repeated pairs and
/// self-overlapping triples.
fn random_triple_set(len: usize, k: usize, rng: &mut Rng) -> TripleSet {
    let mut set = TripleSet::new();
    let q = rng.int_inclusive(1, 8);
    let mut entities: Vec<Span> = Vec::new();
    for _ in 0..64 {
        if set.len() == q {
            break;
        }
        let t = match rng.below(4) {
            0 | 1 if !entities.is_empty() => {
                let a = entities[rng.below(entities.len())];
                let b = if rng.chance(0.5) && entities.len() > 1 { entities[rng.below(entities.len())] } else { random_span(len, rng) };
                if rng.chance(0.5) { Triple::new(a, rng.below(k), b) } else { Triple::new(b, rng.below(k), a) }
            }
            2 => {
                let outer = random_span(len, rng);
                let inner = Span::single(outer.start + rng.below(outer.len()));
                Triple::new(outer, rng.below(k), inner)
            }
            _ => Triple::new(random_span(len, rng), rng.below(k), random_span(len, rng)),
        };
        entities.push(t.head);
        entities.push(t.tail);
        set.insert(t);
    }
    set
}

#[test]
fn criterion_1_codec_round_trip() {
    let _g = serial();
    let mut rng = Rng::new(2024);
    let start = Instant::now();
    let mut failures = 0;
    let mut patterns = BTreeSet::new();
    for _ in 0..10_000 {
        let len = rng.int_inclusive(1, 64);
        let k = rng.int_inclusive(1, 216);
        let set = random_triple_set(len, k, &mut rng);
        patterns.extend(blockdiff::data::tag_triples(&set, SooRule::Overlap).patterns);
        let scale = ScaleSpec::new(1.0, len, k).unwrap();
        if pbes_decode(&encode_blocks(&set, &scale).unwrap(), &scale) != set {
            failures += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures == 0 && secs < 10.0 && patterns.len() == 4;
    verdict(1, "codec round trip", pass, &format!("failures={failures} patterns={} time={secs:.2}s", patterns.len()));
}

#[test]
fn criterion_2_forward_process_moments() {
    let _g = serial();
    let s = linear();
    let mut rng = Rng::new(99);
    let draws = 100_000;
    let mut worst_mean: f64 = 0.0;
    let mut worst_std: f64 = 0.0;
    for _ in 0..5 {
        // clean coordinates of a block in the scaled range, away from zero
        let z0 = Tensor::matrix(
            1,
            5,
            (0..5).map(|_| if rng.chance(0.5) { 1.0 } else { -1.0 } * (0.3 + 0.7 * rng.uniform())).collect(),
        );
        let t = rng.int_inclusive(1, 250);
        let ab = s.alpha_bar(t);
        let mut sum = [0.0; 5];
        let mut sq = 0.0;
        for _ in 0..draws {
            let z = forward_noise(&z0, t, &s, &mut rng).unwrap();
            for c in 0..5 {
                let v = z.data()[c];
                sum[c] += v;
                let dev = v - ab.sqrt() * z0.data()[c];
                sq += dev * dev;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|v| v / draws as f64).collect();
        let expected: Vec<f64> = z0.data().iter().map(|x| ab.sqrt() * x).collect();
        let err: f64 = mean.iter().zip(&expected).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = expected.iter().map(|b| b * b).sum::<f64>().sqrt();
        worst_mean = worst_mean.max(err / norm);
        let std = (sq / (5 * draws) as f64).sqrt();
        worst_std = worst_std.max((std / (1.0 - ab).sqrt() - 1.0).abs());
    }
    let pass = worst_mean < 0.01 && worst_std < 0.01;
    verdict(2, "forward-process moments", pass, &format!("mean_rel={worst_mean:.5} std_rel={worst_std:.5}"));
}

#[test]
fn criterion_3_ddim_oracle() {
    let _g = serial();
    let s = linear();
    let mut rng = Rng::new(3);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for sigma in [5, 10, 15] {
        for _ in 0..20 {
            let z0 = gaussian(30, 5, &mut rng);
            let plan = SamplingPlan::new(1000, sigma, 30, 4.0).unwrap();
            let mut z = gaussian(30, 5, &mut rng);
            for (tc, tp) in plan.steps() {
                z = ddim_step(&z, &z0, tc, tp, &s).unwrap();
            }
            for (a, b) in z.data().iter().zip(z0.data()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(3, "DDIM oracle", worst < 1e-9 && secs < 1.0, &format!("max_err={worst:.2e} time={secs:.3}s"));
}

fn exhaustive(cost: &CostMatrix) -> f64 {
    fn go(cost: &CostMatrix, j: usize, used: &mut Vec<bool>) -> f64 {
        if j == cost.targets() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for i in 0..cost.preds() {
            if !used[i] {
                used[i] = true;
                best = best.min(cost.get(i, j) + go(cost, j + 1, used));
                used[i] = false;
            }
        }
        best
    }
    go(cost, 0, &mut vec![false; cost.preds()])
}

#[test]
fn criterion_4_assignment_optimality() {
    let _g = serial();
    let mut rng = Rng::new(4);
    let start = Instant::now();
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.int_inclusive(1, 7);
        let m = rng.int_inclusive(1, n);
        let values: Vec<f64> = (0..n * m).map(|_| rng.uniform() * 10.0).collect();
        let cost = CostMatrix::from_fn(n, m, |i, j| values[i * m + j]);
        let xi = optimal_assign(&cost).unwrap();
        if (xi.core_cost(&cost) - exhaustive(&cost)).abs() > 1e-9 {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(4, "assignment optimality", mismatches == 0 && secs < 30.0, &format!("mismatches={mismatches} time={secs:.2}s"));
}

#[test]
fn criterion_5_gradient_gate() {
    let _g = serial();
    let mut cfg = ModelConfig::new(10, 16, 2).with_width(8);
    // unit-normal blocks must land on distinct positions, or the co-attention weights are uniform and its gradients vanish
    cfg.lambda = 1.0;
    let mut params = ModelParams::init(cfg, &mut Rng::new(55)).unwrap();
    let mut rng = Rng::new(56);
    let tokens = [2, 7, 4, 9, 3];
    let mut blocks: Vec<_> = (0..3).map(|_| blockdiff::block::Block::from_array(std::array::from_fn(|_| rng.normal()))).collect();
    blocks[0].level = -1.0;
    blocks[1].level = 1.0;
    let gt = vec![
        BlockIndices { up: 0, down: 1, left: 3, right: 3, level: 1 },
        BlockIndices { up: 2, down: 2, left: 4, right: 4, level: 0 },
    ];
    let w = LossWeights::default();
    let template = params.clone();
    let xi = {
        let mut g = Graph::new(template.store());
        let heads = forward_graph(&mut g, &template, &tokens, 5, &blocks, 250).unwrap();
        optimal_assign(&build_cost(&heads.read(&g), &gt, w).unwrap()).unwrap()
    };
    let errors = gradient_check(params.store_mut(), 1e-5, |g| {
        let heads = forward_graph(g, &template, &tokens, 5, &blocks, 250).unwrap();
        loss_graph(g, &heads, &gt, &xi, w)
    });
    let (worst_name, worst) = errors.iter().fold(("", 0.0f64), |acc, (n, e)| if *e > acc.1 { (n.as_str(), *e) } else { acc });
    verdict(
        5,
        "gradient gate",
        worst < 1e-4,
        &format!("groups={} worst={worst:.2e} ({worst_name})", errors.len()),
    );
}

struct Overfit {
    corpus: Corpus,
    sentences: Vec<Vec<usize>>,
    params: ModelParams,
    schedule: NoiseSchedule,
    infer: InferConfig,
    f1: f64,
    elapsed: Duration,
}

fn overfit() -> &'static Overfit {
    static RUN: OnceLock<Overfit> = OnceLock::new();
    RUN.get_or_init(|| {
        let spec = SynthSpec { sentences: 64, vocab: 50, relations: 4, max_len: 20, ..SynthSpec::default() };
        let corpus = synth_corpus(&spec, &mut Rng::new(7)).unwrap();
        let cfg = RunConfig::default();
        let start = Instant::now();
        let out = train(&corpus, cfg.model.clone(), &cfg.train, &cfg.echo(), None).unwrap();
        let sentences: Vec<Vec<usize>> = corpus.sentences.iter().map(|s| out.vocab.encode(&s.words)).collect();
        let schedule = cfg.train.schedule().unwrap();
        let (preds, _) = infer_corpus(&sentences, &out.params, &cfg.infer, &schedule).unwrap();
        let elapsed = start.elapsed();
        let pred_sets: Vec<TripleSet> = preds.into_iter().map(|p| p.triples).collect();
        let gold: Vec<TripleSet> = corpus.sentences.iter().map(|s| s.triples.clone()).collect();
        let f1 = evaluate(&pred_sets, &gold, MatchMode::Exact, SooRule::Overlap).unwrap().overall.f1;
        Overfit { corpus, sentences, params: out.params, schedule, infer: cfg.infer, f1, elapsed }
    })
}

#[test]
fn criterion_6_end_to_end_overfit() {
    let _g = serial();
    let run = overfit();
    let tags = blockdiff::data::pattern_split(&run.corpus, SooRule::Overlap);
    let kinds: BTreeSet<_> = tags.iter().flat_map(|t| t.patterns.iter().copied()).collect();
    let secs = run.elapsed.as_secs_f64();
    let pass = run.f1 >= 0.95 && secs < 900.0 && kinds.len() == 4;
    verdict(6, "end-to-end overfit", pass, &format!("f1={:.4} time={secs:.0}s patterns={}", run.f1, kinds.len()));
}

#[test]
fn criterion_7_ablation_trends() {
    let _g = serial();
    let run = overfit();
    let gold: Vec<TripleSet> = run.corpus.sentences.iter().map(|s| s.triples.clone()).collect();
    let max_q = run.corpus.max_triples();
    let d_grid = [2, 5, 10, 15, 20, 30];
    let sigma_grid = [5, 10, 15];
    let rows = ablate(&run.sentences, &gold, &run.params, &run.schedule, &run.infer, &d_grid, &sigma_grid, 3).unwrap();
    let at = |d: usize, s: usize| rows.iter().find(|r| r.blocks == d && r.sigma == s).unwrap();
    let f1: Vec<f64> = d_grid.iter().map(|&d| at(d, 10).f1).collect();
    let non_decreasing = d_grid.windows(2).zip(f1.windows(2)).filter(|(d, _)| d[0] >= 5).all(|(_, f)| f[1] >= f[0] - 0.02);
    let below_q = d_grid.iter().zip(&f1).filter(|(d, _)| **d < max_q).map(|(_, f)| *f).fold(f64::NEG_INFINITY, f64::max);
    let degraded = below_q < f1[f1.len() - 1] - 0.02;
    let increasing_d = sigma_grid
        .iter()
        .all(|&s| d_grid.windows(2).all(|d| at(d[1], s).ms_per_sentence > at(d[0], s).ms_per_sentence));
    let increasing_sigma = d_grid
        .iter()
        .all(|&d| sigma_grid.windows(2).all(|s| at(d, s[1]).ms_per_sentence > at(d, s[0]).ms_per_sentence));
    for r in &rows {
        println!("  D={:<3} sigma={:<3} f1={:.4} ms/sentence={:.2}", r.blocks, r.sigma, r.f1, r.ms_per_sentence);
    }
    verdict(
        7,
        "ablation trends",
        non_decreasing && degraded && increasing_d && increasing_sigma,
        &format!(
            "f1_nondecreasing={non_decreasing} degraded_below_q{max_q}={degraded} time_up_in_D={increasing_d} time_up_in_sigma={increasing_sigma}"
        ),
    );
}

#[test]
fn criterion_8_loss_sanity() {
    let _g = serial();
    let gt = vec![
        BlockIndices { up: 2, down: 3, left: 7, right: 7, level: 1 },
        BlockIndices { up: 0, down: 0, left: 4, right: 9, level: 3 },
    ];
    let mut one_hot = BlockProbabilities {
        edges: std::array::from_fn(|_| Tensor::zeros(&[2, 10])),
        level: Tensor::zeros(&[2, 4]),
    };
    for (i, t) in gt.iter().enumerate() {
        for (e, p) in t.edges().iter().enumerate() {
            one_hot.edges[e].set(i, *p, 1.0);
        }
        one_hot.level.set(i, t.level, 1.0);
    }
    let w = LossWeights::default();
    let xi = optimal_assign(&build_cost(&one_hot, &gt, w).unwrap()).unwrap();
    let zero = loss(&one_hot, &gt, &xi, w);

    let uniform = BlockProbabilities {
        edges: std::array::from_fn(|_| Tensor::full(&[1, 10], 0.1)),
        level: Tensor::full(&[1, 4], 0.25),
    };
    let single = blockdiff::assignment::AssignmentMap { xi: vec![0], core: vec![0] };
    let mut worst: f64 = 0.0;
    for (b1, b2, b3) in [(1.0, 1.0, 1.0), (0.5, 2.0, 3.0), (0.0, 1.0, 0.25)] {
        let w = LossWeights { head: b1, tail: b2, level: b3 };
        let closed = b1 * 2.0 * 10f64.ln() + b2 * 2.0 * 10f64.ln() + b3 * 4f64.ln();
        worst = worst.max((loss(&uniform, &gt[..1], &single, w) - closed).abs());
    }
    let unit = loss(&uniform, &gt[..1], &single, LossWeights::default());
    let pass = zero == 0.0 && worst < 1e-12 && (unit - (4.0 * 10f64.ln() + 4f64.ln())).abs() < 1e-12;
    verdict(8, "loss sanity", pass, &format!("one_hot={zero} uniform={unit:.12} max_dev={worst:.1e}"));
}

fn run_cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_blockdiff"))
        .args(args)
        .args(["--log", "warn"])
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "blockdiff {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn train_and_infer(dir: &Path, data: &str, config: &str) -> (Vec<u8>, Vec<u8>) {
    let out = dir.to_str().unwrap();
    run_cli(&["train", "--config", config, "--data", data, "--out", out]);
    let ckpt = dir.join("model.ckpt");
    let pred = dir.join("pred.jsonl");
    run_cli(&[
        "infer", "--checkpoint", ckpt.to_str().unwrap(), "--data", data, "--D", "8", "--sigma", "4", "--out",
        pred.to_str().unwrap(),
    ]);
    (std::fs::read(dir.join("metrics.jsonl")).unwrap(), std::fs::read(pred).unwrap())
}

#[test]
fn criterion_9_determinism() {
    let _g = serial();
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("corpus.jsonl");
    run_cli(&["synth", "--sentences", "6", "--K", "3", "--seed", "11", "--max-len", "12", "--out", data.to_str().unwrap()]);
    let config = root.path().join("run.cfg");
    std::fs::write(&config, "width = 8\nepochs = 3\nbatch_size = 2\nexpansion = 8\nseed = 5\n").unwrap();
    let (a_dir, b_dir) = (root.path().join("a"), root.path().join("b"));
    let (data, config) = (data.to_str().unwrap(), config.to_str().unwrap());
    let (ma, pa) = train_and_infer(&a_dir, data, config);
    let (mb, pb) = train_and_infer(&b_dir, data, config);
    let steps = ma.iter().filter(|&&b| b == b'\n').count();
    let pass = ma == mb && pa == pb && steps == 9 && !pa.is_empty();
    verdict(9, "determinism", pass, &format!("metrics_lines={steps} metrics_equal={} predictions_equal={}", ma == mb, pa == pb));
}
