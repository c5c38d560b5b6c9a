//! End-to-end acceptance checks. Every check runs in sequence inside one test
//! so wall-clock budgets are not shared with other tests of this binary, and
//! each prints one `PASS`/`FAIL` line to stderr whatever the outcome.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use atlas_autodiff::gradcheck::{numeric_gradient, relative_error};
use atlas_autodiff::{Tape, Tensor, Var};
use atlas_replay::continual::{
    train_continual, train_stage_atlas, Checkpoint, Method, Model, StageResult, TrainConfig,
};
use atlas_replay::continual::{evaluate_task, Selection};
use atlas_replay::datagen::{generate, generate_corpus, Corpus, CorpusManifest, LabeledImage, TaskDataset};
use atlas_replay::grid::Grid;
use atlas_replay::metrics::{
    bwt, confusion_metrics, dice, dice_matrix, fwt, reid_probe, Attacker, ConfusionCounts, DiceMatrix,
};
use atlas_replay::prototypes::{
    build_atlas, build_prototype, constituent_weights, draw_constituents, fold_prototype, Alignment,
    PrototypeAtlas,
};
use atlas_replay::regnet::{loss_ce, loss_ncc, loss_reg, loss_smooth, RegNet, RegNetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

/// `ACCEPTANCE_ONLY=1,5` restricts the run to the listed criteria.
fn selected(n: usize) -> bool {
    match std::env::var("ACCEPTANCE_ONLY") {
        Ok(list) => list.split(',').any(|s| s.trim().parse() == Ok(n)),
        Err(_) => true,
    }
}

fn report(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    if !selected(n) {
        let _ = writeln!(std::io::stderr(), "criterion {n} SKIP [{name}] not selected");
        return true;
    }
    let start = Instant::now();
    let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &res {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    let _ = writeln!(std::io::stderr(), "\ncriterion {n} {tag} [{name}] {detail} ({secs:.1}s)");
    res.is_ok()
}

#[test]
fn acceptance_criteria() {
    let results = [
        report(1, "gradient suite", gradient_suite),
        report(2, "metric oracles", metric_oracles),
        report(3, "registration learns", registration_learns),
        report(4, "ce weight ordering", ce_weight_ordering),
        report(5, "continual ordering", continual_ordering),
        report(6, "degenerate equivalences", degeneracies),
        report(7, "storage and privacy", storage_and_privacy),
        report(8, "pipeline determinism", pipeline_determinism),
        report(9, "prototype arithmetic", prototype_arithmetic),
    ];
    let failed: Vec<usize> = (1..=9).filter(|i| !results[i - 1]).collect();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}

// ---- 1 ----

const H: f32 = 1e-3;
const TOL: f64 = 1e-3;
const SEEDS: [u64; 5] = [11, 12, 13, 14, 15];

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn binary(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(0..2) as f32).collect()).unwrap()
}

/// Relative error between the tape gradient and central differences of
/// `sum(op(inputs) * w)` with respect to `inputs[wrt]`, `w` a fixed random
/// projection (a ones projection when `op` is already scalar).
fn fd_error(inputs: &[Tensor], wrt: usize, seed: u64, op: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let build = |tape: &mut Tape, ins: &[Tensor], param: bool| -> (Var, Var) {
        let vars: Vec<Var> = ins
            .iter()
            .enumerate()
            .map(|(i, t)| if param && i == wrt { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        let out = op(tape, &vars);
        let shape = tape.value(out).shape().to_vec();
        if tape.value(out).data().len() == 1 {
            return (out, vars[wrt]);
        }
        let w = random(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xfd), &shape, -1.0, 1.0);
        let w = tape.constant(w);
        let prod = tape.mul(out, w).unwrap();
        (tape.sum(prod), vars[wrt])
    };
    let mut tape = Tape::new();
    let (l, x) = build(&mut tape, inputs, true);
    tape.backward(l).unwrap();
    let analytic = tape.grad(x).unwrap().clone();
    let numeric = numeric_gradient(&inputs[wrt], H, |probe| {
        let mut ins = inputs.to_vec();
        ins[wrt] = probe.clone();
        let mut tape = Tape::new();
        let (l, _) = build(&mut tape, &ins, false);
        tape.scalar(l).unwrap()
    });
    relative_error(&analytic, &numeric)
}

/// Flow values kept at least 0.1 px off integer offsets.
fn off_kinks(t: Tensor) -> Tensor {
    t.map(|v| {
        let frac = v - v.floor();
        if (0.1..=0.9).contains(&frac) { v } else { v + 0.3 }
    })
}

fn reg_net_error(seed: u64) -> f64 {
    let cfg = RegNetConfig {
        enc_channels: vec![3, 4],
        dec_channels: vec![4, 4, 3],
        flow_init_scale: 0.05,
        ncc_window: 5,
        leaky_slope: 1.0,
        ..RegNetConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ps = random(&mut rng, &[2, 1, 8, 8], 0.0, 1.0);
    let pm = random(&mut rng, &[2, 1, 8, 8], 0.1, 0.9);
    let s = random(&mut rng, &[2, 1, 8, 8], 0.0, 1.0);
    let m = binary(&mut rng, &[2, 1, 8, 8]);
    let value = |net: &RegNet| -> (f64, Vec<Tensor>) {
        let mut tape = Tape::new();
        let bound = net.unet.bind(&mut tape);
        let (a, b, c, d) = (
            tape.constant(ps.clone()),
            tape.constant(pm.clone()),
            tape.constant(s.clone()),
            tape.constant(m.clone()),
        );
        let terms = loss_reg(&mut tape, net, &bound, a, b, c, d, &cfg).unwrap();
        tape.backward(terms.total).unwrap();
        let grads = bound.vars.iter().map(|v| tape.grad(*v).unwrap().clone()).collect();
        (tape.scalar(terms.total).unwrap(), grads)
    };
    let cells = |net: &RegNet| -> Vec<i32> {
        net.flow(&ps, &s).unwrap().data().iter().map(|v| v.floor() as i32).collect()
    };
    // Redraw until no probe moves a sample point across a bilinear kink.
    'draw: for _ in 0..50 {
        let net = RegNet::new(cfg.clone(), rng.random()).unwrap();
        let base = cells(&net);
        let (_, analytic) = value(&net);
        let (mut a, mut n) = (Vec::new(), Vec::new());
        for k in 0..analytic.len() {
            let crossed = std::cell::Cell::new(false);
            let numeric = numeric_gradient(&net.unet.params()[k], H, |probe| {
                let mut probe_net = net.clone();
                probe_net.unet.params_mut()[k] = probe.clone();
                crossed.set(crossed.get() || cells(&probe_net) != base);
                value(&probe_net).0
            });
            if crossed.get() {
                continue 'draw;
            }
            a.extend_from_slice(analytic[k].data());
            n.extend_from_slice(numeric.data());
        }
        let flat = |v: Vec<f32>| Tensor::new(&[v.len()], v).unwrap();
        return relative_error(&flat(a), &flat(n));
    }
    f64::INFINITY
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut track = |name: &'static str, err: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(w) => w.1 = w.1.max(err),
        None => worst.push((name, err)),
    };
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv = [
            random(&mut rng, &[1, 2, 5, 5], -1.0, 1.0),
            random(&mut rng, &[3, 2, 3, 3], -1.0, 1.0),
            random(&mut rng, &[3], -1.0, 1.0),
        ];
        for stride in [1, 2] {
            let op = move |t: &mut Tape, v: &[Var]| t.conv2d(v[0], v[1], v[2], stride, 1).unwrap();
            for wrt in 0..3 {
                track("conv2d", fd_error(&conv, wrt, seed, &op));
            }
        }

        let image = random(&mut rng, &[1, 2, 6, 6], 0.0, 1.0);
        let flow = off_kinks(random(&mut rng, &[1, 2, 6, 6], -1.5, 1.5));
        let op = |t: &mut Tape, v: &[Var]| t.grid_sample(v[0], v[1]).unwrap();
        for wrt in 0..2 {
            track("grid_sample", fd_error(&[image.clone(), flow.clone()], wrt, seed, &op));
        }

        let a = random(&mut rng, &[2, 1, 11, 12], 0.0, 1.0);
        let b = random(&mut rng, &[2, 1, 11, 12], 0.0, 1.0);
        let op = |t: &mut Tape, v: &[Var]| loss_ncc(t, v[0], v[1], 9).unwrap();
        for wrt in 0..2 {
            track("loss_ncc", fd_error(&[a.clone(), b.clone()], wrt, seed, &op));
        }

        let p = random(&mut rng, &[2, 1, 6, 6], 0.05, 0.95);
        let target = binary(&mut rng, &[2, 1, 6, 6]);
        let op = |t: &mut Tape, v: &[Var]| loss_ce(t, v[0], v[1]).unwrap();
        track("loss_ce", fd_error(&[p, target], 0, seed, &op));

        let f = random(&mut rng, &[2, 2, 5, 6], -2.0, 2.0);
        let op = |t: &mut Tape, v: &[Var]| loss_smooth(t, v[0]).unwrap();
        track("loss_smooth", fd_error(&[f], 0, seed, &op));

        track("loss_reg", reg_net_error(seed));
    }
    let elapsed = start.elapsed();
    let summary = worst
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(worst.iter().all(|(_, e)| *e < TOL), format!("max rel err above 1e-3: {summary}"))?;
    ensure(elapsed < Duration::from_secs(120), format!("took {:.1}s", elapsed.as_secs_f64()))?;
    Ok(format!("{} seeds, max rel err: {summary}", SEEDS.len()))
}

// ---- 2 ----

fn brute_bwt(d: &[Vec<f64>]) -> f64 {
    let n = d.len();
    let mut total = 0.0;
    let mut count = 0.0;
    for p in 1..n {
        total += d[n - 1][p - 1] - d[p - 1][p - 1];
        count += 1.0;
    }
    total / count
}

fn brute_fwt(d: &[Vec<f64>], single: &[f64]) -> f64 {
    let n = d.len();
    let mut total = 0.0;
    let mut count = 0.0;
    for p in 2..=n {
        total += d[p - 2][p - 1] - single[p - 1];
        count += 1.0;
    }
    total / count
}

fn mask(bits: &[u8]) -> Grid {
    Grid::new(1, bits.len(), bits.iter().map(|&b| b as f32).collect()).unwrap()
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..=7);
        let d: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect();
        let single: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let m = DiceMatrix::new(d.clone(), Some(single.clone())).unwrap();
        worst = worst
            .max((bwt(&m).unwrap().mean - brute_bwt(&d)).abs())
            .max((fwt(&m).unwrap().mean - brute_fwt(&d, &single)).abs());
    }
    ensure(worst <= 1e-7, format!("bwt/fwt deviate by {worst:e}"))?;

    let d = vec![vec![0.8, 0.3, 0.2], vec![0.6, 0.7, 0.3], vec![0.5, 0.6, 0.7]];
    let b = bwt(&DiceMatrix::new(d, None).unwrap()).unwrap();
    let expect = [-0.3, -0.1];
    ensure(
        b.per_task.iter().zip(expect).all(|((_, v), e)| (v - e).abs() < 1e-12) && (b.mean + 0.2).abs() < 1e-12,
        format!("hand matrix bwt {b:?}"),
    )?;

    let fixtures = [
        (mask(&[1, 1, 0, 0]), mask(&[1, 0, 1, 0]), 0.5),
        (mask(&[1, 1, 1, 0]), mask(&[1, 1, 1, 0]), 1.0),
        (mask(&[1, 0, 0, 0]), mask(&[0, 1, 0, 0]), 0.0),
        (mask(&[0, 0, 0, 0]), mask(&[0, 0, 0, 0]), 1.0),
        (mask(&[1, 1, 1, 1]), mask(&[1, 0, 0, 0]), 0.4),
    ];
    for (i, (p, t, want)) in fixtures.iter().enumerate() {
        let got = dice(p, t).unwrap();
        ensure((got - want).abs() < 1e-12, format!("dice fixture {i}: {got} != {want}"))?;
    }

    let r = confusion_metrics(&ConfusionCounts { tp: 3, tn: 5, fp: 1, fn_: 1 });
    let mcc = r.mcc.unwrap();
    ensure((mcc - 0.5833).abs() < 5e-5, format!("mcc {mcc}"))?;
    ensure(
        r.sensitivity == Some(0.75) && r.precision == Some(0.75) && (r.specificity.unwrap() - 5.0 / 6.0).abs() < 1e-12,
        format!("rates {r:?}"),
    )?;
    Ok(format!("100 matrices, max dev {worst:.1e}; mcc(3,5,1,1) = {mcc:.4}"))
}

// ---- 3 and 4 ----

/// Desk settings shared by the learning checks.
fn desk(method: Method) -> TrainConfig {
    TrainConfig {
        method,
        epochs: 250,
        lr: 5e-4,
        seed: 3,
        ..TrainConfig::default()
    }
}

struct SingleDomain {
    task: TaskDataset,
    atlas: PrototypeAtlas,
}

fn single_domain() -> SingleDomain {
    let tasks = generate(&CorpusManifest::new(7, 64, &[("C", 30)])).unwrap();
    let atlas = build_atlas(&tasks, 1, 7, 7).unwrap();
    SingleDomain { task: tasks.into_iter().next().unwrap(), atlas }
}

/// Mean validation Dice of the unwarped prototype mask: identity flow.
fn zero_flow_dice(s: &SingleDomain) -> f64 {
    let proto = &s.atlas.prototypes()[0];
    let m = proto.mask.threshold(0.5);
    s.task.val.iter().map(|c| dice(&m, &c.mask).unwrap()).sum::<f64>() / s.task.val.len() as f64
}

fn trained_dice(s: &SingleDomain, ce_weight: f32) -> f64 {
    // The default weight is shared between the learning and ablation checks.
    static DEFAULT: std::sync::OnceLock<f64> = std::sync::OnceLock::new();
    if ce_weight == 2.0 {
        return *DEFAULT.get_or_init(|| train_single(s, ce_weight));
    }
    train_single(s, ce_weight)
}

fn train_single(s: &SingleDomain, ce_weight: f32) -> f64 {
    let mut cfg = desk(Method::AtlasReplay);
    cfg.net.ce_weight = ce_weight;
    let r = train_continual(std::slice::from_ref(&s.task), &[1], &cfg, Some(&s.atlas)).unwrap();
    evaluate_task(&r[0].checkpoint, &s.task, Some(&s.atlas), Selection::Tag).unwrap()
}

fn registration_learns() -> Outcome {
    let s = single_domain();
    let base = zero_flow_dice(&s);
    let start = Instant::now();
    let trained = trained_dice(&s, 2.0);
    let secs = start.elapsed().as_secs_f64();
    let gain = trained - base;
    let detail = format!(
        "domain C, {} train cases: zero-flow {base:.3} -> trained {trained:.3} (gain {gain:+.3}, {secs:.0}s training)",
        s.task.train.len()
    );
    ensure(gain >= 0.15, detail.clone())?;
    ensure(secs < 600.0, detail.clone())?;
    Ok(detail)
}

fn ce_weight_ordering() -> Outcome {
    let s = single_domain();
    let d: Vec<f64> = [0.0, 1.0, 2.0].iter().map(|&w| trained_dice(&s, w)).collect();
    let detail = format!("dice ce0 {:.3}, ce1 {:.3}, ce2 {:.3}", d[0], d[1], d[2]);
    ensure(d[2] >= d[1] && d[1] >= d[0] && d[2] - d[0] >= 0.05, detail.clone())?;
    Ok(detail)
}

// ---- 5 ----

fn final_mean(results: &[StageResult], tasks: &[TaskDataset], atlas: &PrototypeAtlas) -> f64 {
    let last = &results.last().unwrap().checkpoint;
    tasks
        .iter()
        .map(|t| evaluate_task(last, t, Some(atlas), Selection::Tag).unwrap())
        .sum::<f64>()
        / tasks.len() as f64
}

fn stream_bwt(results: &[StageResult], tasks: &[TaskDataset], atlas: &PrototypeAtlas) -> f64 {
    let cks: Vec<Checkpoint> = results.iter().map(|r| r.checkpoint.clone()).collect();
    let m = dice_matrix(&cks, None, tasks, Some(atlas), Selection::Tag).unwrap();
    bwt(&m).unwrap().mean
}

fn continual_ordering() -> Outcome {
    let start = Instant::now();
    let tasks = generate(&CorpusManifest::new(7, 64, &[("A", 30), ("B", 30), ("C", 30)])).unwrap();
    let atlas = build_atlas(&tasks, 3, 7, 7).unwrap();
    let order = [1, 2, 3];
    let run = |m: Method| train_continual(&tasks, &order, &desk(m), Some(&atlas)).unwrap();
    let (seq, reh, ar, joint) = (
        run(Method::Sequential),
        run(Method::Rehearsal),
        run(Method::AtlasReplay),
        run(Method::Joint),
    );
    let (b_seq, b_reh, b_ar) = (
        stream_bwt(&seq, &tasks, &atlas),
        stream_bwt(&reh, &tasks, &atlas),
        stream_bwt(&ar, &tasks, &atlas),
    );
    let (m_seq, m_reh, m_joint) = (
        final_mean(&seq, &tasks, &atlas),
        final_mean(&reh, &tasks, &atlas),
        final_mean(&joint, &tasks, &atlas),
    );
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "A,B,C: bwt seq {b_seq:+.3}, rehearsal {b_reh:+.3}, atlas {b_ar:+.3}; \
         final mean dice seq {m_seq:.3} <= rehearsal {m_reh:.3} <= joint {m_joint:.3}; {secs:.0}s"
    );
    ensure(b_seq <= -0.10, detail.clone())?;
    ensure(b_ar >= -0.05, detail.clone())?;
    ensure(m_seq <= m_reh && m_reh <= m_joint && b_seq <= b_reh, detail.clone())?;
    ensure(secs < 1800.0, detail.clone())?;
    Ok(detail)
}

// ---- 6 ----

fn tiny(method: Method) -> TrainConfig {
    TrainConfig {
        method,
        epochs: 2,
        batch: 2,
        seed: 9,
        lr: 1e-3,
        net: RegNetConfig {
            enc_channels: vec![4, 8],
            dec_channels: vec![8, 4, 4],
            ..RegNetConfig::desk()
        },
        ..TrainConfig::default()
    }
}

fn small_stream() -> (Vec<TaskDataset>, PrototypeAtlas) {
    let mut tasks = generate(&CorpusManifest::new(2, 48, &[("A", 10), ("B", 10), ("D", 10)])).unwrap();
    let atlas = build_atlas(&tasks, 3, 5, 1).unwrap();
    for t in &mut tasks {
        t.train.truncate(5);
        t.val.truncate(2);
    }
    (tasks, atlas)
}

fn param_bytes(r: &[StageResult]) -> Vec<Vec<u8>> {
    r.iter()
        .map(|s| {
            s.checkpoint
                .model
                .unet()
                .params()
                .iter()
                .flat_map(|p| p.data().iter().flat_map(|v| v.to_le_bytes()))
                .collect()
        })
        .collect()
}

fn degeneracies() -> Outcome {
    let (tasks, atlas) = small_stream();
    let order = [1, 2, 3];
    let seq = param_bytes(&train_continual(&tasks, &order, &tiny(Method::Sequential), None).unwrap());
    let ewc_cfg = TrainConfig { ewc_lambda: 0.0, ..tiny(Method::Ewc) };
    let rwalk_cfg = TrainConfig { rwalk_lambda: 0.0, ..tiny(Method::Rwalk) };
    let ewc = param_bytes(&train_continual(&tasks, &order, &ewc_cfg, None).unwrap());
    let rwalk = param_bytes(&train_continual(&tasks, &order, &rwalk_cfg, None).unwrap());
    ensure(seq == ewc, "ewc with lambda 0 differs from sequential")?;
    ensure(seq == rwalk, "rwalk with lambda 0 differs from sequential")?;

    let cfg = tiny(Method::AtlasReplay);
    let streamed = train_continual(&tasks, &[2], &cfg, Some(&atlas)).unwrap();
    let Model::Reg(mut net) = Model::init(&cfg).unwrap() else {
        return Err("atlas replay did not build a registration net".into());
    };
    let log = train_stage_atlas(&mut net, &tasks[1], &atlas, &cfg, 1).unwrap();
    ensure(streamed.len() == 1 && streamed[0].log == log, "one-stage log differs")?;
    ensure(streamed[0].checkpoint.model == Model::Reg(net), "one-stage weights differ")?;
    Ok("ewc/rwalk lambda 0 byte-identical over 3 stages; 1-stage stream equals stage training".into())
}

// ---- 7 ----

fn storage_and_privacy() -> Outcome {
    let m = CorpusManifest::new(6, 48, &[("A", 9), ("B", 9), ("D", 9)]);
    let dir = tempfile::tempdir().unwrap();
    generate_corpus(&m, dir.path()).unwrap();
    let corpus = Corpus::open(dir.path()).unwrap();
    let all = corpus.load_all().unwrap();
    let atlas = build_atlas(&all, 3, 5, 0).unwrap();
    corpus.clear_reads();
    let cfg = TrainConfig { epochs: 1, ..tiny(Method::AtlasReplay) };
    train_continual(&corpus, &[1, 2, 3], &cfg, Some(&atlas)).unwrap();
    let stages: Vec<usize> = corpus.reads().iter().map(|r| r.stage).collect();
    let back_reads = stages.windows(2).filter(|w| w[1] < w[0]).count();
    ensure(stages.len() == 27, format!("{} case reads, expected 27", stages.len()))?;
    ensure(back_reads == 0, format!("{back_reads} reads of an earlier stage"))?;

    let bytes = atlas.to_bytes().unwrap();
    for case in all.iter().flat_map(|t| t.train.iter().chain(&t.val)) {
        let raw: Vec<u8> = case.scan.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let row = &raw[..case.scan.width() * 4];
        ensure(
            !bytes.windows(row.len()).any(|w| w == row),
            format!("atlas holds a raw scan row of {}", case.case_id),
        )?;
    }

    let trials = 2000;
    let probe = reid_probe(&atlas, &all, trials, 17, Attacker::Random).unwrap();
    let picks = probe.total.tp + probe.total.fp;
    let precision = probe.total.tp as f64 / picks as f64;
    let detail = format!(
        "27 stage-ordered reads, no raw rows in {} atlas bytes, random precision {:.2}% over {picks} trials",
        bytes.len(),
        100.0 * precision
    );
    ensure(picks >= 1000, detail.clone())?;
    ensure((precision - 1.0 / 3.0).abs() <= 0.03, detail.clone())?;
    Ok(detail)
}

// ---- 8 ----

fn cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_atlas-replay")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn pipeline(root: &Path) -> (Vec<u8>, Vec<u8>) {
    let p = |n: &str| root.join(n).to_str().unwrap().to_string();
    std::fs::write(root.join("manifest.txt"), "seed=21\ngrid=48\nsplit=0.8\ntask=A,9,1\ntask=C,9,2\n").unwrap();
    std::fs::write(root.join("config.txt"), "enc_channels=4,8\ndec_channels=8,4,4\nbatch=4\nlr=0.001\n").unwrap();
    cli(&["gen-data", "--manifest", &p("manifest.txt"), "--out", &p("corpus")]);
    cli(&["build-atlas", "--corpus", &p("corpus"), "--r", "5", "--k", "2", "--seed", "21", "--out", &p("atlas.bin")]);
    for method in ["atlas-replay", "sequential", "ewc"] {
        cli(&[
            "train", "--method", method, "--corpus", &p("corpus"), "--atlas", &p("atlas.bin"), "--order", "1,2",
            "--epochs", "2", "--seed", "21", "--config", &p("config.txt"), "--single", "--out", &p("run"),
        ]);
    }
    cli(&["evaluate", "--runs", &p("run"), "--corpus", &p("corpus"), "--out", &p("report.csv")]);
    cli(&["probe-privacy", "--atlas", &p("atlas.bin"), "--corpus", &p("corpus"), "--seed", "21", "--out", &p("probe.csv")]);
    (std::fs::read(root.join("report.csv")).unwrap(), std::fs::read(root.join("probe.csv")).unwrap())
}

fn pipeline_determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline(a.path());
    let second = pipeline(b.path());
    ensure(first.0 == second.0, "report.csv differs between runs")?;
    ensure(first.1 == second.1, "probe.csv differs between runs")?;
    let rows = String::from_utf8_lossy(&first.0).lines().count() - 1;
    Ok(format!("report ({rows} rows) and probe csv byte-identical across two runs"))
}

// ---- 9 ----

fn prototype_arithmetic() -> Outcome {
    let tasks = generate(&CorpusManifest::new(9, 64, &[("A", 30), ("B", 30), ("C", 30), ("D", 30)])).unwrap();
    let mut worst = 0.0f64;
    for t in &tasks {
        for r in 1..=7 {
            let picks = draw_constituents(t, r, 5).unwrap();
            let cases: Vec<&LabeledImage> = picks.iter().map(|&i| &t.train[i]).collect();
            let w = constituent_weights(r);
            let p = fold_prototype(&t.tag, &cases, Alignment::Identity).unwrap();
            for (got, pick) in [(&p.scan, 0usize), (&p.mask, 1)] {
                for (k, &v) in got.data().iter().enumerate() {
                    let want: f64 = cases
                        .iter()
                        .zip(&w)
                        .map(|(c, wi)| wi * if pick == 0 { c.scan.data()[k] } else { c.mask.data()[k] } as f64)
                        .sum();
                    worst = worst.max((v as f64 - want).abs());
                }
            }
        }
        // The rigid route folds the same constituents in the same order.
        let built = build_prototype(t, 7, 5).unwrap();
        ensure(built.r == 7 && built.constituent_ids.len() == 7, "build_prototype kept the wrong count")?;
    }
    ensure(worst < 1e-4, format!("max deviation {worst:e}"))?;
    Ok(format!("r = 1..7 on 4 domains, max deviation {worst:.1e}"))
}
