//! Acceptance suite: every criterion runs at its stated tolerance and
//! prints one PASS/FAIL line. The process exits non-zero if any fails.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use kdssl::augment::{fit_normalizer, strong_augment};
use kdssl::data::{mask_labels, payload_matrix, stratified_split, Dataset, SplitSpec};
use kdssl::ensemble::{ensemble_logits, member_seed, soft_targets};
use kdssl::experiment::{run_single, ExperimentConfig, RunMode, RunResult, SweepPoint, TrainingTrace};
use kdssl::losses::{class_weights, combined_loss, kd_loss, weighted_ce, ClassWeights, SoftTargetBatch};
use kdssl::metrics::evaluate_predictions;
use kdssl::model::{Architecture, ClassifierModel, Mode, ModelSpec};
use kdssl::numkernel::{finite_diff_grad, tempered_softmax, Matrix, RngStream};
use kdssl::trainer::{adam_step, cosine_lr, run_ssl, streams, AdamState, TrainConfig};

const BLOBS4: &str = include_str!("../../../configs/blobs4.json");
const SWEEP_TAUS: [f64; 4] = [0.9, 0.95, 0.97, 0.99];

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_matrix(rng: &mut RngStream, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| scale * rng.normal()).collect()).unwrap()
}

/// Norm-wise relative error `‖a − b‖ / (‖a‖ + ‖b‖)`.
fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()) + norm(&mut b.iter().copied());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

struct Instance {
    n: usize,
    c: usize,
    labels: Vec<usize>,
    weights: ClassWeights,
    temperature: f64,
    targets: SoftTargetBatch,
}

fn instance(rng: &mut RngStream) -> Instance {
    let n = 1 + rng.below(6);
    let c = 2 + rng.below(5);
    let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
    let counts: Vec<usize> = (0..c).map(|_| 1 + rng.below(50)).collect();
    let temperature = 0.5 + 4.5 * rng.uniform();
    let teacher = random_matrix(rng, n, c, 2.0);
    Instance {
        n,
        c,
        labels,
        weights: class_weights(&counts).unwrap(),
        temperature,
        targets: soft_targets(&teacher, temperature).unwrap(),
    }
}

fn gradient_correctness() -> Outcome {
    const INSTANCES: usize = 25;
    const TOL: f64 = 1e-6;
    let h = 1e-5;
    let mut rng = RngStream::new(2024, 1);
    let (mut worst_ce, mut worst_kd, mut worst_net) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..INSTANCES {
        let inst = instance(&mut rng);
        let z = random_matrix(&mut rng, inst.n, inst.c, 2.0);
        let at = |v: &[f64]| Matrix::from_vec(inst.n, inst.c, v.to_vec()).unwrap();

        let ce = weighted_ce(&z, &inst.labels, &inst.weights).unwrap();
        let fd = finite_diff_grad(
            |v| weighted_ce(&at(v), &inst.labels, &inst.weights).unwrap().loss,
            z.values(),
            h,
        )
        .unwrap();
        worst_ce = worst_ce.max(rel_error(ce.dlogits.values(), &fd));

        let kd = kd_loss(&z, &inst.targets, inst.temperature).unwrap();
        let fd = finite_diff_grad(
            |v| kd_loss(&at(v), &inst.targets, inst.temperature).unwrap().loss,
            z.values(),
            h,
        )
        .unwrap();
        worst_kd = worst_kd.max(rel_error(kd.dlogits.values(), &fd));

        // Combined loss through an MLP, with respect to every parameter.
        let d = 2 + rng.below(4);
        let hidden = 2 + rng.below(5);
        let lambda = 5.0 * rng.uniform();
        let spec = ModelSpec::mlp(d, &[hidden], inst.c, 0.0);
        let model = ClassifierModel::init(spec.clone(), rng.below(1 << 30) as u64).unwrap();
        let x = random_matrix(&mut rng, inst.n, d, 1.0);
        let loss_at = |params: &[f64]| {
            let m = ClassifierModel::from_params(spec.clone(), params.to_vec()).unwrap();
            let logits = m.logits(&x).unwrap();
            combined_loss(&logits, &inst.labels, &inst.weights, &inst.targets, lambda)
                .unwrap()
                .total
        };
        let (logits, cache) = model.forward(&x, Mode::Train, &mut RngStream::new(0, 0)).unwrap();
        let loss = combined_loss(&logits, &inst.labels, &inst.weights, &inst.targets, lambda).unwrap();
        let analytic = model.backward(&cache, &loss.dlogits).unwrap();
        let fd = finite_diff_grad(loss_at, model.params(), h).unwrap();
        worst_net = worst_net.max(rel_error(&analytic.values, &fd));
    }
    let worst = worst_ce.max(worst_kd).max(worst_net);
    check(
        worst <= TOL,
        format!("{INSTANCES} instances each; max rel err CE {worst_ce:.1e}, KD {worst_kd:.1e}, MLP {worst_net:.1e} (tol {TOL:.0e})"),
    )
}

fn loss_identities() -> Outcome {
    let mut rng = RngStream::new(2024, 2);
    let (mut uniform_err, mut gibbs_min, mut k1_err) = (0.0f64, f64::INFINITY, 0.0f64);
    let mut bit_exact = true;
    for _ in 0..1000 {
        let inst = instance(&mut rng);
        let t = inst.temperature;

        // Rows with all-equal logits are uniform at any temperature.
        let flat: Vec<f64> = (0..inst.n)
            .flat_map(|_| {
                let v = 3.0 * rng.normal();
                std::iter::repeat_n(v, inst.c)
            })
            .collect();
        let flat = Matrix::from_vec(inst.n, inst.c, flat).unwrap();
        let kd = kd_loss(&flat, &inst.targets, t).unwrap().loss;
        uniform_err = uniform_err.max((kd - t * t * (inst.c as f64).ln()).abs());

        let z = random_matrix(&mut rng, inst.n, inst.c, 3.0);
        let kd = kd_loss(&z, &inst.targets, t).unwrap().loss;
        let entropy: f64 = inst
            .targets
            .probabilities()
            .iter_rows()
            .map(|p| -p.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>())
            .sum::<f64>()
            / inst.n as f64;
        gibbs_min = gibbs_min.min(kd - t * t * entropy);

        let ce = weighted_ce(&z, &inst.labels, &inst.weights).unwrap();
        let combined = combined_loss(&z, &inst.labels, &inst.weights, &inst.targets, 0.0).unwrap();
        bit_exact &= combined.total.to_bits() == ce.loss.to_bits()
            && combined
                .dlogits
                .values()
                .iter()
                .zip(ce.dlogits.values())
                .all(|(a, b)| a.to_bits() == b.to_bits());

        let single = soft_targets(&ensemble_logits(std::slice::from_ref(&z)).unwrap(), t).unwrap();
        for (i, row) in z.iter_rows().enumerate() {
            let expect = tempered_softmax(row, t).unwrap();
            for (a, b) in single.probabilities().row(i).iter().zip(&expect) {
                k1_err = k1_err.max((a - b).abs());
            }
        }
    }
    check(
        uniform_err <= 1e-12 && gibbs_min >= -1e-12 && bit_exact && k1_err <= 1e-12,
        format!(
            "1000 instances; |KD - T²lnC| max {uniform_err:.1e}, min Gibbs gap {gibbs_min:.2e}, \
             λ=0 bit-exact {bit_exact}, K=1 target err {k1_err:.1e}"
        ),
    )
}

/// Metrics recomputed by scanning prediction/label pairs.
fn metric_oracle(pred: &[usize], truth: &[usize], c: usize) -> [f64; 4] {
    let n = pred.len() as f64;
    let (mut bacc, mut acc_star, mut f1) = (0.0, 0.0, 0.0);
    for k in 0..c {
        let (mut tp, mut fp, mut fneg, mut tn) = (0.0, 0.0, 0.0, 0.0);
        for (&p, &y) in pred.iter().zip(truth) {
            match (p == k, y == k) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fneg += 1.0,
                (false, false) => tn += 1.0,
            }
        }
        bacc += if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
        f1 += if tp + fp + fneg > 0.0 {
            2.0 * tp / (2.0 * tp + fp + fneg)
        } else {
            0.0
        };
        acc_star += (tp + tn) / n;
    }
    let acc = pred.iter().zip(truth).filter(|(p, y)| p == y).count() as f64 / n;
    let c = c as f64;
    [bacc / c, acc, acc_star / c, f1 / c]
}

fn metric_oracle_check() -> Outcome {
    let mut rng = RngStream::new(2024, 3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let c = 2 + rng.below(7);
        let n = 1 + rng.below(200);
        let truth: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let m = evaluate_predictions(&pred, &truth, c).unwrap();
        let o = metric_oracle(&pred, &truth, c);
        for (a, b) in [m.bacc, m.acc, m.acc_star, m.macro_f1].iter().zip(o) {
            worst = worst.max((a - b).abs());
        }
    }
    let mut majority_exact = true;
    for c in 2..=8 {
        let truth: Vec<usize> = (0..c).flat_map(|k| std::iter::repeat_n(k, 10 * (c - k))).collect();
        let m = evaluate_predictions(&vec![0; truth.len()], &truth, c).unwrap();
        majority_exact &= m.bacc == 1.0 / c as f64;
    }
    check(
        worst <= 1e-12 && majority_exact,
        format!("1000 instances, max deviation {worst:.1e}; majority predictor BAcc = 1/C exactly: {majority_exact}"),
    )
}

/// Plain minibatch weighted-CE training on the same random streams.
fn reference_ce_losses(cfg: &TrainConfig, labeled: &[kdssl::data::Example], c: usize) -> (Vec<f64>, Vec<f64>) {
    let normalizer = fit_normalizer(labeled).unwrap();
    let policies = cfg.augment.policies(&normalizer).unwrap();
    let spec = cfg.model_spec(policies.eval.output_len(&labeled[0].payload), c);
    let mut model = ClassifierModel::init(spec, member_seed(cfg.seed, 0)).unwrap();
    let mut adam = AdamState::new(model.param_count());
    let counts = kdssl::data::class_counts(labeled, c);
    let weights = class_weights(&counts).unwrap();
    let mut losses = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.learning_rate, epoch, cfg.epochs).unwrap();
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        streams::shuffle(cfg.seed, 1, epoch).shuffle(&mut order);
        let (mut sum, mut seen) = (0.0, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let views: Vec<_> = batch
                .iter()
                .map(|&i| {
                    let ex = &labeled[i];
                    strong_augment(
                        ex,
                        &policies.strong,
                        &mut streams::strong_augment(cfg.seed, 1, epoch, ex.id, None),
                    )
                    .unwrap()
                })
                .collect();
            let x = payload_matrix(views.iter().map(|e| &e.payload)).unwrap();
            let labels: Vec<usize> = batch.iter().map(|&i| labeled[i].label.unwrap()).collect();
            let (z, cache) = model
                .forward(&x, Mode::Train, &mut streams::dropout(cfg.seed, 1, epoch, b, 0))
                .unwrap();
            let loss = weighted_ce(&z, &labels, &weights).unwrap();
            let grads = model.backward(&cache, &loss.dlogits).unwrap();
            adam_step(model.params_mut(), &grads.values, &mut adam, lr, &cfg.adam).unwrap();
            sum += loss.loss * batch.len() as f64;
            seen += batch.len();
        }
        losses.push(sum / seen as f64);
    }
    (losses, model.params().to_vec())
}

fn algorithm_collapse() -> Outcome {
    let exp = ExperimentConfig::from_json(BLOBS4, "blobs4.json").unwrap();
    let data = exp.dataset.load(Path::new(".")).unwrap();
    let split = SplitSpec {
        labeled_fraction: 1.0,
        seed: 3,
        ..exp.split.clone()
    };
    let (train, val, _) = stratified_split(&data, &split).unwrap();
    let pools = mask_labels(&train, data.num_classes, 1.0, 3).unwrap();
    let cfg = TrainConfig {
        ensemble_size: 1,
        lambda: 0.0,
        iterations: 1,
        epochs: 8,
        dropout: 0.5,
        seed: 3,
        architecture: Some(Architecture::Mlp { hidden: vec![32] }),
        ..TrainConfig::default()
    };
    let out = run_ssl(&cfg, pools.clone(), &val).unwrap();
    let got: Vec<f64> = out.history[0].epochs.iter().map(|e| e.members[0].total).collect();
    let got_ce: Vec<f64> = out.history[0].epochs.iter().map(|e| e.members[0].ce).collect();
    let (want, params) = reference_ce_losses(&cfg, pools.labeled(), data.num_classes);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let identical = bits(&got) == bits(&want) && bits(&got_ce) == bits(&want);
    let same_params = bits(out.ensemble.members()[0].params()) == bits(&params);
    check(
        identical && same_params,
        format!(
            "{} epochs; losses bit-identical {identical}, final parameters bit-identical {same_params} \
             (last epoch {:.6} vs {:.6})",
            cfg.epochs,
            got.last().unwrap(),
            want.last().unwrap()
        ),
    )
}

struct Benchmark {
    exp: ExperimentConfig,
    data: Dataset,
    train_size: usize,
    baseline: Vec<RunResult>,
    proposed: Vec<RunResult>,
    /// Mean test BAcc at τ = 0.1 followed by each of `SWEEP_TAUS`.
    sweep_low: f64,
    sweep_high: Vec<f64>,
    sweep_runs: Vec<RunResult>,
    seconds: f64,
}

fn with_mode(exp: &ExperimentConfig, mode: RunMode) -> ExperimentConfig {
    ExperimentConfig { mode, ..exp.clone() }
}

fn benchmark() -> Benchmark {
    let start = Instant::now();
    let exp = ExperimentConfig::from_json(BLOBS4, "blobs4.json").unwrap();
    exp.validate().unwrap();
    let data = exp.dataset.load(Path::new(".")).unwrap();
    let (train, _, _) = stratified_split(&data, &exp.split).unwrap();
    let base = exp.points(false)[0];
    let base_cfg = with_mode(&exp, RunMode::BaselineFsl);
    let prop_cfg = with_mode(&exp, RunMode::ProposedSsl);
    let run = |cfg: &ExperimentConfig, p: &SweepPoint, s: u64| run_single(cfg, &data, p, s).unwrap();
    let baseline: Vec<RunResult> = exp.seeds.iter().map(|&s| run(&base_cfg, &base, s)).collect();
    let proposed: Vec<RunResult> = exp.seeds.iter().map(|&s| run(&prop_cfg, &base, s)).collect();

    let mut sweep_runs = Vec::new();
    let mut mean_at = |tau: f64| {
        let point = SweepPoint { threshold: tau, ..base };
        let runs: Vec<RunResult> = if tau == base.threshold {
            proposed.clone()
        } else {
            exp.seeds.iter().map(|&s| run(&prop_cfg, &point, s)).collect()
        };
        let mean = runs.iter().map(|r| r.primary.ensemble.bacc).sum::<f64>() / runs.len() as f64;
        sweep_runs.extend(runs);
        mean
    };
    let sweep_low = mean_at(0.1);
    let sweep_high: Vec<f64> = SWEEP_TAUS.iter().map(|&t| mean_at(t)).collect();
    Benchmark {
        train_size: train.len(),
        exp,
        data,
        baseline,
        proposed,
        sweep_low,
        sweep_high,
        sweep_runs,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn ssl_helps(b: &Benchmark) -> Outcome {
    let base = mean(b.baseline.iter().map(|r| r.primary.ensemble.bacc));
    let prop = mean(b.proposed.iter().map(|r| r.primary.ensemble.bacc));
    let gain = prop - base;
    check(
        prop > base && gain >= 0.02,
        format!(
            "mean test BAcc proposed {prop:.4} vs baseline {base:.4}, gain {:+.2} points",
            100.0 * gain
        ),
    )
}

fn kd_member_beats_single(b: &Benchmark) -> Outcome {
    let per_seed: Vec<(f64, f64)> = b
        .proposed
        .iter()
        .map(|r| (r.primary.member_mean.bacc, r.single.as_ref().unwrap().ensemble.bacc))
        .collect();
    let wins = per_seed.iter().filter(|(m, s)| m >= s).count();
    let shown: Vec<String> = per_seed.iter().map(|(m, s)| format!("{m:.3}/{s:.3}")).collect();
    check(
        wins >= 4,
        format!("{wins}/5 seeds (member mean/single: {})", shown.join(" ")),
    )
}

fn ensemble_beats_members(b: &Benchmark) -> Outcome {
    let per_seed: Vec<(f64, f64)> = b
        .proposed
        .iter()
        .map(|r| (r.primary.ensemble.bacc, r.primary.member_mean.bacc))
        .collect();
    let wins = per_seed.iter().filter(|(e, m)| e >= m).count();
    let shown: Vec<String> = per_seed.iter().map(|(e, m)| format!("{e:.3}/{m:.3}")).collect();
    check(
        wins >= 4,
        format!("{wins}/5 seeds (ensemble/member mean: {})", shown.join(" ")),
    )
}

fn threshold_sweep(b: &Benchmark) -> Outcome {
    let best = b.sweep_high.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shown: Vec<String> = SWEEP_TAUS
        .iter()
        .zip(&b.sweep_high)
        .map(|(t, v)| format!("τ={t}: {v:.4}"))
        .collect();
    check(
        b.sweep_low < best,
        format!(
            "τ=0.1: {:.4}, best high τ {best:.4} ({})",
            b.sweep_low,
            shown.join(", ")
        ),
    )
}

/// Pool bookkeeping of one run: |D_L| grows by exactly the admitted count
/// and |D_L| + |D_U| never changes. `total` is the expected pool size.
fn trace_is_consistent(t: &TrainingTrace, total: Option<usize>) -> bool {
    let Some(first) = t.history.first() else {
        return false;
    };
    let total = total.unwrap_or(first.labeled_after + first.unlabeled_after);
    let mut expected_labeled = first.labeled_before;
    t.history.iter().zip(&t.audit).all(|(h, a)| {
        let ok = h.labeled_before == expected_labeled
            && h.labeled_after == h.labeled_before + a.admitted
            && h.labeled_after + h.unlabeled_after == total;
        expected_labeled = h.labeled_after;
        ok
    })
}

fn mechanical_invariants(b: &Benchmark) -> Outcome {
    let all = b.baseline.iter().chain(&b.proposed).chain(&b.sweep_runs);
    let mut traces = 0;
    let mut conserved = true;
    for r in all {
        // Baseline runs never see the unlabeled pool.
        let total = (r.mode == RunMode::ProposedSsl).then_some(b.train_size);
        for t in std::iter::once(&r.trace).chain(r.single_trace.as_ref()) {
            traces += 1;
            conserved &= trace_is_consistent(t, total);
        }
    }

    let prop_cfg = with_mode(&b.exp, RunMode::ProposedSsl);
    let base = b.exp.points(false)[0];
    let strict = SweepPoint { threshold: 1.0, ..base };
    let r = run_single(&prop_cfg, &b.data, &strict, b.exp.seeds[0]).unwrap();
    let admitted_at_one: usize = r
        .trace
        .audit
        .iter()
        .chain(r.single_trace.iter().flat_map(|t| &t.audit))
        .map(|a| a.admitted)
        .sum();

    let mut repeat_identical = true;
    for (i, &seed) in b.exp.seeds.iter().enumerate() {
        let again = run_single(&prop_cfg, &b.data, &base, seed).unwrap();
        repeat_identical &= serde_json::to_vec(&again).unwrap() == serde_json::to_vec(&b.proposed[i]).unwrap();
    }
    check(
        conserved && admitted_at_one == 0 && repeat_identical,
        format!(
            "{traces} traces conserve the pool and grow monotonically: {conserved}; τ=1 admitted {admitted_at_one}; \
             repeated seeds byte-identical: {repeat_identical}"
        ),
    )
}

fn schedule_check() -> Outcome {
    let want = (7.0 * std::f64::consts::PI / 18.0).cos();
    let mut worst = 0.0f64;
    for epochs in [1, 3, 40, 100, 1000] {
        for eta in [1e-3, 0.03, 1.0, 7.5] {
            worst = worst.max((cosine_lr(eta, epochs, epochs).unwrap() / eta - want).abs());
        }
    }
    check(worst <= 1e-12, format!("max |η_M/η - cos(7π/18)| = {worst:.1e}"))
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail, ok) = match outcome {
        Ok(d) => ("PASS", d, true),
        Err(d) => ("FAIL", d, false),
    };
    println!("{tag} {name}: {detail} [{secs:.1}s]");
    ok
}

fn main() -> ExitCode {
    let mut ok = true;
    ok &= run("1 gradient correctness", gradient_correctness);
    ok &= run("2 loss identities", loss_identities);
    ok &= run("3 metric oracle", metric_oracle_check);
    ok &= run("4 algorithm collapse", algorithm_collapse);

    let bench = panic::catch_unwind(benchmark);
    match &bench {
        Ok(b) => {
            println!(
                "blobs-4: {} runs per configuration, {:.1}s for {} runs",
                b.exp.seeds.len(),
                b.seconds,
                b.baseline.len() + b.sweep_runs.len()
            );
            ok &= run("5 SSL helps", || ssl_helps(b));
            ok &= run("6 KD member vs single", || kd_member_beats_single(b));
            ok &= run("7 ensemble vs members", || ensemble_beats_members(b));
            ok &= run("8 threshold sweep", || threshold_sweep(b));
            ok &= run("9 mechanical invariants", || mechanical_invariants(b));
        }
        Err(_) => {
            for name in [
                "5 SSL helps",
                "6 KD member vs single",
                "7 ensemble vs members",
                "8 threshold sweep",
                "9 mechanical invariants",
            ] {
                println!("FAIL {name}: benchmark runs did not complete");
            }
            ok = false;
        }
    }
    ok &= run("10 schedule", schedule_check);
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
