//! Acceptance suite. Runs every criterion in one sequential test so the
//! wall-clock measurements are not disturbed by concurrently running tests,
//! and prints one PASS/FAIL line per criterion.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use calprio::calibration::{self, mixup_loss, mixup_with, training_loss, CalibrationConfig, LabelDistribution};
use calprio::data::{prepare_data, DatasetSpec, PreparedData, CIFAR_SHAPE, DATA_DIR_ENV};
use calprio::expcli::manifest::{EPOCHS_FILE, SELECTIONS_FILE};
use calprio::expcli::report::CLASS_DISTRIBUTION_FILE;
use calprio::expcli::{cmd_report, cmd_train, TrainOutcome};
use calprio::guidance::{RecomputePolicy, TargetGuide};
use calprio::metrics::{compute_ece, EntropyScore};
use calprio::models::{save_checkpoint, Model, ModelConfig};
use calprio::prioritization::{epoch_subset, select_topk, Criterion, SelectionRecord, SelectionSource, SubsetSchedule};
use calprio::trainer::{
    run_experiment, run_from_model, run_with_guidance, Guidance, NoopObserver, RunArtifacts, RunConfig, SubsetConfig,
    TargetConfig,
};
use calprio::{Tape, Tensor};

use common::*;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const FRACTION: f64 = 0.3;
const MIXUP_ALPHA: f64 = 0.3;

struct Verdict {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(id: usize, name: &'static str, pass: bool, detail: String) -> Verdict {
    Verdict { id, name, pass, detail }
}

fn synthetic_spec(seed: u64) -> DatasetSpec {
    DatasetSpec::Synthetic {
        classes: 10,
        pool_size: 10_000,
        test_size: 2_000,
        dims: vec![3, 8, 8],
        separation: 2.0,
        seed,
    }
}

/// The desk-scale protocol: 10-class synthetic pool of 10,000, small
/// residual CNN, 40 epochs, 10 warm-up epochs, 30% subsets.
fn desk_config(dataset: DatasetSpec, seed: u64, calibration: CalibrationConfig, criterion: Criterion) -> RunConfig {
    let shape = dataset.sample_shape();
    let stem_stride = if shape[1] >= 32 { 4 } else { 2 };
    let model = ModelConfig::rescnn([shape[0], shape[1], shape[2]], 8, 2, 10, seed).with_stem_stride(stem_stride);
    let mut c = RunConfig::synthetic_example(model, dataset);
    c.epochs = 40;
    c.batch_size = 128;
    c.optimizer.lr = 0.1;
    c.calibration = calibration;
    c.criterion = criterion;
    c.subset = SubsetConfig {
        warmup_epochs: 10,
        fraction: FRACTION,
    };
    c.seeds.split = seed;
    c.seeds.train = seed;
    c
}

fn mixup() -> CalibrationConfig {
    CalibrationConfig::Mixup { alpha: MIXUP_ALPHA }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---------------------------------------------------------------------------

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let h = 1e-5;
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, err: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(w) => w.1 = w.1.max(err),
        None => worst.push((name, err)),
    };
    let instances = 20;
    for _ in 0..instances {
        let b = rng.random_range(1..4);
        let (din, dout) = (rng.random_range(1..5), rng.random_range(1..5));
        let x = random_tensor(vec![b, din], &mut rng);
        let w = random_tensor(vec![din, dout], &mut rng);
        let bias = random_tensor(vec![dout], &mut rng);
        record(
            "affine",
            grad_check(&[x, w, bias], h, |t, v| {
                let y = t.affine(v[0], v[1], v[2]).unwrap();
                t.sum_squares(y)
            }),
        );

        let (c, f) = (rng.random_range(1..3), rng.random_range(1..3));
        let (stride, pad) = (rng.random_range(1..3), rng.random_range(0..2));
        let x = random_tensor(vec![b, c, 5, 4], &mut rng);
        let k = random_tensor(vec![f, c, 3, 3], &mut rng);
        let kb = random_tensor(vec![f], &mut rng);
        record(
            "conv2d",
            grad_check(&[x, k, kb], h, |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap();
                t.sum_squares(y)
            }),
        );

        let x = random_nonzero(vec![b, 6], &mut rng);
        record(
            "relu",
            grad_check(&[x], h, |t, v| {
                let y = t.relu(v[0]);
                t.sum_squares(y)
            }),
        );

        let a = random_tensor(vec![b, 2, 3], &mut rng);
        let c2 = random_tensor(vec![b, 2, 3], &mut rng);
        record(
            "add",
            grad_check(&[a, c2], h, |t, v| {
                let y = t.add(v[0], v[1]).unwrap();
                t.sum_squares(y)
            }),
        );

        let x = random_tensor(vec![b, 3, 2, 3], &mut rng);
        record(
            "global_avg_pool",
            grad_check(&[x.clone()], h, |t, v| {
                let y = t.global_avg_pool(v[0]).unwrap();
                t.sum_squares(y)
            }),
        );
        let targets = Tensor::from_rows(&softmax_rows(&(0..b).map(|_| (0..18).map(|_| rng.random_range(-1.0..1.0)).collect()).collect::<Vec<_>>())).unwrap();
        record(
            "flatten+reshape",
            grad_check(&[x], h, |t, v| {
                let y = t.flatten(v[0]);
                let y = t.reshape(y, vec![b, 18]).unwrap();
                t.cross_entropy(y, &targets).unwrap()
            }),
        );

        let kk = rng.random_range(2..6);
        let z = random_tensor(vec![b, kk], &mut rng);
        record(
            "softmax",
            grad_check(&[z.clone()], h, |t, v| {
                let y = t.softmax(v[0]).unwrap();
                t.sum_squares(y)
            }),
        );

        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..kk)).collect();
        let onehot = LabelDistribution::one_hot(&labels, kk).unwrap();
        record(
            "cross_entropy",
            grad_check(&[z.clone()], h, |t, v| t.cross_entropy(v[0], onehot.tensor()).unwrap()),
        );

        let alpha = rng.random_range(0.0..0.9);
        let smoothed = calibration::smooth_labels(&onehot, alpha, kk).unwrap();
        record(
            "smoothed_cross_entropy",
            grad_check(&[z.clone()], h, |t, v| t.cross_entropy(v[0], smoothed.tensor()).unwrap()),
        );

        let partner: Vec<usize> = (0..b).map(|_| rng.random_range(0..kk)).collect();
        let partner = LabelDistribution::one_hot(&partner, kk).unwrap();
        let lambda = rng.random_range(0.0..1.0);
        record(
            "mixup_cross_entropy",
            grad_check(&[z.clone()], h, |t, v| {
                let a = t.cross_entropy(v[0], onehot.tensor()).unwrap();
                let c = t.cross_entropy(v[0], partner.tensor()).unwrap();
                t.lincomb(a, lambda, c, 1.0 - lambda).unwrap()
            }),
        );

        let gamma = rng.random_range(0.0..5.0);
        record(
            "focal",
            grad_check(&[z], h, |t, v| t.focal(v[0], &labels, gamma).unwrap()),
        );
    }

    // Whole models with random non-zero parameters (fresh zero biases would put
    // ReLU inputs exactly on the kink) through the training-loss path.
    for i in 0..instances {
        let mut model = if i % 2 == 0 {
            Model::build(ModelConfig::mlp(5, 4, 2, 3, i as u64)).unwrap()
        } else {
            Model::build(ModelConfig::rescnn([2, 4, 4], 2, 1, 3, i as u64)).unwrap()
        };
        let n = model.param_count();
        let random_params = random_nonzero(vec![n], &mut rng);
        model.set_flat_params(random_params.data()).unwrap();
        let shape: Vec<usize> = std::iter::once(4).chain(model.config().input_shape.iter().cloned()).collect();
        let x = random_tensor(shape, &mut rng);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        let configs = [
            CalibrationConfig::None,
            CalibrationConfig::LabelSmoothing { alpha: 0.1 },
            CalibrationConfig::Focal { gamma: 2.0 },
        ];
        let cal = configs[i % 3];
        let perm = vec![2, 0, 3, 1];
        let lambda = 0.37;
        let loss_at = |m: &Model, mix: bool| -> (f64, Vec<f64>) {
            let rec = if mix {
                mixup_loss(m, &mixup_with(&x, &labels, lambda, perm.clone()).unwrap()).unwrap()
            } else {
                let mut r = calprio::rng::derive(0, calprio::rng::Stream::Mixup, 0);
                training_loss(&cal, m, &x, &labels, &mut r).unwrap()
            };
            let g = rec.tape.backward(rec.loss).unwrap();
            let flat: Vec<f64> = rec.params.iter().flat_map(|&p| g.wrt(p)).collect();
            (rec.value(), flat)
        };
        for mix in [false, true] {
            let (_, analytic) = loss_at(&model, mix);
            let base = model.flat_params();
            let mut err: f64 = 0.0;
            for j in 0..base.len() {
                let mut p = base.clone();
                p[j] += h;
                model.set_flat_params(&p).unwrap();
                let up = loss_at(&model, mix).0;
                p[j] -= 2.0 * h;
                model.set_flat_params(&p).unwrap();
                let down = loss_at(&model, mix).0;
                let numeric = (up - down) / (2.0 * h);
                err = err.max((numeric - analytic[j]).abs() / numeric.abs().max(analytic[j].abs()).max(1e-6));
            }
            model.set_flat_params(&base).unwrap();
            record(if mix { "model+mixup" } else { "model" }, err);
        }
    }

    let max_err = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let summary: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    verdict(
        1,
        "gradient correctness",
        max_err < 1e-4 && secs < 30.0,
        format!("max rel err {max_err:.2e} over {instances} instances each; {secs:.1}s; [{}]", summary.join(", ")),
    )
}

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..200);
        let k = rng.random_range(2..12);
        let m = rng.random_range(1..25);
        let logits: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k).map(|_| rng.random_range(-4.0..4.0)).collect())
            .collect();
        let probs = softmax_rows(&logits);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let got = compute_ece(&Tensor::from_rows(&probs).unwrap(), &labels, m).unwrap().ece;
        worst = worst.max((got - naive_ece(&probs, &labels, m)).abs());
    }
    let n = 57;
    let probs = softmax_rows(&(0..n).map(|_| (0..4).map(|_| rng.random_range(-3.0..3.0)).collect()).collect::<Vec<Vec<f64>>>());
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
    let report = compute_ece(&Tensor::from_rows(&probs).unwrap(), &labels, 1).unwrap();
    let mut hits = 0usize;
    let mut conf_sum = 0.0;
    for (row, &y) in probs.iter().zip(&labels) {
        let pred = (0..4).fold(0, |b, k| if row[k] > row[b] { k } else { b });
        conf_sum += row[pred];
        hits += (pred == y) as usize;
    }
    let single = (hits as f64 / n as f64 - conf_sum / n as f64).abs();
    let single_ok = report.ece == single;

    let perfect_labels: Vec<usize> = (0..30).map(|i| i % 5).collect();
    let perfect = one_hot(&perfect_labels, 5);
    let perfect_ece = compute_ece(&Tensor::from_rows(&perfect).unwrap(), &perfect_labels, 15).unwrap().ece;

    verdict(
        2,
        "metric oracles",
        worst <= 1e-12 && single_ok && perfect_ece == 0.0,
        format!("max |ECE − naive| {worst:.1e} over 100 instances; M=1 exact: {single_ok}; perfect predictor ECE {perfect_ece}"),
    )
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut focal, mut smooth, mut endpoint, mut mixed) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..50 {
        let b = rng.random_range(2..10);
        let k = rng.random_range(2..8);
        let logits: Vec<Vec<f64>> = (0..b).map(|_| (0..k).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let probs = softmax_rows(&logits);
        let p = Tensor::from_rows(&probs).unwrap();
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
        let onehot = LabelDistribution::one_hot(&labels, k).unwrap();
        let ce = calibration::cross_entropy(&p, &onehot).unwrap();
        let oracle_ce = soft_ce(&probs, &one_hot(&labels, k));

        focal = focal.max((calibration::focal_loss(&p, &onehot, 0.0).unwrap() - ce).abs());
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_rows(&logits).unwrap());
        let f0 = tape.focal(z, &labels, 0.0).unwrap();
        let c0 = tape.cross_entropy(z, onehot.tensor()).unwrap();
        focal = focal.max((tape.value(f0).data()[0] - tape.value(c0).data()[0]).abs());

        let s0 = calibration::smooth_labels(&onehot, 0.0, k).unwrap();
        smooth = smooth.max((calibration::cross_entropy(&p, &s0).unwrap() - oracle_ce).abs());

        let dims = rng.random_range(2..6);
        let model = Model::build(ModelConfig::mlp(dims, 6, 1, k, i)).unwrap();
        let x = random_tensor(vec![b, dims], &mut rng);
        let mut perm: Vec<usize> = (0..b).collect();
        perm.rotate_left(1);
        let at_one = mixup_loss(&model, &mixup_with(&x, &labels, 1.0, perm.clone()).unwrap()).unwrap().value();
        let mut r = calprio::rng::derive(0, calprio::rng::Stream::Mixup, 0);
        let plain = training_loss(&CalibrationConfig::None, &model, &x, &labels, &mut r).unwrap().value();
        endpoint = endpoint.max((at_one - plain).abs());

        let lambda = rng.random_range(0.0..1.0);
        let partner: Vec<usize> = perm.iter().map(|&j| labels[j]).collect();
        let yj = LabelDistribution::one_hot(&partner, k).unwrap();
        let mix = LabelDistribution::mix(&onehot, &yj, lambda).unwrap();
        let combined = lambda * calibration::cross_entropy(&p, &onehot).unwrap()
            + (1.0 - lambda) * calibration::cross_entropy(&p, &yj).unwrap();
        mixed = mixed.max((calibration::cross_entropy(&p, &mix).unwrap() - combined).abs());
    }
    let worst = focal.max(smooth).max(endpoint).max(mixed);
    verdict(
        3,
        "calibration identities",
        worst <= 1e-12,
        format!("50 batches: focal γ=0 {focal:.1e}, smoothing α=0 {smooth:.1e}, mixup λ=1 {endpoint:.1e}, mixed-label CE {mixed:.1e}"),
    )
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut mismatches = 0;
    let mut tie_cases = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..300);
        let levels = rng.random_range(1..8);
        let scores: Vec<f64> = if rng.random_bool(0.5) {
            (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.25).collect()
        } else {
            (0..n).map(|_| rng.random_range(0.0..2.3)).collect()
        };
        let k = rng.random_range(1..=n);
        let list: Vec<EntropyScore> = scores.iter().enumerate().map(|(id, &entropy)| EntropyScore { id, entropy }).collect();
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        tie_cases += sorted.windows(2).any(|w| w[0] == w[1]) as usize;
        if select_topk(&list, k).unwrap() != topk_oracle(&scores, k) {
            mismatches += 1;
        }
    }

    let mut size_errors = Vec::new();
    for &n_pool in &[9000usize, 1000, 997, 45_000, 13] {
        for &tenths in &[1usize, 2, 3] {
            let fraction = tenths as f64 / 10.0;
            let schedule = SubsetSchedule::new(10, fraction, n_pool).unwrap();
            let expected = (tenths * n_pool).div_ceil(10);
            let labels: Vec<usize> = (0..n_pool).map(|i| i % 10).collect();
            let scores: Vec<EntropyScore> = (0..n_pool).map(|id| EntropyScore { id, entropy: (id * 7919 % 101) as f64 }).collect();
            let mut prev: Option<SelectionRecord> = None;
            for epoch in 1..=12 {
                let source = schedule.needs_scores(epoch).then_some(SelectionSource::Scores(&scores));
                let rec = epoch_subset(&schedule, epoch, Criterion::MaxEntropy, source, prev.as_ref(), &labels, 10).unwrap();
                let want = if epoch <= 10 { n_pool } else { expected };
                if rec.ids.len() != want {
                    size_errors.push(format!("N={n_pool} n={fraction} epoch {epoch}: {} != {want}", rec.ids.len()));
                }
                prev = Some(rec);
            }
        }
    }
    verdict(
        4,
        "selection oracle",
        mismatches == 0 && size_errors.is_empty() && tie_cases > 100,
        format!(
            "{mismatches}/1000 top-k mismatches ({tie_cases} vectors with ties); subset size errors: {}",
            if size_errors.is_empty() { "none".to_string() } else { size_errors.join("; ") }
        ),
    )
}

// ---------------------------------------------------------------------------

struct DeskRuns {
    baseline: Vec<TrainOutcome>,
    mixup: Vec<TrainOutcome>,
    seconds: f64,
}

fn desk_runs(root: &Path, dataset: impl Fn(u64) -> DatasetSpec, tag: &str) -> DeskRuns {
    let start = Instant::now();
    let mut baseline = Vec::new();
    let mut mixed = Vec::new();
    for &seed in &SEEDS {
        for (cal, out) in [(CalibrationConfig::None, &mut baseline), (mixup(), &mut mixed)] {
            let c = desk_config(dataset(seed), seed, cal, Criterion::MaxEntropy);
            let dir = root.join(format!("{tag}-{}-seed{seed}", cal.method_name()));
            let o = cmd_train(&c, &dir).expect("desk run");
            println!(
                "  [{tag}] seed {seed} {:>5}: test acc {:.4} ECE {:.4}",
                cal.method_name(),
                o.report.test_accuracy,
                o.report.test_ece
            );
            out.push(o);
        }
    }
    DeskRuns {
        baseline,
        mixup: mixed,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn criterion_5(runs: &DeskRuns) -> Verdict {
    let mut lower_ece = 0;
    let mut acc_ok = true;
    let mut rows = Vec::new();
    for (b, m) in runs.baseline.iter().zip(&runs.mixup) {
        lower_ece += (m.report.test_ece < b.report.test_ece) as usize;
        let gap = (m.report.test_accuracy - b.report.test_accuracy) * 100.0;
        acc_ok &= gap >= -1.5;
        rows.push(format!(
            "ECE {:.2}%→{:.2}% acc {:+.2}pt",
            b.report.test_ece * 100.0,
            m.report.test_ece * 100.0,
            gap
        ));
    }
    verdict(
        5,
        "mixup lowers test ECE at n=0.3",
        lower_ece >= 4 && acc_ok && runs.seconds < 900.0,
        format!("mixup lower ECE in {lower_ece}/5 seeds, accuracy within 1.5pt: {acc_ok}; {:.0}s for 10 runs; [{}]", runs.seconds, rows.join("; ")),
    )
}

fn criterion_6(runs: &DeskRuns) -> Verdict {
    let (mut full, mut subset) = (Vec::new(), Vec::new());
    for o in runs.baseline.iter().chain(&runs.mixup) {
        let pool = o.artifacts.selections[0].ids.len();
        for t in &o.artifacts.timings {
            if t.subset_size == pool {
                full.push(t.train_seconds);
            } else {
                subset.push(t.train_seconds);
            }
        }
    }
    let (f, s) = (median(full), median(subset));
    let ratio = s / f;
    verdict(
        6,
        "subset epoch cost at n=0.3",
        (0.25..=0.45).contains(&ratio),
        format!("median training seconds per epoch: full {f:.3}s, subset {s:.3}s, ratio {ratio:.3} (scoring excluded)"),
    )
}

fn post_warmup_overlap(a: &RunArtifacts, warmup: usize, after_epoch: usize) -> f64 {
    let v: Vec<f64> = a
        .selections
        .iter()
        .filter(|s| s.epoch > warmup + 1 && s.epoch > after_epoch)
        .filter_map(|s| s.overlap)
        .collect();
    mean(&v)
}

fn criterion_7(runs: &DeskRuns) -> Verdict {
    let seed = SEEDS[0];
    let c = desk_config(synthetic_spec(seed), seed, CalibrationConfig::None, Criterion::Random);
    let data = prepare_data(&c.dataset, c.train_fraction, c.seeds.split).unwrap();
    let random = run_experiment(&c, &data, &mut NoopObserver).unwrap();
    let random_overlap = post_warmup_overlap(&random, 10, 0);
    let entropy_overlaps: Vec<f64> = runs.baseline.iter().map(|o| post_warmup_overlap(&o.artifacts, 10, 20)).collect();
    let random_ok = (random_overlap - FRACTION).abs() <= 0.03;
    let entropy_ok = entropy_overlaps.iter().all(|&o| o > FRACTION + 0.1);
    verdict(
        7,
        "overlap diagnostics",
        random_ok && entropy_ok,
        format!(
            "random criterion mean overlap {random_overlap:.4}; max-entropy mean overlap after epoch 20 per seed {:?}",
            entropy_overlaps.iter().map(|o| format!("{o:.3}")).collect::<Vec<_>>()
        ),
    )
}

fn criterion_8(root: &Path) -> Verdict {
    let seed = 11;
    let dataset = synthetic_spec(seed);
    let mut target_cfg = desk_config(dataset.clone(), seed, mixup(), Criterion::MaxEntropy);
    target_cfg.model = ModelConfig::rescnn([3, 8, 8], 16, 2, 10, 99).with_stem_stride(2);
    target_cfg.epochs = 15;
    target_cfg.subset.fraction = 1.0;
    let data: PreparedData = prepare_data(&dataset, target_cfg.train_fraction, seed).unwrap();
    let target = run_experiment(&target_cfg, &data, &mut NoopObserver).unwrap();
    let ckpt = root.join("target.ckpt");
    save_checkpoint(&target.model, &target.meta, &ckpt).unwrap();

    let mut cfg = desk_config(dataset, seed, CalibrationConfig::LabelSmoothing { alpha: 0.1 }, Criterion::MaxEntropy);
    cfg.epochs = 14;
    cfg.target = Some(TargetConfig {
        checkpoint: ckpt,
        policy: RecomputePolicy::Once,
    });
    let guided = run_experiment(&cfg, &data, &mut NoopObserver).unwrap();

    let mut perturbed = Model::build(cfg.model.clone()).unwrap();
    let mut noise = ChaCha8Rng::seed_from_u64(808);
    let flat: Vec<f64> = perturbed
        .flat_params()
        .iter()
        .map(|p| p + 0.5 * noise.sample::<f64, _>(StandardNormal))
        .collect();
    perturbed.set_flat_params(&flat).unwrap();
    let guide = |policy| {
        Guidance::Target(TargetGuide::from_model(target.model.clone(), &data.train, policy, None, cfg.eval_batch_size).unwrap())
    };
    let perturbed_run = run_from_model(&cfg, &data, perturbed, guide(RecomputePolicy::Once), &mut NoopObserver).unwrap();
    let every = run_with_guidance(&cfg, &data, guide(RecomputePolicy::EveryEpoch), &mut NoopObserver).unwrap();
    let mut unguided_cfg = cfg.clone();
    unguided_cfg.target = None;
    let unguided = run_experiment(&unguided_cfg, &data, &mut NoopObserver).unwrap();

    let ids = |a: &RunArtifacts| a.selections.iter().map(|s| s.ids.clone()).collect::<Vec<_>>();
    let invariant = ids(&guided) == ids(&perturbed_run) && ids(&guided) == ids(&every);
    let params_differ = guided.model.flat_params() != perturbed_run.model.flat_params();
    let changed = guided
        .selections
        .iter()
        .zip(&unguided.selections)
        .filter(|(g, u)| g.epoch > cfg.subset.warmup_epochs && g.ids != u.ids)
        .count();
    verdict(
        8,
        "guidance invariance",
        invariant && params_differ && changed >= 1,
        format!(
            "selections identical under perturbed current model and every-epoch policy: {invariant}; \
             current models differ: {params_differ}; post-warm-up subsets changed by guidance: {changed}/{}",
            cfg.epochs - cfg.subset.warmup_epochs
        ),
    )
}

fn criterion_9(root: &Path) -> Verdict {
    let seed = SEEDS[0];
    let c = desk_config(synthetic_spec(seed), seed, mixup(), Criterion::MaxEntropy);
    let (a, b) = (root.join("det-a"), root.join("det-b"));
    cmd_train(&c, &a).unwrap();
    cmd_train(&c, &b).unwrap();
    let same = |f: &str| fs::read(a.join(f)).unwrap() == fs::read(b.join(f)).unwrap();
    let (epochs, selections) = (same(EPOCHS_FILE), same(SELECTIONS_FILE));
    verdict(
        9,
        "determinism",
        epochs && selections,
        format!("epochs.csv identical: {epochs}; selections.jsonl identical: {selections}"),
    )
}

fn histogram_rows_sum(dir: &Path) -> bool {
    let mut r = csv::Reader::from_path(dir.join("report").join(CLASS_DISTRIBUTION_FILE)).unwrap();
    let headers = r.headers().unwrap().clone();
    let classes: Vec<usize> = (0..headers.len()).filter(|&i| headers[i].starts_with("class_")).collect();
    r.records().all(|rec| {
        let rec = rec.unwrap();
        let size: usize = rec[1].parse().unwrap();
        classes.iter().map(|&i| rec[i].parse::<usize>().unwrap()).sum::<usize>() == size
    })
}

fn criterion_10(runs: &DeskRuns, source: &str) -> Verdict {
    let mut lower = 0;
    let mut sums_ok = true;
    let mut rows = Vec::new();
    for (b, m) in runs.baseline.iter().zip(&runs.mixup) {
        let rb = cmd_report(&b.dir).unwrap();
        let rm = cmd_report(&m.dir).unwrap();
        sums_ok &= histogram_rows_sum(&b.dir) && histogram_rows_sum(&m.dir);
        let (bb, mm) = (rb.mean_balance_ratio.unwrap(), rm.mean_balance_ratio.unwrap());
        lower += (mm < bb) as usize;
        rows.push(format!("{bb:.2}→{mm:.2}"));
    }
    verdict(
        10,
        "class-distribution artifact",
        sums_ok && lower >= 4,
        format!(
            "{source}; histograms sum to subset size: {sums_ok}; mixup lower mean balance ratio in {lower}/5 seeds [baseline→mixup: {}]",
            rows.join(", ")
        ),
    )
}

fn cifar_dir() -> Option<PathBuf> {
    let dir = PathBuf::from(std::env::var_os(DATA_DIR_ENV)?);
    dir.join("data_batch_1.bin").is_file().then_some(dir)
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut verdicts = vec![criterion_1(), criterion_2(), criterion_3(), criterion_4()];

    println!("desk-scale runs (synthetic, 5 seeds × baseline/mixup):");
    let runs = desk_runs(root, synthetic_spec, "synthetic");
    verdicts.push(criterion_5(&runs));
    verdicts.push(criterion_6(&runs));
    verdicts.push(criterion_7(&runs));
    verdicts.push(criterion_8(root));
    verdicts.push(criterion_9(root));
    let v10 = match cifar_dir() {
        Some(dir) => {
            println!("desk-scale runs (CIFAR-10 subset from {}):", dir.display());
            let spec = move |_seed: u64| DatasetSpec::Cifar10 {
                dir: Some(dir.clone()),
                pool_limit: Some(5_000),
                test_limit: Some(2_000),
            };
            let cifar = desk_runs(root, spec, "cifar10");
            assert_eq!(cifar.baseline[0].manifest.config.model.input_shape, CIFAR_SHAPE.to_vec());
            criterion_10(&cifar, "CIFAR-10 5,000-sample subset")
        }
        None => criterion_10(&runs, &format!("synthetic stand-in ({DATA_DIR_ENV} has no CIFAR-10)")),
    };
    verdicts.push(v10);

    verdicts.sort_by_key(|v| v.id);
    println!();
    for v in &verdicts {
        println!(
            "[{}] criterion {:>2} {}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.id,
            v.name,
            v.detail
        );
    }
    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
