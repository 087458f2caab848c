//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use metareg_core::episodes::{
    sample_episode, ClassIndexedDataset, ClassRecord, EpisodeShape, MetaDataset, Split, SyntheticSpec,
};
use metareg_core::gradsuite::{self, SUITE_TOL};
use metareg_core::maml::{inner_adapt, MamlModel};
use metareg_core::metatask::{
    separability_check, AeImages, MetaTaskSpec, RegInput, RegTerm, Registry, AUTOENCODER,
};
use metareg_core::models::{Bound, Checkpoint, DecoderVariant, Encoder, EncoderSpec, ParamSet};
use metareg_core::protonet::{prototypical_loss, DistanceMetric, LossReduction};
use metareg_core::rng::{self, Stream};
use metareg_core::trainer::{
    self, classification_report, evaluate, read_jsonl, Algo, DatasetSpec, EmbeddingStub, Mode, ModelSpec,
    PredictionRecord, RunConfig, Trainer,
};
use metareg_core::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

type Check = fn() -> Outcome;

fn main() {
    let checks: &[(&str, Check)] = &[
        ("gradient suite", gradient_suite),
        ("loss identity", loss_identity),
        ("composite loss", composite_loss_suite),
        ("sampler", sampler_suite),
        ("training smoke", training_smoke),
        ("meta-autoencoder non-inferiority", non_inferiority),
        ("maml", maml_suite),
        ("determinism", determinism),
        ("classification report", classification_report_suite),
        ("evaluation leaves parameters untouched", evaluation_is_read_only),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let mark = if out.passed { "PASS" } else { "FAIL" };
        println!("{mark} {name}: {} [{:.1}s]", out.detail, t0.elapsed().as_secs_f64());
        failed += !out.passed as usize;
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- helpers

fn small_dataset(noise: f64, shift: f64, size: usize) -> DatasetSpec {
    DatasetSpec::Synthetic(SyntheticSpec {
        noise_sigma: noise,
        max_shift: shift,
        size,
        ..Default::default()
    })
}

/// 16x16 images, narrow encoder, 5-way 1-shot 5-query episodes.
fn small_config(seed: u64) -> RunConfig {
    let shape = EpisodeShape::new(5, 1, 5);
    RunConfig {
        seed,
        lr: 1e-3,
        train: shape,
        test: shape,
        eval_interval: 0,
        eval_episodes: 10,
        model: ModelSpec { hidden: 16, blocks: 4 },
        dataset: small_dataset(0.15, 2.0, 16),
        ..Default::default()
    }
}

fn autoencoder(lambda: f64, decoder: DecoderVariant, images: AeImages) -> Vec<MetaTaskSpec> {
    vec![MetaTaskSpec::autoencoder(lambda, decoder, images)]
}

fn with_paths(mut cfg: RunConfig, dir: &Path) -> RunConfig {
    cfg.metrics_log = dir.join("metrics.jsonl");
    cfg.summary_csv = dir.join("summary.csv");
    cfg.predictions_log = dir.join("predictions.jsonl");
    cfg.checkpoint = dir.join("model.ckpt");
    cfg
}

/// Per-episode fingerprint: task loss bits, accuracy bits and model checksum.
fn trajectory(cfg: RunConfig, episodes: usize) -> Vec<(u64, u64, u64)> {
    let mut t = Trainer::<f64>::new(cfg).unwrap();
    (0..episodes)
        .map(|_| {
            let r = t.step().unwrap();
            (r.loss_task.to_bits(), r.accuracy.to_bits(), t.model().params().checksum())
        })
        .collect()
}

fn first_divergence(a: &[(u64, u64, u64)], b: &[(u64, u64, u64)]) -> Option<usize> {
    a.iter().zip(b).position(|(x, y)| x != y).or((a.len() != b.len()).then_some(a.len().min(b.len())))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// --------------------------------------------------------------- criteria

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let s = gradsuite::run_suite(100, 2024).unwrap();
    let elapsed = t0.elapsed();
    let per_check = s.per_check();
    let fewest = per_check.values().map(|(n, _)| *n).min().unwrap_or(0);
    let bad: Vec<String> = s.failures().iter().map(|f| format!("{}#{}", f.check, f.case)).collect();
    let passed = s.passed() && fewest >= 100 && elapsed < Duration::from_secs(120);
    outcome(
        passed,
        format!(
            "{} checks x {} cases, max rel err {:.2e} (< {:.0e}), {} kink redraws, {:.1}s (< 120s){}",
            per_check.len(),
            fewest,
            s.max_rel_err(),
            SUITE_TOL,
            s.redraws(),
            elapsed.as_secs_f64(),
            if bad.is_empty() { String::new() } else { format!(", failing {bad:?}") }
        ),
    )
}

fn loss_identity() -> Outcome {
    let mut r = rng::stream(11, Stream::Diagnostics);
    let mut worst = 0f64;
    for _ in 0..1000 {
        let (way, shot, query, dim) = (r.random_range(2..=10), r.random_range(1..=5), r.random_range(1..=5), r.random_range(1..=16));
        let scale: f64 = r.random_range(0.1..3.0);
        let normal = Normal::new(0.0, scale).unwrap();
        let sup: Vec<f64> = (0..way * shot * dim).map(|_| normal.sample(&mut r)).collect();
        let qry: Vec<f64> = (0..way * query * dim).map(|_| normal.sample(&mut r)).collect();
        let s_labels: Vec<usize> = (0..way).flat_map(|c| std::iter::repeat_n(c, shot)).collect();
        let mut q_labels: Vec<usize> = (0..way).flat_map(|c| std::iter::repeat_n(c, query)).collect();
        q_labels.shuffle(&mut r);

        let tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::new(vec![way * shot, dim], sup.clone()).unwrap());
        let q = tape.constant(Tensor::new(vec![way * query, dim], qry.clone()).unwrap());
        let out = prototypical_loss(s, &s_labels, q, &q_labels, way, DistanceMetric::Squared, LossReduction::Sum).unwrap();

        // oracle: class means, squared distances, then d_y + log sum exp(-d)
        let protos: Vec<Vec<f64>> = (0..way)
            .map(|c| (0..dim).map(|j| (0..shot).map(|k| sup[(c * shot + k) * dim + j]).sum::<f64>() / shot as f64).collect())
            .collect();
        for (m, &y) in q_labels.iter().enumerate() {
            let d: Vec<f64> = protos.iter().map(|p| (0..dim).map(|j| (qry[m * dim + j] - p[j]).powi(2)).sum()).collect();
            let dmin = d.iter().cloned().fold(f64::INFINITY, f64::min);
            let distance_form = d[y] - dmin + d.iter().map(|v| (dmin - v).exp()).sum::<f64>().ln();
            worst = worst.max((out.summary.per_query_losses[m] - distance_form).abs());
        }
    }
    let mut uniform_worst = 0f64;
    for way in 2..=20 {
        let tape = Tape::<f64>::new();
        let e = tape.constant(Tensor::from_fn(vec![way, 3], |i| (i % 3) as f64 * 0.7));
        let labels: Vec<usize> = (0..way).collect();
        let out = prototypical_loss(e, &labels, e, &labels, way, DistanceMetric::Squared, LossReduction::Sum).unwrap();
        // every query sits on its own prototype and all prototypes coincide
        for l in out.summary.per_query_losses {
            uniform_worst = uniform_worst.max((l - (way as f64).ln()).abs());
        }
    }
    outcome(
        worst < 1e-9 && uniform_worst < 1e-12,
        format!("1000 instances, max |softmax form - distance form| {worst:.2e} (< 1e-9); uniform ln N error {uniform_worst:.2e} (< 1e-12)"),
    )
}

fn composite_loss_suite() -> Outcome {
    // gradient additivity: one backward on the composite against separate
    // backward passes on the task loss and on the reconstruction loss
    let mut r = rng::stream(12, Stream::Diagnostics);
    let (mut worst, mut lib_ok) = (0f64, true);
    for case in 0..25u64 {
        let spec = EncoderSpec {
            in_channels: r.random_range(1..=2),
            height: 8,
            width: 8,
            hidden: r.random_range(2..=4),
            blocks: 2,
        };
        let enc = Encoder::<f64>::init(spec.clone(), &mut rng::indexed(case, Stream::Encoder, 0)).unwrap();
        let variant = if case % 2 == 0 { DecoderVariant::Shallow } else { DecoderVariant::Deep };
        let images = if case % 3 == 0 { AeImages::Support } else { AeImages::All };
        let lambda = r.random_range(0.05..2.0);
        let reg = Registry::<f64>::default().build(&MetaTaskSpec::autoencoder(lambda, variant, images), &spec, case, 0).unwrap();
        let imgs = Tensor::from_fn(vec![6, spec.in_channels, 8, 8], |_| r.random_range(0.0..1.0));

        let tape = Tape::new();
        let pe = enc.params().bind(&tape);
        let pd = reg.params().bind(&tape);
        let x = tape.constant(imgs);
        let emb = enc.forward(&pe, x).unwrap();
        let sup = emb.select_rows(&[0, 1, 2]).unwrap();
        let qry = emb.select_rows(&[3, 4, 5]).unwrap();
        let task = prototypical_loss(sup, &[0, 1, 2], qry, &[2, 0, 1], 3, DistanceMetric::Squared, LossReduction::Sum).unwrap().task_loss;
        let ae = reg.loss(&pd, &RegInput { images: x, embeddings: emb, num_support: 3 }).unwrap();
        let all = Bound::from_vars(pe.vars().iter().chain(pd.vars()).copied().collect());

        let grads = |root| {
            tape.clear_grads();
            tape.backward(root).unwrap();
            let g: Vec<f64> = all.grads(&tape).iter().flat_map(|t| t.data().to_vec()).collect();
            tape.clear_grads();
            g
        };
        let composite = task.add(ae.scale(lambda).unwrap()).unwrap();
        let (gj, gt, gr) = (grads(composite), grads(task), grads(ae));
        for ((j, t), a) in gj.iter().zip(&gt).zip(&gr) {
            worst = worst.max((j - (t + lambda * a)).abs() / j.abs().max(1.0));
        }
        let rep = separability_check(&tape, &all, &[task], &[RegTerm { name: AUTOENCODER, lambda, loss: ae }]).unwrap();
        lib_ok &= rep.passed;
    }

    // zero weight and zero reconstruction rate against the plain run
    let base = small_config(5);
    let baseline = trajectory(base.clone(), 200);
    let zero_lambda = trajectory(
        RunConfig { mode: Mode::Combined, metatasks: autoencoder(0.0, DecoderVariant::Shallow, AeImages::All), ..base.clone() },
        200,
    );
    let zero_rate = trajectory(
        RunConfig {
            mode: Mode::TwoStep,
            autoencoder_lr: 0.0,
            metatasks: autoencoder(1.0, DecoderVariant::Deep, AeImages::All),
            ..base.clone()
        },
        200,
    );
    let d_lambda = first_divergence(&baseline, &zero_lambda);
    let d_rate = first_divergence(&baseline, &zero_rate);
    // sanity: an active regularizer does move the trajectory
    let active = trajectory(
        RunConfig { mode: Mode::Combined, metatasks: autoencoder(1.0, DecoderVariant::Shallow, AeImages::All), ..base },
        5,
    );
    let moved = first_divergence(&baseline[..5], &active).is_some();
    outcome(
        worst < 1e-8 && lib_ok && d_lambda.is_none() && d_rate.is_none() && moved,
        format!(
            "25 cases, max scaled additivity gap {worst:.2e} (< 1e-8); 200 episodes: lambda=0 combined {}, autoencoder_lr=0 two-step {}; active regularizer changes trajectory: {moved}",
            d_lambda.map_or("bit-identical".into(), |i| format!("diverges at episode {}", i + 1)),
            d_rate.map_or("bit-identical".into(), |i| format!("diverges at episode {}", i + 1)),
        ),
    )
}

fn marker_dataset(classes: usize, per_class: usize) -> ClassIndexedDataset<f64> {
    let records = (0..classes)
        .map(|c| ClassRecord {
            id: 1000 + c,
            name: format!("c{c}"),
            images: (0..per_class).map(|i| Arc::new(Tensor::from_fn(vec![1, 1, 2], |k| if k == 0 { c as f64 } else { i as f64 }))).collect(),
        })
        .collect();
    ClassIndexedDataset::new(Split::Train, records).unwrap()
}

fn sampler_suite() -> Outcome {
    let mut r = rng::stream(13, Stream::Diagnostics);
    let mut violations = 0;
    for _ in 0..10_000 {
        let classes = r.random_range(2..=15);
        let way = r.random_range(2..=classes);
        let (shot, query) = (r.random_range(1..=5), r.random_range(1..=5));
        let ds = marker_dataset(classes, shot + query + r.random_range(0..=3));
        let seed: u64 = r.random();
        let ep = sample_episode(&ds, EpisodeShape::new(way, shot, query), &mut rng::stream(seed, Stream::TrainSampler)).unwrap();
        let mut ok = ep.check_invariants().is_ok() && ep.support.len() == way * shot && ep.query.len() == way * query;
        // independent re-check of the bijection and disjointness from pixel markers
        let mut seen = std::collections::HashSet::new();
        for it in ep.support.iter().chain(&ep.query) {
            let (c, i) = (it.image.data()[0] as usize, it.image.data()[1] as usize);
            ok &= ep.class_map[it.label] == 1000 + c && seen.insert((c, i));
        }
        let labels: std::collections::HashSet<_> = ep.class_map.iter().collect();
        ok &= labels.len() == way;
        violations += !ok as usize;
    }

    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let (classes, way, draws) = (20, 5, 20_000);
    let ds = marker_dataset(classes, 2);
    let mut counts = vec![0f64; classes];
    let mut sr = rng::stream(14, Stream::TrainSampler);
    for _ in 0..draws {
        for id in sample_episode(&ds, EpisodeShape::new(way, 1, 1), &mut sr).unwrap().class_map {
            counts[id - 1000] += 1.0;
        }
    }
    let expected = (draws * way) as f64 / classes as f64;
    let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    let critical = ChiSquared::new((classes - 1) as f64).unwrap().inverse_cdf(0.999);
    outcome(
        violations == 0 && chi2 < critical,
        format!("10000 random (N,K,Q,seed) draws, {violations} invariant violations; class-selection chi2 {chi2:.2} < {critical:.2} (alpha=0.001, df={})", classes - 1),
    )
}

/// Nearest class-mean accuracy in pixel space: first half of each class
/// forms the mean, the second half is classified.
fn pixel_nearest_mean(ds: &ClassIndexedDataset<f64>) -> f64 {
    let half = ds.classes()[0].images.len() / 2;
    let means: Vec<Vec<f64>> = ds
        .classes()
        .iter()
        .map(|c| {
            let n = c.images[0].numel();
            (0..n).map(|j| c.images[..half].iter().map(|im| im.data()[j]).sum::<f64>() / half as f64).collect()
        })
        .collect();
    let (mut correct, mut total) = (0, 0);
    for (ci, c) in ds.classes().iter().enumerate() {
        for im in &c.images[half..] {
            let d: Vec<f64> = means.iter().map(|m| m.iter().zip(im.data()).map(|(a, b)| (a - b).powi(2)).sum()).collect();
            correct += ((0..d.len()).min_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap() == ci) as usize;
            total += 1;
        }
    }
    correct as f64 / total as f64
}

fn training_smoke() -> Outcome {
    let shape = EpisodeShape::new(5, 1, 15);
    let dataset = SyntheticSpec { noise_sigma: 0.05, ..Default::default() };
    let cfg = RunConfig {
        seed: 0,
        lr: 1e-4,
        train: shape,
        test: shape,
        eval_interval: 0,
        dataset: DatasetSpec::Synthetic(dataset.clone()),
        ..Default::default()
    };
    let (every, test_episodes, budget) = (250, 300, Duration::from_secs(20 * 60));
    let t0 = Instant::now();
    let mut t = Trainer::<f64>::new(cfg).unwrap();
    let oracle = pixel_nearest_mean(t.data().get(Split::Test));
    let mut reached = None;
    let mut history = Vec::new();
    while t.episode() < 2000 && reached.is_none() {
        t.step().unwrap();
        if t.episode().is_multiple_of(every) {
            let acc = t.evaluate(Split::Test, shape, test_episodes, "test").unwrap().summary.acc_mean;
            history.push(format!("{}:{acc:.3}", t.episode()));
            if acc >= 0.80 {
                reached = Some((t.episode(), acc));
            }
        }
    }
    let elapsed = t0.elapsed();

    let chance = evaluate(
        &EmbeddingStub::Random { dim: 64, seed: 3 },
        t.data().get(Split::Test),
        shape,
        1000,
        77,
        "test",
    )
    .unwrap()
    .summary
    .acc_mean;
    let passed = reached.is_some() && elapsed < budget && (chance - 0.2).abs() <= 0.03;
    outcome(
        passed,
        format!(
            "5-way 1-shot, noise 0.05 (pixel nearest-mean {oracle:.3}): test acc by episode [{}] -> {} in {:.0}s (< 1200s); random-embedding chance over 1000 episodes {chance:.4} (0.20 +/- 0.03)",
            history.join(", "),
            reached.map_or("never reached 0.80".into(), |(e, a)| format!("{a:.3} >= 0.80 at episode {e}")),
            elapsed.as_secs_f64(),
        ),
    )
}

fn non_inferiority() -> Outcome {
    let shape = EpisodeShape::new(5, 1, 5);
    let (episodes, test_episodes, window) = (1000, 500, 50);
    let run = |seed: u64, ae: bool| -> (f64, Option<(f64, f64)>) {
        let cfg = RunConfig {
            seed,
            mode: Mode::Combined,
            lr: 1e-4,
            train: shape,
            test: shape,
            eval_interval: 0,
            model: ModelSpec { hidden: 32, blocks: 4 },
            dataset: small_dataset(0.15, 2.0, 16),
            metatasks: if ae { autoencoder(1.0, DecoderVariant::Shallow, AeImages::All) } else { vec![] },
            ..Default::default()
        };
        let mut t = Trainer::<f64>::new(cfg).unwrap();
        let mse: Vec<f64> = (0..episodes).filter_map(|_| t.step().unwrap().loss_ae_raw).collect();
        let acc = t.evaluate(Split::Test, shape, test_episodes, "test").unwrap().summary.acc_mean;
        let smoothed = (!mse.is_empty()).then(|| (mean(&mse[..window]), mean(&mse[mse.len() - window..])));
        (acc, smoothed)
    };
    let (mut base, mut meta, mut ratios) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..5 {
        base.push(run(seed, false).0);
        let (acc, mse) = run(seed, true);
        meta.push(acc);
        let (first, last) = mse.unwrap();
        ratios.push(last / first);
    }
    let (mb, mm) = (mean(&base), mean(&meta));
    let worst_ratio = ratios.iter().cloned().fold(0.0, f64::max);
    outcome(
        mm >= mb - 0.01 && worst_ratio <= 0.5,
        format!(
            "5 seeds, noise 0.15: baseline {mb:.4}, meta-autoencoder {mm:.4} (>= baseline - 0.01; difference {:+.2} pp); smoothed MSE final/initial per seed {:?} (<= 0.50)",
            100.0 * (mm - mb),
            ratios.iter().map(|r| (r * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    )
}

fn square<'t>(_: &'t Tape<f64>, p: &Bound<'t, f64>) -> metareg_core::Result<metareg_core::Var<'t, f64>> {
    p.var(0).square()?.sum()
}

fn maml_suite() -> Outcome {
    let mut theta = ParamSet::new();
    theta.push("theta", Tensor::scalar(1.0f64));
    let one = inner_adapt(&theta, 0.1, 1, square).unwrap().tensors()[0].data()[0];
    let two = inner_adapt(&theta, 0.1, 2, square).unwrap().tensors()[0].data()[0];
    let toy = (one - 0.8).abs() < 1e-12 && (two - 0.64).abs() < 1e-12;

    // zero inner rate on a real model and episode returns the same bits
    let cfg = RunConfig { algo: Algo::Maml, inner_steps: 2, ..small_config(21) };
    let data = cfg.dataset.load::<f64>().unwrap();
    let spec = cfg.model.encoder(data.image_shape());
    let model = MamlModel::new(Encoder::<f64>::init(spec, &mut rng::stream(21, Stream::Encoder)).unwrap(), 5, 21);
    let ep = sample_episode(data.get(Split::Train), cfg.train, &mut rng::stream(21, Stream::TrainSampler)).unwrap();
    let zero = metareg_core::maml::MamlConfig { inner_lr: 0.0, inner_steps: 3, ..Default::default() };
    let adapted = model.adapt(&ep, &zero, LossReduction::Mean).unwrap();
    let identity = adapted.checksum() == model.params().checksum();

    let plain = trajectory(cfg.clone(), 30);
    let mut diverged = Vec::new();
    for mode in [Mode::Combined, Mode::TwoStep] {
        let with_ae = trajectory(
            RunConfig { mode, metatasks: autoencoder(0.0, DecoderVariant::Shallow, AeImages::All), ..cfg.clone() },
            30,
        );
        if let Some(i) = first_divergence(&plain, &with_ae) {
            diverged.push(format!("{mode:?} at episode {}", i + 1));
        }
    }
    outcome(
        toy && identity && diverged.is_empty(),
        format!(
            "quadratic toy one step {one} (0.8), two steps {two} (0.64) within 1e-12: {toy}; alpha=0 identity: {identity}; lambda=0 MAML+AE vs MAML over 30 episodes: {}",
            if diverged.is_empty() { "identical in both modes".to_string() } else { format!("diverged {diverged:?}") }
        ),
    )
}

fn determinism_configs() -> Vec<(&'static str, RunConfig)> {
    let base = RunConfig {
        epochs: 2,
        episodes_per_epoch: 10,
        eval_interval: 10,
        val_episodes: 5,
        eval_episodes: 10,
        autoencoder_lr: 1e-3,
        ..small_config(31)
    };
    vec![
        ("protonet two-step", RunConfig { metatasks: autoencoder(1.0, DecoderVariant::Shallow, AeImages::All), mixed_validation: true, ..base.clone() }),
        (
            "protonet combined",
            RunConfig { mode: Mode::Combined, metric: DistanceMetric::Euclidean, metatasks: autoencoder(0.5, DecoderVariant::Deep, AeImages::Support), ..base.clone() },
        ),
        (
            "maml",
            RunConfig { algo: Algo::Maml, inner_steps: 2, metatasks: autoencoder(1.0, DecoderVariant::Shallow, AeImages::All), ..base },
        ),
    ]
}

fn determinism() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for (name, cfg) in determinism_configs() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        trainer::train::<f64>(with_paths(cfg.clone(), a.path())).unwrap();
        trainer::train::<f64>(with_paths(cfg, b.path())).unwrap();
        let same: Vec<bool> = ["metrics.jsonl", "summary.csv", "predictions.jsonl", "model.ckpt"]
            .iter()
            .map(|f| std::fs::read(a.path().join(f)).unwrap() == std::fs::read(b.path().join(f)).unwrap())
            .collect();
        let lines = std::fs::read_to_string(a.path().join("metrics.jsonl")).unwrap().lines().count();
        ok &= same.iter().all(|&s| s);
        notes.push(format!("{name}: {lines} log lines {}", if same.iter().all(|&s| s) { "byte-identical" } else { "DIFFER" }));
    }
    outcome(ok, format!("{} (metrics, csv, predictions, checkpoint)", notes.join("; ")))
}

fn classification_report_suite() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_paths(RunConfig { epochs: 1, episodes_per_epoch: 50, eval_episodes: 200, ..small_config(41) }, dir.path());
    trainer::train::<f64>(cfg.clone()).unwrap();
    let log: Vec<PredictionRecord> = read_jsonl(&cfg.predictions_log).unwrap();
    let rep = classification_report(&log).unwrap();
    let (mut correct, mut total) = (0usize, 0usize);
    for rec in &log {
        for (y, p) in rec.truth.iter().zip(&rec.predicted) {
            correct += (y == p) as usize;
            total += 1;
        }
    }
    let brute = correct as f64 / total as f64;
    let micro_ok = (rep.micro_accuracy - brute).abs() < 1e-12;

    let data: MetaDataset<f64> = cfg.dataset.load().unwrap();
    let perfect = evaluate(&EmbeddingStub::OneHotLabel, data.get(Split::Test), cfg.test, 50, 3, "test").unwrap();
    let prep = classification_report(&perfect.predictions).unwrap();
    let all_one = prep.classes.iter().all(|c| c.f1 == 1.0 && c.precision == 1.0 && c.recall == 1.0);
    outcome(
        micro_ok && all_one,
        format!(
            "micro accuracy {:.6} vs counted {correct}/{total} = {brute:.6} (within 1e-12: {micro_ok}); all-correct log: f1 = 1.0 for all {} classes: {all_one}",
            rep.micro_accuracy,
            prep.classes.len()
        ),
    )
}

fn evaluation_is_read_only() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for (name, cfg) in determinism_configs() {
        let mut t = Trainer::<f64>::new(RunConfig { eval_interval: 0, ..cfg.clone() }).unwrap();
        for _ in 0..5 {
            t.step().unwrap();
        }
        let fingerprint = |t: &Trainer<f64>| t.checkpoint().params.checksum();
        let before = fingerprint(&t);
        for split in [Split::Val, Split::Test] {
            t.evaluate(split, cfg.test, 5, "check").unwrap();
        }
        let after = fingerprint(&t);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        t.checkpoint().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let ckpt = Checkpoint::<f64>::load(&path).unwrap();
        let loaded = ckpt.params.checksum();
        trainer::evaluate_checkpoint(&ckpt, Split::Test, cfg.test, 5, 9).unwrap();
        let same = before == after && loaded == before && ckpt.params.checksum() == loaded && std::fs::read(&path).unwrap() == bytes;
        ok &= same;
        notes.push(format!("{name}: {}", if same { "unchanged" } else { "CHANGED" }));
    }
    outcome(ok, format!("checksums before/after evaluation: {}", notes.join("; ")))
}
