//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thaw_core::data::{next_batch, sample_epoch, AugmentSpec};
use thaw_core::nn::{argmax_rows, finite_diff_check, finite_diff_check_loss, Layer, Mode};
use thaw_core::plasticity::{sp_loss, ControllerParams, Decision, PlasticityController};
use thaw_core::quant::{
    dequantize_tensor, quantize_tensor, reference_forward, ReferenceGenerator, ReferencePrecision,
};
use thaw_core::Tensor;
use thaw_runtime::cache::{ActivationCache, CacheConfig, PrefetchSchedule};
use thaw_train::{
    allreduce_bytes, allreduce_grads, evaluate, prepare_data, train, EventKind, TrainConfig,
    TrainOutcome,
};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn run(cfg: &TrainConfig) -> Result<TrainOutcome, String> {
    train(cfg).map_err(|e| e.to_string())
}

/// The blobs setup: 4 classes, 4000 samples, 30 epochs, step decay at 15 and 25.
fn blobs_toml(out: &Path, seed: u64, extra: &str) -> String {
    format!(
        r#"seed = {seed}
out = "{}"

[model]
kind = "toy_cnn"

[data]
source = "blobs"
classes = 4
per_class = 1000
shape = [1, 8, 8]
stddev = 0.3
seed = {}

[train]
epochs = 30
batch_size = 32

[lr]
base = 0.05
schedule = "step"
decay = 0.1
milestones = [15, 25]
{extra}"#,
        out.display(),
        seed + 10
    )
}

fn config(text: &str) -> Result<TrainConfig, String> {
    TrainConfig::from_toml(text).map_err(|e| e.to_string())
}

fn sp_oracle(a: &[f64], c: &[f64], b: usize, d: usize) -> f64 {
    let gram = |x: &[f64]| {
        let mut g = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                for k in 0..d {
                    g[i * b + j] += x[i * d + k] * x[j * d + k];
                }
            }
            let norm = g[i * b..(i + 1) * b]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > 0.0 {
                for v in &mut g[i * b..(i + 1) * b] {
                    *v /= norm;
                }
            }
        }
        g
    };
    let (x, y) = (gram(a), gram(c));
    x.iter()
        .zip(&y)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        / (b * b) as f64
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
    )
    .unwrap()
}

fn orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Tensor<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    while rows.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for u in &rows {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            rows.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    Tensor::new(vec![d, d], rows.concat()).unwrap()
}

fn sp_loss_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut diff, mut self_d, mut scale_d, mut rot_d) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for case in 0..100 {
        let b = [2, 4, 8][case % 3];
        let d = [3, 16, 64][(case / 3) % 3];
        let x = random(&mut rng, &[b, d]);
        let y = random(&mut rng, &[b, d]);
        let got = sp_loss(&x, &y).map_err(|e| e.to_string())?;
        diff = diff.max((got - sp_oracle(x.data(), y.data(), b, d)).abs());
        self_d = self_d.max(sp_loss(&x, &x).unwrap().abs());
        let c = rng.random_range(0.1..10.0);
        scale_d = scale_d.max((sp_loss(&x.scale(c), &y).unwrap() - got).abs());
        let q = orthogonal(&mut rng, d);
        rot_d = rot_d.max((sp_loss(&x.matmul(&q).unwrap(), &y).unwrap() - got).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(diff <= 1e-6, format!("max abs diff {diff:e}"))?;
    ensure(self_d == 0.0, format!("sp_loss(A, A) = {self_d:e}"))?;
    ensure(scale_d <= 1e-6, format!("scale invariance {scale_d:e}"))?;
    ensure(rot_d <= 1e-6, format!("rotation invariance {rot_d:e}"))?;
    ensure(secs < 10.0, format!("took {secs:.1}s"))?;
    Ok(format!(
        "max diff {diff:.1e}, scale {scale_d:.1e}, rotation {rot_d:.1e}, {secs:.2}s"
    ))
}

fn gradients() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut layers: Vec<Layer<f64>> = vec![
        Layer::dense("dense", 6, 4, &mut rng),
        Layer::conv2d("conv2d", 2, 3, 3, 1, &mut rng),
        Layer::relu("relu"),
        Layer::maxpool2d("maxpool"),
        Layer::batchnorm("batchnorm", 3),
    ];
    let mut worst = Vec::new();
    for l in &mut layers {
        let e = finite_diff_check(l, 1e-5).map_err(|e| e.to_string())?;
        worst.push((l.name().to_string(), e));
    }
    worst.push((
        "softmax_ce".into(),
        finite_diff_check_loss::<f64>(8, 5, 1e-5).map_err(|e| e.to_string())?,
    ));
    let secs = start.elapsed().as_secs_f64();
    for (name, e) in &worst {
        ensure(*e <= 1e-3, format!("{name}: relative error {e:e}"))?;
    }
    ensure(secs < 30.0, format!("took {secs:.1}s"))?;
    let max = worst.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(format!("worst relative error {max:.1e}, {secs:.2}s"))
}

struct Pair {
    frozen: TrainOutcome,
    base: TrainOutcome,
}

fn freezing_preserves_accuracy(root: &Path) -> (Check, Option<TrainOutcome>) {
    let start = Instant::now();
    let mut pairs = Vec::new();
    for seed in 1..=3u64 {
        let extra = "\n[controller]\nstrict_decisions = true\n";
        let frozen = config(&blobs_toml(&root.join(format!("c3_f{seed}")), seed, extra))
            .and_then(|c| run(&c));
        let base = config(&blobs_toml(&root.join(format!("c3_b{seed}")), seed, extra)).and_then(
            |mut c| {
                c.freeze = false;
                run(&c)
            },
        );
        match (frozen, base) {
            (Ok(frozen), Ok(base)) => pairs.push(Pair { frozen, base }),
            (Err(e), _) | (_, Err(e)) => return (Err(e), None),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let mean = |f: &dyn Fn(&Pair) -> f64| pairs.iter().map(f).sum::<f64>() / pairs.len() as f64;
    let acc_f = mean(&|p| p.frozen.final_val_accuracy().unwrap_or(0.0));
    let acc_b = mean(&|p| p.base.final_val_accuracy().unwrap_or(0.0));
    let bwd = |o: &TrainOutcome| o.metrics.iter().map(|r| r.bwd_flops as f64).sum::<f64>();
    let saved = 1.0
        - pairs.iter().map(|p| bwd(&p.frozen)).sum::<f64>()
            / pairs.iter().map(|p| bwd(&p.base)).sum::<f64>();
    let freezes: Vec<usize> = pairs
        .iter()
        .map(|p| p.frozen.count(EventKind::Freeze))
        .collect();
    let unfreezes: Vec<usize> = pairs
        .iter()
        .map(|p| p.frozen.count(EventKind::UnfreezeAll))
        .collect();
    let summary = format!(
        "accuracy {:.2} vs baseline {:.2} (per seed {}), bwd FLOPs saved {:.1}%, freezes {freezes:?}, unfreezes {unfreezes:?}, {secs:.0}s",
        100.0 * acc_f,
        100.0 * acc_b,
        pairs
            .iter()
            .map(|p| format!(
                "{:+.2}",
                100.0 * (p.frozen.final_val_accuracy().unwrap_or(0.0) - p.base.final_val_accuracy().unwrap_or(0.0))
            ))
            .collect::<Vec<_>>()
            .join("/"),
        100.0 * saved
    );
    let verdict = (|| {
        ensure(acc_f >= acc_b - 0.010, "accuracy dropped by more than 1 pt")?;
        ensure(saved >= 0.20, "backward FLOPs saved below 20%")?;
        ensure(freezes.iter().all(|&f| f >= 1), "a run never froze")?;
        ensure(
            unfreezes.iter().all(|&u| u >= 1),
            "a run never unfroze on the LR drop",
        )?;
        ensure(secs < 900.0, "over 15 minutes")
    })();
    let model = pairs.into_iter().next().map(|p| p.base);
    (
        verdict
            .map(|_| summary.clone())
            .map_err(|e| format!("{e}: {summary}")),
        model,
    )
}

fn scripted_trace() -> Check {
    let params = ControllerParams {
        window: 3,
        ..ControllerParams::default()
    };
    let mut c = PlasticityController::new(params, 3).map_err(|e| e.to_string())?;
    // (plasticity, lr, decision, stale counter afterwards)
    let script: &[(f64, f64, &str, usize)] = &[
        (1.0, 0.1, "-", 0),
        (0.4, 0.1, "-", 0),
        (0.1, 0.1, "-", 0),
        (0.1, 0.1, "-", 0),
        (0.1, 0.1, "-", 0),
        (0.1, 0.1, "-", 1),
        (0.1, 0.1, "-", 2),
        (1.0, 0.1, "-", 0),
        (0.1, 0.1, "-", 0),
        (0.1, 0.1, "-", 1),
        (0.1, 0.1, "-", 0),
        (0.1, 0.1, "-", 0),
        (0.1, 0.1, "-", 1),
        (0.1, 0.1, "-", 2),
        (0.1, 0.1, "freeze 0", 0),
        (0.5, 0.1, "-", 0),
        (0.5, 0.1, "-", 0),
        (0.5, 0.1, "-", 0),
        (0.5, 0.02, "-", 1),
        (0.5, 0.01, "unfreeze_all 1", 0),
        (0.5, 0.01, "-", 0),
    ];
    for (i, &(p, lr, want, counter)) in script.iter().enumerate() {
        let e = c.observe(p, lr);
        let got = match e.decision {
            Decision::None => "-".to_string(),
            Decision::Freeze { module, .. } => format!("freeze {module}"),
            Decision::UnfreezeAll { from_module } => format!("unfreeze_all {from_module}"),
        };
        ensure(
            got == want,
            format!("step {}: got {got}, expected {want}", i + 1),
        )?;
        ensure(
            e.stale_counter == counter,
            format!(
                "step {}: counter {} expected {counter}",
                i + 1,
                e.stale_counter
            ),
        )?;
    }
    ensure(
        c.state().window == 1,
        format!("window {} after unfreeze, expected 1", c.state().window),
    )?;
    Ok(format!("{} steps match, window 3 -> 1", script.len()))
}

fn cache_equivalence(root: &Path) -> Check {
    let start = Instant::now();
    let cfg = config(&blobs_toml(&root.join("c5"), 4, ""))?;
    let (train_set, _) = prepare_data(&cfg).map_err(|e| e.to_string())?;
    let mut model = cfg
        .build_model(train_set.sample_shape(), train_set.classes)
        .map_err(|e| e.to_string())?;
    let frontmost = 2;
    model
        .set_frontmost_active(frontmost)
        .map_err(|e| e.to_string())?;
    let aug = AugmentSpec {
        hflip: Some(0.5),
        pad_crop: None,
    };
    let mut cache = ActivationCache::open(CacheConfig::new(root.join("c5_cache"), 0))
        .map_err(|e| e.to_string())?;
    let (boundary, version) = (frontmost as u32 - 1, 1u32);
    let mut peak = 0;

    let s0 =
        sample_epoch(&train_set, cfg.seed, 0, 0, 1, cfg.batch_size).map_err(|e| e.to_string())?;
    for i in 0..s0.num_batches() {
        let b = next_batch(&train_set, &s0, i, &aug, cfg.seed).map_err(|e| e.to_string())?;
        let a = model
            .forward_range(&b.inputs, 0, frontmost, Mode::Inference)
            .map_err(|e| e.to_string())?;
        cache
            .put(0, i as u32, &b.sample_ids, &a, boundary, version)
            .map_err(|e| e.to_string())?;
        peak = peak.max(cache.resident_len());
    }

    let s1 =
        sample_epoch(&train_set, cfg.seed, 1, 0, 1, cfg.batch_size).map_err(|e| e.to_string())?;
    let (mut hits, mut mismatched) = (0usize, 0usize);
    for i in 0..s1.num_batches() {
        let b = next_batch(&train_set, &s1, i, &aug, cfg.seed).map_err(|e| e.to_string())?;
        let cached = cache.get(&b.sample_ids, boundary, version);
        peak = peak.max(cache.resident_len());
        let recomputed = model
            .forward_range(&b.inputs, 0, frontmost, Mode::Inference)
            .map_err(|e| e.to_string())?;
        let (want, _) = model
            .forward_from(&recomputed, frontmost, Mode::Inference, None)
            .map_err(|e| e.to_string())?;
        if let Some(a) = cached {
            hits += 1;
            let (got, _) = model
                .forward_from(&a, frontmost, Mode::Inference, None)
                .map_err(|e| e.to_string())?;
            let same = got
                .data()
                .iter()
                .zip(want.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            if !same || got.shape() != want.shape() {
                mismatched += 1;
            }
        }
        let upcoming = s1.lookahead(i, 2);
        cache.prefetch(&PrefetchSchedule { upcoming, depth: 2 }, boundary, version);
    }
    let batches = s1.num_batches();

    let mut stale = 0;
    for i in 0..batches {
        let ids = s1.batch_ids(i).map_err(|e| e.to_string())?;
        if cache.get(ids, boundary, version + 1).is_some() {
            stale += 1;
        }
        peak = peak.max(cache.resident_len());
    }
    let stats = cache.stats();
    peak = peak.max(stats.resident_peak);

    // Same training run with and without the cache must produce identical losses.
    let extra = "\n[controller]\nn = 4\nwindow = 3\nstrict_decisions = true\n";
    let mut with = config(&blobs_toml(&root.join("c5_on"), 4, extra))?;
    with.epochs = 8;
    let mut without = with.clone();
    without.out = root.join("c5_off");
    without.cache.enabled = false;
    let on = run(&with)?;
    let off = run(&without)?;
    let run_hits: u64 = on.metrics.iter().map(|r| r.cache_hits).sum();
    let losses_equal = on.metrics.len() == off.metrics.len()
        && on
            .metrics
            .iter()
            .zip(&off.metrics)
            .all(|(a, b)| a.loss.to_bits() == b.loss.to_bits());
    let run_peak = on.cache.iter().map(|s| s.resident_peak).max().unwrap_or(0);
    let secs = start.elapsed().as_secs_f64();

    let summary = format!(
        "{hits}/{batches} epoch hits bitwise equal, peak resident {}, stale hits {stale}, training run {run_hits} hits with identical losses, {secs:.1}s",
        peak.max(run_peak)
    );
    ensure(
        hits == batches,
        format!("only {hits}/{batches} batches hit: {summary}"),
    )?;
    ensure(mismatched == 0, format!("{mismatched} batches differ"))?;
    ensure(
        peak <= 5 && run_peak <= 5,
        format!("resident window reached {}", peak.max(run_peak)),
    )?;
    ensure(stale == 0, format!("{stale} stale hits"))?;
    ensure(run_hits > 0, "training run never hit the cache")?;
    ensure(
        losses_equal,
        "cached training run diverged from the uncached one",
    )?;
    ensure(secs < 120.0, format!("took {secs:.1}s"))?;
    Ok(summary)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn non_blocking(root: &Path) -> Check {
    const REPEATS: usize = 4;
    // A window no run can fill keeps both runs on identical work: the
    // controller evaluates but never freezes. n is the automatic interval a
    // W = 10 run of this length would use.
    let cfg = |stall: u64, rep: usize| -> Result<TrainConfig, String> {
        let extra = format!("\n[controller]\nn = 32\nwindow = 1000\nstall_ms = {stall}\n");
        let mut c = config(&blobs_toml(
            &root.join(format!("c6_{stall}_{rep}")),
            6,
            &extra,
        ))?;
        c.epochs = 45;
        c.cache.enabled = false;
        Ok(c)
    };
    let (mut rows, mut totals) = ([Vec::new(), Vec::new()], [f64::INFINITY; 2]);
    let mut late = 0;
    for rep in 0..REPEATS {
        for (slot, stall) in [0u64, 5000].into_iter().enumerate() {
            let c = cfg(stall, rep)?;
            let t = Instant::now();
            let o = run(&c)?;
            totals[slot] = totals[slot].min(t.elapsed().as_secs_f64());
            ensure(
                o.events.iter().all(|e| e.kind == EventKind::Stage),
                "a run froze",
            )?;
            if stall > 0 {
                late += o.runtime.late_decisions + o.runtime.toq_evictions + o.runtime.iq_evictions;
            }
            rows[slot].extend(o.metrics.iter().map(|r| r.wall_ms));
        }
    }
    let (m0, m1) = (median(rows[0].clone()), median(rows[1].clone()));
    let change = (m1 - m0).abs() / m0;
    let growth = totals[1] - totals[0];
    let summary = format!(
        "median {m0:.4} ms -> {m1:.4} ms ({:+.2}%), best wall {:.2}s -> {:.2}s ({growth:+.3}s), {late} late/evicted under stall",
        100.0 * (m1 - m0) / m0,
        totals[0],
        totals[1]
    );
    ensure(
        change < 0.05,
        format!(
            "median latency changed by {:.2}%: {summary}",
            100.0 * change
        ),
    )?;
    ensure(
        growth < 0.25,
        format!("wall time grew by {growth:.3}s: {summary}"),
    )?;
    ensure(
        late > 0,
        format!("the stall never delayed a reply: {summary}"),
    )?;
    Ok(summary)
}

fn quantization(model: Option<&TrainOutcome>, root: &Path) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for i in 0..1000 {
        let len = rng.random_range(1..256);
        let range: f32 = 10f32.powf(rng.random_range(-3.0..3.0));
        let t = Tensor::<f32>::new(
            vec![len],
            (0..len).map(|_| rng.random_range(-range..range)).collect(),
        )
        .unwrap();
        let q = quantize_tensor(&t).map_err(|e| e.to_string())?;
        let back = dequantize_tensor(&q);
        let half = q.scale() as f64 / 2.0;
        for (j, (&a, &v)) in t.data().iter().zip(q.values()).enumerate() {
            let err = (a as f64 - v as f64 * q.scale() as f64).abs();
            ensure(
                err <= half,
                format!("tensor {i} element {j}: error {err:e} > scale/2 {half:e}"),
            )?;
        }
        ensure(back.shape() == t.shape(), "shape changed")?;
    }

    let Some(outcome) = model else {
        return Err("no converged model available".into());
    };
    let cfg = config(&blobs_toml(&root.join("c3_b1"), 1, ""))?;
    let (_, val) = prepare_data(&cfg).map_err(|e| e.to_string())?;
    let float_acc = evaluate(&outcome.model, &val).map_err(|e| e.to_string())?;
    let reference = ReferenceGenerator::new(ReferencePrecision::Int8)
        .snapshot(&outcome.model, 0)
        .map_err(|e| e.to_string())?;
    let last = outcome.model.num_modules() - 1;
    let mut correct = 0;
    let n = val.len();
    let mut start = 0;
    while start < n {
        let end = (start + 256).min(n);
        let x = val
            .samples
            .slice_rows(start, end)
            .map_err(|e| e.to_string())?;
        let logits = reference_forward(&reference, &x, last).map_err(|e| e.to_string())?;
        correct += argmax_rows(&logits)
            .iter()
            .zip(&val.labels[start..end])
            .filter(|(p, l)| p == l)
            .count();
        start = end;
    }
    let q_acc = correct as f64 / n as f64;
    let gap = 100.0 * (float_acc - q_acc);
    let summary = format!(
        "round trip within scale/2 on 1000 tensors, int8 top-1 {:.2} vs float {:.2} ({gap:+.2} pt)",
        100.0 * q_acc,
        100.0 * float_acc
    );
    ensure(gap.abs() <= 3.0, summary.clone())?;
    Ok(summary)
}

fn communication(root: &Path) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let grads: Vec<Vec<Tensor<f32>>> = (0..4)
        .map(|_| {
            [vec![16, 8], vec![8], vec![3, 3, 2]]
                .iter()
                .map(|s| {
                    let n = s.iter().product();
                    Tensor::new(
                        s.clone(),
                        (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
                    )
                    .unwrap()
                })
                .collect()
        })
        .collect();
    let (mean, _) = allreduce_grads(&grads).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (t, m) in mean.iter().enumerate() {
        for (i, &v) in m.data().iter().enumerate() {
            let naive = grads.iter().map(|w| w[t].data()[i] as f64).sum::<f64>() / 4.0;
            worst = worst.max((v as f64 - naive).abs());
        }
    }
    ensure(worst <= 1e-7, format!("all-reduce mean off by {worst:e}"))?;

    let extra = "\n[controller]\nstrict_decisions = true\n";
    let mut cfg = config(&blobs_toml(&root.join("c8"), 2, extra))?;
    cfg.workers = 4;
    let o = run(&cfg)?;
    let total = o.model.param_count();
    let full = allreduce_bytes(total, 4);
    let mut checked = 0;
    for r in &o.metrics {
        let frozen: usize = o.model.modules()[..r.frontmost_active]
            .iter()
            .map(|m| m.param_count())
            .sum();
        ensure(
            r.bytes_allreduced == allreduce_bytes(total - frozen, 4),
            format!(
                "iteration {}: {} bytes, expected {}",
                r.iteration,
                r.bytes_allreduced,
                allreduce_bytes(total - frozen, 4)
            ),
        )?;
        let drop = 1.0 - r.bytes_allreduced / full;
        ensure(
            (drop - r.frozen_param_fraction).abs() <= 1e-12,
            format!(
                "iteration {}: bytes dropped {drop}, frozen fraction {}",
                r.iteration, r.frozen_param_fraction
            ),
        )?;
        checked += 1;
    }
    let freezes = o.count(EventKind::Freeze);
    ensure(freezes >= 1, "no freeze event with 4 workers")?;
    let fractions: Vec<String> = {
        let mut seen = Vec::new();
        for r in &o.metrics {
            let f = format!("{:.3}", r.frozen_param_fraction);
            if seen.last() != Some(&f) {
                seen.push(f);
            }
        }
        seen
    };
    Ok(format!(
        "mean within {worst:.1e}, {checked} rows match, {freezes} freezes, frozen fraction path {}",
        fractions.join(" -> ")
    ))
}

fn strip_wall(csv: &str) -> Result<Vec<String>, String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().ok_or("empty csv")?.split(',').collect();
    let col = header
        .iter()
        .position(|h| *h == "wall_ms")
        .ok_or("no wall_ms column")?;
    Ok(lines
        .map(|l| {
            l.split(',')
                .enumerate()
                .filter(|(i, _)| *i != col)
                .map(|(_, f)| f)
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect())
}

fn determinism(root: &Path) -> Check {
    let mut outs = Vec::new();
    for r in 0..2 {
        let extra = "\n[controller]\nstrict_decisions = true\n";
        let mut cfg = config(&blobs_toml(&root.join(format!("c9_{r}")), 5, extra))?;
        cfg.workers = 2;
        cfg.epochs = 20;
        cfg.lr = thaw_core::nn::LrSchedule::step_decay(0.05, 0.1, vec![10, 16])
            .map_err(|e| e.to_string())?;
        let o = run(&cfg)?;
        let metrics =
            std::fs::read_to_string(cfg.out.join("metrics.csv")).map_err(|e| e.to_string())?;
        let log =
            std::fs::read_to_string(cfg.out.join("decisions.log")).map_err(|e| e.to_string())?;
        outs.push((strip_wall(&metrics)?, log, o.events.len()));
    }
    let (a, b) = (&outs[0], &outs[1]);
    ensure(a.0.len() == b.0.len(), "metrics row counts differ")?;
    if let Some(i) = a.0.iter().zip(&b.0).position(|(x, y)| x != y) {
        return Err(format!("metrics differ at row {i}"));
    }
    ensure(a.1 == b.1, "decision logs differ")?;
    ensure(a.2 > 1, "run produced no freeze decisions to compare")?;
    Ok(format!(
        "{} rows and {} decision lines identical",
        a.0.len(),
        a.1.lines().count()
    ))
}

fn main() -> ExitCode {
    // Only run under `cargo test`; listing (`--list`) must not train anything.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let dir = tempfile::tempdir().expect("temp dir");
    let root = dir.path();
    let mut results: Vec<(usize, &str, Check)> = Vec::new();
    let mut report = |n: usize, name: &'static str, r: Check| {
        match &r {
            Ok(s) => println!("criterion {n} {name}: PASS ({s})"),
            Err(s) => println!("criterion {n} {name}: FAIL ({s})"),
        }
        results.push((n, name, r));
    };

    report(1, "sp-loss oracle", sp_loss_oracle());
    report(2, "gradient checks", gradients());
    let (c3, converged) = freezing_preserves_accuracy(root);
    report(3, "freezing preserves accuracy", c3);
    report(4, "scripted controller trace", scripted_trace());
    report(5, "cache equivalence", cache_equivalence(root));
    report(6, "non-blocking controller", non_blocking(root));
    report(
        7,
        "quantization bounds",
        quantization(converged.as_ref(), root),
    );
    report(8, "communication accounting", communication(root));
    report(9, "determinism", determinism(root));

    let failed = results.iter().filter(|(_, _, r)| r.is_err()).count();
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
