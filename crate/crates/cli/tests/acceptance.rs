//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary so the lines always print under `cargo test`.
//! Exits nonzero when any criterion fails.

use ehdl_core::accel_sim::{Continuous, Device, DeviceConfig, Event, OpKind};
use ehdl_core::bcm_kernel::{bcm_block_matvec, bcm_fc_layer};
use ehdl_core::fxp::Q15;
use ehdl_core::inference::{argmax, plan, run_inference};
use ehdl_core::intermittent::{
    run_intermittent, InjectedFailures, IntermittentOptions, IntermittentRun, Outcome, PowerConfig, PowerEnvironment,
    PowerTrace, Scheme, TraceSupply,
};
use ehdl_core::model::{compression_stats, BcmLayer, BcmWeights, LayerDesc, Model};
use ehdl_train::data::{self, synthetic, Dataset};
use ehdl_train::net::{FLayer, FcF, Grads, Network};
use ehdl_train::{admm_prune, cosine_normalize_forward, export_quantized, train, Arch, ExportOptions, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

type Outcome_ = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn cfg() -> DeviceConfig {
    DeviceConfig::default()
}

fn q15(x: &[f64]) -> Vec<Q15> {
    x.iter().map(|&v| Q15::from_f64(v)).collect()
}

/// Untrained network of `arch` folded and quantized through the export path,
/// with one synthetic input.
fn deployed(arch: Arch, seed: u64) -> (Model, Vec<Q15>) {
    let spec = arch.spec();
    let data = synthetic(spec.input, spec.classes, 33, seed);
    let net = Network::init(&spec, seed);
    let ex = export_quantized(&net, &data.take(32), &ExportOptions::default()).expect("export");
    (ex.model, q15(data.sample(32)))
}

fn flex(model: &Model, x: &[Q15], points: Vec<u64>, warn: Option<u64>, scheme: Scheme) -> IntermittentRun {
    let mut f = InjectedFailures::new(points);
    if let Some(l) = warn {
        f = f.with_warning(l);
    }
    run_intermittent(model, x, &cfg(), Box::new(f), scheme, IntermittentOptions::default()).expect("run")
}

fn continuous_events(model: &Model, x: &[Q15], scheme: Scheme) -> IntermittentRun {
    let opts = IntermittentOptions { events: true, ..IntermittentOptions::default() };
    run_intermittent(model, x, &cfg(), Box::new(Continuous), scheme, opts).expect("run")
}

fn criterion_1() -> Outcome_ {
    let t = Instant::now();
    let rows = [(16, 65536, "93.75%"), (32, 32768, "96.87%"), (64, 16384, "98.43%"), (128, 8192, "99.21%"), (256, 4096, "99.60%")];
    for (k, bytes, pct) in rows {
        let e = compression_stats(&LayerDesc::fc(512, 512, k), 4);
        ensure!(e.original_bytes == 1_048_576, "k={k}: original {}", e.original_bytes);
        ensure!(e.compressed_bytes == bytes, "k={k}: {} bytes", e.compressed_bytes);
        ensure!(e.reduction_percent() == pct, "k={k}: {}", e.reduction_percent());
    }
    let el = t.elapsed();
    ensure!(el < Duration::from_secs(1), "took {el:?}");
    Ok(format!("5 rows exact, 65536 B/93.75% .. 4096 B/99.60% in {el:?}"))
}

fn criterion_2() -> Outcome_ {
    let t = Instant::now();
    let mut r = rng(2);
    let mut worst = Vec::new();
    for k in [4usize, 8, 16, 32] {
        let amp = 1.0 / (k as f64).sqrt();
        let (mut max, mut sum, mut n, mut clean) = (0.0f64, 0.0, 0usize, 0usize);
        let mut dev = Device::new(&cfg());
        for _ in 0..1000 {
            let w: Vec<Q15> = (0..k).map(|_| Q15::from_f64(r.random_range(-amp..amp))).collect();
            let x: Vec<Q15> = (0..k).map(|_| Q15::from_f64(r.random_range(-1.0..1.0))).collect();
            let (y, flag) = bcm_block_matvec(&mut dev, &w, &x, 0).map_err(|e| e.to_string())?;
            if !flag.is_clean() {
                continue;
            }
            clean += 1;
            for (row, q) in y.iter().enumerate() {
                let o: f64 = (0..k).map(|c| w[(row + k - c) % k].to_f64() * x[c].to_f64()).sum();
                let e = (q.to_f64() - o).abs();
                max = max.max(e);
                sum += e;
                n += 1;
            }
        }
        let mean = sum / n.max(1) as f64;
        ensure!(clean >= 900, "k={k}: only {clean}/1000 clean blocks");
        ensure!(max <= 2f64.powi(-6), "k={k}: max error {max:.3e}");
        ensure!(mean <= 2f64.powi(-9), "k={k}: mean error {mean:.3e}");
        worst.push(format!("k={k} max 2^{:.1} mean 2^{:.1} ({clean} clean)", max.log2(), mean.log2()));
    }
    ensure!(t.elapsed() < Duration::from_secs(60), "took {:?}", t.elapsed());
    Ok(worst.join(", "))
}

fn criterion_3() -> Outcome_ {
    let mut r = rng(3);
    let mut done = Vec::new();
    for (p, q, k) in [(1, 1, 8), (2, 3, 8), (4, 2, 16), (2, 2, 128), (3, 5, 4)] {
        let w: Vec<Q15> = (0..p * q * k).map(|_| Q15::from_f64(r.random_range(-0.05..0.05))).collect();
        let layer = BcmLayer { rows: p * k, cols: q * k, k, weights: BcmWeights::Time(w), bias: None, weight_exp: 0 };
        let x: Vec<Q15> = (0..q * k).map(|_| Q15::from_f64(r.random_range(-0.5..0.5))).collect();
        let mut dev = Device::new(&cfg());
        bcm_fc_layer(&mut dev, &layer, &x).map_err(|e| e.to_string())?;
        let pq = (p * q) as u64;
        let l = &dev.ledger;
        ensure!(l.ops(OpKind::Fft) == 2 * pq, "{p}x{q} k={k}: {} FFT", l.ops(OpKind::Fft));
        ensure!(l.ops(OpKind::Ifft) == pq, "{p}x{q} k={k}: {} IFFT", l.ops(OpKind::Ifft));
        ensure!(l.ops(OpKind::Mpy) == pq, "{p}x{q} k={k}: {} MPY", l.ops(OpKind::Mpy));
        ensure!(l.ops(OpKind::Mac) == 0, "{p}x{q} k={k}: MAC issued");
        ensure!(layer.stored_params() == p * q * k, "storage {}", layer.stored_params());
        done.push(format!("{p}x{q}/k{k}"));
    }
    Ok(format!("2pq FFT + pq IFFT + pq MPY, pqk params on {}", done.join(" ")))
}

fn criterion_4() -> Outcome_ {
    let t = Instant::now();
    let pairs = [(Arch::Mnist, 400usize), (Arch::Har, 300), (Arch::Okg, 300)];
    let mut r = rng(4);
    let (mut total, mut warned, mut fired) = (0, 0, 0usize);
    for (arch, count) in pairs {
        let (m, x) = deployed(arch, 40 + arch as u64);
        let golden = run_inference(&m, &x, &cfg()).map_err(|e| e.to_string())?.output;
        let units = flex(&m, &x, vec![], None, Scheme::Flex).device.units();
        for n in 0..count {
            let points: Vec<u64> = (0..r.random_range(1..=5)).map(|_| r.random_range(0..units)).collect();
            let warn = (n % 4 == 3).then(|| r.random_range(1..400));
            let run = flex(&m, &x, points.clone(), warn, Scheme::Flex);
            ensure!(run.output() == Some(&golden[..]), "{arch}: output differs for failures {points:?}");
            ensure!(run.meter.max_per_failure() <= 1, "{arch}: {points:?} re-ran {} ops", run.meter.max_per_failure());
            fired += run.meter.failure_count();
            warned += usize::from(warn.is_some());
            total += 1;
        }
    }
    let (m, x) = deployed(Arch::Mnist, 44);
    let pc = PowerConfig::for_cost(&cfg());
    let starve = Box::new(TraceSupply { env: PowerEnvironment::new(pc, PowerTrace::constant(2000.0, 60e6)) });
    let none = run_intermittent(&m, &x, &cfg(), starve, Scheme::None, IntermittentOptions::default()).map_err(|e| e.to_string())?;
    let reason = match none.outcome {
        Outcome::DidNotFinish(r) => r,
        Outcome::Completed(_) => return Err("NONE finished on the starvation trace".into()),
    };
    let el = t.elapsed();
    ensure!(el < Duration::from_secs(600), "took {el:?}");
    Ok(format!(
        "{total} FLEX schedules on 3 models ({fired} failures, {warned} with warning) bit-identical; NONE starves: {reason:?}; {el:.1?}"
    ))
}

/// Units just inside every IFFT or ADD op of a run: failures there follow a
/// committed stage of the block.
fn late_block_points(m: &Model, x: &[Q15], scheme: Scheme) -> Vec<u64> {
    continuous_events(m, x, scheme)
        .device
        .events()
        .iter()
        .filter_map(|e| match e {
            Event::OpStart { kind: OpKind::Ifft | OpKind::Add, units, .. } => Some(units + 1),
            _ => None,
        })
        .collect()
}

fn criterion_5() -> Outcome_ {
    let mut checked = 0;
    let (mut flex_total, mut base_total) = (0u64, 0u64);
    for (arch, stride) in [(Arch::Mnist, 1usize), (Arch::Okg, 7)] {
        let (m, x) = deployed(arch, 50 + arch as u64);
        let golden = run_inference(&m, &x, &cfg()).map_err(|e| e.to_string())?.output;
        let base_pts = late_block_points(&m, &x, Scheme::Baseline);
        let flex_pts = late_block_points(&m, &x, Scheme::Flex);
        ensure!(base_pts.len() == flex_pts.len() && !base_pts.is_empty(), "{arch}: op streams differ");
        for (b, f) in base_pts.into_iter().zip(flex_pts).step_by(stride) {
            let base = flex(&m, &x, vec![b], None, Scheme::Baseline);
            let fl = flex(&m, &x, vec![f], None, Scheme::Flex);
            ensure!(base.output() == Some(&golden[..]) && fl.output() == Some(&golden[..]), "{arch}: wrong output");
            let bf = base.meter.failures().next().ok_or("baseline saw no failure")?;
            let ff = fl.meter.failures().next().ok_or("FLEX saw no failure")?;
            ensure!(bf.in_bcm && ff.in_bcm, "{arch}: failure outside the BCM layer");
            ensure!(ff.reexecuted_ops <= 1, "{arch}: FLEX re-ran {} ops", ff.reexecuted_ops);
            ensure!(bf.reexecuted_ops >= 4, "{arch}: baseline re-ran only {} ops", bf.reexecuted_ops);
            ensure!(ff.reexecuted_ops < bf.reexecuted_ops, "{arch}: no strict dominance");
            flex_total += ff.reexecuted_ops;
            base_total += bf.reexecuted_ops;
            checked += 1;
        }
    }
    Ok(format!("{checked} in-block failures: FLEX re-ran {flex_total} ops, baseline {base_total}"))
}

fn criterion_6() -> Outcome_ {
    let (m, x) = deployed(Arch::Mnist, 60);
    let units = flex(&m, &x, vec![], None, Scheme::Flex).device.units();
    let (mut worst_share, mut worst_ck, mut failures) = (0.0f64, 0u64, 0usize);
    for seed in 0..8u64 {
        let points = ehdl_cli::failure_schedule(1e-5, units * 50, seed);
        let run = flex(&m, &x, points, None, Scheme::Flex);
        ensure!(run.output().is_some(), "seed {seed}: did not finish");
        let share = run.checkpoint_share();
        ensure!(share <= 0.02, "seed {seed}: checkpoint share {:.3}%", share * 100.0);
        ensure!(run.checkpoints.max_checkpoint_fj <= 33_000_000_000, "seed {seed}: checkpoint {} fJ", run.checkpoints.max_checkpoint_fj);
        worst_share = worst_share.max(share);
        worst_ck = worst_ck.max(run.checkpoints.max_checkpoint_fj);
        failures += run.meter.failure_count();
    }
    ensure!(failures > 0, "no failure fired at this density");
    Ok(format!(
        "8 seeds, {failures} failures over {units} units/run: share <= {:.3}%, largest checkpoint {:.2e} mJ",
        worst_share * 100.0,
        worst_ck as f64 * 1e-12
    ))
}

fn criterion_7() -> Outcome_ {
    let mut out = Vec::new();
    for arch in Arch::ALL {
        let (m, _) = deployed(arch, 70);
        let lens = m.activation_lens().map_err(|e| e.to_string())?;
        let max = *lens.iter().max().unwrap_or(&0);
        let p = plan(&m, &cfg()).map_err(|e| e.to_string())?;
        ensure!(p.activation_high_water == 2 * max * 2, "{arch}: high water {} B, expected {} B", p.activation_high_water, 4 * max);
        out.push(format!("{arch} {} elems", 2 * max));
    }
    Ok(out.join(", "))
}

fn accuracy_q15(model: &Model, net: &Network, test: &Dataset, agree_n: usize) -> Result<(f64, usize), String> {
    let (mut hits, mut agree) = (0usize, 0usize);
    for i in 0..test.len() {
        let x = test.sample(i);
        let out = run_inference(model, &q15(x), &cfg()).map_err(|e| e.to_string())?.output;
        let pred = argmax(&out.iter().map(|q| q.to_f64()).collect::<Vec<_>>());
        hits += usize::from(pred == test.labels[i] as usize);
        if i < agree_n {
            agree += usize::from(pred == net.predict(x));
        }
    }
    Ok((hits as f64 / test.len() as f64, agree))
}

/// `EHDL_DATA`, else the workspace `data/` directory.
fn mnist_root() -> std::path::PathBuf {
    match std::env::var_os("EHDL_DATA") {
        Some(_) => data::data_root(),
        None => std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"),
    }
}

fn criterion_8() -> Outcome_ {
    let t = Instant::now();
    let (train_set, test) = data::load_mnist(&mnist_root())
        .map_err(|e| format!("{e}; fetch MNIST with scripts/fetch_mnist.py or set EHDL_DATA"))?;
    let cfg = TrainConfig { epochs: 8, shift: 1, ..TrainConfig::default() };

    let mut dense = Network::init(&Arch::Mnist.spec().with_fc_block(1), cfg.seed);
    train(&mut dense, &train_set, &cfg).map_err(|e| e.to_string())?;
    let baseline = dense.accuracy(&test);
    ensure!(baseline >= 0.97, "dense baseline {:.2}%", baseline * 100.0);

    let mut net = Network::init(&Arch::Mnist.spec(), cfg.seed);
    train(&mut net, &train_set, &cfg).map_err(|e| e.to_string())?;
    let bcm = net.accuracy(&test);
    ensure!(bcm >= 0.97, "BCM-128 float {:.2}%", bcm * 100.0);
    admm_prune(&mut net, &train_set, &cfg, &Arch::Mnist.default_prune_targets()).map_err(|e| e.to_string())?;
    let pruned = net.accuracy(&test);
    ensure!(bcm - pruned <= 0.01, "pruning cost {:.2} points", (bcm - pruned) * 100.0);
    let FLayer::Conv(conv2) = &net.layers[3] else { return Err("layer 3 is not CONV".into()) };
    ensure!(conv2.retained.as_ref().map(Vec::len) == Some(8), "conv2 keeps {:?}", conv2.retained);

    let ex = export_quantized(&net, &test.take(cfg.calibration_samples), &ExportOptions::default()).map_err(|e| e.to_string())?;
    let (q15_acc, agree) = accuracy_q15(&ex.model, &net, &test, 100)?;
    let drop = baseline - q15_acc;
    ensure!(drop <= 0.015, "Q15 accuracy {:.2}% is {:.2} points below baseline", q15_acc * 100.0, drop * 100.0);
    ensure!(agree >= 98, "float vs Q15 agreement {agree}/100");
    let el = t.elapsed();
    ensure!(el < Duration::from_secs(30 * 60), "took {el:?}");
    Ok(format!(
        "dense {:.2}%, BCM-128 {:.2}%, +2x pruned {:.2}%, Q15 {:.2}% (drop {:.2} pts), agreement {agree}/100, {} test images, {el:.0?}",
        baseline * 100.0,
        bcm * 100.0,
        pruned * 100.0,
        q15_acc * 100.0,
        drop * 100.0,
        test.len()
    ))
}

fn tied_gradient_error(r: &mut ChaCha8Rng, p: usize, q: usize, k: usize) -> f64 {
    const H: f64 = 1e-6;
    let fc = FcF { rows: p * k, cols: q * k, k, w: (0..p * q * k).map(|_| r.random_range(-1.0..1.0)).collect(), gamma: 2.0 };
    let net = Network { arch: None, input: [q * k, 1, 1], classes: p * k, layers: vec![FLayer::Fc(fc)] };
    let x: Vec<f64> = (0..q * k).map(|_| r.random_range(-1.0..1.0)).collect();
    let c: Vec<f64> = (0..p * k).map(|_| r.random_range(-1.0..1.0)).collect();
    let loss = |n: &Network| n.forward(&x).iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
    let mut g = Grads::zeros_like(&net);
    net.backward(&net.forward_trace(&x), c.clone(), &mut g);
    let numeric: Vec<f64> = (0..p * q * k)
        .map(|i| {
            let shifted = |d: f64| {
                let mut n = net.clone();
                if let FLayer::Fc(f) = &mut n.layers[0] {
                    f.w[i] += d;
                }
                loss(&n)
            };
            (shifted(H) - shifted(-H)) / (2.0 * H)
        })
        .collect();
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    g.w[0].iter().zip(&numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs())) / scale
}

fn criterion_9() -> Outcome_ {
    let mut r = rng(9);
    let mut worst = 0.0f64;
    for n in 0..60 {
        let k = [2, 4, 8][n % 3];
        worst = worst.max(tied_gradient_error(&mut r, 1 + n % 3, 1 + n % 4, k));
    }
    ensure!(worst <= 1e-5, "tied gradient relative error {worst:.2e}");
    for _ in 0..100_000 {
        let len = r.random_range(1..32);
        let w: Vec<f64> = (0..len).map(|_| r.random_range(-5.0..5.0)).collect();
        let x: Vec<f64> = (0..len).map(|_| r.random_range(-1.0..1.0)).collect();
        let c = cosine_normalize_forward(&w, &x);
        ensure!((-1.0..=1.0).contains(&c), "cosine {c} out of range");
    }
    for raw in i16::MIN..=i16::MAX {
        let back = Q15::from_f64(Q15(raw).to_f64());
        ensure!(back == Q15(raw), "Q15 {raw} round-trips to {}", back.raw());
    }
    Ok(format!("gradient rel err {worst:.1e} over 60 layers, 1e5 cosine pairs in [-1, 1], 65536 Q15 values round-trip"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome_); 9] = [
        ("compression table", criterion_1),
        ("BCM oracle equivalence", criterion_2),
        ("op counts", criterion_3),
        ("intermittent correctness", criterion_4),
        ("wasted-work dominance", criterion_5),
        ("checkpoint overhead", criterion_6),
        ("circular buffer bound", criterion_7),
        ("desk-scale accuracy", criterion_8),
        ("numerical hygiene", criterion_9),
    ];
    let only: Option<usize> = std::env::var("EHDL_CRITERION").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (n, (name, f)) in criteria.iter().enumerate().map(|(i, c)| (i + 1, c)) {
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match result {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{:.1?}] {detail}", t.elapsed()),
            Err(why) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{:.1?}] {why}", t.elapsed());
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
