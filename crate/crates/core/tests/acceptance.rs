//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any failed.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use proxforge::arch::{param_count, sample_arch, ArchConfig, AutoformerArch, PitArch, SearchSpace};
use proxforge::bench::{
    generate_synthetic, split, BenchStore, CaptureSettings, Link, SyntheticSpec,
};
use proxforge::evolution::{evolve_with, fitness, EvolutionSettings, FitnessContext, Strategy};
use proxforge::metrics::{kendall_tau, pearson_r, spearman_rho};
use proxforge::proxy::{
    builtin_score, check_validity, random_graph, score_network, BuiltinProxy, Proxy, ProxyGraph,
    ProxyScore,
};
use proxforge::rng::{child_rng, rng_from_seed};
use proxforge::search::{sample_candidates, score_candidates, search, select_best};
use proxforge::sim::{capture_statistics, grad_check};
use proxforge::stats::{BatchSpec, NetworkStatistics};
use proxforge::tensor::{apply_binary, apply_unary, BinaryOp, Tensor, UnaryOp};
use rand::seq::IndexedRandom;
use rand::Rng;

use common::{gaussian, random_bundle, tiny_batch};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- criterion 1

fn random_tensor(rng: &mut impl Rng) -> Tensor {
    let scale = *[0.01, 1.0, 5.0].choose(rng).unwrap();
    match rng.random_range(0..10) {
        0 => Tensor::scalar(gaussian(rng, 1, scale)[0]),
        1..=3 => {
            let n = rng.random_range(1..=32);
            Tensor::vector(gaussian(rng, n, scale)).unwrap()
        }
        _ => {
            let (r, c) = (rng.random_range(1..=12), rng.random_range(1..=12));
            Tensor::matrix(r, c, gaussian(rng, r * c, scale)).unwrap()
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Reference formulas written straight from the op table, without the
/// stabilisation tricks of the engine.
fn reference_unary(op: UnaryOp, x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    let z: f64 = x.iter().map(|s| s.exp()).sum();
    let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let each = |f: &dyn Fn(f64) -> f64| x.iter().map(|&v| f(v)).collect::<Vec<f64>>();
    match op {
        UnaryOp::NoOp => x.to_vec(),
        UnaryOp::Abs => each(&|v| if v < 0.0 { -v } else { v }),
        UnaryOp::Tanh => each(&f64::tanh),
        UnaryOp::Pow => each(&|v| v.powi(2)),
        UnaryOp::Exp => each(&f64::exp),
        UnaryOp::Log => each(&f64::ln),
        UnaryOp::Relu => each(&|v| if v > 0.0 { v } else { 0.0 }),
        UnaryOp::LeakyRelu => each(&|v| if v > 0.0 { v } else { 0.1 * v }),
        UnaryOp::Swish => each(&|v| v / (1.0 + (-v).exp())),
        UnaryOp::Mish => each(&|v| v * softplus(v).tanh()),
        UnaryOp::Invert => each(&|v| v.recip()),
        UnaryOp::NormalizedSum => vec![x.iter().sum::<f64>() / (n + 1e-9)],
        UnaryOp::Normalize => each(&|v| (v - mean) / var.sqrt()),
        UnaryOp::Sigmoid => each(&|v| 1.0 / (1.0 + (-v).exp())),
        UnaryOp::LogSoftmax => each(&|v| (v.exp() / z).ln()),
        UnaryOp::Softmax => each(&|v| v.exp() / z),
        UnaryOp::Sqrt => each(&f64::sqrt),
        UnaryOp::Revert => each(&|v| 0.0 - v),
        UnaryOp::FrobeniusNorm => vec![x.iter().map(|v| v * v).sum::<f64>().sqrt()],
        UnaryOp::AbsLog => each(&|v| v.ln().abs()),
        UnaryOp::L1Norm => vec![x.iter().map(|v| v.abs()).sum::<f64>() / n],
        UnaryOp::MinMaxNormalize => each(&|v| (v - lo) / (hi - lo)),
        UnaryOp::ToMeanScalar => vec![mean],
        UnaryOp::ToStdScalar => vec![var.sqrt()],
    }
}

/// Element-wise relative error; NaN matches NaN and infinities must agree.
fn elementwise_err(got: &[f64], want: &[f64]) -> f64 {
    got.iter()
        .zip(want)
        .map(|(&g, &w)| {
            if g.is_nan() && w.is_nan() || g == w {
                0.0
            } else if !g.is_finite() || !w.is_finite() {
                f64::INFINITY
            } else {
                (g - w).abs() / g.abs().max(w.abs())
            }
        })
        .fold(0.0, f64::max)
}

/// Largest deviation relative to the largest reference magnitude. Used for
/// ops that mix all elements, where cancellation makes per-element relative
/// error meaningless near zero.
fn normwise_err(got: &[f64], want: &[f64]) -> f64 {
    if got
        .iter()
        .zip(want)
        .all(|(g, w)| g == w || g.is_nan() && w.is_nan())
    {
        return 0.0;
    }
    let scale = want.iter().map(|w| w.abs()).fold(0.0, f64::max);
    got.iter()
        .zip(want)
        .map(|(g, w)| (g - w).abs() / scale)
        .fold(0.0, f64::max)
}

fn criterion_1() -> Outcome {
    let mut rng = rng_from_seed(101);
    let mut worst = 0.0f64;
    for op in UnaryOp::ALL {
        let (tol, mixed) = match op {
            UnaryOp::Softmax | UnaryOp::LogSoftmax => (1e-10, true),
            UnaryOp::Normalize | UnaryOp::MinMaxNormalize => (1e-12, true),
            _ => (1e-12, false),
        };
        for case in 0..1000 {
            let t = random_tensor(&mut rng);
            let got = apply_unary(op, &t);
            let want = reference_unary(op, t.data());
            let shape_ok = if op.is_reduction() {
                got.is_scalar()
            } else {
                got.shape() == t.shape()
            };
            ensure(shape_ok, || {
                format!("{} case {case}: shape {:?}", op.name(), got.shape())
            })?;
            let err = if mixed {
                normwise_err(got.data(), &want)
            } else {
                elementwise_err(got.data(), &want)
            };
            worst = worst.max(err);
            ensure(err <= tol, || {
                format!("{} case {case}: error {err:.3e} > {tol:.0e}", op.name())
            })?;
        }
    }
    for op in BinaryOp::ALL {
        for case in 0..1000 {
            let (a, b, want, bound) = binary_case(op, &mut rng);
            let got =
                apply_binary(op, &a, &b).map_err(|e| format!("{} case {case}: {e}", op.name()))?;
            ensure(got.shape() == want.shape(), || {
                format!(
                    "{} case {case}: shape {:?} vs {:?}",
                    op.name(),
                    got.shape(),
                    want.shape()
                )
            })?;
            for ((g, w), m) in got.data().iter().zip(want.data()).zip(&bound) {
                let err = (g - w).abs() / m.max(f64::MIN_POSITIVE);
                worst = worst.max(err);
                ensure(err <= 1e-12, || {
                    format!("{} case {case}: error {err:.3e}", op.name())
                })?;
            }
        }
    }
    ensure(
        apply_binary(
            BinaryOp::Product,
            &Tensor::vector(vec![1.0, 2.0]).unwrap(),
            &Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap(),
        )
        .is_err(),
        || "mismatched product accepted".into(),
    )?;
    Ok(format!(
        "24 unary + 4 binary ops x 1000 tensors, worst relative error {worst:.2e}"
    ))
}

/// Operands, reference result and per-element error scale for one binary op.
fn binary_case(op: BinaryOp, rng: &mut impl Rng) -> (Tensor, Tensor, Tensor, Vec<f64>) {
    if op == BinaryOp::MatMul {
        let (n, k, m) = (
            rng.random_range(1..=8),
            rng.random_range(1..=8),
            rng.random_range(1..=8),
        );
        let a = Tensor::matrix(n, k, gaussian(rng, n * k, 1.0)).unwrap();
        let b = Tensor::matrix(k, m, gaussian(rng, k * m, 1.0)).unwrap();
        let mut c = vec![0.0; n * m];
        let mut bound = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                for p in 0..k {
                    let prod = a.data()[i * k + p] * b.data()[p * m + j];
                    c[i * m + j] += prod;
                    bound[i * m + j] += prod.abs();
                }
            }
        }
        return (a, b, Tensor::matrix(n, m, c).unwrap(), bound);
    }
    let f = |x: f64, y: f64| match op {
        BinaryOp::Sum => x + y,
        BinaryOp::Difference => x - y,
        _ => x * y,
    };
    let left = random_tensor(rng);
    let right = match rng.random_range(0..4) {
        0 => Tensor::scalar(gaussian(rng, 1, 1.0)[0]),
        _ => Tensor::new(left.shape().to_vec(), gaussian(rng, left.numel(), 1.0)).unwrap(),
    };
    let (a, b) = if rng.random_bool(0.5) {
        (left, right)
    } else {
        (right, left)
    };
    let (shape, pairs): (Vec<usize>, Vec<(f64, f64)>) = if a.shape() == b.shape() {
        (
            a.shape().to_vec(),
            a.data()
                .iter()
                .copied()
                .zip(b.data().iter().copied())
                .collect(),
        )
    } else if b.is_scalar() {
        (
            a.shape().to_vec(),
            a.data().iter().map(|&x| (x, b.data()[0])).collect(),
        )
    } else {
        (
            b.shape().to_vec(),
            b.data().iter().map(|&y| (a.data()[0], y)).collect(),
        )
    };
    let want: Vec<f64> = pairs.iter().map(|&(x, y)| f(x, y)).collect();
    let bound = pairs.iter().map(|&(x, y)| match op {
        BinaryOp::Product => (x * y).abs(),
        _ => x.abs() + y.abs(),
    });
    (a, b, Tensor::new(shape, want).unwrap(), bound.collect())
}

// ---------------------------------------------------------------- criterion 2

fn desk_configs() -> Vec<ArchConfig> {
    let mut rng = rng_from_seed(202);
    let mut out = Vec::new();
    for _ in 0..4 {
        let depth = rng.random_range(1..=4);
        out.push(ArchConfig::Autoformer(AutoformerArch {
            hidden_dim: *[192, 216, 240].choose(&mut rng).unwrap(),
            depth,
            mlp_ratio: (0..depth)
                .map(|_| *[3.5, 4.0].choose(&mut rng).unwrap())
                .collect(),
            num_heads: (0..depth)
                .map(|_| *[3, 4].choose(&mut rng).unwrap())
                .collect(),
            qkv_dim: 192,
        }));
    }
    out.push(ArchConfig::Pit(PitArch {
        base_dim: 16,
        mlp_ratio: *[2, 4].choose(&mut rng).unwrap(),
        num_heads: [(); 3].map(|_| *[2, 4, 8].choose(&mut rng).unwrap()),
        depth: [1, 1, rng.random_range(1..=2)],
        patch_size: 16,
    }));
    out
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for (i, cfg) in desk_configs().iter().enumerate() {
        let scale = match cfg {
            ArchConfig::Pit(_) => 8,
            _ => 24,
        };
        let dims = cfg.layer_dims(scale).unwrap();
        ensure(dims.len() <= 4 && dims.iter().all(|d| d.dim <= 16), || {
            format!("config {i} is not desk-scale: {dims:?}")
        })?;
        let report = grad_check(cfg, scale, tiny_batch(), 300 + i as u64, 1e-4)
            .map_err(|e| e.to_string())?;
        worst = worst.max(report.max_rel_error);
        ensure(report.passed, || {
            let bad = report
                .tensors
                .iter()
                .find(|t| t.max_rel_error > 1e-4)
                .unwrap();
            format!(
                "config {i}: {} max rel error {:.3e}",
                bad.name, bad.max_rel_error
            )
        })?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "5 configs, every parameter, worst relative error {worst:.2e}, {secs:.1}s"
    ))
}

// ---------------------------------------------------------------- criterion 3

fn brute_kendall(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let (mut concordant, mut discordant) = (0i64, 0i64);
    for i in 0..n {
        for j in 0..n {
            if i < j {
                let a = (x[i] < x[j] && y[i] < y[j]) || (x[i] > x[j] && y[i] > y[j]);
                let b = (x[i] < x[j] && y[i] > y[j]) || (x[i] > x[j] && y[i] < y[j]);
                concordant += a as i64;
                discordant += b as i64;
            }
        }
    }
    (concordant - discordant) as f64 / (n * (n - 1) / 2) as f64
}

/// Rank by counting: 1 + #smaller + (#equal - 1) / 2.
fn counting_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let smaller = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().filter(|&&u| u == v).count() as f64;
            1.0 + smaller + (equal - 1.0) / 2.0
        })
        .collect()
}

/// Mean product of population z-scores.
fn zscore_pearson(x: &[f64], y: &[f64]) -> f64 {
    let z = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let s = (v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n).sqrt();
        v.iter().map(|a| (a - m) / s).collect::<Vec<f64>>()
    };
    let (zx, zy) = (z(x), z(y));
    zx.iter().zip(&zy).map(|(a, b)| a * b).sum::<f64>() / x.len() as f64
}

fn criterion_3() -> Outcome {
    let mut rng = rng_from_seed(303);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let tied = case % 2 == 1;
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            if tied {
                (0..100).map(|_| rng.random_range(0..12) as f64).collect()
            } else {
                gaussian(rng, 100, 1.0)
            }
        };
        let x = draw(&mut rng);
        let noise = draw(&mut rng);
        let y: Vec<f64> = x.iter().zip(&noise).map(|(a, b)| a + b).collect();
        let k = kendall_tau(&x, &y).unwrap();
        let s = spearman_rho(&x, &y).unwrap();
        let p = pearson_r(&x, &y).unwrap();
        let s_ref = if tied {
            zscore_pearson(&counting_ranks(&x), &counting_ranks(&y))
        } else {
            let d2: f64 = counting_ranks(&x)
                .iter()
                .zip(counting_ranks(&y))
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            1.0 - 6.0 * d2 / (100.0 * (100.0f64.powi(2) - 1.0))
        };
        for (name, got, want) in [
            ("kendall", k, brute_kendall(&x, &y)),
            ("spearman", s, s_ref),
            ("pearson", p, zscore_pearson(&x, &y)),
        ] {
            let err = (got - want).abs();
            worst = worst.max(err);
            ensure(err <= 1e-12, || {
                format!("case {case} {name}: {got} vs {want}")
            })?;
        }
    }
    let k = kendall_tau(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
    ensure(k == 4.0 / 6.0, || format!("[1,2,3,4]/[1,3,2,4] gave {k}"))?;
    Ok(format!(
        "100 series (50 tied), worst deviation {worst:.2e}; tau([1,2,3,4],[1,3,2,4]) = 4/6"
    ))
}

// ---------------------------------------------------------------- criterion 4

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn criterion_4() -> Outcome {
    let mut rng = rng_from_seed(404);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let net = random_bundle(&mut rng, true);
        for (graph, builtin) in [
            (ProxyGraph::autoprox_a(), BuiltinProxy::AutoproxA),
            (ProxyGraph::autoprox_p(), BuiltinProxy::AutoproxP),
        ] {
            let g = score_network(&graph, &net).value();
            let b = builtin_score(builtin, &net)
                .map_err(|e| e.to_string())?
                .value();
            let (g, b) = g
                .zip(b)
                .ok_or_else(|| format!("case {case} {builtin}: invalid score"))?;
            let err = rel(g, b);
            worst = worst.max(err);
            ensure(err <= 1e-9, || {
                format!("case {case} {builtin}: graph {g} vs closed form {b}")
            })?;
        }
    }
    Ok(format!(
        "100 bundles x 2 proxies, worst relative gap {worst:.2e}"
    ))
}

// ---------------------------------------------------------------- criterion 5

const RECORDS: usize = 300;

fn planted_spec() -> SyntheticSpec {
    SyntheticSpec {
        planted: Proxy::Graph(ProxyGraph::autoprox_p()),
        link: Link::Identity,
        noise_std: 0.065,
        records: RECORDS,
        seed: 1,
        space: SearchSpace::Autoformer,
        datasets: vec!["cifar100".into(), "flowers".into()],
        capture: CaptureSettings {
            scale: 24,
            batch: BatchSpec {
                batch_size: 4,
                image_side: 8,
                channels: 3,
                patch_size: 4,
                num_classes: 10,
            },
            seed: 2,
        },
    }
}

fn median_iterations(v: &[Option<usize>]) -> f64 {
    let mut x: Vec<f64> = v
        .iter()
        .map(|o| o.map_or(f64::INFINITY, |i| i as f64))
        .collect();
    x.sort_by(f64::total_cmp);
    let n = x.len();
    if n % 2 == 1 {
        x[n / 2]
    } else {
        (x[n / 2 - 1] + x[n / 2]) / 2.0
    }
}

fn criterion_5(store: &BenchStore, stats: &[NetworkStatistics], planted: &[f64]) -> Outcome {
    let start = Instant::now();
    let mut taus = Vec::new();
    for ds in store.datasets() {
        let acc: Vec<f64> = (0..RECORDS)
            .map(|i| store.acc_by_idx(i, &ds, true).unwrap())
            .collect();
        taus.push(kendall_tau(planted, &acc).unwrap());
    }
    ensure(taus.iter().all(|t| (t - 0.95).abs() < 0.02), || {
        format!("planted tau {taus:?} not ~0.95")
    })?;
    let (val, _) = split(RECORDS, 0.6, 3);
    let mut medians = Vec::new();
    let mut elitism_hits = 0;
    let mut detail = Vec::new();
    for strategy in [Strategy::Elitism, Strategy::Naive, Strategy::Random] {
        let mut its = Vec::new();
        for seed in 0..10 {
            let s = EvolutionSettings {
                seed,
                target_jcm: Some(0.9),
                ..Default::default()
            };
            let ctx = FitnessContext::from_store(store, stats, &val, true, &s)
                .map_err(|e| e.to_string())?;
            let r = evolve_with(&s, &ctx, strategy, &mut |_, _| {}).map_err(|e| e.to_string())?;
            if strategy == Strategy::Elitism && r.best_fitness >= 0.9 {
                elitism_hits += 1;
            }
            its.push(r.iterations_to_target);
        }
        let m = median_iterations(&its);
        detail.push(format!("{strategy:?} {m}"));
        medians.push(m);
    }
    let secs = start.elapsed().as_secs_f64();
    let summary = format!(
        "planted tau {:.3}/{:.3}; elitism reached 0.9 in {elitism_hits}/10; median iterations {}; {secs:.0}s",
        taus[0],
        taus[1],
        detail.join(", ")
    );
    ensure(elitism_hits >= 8, || summary.clone())?;
    ensure(medians[0] < medians[1] && medians[1] < medians[2], || {
        summary.clone()
    })?;
    ensure(secs < 600.0, || summary.clone())?;
    Ok(summary)
}

// ---------------------------------------------------------------- criterion 6

fn independent_valid(v: f64) -> bool {
    v.is_finite() && v != 0.0 && v != 1.0 && v != -1.0
}

fn criterion_6(store: &BenchStore, stats: &[NetworkStatistics]) -> Outcome {
    let bundle = &stats[0];
    let mut rng = child_rng(606, "graphs", 0);
    let mut survivors = 0;
    for i in 0..10_000 {
        let g = random_graph(&mut rng);
        let s = score_network(&g, bundle);
        if check_validity(&s) {
            survivors += 1;
            let v = s.value().unwrap();
            ensure(independent_valid(v), || {
                format!("graph {i} survived with score {v}: {g}")
            })?;
        } else if let ProxyScore::Value(v) = s {
            ensure(!independent_valid(v), || {
                format!("graph {i} wrongly rejected with score {v}")
            })?;
        }
    }
    let (val, _) = split(RECORDS, 0.6, 3);
    let settings = EvolutionSettings {
        seed: 66,
        iterations: 60,
        ..Default::default()
    };
    let ctx = FitnessContext::from_store(store, stats, &val, true, &settings)
        .map_err(|e| e.to_string())?;
    let mut violations = Vec::new();
    let mut last_best = f64::NEG_INFINITY;
    let mut checked = 0;
    evolve_with(&settings, &ctx, Strategy::Elitism, &mut |row, pop| {
        checked += 1;
        if pop.len() != settings.population {
            violations.push(format!(
                "iteration {}: population {}",
                row.iteration,
                pop.len()
            ));
        }
        for m in pop {
            let probe = score_network(&m.graph, ctx.probe());
            if !check_validity(&probe) || !independent_valid(m.fitness) {
                violations.push(format!(
                    "iteration {}: invalid member {}",
                    row.iteration, m.graph
                ));
            }
            if fitness(&m.graph, &ctx) != Some(m.fitness) {
                violations.push(format!(
                    "iteration {}: stale fitness for {}",
                    row.iteration, m.graph
                ));
            }
        }
        let best = pop
            .iter()
            .map(|m| m.fitness)
            .fold(f64::NEG_INFINITY, f64::max);
        if row.best_jcm < last_best || row.best_jcm < best {
            violations.push(format!(
                "iteration {}: best-so-far regressed",
                row.iteration
            ));
        }
        last_best = row.best_jcm;
    })
    .map_err(|e| e.to_string())?;
    ensure(violations.is_empty(), || violations.join("; "))?;
    Ok(format!(
        "{survivors}/10000 random graphs valid, none in the invalid set; population invariants held over {checked} iterations"
    ))
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7() -> Outcome {
    let mut spec = planted_spec();
    spec.noise_std = 0.0;
    spec.records = 60;
    spec.seed = 7;
    let (store, _, _) = generate_synthetic(&spec).map_err(|e| e.to_string())?;
    let archs: Vec<ArchConfig> = store.records.iter().map(|r| r.arch.clone()).collect();
    let scores =
        score_candidates(&spec.planted, &archs, &spec.capture).map_err(|e| e.to_string())?;
    let (best, _) = select_best(&scores).ok_or("no valid candidate")?;
    for ds in store.datasets() {
        let acc: Vec<f64> = (0..archs.len())
            .map(|i| store.acc_by_idx(i, &ds, true).unwrap())
            .collect();
        let top = (0..acc.len())
            .filter(|&i| acc[i] > acc[best])
            .collect::<Vec<_>>();
        ensure(top.is_empty(), || {
            format!("{ds}: records {top:?} beat the search pick {best}")
        })?;
    }

    let capture = CaptureSettings {
        batch: tiny_batch(),
        ..spec.capture
    };
    let range = (4_000_000, 9_000_000);
    let report = search(&spec.planted, SearchSpace::Autoformer, 400, range, &capture)
        .map_err(|e| e.to_string())?;
    ensure(report.candidates.len() == 400, || {
        format!("{} candidates", report.candidates.len())
    })?;
    let mut exhaustive: Option<(usize, f64)> = None;
    for c in &report.candidates {
        c.config
            .validate()
            .map_err(|e| format!("candidate {}: {e}", c.index))?;
        let p = param_count(&c.config);
        ensure(p == c.params && (range.0..=range.1).contains(&p), || {
            format!("candidate {} has {p} params", c.index)
        })?;
        let s = capture
            .capture(c.index, &c.config, spec.planted.capture_mode())
            .map_err(|e| e.to_string())?;
        if let Some(v) = spec.planted.score(&s).map_err(|e| e.to_string())?.value() {
            ensure(c.score == Some(v), || {
                format!("candidate {} rescored to {v}", c.index)
            })?;
            if exhaustive.is_none_or(|(_, b)| v > b) {
                exhaustive = Some((c.index, v));
            }
        }
    }
    ensure(exhaustive.map(|e| e.0) == Some(report.best_index), || {
        format!(
            "search picked {}, exhaustive {:?}",
            report.best_index, exhaustive
        )
    })?;
    Ok(format!(
        "zero-noise pick {best} is the accuracy argmax of 60; 400 candidates in bounds and 4-9M, argmax {} confirmed",
        report.best_index
    ))
}

// ---------------------------------------------------------------- criterion 8

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(f)
}

fn archive_bytes(stats: &NetworkStatistics) -> Vec<(String, Vec<u8>)> {
    let dir = tempfile::tempdir().unwrap();
    stats.write_archive(dir.path()).unwrap();
    let mut files = Vec::new();
    let mut stack = vec![dir.path().to_path_buf()];
    while let Some(p) = stack.pop() {
        for e in std::fs::read_dir(&p).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir.path()).unwrap().display().to_string();
                files.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn criterion_8(store: &BenchStore, stats: &[NetworkStatistics]) -> Outcome {
    let (val, _) = split(RECORDS, 0.6, 3);
    let settings = EvolutionSettings {
        seed: 88,
        iterations: 40,
        ..Default::default()
    };
    let evolve_json = |threads| {
        in_pool(threads, || {
            let ctx = FitnessContext::from_store(store, stats, &val, true, &settings).unwrap();
            let r = evolve_with(&settings, &ctx, Strategy::Elitism, &mut |_, _| {}).unwrap();
            serde_json::to_string(&r).unwrap()
        })
    };
    let search_json = |threads| {
        in_pool(threads, || {
            let capture = CaptureSettings {
                batch: tiny_batch(),
                ..planted_spec().capture
            };
            let r = search(
                &Proxy::Builtin(BuiltinProxy::AutoproxA),
                SearchSpace::Autoformer,
                40,
                (4_000_000, 9_000_000),
                &capture,
            )
            .unwrap();
            serde_json::to_string(&r).unwrap()
        })
    };
    let gen_stats = |threads| {
        in_pool(threads, || {
            let cfg = sample_arch(SearchSpace::Autoformer, &mut child_rng(7, "arch", 0));
            archive_bytes(&capture_statistics(&cfg, 24, BatchSpec::default(), 7).unwrap())
        })
    };
    let e1 = evolve_json(1);
    let s1 = search_json(1);
    let g1 = gen_stats(1);
    for threads in [2, 3, 4] {
        ensure(e1 == evolve_json(threads), || {
            format!("evolve differs with {threads} threads")
        })?;
        ensure(s1 == search_json(threads), || {
            format!("search differs with {threads} threads")
        })?;
        ensure(g1 == gen_stats(threads), || {
            format!("gen-stats differs with {threads} threads")
        })?;
    }
    // candidate sampling does not touch the thread pool at all
    let a = sample_candidates(SearchSpace::Autoformer, 20, (4_000_000, 9_000_000), 5).unwrap();
    ensure(
        a == sample_candidates(SearchSpace::Autoformer, 20, (4_000_000, 9_000_000), 5).unwrap(),
        || "candidate sampling not reproducible".into(),
    )?;
    Ok(format!(
        "evolve ({} bytes), search ({} bytes), gen-stats ({} files) identical across 1-4 threads",
        e1.len(),
        s1.len(),
        g1.len()
    ))
}

// ---------------------------------------------------------------------- main

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(msg) => {
            println!("criterion {name}: PASS ({secs:.1}s) {msg}");
            true
        }
        Err(msg) => {
            println!("criterion {name}: FAIL ({secs:.1}s) {msg}");
            false
        }
    }
}

fn main() -> ExitCode {
    // `cargo test -- --list` and filters: this target has a single entry
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let mut ok = true;
    ok &= run("1 (op table)", criterion_1);
    ok &= run("2 (gradients)", criterion_2);
    ok &= run("3 (correlations)", criterion_3);
    ok &= run("4 (graph vs closed form)", criterion_4);
    let start = Instant::now();
    let generated = generate_synthetic(&planted_spec());
    let (store, stats, planted) = match generated {
        Ok(g) => g,
        Err(e) => {
            println!("criteria 5, 6, 8: FAIL planted benchmark generation: {e}");
            return ExitCode::FAILURE;
        }
    };
    println!(
        "planted benchmark: {RECORDS} records in {:.1}s",
        start.elapsed().as_secs_f64()
    );
    ok &= run("5 (planted recovery)", || {
        criterion_5(&store, &stats, &planted)
    });
    ok &= run("6 (validity filtering)", || criterion_6(&store, &stats));
    ok &= run("7 (search correctness)", criterion_7);
    ok &= run("8 (determinism)", || criterion_8(&store, &stats));
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
