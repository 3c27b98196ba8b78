//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion and
//! exits non-zero if any criterion fails. Pass criterion ids (`C4`) as
//! arguments to run a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qlvm_core::analysis::{geodesic, knn_graph, mean_shift, toroidal_distance, DensityField, GEODESIC_NEIGHBORS};
use qlvm_core::baselines::{
    elbo, iwae_bound, iwae_with_noise, sample_noise, BaselineConfig, BaselineTrainer, BoundKind,
    GaussianEncoder,
};
use qlvm_core::data::{load_checkpoint, save_checkpoint, split, synth_mixture, Checkpoint, CheckpointError, Dataset, MixtureSpec};
use qlvm_core::kv::KvMap;
use qlvm_core::lattice::{
    fibonacci_rule, generate_points, generate_points_with, inverse_normal_cdf, korobov_search, PointSet,
    SamplingMode,
};
use qlvm_core::net::{init_network, log_likelihood, Activation, Embedding, Network, NetworkSpec, OutputHead};
use qlvm_core::qlvm::{
    embed, evaluate_bound, qmc_log_evidence, qmc_objective_backward, LatticeSpec, PosteriorTable, QlvmTrainer,
    TrainConfig,
};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn mixture(seed: u64) -> (Dataset, Dataset) {
    let spec = MixtureSpec {
        clusters: 8,
        samples: 2000,
        side: 16,
        sigma: 1.5,
        jitter: 1.0,
    };
    split(&synth_mixture(&spec, seed).unwrap(), 0.8, seed).unwrap()
}

fn decoder_spec(embedding: Embedding, out: usize) -> NetworkSpec {
    NetworkSpec {
        latent_dim: 2,
        embedding,
        widths: vec![64, 128, out],
        activation: Activation::Relu,
        head: OutputHead::Bernoulli,
    }
}

fn c1_gradient_fidelity() -> Outcome {
    let spec = NetworkSpec {
        latent_dim: 2,
        embedding: Embedding::Periodic,
        widths: vec![16, 16, 81],
        activation: Activation::Relu,
        head: OutputHead::Bernoulli,
    };
    let mut net = init_network(spec, 7).unwrap();
    let data = synth_mixture(
        &MixtureSpec {
            clusters: 4,
            samples: 16,
            side: 9,
            sigma: 1.2,
            jitter: 0.5,
        },
        1,
    )
    .unwrap();
    let x = data.values().view();
    let pts = generate_points(&fibonacci_rule(10).unwrap(), SamplingMode::ShiftedRqmc, 3);
    net.zero_grad();
    qmc_objective_backward(&mut net, x, &pts).unwrap();
    let loss = |n: &Network| -qmc_log_evidence(n, x, &pts).unwrap().mean;
    let h = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = (0.0f64, 0usize, 0.0, 0.0);
    for k in sample(&mut rng, net.num_params(), 100) {
        let (mut p, mut q) = (net.clone(), net.clone());
        p.params_mut()[k] += h;
        q.params_mut()[k] -= h;
        let fd = (loss(&p) - loss(&q)) / (2.0 * h);
        let g = net.grads()[k];
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(GRAD_FLOOR);
        if rel > worst.0 {
            worst = (rel, k, g, fd);
        }
    }
    outcome(
        worst.0 < 1e-4,
        format!(
            "max relative error {:.2e} over 100 probes (param {}: analytic {:.6e}, fd {:.6e})",
            worst.0, worst.1, worst.2, worst.3
        ),
    )
}

/// Denominator floor for relative errors of near-zero gradients.
const GRAD_FLOOR: f64 = 1e-6;

fn c2_rqmc_variance() -> Outcome {
    let g = |z: ArrayView1<f64>| z.iter().map(|&v| 1.0 + 0.5 * (std::f64::consts::TAU * v).cos()).product::<f64>();
    let rule = fibonacci_rule(13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let estimate = |mode, rng: &mut ChaCha8Rng| {
        let pts = generate_points_with(&rule, mode, rng);
        pts.points().rows().into_iter().map(g).sum::<f64>() / pts.len() as f64
    };
    let rqmc: Vec<f64> = (0..200).map(|_| estimate(SamplingMode::ShiftedRqmc, &mut rng)).collect();
    let mc: Vec<f64> = (0..200).map(|_| estimate(SamplingMode::PlainMc, &mut rng)).collect();
    let (vr, vm) = (mean_std(&rqmc).1.powi(2), mean_std(&mc).1.powi(2));
    outcome(vr < 0.5 * vm, format!("m=233: RQMC variance {vr:.3e}, MC variance {vm:.3e}"))
}

fn c3_bound_monotonicity() -> Outcome {
    let (train, test) = mixture(3);
    let mut cfg = TrainConfig::new(LatticeSpec::Fibonacci { k: 10 }, 3);
    cfg.epochs = 20;
    let mut t = QlvmTrainer::new(cfg, init_network(decoder_spec(Embedding::Periodic, 256), 3).unwrap()).unwrap();
    t.fit(train.values().view()).unwrap();
    let x = test.subset(&(0..50).collect::<Vec<_>>(), "probe");
    let mut rows = Vec::new();
    for k in [10, 13, 16, 20] {
        let r = evaluate_bound(&t.decoder, x.values().view(), &fibonacci_rule(k).unwrap(), 100, 17).unwrap();
        rows.push((fibonacci_rule(k).unwrap().count(), r.mean, r.std / 10.0));
    }
    let ok = rows.windows(2).all(|w| w[1].1 + 2.0 * (w[0].2 + w[1].2) >= w[0].1);
    let detail = rows
        .iter()
        .map(|(m, mean, se)| format!("m={m}: {mean:.4}+-{se:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(ok, detail)
}

#[derive(Debug, Clone, Copy)]
struct OrderRun {
    qlvm: f64,
    vae_elbo: f64,
    vae_qmc: f64,
    iwae: f64,
}

const ORDER_SEEDS: u64 = 5;
const ORDER_EPOCHS: usize = 200;

fn order_run(seed: u64) -> OrderRun {
    let (train, test) = mixture(seed);
    let x = test.values().view();
    let data = train.values().view();
    let mut cfg = TrainConfig::new(LatticeSpec::Fibonacci { k: 13 }, seed);
    cfg.epochs = ORDER_EPOCHS;
    let mut q = QlvmTrainer::new(cfg, init_network(decoder_spec(Embedding::Periodic, 256), seed).unwrap()).unwrap();
    q.fit(data).unwrap();
    let qlvm = evaluate_bound(&q.decoder, x, &fibonacci_rule(13).unwrap(), 10, seed + 1000).unwrap().mean;

    let baseline = |kind, samples| {
        let mut cfg = BaselineConfig::new(kind, seed);
        cfg.samples = samples;
        cfg.epochs = ORDER_EPOCHS;
        let enc = GaussianEncoder::new(256, &[128, 64], 2, seed + 100).unwrap();
        let dec = init_network(decoder_spec(Embedding::Identity, 256), seed).unwrap();
        let mut t = BaselineTrainer::new(cfg, enc, dec).unwrap();
        t.fit(data).unwrap();
        t
    };
    let vae = baseline(BoundKind::Elbo, 1);
    let vae_elbo = elbo(&vae.encoder, &vae.decoder, x, 100, seed + 2000).unwrap().mean();
    let icdf = vae.decoder.with_embedding(Embedding::GaussianIcdf).unwrap();
    let vae_qmc = evaluate_bound(&icdf, x, &fibonacci_rule(20).unwrap(), 1, seed + 3000).unwrap().mean;
    let iw = baseline(BoundKind::Iwae, 10);
    let iwae = iwae_bound(&iw.encoder, &iw.decoder, x, 10, seed + 4000).unwrap().mean();
    OrderRun {
        qlvm,
        vae_elbo,
        vae_qmc,
        iwae,
    }
}

fn order_runs() -> &'static [OrderRun] {
    static RUNS: OnceLock<Vec<OrderRun>> = OnceLock::new();
    RUNS.get_or_init(|| (1..=ORDER_SEEDS).map(order_run).collect())
}

fn c4_method_ordering() -> Outcome {
    let runs = order_runs();
    let wins = runs.iter().filter(|r| r.qlvm > r.vae_elbo && r.qlvm > r.iwae).count();
    let detail = runs
        .iter()
        .map(|r| format!("qlvm {:.3} / elbo {:.3} / iwae {:.3}", r.qlvm, r.vae_elbo, r.iwae))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(wins >= 4, format!("{wins}/5 seeds: {detail}"))
}

fn c5_loose_bound() -> Outcome {
    let runs = order_runs();
    let wins = runs.iter().filter(|r| r.vae_qmc > r.vae_elbo).count();
    let detail = runs
        .iter()
        .map(|r| format!("qmc {:.3} vs elbo {:.3}", r.vae_qmc, r.vae_elbo))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(wins >= 4, format!("{wins}/5 seeds: {detail}"))
}

/// Gaussian log density of `z` under `N(mean, exp(lv))`, written directly.
fn log_gaussian(z: ArrayView1<f64>, mean: ArrayView1<f64>, lv: ArrayView1<f64>) -> f64 {
    z.iter()
        .zip(mean)
        .zip(lv)
        .map(|((&z, &mu), &lv)| {
            let var = lv.exp();
            -0.5 * (std::f64::consts::TAU * var).ln() - (z - mu).powi(2) / (2.0 * var)
        })
        .sum()
}

fn c6_iwae_elbo_identity() -> Outcome {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..1000u64 {
        let d = 1 + (case % 3) as usize;
        let data_dim = 5;
        let enc = GaussianEncoder::new(data_dim, &[6], d, case).unwrap();
        let dec = init_network(
            NetworkSpec {
                latent_dim: d,
                embedding: Embedding::Identity,
                widths: vec![6, data_dim],
                activation: Activation::Relu,
                head: OutputHead::Bernoulli,
            },
            case + 5000,
        )
        .unwrap();
        let x = Array2::from_shape_simple_fn((1, data_dim), || rng.random::<f64>());
        let noise = sample_noise(1, d, case + 9000);
        let iw = iwae_with_noise(&enc, &dec, x.view(), 1, noise.view()).unwrap().values[0];
        let post = enc.encode(x.view()).unwrap();
        let z: Array1<f64> = (0..d)
            .map(|k| post.mean[[0, k]] + (0.5 * post.log_variance[[0, k]]).exp() * noise[[0, k]])
            .collect();
        let decoded = dec.forward(z.view().insert_axis(ndarray::Axis(0))).unwrap();
        let ll = log_likelihood(&OutputHead::Bernoulli, decoded.row(0), x.row(0)).unwrap();
        let zeros = Array1::zeros(d);
        let single = ll + log_gaussian(z.view(), zeros.view(), zeros.view())
            - log_gaussian(z.view(), post.mean.row(0), post.log_variance.row(0));
        worst = worst.max((iw - single).abs());
    }
    outcome(worst <= 1e-10, format!("max |iwae(m=1) - single-draw ELBO| = {worst:.2e} over 1000 cases"))
}

fn c7_posterior_normalization() -> Outcome {
    let mut runner = TestRunner::new(Config {
        cases: 10_000,
        failure_persistence: None,
        ..Config::default()
    });
    let worst = std::cell::Cell::new(0.0f64);
    let result = runner.run(
        &(
            prop::collection::vec(-50.0f64..10.0, 21),
            prop::collection::vec(-50.0f64..10.0, 21),
            -30.0f64..30.0,
        ),
        |(a, b, log_c)| {
            let pts = PointSet::fixed(&korobov_search(21, 2).unwrap());
            let ll = Array2::from_shape_fn((2, 21), |(i, j)| if i == 0 { a[j] } else { b[j] });
            let base = PosteriorTable::from_log_likelihoods(pts.clone(), ll.clone()).unwrap();
            let scaled = PosteriorTable::from_log_likelihoods(pts, ll.mapv(|v| v + log_c)).unwrap();
            for s in base.row_sums() {
                worst.set(worst.get().max((s - 1.0).abs()));
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
            prop_assert_eq!(embed(&base).mode_indices, embed(&scaled).mode_indices);
            Ok(())
        },
    );
    match result {
        Ok(()) => outcome(true, format!("10000 cases, max |row sum - 1| = {:.2e}", worst.get())),
        Err(e) => outcome(false, format!("{e}")),
    }
}

fn c8_mean_shift_oracle() -> Outcome {
    let pts = PointSet::fixed(&fibonacci_rule(20).unwrap());
    let modes = [[0.2, 0.3], [0.7, 0.75]];
    let sigma = 0.06;
    let rho: Vec<f64> = pts
        .points()
        .rows()
        .into_iter()
        .map(|p| {
            modes
                .iter()
                .map(|m| (-toroidal_distance(p, ArrayView1::from(m)).powi(2) / (2.0 * sigma * sigma)).exp())
                .sum()
        })
        .collect();
    let field = DensityField::new(pts, rho).unwrap();
    let seeds = PointSet::fixed(&fibonacci_rule(12).unwrap());
    let res = mean_shift(&field, 0.1, Some(seeds.points().view())).unwrap();
    let dist: Vec<f64> = res
        .centroids
        .rows()
        .into_iter()
        .map(|c| {
            modes
                .iter()
                .map(|m| toroidal_distance(c, ArrayView1::from(m)))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let ok = res.centroids.nrows() == 2 && dist.iter().all(|&d| d < 0.02);
    outcome(ok, format!("{} centroids, distances to true modes {:?}", res.centroids.nrows(), dist.iter().map(|d| format!("{d:.2e}")).collect::<Vec<_>>()))
}

/// Cheapest simple path by exhaustive depth-first enumeration; a branch is
/// abandoned once its running cost reaches the best complete path so far.
fn enumerate_cheapest(field: &DensityField, src: usize, dst: usize) -> f64 {
    let adj = knn_graph(field.points(), GEODESIC_NEIGHBORS);
    let pts = field.points().points();
    let rho = field.weights();
    let cost = |u: usize, v: usize| toroidal_distance(pts.row(u), pts.row(v)) * rho[u] / rho[v].max(1e-12);
    let mut best = f64::INFINITY;
    let mut seen = vec![false; field.len()];
    // Explicit stack of (node, cost so far, next neighbor slot).
    let mut stack = vec![(src, 0.0f64, 0usize)];
    seen[src] = true;
    while let Some(top) = stack.last_mut() {
        let (u, c, slot) = *top;
        if u == dst {
            best = best.min(c);
            seen[u] = false;
            stack.pop();
            continue;
        }
        if slot == adj[u].len() {
            seen[u] = false;
            stack.pop();
            continue;
        }
        top.2 += 1;
        let v = adj[u][slot];
        if seen[v] {
            continue;
        }
        let nc = c + cost(u, v);
        if nc < best {
            seen[v] = true;
            stack.push((v, nc, 0));
        }
    }
    best
}

fn c9_geodesic_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut mismatches = Vec::new();
    let mut sizes = Vec::new();
    for case in 0..20 {
        let m = rng.random_range(5..=30usize) + if case % 4 == 3 { 70 } else { 0 };
        let pts = PointSet::fixed(&korobov_search(m, 2).unwrap());
        let w: Vec<f64> = (0..m).map(|_| rng.random::<f64>().powi(2) + 1e-3).collect();
        let field = DensityField::new(pts.clone(), w).unwrap();
        let (s, t) = (rng.random_range(0..m), rng.random_range(0..m));
        let path = geodesic(&field, pts.point(s), pts.point(t), 1e-12).unwrap();
        let brute = if s == t { 0.0 } else { enumerate_cheapest(&field, s, t) };
        if path.cost != brute {
            mismatches.push(format!("m={m}: {} vs {brute}", path.cost));
        }
        sizes.push(m);
    }
    outcome(
        mismatches.is_empty(),
        format!("20 fields, m in {sizes:?}; mismatches: {mismatches:?}"),
    )
}

const ABLATION_SEEDS: u64 = 10;

fn c10_ablations() -> Outcome {
    let eval_rule = fibonacci_rule(16).unwrap();
    let (mut rqmc_wins, mut periodic_wins) = (0, 0);
    for seed in 1..=ABLATION_SEEDS {
        let (train, test) = mixture(seed);
        let run = |mode, embedding| {
            let mut cfg = TrainConfig::new(LatticeSpec::Fibonacci { k: 10 }, seed);
            cfg.epochs = 100;
            cfg.mode = mode;
            let net = init_network(decoder_spec(embedding, 256), seed).unwrap();
            let mut t = QlvmTrainer::new(cfg, net).unwrap();
            t.fit(train.values().view()).unwrap();
            evaluate_bound(&t.decoder, test.values().view(), &eval_rule, 5, seed + 77).unwrap().mean
        };
        let base = run(SamplingMode::ShiftedRqmc, Embedding::Periodic);
        let mc = run(SamplingMode::PlainMc, Embedding::Periodic);
        let flat = run(SamplingMode::ShiftedRqmc, Embedding::Identity);
        rqmc_wins += (base >= mc) as usize;
        periodic_wins += (base >= flat) as usize;
    }
    outcome(
        rqmc_wins >= 7 && periodic_wins >= 7,
        format!("RQMC >= MC in {rqmc_wins}/10 seeds, periodic >= non-periodic in {periodic_wins}/10 seeds"),
    )
}

/// `Phi(x)` from the all-positive series `erf(t) = 2/sqrt(pi) e^{-t^2} sum (2t^2)^n t / (2n+1)!!`.
fn phi_series(x: f64) -> f64 {
    let t = x.abs() / std::f64::consts::SQRT_2;
    let mut term = t;
    let mut sum = t;
    let mut n = 0.0;
    while term > 1e-18 * sum {
        n += 1.0;
        term *= 2.0 * t * t / (2.0 * n + 1.0);
        sum += term;
    }
    let erf = 2.0 / std::f64::consts::PI.sqrt() * (-t * t).exp() * sum;
    if x >= 0.0 {
        0.5 * (1.0 + erf)
    } else {
        0.5 * (1.0 - erf)
    }
}

fn c11_inverse_normal() -> Outcome {
    let (lo, hi) = (1e-7, 1.0 - 1e-7);
    let n = 100_000;
    let mut worst = (0.0f64, 0.0);
    for i in 0..n {
        let u = lo + (hi - lo) * (i as f64 + 0.5) / n as f64;
        let err = (phi_series(inverse_normal_cdf(u)) - u).abs();
        if err > worst.0 {
            worst = (err, u);
        }
    }
    outcome(worst.0 < 1e-9, format!("max |Phi(Phi^-1(u)) - u| = {:.2e} at u = {}", worst.0, worst.1))
}

fn c12_persistence() -> Outcome {
    let (train, _) = mixture(12);
    let x = train.subset(&(0..64).collect::<Vec<_>>(), "batch");
    let mut cfg = TrainConfig::new(LatticeSpec::Fibonacci { k: 10 }, 12);
    cfg.epochs = 2;
    let mut t = QlvmTrainer::new(cfg, init_network(decoder_spec(Embedding::Periodic, 256), 12).unwrap()).unwrap();
    t.fit(x.values().view()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &t.to_checkpoint(&KvMap::new())).unwrap();
    let restored = QlvmTrainer::from_checkpoint(&load_checkpoint(&path).unwrap()).unwrap();
    let pts = generate_points(&fibonacci_rule(10).unwrap(), SamplingMode::ShiftedRqmc, 5);
    let before = -qmc_log_evidence(&t.decoder, x.values().view(), &pts).unwrap().mean;
    let after = -qmc_log_evidence(&restored.decoder, x.values().view(), &pts).unwrap().mean;

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    let corrupted = Checkpoint::from_bytes(&bytes);
    let crc_rejected = matches!(corrupted, Err(CheckpointError::Checksum { .. }));
    outcome(
        before.to_bits() == after.to_bits() && crc_rejected,
        format!("fixed-batch loss {before} before, {after} after; corrupted file rejected by CRC: {crc_rejected}"),
    )
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, &str, fn() -> Outcome); 12] = [
        ("C1", "gradient fidelity", c1_gradient_fidelity),
        ("C2", "RQMC beats MC variance", c2_rqmc_variance),
        ("C3", "bound monotone in m", c3_bound_monotonicity),
        ("C4", "method ordering", c4_method_ordering),
        ("C5", "QMC re-evaluation of VAE decoder", c5_loose_bound),
        ("C6", "IWAE/ELBO identity", c6_iwae_elbo_identity),
        ("C7", "posterior normalization", c7_posterior_normalization),
        ("C8", "mean-shift oracle", c8_mean_shift_oracle),
        ("C9", "geodesic optimality", c9_geodesic_optimality),
        ("C10", "ablation directions", c10_ablations),
        ("C11", "inverse normal CDF", c11_inverse_normal),
        ("C12", "checkpoint persistence", c12_persistence),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == id) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let tag = if result.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {id} {name} ({:.1}s): {}", start.elapsed().as_secs_f64(), result.detail);
        failed += (!result.passed) as usize;
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
