use ndarray::{array, Array1, Array2, ArrayView2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::lattice::{fibonacci_rule, korobov_search, wrap_unit, PointSet, SamplingMode};
use crate::net::{Activation, Embedding, Network, NetworkSpec, OutputHead};
use crate::qlvm::PosteriorTable;
use crate::Result;

fn table(points: &PointSet, rows: Array2<f64>) -> PosteriorTable {
    PosteriorTable::from_log_likelihoods(points.clone(), rows.mapv(f64::ln)).unwrap()
}

fn line(m: usize) -> PointSet {
    PointSet::from_points(
        Array2::from_shape_fn((m, 1), |(j, _)| j as f64 / m as f64),
        SamplingMode::FixedQmc,
    )
    .unwrap()
}

fn random_field(points: PointSet, seed: u64) -> DensityField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = (0..points.len()).map(|_| rng.random::<f64>().powi(3)).collect();
    DensityField::new(points, w).unwrap()
}

#[test]
fn aggregate_examples() {
    let pts = line(4);
    let one = array![[0.1, 0.2, 0.3, 0.4]];
    let f = aggregate_posterior(&[table(&pts, one.clone())]).unwrap();
    for (a, b) in f.weights().iter().zip(one.row(0)) {
        assert!((a - b).abs() < 1e-15);
    }
    let disjoint = array![[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
    let f = aggregate_posterior(&[table(&pts, disjoint)]).unwrap();
    assert_eq!(f.weights(), &[0.5, 0.0, 0.5, 0.0]);
    let split = aggregate_posterior(&[
        table(&pts, array![[1.0, 0.0, 0.0, 0.0]]),
        table(&pts, array![[0.0, 0.0, 1.0, 0.0]]),
    ])
    .unwrap();
    assert_eq!(split.weights(), f.weights());
    assert!(aggregate_posterior(&[table(&pts, one.clone()), table(&line(5), array![[0.2; 5]])]).is_err());
    assert!(aggregate_posterior(&[]).is_err());
}

#[test]
fn constant_decoder_gives_uniform_field() {
    let pts = PointSet::fixed(&fibonacci_rule(10).unwrap());
    let net = Network::zeros(NetworkSpec {
        latent_dim: 2,
        embedding: Embedding::Periodic,
        widths: vec![4, 3],
        activation: Activation::Relu,
        head: OutputHead::Bernoulli,
    })
    .unwrap();
    let x = array![[1.0, 0.0, 1.0], [0.0, 0.0, 0.0]];
    let t = crate::qlvm::posterior_table(&net, x.view(), &pts).unwrap();
    let f = aggregate_posterior(&[t]).unwrap();
    let m = pts.len() as f64;
    assert!(f.weights().iter().all(|w| (w - 1.0 / m).abs() < 1e-15));
    assert!((f.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn toroidal_distance_examples() {
    assert!((toroidal_distance(array![0.05].view(), array![0.95].view()) - 0.1).abs() < 1e-15);
    assert_eq!(toroidal_distance(array![0.3, 0.7].view(), array![0.3, 0.7].view()), 0.0);
    assert!((toroidal_distance(array![0.0, 0.0].view(), array![0.5, 0.5].view()) - 0.5f64.sqrt()).abs() < 1e-15);
}

#[test]
fn single_peak_attracts_nearby_seeds() {
    let pts = PointSet::fixed(&fibonacci_rule(17).unwrap());
    let peak = array![0.02, 0.97];
    let h = 0.05;
    let w: Vec<f64> = pts
        .points()
        .rows()
        .into_iter()
        .map(|p| (-toroidal_distance(p, peak.view()).powi(2) / (2.0 * 0.02f64.powi(2))).exp())
        .collect();
    let field = DensityField::new(pts, w).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let seeds = Array2::from_shape_fn((20, 2), |(_, k)| {
        let angle = rng.random::<f64>() * std::f64::consts::TAU;
        let r = rng.random::<f64>() * 3.0 * h * 0.99 / 2f64.sqrt();
        wrap_unit(peak[k] + r * if k == 0 { angle.cos() } else { angle.sin() })
    });
    let res = mean_shift(&field, h, Some(seeds.view())).unwrap();
    for z in &res.converged {
        let z = Array1::from(z.clone().expect("converged"));
        assert!(toroidal_distance(z.view(), peak.view()) < 0.01);
    }
    assert_eq!(res.centroids.nrows(), 1);
}

/// Direct 1D iterate on a ring, independent of the library's unwrapping.
fn ring_mean_shift(xs: &[f64], rho: &[f64], h: f64, mut z: f64) -> Option<f64> {
    for _ in 0..MAX_ITERS {
        let (mut num, mut den) = (0.0, 0.0);
        for (&x, &r) in xs.iter().zip(rho) {
            let mut delta = x - z;
            if delta >= 0.5 {
                delta -= 1.0;
            } else if delta < -0.5 {
                delta += 1.0;
            }
            if delta.abs() <= 3.0 * h && r > 0.0 {
                let w = r * (-(delta / h).powi(2)).exp();
                num += w * delta;
                den += w;
            }
        }
        if den == 0.0 {
            return None;
        }
        let step = num / den;
        z = (z + step).rem_euclid(1.0);
        if step.abs() < STEP_TOLERANCE {
            return Some(z);
        }
    }
    None
}

#[test]
fn two_peaks_give_two_centroids() {
    let pts = line(400);
    let xs: Vec<f64> = pts.points().column(0).to_vec();
    let bump = |x: f64, c: f64| {
        let d = (x - c).abs().min(1.0 - (x - c).abs());
        (-d * d / (2.0 * 0.03f64.powi(2))).exp()
    };
    let rho: Vec<f64> = xs.iter().map(|&x| bump(x, 0.1) + bump(x, 0.6)).collect();
    let field = DensityField::new(pts, rho.clone()).unwrap();
    let h = 0.05;
    let seeds = array![[0.1], [0.6], [0.15], [0.52], [0.98]];
    let res = mean_shift(&field, h, Some(seeds.view())).unwrap();
    assert_eq!(res.centroids.nrows(), 2);
    for (i, s) in seeds.column(0).iter().enumerate() {
        let oracle = ring_mean_shift(&xs, &rho, h, *s).unwrap();
        let got = res.converged[i].as_ref().unwrap()[0];
        assert!(toroidal_distance(array![oracle].view(), array![got].view()) < 1e-5);
    }
    let mut cs: Vec<f64> = res.centroids.column(0).to_vec();
    cs.sort_by(f64::total_cmp);
    assert!((cs[0] - 0.1).abs() < 2e-3 && (cs[1] - 0.6).abs() < 2e-3, "{cs:?}");
}

#[test]
fn uniform_field_seeds_are_fixed_points() {
    // 3h stays below half a period so neighborhoods never reach the antipode.
    let pts = PointSet::fixed(&fibonacci_rule(10).unwrap());
    let field = DensityField::uniform(pts.clone());
    let h = 0.15;
    let res = mean_shift(&field, h, None).unwrap();
    for (z, p) in res.converged.iter().zip(pts.points().rows()) {
        let z = Array1::from(z.clone().unwrap());
        assert!(toroidal_distance(z.view(), p) < 1e-9);
    }
    for a in 0..res.centroids.nrows() {
        for b in 0..a {
            assert!(toroidal_distance(res.centroids.row(a), res.centroids.row(b)) >= h);
        }
    }
    assert!(res.centroids.nrows() < pts.len());
    assert!(res.assignments.iter().all(Option::is_some));
}

#[test]
fn centroids_are_fixed_points_and_separated() {
    let field = random_field(PointSet::fixed(&fibonacci_rule(11).unwrap()), 4);
    let h = 0.08;
    let res = mean_shift(&field, h, None).unwrap();
    for c in res.centroids.rows() {
        let (next, _) = shift_step(&field, c, h).unwrap();
        assert!(toroidal_distance(c, Array1::from(next).view()) < 1e-6);
    }
    for a in 0..res.centroids.nrows() {
        for b in 0..a {
            assert!(toroidal_distance(res.centroids.row(a), res.centroids.row(b)) >= h);
        }
    }
}

#[test]
fn empty_neighborhood_is_not_converged() {
    let pts = line(100);
    let mut w = vec![0.0; 100];
    w[10] = 1.0;
    let field = DensityField::new(pts, w).unwrap();
    let res = mean_shift(&field, 0.01, Some(array![[0.5], [0.11]].view())).unwrap();
    assert_eq!(res.converged[0], None);
    assert_eq!(res.assignments[0], None);
    assert_eq!(res.centroids.nrows(), 1);
    assert!(mean_shift(&field, 0.0, None).is_err());
}

fn embedding_net() -> Network {
    let mut net = Network::zeros(NetworkSpec {
        latent_dim: 1,
        embedding: Embedding::Periodic,
        widths: vec![2],
        activation: Activation::Relu,
        head: OutputHead::Linear,
    })
    .unwrap();
    net.params_mut()[..4].copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    net
}

#[test]
fn jacobian_examples() {
    let pts = PointSet::fixed(&fibonacci_rule(10).unwrap());
    let constant = Network::zeros(NetworkSpec {
        latent_dim: 2,
        embedding: Embedding::Periodic,
        widths: vec![5, 3],
        activation: Activation::Tanh,
        head: OutputHead::Bernoulli,
    })
    .unwrap();
    let f = jacobian_frobenius(&constant, pts.points().view(), DEFAULT_FD_STEP).unwrap();
    assert!(f.norms.iter().all(|&v| v == 0.0));

    let z = Array2::from_shape_fn((64, 1), |(i, _)| i as f64 / 64.0);
    let f = jacobian_frobenius(&embedding_net(), z.view(), DEFAULT_FD_STEP).unwrap();
    for v in &f.norms {
        assert!((v - std::f64::consts::TAU).abs() < 1e-5, "{v}");
    }
    assert!(jacobian_frobenius(&constant, pts.points().view(), 0.1).is_err());
}

fn trained_like_net(seed: u64) -> Network {
    crate::net::init_network(
        NetworkSpec {
            latent_dim: 2,
            embedding: Embedding::Periodic,
            widths: vec![16, 16, 9],
            activation: Activation::Relu,
            head: OutputHead::Bernoulli,
        },
        seed,
    )
    .unwrap()
}

#[test]
fn jacobian_is_pointwise() {
    let net = trained_like_net(3);
    let pts = PointSet::fixed(&fibonacci_rule(9).unwrap());
    let a = jacobian_frobenius(&net, pts.points().view(), DEFAULT_FD_STEP).unwrap();
    let rev: Vec<usize> = (0..pts.len()).rev().collect();
    let permuted = pts.points().select(ndarray::Axis(0), &rev);
    let b = jacobian_frobenius(&net, permuted.view(), DEFAULT_FD_STEP).unwrap();
    for (i, &j) in rev.iter().enumerate() {
        assert_eq!(a.norms[j], b.norms[i]);
    }
}

struct Translated<'a> {
    net: &'a Network,
    shift: [f64; 2],
}

impl LatentMap for Translated<'_> {
    fn latent_dim(&self) -> usize {
        2
    }

    fn decode_mean(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        let moved = Array2::from_shape_fn(z.raw_dim(), |(i, k)| wrap_unit(z[[i, k]] + self.shift[k]));
        self.net.decode_mean(moved.view())
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn jacobian_commutes_with_translation(a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let net = trained_like_net(5);
        let pts = PointSet::fixed(&fibonacci_rule(7).unwrap());
        let moved = Array2::from_shape_fn((pts.len(), 2), |(i, k)| {
            wrap_unit(pts.points()[[i, k]] + [a, b][k])
        });
        let direct = jacobian_frobenius(&net, moved.view(), DEFAULT_FD_STEP).unwrap();
        let t = Translated { net: &net, shift: [a, b] };
        let via = jacobian_frobenius(&t, pts.points().view(), DEFAULT_FD_STEP).unwrap();
        for (x, y) in direct.norms.iter().zip(&via.norms) {
            prop_assert!((x - y).abs() <= 1e-9, "{} vs {}", x, y);
        }
    }

    #[test]
    fn smoothing_preserves_mean(seed in 0u64..1000, bw in 0.005f64..0.3) {
        let pts = PointSet::fixed(&fibonacci_rule(9).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..pts.len()).map(|_| rng.random::<f64>()).collect();
        let s = smooth_field(pts.points().view(), &v, bw).unwrap();
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        prop_assert!((mean(&s) - mean(&v)).abs() < 1e-9);
    }
}

#[test]
fn smoothing_examples() {
    let pts = PointSet::fixed(&fibonacci_rule(10).unwrap());
    let m = pts.len();
    let s = smooth_field(pts.points().view(), &vec![2.5; m], 0.05).unwrap();
    assert!(s.iter().all(|v| (v - 2.5).abs() < 1e-12));

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let v: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
    let s = smooth_field(pts.points().view(), &v, 1e-6).unwrap();
    assert!(s.iter().zip(&v).all(|(a, b)| (a - b).abs() < 1e-9));

    let mut spike = vec![0.0; m];
    spike[0] = 1.0;
    let s = smooth_field(pts.points().view(), &spike, 0.05).unwrap();
    // The lattice is symmetric about its origin point: j and m - j mirror each other.
    for j in 1..m {
        assert!((s[j] - s[m - j]).abs() < 1e-12);
    }
    assert!(smooth_field(pts.points().view(), &spike, 0.0).is_err());
}

/// Bellman-Ford over the same graph and edge costs.
fn bellman_ford(field: &DensityField, src: usize, dst: usize, eps: f64) -> f64 {
    let adj = knn_graph(field.points(), GEODESIC_NEIGHBORS);
    let mut dist = vec![f64::INFINITY; field.len()];
    dist[src] = 0.0;
    loop {
        let mut changed = false;
        for u in 0..field.len() {
            if !dist[u].is_finite() {
                continue;
            }
            for &v in &adj[u] {
                let nd = dist[u] + geodesic::edge_cost(field, u, v, eps);
                if nd < dist[v] {
                    dist[v] = nd;
                    changed = true;
                }
            }
        }
        if !changed {
            return dist[dst];
        }
    }
}

/// Minimum over every simple path, with pruning on the running best.
fn enumerate_paths(field: &DensityField, src: usize, dst: usize, eps: f64) -> f64 {
    fn go(
        field: &DensityField,
        adj: &[Vec<usize>],
        u: usize,
        dst: usize,
        eps: f64,
        cost: f64,
        seen: &mut Vec<bool>,
        best: &mut f64,
    ) {
        if u == dst {
            *best = best.min(cost);
            return;
        }
        for &v in &adj[u] {
            if seen[v] {
                continue;
            }
            let c = cost + geodesic::edge_cost(field, u, v, eps);
            if c >= *best {
                continue;
            }
            seen[v] = true;
            go(field, adj, v, dst, eps, c, seen, best);
            seen[v] = false;
        }
    }
    let adj = knn_graph(field.points(), GEODESIC_NEIGHBORS);
    let mut seen = vec![false; field.len()];
    seen[src] = true;
    let mut best = f64::INFINITY;
    go(field, &adj, src, dst, eps, 0.0, &mut seen, &mut best);
    best
}

fn check_path(field: &DensityField, path: &GeodesicPath) {
    let adj = knn_graph(field.points(), GEODESIC_NEIGHBORS);
    let mut total = 0.0;
    for (w, &c) in path.indices.windows(2).zip(&path.step_costs) {
        assert!(adj[w[0]].contains(&w[1]));
        total += c;
    }
    assert_eq!(total, path.cost);
}

#[test]
fn geodesic_matches_exhaustive_search_on_tiny_lattices() {
    for (m, seed) in [(5usize, 1u64), (8, 2), (13, 3), (21, 4)] {
        let pts = PointSet::fixed(&korobov_search(m, 2).unwrap());
        let field = random_field(pts.clone(), seed);
        let path = geodesic(&field, pts.point(0), pts.point(m / 2), DEFAULT_DENSITY_FLOOR).unwrap();
        check_path(&field, &path);
        let brute = enumerate_paths(&field, path.indices[0], *path.indices.last().unwrap(), DEFAULT_DENSITY_FLOOR);
        assert_eq!(path.cost, brute, "m = {m}");
    }
}

#[test]
fn geodesic_matches_bellman_ford_up_to_100_points() {
    for m in 5..=100 {
        let pts = PointSet::fixed(&korobov_search(m, 2).unwrap());
        let field = random_field(pts.clone(), m as u64);
        let (s, t) = (m / 3, (2 * m) / 3 + 1);
        let path = geodesic(&field, pts.point(s), pts.point(t), DEFAULT_DENSITY_FLOOR).unwrap();
        check_path(&field, &path);
        assert_eq!(path.cost, bellman_ford(&field, s, t, DEFAULT_DENSITY_FLOOR), "m = {m}");
    }
}

#[test]
fn geodesic_on_uniform_field_is_nearly_straight() {
    let pts = PointSet::fixed(&fibonacci_rule(20).unwrap());
    let field = DensityField::uniform(pts);
    let (a, b) = (array![0.1, 0.2], array![0.45, 0.9]);
    let path = geodesic(&field, a.view(), b.view(), DEFAULT_DENSITY_FLOOR).unwrap();
    let pts = field.points().points();
    let ends = toroidal_distance(pts.row(path.indices[0]), pts.row(*path.indices.last().unwrap()));
    assert!(path.cost >= ends * (1.0 - 1e-12));
    assert!(path.cost <= 1.1 * ends, "{} vs {}", path.cost, ends);
}

#[test]
fn geodesic_to_self_is_trivial() {
    let field = random_field(PointSet::fixed(&fibonacci_rule(8).unwrap()), 0);
    let p = field.points().point(3).to_owned();
    let path = geodesic(&field, p.view(), p.view(), DEFAULT_DENSITY_FLOOR).unwrap();
    assert_eq!(path.indices, vec![3]);
    assert_eq!(path.cost, 0.0);
}

#[test]
fn traversal_examples() {
    let net = trained_like_net(8);
    let start = array![0.3, 0.8];
    let (z, frames) = traversal(&net, start.view(), array![1.0, 0.0].view(), 1).unwrap();
    assert_eq!(z, array![[0.3, 0.8]]);
    assert_eq!(frames.nrows(), 1);

    let (z, frames) = traversal(&net, start.view(), array![1.0, 2.0].view(), 12).unwrap();
    assert!((z[[1, 0]] - wrap_unit(0.3 + 1.0 / 12.0)).abs() < 1e-15);
    let past_end = net.decode_mean(array![[0.3 + 1.0, 0.8 + 2.0]].view()).unwrap();
    for (a, b) in frames.row(0).iter().zip(past_end.row(0)) {
        assert!((a - b).abs() < 1e-12);
    }

    let constant = Network::zeros(net.spec().clone()).unwrap();
    let (_, frames) = traversal(&constant, start.view(), array![0.5, 0.25].view(), 6).unwrap();
    assert!(frames.rows().into_iter().all(|r| r == frames.row(0)));
    assert!(traversal(&net, start.view(), array![0.0, 0.0].view(), 4).is_err());
}
