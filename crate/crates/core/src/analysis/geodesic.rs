//! Density-ratio shortest paths over the evaluation lattice.
//!
//! Nodes are lattice points joined to their 8 nearest toroidal neighbors
//! (the relation is symmetrized, so some nodes have more). Moving `u -> v`
//! costs `dist(u, v) * rho(u) / max(rho(v), eps)`: leaving dense regions for
//! sparse ones is expensive, and a uniform field gives plain shortest paths.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use ndarray::ArrayView1;

use super::{nearest_point, toroidal_distance, toroidal_distance_sq, DensityField};
use crate::lattice::PointSet;
use crate::par;
use crate::{Error, Result};

pub const GEODESIC_NEIGHBORS: usize = 8;
pub const DEFAULT_DENSITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicPath {
    /// Lattice indices from source to destination.
    pub indices: Vec<usize>,
    /// Cost of each step; `indices.len() - 1` entries.
    pub step_costs: Vec<f64>,
    /// Left-to-right sum of `step_costs`.
    pub cost: f64,
}

/// Sorted, symmetrized `k`-nearest-neighbor lists (ties broken by index).
pub fn knn_graph(points: &PointSet, k: usize) -> Vec<Vec<usize>> {
    let m = points.len();
    let pts = points.points();
    let nearest = par::map_range(m, |i| {
        let mut cand: Vec<(f64, usize)> = (0..m)
            .filter(|&j| j != i)
            .map(|j| (toroidal_distance_sq(pts.row(i), pts.row(j)), j))
            .collect();
        let take = k.min(cand.len());
        if take < cand.len() {
            cand.select_nth_unstable_by(take, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.truncate(take);
        }
        cand.into_iter().map(|(_, j)| j).collect::<Vec<_>>()
    });
    let mut adj = nearest.clone();
    for (i, list) in nearest.iter().enumerate() {
        for &j in list {
            adj[j].push(i);
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    adj
}

pub(crate) fn edge_cost(field: &DensityField, u: usize, v: usize, eps: f64) -> f64 {
    let pts = field.points().points();
    let rho = field.weights();
    toroidal_distance(pts.row(u), pts.row(v)) * rho[u] / rho[v].max(eps)
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl Ord for Entry {
    // Min-heap on cost, then on index.
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Dijkstra from the lattice point nearest `source` to the one nearest `destination`.
pub fn geodesic(
    field: &DensityField,
    source: ArrayView1<f64>,
    destination: ArrayView1<f64>,
    eps: f64,
) -> Result<GeodesicPath> {
    if !(eps > 0.0) {
        return Err(Error::invalid("density floor must be positive"));
    }
    let d = field.points().dim();
    if source.len() != d || destination.len() != d {
        return Err(Error::DimensionMismatch {
            context: "geodesic endpoint",
            expected: d,
            got: if source.len() != d { source.len() } else { destination.len() },
        });
    }
    let src = nearest_point(field.points(), source);
    let dst = nearest_point(field.points(), destination);
    if src == dst {
        return Ok(GeodesicPath {
            indices: vec![src],
            step_costs: Vec::new(),
            cost: 0.0,
        });
    }
    let adj = knn_graph(field.points(), GEODESIC_NEIGHBORS);
    let m = field.len();
    let mut dist = vec![f64::INFINITY; m];
    let mut prev = vec![usize::MAX; m];
    let mut done = vec![false; m];
    let mut heap = BinaryHeap::new();
    dist[src] = 0.0;
    heap.push(Entry(0.0, src));
    while let Some(Entry(du, u)) = heap.pop() {
        if done[u] {
            continue;
        }
        done[u] = true;
        if u == dst {
            break;
        }
        for &v in &adj[u] {
            let nd = du + edge_cost(field, u, v, eps);
            if nd < dist[v] {
                dist[v] = nd;
                prev[v] = u;
                heap.push(Entry(nd, v));
            }
        }
    }
    assert!(dist[dst].is_finite(), "neighbor graph is disconnected");
    let mut indices = vec![dst];
    while *indices.last().expect("nonempty") != src {
        indices.push(prev[*indices.last().expect("nonempty")]);
    }
    indices.reverse();
    let step_costs: Vec<f64> = indices
        .windows(2)
        .map(|w| edge_cost(field, w[0], w[1], eps))
        .collect();
    Ok(GeodesicPath {
        indices,
        step_costs,
        cost: dist[dst],
    })
}
