//! Rank-1 lattice rules on the unit torus.
//!
//! A rank-1 rule with `m` points and generator `b` places point `j` at
//! `(j * b mod m) / m`. Randomized QMC adds one uniform shift to the whole
//! point set, modulo 1, which keeps every point marginally uniform while
//! preserving the lattice spacing.

pub mod normal;

use std::fmt;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

pub use normal::{clamped_icdf, inverse_normal_cdf, normal_cdf, PROB_CLAMP};

/// Largest Fibonacci index whose value fits comfortably in point-index arithmetic.
const MAX_FIBONACCI_INDEX: u32 = 60;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatticeRule {
    count: usize,
    generator: Vec<usize>,
}

impl LatticeRule {
    /// Builds a rule from an explicit generator, reducing entries modulo `count`.
    pub fn new(count: usize, generator: Vec<usize>) -> Result<Self> {
        if count == 0 {
            return Err(Error::invalid("lattice point count must be at least 1"));
        }
        if generator.is_empty() {
            return Err(Error::invalid("lattice dimension must be at least 1"));
        }
        if generator[0] % count != 1 % count {
            return Err(Error::invalid("rank-1 generator must start with 1"));
        }
        let generator = generator.into_iter().map(|g| g % count).collect();
        Ok(Self { count, generator })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.generator.len()
    }

    pub fn generator(&self) -> &[usize] {
        &self.generator
    }

    /// Coordinate `k` of unshifted point `j`, as the integer numerator over `m`.
    fn numerator(&self, j: usize, k: usize) -> usize {
        ((j as u128 * self.generator[k] as u128) % self.count as u128) as usize
    }

    /// Unshifted lattice points, one row per point, `j = 0..m` including the origin.
    pub fn points(&self) -> Array2<f64> {
        let m = self.count as f64;
        Array2::from_shape_fn((self.count, self.dim()), |(j, k)| {
            self.numerator(j, k) as f64 / m
        })
    }

    /// Lattice points translated by `shift` modulo 1.
    pub fn shifted_points(&self, shift: &[f64]) -> Result<Array2<f64>> {
        if shift.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "lattice shift",
                expected: self.dim(),
                got: shift.len(),
            });
        }
        let mut pts = self.points();
        for mut row in pts.rows_mut() {
            for (x, s) in row.iter_mut().zip(shift) {
                *x = wrap_unit(*x + s);
            }
        }
        Ok(pts)
    }
}

impl fmt::Display for LatticeRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m={} b={:?}", self.count, self.generator)
    }
}

/// `x - floor(x)`, guarded so the result is always in `[0, 1)`.
pub fn wrap_unit(x: f64) -> f64 {
    let y = x - x.floor();
    if y >= 1.0 {
        0.0
    } else {
        y
    }
}

/// `Fib(k)` with `Fib(1) = Fib(2) = 1`.
pub fn fibonacci(k: u32) -> u64 {
    let (mut a, mut b) = (0u64, 1u64);
    for _ in 0..k {
        let next = a + b;
        a = b;
        b = next;
    }
    a
}

/// The Fibonacci index `k` with `Fib(k) == m`, if `m` is a Fibonacci number of index >= 3.
pub fn fibonacci_index(m: usize) -> Option<u32> {
    (3..=MAX_FIBONACCI_INDEX).find(|&k| fibonacci(k) == m as u64)
}

/// The two-dimensional Fibonacci lattice with `m = Fib(k)` and `b = [1, Fib(k-1)]`.
pub fn fibonacci_rule(k: u32) -> Result<LatticeRule> {
    if k < 3 {
        return Err(Error::invalid(format!(
            "Fibonacci index k={k} gives m <= 1; k must be at least 3"
        )));
    }
    if k > MAX_FIBONACCI_INDEX {
        return Err(Error::invalid(format!(
            "Fibonacci index k={k} exceeds the supported maximum {MAX_FIBONACCI_INDEX}"
        )));
    }
    let m = fibonacci(k) as usize;
    let b = fibonacci(k - 1) as usize;
    LatticeRule::new(m, vec![1, b])
}

/// Korobov rule with generator `[1, a, a^2, ..., a^(d-1)]` modulo `m`.
pub fn korobov_rule(count: usize, base: usize, dim: usize) -> Result<LatticeRule> {
    if dim == 0 {
        return Err(Error::invalid("Korobov dimension must be at least 1"));
    }
    if count < 3 || base < 2 || base > count - 1 {
        return Err(Error::invalid(format!(
            "Korobov base a={base} must lie in 2..={} for m={count}",
            count.saturating_sub(1)
        )));
    }
    let mut generator = Vec::with_capacity(dim);
    let mut g = 1u128;
    for _ in 0..dim {
        generator.push(g as usize);
        g = (g * base as u128) % count as u128;
    }
    LatticeRule::new(count, generator)
}

/// Squared minimum toroidal distance between distinct points, in units of `1/m^2`.
///
/// Rank-1 point sets are closed under subtraction mod 1, so the minimum over
/// pairs equals the minimum over nonzero points of their distance to the origin.
fn min_distance_sq_numerator(rule: &LatticeRule) -> u128 {
    let m = rule.count;
    (1..m)
        .map(|j| {
            (0..rule.dim())
                .map(|k| {
                    let r = rule.numerator(j, k);
                    let w = r.min(m - r) as u128;
                    w * w
                })
                .sum::<u128>()
        })
        .min()
        .unwrap_or(0)
}

/// Korobov rule whose base maximizes the minimum pairwise toroidal distance.
///
/// The search is exhaustive over `a = 2..m-1` in exact integer arithmetic;
/// ties go to the smallest base.
pub fn korobov_search(count: usize, dim: usize) -> Result<LatticeRule> {
    if count < 3 {
        return Err(Error::invalid(format!(
            "Korobov search needs m >= 3, got {count}"
        )));
    }
    if dim == 0 {
        return Err(Error::invalid("Korobov dimension must be at least 1"));
    }
    let mut best: Option<(u128, LatticeRule)> = None;
    for a in 2..count {
        let rule = korobov_rule(count, a, dim)?;
        let score = min_distance_sq_numerator(&rule);
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, rule));
        }
    }
    Ok(best.expect("at least one candidate base").1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SamplingMode {
    /// `m` independent uniform points.
    PlainMc,
    /// The unshifted lattice.
    FixedQmc,
    /// The lattice under one fresh uniform shift per draw.
    ShiftedRqmc,
}

impl SamplingMode {
    pub fn name(self) -> &'static str {
        match self {
            SamplingMode::PlainMc => "mc",
            SamplingMode::FixedQmc => "qmc",
            SamplingMode::ShiftedRqmc => "rqmc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mc" => Ok(SamplingMode::PlainMc),
            "qmc" => Ok(SamplingMode::FixedQmc),
            "rqmc" => Ok(SamplingMode::ShiftedRqmc),
            other => Err(Error::invalid(format!(
                "unknown sampling mode '{other}' (expected mc, qmc or rqmc)"
            ))),
        }
    }
}

/// A realized set of latent samples in `[0, 1)^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    points: Array2<f64>,
    mode: SamplingMode,
    shift: Option<Vec<f64>>,
}

impl PointSet {
    /// Wraps externally produced points, which must already lie in `[0, 1)`.
    pub fn from_points(points: Array2<f64>, mode: SamplingMode) -> Result<Self> {
        if points.nrows() == 0 || points.ncols() == 0 {
            return Err(Error::invalid("point set must be non-empty"));
        }
        if points.iter().any(|&x| !(0.0..1.0).contains(&x)) {
            return Err(Error::invalid("point coordinates must lie in [0, 1)"));
        }
        Ok(Self {
            points,
            mode,
            shift: None,
        })
    }

    pub fn fixed(rule: &LatticeRule) -> Self {
        Self {
            points: rule.points(),
            mode: SamplingMode::FixedQmc,
            shift: None,
        }
    }

    pub fn shifted(rule: &LatticeRule, shift: &[f64]) -> Result<Self> {
        Ok(Self {
            points: rule.shifted_points(shift)?,
            mode: SamplingMode::ShiftedRqmc,
            shift: Some(shift.to_vec()),
        })
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn point(&self, j: usize) -> ArrayView1<'_, f64> {
        self.points.row(j)
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn mode(&self) -> SamplingMode {
        self.mode
    }

    pub fn shift(&self) -> Option<&[f64]> {
        self.shift.as_deref()
    }
}

/// Draws a point set from `rule` under `mode`, consuming randomness from `rng`.
///
/// Fixed QMC consumes no randomness.
pub fn generate_points_with<R: Rng + ?Sized>(
    rule: &LatticeRule,
    mode: SamplingMode,
    rng: &mut R,
) -> PointSet {
    match mode {
        SamplingMode::FixedQmc => PointSet::fixed(rule),
        SamplingMode::ShiftedRqmc => {
            let shift: Vec<f64> = (0..rule.dim()).map(|_| rng.random::<f64>()).collect();
            PointSet::shifted(rule, &shift).expect("shift has rule dimension")
        }
        SamplingMode::PlainMc => {
            let points =
                Array2::from_shape_simple_fn((rule.count(), rule.dim()), || rng.random::<f64>());
            PointSet {
                points,
                mode,
                shift: None,
            }
        }
    }
}

/// Seeded variant of [`generate_points_with`]; the seed is ignored for fixed QMC.
pub fn generate_points(rule: &LatticeRule, mode: SamplingMode, seed: u64) -> PointSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_points_with(rule, mode, &mut rng)
}

/// Map from uniform latent coordinates to the decoder's input coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum PriorTransform {
    /// Uniform prior on the flat torus; points pass through unchanged.
    UniformTorus,
    /// Gaussian prior by inversion: `location + scale * icdf(u)`, per coordinate.
    GaussianIcdf { location: Vec<f64>, scale: Vec<f64> },
    /// Uniform prior on the cube without periodic boundaries; points pass through.
    IdentityNonperiodic,
}

impl PriorTransform {
    pub fn standard_gaussian(dim: usize) -> Self {
        PriorTransform::GaussianIcdf {
            location: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }
}

/// Applies `transform` to every point, clamping to `[1e-7, 1 - 1e-7]` before any inversion.
pub fn apply_prior(points: &PointSet, transform: &PriorTransform) -> Result<Array2<f64>> {
    match transform {
        PriorTransform::UniformTorus | PriorTransform::IdentityNonperiodic => {
            Ok(points.points().clone())
        }
        PriorTransform::GaussianIcdf { location, scale } => {
            let d = points.dim();
            if location.len() != d || scale.len() != d {
                return Err(Error::DimensionMismatch {
                    context: "gaussian prior parameters",
                    expected: d,
                    got: location.len().min(scale.len()),
                });
            }
            if scale.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
                return Err(Error::invalid("gaussian prior scales must be positive"));
            }
            let mut out = points.points().clone();
            for mut row in out.rows_mut() {
                for (k, x) in row.iter_mut().enumerate() {
                    *x = location[k] + scale[k] * clamped_icdf(*x);
                }
            }
            if out.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical("inverse CDF produced a non-finite value".into()));
            }
            Ok(out)
        }
    }
}

/// Per-coordinate signed wrapped difference `b - a`, in `[-0.5, 0.5)`.
pub fn wrapped_delta(a: f64, b: f64) -> f64 {
    let d = b - a;
    d - (d + 0.5).floor()
}

/// Mean of a function over the points, as a convenience for integration checks.
pub fn lattice_mean<F: Fn(ArrayView1<f64>) -> f64>(points: &PointSet, f: F) -> f64 {
    let vals: Array1<f64> = points.points().rows().into_iter().map(f).collect();
    vals.mean().unwrap_or(f64::NAN)
}
