//! Drift pairs `(f, b)`, their structural constants, and initial laws.
//!
//! Drifts come from a closed-form family acting componentwise on `R^d`:
//!
//! ```text
//! f(x)    = -f_rate * x + f_sine * sin(x)
//! b(x, y) =  b_self * x + b_other * y + b_sine * sin(y)
//! ```
//!
//! `b` splits as `b_self * x + φ(y)`, so every expectation of `b(x, ·)`
//! under a law reduces to the law's mean of `φ`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphon::block_of;
use crate::ot::EmpiricalMeasure;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftSpec {
    /// `f(x) = -(c1 + c2) x`, `b(x, y) = c2 (x + y)`.
    LinearMeanReverting {
        c1: f64,
        c2: f64,
        #[serde(default = "one")]
        dim: usize,
    },
    /// Member of the closed-form family with author-declared constants.
    Custom {
        #[serde(default = "one")]
        dim: usize,
        f_rate: f64,
        #[serde(default)]
        f_sine: f64,
        #[serde(default)]
        b_self: f64,
        #[serde(default)]
        b_other: f64,
        #[serde(default)]
        b_sine: f64,
        k_f: f64,
        k_b: f64,
        c0: f64,
    },
}

fn one() -> usize {
    1
}

/// Coefficients of the closed-form family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriftCoeffs {
    pub f_rate: f64,
    pub f_sine: f64,
    pub b_self: f64,
    pub b_other: f64,
    pub b_sine: f64,
}

impl DriftSpec {
    pub fn linear(c1: f64, c2: f64) -> Self {
        DriftSpec::LinearMeanReverting { c1, c2, dim: 1 }
    }

    /// Zero interaction with `f(x) = -rate * x + sine * sin(x)` and
    /// constants derived from the formula.
    pub fn uncoupled(rate: f64, sine: f64) -> Self {
        DriftSpec::Custom {
            dim: 1,
            f_rate: rate,
            f_sine: sine,
            b_self: 0.0,
            b_other: 0.0,
            b_sine: 0.0,
            k_f: rate.abs() + sine.abs(),
            k_b: 0.0,
            c0: rate - sine.abs(),
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            DriftSpec::LinearMeanReverting { dim, .. } | DriftSpec::Custom { dim, .. } => dim,
        }
    }

    pub fn coeffs(&self) -> DriftCoeffs {
        match *self {
            DriftSpec::LinearMeanReverting { c1, c2, .. } => DriftCoeffs {
                f_rate: c1 + c2,
                f_sine: 0.0,
                b_self: c2,
                b_other: c2,
                b_sine: 0.0,
            },
            DriftSpec::Custom {
                f_rate,
                f_sine,
                b_self,
                b_other,
                b_sine,
                ..
            } => DriftCoeffs {
                f_rate,
                f_sine,
                b_self,
                b_other,
                b_sine,
            },
        }
    }

    pub fn k_f(&self) -> f64 {
        match *self {
            DriftSpec::LinearMeanReverting { c1, c2, .. } => c1 + c2,
            DriftSpec::Custom { k_f, .. } => k_f,
        }
    }

    pub fn k_b(&self) -> f64 {
        match *self {
            DriftSpec::LinearMeanReverting { c2, .. } => c2,
            DriftSpec::Custom { k_b, .. } => k_b,
        }
    }

    pub fn c0(&self) -> f64 {
        match *self {
            DriftSpec::LinearMeanReverting { c1, c2, .. } => c1 + c2,
            DriftSpec::Custom { c0, .. } => c0,
        }
    }

    /// Both `f` and `b` are linear, so limit marginals stay Gaussian.
    pub fn is_linear(&self) -> bool {
        let c = self.coeffs();
        c.f_sine == 0.0 && c.b_sine == 0.0
    }

    /// The interaction does not see the other particles' states.
    pub fn is_law_independent(&self) -> bool {
        let c = self.coeffs();
        c.b_other == 0.0 && c.b_sine == 0.0
    }

    /// `b(·, 0)` is bounded on `R^d`.
    pub fn b_at_zero_bounded(&self) -> bool {
        self.coeffs().b_self == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim() == 0 {
            return Err(Error::config("drift.dim", "dimension must be >= 1"));
        }
        match *self {
            DriftSpec::LinearMeanReverting { c1, c2, .. } => {
                if !(c1 > 0.0) {
                    return Err(Error::config("drift.c1", "c1 must be > 0"));
                }
                if !(c2 >= 0.0) {
                    return Err(Error::config("drift.c2", "c2 must be >= 0"));
                }
            }
            DriftSpec::Custom { k_f, k_b, c0, .. } => {
                if !(k_f >= 0.0) || !(k_b >= 0.0) {
                    return Err(Error::config("drift", "k_f and k_b must be >= 0"));
                }
                if c0.abs() > k_f + 1e-12 {
                    return Err(Error::config("drift.c0", "|c0| must not exceed k_f"));
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn f_component(&self, c: &DriftCoeffs, x: f64) -> f64 {
        -c.f_rate * x + if c.f_sine != 0.0 { c.f_sine * x.sin() } else { 0.0 }
    }

    /// The `y`-part of `b`: `φ(y) = b_other * y + b_sine * sin(y)`.
    #[inline]
    pub fn phi_component(c: &DriftCoeffs, y: f64) -> f64 {
        c.b_other * y + if c.b_sine != 0.0 { c.b_sine * y.sin() } else { 0.0 }
    }

    pub fn f(&self, x: &[f64], out: &mut [f64]) {
        let c = self.coeffs();
        for (o, &xi) in out.iter_mut().zip(x) {
            *o = self.f_component(&c, xi);
        }
    }

    pub fn b(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let c = self.coeffs();
        for ((o, &xi), &yi) in out.iter_mut().zip(x).zip(y) {
            *o = c.b_self * xi + Self::phi_component(&c, yi);
        }
    }

    /// Mean of `φ` under `N(mean, variance I)`, componentwise.
    #[inline]
    pub fn phi_gaussian_mean(c: &DriftCoeffs, mean: f64, variance: f64) -> f64 {
        c.b_other * mean
            + if c.b_sine != 0.0 {
                c.b_sine * mean.sin() * (-0.5 * variance).exp()
            } else {
                0.0
            }
    }
}

/// `κ = c0 - 2 K_b`.
pub fn kappa_of(spec: &DriftSpec) -> f64 {
    spec.c0() - 2.0 * spec.k_b()
}

pub fn is_dissipative(spec: &DriftSpec) -> bool {
    kappa_of(spec) > 0.0
}

fn ball_point<R: Rng>(rng: &mut R, dim: usize, radius: f64) -> Vec<f64> {
    let mut dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
    dir.iter_mut().for_each(|v| *v *= r / norm);
    dir
}

/// Smallest observed `-(x1 - x2)·(f(x1) - f(x2)) / |x1 - x2|^2` over random
/// pairs in the ball of the given radius. An upper estimate of `c0`.
pub fn estimate_c0(spec: &DriftSpec, sample_count: usize, radius: f64, seed: u64) -> Result<f64> {
    if sample_count == 0 {
        return Err(Error::Estimation("sample_count must be >= 1".into()));
    }
    let d = spec.dim();
    let mut rng = rng::stream(seed, &[rng::tag::CHECK, 0]);
    let (mut f1, mut f2) = (vec![0.0; d], vec![0.0; d]);
    let mut best = f64::INFINITY;
    for _ in 0..sample_count {
        let x1 = ball_point(&mut rng, d, radius);
        let x2 = ball_point(&mut rng, d, radius);
        let dist2: f64 = x1.iter().zip(&x2).map(|(a, b)| (a - b) * (a - b)).sum();
        if dist2 == 0.0 {
            continue;
        }
        spec.f(&x1, &mut f1);
        spec.f(&x2, &mut f2);
        let inner: f64 = (0..d).map(|k| (x1[k] - x2[k]) * (f1[k] - f2[k])).sum();
        best = best.min(-inner / dist2);
    }
    if best.is_finite() {
        Ok(best)
    } else {
        Err(Error::Estimation("every sampled pair coincided".into()))
    }
}

/// Observed extremes of the structural ratios on random pairs.
#[derive(Clone, Copy, Debug)]
pub struct ConstantCheck {
    pub max_f_ratio: f64,
    pub max_b_ratio: f64,
    pub min_monotone_ratio: f64,
    pub max_monotone_ratio: f64,
}

impl ConstantCheck {
    /// Declared constants are consistent with the observations.
    pub fn consistent_with(&self, spec: &DriftSpec, slack: f64) -> bool {
        self.max_f_ratio <= spec.k_f() + slack
            && self.max_b_ratio <= spec.k_b() + slack
            && self.min_monotone_ratio >= spec.c0() - slack
    }
}

pub fn check_constants(spec: &DriftSpec, pairs: usize, radius: f64, seed: u64) -> ConstantCheck {
    let d = spec.dim();
    let mut rng = rng::stream(seed, &[rng::tag::CHECK, 1]);
    let mut out = ConstantCheck {
        max_f_ratio: 0.0,
        max_b_ratio: 0.0,
        min_monotone_ratio: f64::INFINITY,
        max_monotone_ratio: f64::NEG_INFINITY,
    };
    let (mut fa, mut fb, mut ba, mut bb) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    for _ in 0..pairs {
        let (x1, x2) = (ball_point(&mut rng, d, radius), ball_point(&mut rng, d, radius));
        let (y1, y2) = (ball_point(&mut rng, d, radius), ball_point(&mut rng, d, radius));
        let dx: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a - b).collect();
        let dy: Vec<f64> = y1.iter().zip(&y2).map(|(a, b)| a - b).collect();
        let (ndx, ndy) = (norm(&dx), norm(&dy));
        if ndx == 0.0 {
            continue;
        }
        spec.f(&x1, &mut fa);
        spec.f(&x2, &mut fb);
        let df: Vec<f64> = fa.iter().zip(&fb).map(|(a, b)| a - b).collect();
        out.max_f_ratio = out.max_f_ratio.max(norm(&df) / ndx);
        let mono = -dx.iter().zip(&df).map(|(a, b)| a * b).sum::<f64>() / (ndx * ndx);
        out.min_monotone_ratio = out.min_monotone_ratio.min(mono);
        out.max_monotone_ratio = out.max_monotone_ratio.max(mono);
        spec.b(&x1, &y1, &mut ba);
        spec.b(&x2, &y2, &mut bb);
        let db: Vec<f64> = ba.iter().zip(&bb).map(|(a, b)| a - b).collect();
        out.max_b_ratio = out.max_b_ratio.max(norm(&db) / (ndx + ndy));
    }
    out
}

/// Affine per-block location `intercept + slope * u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineMean {
    pub intercept: Vec<f64>,
    #[serde(default)]
    pub slope: Vec<f64>,
}

impl AffineMean {
    fn at(&self, u: f64, out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.intercept[k] + self.slope.get(k).copied().unwrap_or(0.0) * u;
        }
    }

    fn slope_norm(&self) -> f64 {
        self.slope.iter().map(|s| s * s).sum::<f64>().sqrt()
    }
}

fn unit_boundaries() -> Vec<f64> {
    vec![0.0, 1.0]
}

/// The family of initial laws `u ↦ μ̄_u(0)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialLaw {
    /// `N(mean(u), variance I)` with a shared variance.
    GaussianPerBlock {
        #[serde(default = "unit_boundaries")]
        boundaries: Vec<f64>,
        blocks: Vec<AffineMean>,
        variance: f64,
        theta0: f64,
    },
    PointMass {
        #[serde(default = "unit_boundaries")]
        boundaries: Vec<f64>,
        blocks: Vec<AffineMean>,
        #[serde(default = "default_theta0")]
        theta0: f64,
    },
}

fn default_theta0() -> f64 {
    1.0
}

impl InitialLaw {
    /// `N(mean, variance)` on the line, identical for every `u`.
    pub fn gaussian(mean: f64, variance: f64) -> Self {
        InitialLaw::GaussianPerBlock {
            boundaries: unit_boundaries(),
            blocks: vec![AffineMean {
                intercept: vec![mean],
                slope: vec![0.0],
            }],
            variance,
            theta0: 0.25 / variance,
        }
    }

    pub fn point_mass(location: f64) -> Self {
        InitialLaw::PointMass {
            boundaries: unit_boundaries(),
            blocks: vec![AffineMean {
                intercept: vec![location],
                slope: vec![0.0],
            }],
            theta0: 1.0,
        }
    }

    pub fn boundaries(&self) -> &[f64] {
        match self {
            InitialLaw::GaussianPerBlock { boundaries, .. } | InitialLaw::PointMass { boundaries, .. } => {
                boundaries
            }
        }
    }

    fn blocks(&self) -> &[AffineMean] {
        match self {
            InitialLaw::GaussianPerBlock { blocks, .. } | InitialLaw::PointMass { blocks, .. } => blocks,
        }
    }

    pub fn dim(&self) -> usize {
        self.blocks().first().map_or(0, |b| b.intercept.len())
    }

    pub fn theta0(&self) -> f64 {
        match *self {
            InitialLaw::GaussianPerBlock { theta0, .. } | InitialLaw::PointMass { theta0, .. } => theta0,
        }
    }

    /// Shared per-component variance (zero for point masses).
    pub fn variance(&self) -> f64 {
        match *self {
            InitialLaw::GaussianPerBlock { variance, .. } => variance,
            InitialLaw::PointMass { .. } => 0.0,
        }
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self, InitialLaw::GaussianPerBlock { .. })
    }

    /// Block-wise W2-Lipschitz constant of `u ↦ μ̄_u(0)`; equal variances
    /// make it the largest slope norm.
    pub fn lipschitz_in_u(&self) -> f64 {
        self.blocks().iter().map(AffineMean::slope_norm).fold(0.0, f64::max)
    }

    pub fn mean_at(&self, u: f64, out: &mut [f64]) {
        let b = block_of(self.boundaries(), u);
        self.blocks()[b].at(u, out);
    }

    pub fn mean_vec(&self, u: f64) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        self.mean_at(u, &mut m);
        m
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let b = self.boundaries();
        if b.len() < 2 || b[0] != 0.0 || *b.last().unwrap() != 1.0 || b.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::config(
                "initial.boundaries",
                "must be strictly increasing from 0 to 1",
            ));
        }
        if self.blocks().len() != b.len() - 1 {
            return Err(Error::config("initial.blocks", "need one entry per block"));
        }
        for (k, blk) in self.blocks().iter().enumerate() {
            if blk.intercept.len() != dim || !(blk.slope.is_empty() || blk.slope.len() == dim) {
                return Err(Error::config(
                    format!("initial.blocks[{k}]"),
                    format!("intercept/slope must have the drift dimension {dim}"),
                ));
            }
        }
        let theta0 = self.theta0();
        if !(theta0 > 0.0) {
            return Err(Error::config("initial.theta0", "must be > 0"));
        }
        if let InitialLaw::GaussianPerBlock { variance, .. } = *self {
            if !(variance > 0.0) {
                return Err(Error::config("initial.variance", "must be > 0"));
            }
            let limit = 1.0 / (2.0 * variance * dim as f64);
            if theta0 >= limit {
                return Err(Error::config(
                    "initial.theta0",
                    format!("must be below 1/(2 σ0² d) = {limit}"),
                ));
            }
        }
        Ok(())
    }

    /// One draw from `μ̄_u(0)` into `out`.
    pub fn draw_into<R: Rng>(&self, u: f64, rng: &mut R, out: &mut [f64]) {
        self.mean_at(u, out);
        let sd = self.variance().sqrt();
        if sd > 0.0 {
            for o in out.iter_mut() {
                *o += sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
}

/// `count` independent draws from `μ̄_u(0)`; draw `k` depends only on
/// `(seed, u, k)`.
pub fn sample_initial(family: &InitialLaw, u: f64, count: usize, seed: u64) -> Result<EmpiricalMeasure> {
    if count == 0 {
        return Err(Error::Domain("count must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::Domain(format!("u = {u} is outside [0, 1]")));
    }
    let d = family.dim();
    let mut points = vec![0.0; count * d];
    for (k, chunk) in points.chunks_exact_mut(d).enumerate() {
        let mut r = rng::stream(seed, &[rng::tag::SAMPLE, u.to_bits(), k as u64]);
        family.draw_into(u, &mut r, chunk);
    }
    EmpiricalMeasure::new(d, points)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn custom(f_rate: f64, f_sine: f64, c0: f64, k_b: f64) -> DriftSpec {
        DriftSpec::Custom {
            dim: 1,
            f_rate,
            f_sine,
            b_self: 0.0,
            b_other: 0.0,
            b_sine: 0.0,
            k_f: f_rate.abs() + f_sine.abs(),
            k_b,
            c0,
        }
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(kappa_of(&DriftSpec::linear(2.0, 0.5)), 1.5);
        assert_eq!(kappa_of(&DriftSpec::linear(1.0, 0.0)), 1.0);
        let c = DriftSpec::Custom {
            dim: 1,
            f_rate: 0.3,
            f_sine: 0.0,
            b_self: 0.5,
            b_other: 0.0,
            b_sine: 0.0,
            k_f: 0.3,
            k_b: 0.5,
            c0: 0.3,
        };
        assert!((kappa_of(&c) + 0.7).abs() < 1e-15);
        assert!(!is_dissipative(&c));
    }

    #[test]
    fn dissipativity_is_strict() {
        assert!(is_dissipative(&DriftSpec::linear(2.0, 0.5)));
        // c0 = 2 K_b exactly
        assert!(!is_dissipative(&custom(1.0, 0.0, 1.0, 0.5)));
    }

    #[test]
    fn linear_constants_are_exact() {
        let s = DriftSpec::LinearMeanReverting { c1: 2.0, c2: 0.5, dim: 3 };
        assert_eq!((s.k_f(), s.k_b(), s.c0()), (2.5, 0.5, 2.5));
        let chk = check_constants(&s, 2000, 5.0, 1);
        // the monotonicity ratio is constant in the pair
        assert!((chk.min_monotone_ratio - 2.5).abs() < 1e-12);
        assert!((chk.max_monotone_ratio - 2.5).abs() < 1e-12);
        assert!((chk.max_f_ratio - 2.5).abs() < 1e-12);
        assert!(chk.max_b_ratio <= 0.5 + 1e-12);
        assert!(chk.consistent_with(&s, 1e-9));
    }

    #[test]
    fn estimate_c0_examples() {
        assert!((estimate_c0(&custom(2.0, 0.0, 2.0, 0.0), 100, 3.0, 4).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(estimate_c0(&custom(0.0, 0.0, 0.0, 0.0), 100, 3.0, 4).unwrap(), 0.0);
        assert!(estimate_c0(&custom(1.0, 0.0, 1.0, 0.0), 0, 3.0, 4).is_err());
    }

    #[test]
    fn estimate_c0_nonlinear_against_grid_oracle() {
        let spec = custom(1.0, 0.1, 0.9, 0.0);
        let est = estimate_c0(&spec, 20_000, 4.0, 9).unwrap();
        assert!((0.9..=1.1).contains(&est), "{est}");
        assert!(est >= 0.9 - 1e-9);
        // dense grid oracle of the same ratio on [-4, 4]
        let xs: Vec<f64> = (0..=400).map(|k| -4.0 + 8.0 * k as f64 / 400.0).collect();
        let f = |x: f64| -x + 0.1 * x.sin();
        let mut grid_min = f64::INFINITY;
        for (a, &x1) in xs.iter().enumerate() {
            for &x2 in &xs[a + 1..] {
                grid_min = grid_min.min(-(x1 - x2) * (f(x1) - f(x2)) / ((x1 - x2) * (x1 - x2)));
            }
        }
        assert!(grid_min >= 0.9 - 1e-9);
        // both bound the true infimum 0.9 from above
        assert!((est - grid_min).abs() < 0.02, "{est} vs {grid_min}");
    }

    #[test]
    fn point_mass_samples() {
        let m = sample_initial(&InitialLaw::point_mass(1.0), 0.3, 3, 0).unwrap();
        assert_eq!(m.points(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn gaussian_sample_mean_clt() {
        let fam = InitialLaw::GaussianPerBlock {
            boundaries: vec![0.0, 1.0],
            blocks: vec![AffineMean { intercept: vec![0.0], slope: vec![1.0] }],
            variance: 1.0,
            theta0: 0.25,
        };
        fam.validate(1).unwrap();
        let m = sample_initial(&fam, 0.5, 10_000, 77).unwrap();
        let mean = m.points().iter().sum::<f64>() / 1e4;
        assert!((mean - 0.5).abs() < 4.0 / 100.0, "{mean}");
        assert_eq!(m, sample_initial(&fam, 0.5, 10_000, 77).unwrap());
        assert_ne!(m, sample_initial(&fam, 0.5, 10_000, 78).unwrap());
    }

    #[test]
    fn w2_lipschitz_in_u_is_slope() {
        let fam = InitialLaw::GaussianPerBlock {
            boundaries: vec![0.0, 0.5, 1.0],
            blocks: vec![
                AffineMean { intercept: vec![0.0], slope: vec![1.5] },
                AffineMean { intercept: vec![1.0], slope: vec![-0.5] },
            ],
            variance: 0.5,
            theta0: 0.5,
        };
        fam.validate(1).unwrap();
        assert_eq!(fam.lipschitz_in_u(), 1.5);
        // equal variances: W2 between per-u laws is |Δ mean|
        let (u1, u2) = (0.1, 0.4);
        let dm = (fam.mean_vec(u1)[0] - fam.mean_vec(u2)[0]).abs();
        assert!(dm <= fam.lipschitz_in_u() * (u1 - u2).abs() + 1e-15);
    }

    #[test]
    fn theta0_bound_enforced() {
        let mut fam = InitialLaw::gaussian(0.0, 1.0);
        fam.validate(1).unwrap();
        if let InitialLaw::GaussianPerBlock { theta0, .. } = &mut fam {
            *theta0 = 0.5;
        }
        assert!(fam.validate(1).is_err());
    }

    #[test]
    fn square_exponential_moment_is_stable() {
        // E exp(θ0 |X|^2 / 2) for X ~ N(1, 1), θ0 = 0.25: closed form
        // (1 - θ0)^(-1/2) exp(θ0/2 / (1 - θ0)) = 1.1547 * 1.1813
        let fam = InitialLaw::gaussian(1.0, 1.0);
        let th = fam.theta0() / 2.0;
        let exact = (1.0 - 2.0 * th).powf(-0.5) * (th / (1.0 - 2.0 * th)).exp();
        let est: Vec<f64> = (0..3)
            .map(|s| {
                let m = sample_initial(&fam, 0.5, 100_000, s).unwrap();
                m.points().iter().map(|x| (th * x * x).exp()).sum::<f64>() / 1e5
            })
            .collect();
        for e in &est {
            assert!(e.is_finite());
            assert!((e - exact).abs() / exact < 0.01, "{e} vs {exact}");
        }
    }

    #[test]
    fn drift_config_forms() {
        let s: DriftSpec =
            serde_json::from_str(r#"{"kind": "linear_mean_reverting", "c1": 2, "c2": 0.5}"#).unwrap();
        assert_eq!(s, DriftSpec::linear(2.0, 0.5));
        let bad = serde_json::from_str::<DriftSpec>(
            r#"{"kind": "linear_mean_reverting", "c1": 2, "c2": 0.5, "c3": 1}"#,
        );
        assert!(bad.is_err());
    }
}
