//! Domain types shared by every other module: boxes, point clouds, marginals,
//! cost functions and the flow configuration.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::quadrature::gauss_legendre_interval;

/// Axis-aligned box `[lo_0, hi_0] × … × [lo_{d-1}, hi_{d-1}]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch {
                expected: lo.len(),
                got: hi.len(),
            });
        }
        if lo.is_empty() {
            return Err(Error::InvalidParameter {
                name: "box",
                reason: "zero-dimensional box".into(),
            });
        }
        for (a, b) in lo.iter().zip(&hi) {
            if !(a.is_finite() && b.is_finite() && b > a) {
                return Err(Error::InvalidParameter {
                    name: "box",
                    reason: format!("degenerate side [{a}, {b}]"),
                });
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (a, b))| *v >= *a && *v <= *b)
    }

    /// Smallest box containing both.
    pub fn union(&self, other: &BoxDomain) -> BoxDomain {
        BoxDomain {
            lo: self
                .lo
                .iter()
                .zip(&other.lo)
                .map(|(a, b)| a.min(*b))
                .collect(),
            hi: self
                .hi
                .iter()
                .zip(&other.hi)
                .map(|(a, b)| a.max(*b))
                .collect(),
        }
    }

    /// Grows every side by `frac` of its length on both ends.
    pub fn padded(&self, frac: f64) -> BoxDomain {
        let (lo, hi) = self
            .lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| {
                let pad = frac * (b - a);
                (a - pad, b + pad)
            })
            .unzip();
        BoxDomain { lo, hi }
    }

    /// Bounding box of a non-empty point cloud. Degenerate sides are widened
    /// to unit length around the points.
    pub fn bounding(points: &PointCloud) -> Result<BoxDomain> {
        if points.is_empty() {
            return Err(Error::EmptyPoints);
        }
        let d = points.dim();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for p in points.iter() {
            for k in 0..d {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        for k in 0..d {
            if hi[k] - lo[k] < 1e-12 {
                lo[k] -= 0.5;
                hi[k] += 0.5;
            }
        }
        BoxDomain::new(lo, hi)
    }
}

/// A set of points in R^d stored contiguously, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    dim: usize,
    coords: Vec<f64>,
}

impl PointCloud {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 || !coords.len().is_multiple_of(dim) {
            return Err(Error::InvalidParameter {
                name: "coords",
                reason: format!("length {} is not a multiple of dim {dim}", coords.len()),
            });
        }
        Ok(Self { dim, coords })
    }

    pub fn with_capacity(dim: usize, n: usize) -> Self {
        Self {
            dim,
            coords: Vec::with_capacity(dim * n),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn point_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, p: &[f64]) {
        debug_assert_eq!(p.len(), self.dim);
        self.coords.extend_from_slice(p);
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.coords.chunks_exact(self.dim)
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn coords_mut(&mut self) -> &mut [f64] {
        &mut self.coords
    }

    pub fn all_finite(&self) -> bool {
        self.coords.iter().all(|v| v.is_finite())
    }

    /// Concatenation of two clouds of the same dimension.
    pub fn chain(&self, other: &PointCloud) -> PointCloud {
        let mut coords = Vec::with_capacity(self.coords.len() + other.coords.len());
        coords.extend_from_slice(&self.coords);
        coords.extend_from_slice(&other.coords);
        PointCloud {
            dim: self.dim,
            coords,
        }
    }
}

/// Pointwise density of a probability measure on R^d.
pub trait Density: Send + Sync {
    fn dim(&self) -> usize;
    fn density_at(&self, x: &[f64]) -> f64;
}

#[derive(Clone, Debug)]
pub struct Gaussian {
    mean: Vec<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    precision: Vec<f64>,
    log_norm: f64,
}

impl Gaussian {
    pub fn new(mean: &[f64], covariance: &[f64]) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::InvalidParameter {
                name: "mean",
                reason: "empty mean vector".into(),
            });
        }
        if covariance.len() != d * d {
            return Err(Error::DimensionMismatch {
                expected: d * d,
                got: covariance.len(),
            });
        }
        let cov = DMatrix::from_row_slice(d, d, covariance);
        let asym = (&cov - cov.transpose()).abs().max();
        if asym > 1e-12 * cov.abs().max().max(1.0) {
            return Err(Error::NotPositiveDefinite(format!(
                "asymmetric covariance (max |S - S^T| = {asym:e})"
            )));
        }
        let chol = cov.clone().cholesky().ok_or_else(|| {
            Error::NotPositiveDefinite("Cholesky factorization failed".to_string())
        })?;
        let l = chol.l();
        let log_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let precision = chol.inverse().transpose().as_slice().to_vec();
        let log_norm = -0.5 * (d as f64 * (2.0 * PI).ln() + log_det);
        Ok(Self {
            mean: mean.to_vec(),
            cov,
            chol: l,
            precision,
            log_norm,
        })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.mean.len();
        let mut q = 0.0;
        for i in 0..d {
            let zi = x[i] - self.mean[i];
            let row = &self.precision[i * d..(i + 1) * d];
            let mut acc = 0.0;
            for j in 0..d {
                acc += row[j] * (x[j] - self.mean[j]);
            }
            q += zi * acc;
        }
        self.log_norm - 0.5 * q
    }

    fn grad_log(&self, x: &[f64], out: &mut [f64]) {
        let d = self.mean.len();
        for (i, o) in out.iter_mut().enumerate().take(d) {
            let row = &self.precision[i * d..(i + 1) * d];
            *o = -(0..d).map(|j| row[j] * (x[j] - self.mean[j])).sum::<f64>();
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let d = self.mean.len();
        let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let x = &self.chol * z;
        x.iter().zip(&self.mean).map(|(a, m)| a + m).collect()
    }

    fn support(&self) -> BoxDomain {
        let eig = self.cov.clone().symmetric_eigen();
        let s = eig.eigenvalues.max().max(0.0).sqrt();
        BoxDomain {
            lo: self.mean.iter().map(|m| m - 6.0 * s).collect(),
            hi: self.mean.iter().map(|m| m + 6.0 * s).collect(),
        }
    }
}

/// Radially symmetric ring with a Gaussian bump at the origin, in R².
#[derive(Clone, Debug)]
pub struct RingPeak {
    pub ring_radius: f64,
    pub ring_width: f64,
    pub peak_weight: f64,
    pub peak_std: f64,
    ring_norm: f64,
}

impl Default for RingPeak {
    fn default() -> Self {
        Self::new(1.0, 0.15, 0.3, 0.2).expect("default ring parameters are valid")
    }
}

impl RingPeak {
    pub fn new(ring_radius: f64, ring_width: f64, peak_weight: f64, peak_std: f64) -> Result<Self> {
        let positive = |name, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParameter {
                    name,
                    reason: format!("must be positive, got {v}"),
                })
            }
        };
        positive("ring_radius", ring_radius)?;
        positive("ring_width", ring_width)?;
        positive("peak_std", peak_std)?;
        if !(peak_weight > 0.0 && peak_weight < 1.0) {
            return Err(Error::InvalidParameter {
                name: "peak_weight",
                reason: format!("must lie in (0, 1), got {peak_weight}"),
            });
        }
        // ∫_{R²} exp(-(|x|-r)²/(2 s²)) dx = 2π ∫_0^∞ ρ exp(-(ρ-r)²/(2 s²)) dρ
        let upper = ring_radius + 12.0 * ring_width;
        let (nodes, weights) = gauss_legendre_interval(400, 0.0, upper);
        let ring_norm = 2.0
            * PI
            * nodes
                .iter()
                .zip(&weights)
                .map(|(r, w)| w * r * radial_profile(*r, ring_radius, ring_width))
                .sum::<f64>();
        Ok(Self {
            ring_radius,
            ring_width,
            peak_weight,
            peak_std,
            ring_norm,
        })
    }

    /// Normalizing constant of the ring term.
    pub fn ring_norm(&self) -> f64 {
        self.ring_norm
    }

    fn peak_density(&self, r2: f64) -> f64 {
        let s2 = self.peak_std * self.peak_std;
        (-0.5 * r2 / s2).exp() / (2.0 * PI * s2)
    }

    fn density(&self, x: &[f64]) -> f64 {
        let r2 = x[0] * x[0] + x[1] * x[1];
        let r = r2.sqrt();
        self.peak_weight * self.peak_density(r2)
            + (1.0 - self.peak_weight) * radial_profile(r, self.ring_radius, self.ring_width)
                / self.ring_norm
    }

    fn density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let r2 = x[0] * x[0] + x[1] * x[1];
        let r = r2.sqrt();
        let s2 = self.peak_std * self.peak_std;
        let peak = self.peak_weight * self.peak_density(r2);
        let ring = (1.0 - self.peak_weight) * radial_profile(r, self.ring_radius, self.ring_width)
            / self.ring_norm;
        // the ring term is a cone at the origin; use its zero subgradient there
        let ring_radial = if r > 0.0 {
            -ring * (r - self.ring_radius) / (self.ring_width * self.ring_width) / r
        } else {
            0.0
        };
        for k in 0..2 {
            grad[k] = -peak * x[k] / s2 + ring_radial * x[k];
        }
        peak + ring
    }

    fn sample_radius<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (r0, s) = (self.ring_radius, self.ring_width);
        let lo = (r0 - 8.0 * s).max(0.0);
        let hi = r0 + 8.0 * s;
        let mode = 0.5 * (r0 + (r0 * r0 + 4.0 * s * s).sqrt());
        let envelope = mode * radial_profile(mode, r0, s);
        loop {
            let r = rng.random_range(lo..hi);
            if rng.random::<f64>() * envelope <= r * radial_profile(r, r0, s) {
                return r;
            }
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        if rng.random::<f64>() < self.peak_weight {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            vec![self.peak_std * a, self.peak_std * b]
        } else {
            let r = self.sample_radius(rng);
            let theta = rng.random_range(0.0..2.0 * PI);
            vec![r * theta.cos(), r * theta.sin()]
        }
    }

    fn support(&self) -> BoxDomain {
        let h = (self.ring_radius + 6.0 * self.ring_width).max(6.0 * self.peak_std);
        BoxDomain {
            lo: vec![-h, -h],
            hi: vec![h, h],
        }
    }
}

fn radial_profile(r: f64, r0: f64, s: f64) -> f64 {
    let z = (r - r0) / s;
    (-0.5 * z * z).exp()
}

#[derive(Clone, Debug)]
pub enum Law {
    Gaussian(Gaussian),
    Mixture(Vec<(f64, AnalyticMarginal)>),
    RingPeak(RingPeak),
}

/// A marginal with closed-form density, log-density gradient and sampler.
#[derive(Clone, Debug)]
pub struct AnalyticMarginal {
    dim: usize,
    law: Law,
    support: BoxDomain,
}

impl AnalyticMarginal {
    pub fn law(&self) -> &Law {
        &self.law
    }

    pub fn support_box(&self) -> &BoxDomain {
        &self.support
    }

    fn density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        match &self.law {
            Law::Gaussian(g) => {
                let p = g.log_density(x).exp();
                g.grad_log(x, grad);
                grad.iter_mut().for_each(|v| *v *= p);
                p
            }
            Law::RingPeak(rp) => rp.density_and_grad(x, grad),
            Law::Mixture(parts) => {
                let mut tmp = vec![0.0; self.dim];
                grad.iter_mut().for_each(|v| *v = 0.0);
                let mut p = 0.0;
                for (w, c) in parts {
                    p += w * c.density_and_grad(x, &mut tmp);
                    grad.iter_mut().zip(&tmp).for_each(|(g, t)| *g += w * t);
                }
                p
            }
        }
    }

    /// ∇ log p(x). Meaningful where the density is positive.
    pub fn grad_log_density(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        match &self.law {
            Law::Gaussian(gauss) => gauss.grad_log(x, &mut g),
            _ => {
                let p = self.density_and_grad(x, &mut g);
                g.iter_mut().for_each(|v| *v /= p);
            }
        }
        g
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        match &self.law {
            Law::Gaussian(g) => g.log_density(x),
            _ => self.density_at(x).ln(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match &self.law {
            Law::Gaussian(g) => g.sample(rng),
            Law::RingPeak(rp) => rp.sample(rng),
            Law::Mixture(parts) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (w, c) in parts {
                    acc += w;
                    if u < acc {
                        return c.sample(rng);
                    }
                }
                parts.last().expect("non-empty mixture").1.sample(rng)
            }
        }
    }
}

impl Density for AnalyticMarginal {
    fn dim(&self) -> usize {
        self.dim
    }

    fn density_at(&self, x: &[f64]) -> f64 {
        match &self.law {
            Law::Gaussian(g) => g.log_density(x).exp(),
            Law::RingPeak(rp) => rp.density(x),
            Law::Mixture(parts) => parts.iter().map(|(w, c)| w * c.density_at(x)).sum(),
        }
    }
}

/// A marginal known only through samples.
#[derive(Clone, Debug)]
pub struct EmpiricalMarginal {
    samples: PointCloud,
    support: BoxDomain,
}

impl EmpiricalMarginal {
    pub fn new(samples: PointCloud) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InvalidParameter {
                name: "samples",
                reason: format!("need at least 2 samples, got {}", samples.len()),
            });
        }
        if !samples.all_finite() {
            return Err(Error::InvalidParameter {
                name: "samples",
                reason: "non-finite coordinate".into(),
            });
        }
        let support = BoxDomain::bounding(&samples)?;
        Ok(Self { samples, support })
    }

    pub fn samples(&self) -> &PointCloud {
        &self.samples
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MarginalKind {
    Analytic,
    Empirical,
}

/// A probability measure on R^d, given either in closed form or by samples.
#[derive(Clone, Debug)]
pub enum Marginal {
    Analytic(AnalyticMarginal),
    Empirical(EmpiricalMarginal),
}

impl Marginal {
    pub fn kind(&self) -> MarginalKind {
        match self {
            Marginal::Analytic(_) => MarginalKind::Analytic,
            Marginal::Empirical(_) => MarginalKind::Empirical,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Marginal::Analytic(a) => a.dim,
            Marginal::Empirical(e) => e.samples.dim(),
        }
    }

    pub fn support_box(&self) -> &BoxDomain {
        match self {
            Marginal::Analytic(a) => &a.support,
            Marginal::Empirical(e) => &e.support,
        }
    }

    pub fn as_analytic(&self) -> Option<&AnalyticMarginal> {
        match self {
            Marginal::Analytic(a) => Some(a),
            Marginal::Empirical(_) => None,
        }
    }

    pub fn samples(&self) -> Option<&PointCloud> {
        match self {
            Marginal::Analytic(_) => None,
            Marginal::Empirical(e) => Some(&e.samples),
        }
    }

    /// One draw. Empirical marginals resample their stored points uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Marginal::Analytic(a) => a.sample(rng),
            Marginal::Empirical(e) => {
                let i = rng.random_range(0..e.samples.len());
                e.samples.point(i).to_vec()
            }
        }
    }

    pub fn sample_n<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> PointCloud {
        let mut out = PointCloud::with_capacity(self.dim(), n);
        for _ in 0..n {
            out.push(&self.sample(rng));
        }
        out
    }
}

/// Gaussian marginal. `covariance` is row-major `d × d`.
pub fn make_gaussian(mean: &[f64], covariance: &[f64]) -> Result<Marginal> {
    let g = Gaussian::new(mean, covariance)?;
    let support = g.support();
    Ok(Marginal::Analytic(AnalyticMarginal {
        dim: mean.len(),
        law: Law::Gaussian(g),
        support,
    }))
}

/// Gaussian with covariance `variance · I`.
pub fn make_isotropic_gaussian(mean: &[f64], variance: f64) -> Result<Marginal> {
    let d = mean.len();
    let mut cov = vec![0.0; d * d];
    for k in 0..d {
        cov[k * d + k] = variance;
    }
    make_gaussian(mean, &cov)
}

pub fn make_mixture(components: Vec<(f64, Marginal)>) -> Result<Marginal> {
    if components.is_empty() {
        return Err(Error::InvalidParameter {
            name: "components",
            reason: "empty mixture".into(),
        });
    }
    let total: f64 = components.iter().map(|(w, _)| w).sum();
    if components.iter().any(|(w, _)| w.is_nan() || *w <= 0.0) || (total - 1.0).abs() > 1e-12 {
        return Err(Error::WeightsNotNormalized(total));
    }
    let dim = components[0].1.dim();
    let mut parts = Vec::with_capacity(components.len());
    let mut support: Option<BoxDomain> = None;
    for (w, m) in components {
        if m.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: m.dim(),
            });
        }
        let a = match m {
            Marginal::Analytic(a) => a,
            Marginal::Empirical(_) => {
                return Err(Error::InvalidParameter {
                    name: "components",
                    reason: "mixture components must be analytic".into(),
                })
            }
        };
        support = Some(match support {
            None => a.support.clone(),
            Some(s) => s.union(&a.support),
        });
        parts.push((w, a));
    }
    Ok(Marginal::Analytic(AnalyticMarginal {
        dim,
        law: Law::Mixture(parts),
        support: support.expect("non-empty"),
    }))
}

pub fn make_ring_peak(
    ring_radius: f64,
    ring_width: f64,
    peak_weight: f64,
    peak_std: f64,
) -> Result<Marginal> {
    let rp = RingPeak::new(ring_radius, ring_width, peak_weight, peak_std)?;
    let support = rp.support();
    Ok(Marginal::Analytic(AnalyticMarginal {
        dim: 2,
        law: Law::RingPeak(rp),
        support,
    }))
}

pub fn make_empirical(samples: PointCloud) -> Result<Marginal> {
    Ok(Marginal::Empirical(EmpiricalMarginal::new(samples)?))
}

/// Transport cost `c(x, y) ≥ 0` with its partial gradients.
pub trait Cost: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn evaluate(&self, x: &[f64], y: &[f64]) -> f64;
    fn grad_x(&self, x: &[f64], y: &[f64], out: &mut [f64]);
    fn grad_y(&self, x: &[f64], y: &[f64], out: &mut [f64]);

    /// `Some(φ)` when `c(x, y) = Σ_k φ(x_k, y_k)`; lets quadrature factor the
    /// Gibbs kernel axis by axis.
    fn axis_term(&self) -> Option<fn(f64, f64) -> f64> {
        None
    }
}

/// `c(x, y) = ‖x − y‖²`.
#[derive(Clone, Copy, Debug, Default)]
pub struct QuadraticCost;

impl Cost for QuadraticCost {
    fn name(&self) -> &str {
        "quadratic"
    }

    fn evaluate(&self, x: &[f64], y: &[f64]) -> f64 {
        x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    fn grad_x(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        for ((o, a), b) in out.iter_mut().zip(x).zip(y) {
            *o = 2.0 * (a - b);
        }
    }

    fn grad_y(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        for ((o, a), b) in out.iter_mut().zip(x).zip(y) {
            *o = 2.0 * (b - a);
        }
    }

    fn axis_term(&self) -> Option<fn(f64, f64) -> f64> {
        Some(|a, b| (a - b) * (a - b))
    }
}

/// `c ≡ 0`. Degenerate but handy: every Gibbs quantity is trivial.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroCost;

impl Cost for ZeroCost {
    fn name(&self) -> &str {
        "zero"
    }

    fn evaluate(&self, _: &[f64], _: &[f64]) -> f64 {
        0.0
    }

    fn grad_x(&self, _: &[f64], _: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }

    fn grad_y(&self, _: &[f64], _: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }

    fn axis_term(&self) -> Option<fn(f64, f64) -> f64> {
        Some(|_, _| 0.0)
    }
}

pub fn quadratic_cost() -> QuadraticCost {
    QuadraticCost
}

/// Resolves a cost by name (`quadratic` or `zero`).
pub fn cost_by_name(name: &str) -> Result<Box<dyn Cost>> {
    match name {
        "quadratic" => Ok(Box::new(QuadraticCost)),
        "zero" => Ok(Box::new(ZeroCost)),
        other => Err(Error::Config(format!("unknown cost `{other}`"))),
    }
}

/// Which divergence drives a mobile particle family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KlVariant {
    /// `KL(ρ ‖ ref)`, drift `−∇ log(ρ / ref)`.
    Forward,
    /// `KL(ref ‖ ρ)`, drift `+∇(ref / ρ)`.
    Reverse,
}

impl KlVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            KlVariant::Forward => "forward",
            KlVariant::Reverse => "reverse",
        }
    }
}

impl std::str::FromStr for KlVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(KlVariant::Forward),
            "reverse" => Ok(KlVariant::Reverse),
            other => Err(Error::Config(format!("unknown KL variant `{other}`"))),
        }
    }
}

/// Hyperparameters of the particle min-max flow.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowConfig {
    /// Particle pairs per family; the system holds `2 * n_pairs` pairs.
    pub n_pairs: usize,
    pub dt: f64,
    /// Timescale ratio; `Λ` advances by `beta * dt` per step.
    pub beta: f64,
    pub steps: usize,
    /// Per-step noise standard deviation is `noise_std_coeff * sqrt(dt)`.
    pub noise_std_coeff: f64,
    pub lambda0: f64,
    /// Variance of the pairing perturbation at initialization.
    pub eta_var: f64,
    pub kl_variant_x: KlVariant,
    pub kl_variant_y: KlVariant,
    pub bins_per_dim: usize,
    pub seed: u64,
    /// Keep `Λ` at `lambda0` for the whole run.
    pub freeze_lambda: bool,
    /// Histogram boxes are recomputed every this many steps.
    pub box_refresh: usize,
    /// Fractional padding per side of the histogram boxes.
    pub box_padding: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            n_pairs: 10_000,
            dt: 5e-4,
            beta: 0.05,
            steps: 2000,
            noise_std_coeff: 0.02,
            lambda0: 3.0,
            eta_var: 1e-4,
            kl_variant_x: KlVariant::Forward,
            kl_variant_y: KlVariant::Forward,
            bins_per_dim: 24,
            seed: 0,
            freeze_lambda: false,
            box_refresh: 100,
            box_padding: 0.1,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |name, reason: String| Err(Error::InvalidParameter { name, reason });
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt", format!("must be positive, got {}", self.dt));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad("beta", format!("must lie in (0, 1), got {}", self.beta));
        }
        if !(self.lambda0 > 0.0 && self.lambda0.is_finite()) {
            return bad("lambda0", format!("must be positive, got {}", self.lambda0));
        }
        if self.n_pairs < 1 {
            return bad("n_pairs", "must be at least 1".into());
        }
        if self.bins_per_dim < 2 {
            return bad(
                "bins_per_dim",
                format!("must be at least 2, got {}", self.bins_per_dim),
            );
        }
        if !(self.noise_std_coeff >= 0.0 && self.noise_std_coeff.is_finite()) {
            return bad(
                "noise_std_coeff",
                format!("must be non-negative, got {}", self.noise_std_coeff),
            );
        }
        if !(self.eta_var >= 0.0 && self.eta_var.is_finite()) {
            return bad(
                "eta_var",
                format!("must be non-negative, got {}", self.eta_var),
            );
        }
        if self.box_refresh < 1 {
            return bad("box_refresh", "must be at least 1".into());
        }
        if self.box_padding.is_nan() || self.box_padding < 0.0 {
            return bad(
                "box_padding",
                format!("must be non-negative, got {}", self.box_padding),
            );
        }
        Ok(())
    }
}
