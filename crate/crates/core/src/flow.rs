//! Particle simulation of the timescale-separated min-max flow.
//!
//! The coupling is carried by two families of pairs. Family 1 holds frozen
//! `X⁽¹⁾ ~ μ` and mobile `Y⁽¹⁾`; family 2 holds mobile `X⁽²⁾` and frozen
//! `Y⁽²⁾ ~ ν`. Each step refits histogram estimates of the pooled marginals,
//! moves the mobile particles by an Euler-Maruyama step of
//!
//! ```text
//! x ← x + dt·(−∇ₓc(x, y) − Λ·G(x)) + σ₀·√dt·N(0, I)
//! ```
//!
//! where `G` is the one-sided difference gradient of the chosen divergence's
//! first variation, and then raises `Λ` by `β·dt` times the estimated
//! marginal divergences.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::density::{
    fit_histogram, fit_histogram_pooled, kl_from_values, l2_from_values, random_gradient_into,
    reference_values, reverse_kl_from_values, HistogramDensity,
};
use crate::error::{Error, Result};
use crate::model::{
    AnalyticMarginal, BoxDomain, Cost, Density, FlowConfig, KlVariant, Marginal, PointCloud,
};
use crate::oracle::empirical_coupling_cost;

/// Particles per independently seeded random stream.
const RNG_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSystem {
    /// Frozen, i.i.d. `μ`.
    pub x1: PointCloud,
    /// Mobile partners of `x1`.
    pub y1: PointCloud,
    /// Mobile partners of `y2`.
    pub x2: PointCloud,
    /// Frozen, i.i.d. `ν`.
    pub y2: PointCloud,
    pub lambda: f64,
    pub step_index: usize,
}

impl ParticleSystem {
    /// Pairs per family.
    pub fn n_pairs(&self) -> usize {
        self.x1.len()
    }

    pub fn dim_x(&self) -> usize {
        self.x1.dim()
    }

    pub fn dim_y(&self) -> usize {
        self.y1.dim()
    }

    pub fn all_finite(&self) -> bool {
        self.x1.all_finite() && self.y1.all_finite() && self.x2.all_finite() && self.y2.all_finite()
    }

    /// `X⁽¹⁾ ∪ X⁽²⁾`.
    pub fn pooled_x(&self) -> PointCloud {
        self.x1.chain(&self.x2)
    }

    /// `Y⁽¹⁾ ∪ Y⁽²⁾`.
    pub fn pooled_y(&self) -> PointCloud {
        self.y1.chain(&self.y2)
    }
}

/// The three drift combinations compared in the experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    /// Both mobile families follow the forward divergence.
    I,
    /// Both follow the reverse divergence.
    II,
    /// Reverse for the mobile `X` family, forward for the mobile `Y` family.
    III,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::I, Method::II, Method::III];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::I => "I",
            Method::II => "II",
            Method::III => "III",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(Method::I),
            "II" | "2" => Ok(Method::II),
            "III" | "3" => Ok(Method::III),
            other => Err(Error::Config(format!(
                "unknown method `{other}` (expected I, II or III)"
            ))),
        }
    }
}

/// `(kl_variant_x, kl_variant_y)` for a method.
pub fn method_preset(which: Method) -> (KlVariant, KlVariant) {
    match which {
        Method::I => (KlVariant::Forward, KlVariant::Forward),
        Method::II => (KlVariant::Reverse, KlVariant::Reverse),
        Method::III => (KlVariant::Reverse, KlVariant::Forward),
    }
}

/// Draws both families: `x1 ~ μ`, `y1 = x1 + ξ`, `y2 ~ ν`, `x2 = y2 + ξ'`
/// with `ξ, ξ' ~ N(0, η I)`.
pub fn init_particles<R: Rng + ?Sized>(
    mu: &Marginal,
    nu: &Marginal,
    cfg: &FlowConfig,
    rng: &mut R,
) -> Result<ParticleSystem> {
    cfg.validate()?;
    if mu.dim() != nu.dim() {
        return Err(Error::DimensionMismatch {
            expected: mu.dim(),
            got: nu.dim(),
        });
    }
    let n = cfg.n_pairs;
    let std = cfg.eta_var.sqrt();
    let jitter = |src: &PointCloud, rng: &mut R| -> PointCloud {
        let mut out = src.clone();
        if std > 0.0 {
            let normal = Normal::new(0.0, std).expect("finite std");
            out.coords_mut()
                .iter_mut()
                .for_each(|v| *v += normal.sample(rng));
        }
        out
    };
    let x1 = mu.sample_n(n, rng);
    let y1 = jitter(&x1, rng);
    let y2 = nu.sample_n(n, rng);
    let x2 = jitter(&y2, rng);
    Ok(ParticleSystem {
        x1,
        y1,
        x2,
        y2,
        lambda: cfg.lambda0,
        step_index: 0,
    })
}

/// Reference density a histogram is compared against: the analytic law, or
/// a histogram of an empirical marginal's samples on the same grid.
#[derive(Clone, Debug)]
pub enum Reference<'a> {
    Analytic(&'a AnalyticMarginal),
    Histogram(HistogramDensity),
}

impl<'a> Reference<'a> {
    /// Reference for `m` on the grid `(domain, bins_per_dim)`.
    pub fn for_marginal(m: &'a Marginal, domain: &BoxDomain, bins_per_dim: usize) -> Result<Self> {
        match m {
            Marginal::Analytic(a) => Ok(Reference::Analytic(a)),
            Marginal::Empirical(e) => Ok(Reference::Histogram(fit_histogram(
                e.samples(),
                domain,
                bins_per_dim,
            )?)),
        }
    }
}

impl Density for Reference<'_> {
    fn dim(&self) -> usize {
        match self {
            Reference::Analytic(a) => a.dim(),
            Reference::Histogram(h) => h.dim(),
        }
    }

    fn density_at(&self, x: &[f64]) -> f64 {
        match self {
            Reference::Analytic(a) => a.density_at(x),
            Reference::Histogram(h) => h.density_at(x),
        }
    }
}

fn chunk_rng(seed: u64, step: usize, family: u64, chunk: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(step as u64).to_le_bytes());
    key[16..24].copy_from_slice(&family.to_le_bytes());
    key[24..].copy_from_slice(&(chunk as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

struct MoveSpec<'a, R: Density + ?Sized> {
    partners: &'a PointCloud,
    hist: &'a HistogramDensity,
    reference: &'a R,
    variant: KlVariant,
    /// Family tag used for the random streams and diagnostics.
    family: u64,
    /// The mobile side is the first argument of the cost.
    mobile_is_x: bool,
}

fn move_family<R: Density + ?Sized>(
    mobile: &mut PointCloud,
    spec: MoveSpec<'_, R>,
    cost: &dyn Cost,
    lambda: f64,
    cfg: &FlowConfig,
    step: usize,
) -> Option<usize> {
    let d = mobile.dim();
    let dt = cfg.dt;
    let noise = cfg.noise_std_coeff * dt.sqrt();
    let partners = spec.partners;
    mobile
        .coords_mut()
        .par_chunks_mut(RNG_CHUNK * d)
        .enumerate()
        .map(|(c, block)| {
            let mut rng = chunk_rng(cfg.seed, step, spec.family, c);
            let mut gc = vec![0.0; d];
            let mut gk = vec![0.0; d];
            let mut scratch = vec![0.0; d];
            let mut x = vec![0.0; d];
            let mut bad = None;
            for (j, p) in block.chunks_exact_mut(d).enumerate() {
                let i = c * RNG_CHUNK + j;
                let q = partners.point(i);
                x.copy_from_slice(p);
                if spec.mobile_is_x {
                    cost.grad_x(&x, q, &mut gc);
                } else {
                    cost.grad_y(q, &x, &mut gc);
                }
                random_gradient_into(
                    spec.hist,
                    spec.reference,
                    &x,
                    spec.variant,
                    &mut rng,
                    &mut scratch,
                    &mut gk,
                );
                for k in 0..d {
                    let z: f64 = if noise > 0.0 {
                        rng.sample(StandardNormal)
                    } else {
                        0.0
                    };
                    p[k] = x[k] + dt * (-gc[k] - lambda * gk[k]) + noise * z;
                }
                if bad.is_none() && !p.iter().all(|v| v.is_finite()) {
                    bad = Some(i);
                }
            }
            bad
        })
        .reduce(
            || None,
            |a, b| match (a, b) {
                (Some(a), Some(b)) => Some(a.min(b)),
                (a, None) => a,
                (None, b) => b,
            },
        )
}

/// One Euler-Maruyama step of the mobile families against fitted marginal
/// histograms. Frozen families are untouched. Random numbers come from
/// streams keyed by `(seed, step, family, chunk)`, so the result does not
/// depend on the number of worker threads.
#[allow(clippy::too_many_arguments)]
pub fn step_particles<R1: Density + ?Sized, R2: Density + ?Sized>(
    ps: &mut ParticleSystem,
    ref_mu: &R1,
    ref_nu: &R2,
    cost: &dyn Cost,
    cfg: &FlowConfig,
    rho1: &HistogramDensity,
    rho2: &HistogramDensity,
) -> Result<()> {
    let step = ps.step_index;
    let lambda = ps.lambda;
    let bad_x = move_family(
        &mut ps.x2,
        MoveSpec {
            partners: &ps.y2,
            hist: rho1,
            reference: ref_mu,
            variant: cfg.kl_variant_x,
            family: 2,
            mobile_is_x: true,
        },
        cost,
        lambda,
        cfg,
        step,
    );
    if let Some(index) = bad_x {
        return Err(Error::NonFinite {
            step,
            family: "x2",
            index,
        });
    }
    let bad_y = move_family(
        &mut ps.y1,
        MoveSpec {
            partners: &ps.x1,
            hist: rho2,
            reference: ref_nu,
            variant: cfg.kl_variant_y,
            family: 1,
            mobile_is_x: false,
        },
        cost,
        lambda,
        cfg,
        step,
    );
    if let Some(index) = bad_y {
        return Err(Error::NonFinite {
            step,
            family: "y1",
            index,
        });
    }
    ps.step_index += 1;
    Ok(())
}

/// `Λ ← Λ + β·dt·(kl1 + kl2)`, with negative estimates clamped to zero.
pub fn step_lambda(ps: &mut ParticleSystem, kl1: f64, kl2: f64, cfg: &FlowConfig) {
    if cfg.freeze_lambda {
        return;
    }
    ps.lambda += cfg.beta * cfg.dt * (kl1.max(0.0) + kl2.max(0.0));
}

/// `(1 − s)·X + s·Y` over both families, family 1 first.
pub fn interpolant(ps: &ParticleSystem, s: f64) -> Result<PointCloud> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::InvalidParameter {
            name: "s",
            reason: format!("must lie in [0, 1], got {s}"),
        });
    }
    if ps.dim_x() != ps.dim_y() {
        return Err(Error::DimensionMismatch {
            expected: ps.dim_x(),
            got: ps.dim_y(),
        });
    }
    let mut out = PointCloud::with_capacity(ps.dim_x(), 2 * ps.n_pairs());
    let mut buf = vec![0.0; ps.dim_x()];
    for (xs, ys) in [(&ps.x1, &ps.y1), (&ps.x2, &ps.y2)] {
        for (x, y) in xs.iter().zip(ys.iter()) {
            for ((b, a), c) in buf.iter_mut().zip(x).zip(y) {
                *b = (1.0 - s) * a + s * c;
            }
            out.push(&buf);
        }
    }
    Ok(out)
}

/// Diagnostics at one recorded step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub step: usize,
    /// `Λ`-time, `β·dt·step`.
    pub t: f64,
    pub lambda: f64,
    /// `KL(ρ₁ ‖ μ)`.
    pub kl1: f64,
    /// `KL(ρ₂ ‖ ν)`.
    pub kl2: f64,
    /// `KL(μ ‖ ρ₁)`.
    pub reverse_kl1: f64,
    /// `KL(ν ‖ ρ₂)`.
    pub reverse_kl2: f64,
    pub cost: f64,
    pub l2_mu: f64,
    pub l2_nu: f64,
}

impl TrajectoryRecord {
    pub fn total_kl(&self) -> f64 {
        self.kl1 + self.kl2
    }

    pub fn total_reverse_kl(&self) -> f64 {
        self.reverse_kl1 + self.reverse_kl2
    }

    /// Larger of the two marginal L² errors.
    pub fn l2_error(&self) -> f64 {
        self.l2_mu.max(self.l2_nu)
    }

    /// `cost + Λ·(kl1 + kl2)`.
    pub fn energy(&self) -> f64 {
        self.cost + self.lambda * self.total_kl()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub records: Vec<TrajectoryRecord>,
}

impl Trajectory {
    pub fn last(&self) -> Option<&TrajectoryRecord> {
        self.records.last()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn lambda_non_decreasing(&self) -> bool {
        self.records.windows(2).all(|w| w[1].lambda >= w[0].lambda)
    }

    /// Records where `Λ(t)` exceeds `√(2(c*·t + Λ(0)²/2))`.
    pub fn growth_bound_violations(&self, c_star: f64) -> Vec<usize> {
        let Some(first) = self.records.first() else {
            return Vec::new();
        };
        let l0 = first.lambda;
        self.records
            .iter()
            .filter(|r| {
                r.lambda > crate::response::lambda_growth_bound(c_star, l0, r.t) * (1.0 + 1e-12)
            })
            .map(|r| r.step)
            .collect()
    }
}

/// Result of [`run`]. A run that hits a non-finite update stops early and
/// keeps everything recorded so far together with the error.
#[derive(Debug)]
pub struct RunOutput {
    pub trajectory: Trajectory,
    pub system: ParticleSystem,
    /// `(step, state)` for each requested snapshot step that was reached.
    pub snapshots: Vec<(usize, ParticleSystem)>,
    pub abort: Option<Error>,
}

impl RunOutput {
    pub fn into_result(self) -> Result<(Trajectory, ParticleSystem)> {
        match self.abort {
            Some(e) => Err(e),
            None => Ok((self.trajectory, self.system)),
        }
    }
}

struct Grid<'a> {
    box_x: BoxDomain,
    box_y: BoxDomain,
    ref_mu: Reference<'a>,
    ref_nu: Reference<'a>,
    ref_mu_values: Vec<f64>,
    ref_nu_values: Vec<f64>,
}

fn histogram_box(clouds: &[&PointCloud], padding: f64) -> Result<BoxDomain> {
    let mut b = BoxDomain::bounding(clouds[0])?;
    for c in &clouds[1..] {
        b = b.union(&BoxDomain::bounding(c)?);
    }
    Ok(b.padded(padding))
}

impl<'a> Grid<'a> {
    fn build(
        ps: &ParticleSystem,
        mu: &'a Marginal,
        nu: &'a Marginal,
        cfg: &FlowConfig,
    ) -> Result<Self> {
        let mut xs = vec![&ps.x1, &ps.x2];
        let mut ys = vec![&ps.y1, &ps.y2];
        if let Some(s) = mu.samples() {
            xs.push(s);
        }
        if let Some(s) = nu.samples() {
            ys.push(s);
        }
        let box_x = histogram_box(&xs, cfg.box_padding)?;
        let box_y = histogram_box(&ys, cfg.box_padding)?;
        let ref_mu = Reference::for_marginal(mu, &box_x, cfg.bins_per_dim)?;
        let ref_nu = Reference::for_marginal(nu, &box_y, cfg.bins_per_dim)?;
        // cell-center reference values depend only on the grid
        let probe_x = fit_histogram(&ps.x1, &box_x, cfg.bins_per_dim)?;
        let probe_y = fit_histogram(&ps.y2, &box_y, cfg.bins_per_dim)?;
        let ref_mu_values = reference_values(&probe_x, &ref_mu);
        let ref_nu_values = reference_values(&probe_y, &ref_nu);
        Ok(Self {
            box_x,
            box_y,
            ref_mu,
            ref_nu,
            ref_mu_values,
            ref_nu_values,
        })
    }
}

fn divergence(h: &HistogramDensity, ref_values: &[f64], variant: KlVariant) -> f64 {
    match variant {
        KlVariant::Forward => kl_from_values(h, ref_values),
        KlVariant::Reverse => reverse_kl_from_values(h, ref_values),
    }
}

/// Runs the flow for `cfg.steps` steps. Record `k` describes the state after
/// `k` steps, so a run yields `steps + 1` records. Snapshots are taken at the
/// requested step indices (after that many steps).
pub fn run(
    mu: &Marginal,
    nu: &Marginal,
    cost: &dyn Cost,
    cfg: &FlowConfig,
    snapshot_steps: &[usize],
) -> Result<RunOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ps = init_particles(mu, nu, cfg, &mut rng)?;
    let mut trajectory = Trajectory {
        records: Vec::with_capacity(cfg.steps + 1),
    };
    let mut snapshots = Vec::new();
    let mut grid: Option<Grid<'_>> = None;
    let mut abort = None;
    for k in 0..=cfg.steps {
        if k % cfg.box_refresh == 0 || grid.is_none() {
            grid = Some(Grid::build(&ps, mu, nu, cfg)?);
        }
        let g = grid.as_ref().expect("grid built above");
        let rho1 = fit_histogram_pooled(&[&ps.x1, &ps.x2], &g.box_x, cfg.bins_per_dim)?;
        let rho2 = fit_histogram_pooled(&[&ps.y1, &ps.y2], &g.box_y, cfg.bins_per_dim)?;
        let kl1 = kl_from_values(&rho1, &g.ref_mu_values);
        let kl2 = kl_from_values(&rho2, &g.ref_nu_values);
        trajectory.records.push(TrajectoryRecord {
            step: k,
            t: cfg.beta * cfg.dt * k as f64,
            lambda: ps.lambda,
            kl1,
            kl2,
            reverse_kl1: reverse_kl_from_values(&rho1, &g.ref_mu_values),
            reverse_kl2: reverse_kl_from_values(&rho2, &g.ref_nu_values),
            cost: empirical_coupling_cost(&ps, cost),
            l2_mu: l2_from_values(&rho1, &g.ref_mu_values),
            l2_nu: l2_from_values(&rho2, &g.ref_nu_values),
        });
        if snapshot_steps.contains(&k) {
            snapshots.push((k, ps.clone()));
        }
        if k == cfg.steps {
            break;
        }
        let drive_x = divergence(&rho1, &g.ref_mu_values, cfg.kl_variant_x);
        let drive_y = divergence(&rho2, &g.ref_nu_values, cfg.kl_variant_y);
        if let Err(e) = step_particles(&mut ps, &g.ref_mu, &g.ref_nu, cost, cfg, &rho1, &rho2) {
            abort = Some(e);
            break;
        }
        step_lambda(&mut ps, drive_x, drive_y, cfg);
    }
    Ok(RunOutput {
        trajectory,
        system: ps,
        snapshots,
        abort,
    })
}
