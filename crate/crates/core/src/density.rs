//! Voxel-binning density estimator and the divergence, error and gradient
//! estimators built on top of it.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{BoxDomain, Density, KlVariant, PointCloud};

const MAX_BINS: u64 = 10_000_000;

/// Piecewise-constant density on a uniform grid of `bins_per_dim^d` cells.
#[derive(Clone, Debug)]
pub struct HistogramDensity {
    domain: BoxDomain,
    bins_per_dim: usize,
    widths: Vec<f64>,
    counts: Vec<u32>,
    total: usize,
    binned: usize,
    cell_volume: f64,
    floor_eps: f64,
    values: Vec<f64>,
}

/// Bins points into `bins_per_dim` cells per axis over `domain`. Points
/// outside the box are dropped but still count towards `total`.
pub fn fit_histogram(
    points: &PointCloud,
    domain: &BoxDomain,
    bins_per_dim: usize,
) -> Result<HistogramDensity> {
    fit_histogram_pooled(&[points], domain, bins_per_dim)
}

/// Same as [`fit_histogram`] on the union of several clouds.
pub fn fit_histogram_pooled(
    clouds: &[&PointCloud],
    domain: &BoxDomain,
    bins_per_dim: usize,
) -> Result<HistogramDensity> {
    let total: usize = clouds.iter().map(|c| c.len()).sum();
    if total == 0 {
        return Err(Error::EmptyPoints);
    }
    let mut h = HistogramDensity::empty(domain, bins_per_dim)?;
    for cloud in clouds {
        if cloud.dim() != domain.dim() {
            return Err(Error::DimensionMismatch {
                expected: domain.dim(),
                got: cloud.dim(),
            });
        }
        for p in cloud.iter() {
            if let Some(k) = h.bin_index(p) {
                h.counts[k] += 1;
                h.binned += 1;
            }
        }
    }
    h.total = total;
    let scale = 1.0 / (total as f64 * h.cell_volume);
    h.values = h
        .counts
        .iter()
        .map(|&c| (c as f64 * scale).max(h.floor_eps))
        .collect();
    Ok(h)
}

impl HistogramDensity {
    fn empty(domain: &BoxDomain, bins_per_dim: usize) -> Result<Self> {
        if bins_per_dim < 1 {
            return Err(Error::InvalidParameter {
                name: "bins_per_dim",
                reason: "must be positive".into(),
            });
        }
        let d = domain.dim();
        let n_bins = (bins_per_dim as u64)
            .checked_pow(d as u32)
            .unwrap_or(u64::MAX);
        if n_bins > MAX_BINS {
            return Err(Error::GridTooLarge(n_bins));
        }
        let widths: Vec<f64> = (0..d)
            .map(|k| (domain.hi[k] - domain.lo[k]) / bins_per_dim as f64)
            .collect();
        let cell_volume: f64 = widths.iter().product();
        if cell_volume.is_nan() || cell_volume <= 0.0 {
            return Err(Error::InvalidParameter {
                name: "box",
                reason: "zero volume".into(),
            });
        }
        Ok(Self {
            domain: domain.clone(),
            bins_per_dim,
            widths,
            counts: vec![0; n_bins as usize],
            total: 0,
            binned: 0,
            cell_volume,
            floor_eps: 1e-10 / cell_volume,
            values: Vec::new(),
        })
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn bins_per_dim(&self) -> usize {
        self.bins_per_dim
    }

    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    /// Floored density value of every cell.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Number of points that landed inside the box.
    pub fn binned(&self) -> usize {
        self.binned
    }

    pub fn binned_fraction(&self) -> f64 {
        self.binned as f64 / self.total as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell_volume
    }

    pub fn floor_eps(&self) -> f64 {
        self.floor_eps
    }

    /// Density of half a particle in one cell. Empty cells take this value
    /// inside the drift potentials.
    pub fn count_floor(&self) -> f64 {
        0.5 / (self.total as f64 * self.cell_volume)
    }

    /// Flat cell index of `x`, or `None` outside the box. The upper face of
    /// the box belongs to the last cell.
    pub fn bin_index(&self, x: &[f64]) -> Option<usize> {
        let b = self.bins_per_dim;
        let mut flat = 0usize;
        for (k, &v) in x.iter().enumerate() {
            let lo = self.domain.lo[k];
            let hi = self.domain.hi[k];
            if !(v >= lo && v <= hi) {
                return None;
            }
            let i = (((v - lo) / self.widths[k]) as usize).min(b - 1);
            flat = flat * b + i;
        }
        Some(flat)
    }

    /// Center of cell `flat`, written into `out`.
    pub fn bin_center(&self, mut flat: usize, out: &mut [f64]) {
        let b = self.bins_per_dim;
        for k in (0..self.domain.dim()).rev() {
            let i = flat % b;
            flat /= b;
            out[k] = self.domain.lo[k] + (i as f64 + 0.5) * self.widths[k];
        }
    }
}

impl Density for HistogramDensity {
    fn dim(&self) -> usize {
        self.domain.dim()
    }

    fn density_at(&self, x: &[f64]) -> f64 {
        match self.bin_index(x) {
            Some(k) => self.values[k],
            None => self.floor_eps,
        }
    }
}

/// Free-function form of [`Density::density_at`].
pub fn density_at(h: &HistogramDensity, x: &[f64]) -> f64 {
    h.density_at(x)
}

/// Reference density at every cell center of `h`, floored at `h.floor_eps()`.
pub fn reference_values<R: Density + ?Sized>(h: &HistogramDensity, reference: &R) -> Vec<f64> {
    let mut c = vec![0.0; h.dim()];
    (0..h.n_bins())
        .map(|k| {
            h.bin_center(k, &mut c);
            reference.density_at(&c).max(h.floor_eps)
        })
        .collect()
}

/// Plug-in `KL(h ‖ ref)` with the reference sampled at cell centers.
pub fn kl_estimate<R: Density + ?Sized>(h: &HistogramDensity, reference: &R) -> f64 {
    kl_from_values(h, &reference_values(h, reference))
}

/// Plug-in `KL(ref ‖ h)`.
pub fn reverse_kl_estimate<R: Density + ?Sized>(h: &HistogramDensity, reference: &R) -> f64 {
    reverse_kl_from_values(h, &reference_values(h, reference))
}

/// `Σ_k (h_k − ref_k)² · cell_volume`.
pub fn l2_error<R: Density + ?Sized>(h: &HistogramDensity, reference: &R) -> f64 {
    l2_from_values(h, &reference_values(h, reference))
}

/// [`kl_estimate`] against precomputed cell-center reference values.
pub fn kl_from_values(h: &HistogramDensity, ref_values: &[f64]) -> f64 {
    let s: f64 = h
        .values
        .iter()
        .zip(ref_values)
        .filter(|(p, _)| **p > h.floor_eps)
        .map(|(p, q)| p * (p / q).ln())
        .sum();
    (s * h.cell_volume).max(0.0)
}

pub fn reverse_kl_from_values(h: &HistogramDensity, ref_values: &[f64]) -> f64 {
    let s: f64 = h
        .values
        .iter()
        .zip(ref_values)
        .filter(|(_, q)| **q > h.floor_eps)
        .map(|(p, q)| q * (q / p).ln())
        .sum();
    (s * h.cell_volume).max(0.0)
}

pub fn l2_from_values(h: &HistogramDensity, ref_values: &[f64]) -> f64 {
    let s: f64 = h
        .values
        .iter()
        .zip(ref_values)
        .map(|(p, q)| (p - q) * (p - q))
        .sum();
    s * h.cell_volume
}

/// Potential whose one-sided differences give the drift correction:
/// `log(h / ref)` for the forward divergence, `−ref / h` for the reverse one.
/// `h` is floored at [`HistogramDensity::count_floor`].
#[inline]
fn potential<R: Density + ?Sized>(
    h: &HistogramDensity,
    reference: &R,
    z: &[f64],
    variant: KlVariant,
) -> f64 {
    let p = h.density_at(z).max(h.count_floor());
    let q = reference.density_at(z).max(h.floor_eps);
    match variant {
        KlVariant::Forward => (p / q).ln(),
        KlVariant::Reverse => -q / p,
    }
}

/// One-sided difference gradient of the variant's potential at `x`. For each
/// axis `i` the step is one bin width in direction `signs[i]` (`true` = +).
/// `scratch` must have length `d`.
pub fn one_sided_gradient<R: Density + ?Sized>(
    h: &HistogramDensity,
    reference: &R,
    x: &[f64],
    variant: KlVariant,
    signs: impl Fn(usize) -> bool,
    scratch: &mut [f64],
    out: &mut [f64],
) {
    let f0 = potential(h, reference, x, variant);
    scratch.copy_from_slice(x);
    for i in 0..x.len() {
        let w = h.widths[i];
        let s = if signs(i) { 1.0 } else { -1.0 };
        scratch[i] = x[i] + s * w;
        let f1 = potential(h, reference, scratch, variant);
        scratch[i] = x[i];
        out[i] = s * (f1 - f0) / w;
    }
}

/// Central difference with one-bin-width steps; the average of the two
/// one-sided stencils.
pub fn central_gradient<R: Density + ?Sized>(
    h: &HistogramDensity,
    reference: &R,
    x: &[f64],
    variant: KlVariant,
) -> Vec<f64> {
    let mut z = x.to_vec();
    (0..x.len())
        .map(|i| {
            let w = h.widths[i];
            z[i] = x[i] + w;
            let fp = potential(h, reference, &z, variant);
            z[i] = x[i] - w;
            let fm = potential(h, reference, &z, variant);
            z[i] = x[i];
            (fp - fm) / (2.0 * w)
        })
        .collect()
}

pub(crate) fn random_gradient_into<R: Density + ?Sized, G: Rng + ?Sized>(
    h: &HistogramDensity,
    reference: &R,
    x: &[f64],
    variant: KlVariant,
    rng: &mut G,
    scratch: &mut [f64],
    out: &mut [f64],
) {
    let mut bits = 0u64;
    let d = x.len();
    for i in 0..d {
        if rng.random::<bool>() {
            bits |= 1 << (i % 64);
        }
    }
    one_sided_gradient(
        h,
        reference,
        x,
        variant,
        |i| bits >> (i % 64) & 1 == 1,
        scratch,
        out,
    );
}

/// `∇ log(h / ref)` by randomly chosen left or right bin-width differences.
pub fn grad_log_ratio_forward<R: Density + ?Sized, G: Rng + ?Sized>(
    h: &HistogramDensity,
    reference: &R,
    x: &[f64],
    rng: &mut G,
) -> Vec<f64> {
    let mut scratch = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    random_gradient_into(
        h,
        reference,
        x,
        KlVariant::Forward,
        rng,
        &mut scratch,
        &mut out,
    );
    out
}

/// `∇(−ref / h)` by randomly chosen left or right bin-width differences. The
/// particle drift is minus this, i.e. up the gradient of `ref / h`.
pub fn grad_log_ratio_reverse<R: Density + ?Sized, G: Rng + ?Sized>(
    h: &HistogramDensity,
    reference: &R,
    x: &[f64],
    rng: &mut G,
) -> Vec<f64> {
    let mut scratch = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    random_gradient_into(
        h,
        reference,
        x,
        KlVariant::Reverse,
        rng,
        &mut scratch,
        &mut out,
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_isotropic_gaussian, AnalyticMarginal};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_square() -> BoxDomain {
        BoxDomain::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap()
    }

    struct Uniform(BoxDomain);

    impl Density for Uniform {
        fn dim(&self) -> usize {
            self.0.dim()
        }
        fn density_at(&self, x: &[f64]) -> f64 {
            if self.0.contains(x) {
                1.0 / self.0.volume()
            } else {
                0.0
            }
        }
    }

    #[test]
    fn uniform_occupancy_gives_unit_density() {
        let pts = PointCloud::new(2, vec![0.25, 0.25, 0.25, 0.75, 0.75, 0.25, 0.75, 0.75]).unwrap();
        let h = fit_histogram(&pts, &unit_square(), 2).unwrap();
        assert!(h.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn single_cell_occupancy_conserves_mass() {
        let pts = PointCloud::new(2, vec![0.1, 0.1, 0.2, 0.3, 0.4, 0.4, 0.3, 0.1]).unwrap();
        let h = fit_histogram(&pts, &unit_square(), 2).unwrap();
        assert_eq!(h.density_at(&[0.25, 0.25]), 4.0);
        assert_eq!(h.density_at(&[0.75, 0.75]), h.floor_eps());
        assert_eq!(h.density_at(&[0.25, 0.75]), h.floor_eps());
    }

    #[test]
    fn uniform_samples_concentrate() {
        // Each of 100 cells holds Binomial(1e5, 0.01): sd of the density is
        // sqrt(0.01·0.99/1e5)/0.01 ≈ 0.0315, so 0.1 is a 3.2σ band per cell;
        // the maximum over 100 cells stays inside it for most seeds.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let coords: Vec<f64> = (0..2 * n).map(|_| rng.random::<f64>()).collect();
        let pts = PointCloud::new(2, coords).unwrap();
        let h = fit_histogram(&pts, &unit_square(), 10).unwrap();
        let dev = h
            .values()
            .iter()
            .map(|v| (v - 1.0).abs())
            .fold(0.0, f64::max);
        assert!(dev <= 0.1, "max deviation {dev}");
    }

    #[test]
    fn lookup_conventions() {
        let pts = PointCloud::new(2, vec![0.1, 0.1, 0.6, 0.6, 0.7, 0.9]).unwrap();
        let h = fit_histogram(&pts, &unit_square(), 2).unwrap();
        let mut c = [0.0; 2];
        h.bin_center(3, &mut c);
        assert_eq!(c, [0.75, 0.75]);
        assert_eq!(h.density_at(&c), h.values()[3]);
        assert_eq!(h.density_at(&[0.6, 0.55]), h.density_at(&[0.99, 0.99]));
        assert_eq!(h.density_at(&[1.5, 0.5]), h.floor_eps());
        assert_eq!(h.density_at(&[0.5, -0.1]), h.floor_eps());
    }

    #[test]
    fn outside_points_are_dropped_but_counted() {
        let pts = PointCloud::new(1, vec![0.1, 0.2, 5.0, -3.0]).unwrap();
        let dom = BoxDomain::new(vec![0.0], vec![1.0]).unwrap();
        let h = fit_histogram(&pts, &dom, 4).unwrap();
        assert_eq!(h.total(), 4);
        assert_eq!(h.binned(), 2);
        assert_eq!(h.binned_fraction(), 0.5);
    }

    #[test]
    fn rejects_empty_and_huge() {
        let empty = PointCloud::new(2, vec![]).unwrap();
        assert!(matches!(
            fit_histogram(&empty, &unit_square(), 4),
            Err(Error::EmptyPoints)
        ));
        let pts = PointCloud::new(4, vec![0.5; 4]).unwrap();
        let dom = BoxDomain::new(vec![0.0; 4], vec![1.0; 4]).unwrap();
        assert!(matches!(
            fit_histogram(&pts, &dom, 100),
            Err(Error::GridTooLarge(_))
        ));
    }

    #[test]
    fn kl_of_histogram_against_itself_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = make_isotropic_gaussian(&[0.0, 0.0], 0.02).unwrap();
        let pts = g.sample_n(5000, &mut rng);
        let dom = g.support_box().clone();
        let h = fit_histogram(&pts, &dom, 20).unwrap();
        assert_eq!(kl_estimate(&h, &h), 0.0);
        assert_eq!(l2_error(&h, &h), 0.0);
    }

    #[test]
    fn l2_error_of_disjoint_uniforms_is_two() {
        let dom = BoxDomain::new(vec![0.0, 0.0], vec![2.0, 1.0]).unwrap();
        let pts = PointCloud::new(2, vec![0.5, 0.25, 0.5, 0.75]).unwrap();
        let h = fit_histogram(&pts, &dom, 2).unwrap();
        let right = Uniform(BoxDomain::new(vec![1.0, 0.0], vec![2.0, 1.0]).unwrap());
        assert!((l2_error(&h, &right) - 2.0).abs() < 1e-8);
    }

    #[test]
    fn flat_potential_has_zero_gradient() {
        let pts = PointCloud::new(2, vec![0.25, 0.25, 0.25, 0.75, 0.75, 0.25, 0.75, 0.75]).unwrap();
        let h = fit_histogram(&pts, &unit_square(), 2).unwrap();
        let u = Uniform(BoxDomain::new(vec![-1.0, -1.0], vec![2.0, 2.0]).unwrap());
        // the uniform reference has density 1/9 everywhere the stencil reaches
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let flat_h = {
            // a histogram uniform on a box larger than the stencil
            let dom = BoxDomain::new(vec![-1.0, -1.0], vec![2.0, 2.0]).unwrap();
            let mut c = Vec::new();
            for i in 0..3 {
                for j in 0..3 {
                    c.extend_from_slice(&[-0.5 + i as f64, -0.5 + j as f64]);
                }
            }
            fit_histogram(&PointCloud::new(2, c).unwrap(), &dom, 3).unwrap()
        };
        let g = grad_log_ratio_forward(&flat_h, &u, &[0.5, 0.5], &mut rng);
        assert_eq!(g, vec![0.0, 0.0]);
        let g = grad_log_ratio_reverse(&flat_h, &u, &[0.5, 0.5], &mut rng);
        assert_eq!(g, vec![0.0, 0.0]);
        let _ = h;
    }

    /// Uniform-grid "histogram" that stands in for a smooth density so the
    /// stencil can be compared against analytic gradients.
    fn smooth_histogram(m: &AnalyticMarginal, dom: &BoxDomain, bins: usize) -> HistogramDensity {
        let mut h = HistogramDensity::empty(dom, bins).unwrap();
        let mut c = vec![0.0; dom.dim()];
        h.values = (0..h.n_bins())
            .map(|k| {
                h.bin_center(k, &mut c);
                m.density_at(&c).max(h.floor_eps)
            })
            .collect();
        // a huge sample size puts the count floor far below every value
        h.total = usize::MAX / 2;
        h
    }

    #[test]
    fn one_sided_stencils_agree_with_analytic_gradient_to_first_order() {
        let p = make_isotropic_gaussian(&[0.1, 0.0], 0.5).unwrap();
        let q = make_isotropic_gaussian(&[-0.2, 0.1], 0.8).unwrap();
        let (p, q) = (p.as_analytic().unwrap(), q.as_analytic().unwrap());
        let dom = BoxDomain::new(vec![-3.0, -3.0], vec![3.0, 3.0]).unwrap();
        let x = [0.3, -0.2];
        for bins in [60usize, 120, 240] {
            let h = smooth_histogram(p, &dom, bins);
            let w = h.widths()[0];
            // bin centers sit on the grid; probe a center so the stencil
            // lands on centers too
            let k = h.bin_index(&x).unwrap();
            let mut c = [0.0; 2];
            h.bin_center(k, &mut c);
            let gp = p.grad_log_density(&c);
            let gq = q.grad_log_density(&c);
            let exact_fwd: Vec<f64> = (0..2).map(|i| gp[i] - gq[i]).collect();
            // ∇(−q/p) = (q/p)(∇log p − ∇log q)
            let ratio = q.density_at(&c) / p.density_at(&c);
            let exact_rev: Vec<f64> = (0..2).map(|i| ratio * exact_fwd[i]).collect();
            let mut s = [0.0; 2];
            let mut g = [0.0; 2];
            for sign in [true, false] {
                one_sided_gradient(&h, q, &c, KlVariant::Forward, |_| sign, &mut s, &mut g);
                for i in 0..2 {
                    assert!((g[i] - exact_fwd[i]).abs() < 2.0 * w, "bins {bins}");
                }
                one_sided_gradient(&h, q, &c, KlVariant::Reverse, |_| sign, &mut s, &mut g);
                for i in 0..2 {
                    assert!((g[i] - exact_rev[i]).abs() < 2.0 * w, "bins {bins}");
                }
            }
        }
    }

    #[test]
    fn self_ratio_gradient_is_small_for_matching_samples() {
        // Probes sit at cell centers. Off-center, the histogram factor is
        // constant across the cell while the reference is not, which adds a
        // bias of |∂² log q|·|x − center| (about 0.7 on average here).
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let g = make_isotropic_gaussian(&[0.0, 0.0], 0.02).unwrap();
        let a = g.as_analytic().unwrap();
        let pts = g.sample_n(10_000_000, &mut rng);
        let dom = BoxDomain::bounding(&pts).unwrap().padded(0.1);
        let h = fit_histogram(&pts, &dom, 50).unwrap();
        let mut fwd = 0.0;
        let mut rev = 0.0;
        let probes = 100;
        let mut c = [0.0; 2];
        for _ in 0..probes {
            let x = a.sample(&mut rng);
            h.bin_center(h.bin_index(&x).unwrap(), &mut c);
            let gf = grad_log_ratio_forward(&h, a, &c, &mut rng);
            let gr = grad_log_ratio_reverse(&h, a, &c, &mut rng);
            fwd += gf.iter().map(|v| v * v).sum::<f64>().sqrt();
            rev += gr.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        assert!(
            fwd / probes as f64 <= 0.5,
            "forward {}",
            fwd / probes as f64
        );
        assert!(
            rev / probes as f64 <= 0.5,
            "reverse {}",
            rev / probes as f64
        );
    }

    #[test]
    fn reverse_gradient_stays_finite_where_reference_vanishes() {
        let pts = PointCloud::new(2, vec![0.25, 0.25, 0.75, 0.75]).unwrap();
        let h = fit_histogram(&pts, &unit_square(), 2).unwrap();
        let far = make_isotropic_gaussian(&[50.0, 50.0], 0.01).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let g = grad_log_ratio_reverse(&h, far.as_analytic().unwrap(), &[0.25, 0.25], &mut rng);
        assert!(g.iter().all(|v| v.is_finite()));
        // ref is floored to floor_eps, so −ref/h is bounded by floor_eps/floor_eps
        assert!(g.iter().all(|v| v.abs() <= 1.0 / h.widths()[0]));
    }

    #[test]
    fn gaussian_kl_plug_in_is_small_for_exact_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let g = make_isotropic_gaussian(&[0.0, 0.0], 0.02).unwrap();
        let pts = g.sample_n(100_000, &mut rng);
        let dom = BoxDomain::bounding(&pts).unwrap().padded(0.1);
        let h = fit_histogram(&pts, &dom, 50).unwrap();
        let kl = kl_estimate(&h, g.as_analytic().unwrap());
        assert!(kl <= 0.15, "kl {kl}");
    }

    #[test]
    fn analytic_vs_analytic_kl_matches_mean_shift_formula() {
        let p = make_isotropic_gaussian(&[0.0, 0.0], 1.0).unwrap();
        let q = make_isotropic_gaussian(&[0.6, -0.3], 1.0).unwrap();
        let dom = BoxDomain::new(vec![-7.0, -7.0], vec![7.0, 7.0]).unwrap();
        let h = smooth_histogram(p.as_analytic().unwrap(), &dom, 200);
        let kl = kl_estimate(&h, q.as_analytic().unwrap());
        let exact = 0.5 * (0.36 + 0.09);
        assert!(((kl - exact) / exact).abs() < 0.05, "kl {kl}");
    }

    proptest! {
        #[test]
        fn mass_is_conserved_and_refinement_consistent(
            coords in proptest::collection::vec(-0.5f64..1.5, 2..200),
            bins in 2usize..12,
        ) {
            let n = coords.len() / 2 * 2;
            let pts = PointCloud::new(2, coords[..n].to_vec()).unwrap();
            let dom = unit_square();
            let h = fit_histogram(&pts, &dom, bins).unwrap();
            let inside = pts.iter().filter(|p| dom.contains(p)).count();
            let sum: u32 = h.counts().iter().sum();
            prop_assert_eq!(sum as usize, inside);
            prop_assert_eq!(h.binned(), inside);
            let h2 = fit_histogram(&pts, &dom, 2 * bins).unwrap();
            prop_assert_eq!(h.binned_fraction(), h2.binned_fraction());
            prop_assert!(h.values().iter().all(|&v| v >= h.floor_eps()));
        }

        #[test]
        fn kl_is_nonnegative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = make_isotropic_gaussian(&[0.0, 0.0], 0.05).unwrap();
            let other = make_isotropic_gaussian(&[0.3, 0.1], 0.02).unwrap();
            let pts = g.sample_n(300, &mut rng);
            let dom = BoxDomain::bounding(&pts).unwrap().padded(0.1);
            let h = fit_histogram(&pts, &dom, 8).unwrap();
            prop_assert!(kl_estimate(&h, other.as_analytic().unwrap()) >= 0.0);
            prop_assert!(reverse_kl_estimate(&h, other.as_analytic().unwrap()) >= 0.0);
        }

        #[test]
        fn one_sided_stencils_average_to_central_difference(
            seed in 0u64..500,
            px in 0.05f64..0.95,
            py in 0.05f64..0.95,
            reverse in proptest::bool::ANY,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = make_isotropic_gaussian(&[0.5, 0.5], 0.05).unwrap();
            let pts = g.sample_n(400, &mut rng);
            let h = fit_histogram(&pts, &unit_square(), 10).unwrap();
            let variant = if reverse { KlVariant::Reverse } else { KlVariant::Forward };
            let r = g.as_analytic().unwrap();
            let x = [px, py];
            let mut s = [0.0; 2];
            let mut plus = [0.0; 2];
            let mut minus = [0.0; 2];
            one_sided_gradient(&h, r, &x, variant, |_| true, &mut s, &mut plus);
            one_sided_gradient(&h, r, &x, variant, |_| false, &mut s, &mut minus);
            let central = central_gradient(&h, r, &x, variant);
            for i in 0..2 {
                let avg = 0.5 * (plus[i] + minus[i]);
                let tol = 1e-12 * (plus[i].abs() + minus[i].abs()).max(1.0);
                prop_assert!((avg - central[i]).abs() <= tol);
            }
        }
    }
}
