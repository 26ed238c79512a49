//! Semi-analytic best-response quantities of the penalized transport energy.
//!
//! For a penalty weight `Λ > 0` the Gibbs kernel `k(x, y) = exp(−c(x, y)/Λ)`
//! defines
//!
//! * `Z(Λ) = ∬ k dμ dν`, `Z₁(x) = ∫ k(x, ·) dν`, `Z₂(y) = ∫ k(·, y) dμ`,
//! * the tilted measure `σ = k μ ν / Z`,
//! * best-response marginals `b₁ = μ Z₁ / Z` and `b₂ = ν Z₂ / Z`,
//! * `V(Λ) = KL(b₁ ‖ μ) + KL(b₂ ‖ ν) = −2 log Z + E_σ[log Z₁ Z₂]`,
//! * `dV/dΛ = Cov_σ(c, log Z₁ Z₂) / Λ²` and `E_d(Λ) = −Λ log Z`.
//!
//! Integrals use tensor Gauss-Legendre rules on the marginals' support boxes.
//! The discrete marginal weights are renormalized to probability vectors so
//! `Z ≤ 1` and `V ≥ 0` hold exactly at the discrete level. When the cost is a
//! sum of per-axis terms the kernel is applied as a Kronecker product, one
//! axis at a time; otherwise every node pair is visited.

use std::sync::Arc;

use nalgebra::{DMatrix, DMatrixView};

use crate::error::{Error, Result};
use crate::model::{AnalyticMarginal, BoxDomain, Cost, Density, Marginal};
use crate::quadrature::TensorGrid;

/// Default Gauss-Legendre nodes per axis.
pub const DEFAULT_NODES_PER_DIM: usize = 120;

/// Largest marginal dimension handled by the quadrature.
pub const MAX_MARGINAL_DIM: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelMode {
    /// Per-axis factorization of `exp(−c/Λ)`.
    Separable,
    /// All node pairs.
    Dense,
}

/// Quadrature-backed evaluator of the best-response quantities for a fixed
/// `(μ, ν, c)`.
#[derive(Clone, Debug)]
pub struct ResponseEvaluator {
    mu: AnalyticMarginal,
    nu: AnalyticMarginal,
    cost: Arc<dyn Cost>,
    nodes_per_dim: usize,
    grid_x: TensorGrid,
    grid_y: TensorGrid,
    x_nodes: Vec<f64>,
    y_nodes: Vec<f64>,
    mu_w: Vec<f64>,
    nu_w: Vec<f64>,
    mode: KernelMode,
    /// Per-axis tables `φ(x_i, y_j)` (separable mode).
    axis_cost: Vec<DMatrix<f64>>,
    /// Full cost matrix, kept when small enough (dense mode).
    cost_matrix: Option<Vec<f64>>,
}

/// Everything the Gibbs kernel produces at one `Λ`.
#[derive(Clone, Debug)]
pub struct GibbsMoments {
    pub lambda: f64,
    pub z: f64,
    /// `Z₁` at the x nodes.
    pub z1: Vec<f64>,
    /// `Z₂` at the y nodes.
    pub z2: Vec<f64>,
    /// `∫ c k(x_i, ·) dν` at the x nodes.
    pub ck_nu: Vec<f64>,
    /// `∫ c k(·, y_j) dμ` at the y nodes.
    pub ck_mu: Vec<f64>,
    mu_w: Vec<f64>,
    nu_w: Vec<f64>,
}

fn xlogx(v: f64) -> f64 {
    if v > 0.0 {
        v * v.ln()
    } else {
        0.0
    }
}

fn log_or_zero(v: f64) -> f64 {
    if v > 0.0 {
        v.ln()
    } else {
        0.0
    }
}

impl GibbsMoments {
    /// `E_σ[log Z₁ Z₂]`.
    pub fn mean_log_z1z2(&self) -> f64 {
        let a: f64 = self
            .mu_w
            .iter()
            .zip(&self.z1)
            .map(|(w, z)| w * xlogx(*z))
            .sum();
        let b: f64 = self
            .nu_w
            .iter()
            .zip(&self.z2)
            .map(|(w, z)| w * xlogx(*z))
            .sum();
        (a + b) / self.z
    }

    /// `E_σ[c]`.
    pub fn mean_cost(&self) -> f64 {
        let s: f64 = self.mu_w.iter().zip(&self.ck_nu).map(|(w, v)| w * v).sum();
        s / self.z
    }

    /// `E_σ[c · log Z₁ Z₂]`.
    pub fn mean_cost_log_z1z2(&self) -> f64 {
        let a: f64 = self
            .mu_w
            .iter()
            .zip(&self.z1)
            .zip(&self.ck_nu)
            .map(|((w, z), v)| w * log_or_zero(*z) * v)
            .sum();
        let b: f64 = self
            .nu_w
            .iter()
            .zip(&self.z2)
            .zip(&self.ck_mu)
            .map(|((w, z), v)| w * log_or_zero(*z) * v)
            .sum();
        (a + b) / self.z
    }

    /// `V` before clamping; may dip below zero by rounding.
    pub fn v_raw(&self) -> f64 {
        -2.0 * self.z.ln() + self.mean_log_z1z2()
    }

    pub fn v(&self) -> f64 {
        self.v_raw().max(0.0)
    }

    pub fn dv_dlambda(&self) -> f64 {
        let cov = self.mean_cost_log_z1z2() - self.mean_cost() * self.mean_log_z1z2();
        cov / (self.lambda * self.lambda)
    }

    pub fn e_d(&self) -> f64 {
        -self.lambda * self.z.ln()
    }

    /// `d(−Λ log Z)/dΛ = −log Z − E_σ[c]/Λ`, evaluated without differencing.
    pub fn e_d_derivative(&self) -> f64 {
        -self.z.ln() - self.mean_cost() / self.lambda
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveLambda(lambda))
    }
}

fn analytic<'a>(m: &'a Marginal, name: &'static str) -> Result<&'a AnalyticMarginal> {
    m.as_analytic().ok_or_else(|| Error::InvalidParameter {
        name,
        reason: "best-response quadrature needs an analytic marginal".into(),
    })
}

fn probability_weights(m: &AnalyticMarginal, grid: &TensorGrid) -> (Vec<f64>, Vec<f64>) {
    let (nodes, w) = grid.nodes_and_weights();
    let d = grid.dim();
    let mut pw: Vec<f64> = nodes
        .chunks_exact(d)
        .zip(&w)
        .map(|(x, wi)| wi * m.density_at(x))
        .collect();
    let s: f64 = pw.iter().sum();
    pw.iter_mut().for_each(|v| *v /= s);
    (nodes, pw)
}

/// Applies `mat` (`rows × n_in`, row-major in a `DMatrix`) along `axis` of a
/// row-major tensor of the given shape.
fn mode_product(
    input: &[f64],
    shape: &[usize],
    axis: usize,
    mat: &DMatrix<f64>,
) -> (Vec<f64>, Vec<usize>) {
    let n_in = shape[axis];
    let rows = mat.nrows();
    debug_assert_eq!(mat.ncols(), n_in);
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape[axis] = rows;
    let mut out = vec![0.0; outer * rows * inner];
    if inner == 1 {
        // rows of the input are the contiguous axis: out = In · Mᵀ
        let view = DMatrixView::from_slice(input, n_in, outer);
        let res = mat * view;
        out.copy_from_slice(res.as_slice());
    } else {
        let mt = mat.transpose();
        for o in 0..outer {
            let block = &input[o * n_in * inner..(o + 1) * n_in * inner];
            let view = DMatrixView::from_slice(block, inner, n_in);
            let res = view * &mt;
            out[o * rows * inner..(o + 1) * rows * inner].copy_from_slice(res.as_slice());
        }
    }
    (out, out_shape)
}

fn kronecker_apply(mats: &[&DMatrix<f64>], input: &[f64], in_shape: &[usize]) -> Vec<f64> {
    let mut data = input.to_vec();
    let mut shape = in_shape.to_vec();
    for (axis, m) in mats.iter().enumerate() {
        let (d, s) = mode_product(&data, &shape, axis, m);
        data = d;
        shape = s;
    }
    data
}

impl ResponseEvaluator {
    /// Evaluator on the marginals' own support boxes.
    pub fn new(
        mu: &Marginal,
        nu: &Marginal,
        cost: Arc<dyn Cost>,
        nodes_per_dim: usize,
    ) -> Result<Self> {
        let bx = mu.support_box().clone();
        let by = nu.support_box().clone();
        Self::with_boxes(mu, nu, cost, nodes_per_dim, bx, by)
    }

    pub fn with_boxes(
        mu: &Marginal,
        nu: &Marginal,
        cost: Arc<dyn Cost>,
        nodes_per_dim: usize,
        box_mu: BoxDomain,
        box_nu: BoxDomain,
    ) -> Result<Self> {
        let mu = analytic(mu, "mu")?.clone();
        let nu = analytic(nu, "nu")?.clone();
        for (m, b) in [(&mu, &box_mu), (&nu, &box_nu)] {
            if m.dim() > MAX_MARGINAL_DIM {
                return Err(Error::InvalidParameter {
                    name: "marginal",
                    reason: format!(
                        "quadrature supports dimension ≤ {MAX_MARGINAL_DIM}, got {}",
                        m.dim()
                    ),
                });
            }
            if b.dim() != m.dim() {
                return Err(Error::DimensionMismatch {
                    expected: m.dim(),
                    got: b.dim(),
                });
            }
        }
        if nodes_per_dim < 2 {
            return Err(Error::InvalidParameter {
                name: "nodes_per_dim",
                reason: "need at least 2 nodes per axis".into(),
            });
        }
        let grid_x = TensorGrid::new(&box_mu, nodes_per_dim);
        let grid_y = TensorGrid::new(&box_nu, nodes_per_dim);
        let (x_nodes, mu_w) = probability_weights(&mu, &grid_x);
        let (y_nodes, nu_w) = probability_weights(&nu, &grid_y);
        let mut ev = Self {
            mu,
            nu,
            cost,
            nodes_per_dim,
            grid_x,
            grid_y,
            x_nodes,
            y_nodes,
            mu_w,
            nu_w,
            mode: KernelMode::Dense,
            axis_cost: Vec::new(),
            cost_matrix: None,
        };
        if ev.cost.axis_term().is_some() && ev.mu.dim() == ev.nu.dim() {
            ev.set_mode(KernelMode::Separable);
        } else {
            ev.set_mode(KernelMode::Dense);
        }
        Ok(ev)
    }

    /// Switches the kernel strategy. Separable mode needs a per-axis cost
    /// and equal dimensions; otherwise the request falls back to dense.
    pub fn set_mode(&mut self, mode: KernelMode) {
        let term = self.cost.axis_term();
        match (mode, term) {
            (KernelMode::Separable, Some(phi)) if self.mu.dim() == self.nu.dim() => {
                self.axis_cost = (0..self.mu.dim())
                    .map(|k| {
                        let xs = &self.grid_x.axis_nodes[k];
                        let ys = &self.grid_y.axis_nodes[k];
                        DMatrix::from_fn(xs.len(), ys.len(), |i, j| phi(xs[i], ys[j]))
                    })
                    .collect();
                self.cost_matrix = None;
                self.mode = KernelMode::Separable;
            }
            _ => {
                let (nx, ny) = (self.mu_w.len(), self.nu_w.len());
                self.cost_matrix = (nx * ny <= 4_000_000).then(|| {
                    let (dx, dy) = (self.mu.dim(), self.nu.dim());
                    let mut c = Vec::with_capacity(nx * ny);
                    for x in self.x_nodes.chunks_exact(dx) {
                        for y in self.y_nodes.chunks_exact(dy) {
                            c.push(self.cost.evaluate(x, y));
                        }
                    }
                    c
                });
                self.axis_cost.clear();
                self.mode = KernelMode::Dense;
            }
        }
    }

    pub fn mode(&self) -> KernelMode {
        self.mode
    }

    pub fn nodes_per_dim(&self) -> usize {
        self.nodes_per_dim
    }

    pub fn mu(&self) -> &AnalyticMarginal {
        &self.mu
    }

    pub fn nu(&self) -> &AnalyticMarginal {
        &self.nu
    }

    pub fn cost(&self) -> &dyn Cost {
        self.cost.as_ref()
    }

    /// Probability weights of the discretized `μ` and `ν`.
    pub fn marginal_weights(&self) -> (&[f64], &[f64]) {
        (&self.mu_w, &self.nu_w)
    }

    pub fn moments(&self, lambda: f64) -> Result<GibbsMoments> {
        check_lambda(lambda)?;
        let (z1, z2, ck_nu, ck_mu) = match self.mode {
            KernelMode::Separable => self.separable_moments(lambda),
            KernelMode::Dense => self.dense_moments(lambda),
        };
        let z: f64 = self.mu_w.iter().zip(&z1).map(|(w, v)| w * v).sum();
        Ok(GibbsMoments {
            lambda,
            z,
            z1,
            z2,
            ck_nu,
            ck_mu,
            mu_w: self.mu_w.clone(),
            nu_w: self.nu_w.clone(),
        })
    }

    fn separable_moments(&self, lambda: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let kernels: Vec<DMatrix<f64>> = self
            .axis_cost
            .iter()
            .map(|c| c.map(|v| (-v / lambda).exp()))
            .collect();
        let weighted: Vec<DMatrix<f64>> = self
            .axis_cost
            .iter()
            .zip(&kernels)
            .map(|(c, k)| c.component_mul(k))
            .collect();
        let kernels_t: Vec<DMatrix<f64>> = kernels.iter().map(|k| k.transpose()).collect();
        let weighted_t: Vec<DMatrix<f64>> = weighted.iter().map(|k| k.transpose()).collect();
        let shape_x = self.grid_x.shape();
        let shape_y = self.grid_y.shape();
        let d = kernels.len();

        let z1 = kronecker_apply(&kernels.iter().collect::<Vec<_>>(), &self.nu_w, &shape_y);
        let z2 = kronecker_apply(&kernels_t.iter().collect::<Vec<_>>(), &self.mu_w, &shape_x);
        let mut ck_nu = vec![0.0; z1.len()];
        let mut ck_mu = vec![0.0; z2.len()];
        for k in 0..d {
            let mats: Vec<&DMatrix<f64>> = (0..d)
                .map(|l| if l == k { &weighted[l] } else { &kernels[l] })
                .collect();
            let part = kronecker_apply(&mats, &self.nu_w, &shape_y);
            ck_nu.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
            let mats: Vec<&DMatrix<f64>> = (0..d)
                .map(|l| {
                    if l == k {
                        &weighted_t[l]
                    } else {
                        &kernels_t[l]
                    }
                })
                .collect();
            let part = kronecker_apply(&mats, &self.mu_w, &shape_x);
            ck_mu.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
        }
        (z1, z2, ck_nu, ck_mu)
    }

    fn dense_moments(&self, lambda: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let (nx, ny) = (self.mu_w.len(), self.nu_w.len());
        let (dx, dy) = (self.mu.dim(), self.nu.dim());
        let mut z1 = vec![0.0; nx];
        let mut z2 = vec![0.0; ny];
        let mut ck_nu = vec![0.0; nx];
        let mut ck_mu = vec![0.0; ny];
        for i in 0..nx {
            let x = &self.x_nodes[i * dx..(i + 1) * dx];
            let (mut a, mut b) = (0.0, 0.0);
            for j in 0..ny {
                let c = match &self.cost_matrix {
                    Some(m) => m[i * ny + j],
                    None => self.cost.evaluate(x, &self.y_nodes[j * dy..(j + 1) * dy]),
                };
                let k = (-c / lambda).exp();
                a += k * self.nu_w[j];
                b += c * k * self.nu_w[j];
                z2[j] += k * self.mu_w[i];
                ck_mu[j] += c * k * self.mu_w[i];
            }
            z1[i] = a;
            ck_nu[i] = b;
        }
        (z1, z2, ck_nu, ck_mu)
    }

    pub fn partition_z(&self, lambda: f64) -> Result<f64> {
        Ok(self.moments(lambda)?.z)
    }

    /// `Z₁(x)` at an arbitrary point.
    pub fn z1_at(&self, lambda: f64, x: &[f64]) -> Result<f64> {
        check_lambda(lambda)?;
        let dy = self.nu.dim();
        Ok(self
            .y_nodes
            .chunks_exact(dy)
            .zip(&self.nu_w)
            .map(|(y, w)| w * (-self.cost.evaluate(x, y) / lambda).exp())
            .sum())
    }

    /// `Z₂(y)` at an arbitrary point.
    pub fn z2_at(&self, lambda: f64, y: &[f64]) -> Result<f64> {
        check_lambda(lambda)?;
        let dx = self.mu.dim();
        Ok(self
            .x_nodes
            .chunks_exact(dx)
            .zip(&self.mu_w)
            .map(|(x, w)| w * (-self.cost.evaluate(x, y) / lambda).exp())
            .sum())
    }

    /// `b₁[Λ](x) = μ(x) Z₁(x) / Z`.
    pub fn best_response_marginal_1(&self, lambda: f64, x: &[f64]) -> Result<f64> {
        let z = self.partition_z(lambda)?;
        Ok(self.mu.density_at(x) * self.z1_at(lambda, x)? / z)
    }

    /// `b₂[Λ](y) = ν(y) Z₂(y) / Z`.
    pub fn best_response_marginal_2(&self, lambda: f64, y: &[f64]) -> Result<f64> {
        let z = self.partition_z(lambda)?;
        Ok(self.nu.density_at(y) * self.z2_at(lambda, y)? / z)
    }

    /// `σ[Λ](x, y) = exp(−c/Λ) μ(x) ν(y) / Z`.
    pub fn tilted_density(&self, lambda: f64, x: &[f64], y: &[f64]) -> Result<f64> {
        let z = self.partition_z(lambda)?;
        Ok((-self.cost.evaluate(x, y) / lambda).exp()
            * self.mu.density_at(x)
            * self.nu.density_at(y)
            / z)
    }

    pub fn v_of_lambda(&self, lambda: f64) -> Result<f64> {
        Ok(self.moments(lambda)?.v())
    }

    pub fn dv_dlambda(&self, lambda: f64) -> Result<f64> {
        Ok(self.moments(lambda)?.dv_dlambda())
    }

    pub fn e_d(&self, lambda: f64) -> Result<f64> {
        Ok(self.moments(lambda)?.e_d())
    }

    /// Whether `exp(−c*/Λ) ≤ Z(Λ)` holds for the given optimal cost.
    pub fn z_lower_bound_holds(&self, lambda: f64, c_star: f64) -> Result<bool> {
        Ok((-c_star / lambda).exp() <= self.partition_z(lambda)?)
    }
}

/// One output point of the `Λ̇ = V(Λ)` integration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OdePoint {
    pub t: f64,
    pub lambda: f64,
    pub v: f64,
}

/// Integrates `Λ̇ = V(Λ)` from `Λ(0) = lambda0` to `t_end` with classical
/// fixed-step RK4. The last step is shortened to land on `t_end`.
pub fn solve_lambda_ode(
    ev: &ResponseEvaluator,
    lambda0: f64,
    t_end: f64,
    dt_ode: f64,
) -> Result<Vec<OdePoint>> {
    check_lambda(lambda0)?;
    if !(dt_ode > 0.0 && dt_ode.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "dt_ode",
            reason: format!("must be positive, got {dt_ode}"),
        });
    }
    if !(t_end >= 0.0 && t_end.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "t_end",
            reason: format!("must be non-negative, got {t_end}"),
        });
    }
    let n = (t_end / dt_ode - 1e-9).ceil().max(0.0) as usize;
    let mut lambda = lambda0;
    let mut v = ev.v_of_lambda(lambda)?;
    let mut out = Vec::with_capacity(n + 1);
    out.push(OdePoint { t: 0.0, lambda, v });
    for i in 0..n {
        let t0 = i as f64 * dt_ode;
        let h = dt_ode.min(t_end - t0);
        let k1 = v;
        let k2 = ev.v_of_lambda(lambda + 0.5 * h * k1)?;
        let k3 = ev.v_of_lambda(lambda + 0.5 * h * k2)?;
        let k4 = ev.v_of_lambda(lambda + h * k3)?;
        lambda += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        v = ev.v_of_lambda(lambda)?;
        let t = if i + 1 == n { t_end } else { t0 + h };
        out.push(OdePoint { t, lambda, v });
    }
    Ok(out)
}

/// `√(2(c* t + Λ(0)²/2))`, the growth envelope for `Λ` obtained from
/// `Λ̇ ≤ c*/Λ`.
pub fn lambda_growth_bound(c_star: f64, lambda0: f64, t: f64) -> f64 {
    (2.0 * (c_star * t + 0.5 * lambda0 * lambda0)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_isotropic_gaussian, make_mixture, QuadraticCost, ZeroCost};
    use crate::quadrature::TensorGrid;

    /// `Z` for 1-D Gaussians `N(m1, s1²)`, `N(m2, s2²)` and quadratic cost:
    /// `(1 + 2τ²/Λ)^{-1/2} exp(−Δ²/(Λ + 2τ²))`, `τ² = s1² + s2²`.
    fn closed_form_z(m1: f64, v1: f64, m2: f64, v2: f64, lambda: f64) -> f64 {
        let tau2 = v1 + v2;
        let delta = m1 - m2;
        (1.0 + 2.0 * tau2 / lambda).powf(-0.5) * (-delta * delta / (lambda + 2.0 * tau2)).exp()
    }

    /// `Z₁(x)` for a 1-D Gaussian `ν = N(m2, s2²)`.
    fn closed_form_z1(x: f64, m2: f64, v2: f64, lambda: f64) -> f64 {
        (1.0 + 2.0 * v2 / lambda).powf(-0.5) * (-(x - m2) * (x - m2) / (lambda + 2.0 * v2)).exp()
    }

    fn pair_1d() -> (Marginal, Marginal) {
        (
            make_isotropic_gaussian(&[0.4], 0.02).unwrap(),
            make_isotropic_gaussian(&[0.6], 0.02).unwrap(),
        )
    }

    fn pair_2d() -> (Marginal, Marginal) {
        (
            make_isotropic_gaussian(&[0.4, 0.4], 0.02).unwrap(),
            make_isotropic_gaussian(&[0.6, 0.6], 0.02).unwrap(),
        )
    }

    #[test]
    fn zero_cost_is_trivial() {
        let (mu, nu) = pair_2d();
        let ev = ResponseEvaluator::new(&mu, &nu, Arc::new(ZeroCost), 30).unwrap();
        for lambda in [0.01, 0.1, 1.0] {
            let m = ev.moments(lambda).unwrap();
            assert!((m.z - 1.0).abs() < 1e-12);
            assert!(m.v() < 1e-12);
            assert_eq!(m.dv_dlambda(), 0.0);
            assert!(m.e_d().abs() < 1e-12);
            assert!((ev.z1_at(lambda, &[0.3, 0.5]).unwrap() - 1.0).abs() < 1e-12);
            let x = [0.35, 0.45];
            let b1 = ev.best_response_marginal_1(lambda, &x).unwrap();
            assert!((b1 - ev.mu().density_at(&x)).abs() < 1e-10 * b1);
        }
    }

    #[test]
    fn partition_function_matches_closed_form_in_1d() {
        let (mu, nu) = pair_1d();
        let ev = ResponseEvaluator::new(&mu, &nu, Arc::new(QuadraticCost), DEFAULT_NODES_PER_DIM)
            .unwrap();
        for lambda in [0.01, 0.1, 1.0, 10.0] {
            let z = ev.partition_z(lambda).unwrap();
            let exact = closed_form_z(0.4, 0.02, 0.6, 0.02, lambda);
            assert!(
                ((z - exact) / exact).abs() < 1e-6,
                "Λ={lambda}: {z} vs {exact}"
            );
        }
    }

    #[test]
    fn z1_matches_closed_form_and_fubini() {
        let (mu, nu) = pair_1d();
        let ev = ResponseEvaluator::new(&mu, &nu, Arc::new(QuadraticCost), DEFAULT_NODES_PER_DIM)
            .unwrap();
        for lambda in [0.05, 0.5] {
            for x in [0.1, 0.4, 0.77] {
                let z1 = ev.z1_at(lambda, &[x]).unwrap();
                let exact = closed_form_z1(x, 0.6, 0.02, lambda);
                assert!(((z1 - exact) / exact).abs() < 1e-8);
            }
            // ∫ Z₁ dμ on an independent rule
            let grid = TensorGrid::new(mu.support_box(), 150);
            let a = mu.as_analytic().unwrap();
            let fubini = grid.integrate(|x| a.density_at(x) * ev.z1_at(lambda, x).unwrap());
            let z = ev.partition_z(lambda).unwrap();
            assert!(((fubini - z) / z).abs() < 1e-5);
        }
    }

    #[test]
    fn large_lambda_limits() {
        let (mu, nu) = pair_2d();
        let ev = ResponseEvaluator::new(&mu, &nu, Arc::new(QuadraticCost), 60).unwrap();
        let m = ev.moments(1e6).unwrap();
        assert!((m.z - 1.0).abs() < 1e-4);
        assert!(m.v() <= 1e-4);
        assert!(m.dv_dlambda().abs() <= 1e-6);
    }

    #[test]
    fn best_response_marginals_are_normalized() {
        let (mu, nu) = pair_2d();
        let ev = ResponseEvaluator::new(&mu, &nu, Arc::new(QuadraticCost), 40).unwrap();
        for lambda in [0.01, 0.1, 1.0] {
            let gx = TensorGrid::new(mu.support_box(), 50);
            let gy = TensorGrid::new(nu.support_box(), 50);
            let z = ev.partition_z(lambda).unwrap();
            let a = ev.mu().clone();
            let b = ev.nu().clone();
            let m1 = gx.integrate(|x| a.density_at(x) * ev.z1_at(lambda, x).unwrap() / z);
            let m2 = gy.integrate(|y| b.density_at(y) * ev.z2_at(lambda, y).unwrap() / z);
            assert!((m1 - 1.0).abs() < 1e-4, "Λ={lambda}: {m1}");
            assert!((m2 - 1.0).abs() < 1e-4, "Λ={lambda}: {m2}");
        }
    }

    #[test]
    fn product_of_best_response_marginals_is_not_the_tilted_measure() {
        // b₁(x) b₂(y) = σ(x, y) would need Z₁(x) Z₂(y) = Z e^{-c/Λ}; at
        // generic probes it does not hold.
        let (mu, nu) = pair_1d();
        let ev = ResponseEvaluator::new(&mu, &nu, Arc::new(QuadraticCost), 80).unwrap();
        let lambda = 0.1;
        let mut mismatches = 0;
        for (x, y) in [(0.3, 0.7), (0.45, 0.5), (0.2, 0.9), (0.5, 0.55)] {
            let prod = ev.best_response_marginal_1(lambda, &[x]).unwrap()
                * ev.best_response_marginal_2(lambda, &[y]).unwrap();
            let sigma = ev.tilted_density(lambda, &[x], &[y]).unwrap();
            if ((prod - sigma) / sigma).abs() > 1e-3 {
                mismatches += 1;
            }
        }
        assert_eq!(mismatches, 4);
    }

    #[test]
    fn separable_and_dense_kernels_agree() {
        let (mu, nu) = pair_2d();
        let mut ev = ResponseEvaluator::new(&mu, &nu, Arc::new(QuadraticCost), 16).unwrap();
        assert_eq!(ev.mode(), KernelMode::Separable);
        let sep: Vec<_> = [0.03, 0.3, 3.0]
            .iter()
            .map(|&l| ev.moments(l).unwrap())
            .collect();
        ev.set_mode(KernelMode::Dense);
        assert_eq!(ev.mode(), KernelMode::Dense);
        for (l, s) in [0.03, 0.3, 3.0].iter().zip(&sep) {
            let d = ev.moments(*l).unwrap();
            assert!(((s.z - d.z) / d.z).abs() < 1e-12);
            assert!((s.v() - d.v()).abs() < 1e-10 * d.v().max(1e-3));
            assert!(
                (s.dv_dlambda() - d.dv_dlambda()).abs() < 1e-9 * d.dv_dlambda().abs().max(1e-3)
            );
            assert!((s.mean_cost() - d.mean_cost()).abs() < 1e-12);
        }
    }

    #[test]
    fn v_is_nonnegative_and_bounded_by_cstar_over_lambda() {
        let (mu, nu) = pair_2d();
        let ev = ResponseEvaluator::new(&mu, &nu, Arc::new(QuadraticCost), 60).unwrap();
        for lambda in [0.05, 0.1, 1.0, 10.0] {
            let m = ev.moments(lambda).unwrap();
            assert!(m.v_raw() >= -1e-9);
            assert!(m.v() <= 0.080 / lambda);
        }
    }

    #[test]
    fn covariance_formula_matches_finite_differences_of_v() {
        let (mu, nu) = pair_1d();
        let ev = ResponseEvaluator::new(&mu, &nu, Arc::new(QuadraticCost), DEFAULT_NODES_PER_DIM)
            .unwrap();
        for lambda in [0.01f64, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0] {
            let h = 1e-4 * lambda;
            let fd = (ev.v_of_lambda(lambda + h).unwrap() - ev.v_of_lambda(lambda - h).unwrap())
                / (2.0 * h);
            let dv = ev.dv_dlambda(lambda).unwrap();
            assert!(((dv - fd) / fd).abs() <= 1e-3, "Λ={lambda}: {dv} vs {fd}");
        }
    }

    #[test]
    fn mixture_marginals_are_supported() {
        let nu = make_mixture(vec![
            (0.5, make_isotropic_gaussian(&[0.0], 0.05).unwrap()),
            (0.5, make_isotropic_gaussian(&[1.0], 0.05).unwrap()),
        ])
        .unwrap();
        let mu = make_isotropic_gaussian(&[0.5], 0.1).unwrap();
        let ev = ResponseEvaluator::new(&mu, &nu, Arc::new(QuadraticCost), 100).unwrap();
        let m = ev.moments(0.2).unwrap();
        assert!(m.z > 0.0 && m.z <= 1.0);
        assert!(m.v() >= 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (mu, nu) = pair_1d();
        let ev = ResponseEvaluator::new(&mu, &nu, Arc::new(QuadraticCost), 20).unwrap();
        assert!(matches!(
            ev.partition_z(0.0),
            Err(Error::NonPositiveLambda(_))
        ));
        assert!(ev.v_of_lambda(-1.0).is_err());
        assert!(solve_lambda_ode(&ev, 0.1, 1.0, 0.0).is_err());
        let mu3 = make_isotropic_gaussian(&[0.0, 0.0, 0.0], 1.0).unwrap();
        assert!(ResponseEvaluator::new(&mu3, &mu3, Arc::new(QuadraticCost), 10).is_err());
    }

    #[test]
    fn ode_with_zero_cost_is_constant() {
        let (mu, nu) = pair_1d();
        let ev = ResponseEvaluator::new(&mu, &nu, Arc::new(ZeroCost), 20).unwrap();
        let trace = solve_lambda_ode(&ev, 0.3, 10.0, 0.5).unwrap();
        assert_eq!(trace.len(), 21);
        assert!(trace.iter().all(|p| p.lambda == 0.3));
        assert_eq!(trace.last().unwrap().t, 10.0);
    }

    #[test]
    fn ode_trace_is_monotone_and_converges_under_step_halving() {
        let (mu, nu) = pair_1d();
        let ev = ResponseEvaluator::new(&mu, &nu, Arc::new(QuadraticCost), 80).unwrap();
        let a = solve_lambda_ode(&ev, 0.1, 20.0, 0.1).unwrap();
        let b = solve_lambda_ode(&ev, 0.1, 20.0, 0.05).unwrap();
        assert!(a.windows(2).all(|w| w[1].lambda >= w[0].lambda));
        let (la, lb) = (a.last().unwrap().lambda, b.last().unwrap().lambda);
        assert!(((la - lb) / lb).abs() <= 1e-6);
    }
}
