//! Gauss-Legendre rules and tensor-product grids over axis-aligned boxes.

use crate::model::BoxDomain;

/// Nodes and weights of the `n`-point Gauss-Legendre rule on `[-1, 1]`.
///
/// Roots are found by Newton iteration on the three-term recurrence, started
/// from the usual cosine approximation.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "need at least one quadrature node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let step = p / d;
            x -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Gauss-Legendre rule mapped onto `[a, b]`.
pub fn gauss_legendre_interval(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let (t, w) = gauss_legendre(n);
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    (
        t.iter().map(|&ti| mid + half * ti).collect(),
        w.iter().map(|&wi| half * wi).collect(),
    )
}

/// Tensor-product rule on a box: per-axis nodes and weights, flattened in
/// row-major order (last axis fastest).
#[derive(Clone, Debug)]
pub struct TensorGrid {
    pub axis_nodes: Vec<Vec<f64>>,
    pub axis_weights: Vec<Vec<f64>>,
}

impl TensorGrid {
    pub fn new(domain: &BoxDomain, per_axis: usize) -> Self {
        let (axis_nodes, axis_weights) = (0..domain.dim())
            .map(|k| gauss_legendre_interval(per_axis, domain.lo[k], domain.hi[k]))
            .unzip();
        Self {
            axis_nodes,
            axis_weights,
        }
    }

    pub fn dim(&self) -> usize {
        self.axis_nodes.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axis_nodes.iter().map(Vec::len).collect()
    }

    pub fn len(&self) -> usize {
        self.axis_nodes.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes the coordinates of flat node `flat` into `out`.
    pub fn node(&self, mut flat: usize, out: &mut [f64]) {
        for k in (0..self.dim()).rev() {
            let n = self.axis_nodes[k].len();
            out[k] = self.axis_nodes[k][flat % n];
            flat /= n;
        }
    }

    pub fn weight(&self, mut flat: usize) -> f64 {
        let mut w = 1.0;
        for k in (0..self.dim()).rev() {
            let n = self.axis_weights[k].len();
            w *= self.axis_weights[k][flat % n];
            flat /= n;
        }
        w
    }

    /// All nodes as a flat coordinate array together with the product weights.
    pub fn nodes_and_weights(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let n = self.len();
        let mut coords = vec![0.0; n * d];
        let mut weights = Vec::with_capacity(n);
        for i in 0..n {
            self.node(i, &mut coords[i * d..(i + 1) * d]);
            weights.push(self.weight(i));
        }
        (coords, weights)
    }

    /// Integral of `f` over the box.
    pub fn integrate(&self, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        let mut x = vec![0.0; self.dim()];
        (0..self.len())
            .map(|i| {
                self.node(i, &mut x);
                self.weight(i) * f(&x)
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_interval_length() {
        for n in [1, 2, 5, 16, 120, 201] {
            let (_, w) = gauss_legendre(n);
            let s: f64 = w.iter().sum();
            assert!((s - 2.0).abs() < 1e-13, "n={n} sum={s}");
        }
    }

    #[test]
    fn matches_tabulated_three_point_rule() {
        let (x, w) = gauss_legendre(3);
        assert!((x[0] + 0.774_596_669_241_483_4).abs() < 1e-15);
        assert_eq!(x[1], 0.0);
        assert!((w[1] - 8.0 / 9.0).abs() < 1e-15);
        assert!((w[0] - 5.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn exact_for_polynomials_up_to_degree_2n_minus_1() {
        let n = 6;
        let (x, w) = gauss_legendre_interval(n, -0.5, 2.0);
        for deg in 0..(2 * n) {
            let approx: f64 = x
                .iter()
                .zip(&w)
                .map(|(xi, wi)| wi * xi.powi(deg as i32))
                .sum();
            let p = deg as i32 + 1;
            let exact = (2.0f64.powi(p) - (-0.5f64).powi(p)) / p as f64;
            assert!(
                (approx - exact).abs() < 1e-12 * exact.abs().max(1.0),
                "deg {deg}"
            );
        }
    }

    #[test]
    fn tensor_grid_integrates_separable_function() {
        let dom = BoxDomain::new(vec![0.0, -1.0], vec![1.0, 2.0]).unwrap();
        let g = TensorGrid::new(&dom, 8);
        let v = g.integrate(|x| x[0] * x[0] * x[1]);
        // (1/3) * (4 - 1)/2
        assert!((v - 0.5).abs() < 1e-13);
    }
}
