//! Exact references: closed-form Gaussian transport and KL, and exact
//! discrete optimal transport between equal-size point sets.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::flow::ParticleSystem;
use crate::model::{Cost, PointCloud};

/// Largest point count accepted by [`discrete_ot`].
pub const DISCRETE_OT_BUDGET: usize = 512;

fn square(name: &'static str, m: &[f64], d: usize) -> Result<DMatrix<f64>> {
    if m.len() != d * d {
        return Err(Error::DimensionMismatch {
            expected: d * d,
            got: m.len(),
        });
    }
    let a = DMatrix::from_row_slice(d, d, m);
    if (&a - a.transpose()).abs().max() > 1e-12 * a.abs().max().max(1.0) {
        return Err(Error::NotPositiveDefinite(format!(
            "{name} is not symmetric"
        )));
    }
    Ok(a)
}

/// Symmetric PSD square root through the eigendecomposition, with slightly
/// negative eigenvalues clamped to zero.
fn psd_sqrt(name: &'static str, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = a.clone().symmetric_eigen();
    let scale = eig.eigenvalues.abs().max().max(1.0);
    if eig.eigenvalues.iter().any(|&l| l < -1e-10 * scale) {
        return Err(Error::NotPositiveDefinite(format!(
            "{name} has a negative eigenvalue"
        )));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Squared 2-Wasserstein distance between `N(m1, s1)` and `N(m2, s2)`
/// (covariances row-major):
/// `‖m1 − m2‖² + tr(s1 + s2 − 2 (s2^{1/2} s1 s2^{1/2})^{1/2})`.
pub fn gaussian_w2_squared(m1: &[f64], s1: &[f64], m2: &[f64], s2: &[f64]) -> Result<f64> {
    let d = m1.len();
    if m2.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: m2.len(),
        });
    }
    let a = square("s1", s1, d)?;
    let b = square("s2", s2, d)?;
    psd_sqrt("s1", &a)?;
    let root_b = psd_sqrt("s2", &b)?;
    let cross = &root_b * &a * &root_b;
    let cross = 0.5 * (&cross + cross.transpose());
    let cross_root = psd_sqrt("cross term", &cross)?;
    let mean_part: f64 = m1.iter().zip(m2).map(|(x, y)| (x - y) * (x - y)).sum();
    let trace = a.trace() + b.trace() - 2.0 * cross_root.trace();
    Ok(mean_part + trace.max(0.0))
}

/// `KL(N(m1, s1) ‖ N(m2, s2))`.
pub fn gaussian_kl(m1: &[f64], s1: &[f64], m2: &[f64], s2: &[f64]) -> Result<f64> {
    let d = m1.len();
    if m2.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: m2.len(),
        });
    }
    let a = square("s1", s1, d)?;
    let b = square("s2", s2, d)?;
    let ca = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("s1 is singular".into()))?;
    let cb = b
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("s2 is singular".into()))?;
    let logdet = |l: DMatrix<f64>| 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let b_inv = cb.inverse();
    let diff = DVector::from_iterator(d, m2.iter().zip(m1).map(|(x, y)| x - y));
    let maha = diff.dot(&(&b_inv * &diff));
    let kl = 0.5 * ((&b_inv * &a).trace() + maha - d as f64 + logdet(cb.l()) - logdet(ca.l()));
    Ok(kl.max(0.0))
}

/// Optimal coupling between two uniform empirical measures of equal size.
#[derive(Clone, Debug)]
pub struct DiscretePlan {
    pub row_points: PointCloud,
    pub col_points: PointCloud,
    /// Row `i` is matched to column `assignment[i]`.
    pub assignment: Vec<usize>,
    /// Row-major `n × n` transport plan with entries in `{0, 1/n}`.
    pub plan: Vec<f64>,
    /// `(1/n) Σ_i c(x_i, y_{assignment[i]})`, summed in row order.
    pub cost: f64,
}

/// Exact optimal transport between `xs` and `ys` with uniform weights.
///
/// With equal uniform marginals some optimal plan is a permutation, so an
/// exact assignment solver (shortest augmenting paths with potentials,
/// `O(n³)`) finds the optimum.
pub fn discrete_ot(xs: &PointCloud, ys: &PointCloud, cost: &dyn Cost) -> Result<DiscretePlan> {
    let n = xs.len();
    if ys.len() != n {
        return Err(Error::CountMismatch(n, ys.len()));
    }
    if xs.dim() != ys.dim() && cost.axis_term().is_some() {
        return Err(Error::DimensionMismatch {
            expected: xs.dim(),
            got: ys.dim(),
        });
    }
    if n > DISCRETE_OT_BUDGET {
        return Err(Error::OverBudget(n, DISCRETE_OT_BUDGET));
    }
    if n == 0 {
        return Err(Error::EmptyPoints);
    }
    let c: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| cost.evaluate(xs.point(i), ys.point(j)))
        .collect();
    let assignment = solve_assignment(n, &c);
    let mut plan = vec![0.0; n * n];
    let w = 1.0 / n as f64;
    let mut total = 0.0;
    for (i, &j) in assignment.iter().enumerate() {
        plan[i * n + j] = w;
        total += c[i * n + j];
    }
    Ok(DiscretePlan {
        row_points: xs.clone(),
        col_points: ys.clone(),
        assignment,
        plan,
        cost: total / n as f64,
    })
}

/// Minimum-cost perfect matching on a dense `n × n` cost matrix.
pub fn solve_assignment(n: usize, cost: &[f64]) -> Vec<usize> {
    // 1-based arrays; column 0 is the virtual source of each augmentation
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if matched_row[j] > 0 {
            assignment[matched_row[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Mean pair cost `(1/2N) Σ c(X_i, Y_i)` over both particle families.
pub fn empirical_coupling_cost(ps: &ParticleSystem, cost: &dyn Cost) -> f64 {
    let fam = |xs: &PointCloud, ys: &PointCloud| -> f64 {
        xs.iter()
            .zip(ys.iter())
            .map(|(x, y)| cost.evaluate(x, y))
            .sum()
    };
    let n = ps.x1.len() + ps.x2.len();
    (fam(&ps.x1, &ps.y1) + fam(&ps.x2, &ps.y2)) / n as f64
}

/// Mean cost of the given pairing `(xs[i], ys[i])`.
pub fn pairing_cost(xs: &PointCloud, ys: &PointCloud, cost: &dyn Cost) -> f64 {
    let s: f64 = xs
        .iter()
        .zip(ys.iter())
        .map(|(x, y)| cost.evaluate(x, y))
        .sum();
    s / xs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::QuadraticCost;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gaussian_pair_cost_matches_bures() {
        let s = [0.02, 0.0, 0.0, 0.02];
        let w = gaussian_w2_squared(&[0.4, 0.4], &s, &[0.6, 0.6], &s).unwrap();
        assert!((w - 0.08).abs() < 1e-12);
    }

    #[test]
    fn identical_gaussians_have_zero_distance() {
        let s = [0.3, 0.1, 0.1, 0.2];
        assert!(
            gaussian_w2_squared(&[0.1, 0.2], &s, &[0.1, 0.2], &s)
                .unwrap()
                .abs()
                < 1e-12
        );
        assert!(gaussian_kl(&[0.1, 0.2], &s, &[0.1, 0.2], &s).unwrap().abs() < 1e-12);
    }

    #[test]
    fn one_dimensional_bures_formula() {
        // (m1 − m2)² + (σ1 − σ2)²
        let w = gaussian_w2_squared(&[0.0], &[1.0], &[1.0], &[4.0]).unwrap();
        assert!((w - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_psd() {
        assert!(gaussian_w2_squared(
            &[0.0, 0.0],
            &[1.0, 2.0, 2.0, 1.0],
            &[0.0, 0.0],
            &[1.0, 0.0, 0.0, 1.0]
        )
        .is_err());
        assert!(gaussian_kl(&[0.0], &[0.0], &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn gaussian_kl_mean_shift_and_asymmetry() {
        let i2 = [1.0, 0.0, 0.0, 1.0];
        let kl = gaussian_kl(&[0.0, 0.0], &i2, &[0.3, -0.4], &i2).unwrap();
        assert!((kl - 0.125).abs() < 1e-14);
        let ab = gaussian_kl(&[0.0], &[1.0], &[0.0], &[4.0]).unwrap();
        let ba = gaussian_kl(&[0.0], &[4.0], &[0.0], &[1.0]).unwrap();
        assert!((ab - ba).abs() > 0.1);
        // 0.5 (1/4 − 1 + ln 4)
        assert!((ab - 0.5 * (0.25 - 1.0 + 4f64.ln())).abs() < 1e-14);
    }

    fn brute_force(xs: &PointCloud, ys: &PointCloud) -> f64 {
        fn rec(
            i: usize,
            used: &mut [bool],
            perm: &mut Vec<usize>,
            xs: &PointCloud,
            ys: &PointCloud,
            best: &mut f64,
        ) {
            let n = xs.len();
            if i == n {
                let c: f64 = perm
                    .iter()
                    .enumerate()
                    .map(|(r, &j)| QuadraticCost.evaluate(xs.point(r), ys.point(j)))
                    .sum::<f64>()
                    / n as f64;
                if c < *best {
                    *best = c;
                }
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    perm.push(j);
                    rec(i + 1, used, perm, xs, ys, best);
                    perm.pop();
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(
            0,
            &mut vec![false; xs.len()],
            &mut Vec::new(),
            xs,
            ys,
            &mut best,
        );
        best
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, d: usize) -> PointCloud {
        PointCloud::new(d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matches_brute_force_on_small_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let xs = random_cloud(&mut rng, 7, 2);
            let ys = random_cloud(&mut rng, 7, 2);
            let plan = discrete_ot(&xs, &ys, &QuadraticCost).unwrap();
            assert_eq!(plan.cost, brute_force(&xs, &ys));
        }
    }

    #[test]
    fn trivial_instances() {
        let xs = PointCloud::new(1, vec![0.0]).unwrap();
        let ys = PointCloud::new(1, vec![1.0]).unwrap();
        assert_eq!(discrete_ot(&xs, &ys, &QuadraticCost).unwrap().cost, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let xs = random_cloud(&mut rng, 30, 2);
        let plan = discrete_ot(&xs, &xs, &QuadraticCost).unwrap();
        assert_eq!(plan.cost, 0.0);
        assert_eq!(plan.assignment, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn plan_has_uniform_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let xs = random_cloud(&mut rng, 20, 3);
        let ys = random_cloud(&mut rng, 20, 3);
        let plan = discrete_ot(&xs, &ys, &QuadraticCost).unwrap();
        for i in 0..20 {
            let row: f64 = plan.plan[i * 20..(i + 1) * 20].iter().sum();
            let col: f64 = (0..20).map(|r| plan.plan[r * 20 + i]).sum();
            assert!((row - 0.05).abs() < 1e-10 && (col - 0.05).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_unequal_and_oversized() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let a = random_cloud(&mut rng, 3, 2);
        let b = random_cloud(&mut rng, 4, 2);
        assert!(matches!(
            discrete_ot(&a, &b, &QuadraticCost),
            Err(Error::CountMismatch(3, 4))
        ));
        let big = random_cloud(&mut rng, 513, 1);
        assert!(matches!(
            discrete_ot(&big, &big, &QuadraticCost),
            Err(Error::OverBudget(513, _))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn cost_is_relabeling_invariant_and_optimal(seed in 0u64..10_000, n in 2usize..25) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs = random_cloud(&mut rng, n, 2);
            let ys = random_cloud(&mut rng, n, 2);
            let plan = discrete_ot(&xs, &ys, &QuadraticCost).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let mut shuffled = PointCloud::with_capacity(2, n);
            for &p in &perm {
                shuffled.push(ys.point(p));
            }
            let again = discrete_ot(&xs, &shuffled, &QuadraticCost).unwrap();
            prop_assert!((again.cost - plan.cost).abs() <= 1e-12);
            // any pairing, including the identity one, costs at least as much
            prop_assert!(plan.cost <= pairing_cost(&xs, &ys, &QuadraticCost) + 1e-12);
            prop_assert!(plan.cost <= pairing_cost(&xs, &shuffled, &QuadraticCost) + 1e-12);
        }

        #[test]
        fn w2_is_symmetric(
            m in proptest::collection::vec(-1.0f64..1.0, 4),
            a in 0.1f64..2.0, b in 0.1f64..2.0, r in -0.9f64..0.9,
        ) {
            let s1 = [a, r * (a * b).sqrt() * 0.5, r * (a * b).sqrt() * 0.5, b];
            let s2 = [b, 0.0, 0.0, a];
            let ab = gaussian_w2_squared(&m[..2], &s1, &m[2..], &s2).unwrap();
            let ba = gaussian_w2_squared(&m[2..], &s2, &m[..2], &s1).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-10 * ab.max(1.0));
            prop_assert!(gaussian_w2_squared(&m[..2], &s1, &m[..2], &s1).unwrap() <= 1e-12);
        }
    }
}
