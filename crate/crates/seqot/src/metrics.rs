//! Distance and contraction functionals: the Hilbert projective metric,
//! Birkhoff contraction coefficients, and the divergences used by the
//! stopping analysis.

use crate::error::SeqotError;
use crate::linalg::Matrix;

/// A strictly positive, finite vector — the domain of the Hilbert metric.
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveVector(Vec<f64>);

impl PositiveVector {
    pub fn new(entries: Vec<f64>) -> Result<Self, SeqotError> {
        check_positive(&entries)?;
        Ok(PositiveVector(entries))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

fn check_positive(v: &[f64]) -> Result<(), SeqotError> {
    for (i, &x) in v.iter().enumerate() {
        if !(x > 0.0) || !x.is_finite() {
            return Err(SeqotError::NonPositiveEntry { index: i, value: x });
        }
    }
    Ok(())
}

fn check_lengths(left: usize, right: usize) -> Result<(), SeqotError> {
    if left != right {
        return Err(SeqotError::LengthMismatch { left, right });
    }
    Ok(())
}

/// Hilbert projective metric `log(max_i(u_i/v_i) * max_j(v_j/u_j))`.
///
/// Zero exactly on positive scalar multiples. Evaluated as
/// `log(max ratio) - log(min ratio)` so the result is never negative.
pub fn hilbert_metric(u: &[f64], v: &[f64]) -> Result<f64, SeqotError> {
    check_lengths(u.len(), v.len())?;
    check_positive(u)?;
    check_positive(v)?;
    let mut max_ratio = f64::NEG_INFINITY;
    let mut min_ratio = f64::INFINITY;
    for (a, b) in u.iter().zip(v) {
        let r = a / b;
        max_ratio = max_ratio.max(r);
        min_ratio = min_ratio.min(r);
    }
    Ok(max_ratio.ln() - min_ratio.ln())
}

/// Oscillation ratio `gamma(A) = max A_ik A_jl / (A_jk A_il)` over all index
/// quadruples of a strictly positive matrix. Always `>= 1`.
///
/// Direct enumeration; it is a diagnostic, so correctness beats speed.
pub fn birkhoff_gamma(a: &Matrix) -> Result<f64, SeqotError> {
    check_positive(a.data())?;
    let (n, m) = (a.rows(), a.cols());
    let mut gamma: f64 = 1.0;
    for i in 0..n {
        for j in 0..n {
            for k in 0..m {
                for l in 0..m {
                    // Same-row ratios avoid overflow of entry products.
                    let r = (a.get(i, k) / a.get(i, l)) * (a.get(j, l) / a.get(j, k));
                    gamma = gamma.max(r);
                }
            }
        }
    }
    Ok(gamma)
}

/// Contraction coefficient `(sqrt(gamma) - 1) / (sqrt(gamma) + 1)`, in `[0, 1)`.
pub fn birkhoff_lambda(a: &Matrix) -> Result<f64, SeqotError> {
    let g = birkhoff_gamma(a)?.sqrt();
    Ok((g - 1.0) / (g + 1.0))
}

/// Kullback-Leibler divergence `sum_i c_i log(c_i / d_i)` with the
/// `0 log 0 = 0` convention.
///
/// Nonnegative when `c` is a distribution and `d` a subdistribution.
pub fn kl_divergence(c: &[f64], d: &[f64]) -> Result<f64, SeqotError> {
    check_lengths(c.len(), d.len())?;
    let mut acc = 0.0;
    for (i, (&ci, &di)) in c.iter().zip(d).enumerate() {
        if ci > 0.0 {
            if di <= 0.0 {
                return Err(SeqotError::ZeroDenominatorWithPositiveMass { index: i });
            }
            acc += ci * (ci / di).ln();
        }
    }
    Ok(acc)
}

/// `sum_i |x_i - y_i|`.
pub fn l1_distance(x: &[f64], y: &[f64]) -> Result<f64, SeqotError> {
    check_lengths(x.len(), y.len())?;
    Ok(crate::linalg::l1_distance_unchecked(x, y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hilbert_zero_on_scalar_multiples() {
        assert_eq!(hilbert_metric(&[1.0, 2.0], &[3.0, 6.0]).unwrap(), 0.0);
        assert_eq!(hilbert_metric(&[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn hilbert_of_swapped_pair() {
        let d = hilbert_metric(&[1.0, 2.0], &[2.0, 1.0]).unwrap();
        assert!((d - 4.0f64.ln()).abs() < 1e-15);
        assert!((d - 1.3862943611198906).abs() < 1e-15);
    }

    #[test]
    fn hilbert_rejects_bad_inputs() {
        assert!(matches!(
            hilbert_metric(&[1.0], &[1.0, 2.0]),
            Err(SeqotError::LengthMismatch { .. })
        ));
        assert!(matches!(
            hilbert_metric(&[1.0, 0.0], &[1.0, 2.0]),
            Err(SeqotError::NonPositiveEntry { index: 1, .. })
        ));
    }

    #[test]
    fn gamma_of_flat_matrix_is_one() {
        let a = Matrix::constant(3, 3, 1.0);
        assert_eq!(birkhoff_gamma(&a).unwrap(), 1.0);
        assert_eq!(birkhoff_lambda(&a).unwrap(), 0.0);
    }

    #[test]
    fn gamma_of_small_matrices_matches_enumeration_by_hand() {
        // [[1,1],[1,2]]: the quadruple (i,j,k,l) = (0,1,1,0) gives
        // A_01 A_10 / (A_11 A_00) inverted — the max over all 16 is 2.
        let a = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 2.0]]).unwrap();
        assert!((birkhoff_gamma(&a).unwrap() - 2.0).abs() < 1e-15);
        let lam = birkhoff_lambda(&a).unwrap();
        let want = (2.0f64.sqrt() - 1.0) / (2.0f64.sqrt() + 1.0);
        assert!((lam - want).abs() < 1e-15);
        assert!((lam - 0.17157287525381).abs() < 1e-12);

        let b = Matrix::from_rows(&[vec![10.0, 1.0], vec![1.0, 10.0]]).unwrap();
        assert!((birkhoff_gamma(&b).unwrap() - 100.0).abs() < 1e-12);
        assert!((birkhoff_lambda(&b).unwrap() - 9.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        let d = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        let want = 0.5 * 2.0f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((d - want).abs() < 1e-15);
        assert!((d - 0.14384103622589045).abs() < 1e-12);
        let single = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((single - 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn kl_zero_mass_skips_zero_denominator() {
        assert_eq!(kl_divergence(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(
            kl_divergence(&[0.5, 0.5], &[1.0, 0.0]),
            Err(SeqotError::ZeroDenominatorWithPositiveMass { index: 1 })
        ));
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_distance(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(l1_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2.0);
        let d = l1_distance(&[0.7, 0.3], &[0.6, 0.4]).unwrap();
        assert!((d - 0.2).abs() < 1e-15);
    }

    fn positive_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(1e-3f64..1e3, len)
    }

    proptest! {
        #[test]
        fn hilbert_symmetry_and_triangle(u in positive_vec(5), v in positive_vec(5), w in positive_vec(5)) {
            let duv = hilbert_metric(&u, &v).unwrap();
            let dvu = hilbert_metric(&v, &u).unwrap();
            prop_assert!((duv - dvu).abs() <= 1e-12);
            let duw = hilbert_metric(&u, &w).unwrap();
            let dwv = hilbert_metric(&w, &v).unwrap();
            prop_assert!(duv <= duw + dwv + 1e-12);
        }

        #[test]
        fn hilbert_scale_invariance(u in positive_vec(4), v in positive_vec(4), c in positive_vec(4)) {
            let cu: Vec<f64> = c.iter().zip(&u).map(|(a, b)| a * b).collect();
            let cv: Vec<f64> = c.iter().zip(&v).map(|(a, b)| a * b).collect();
            let lhs = hilbert_metric(&cu, &cv).unwrap();
            let rhs = hilbert_metric(&u, &v).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12, "{lhs} vs {rhs}");
        }

        #[test]
        fn hilbert_sqrt_halving(u in positive_vec(4), v in positive_vec(4)) {
            let su: Vec<f64> = u.iter().map(|x| x.sqrt()).collect();
            let sv: Vec<f64> = v.iter().map(|x| x.sqrt()).collect();
            let lhs = hilbert_metric(&su, &sv).unwrap();
            let rhs = hilbert_metric(&u, &v).unwrap() / 2.0;
            prop_assert!((lhs - rhs).abs() <= 1e-12);
        }

        #[test]
        fn hilbert_quotient_triangle(
            u in positive_vec(4), v in positive_vec(4), w in positive_vec(4), x in positive_vec(4),
        ) {
            let ux: Vec<f64> = u.iter().zip(&x).map(|(a, b)| a / b).collect();
            let vw: Vec<f64> = v.iter().zip(&w).map(|(a, b)| a / b).collect();
            let lhs = hilbert_metric(&ux, &vw).unwrap();
            let rhs = hilbert_metric(&u, &v).unwrap() + hilbert_metric(&w, &x).unwrap();
            prop_assert!(lhs <= rhs + 1e-12);
        }

        #[test]
        fn birkhoff_contraction_bound(
            entries in proptest::collection::vec(0.1f64..10.0, 12),
            v in positive_vec(4),
            w in positive_vec(4),
        ) {
            let a = Matrix::from_fn(3, 4, |r, c| entries[r * 4 + c]);
            let lam = birkhoff_lambda(&a).unwrap();
            prop_assert!((0.0..1.0).contains(&lam));
            let av = a.matvec(&v);
            let aw = a.matvec(&w);
            let lhs = hilbert_metric(&av, &aw).unwrap();
            let rhs = lam * hilbert_metric(&v, &w).unwrap();
            prop_assert!(lhs <= rhs + 1e-10, "{lhs} > {rhs}");
        }

        #[test]
        fn pinsker_for_subdistributions(
            raw_c in proptest::collection::vec(1e-6f64..1.0, 5),
            raw_d in proptest::collection::vec(1e-6f64..1.0, 5),
            shrink in 0.5f64..1.0,
        ) {
            let sc: f64 = raw_c.iter().sum();
            let c: Vec<f64> = raw_c.iter().map(|x| x / sc).collect();
            let sd: f64 = raw_d.iter().sum();
            let d: Vec<f64> = raw_d.iter().map(|x| shrink * x / sd).collect();
            let l1 = l1_distance(&c, &d).unwrap();
            let kl = kl_divergence(&c, &d).unwrap();
            prop_assert!(l1 * l1 <= 2.0 * kl + 1e-10);
        }
    }
}
