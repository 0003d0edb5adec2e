use super::eigen::{jacobi_eigen, SymEigen};
use super::{CorrespondenceSet, EssentialMatrix, GeometryError};

/// Minimum separation of the two smallest eigenvalues of the weighted Gram
/// matrix for the solution (and its derivative) to be well defined.
pub const MIN_EIGENGAP: f64 = 1e-12;

/// Row of the design matrix for `x̃2ᵀ E x̃1 = 0` with `E` flattened row-major.
pub fn design_row(p: &[f64; 4]) -> [f64; 9] {
    let [x1, y1, x2, y2] = *p;
    [x1 * x2, y1 * x2, x2, x1 * y2, y1 * y2, y2, x1, y1, 1.0]
}

/// `Xᵀ diag(w²) X`, row-major 9×9.
pub fn weighted_gram(corrs: &CorrespondenceSet, weights: &[f64]) -> [f64; 81] {
    let mut g = [0.0; 81];
    for (p, &w) in corrs.points.iter().zip(weights) {
        let w2 = w * w;
        if w2 == 0.0 {
            continue;
        }
        let r = design_row(p);
        for i in 0..9 {
            let ri = w2 * r[i];
            for j in i..9 {
                g[i * 9 + j] += ri * r[j];
            }
        }
    }
    for i in 0..9 {
        for j in 0..i {
            g[i * 9 + j] = g[j * 9 + i];
        }
    }
    g
}

/// Everything the backward pass needs from one weighted eight-point solve.
#[derive(Debug, Clone)]
pub struct EightPointSolution {
    pub essential: EssentialMatrix,
    /// Unit smallest eigenvector, sign-normalized; equals `essential` flattened.
    pub vector: [f64; 9],
    /// Eigendecomposition of the Gram matrix; column 0 is `vector`.
    pub eigen: SymEigen,
}

fn check_weights(corrs: &CorrespondenceSet, weights: &[f64]) -> Result<(), GeometryError> {
    if weights.len() != corrs.len() {
        return Err(GeometryError::WeightCount {
            weights: weights.len(),
            points: corrs.len(),
        });
    }
    if let Some(&w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(GeometryError::InvalidWeight(w));
    }
    let positive = weights.iter().filter(|&&w| w > 0.0).count();
    if positive < 8 {
        return Err(GeometryError::InsufficientSupport { positive });
    }
    Ok(())
}

/// Solves for the smallest eigenvector of the weighted Gram matrix.
pub fn weighted_eight_point_solve(
    corrs: &CorrespondenceSet,
    weights: &[f64],
) -> Result<EightPointSolution, GeometryError> {
    check_weights(corrs, weights)?;
    let gram = weighted_gram(corrs, weights);
    let mut eigen = jacobi_eigen(&gram, 9);
    let gap = eigen.lowest_gap();
    if !(gap >= MIN_EIGENGAP) {
        return Err(GeometryError::DegenerateEigengap { gap });
    }
    let mut vector = [0.0; 9];
    vector.copy_from_slice(&eigen.vector(0));
    let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
    vector.iter_mut().for_each(|v| *v /= norm);
    // first nonzero entry positive
    if vector.iter().find(|v| v.abs() > 1e-12).is_some_and(|&v| v < 0.0) {
        vector.iter_mut().for_each(|v| *v = -*v);
        eigen.negate_vector(0);
    }
    Ok(EightPointSolution {
        essential: EssentialMatrix::from_vector(&vector)?,
        vector,
        eigen,
    })
}

/// Weighted least-squares essential matrix: minimizes
/// `Σ w² (x̃2ᵀ E x̃1)²` over unit-norm `E`. At least eight weights must be
/// strictly positive.
pub fn weighted_eight_point(
    corrs: &CorrespondenceSet,
    weights: &[f64],
) -> Result<EssentialMatrix, GeometryError> {
    weighted_eight_point_solve(corrs, weights).map(|s| s.essential)
}

/// Gradient with respect to the (symmetric) Gram matrix of a loss whose
/// gradient with respect to the smallest eigenvector is `upstream`.
///
/// Uses first-order perturbation theory,
/// `dv = Σ_{k>0} v_k (v_kᵀ dG v) / (λ_0 - λ_k)`, and returns the
/// symmetrized result, row-major 9×9.
pub fn eig_backward(eigen: &SymEigen, upstream: &[f64]) -> Result<Vec<f64>, GeometryError> {
    let n = eigen.n;
    let gap = eigen.lowest_gap();
    if !(gap >= MIN_EIGENGAP) {
        return Err(GeometryError::DegenerateEigengap { gap });
    }
    let v0 = eigen.vector(0);
    let mut m = vec![0.0; n * n];
    for k in 1..n {
        let vk = eigen.vector(k);
        let proj: f64 = vk.iter().zip(upstream).map(|(a, b)| a * b).sum();
        let coeff = proj / (eigen.values[0] - eigen.values[k]);
        if coeff == 0.0 {
            continue;
        }
        for i in 0..n {
            for j in 0..n {
                m[i * n + j] += coeff * vk[i] * v0[j];
            }
        }
    }
    let mut sym = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sym[i * n + j] = 0.5 * (m[i * n + j] + m[j * n + i]);
        }
    }
    Ok(sym)
}

/// Chains a Gram-matrix gradient to the weights through
/// `G = Σ_n w_n² r_n r_nᵀ`: `∂L/∂w_n = 2 w_n r_nᵀ (∂L/∂G) r_n`.
pub fn gram_to_weight_gradient(corrs: &CorrespondenceSet, weights: &[f64], grad_gram: &[f64]) -> Vec<f64> {
    corrs
        .points
        .iter()
        .zip(weights)
        .map(|(p, &w)| {
            if w == 0.0 {
                return 0.0;
            }
            let r = design_row(p);
            let mut q = 0.0;
            for i in 0..9 {
                let row: f64 = (0..9).map(|j| grad_gram[i * 9 + j] * r[j]).sum();
                q += r[i] * row;
            }
            2.0 * w * q
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> CorrespondenceSet {
        CorrespondenceSet::new(
            (0..n)
                .map(|i| {
                    let f = i as f64;
                    [(f * 0.37).sin(), (f * 0.91).cos(), (f * 1.3).sin() * 0.8, (f * 0.23).cos() * 0.6]
                })
                .collect(),
        )
    }

    #[test]
    fn needs_eight_positive_weights() {
        let c = grid(12);
        let mut w = vec![0.0; 12];
        w[..7].fill(1.0);
        assert_eq!(
            weighted_eight_point(&c, &w),
            Err(GeometryError::InsufficientSupport { positive: 7 })
        );
        assert!(matches!(
            weighted_eight_point(&c, &[1.0; 3]),
            Err(GeometryError::WeightCount { .. })
        ));
        let mut w = vec![1.0; 12];
        w[3] = -0.5;
        assert_eq!(weighted_eight_point(&c, &w), Err(GeometryError::InvalidWeight(-0.5)));
    }

    #[test]
    fn duplicated_rows_give_degenerate_gap() {
        // eight copies of one row: rank 1, eight-fold null space
        let c = CorrespondenceSet::new(vec![[0.1, 0.2, 0.3, 0.4]; 8]);
        assert!(matches!(
            weighted_eight_point(&c, &[1.0; 8]),
            Err(GeometryError::DegenerateEigengap { .. })
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let c = grid(20);
        let s = weighted_eight_point_solve(&c, &[1.0; 20]).unwrap();
        let g = eig_backward(&s.eigen, &[0.0; 9]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sign_convention_makes_first_entry_positive() {
        let c = grid(30);
        let s = weighted_eight_point_solve(&c, &[1.0; 30]).unwrap();
        let first = s.vector.iter().find(|v| v.abs() > 1e-12).unwrap();
        assert!(*first > 0.0);
        assert_eq!(s.eigen.vector(0), s.vector.to_vec());
    }
}
