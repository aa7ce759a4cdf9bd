//! Neighborhood graph over frames, its Laplacian, and the regularized
//! structured prior precision.
//!
//! Frames from one scene form a clique, so every matrix here is block
//! diagonal over cliques and all downstream computations decompose per
//! clique. The prior precision is `q = 2L + lambda*I`; the Laplacian alone
//! is singular (it annihilates the all-ones vector), so `lambda > 0` is
//! required for a proper Gaussian.

use nalgebra::DMatrix;

use crate::error::{GlbmError, Result};

/// Symmetric binary adjacency, block diagonal with all-ones off-diagonal
/// blocks inside each clique.
#[derive(Debug, Clone)]
pub struct AdjacencyMatrix {
    a: DMatrix<f64>,
    clique_sizes: Vec<usize>,
}

impl AdjacencyMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn clique_sizes(&self) -> &[usize] {
        &self.clique_sizes
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }
}

/// Graph Laplacian `L = diag(A 1) - A`.
#[derive(Debug, Clone)]
pub struct Laplacian {
    l: DMatrix<f64>,
    clique_sizes: Vec<usize>,
}

impl Laplacian {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn clique_sizes(&self) -> &[usize] {
        &self.clique_sizes
    }

    pub fn n(&self) -> usize {
        self.l.nrows()
    }
}

/// Per-clique factorization of the prior precision block.
#[derive(Debug, Clone)]
pub struct CliqueBlock {
    /// `2 L_c + lambda I`, dense block for this clique.
    pub q: DMatrix<f64>,
    /// Upper-triangular `U` with `q = U^T U`.
    pub chol_upper: DMatrix<f64>,
    /// Dense inverse of `q`.
    pub q_inv: DMatrix<f64>,
    /// Elementwise product `q .* q_inv`, used by the KL trace term.
    pub q_had_qinv: DMatrix<f64>,
    /// `log det q` for this block.
    pub logdet: f64,
}

/// Regularized structured prior precision `q = 2L + lambda*I`, stored per
/// clique together with its Cholesky factor and inverse. Per latent
/// dimension the full prior precision is `q` (Kronecker with the identity
/// over dimensions, frame-major ordering).
#[derive(Debug, Clone)]
pub struct PriorPrecision {
    blocks: Vec<CliqueBlock>,
    clique_sizes: Vec<usize>,
    lambda: f64,
    logdet_q: f64,
    n: usize,
}

impl PriorPrecision {
    pub fn blocks(&self) -> &[CliqueBlock] {
        &self.blocks
    }

    pub fn clique_sizes(&self) -> &[usize] {
        &self.clique_sizes
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn logdet_q(&self) -> f64 {
        self.logdet_q
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Materialize the full `n x n` precision (tests and small-n tooling).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut q = DMatrix::zeros(self.n, self.n);
        let mut off = 0;
        for b in &self.blocks {
            let c = b.q.nrows();
            q.view_mut((off, off), (c, c)).copy_from(&b.q);
            off += c;
        }
        q
    }
}

/// Block-diagonal clique adjacency for the given clique sizes.
pub fn clique_adjacency(clique_sizes: &[usize]) -> Result<AdjacencyMatrix> {
    if clique_sizes.iter().any(|&c| c == 0) {
        return Err(GlbmError::InvalidArgument(
            "clique sizes must be positive".into(),
        ));
    }
    let n: usize = clique_sizes.iter().sum();
    let mut a = DMatrix::zeros(n, n);
    let mut off = 0;
    for &c in clique_sizes {
        for i in 0..c {
            for j in 0..c {
                if i != j {
                    a[(off + i, off + j)] = 1.0;
                }
            }
        }
        off += c;
    }
    Ok(AdjacencyMatrix {
        a,
        clique_sizes: clique_sizes.to_vec(),
    })
}

/// `L = diag(A 1) - A`.
pub fn laplacian(adj: &AdjacencyMatrix) -> Laplacian {
    let n = adj.n();
    let a = adj.matrix();
    let mut l = -a.clone();
    for i in 0..n {
        let degree: f64 = a.row(i).sum();
        l[(i, i)] += degree;
    }
    Laplacian {
        l,
        clique_sizes: adj.clique_sizes.clone(),
    }
}

/// Regularized prior precision `q = 2L + lambda*I` with cached per-clique
/// Cholesky factors, inverses, and log-determinant.
pub fn prior_precision(lap: &Laplacian, lambda: f64) -> Result<PriorPrecision> {
    if lambda <= 0.0 {
        return Err(GlbmError::InvalidArgument(format!(
            "prior lambda must be > 0 (got {lambda}); the unregularized precision is singular"
        )));
    }
    let mut blocks = Vec::with_capacity(lap.clique_sizes.len());
    let mut logdet_q = 0.0;
    let mut off = 0;
    for &c in &lap.clique_sizes {
        let l_block = lap.l.view((off, off), (c, c)).into_owned();
        let mut q = l_block * 2.0;
        for i in 0..c {
            q[(i, i)] += lambda;
        }
        let chol = q.clone().cholesky().ok_or_else(|| {
            GlbmError::Numeric("prior precision block is not positive definite".into())
        })?;
        let chol_upper = chol.l().transpose();
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let q_inv = chol.inverse();
        let q_had_qinv = q.component_mul(&q_inv);
        logdet_q += logdet;
        blocks.push(CliqueBlock {
            q,
            chol_upper,
            q_inv,
            q_had_qinv,
            logdet,
        });
        off += c;
    }
    Ok(PriorPrecision {
        blocks,
        clique_sizes: lap.clique_sizes.clone(),
        lambda,
        logdet_q,
        n: lap.n(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn adjacency_two_clique() {
        let adj = clique_adjacency(&[2]).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(adj.matrix(), &expect);
    }

    #[test]
    fn adjacency_singleton() {
        let adj = clique_adjacency(&[1]).unwrap();
        assert_eq!(adj.matrix(), &DMatrix::from_row_slice(1, 1, &[0.0]));
    }

    #[test]
    fn adjacency_block_diagonal() {
        let adj = clique_adjacency(&[2, 3]).unwrap();
        let a = adj.matrix();
        assert_eq!(a.nrows(), 5);
        // cross-clique entries are zero
        for i in 0..2 {
            for j in 2..5 {
                assert_eq!(a[(i, j)], 0.0);
                assert_eq!(a[(j, i)], 0.0);
            }
        }
        assert_eq!(a[(0, 1)], 1.0);
        assert_eq!(a[(2, 4)], 1.0);
        for i in 0..5 {
            assert_eq!(a[(i, i)], 0.0);
        }
    }

    #[test]
    fn adjacency_rejects_zero_size() {
        assert!(clique_adjacency(&[2, 0]).is_err());
    }

    #[test]
    fn laplacian_two_clique() {
        let lap = laplacian(&clique_adjacency(&[2]).unwrap());
        let expect = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        assert_eq!(lap.matrix(), &expect);
    }

    #[test]
    fn laplacian_three_clique() {
        let lap = laplacian(&clique_adjacency(&[3]).unwrap());
        let expect =
            DMatrix::from_row_slice(3, 3, &[2.0, -1.0, -1.0, -1.0, 2.0, -1.0, -1.0, -1.0, 2.0]);
        assert_eq!(lap.matrix(), &expect);
    }

    #[test]
    fn laplacian_row_sums_vanish() {
        let lap = laplacian(&clique_adjacency(&[2, 3, 7]).unwrap());
        for i in 0..lap.n() {
            assert!(lap.matrix().row(i).sum().abs() < 1e-9);
        }
    }

    #[test]
    fn laplacian_is_psd() {
        let lap = laplacian(&clique_adjacency(&[4, 2]).unwrap());
        let eig = lap.matrix().clone().symmetric_eigen();
        for ev in eig.eigenvalues.iter() {
            assert!(*ev >= -1e-10, "eigenvalue {ev}");
        }
    }

    #[test]
    fn prior_two_clique_logdet() {
        let lap = laplacian(&clique_adjacency(&[2]).unwrap());
        let q = prior_precision(&lap, 1.0).unwrap();
        let dense = q.to_dense();
        let expect = DMatrix::from_row_slice(2, 2, &[3.0, -2.0, -2.0, 3.0]);
        assert_relative_eq!(dense, expect, epsilon = 1e-12);
        // det = 9 - 4 = 5
        assert_relative_eq!(q.logdet_q(), 5.0_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn prior_edgeless_is_identity() {
        let lap = laplacian(&clique_adjacency(&[1, 1, 1]).unwrap());
        let q = prior_precision(&lap, 1.0).unwrap();
        assert_relative_eq!(q.to_dense(), DMatrix::identity(3, 3), epsilon = 1e-12);
        assert_relative_eq!(q.logdet_q(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn prior_rejects_nonpositive_lambda() {
        let lap = laplacian(&clique_adjacency(&[3]).unwrap());
        assert!(prior_precision(&lap, 0.0).is_err());
        assert!(prior_precision(&lap, -1.0).is_err());
    }

    #[test]
    fn prior_eigenvalues_at_least_lambda() {
        let lambda = 0.25;
        let lap = laplacian(&clique_adjacency(&[3, 5]).unwrap());
        let q = prior_precision(&lap, lambda).unwrap();
        let eig = q.to_dense().symmetric_eigen();
        for ev in eig.eigenvalues.iter() {
            assert!(*ev >= lambda - 1e-9, "eigenvalue {ev}");
        }
    }

    #[test]
    fn prior_cholesky_and_inverse_consistent() {
        let lap = laplacian(&clique_adjacency(&[4]).unwrap());
        let q = prior_precision(&lap, 0.7).unwrap();
        let b = &q.blocks()[0];
        let recon = b.chol_upper.transpose() * &b.chol_upper;
        assert_relative_eq!(recon, b.q, epsilon = 1e-10);
        let ident = &b.q * &b.q_inv;
        assert_relative_eq!(ident, DMatrix::identity(4, 4), epsilon = 1e-10);
    }

    #[test]
    fn prior_permutation_conjugation() {
        // relabeling frames within a clique conjugates q by the permutation
        let lap = laplacian(&clique_adjacency(&[4]).unwrap());
        let q = prior_precision(&lap, 1.3).unwrap().to_dense();
        let mut p = DMatrix::zeros(4, 4);
        let perm = [2usize, 0, 3, 1];
        for (i, &j) in perm.iter().enumerate() {
            p[(i, j)] = 1.0;
        }
        let conj = &p * &q * p.transpose();
        assert_relative_eq!(conj, q, epsilon = 1e-12);
    }
}
