//! Structured variational posterior over latent codes.
//!
//! Per latent dimension `k` the posterior precision over the `n` frames is
//! the sandwich `P_k = diag(s_{.,k}) * q * diag(s_{.,k})` where `q` is the
//! regularized prior precision and `s` the encoder's positive
//! precision-scale output. Everything is block diagonal over cliques, so
//! assembly, sampling, and the KL term all run on per-clique dense blocks.
//!
//! With `q = U^T U` (upper Cholesky), `P_k = (U D_k)^T (U D_k)`, so the
//! posterior Cholesky factor is simply `R_k = U * diag(s_{.,k})`. That makes
//! the reparameterized sample `z = mu + R_k^{-1} eps` exactly differentiable
//! in `mu` and `s` without differentiating through a factorization.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;

use crate::error::{GlbmError, Result};
use crate::graph::PriorPrecision;

/// Interpretation of the encoder's second head.
///
/// The adopted convention is `Precision`: the head scales the prior
/// precision. Under `Variance` the head is read as a standard-deviation
/// scale instead and its reciprocal enters the sandwich.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScaleSemantics {
    #[default]
    Precision,
    Variance,
}

impl ScaleSemantics {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "precision" => Ok(ScaleSemantics::Precision),
            "variance" => Ok(ScaleSemantics::Variance),
            other => Err(GlbmError::Config(format!(
                "unknown scale semantics '{other}' (expected precision|variance)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ScaleSemantics::Precision => "precision",
            ScaleSemantics::Variance => "variance",
        }
    }

    /// Map the raw encoder output to the effective precision-scale.
    pub fn effective(&self, raw: &Array2<f64>) -> Array2<f64> {
        match self {
            ScaleSemantics::Precision => raw.clone(),
            ScaleSemantics::Variance => raw.mapv(|v| 1.0 / v),
        }
    }

    /// Chain rule factor d(effective)/d(raw), elementwise.
    pub fn effective_jacobian(&self, raw: &Array2<f64>) -> Array2<f64> {
        match self {
            ScaleSemantics::Precision => Array2::ones(raw.dim()),
            ScaleSemantics::Variance => raw.mapv(|v| -1.0 / (v * v)),
        }
    }
}

/// Latent coordinates, one row per frame.
#[derive(Debug, Clone)]
pub struct LatentSample {
    pub z: Array2<f64>,
}

/// Structured Gaussian posterior: per-frame means, positive precision-scale
/// factors, and cached per-dimension Cholesky factors of the block posterior
/// precision.
#[derive(Debug, Clone)]
pub struct StructuredPosterior {
    mu: Array2<f64>,
    scale: Array2<f64>,
    /// `chol[c][k]` is the upper-triangular factor `R_k` of clique `c`'s
    /// posterior precision block in dimension `k`.
    chol: Vec<Vec<DMatrix<f64>>>,
    clique_sizes: Vec<usize>,
}

impl StructuredPosterior {
    pub fn mu(&self) -> &Array2<f64> {
        &self.mu
    }

    pub fn scale(&self) -> &Array2<f64> {
        &self.scale
    }

    pub fn clique_sizes(&self) -> &[usize] {
        &self.clique_sizes
    }

    pub fn n(&self) -> usize {
        self.mu.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.ncols()
    }

    pub fn chol(&self, clique: usize, dim: usize) -> &DMatrix<f64> {
        &self.chol[clique][dim]
    }
}

/// Assemble the posterior from encoder outputs and the prior precision.
pub fn assemble_posterior(
    mu: Array2<f64>,
    scale: Array2<f64>,
    q: &PriorPrecision,
) -> Result<StructuredPosterior> {
    if mu.dim() != scale.dim() {
        return Err(GlbmError::InvalidArgument(format!(
            "mu shape {:?} != scale shape {:?}",
            mu.dim(),
            scale.dim()
        )));
    }
    if mu.nrows() != q.n() {
        return Err(GlbmError::InvalidArgument(format!(
            "posterior has {} frames but prior expects {}",
            mu.nrows(),
            q.n()
        )));
    }
    if scale.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
        return Err(GlbmError::InvalidArgument(
            "scale entries must be positive and finite".into(),
        ));
    }
    let d = mu.ncols();
    let mut chol = Vec::with_capacity(q.blocks().len());
    let mut off = 0;
    for block in q.blocks() {
        let c = block.q.nrows();
        let mut per_dim = Vec::with_capacity(d);
        for k in 0..d {
            // R_k = U * diag(s): scale column j of U by s_j
            let mut r = block.chol_upper.clone();
            for j in 0..c {
                let s = scale[[off + j, k]];
                for i in 0..=j {
                    r[(i, j)] *= s;
                }
            }
            per_dim.push(r);
        }
        chol.push(per_dim);
        off += c;
    }
    Ok(StructuredPosterior {
        mu,
        scale,
        chol,
        clique_sizes: q.clique_sizes().to_vec(),
    })
}

/// Reparameterized sample `z_{.,k} = mu_{.,k} + R_k^{-1} noise_{.,k}`,
/// solved per clique by back substitution.
pub fn sample(post: &StructuredPosterior, noise: &Array2<f64>) -> Result<LatentSample> {
    if noise.dim() != post.mu.dim() {
        return Err(GlbmError::InvalidArgument(format!(
            "noise shape {:?} != posterior shape {:?}",
            noise.dim(),
            post.mu.dim()
        )));
    }
    let d = post.latent_dim();
    let mut z = post.mu.clone();
    let mut off = 0;
    for (ci, &c) in post.clique_sizes.iter().enumerate() {
        for k in 0..d {
            let eps = DVector::from_fn(c, |i, _| noise[[off + i, k]]);
            let y = post.chol[ci][k]
                .solve_upper_triangular(&eps)
                .ok_or_else(|| GlbmError::Numeric("singular posterior Cholesky factor".into()))?;
            for i in 0..c {
                z[[off + i, k]] += y[i];
            }
        }
        off += c;
    }
    Ok(LatentSample { z })
}

/// Mean-field fallback: ignores off-diagonal posterior structure and samples
/// each coordinate with standard deviation `1 / sqrt(P_k[i,i])`.
pub fn sample_mean_field(post: &StructuredPosterior, noise: &Array2<f64>) -> Result<LatentSample> {
    if noise.dim() != post.mu.dim() {
        return Err(GlbmError::InvalidArgument(
            "noise shape mismatch".into(),
        ));
    }
    let d = post.latent_dim();
    let mut z = post.mu.clone();
    let mut off = 0;
    for (ci, &c) in post.clique_sizes.iter().enumerate() {
        for k in 0..d {
            let r = &post.chol[ci][k];
            for i in 0..c {
                // diagonal of P = (R^T R): column norms of R
                let p_ii: f64 = (0..=i).map(|row| r[(row, i)] * r[(row, i)]).sum();
                z[[off + i, k]] += noise[[off + i, k]] / p_ii.sqrt();
            }
        }
        off += c;
    }
    Ok(LatentSample { z })
}

/// Gradient of the sample w.r.t. the precision-scale along the noise path:
/// `dz_ik/ds_ik = -(z_ik - mu_ik) / s_ik`, all cross terms vanish.
pub fn sample_grad_scale(
    post: &StructuredPosterior,
    z: &LatentSample,
    grad_z: &Array2<f64>,
) -> Array2<f64> {
    let mut g = Array2::zeros(post.mu.dim());
    for ((idx, gz), (zv, (mv, sv))) in grad_z.indexed_iter().zip(
        z.z.iter()
            .zip(post.mu.iter().zip(post.scale.iter())),
    ) {
        g[idx] = -gz * (zv - mv) / sv;
    }
    g
}

/// Analytic KL between the structured posterior and the prior, summed over
/// latent dimensions and cliques:
/// `KL = 1/2 sum_k [ tr(q P_k^-1) - n + mu_k^T q mu_k + logdet P_k - logdet q ]`.
pub fn kl_divergence(post: &StructuredPosterior, q: &PriorPrecision) -> f64 {
    let d = post.latent_dim();
    let mut kl = 0.0;
    let mut off = 0;
    for (block, &c) in q.blocks().iter().zip(q.clique_sizes()) {
        for k in 0..d {
            let mut trace = 0.0;
            let mut quad = 0.0;
            let mut logdet_scale = 0.0;
            for i in 0..c {
                let si = post.scale[[off + i, k]];
                let mui = post.mu[[off + i, k]];
                logdet_scale += si.ln();
                for j in 0..c {
                    let sj = post.scale[[off + j, k]];
                    let muj = post.mu[[off + j, k]];
                    trace += block.q_had_qinv[(i, j)] / (si * sj);
                    quad += block.q[(i, j)] * mui * muj;
                }
            }
            // logdet P_k - logdet q = 2 * sum_i ln s_ik
            kl += 0.5 * (trace - c as f64 + quad + 2.0 * logdet_scale);
        }
        off += c;
    }
    debug_assert!(kl >= -1e-9, "KL must be nonnegative, got {kl}");
    kl
}

/// Gradients of [`kl_divergence`] w.r.t. `mu` and the precision-scale.
pub fn kl_gradients(post: &StructuredPosterior, q: &PriorPrecision) -> (Array2<f64>, Array2<f64>) {
    let d = post.latent_dim();
    let mut grad_mu = Array2::zeros(post.mu.dim());
    let mut grad_scale = Array2::zeros(post.scale.dim());
    let mut off = 0;
    for (block, &c) in q.blocks().iter().zip(q.clique_sizes()) {
        for k in 0..d {
            for i in 0..c {
                let si = post.scale[[off + i, k]];
                let mut qmu = 0.0;
                let mut had_u = 0.0;
                for j in 0..c {
                    qmu += block.q[(i, j)] * post.mu[[off + j, k]];
                    had_u += block.q_had_qinv[(i, j)] / post.scale[[off + j, k]];
                }
                grad_mu[[off + i, k]] = qmu;
                grad_scale[[off + i, k]] = 1.0 / si - had_u / (si * si);
            }
        }
        off += c;
    }
    (grad_mu, grad_scale)
}
