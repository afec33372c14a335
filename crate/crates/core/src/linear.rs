//! Linear-index binary regression with latent-variable Gibbs updates.
//!
//! Covariates are standardized internally (constant columns dropped) and
//! every coefficient, intercept included, gets an independent
//! `Normal(0, prior_scale²)` prior. Probit uses truncated-normal latents,
//! logit uses Pólya-Gamma weights. Linear algebra is done in `f64`.

use nalgebra::{Cholesky, DMatrix, DVector};
use polya_gamma::PolyaGamma;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{Covariates, Link};
use crate::numeric::{norm_cdf_f64, truncated_latent, Real};

/// One posterior draw on the original covariate scale.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct LinearModelDraw {
    /// Intercept first, then one coefficient per covariate.
    pub coefficients: Vec<f64>,
    pub link: Link,
}

impl LinearModelDraw {
    pub fn index(&self, row: &[f64]) -> f64 {
        self.coefficients[0] + row.iter().zip(&self.coefficients[1..]).map(|(x, b)| x * b).sum::<f64>()
    }

    pub fn probability(&self, row: &[f64]) -> f64 {
        inverse_link(self.link, self.index(row))
    }
}

pub fn inverse_link(link: Link, eta: f64) -> f64 {
    match link {
        Link::Probit => norm_cdf_f64(eta),
        Link::Logit => 1.0 / (1.0 + (-eta).exp()),
    }
}

/// Gibbs state of one linear surface over a fixed covariate matrix.
#[derive(Debug, Clone)]
pub struct LinearSampler {
    design: DMatrix<f64>,
    kept: Vec<usize>,
    means: Vec<f64>,
    sds: Vec<f64>,
    p: usize,
    beta: DVector<f64>,
    offset: f64,
    prior_scale: f64,
    link: Link,
    rows: Vec<usize>,
    y: Vec<bool>,
}

impl LinearSampler {
    pub fn new<T: Real>(x: &Covariates<T>, link: Link, prior_scale: f64, offset: f64) -> Self {
        let n = x.n();
        let mut kept = Vec::new();
        let mut means = Vec::new();
        let mut sds = Vec::new();
        for c in 0..x.p() {
            let col: Vec<f64> = x.column(c).iter().map(|v| v.as_f64()).collect();
            let m = col.iter().sum::<f64>() / n as f64;
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
            if sd > 0.0 {
                kept.push(c);
                means.push(m);
                sds.push(sd);
            }
        }
        let k = kept.len() + 1;
        let design = DMatrix::from_fn(n, k, |i, j| {
            if j == 0 {
                1.0
            } else {
                (x.get(i, kept[j - 1]).as_f64() - means[j - 1]) / sds[j - 1]
            }
        });
        Self {
            design,
            kept,
            means,
            sds,
            p: x.p(),
            beta: DVector::zeros(k),
            offset,
            prior_scale,
            link,
            rows: Vec::new(),
            y: Vec::new(),
        }
    }

    pub fn set_offset(&mut self, offset: f64) {
        self.offset = offset;
    }

    pub fn set_training(&mut self, rows: Vec<usize>, y: Vec<bool>) {
        assert_eq!(rows.len(), y.len());
        self.rows = rows;
        self.y = y;
    }

    fn eta(&self, row: usize) -> f64 {
        self.offset + self.design.row(row).dot(&self.beta.transpose())
    }

    /// One Gibbs update of the latents and coefficients. Leaves the
    /// coefficients untouched while the training set is empty.
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        if self.rows.is_empty() {
            return;
        }
        let k = self.beta.len();
        let mut precision = DMatrix::<f64>::identity(k, k) / (self.prior_scale * self.prior_scale);
        let mut rhs = DVector::<f64>::zeros(k);
        let pg = PolyaGamma::new(1.0);
        for (&r, &yy) in self.rows.iter().zip(&self.y) {
            let eta = self.eta(r);
            let xr = self.design.row(r).transpose();
            let (weight, target) = match self.link {
                Link::Probit => (1.0, truncated_latent(rng, eta, yy) - self.offset),
                Link::Logit => {
                    let w = pg.draw(rng, eta);
                    (w, (if yy { 0.5 } else { -0.5 }) / w - self.offset)
                }
            };
            precision.ger(weight, &xr, &xr, 1.0);
            rhs.axpy(weight * target, &xr, 1.0);
        }
        let chol = Cholesky::new(precision).expect("prior makes the precision positive definite");
        let mean = chol.solve(&rhs);
        let eps = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        // precision = L Lᵀ, so L⁻ᵀ ε has covariance precision⁻¹.
        let noise = chol.l().transpose().solve_upper_triangular(&eps).expect("triangular factor is nonsingular");
        self.beta = mean + noise;
    }

    /// Linear index at every row of the matrix.
    pub fn index_all(&self) -> Vec<f64> {
        (&self.design * &self.beta).iter().map(|v| v + self.offset).collect()
    }

    /// Current coefficients mapped back to the original covariate scale,
    /// with the offset folded into the intercept.
    pub fn current_draw(&self) -> LinearModelDraw {
        let mut coef = vec![0.0; self.p + 1];
        coef[0] = self.beta[0] + self.offset;
        for (j, &c) in self.kept.iter().enumerate() {
            let b = self.beta[j + 1] / self.sds[j];
            coef[c + 1] = b;
            coef[0] -= b * self.means[j];
        }
        LinearModelDraw { coefficients: coef, link: self.link }
    }
}

/// One posterior draw after `sweeps` Gibbs updates started at zero.
pub fn linear_draw<T: Real, R: Rng + ?Sized>(
    x: &Covariates<T>,
    response: &[bool],
    rng: &mut R,
    prior_scale: f64,
    link: Link,
    sweeps: usize,
) -> LinearModelDraw {
    let mut s = LinearSampler::new(x, link, prior_scale, 0.0);
    s.set_training((0..x.n()).collect(), response.to_vec());
    for _ in 0..sweeps {
        s.step(rng);
    }
    s.current_draw()
}
