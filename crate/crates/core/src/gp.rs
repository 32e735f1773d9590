//! Gaussian-process output head over the last hidden layer's features, and
//! the gate-oxide-breakdown lifetime model it emulates: characteristic life
//! `eta`, Weibull survival curve, and delta-method confidence bands.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum GpError {
    #[error("need at least 3 training points, got {0}")]
    TooFewPoints(usize),

    #[error("feature dimension mismatch: trained on {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("covariance stayed non-positive-definite even at nugget {nugget}")]
    NotPositiveDefinite { nugget: f64 },

    #[error("lifetime input `{name}` = {value} violates {constraint}")]
    BadLifetimeInput {
        name: &'static str,
        value: f64,
        constraint: &'static str,
    },

    #[error("confidence level must lie in (0,1), got {0}")]
    BadLevel(f64),

    #[error("eta variance must be nonnegative, got {0}")]
    NegativeVariance(f64),

    #[error("gp file: {0}")]
    Format(String),
}

/// Fitted squared-exponential GP on centered responses and standardized
/// features.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    pub lengthscale: f64,
    pub signal_var: f64,
    pub nugget: f64,
    /// Standardized training features, one row per observation.
    pub train_features: DMatrix<f64>,
    /// Per-dimension shift applied to raw features before the kernel.
    pub feature_means: DVector<f64>,
    /// Per-dimension scale applied to raw features before the kernel.
    pub feature_scales: DVector<f64>,
    /// Mean subtracted from the responses before fitting.
    pub y_mean: f64,
    /// Centered training responses (kept for persistence).
    pub y_centered: DVector<f64>,
    /// Lower-triangular Cholesky factor of `K + nugget*I`.
    pub factor: DMatrix<f64>,
    /// `(K + nugget*I)^-1 (y - mean)`.
    pub alpha: DVector<f64>,
}

fn sq_dist<R1, R2>(
    a: nalgebra::MatrixView<f64, nalgebra::U1, nalgebra::Dyn, R1, R2>,
    b: nalgebra::MatrixView<f64, nalgebra::U1, nalgebra::Dyn, R1, R2>,
) -> f64
where
    R1: nalgebra::Dim,
    R2: nalgebra::Dim,
{
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kernel_matrix(z: &DMatrix<f64>, lengthscale: f64, signal_var: f64) -> DMatrix<f64> {
    let n = z.nrows();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = signal_var;
        for j in 0..i {
            let d2 = sq_dist(z.row(i), z.row(j));
            let v = signal_var * (-d2 / (2.0 * lengthscale * lengthscale)).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

fn try_factor(
    z: &DMatrix<f64>,
    y: &DVector<f64>,
    lengthscale: f64,
    signal_var: f64,
    nugget: f64,
) -> Option<(DMatrix<f64>, DVector<f64>, f64)> {
    let n = z.nrows();
    let mut k = kernel_matrix(z, lengthscale, signal_var);
    for i in 0..n {
        k[(i, i)] += nugget;
    }
    let chol = k.cholesky()?;
    let alpha = chol.solve(y);
    let logdet: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
    let lml = -0.5 * y.dot(&alpha)
        - 0.5 * logdet
        - 0.5 * n as f64 * (std::f64::consts::TAU).ln();
    Some((chol.l(), alpha, lml))
}

/// Fits the GP head: squared-exponential kernel, hyperparameters picked by
/// log marginal likelihood over a 20x20 log-grid (lengthscale scaled by the
/// median pairwise feature distance, signal variance by the response
/// variance), nugget fixed at `1e-6 * var(y)` and escalated tenfold on
/// factorization failure up to `1e-2 * var(y)`.
pub fn fit_gp_head(z_raw: &DMatrix<f64>, y: &DVector<f64>) -> Result<GpPosterior, GpError> {
    let n = z_raw.nrows();
    if n < 3 {
        return Err(GpError::TooFewPoints(n));
    }
    assert_eq!(y.len(), n, "feature/response row mismatch");

    // Standardize feature dimensions so the shared lengthscale is
    // meaningful on anisotropic activation scales.
    let q = z_raw.ncols();
    let feature_means = DVector::from_iterator(
        q,
        z_raw.column_iter().map(|c| c.sum() / n as f64),
    );
    let feature_scales = DVector::from_iterator(
        q,
        z_raw.column_iter().enumerate().map(|(j, c)| {
            let var = c.iter().map(|v| (v - feature_means[j]).powi(2)).sum::<f64>() / n as f64;
            let sd = var.sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        }),
    );
    let z = DMatrix::from_fn(n, q, |i, j| {
        (z_raw[(i, j)] - feature_means[j]) / feature_scales[j]
    });
    let z = &z;

    let y_mean = y.sum() / n as f64;
    let yc = y.map(|v| v - y_mean);
    let var_y = yc.norm_squared() / n as f64;
    let var_scale = if var_y > 1e-300 { var_y } else { 1e-12 };

    // Median pairwise distance on a bounded subsample keeps this O(1)-ish.
    let step = (n / 64).max(1);
    let mut dists: Vec<f64> = Vec::new();
    for i in (0..n).step_by(step) {
        for j in (0..i).step_by(step) {
            let d2 = sq_dist(z.row(i), z.row(j));
            if d2 > 0.0 {
                dists.push(d2.sqrt());
            }
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_dist = if dists.is_empty() {
        1.0
    } else {
        dists[dists.len() / 2]
    };

    let grid = 20usize;
    let log_range = |lo: f64, hi: f64, i: usize| -> f64 {
        10f64.powf(lo + (hi - lo) * i as f64 / (grid - 1) as f64)
    };

    let mut nugget = 1e-6 * var_scale;
    let nugget_cap = 1e-2 * var_scale;
    loop {
        let mut best: Option<(f64, f64, f64)> = None; // (lml, lengthscale, signal_var)
        for i in 0..grid {
            let lengthscale = median_dist * log_range(-1.5, 1.5, i);
            for j in 0..grid {
                let signal_var = var_scale * log_range(-2.0, 2.0, j);
                if let Some((_, _, lml)) = try_factor(z, &yc, lengthscale, signal_var, nugget) {
                    let better = match best {
                        None => true,
                        Some((b, _, _)) => lml > b,
                    };
                    if better {
                        best = Some((lml, lengthscale, signal_var));
                    }
                }
            }
        }
        if let Some((_, lengthscale, signal_var)) = best {
            let (factor, alpha, _) =
                try_factor(z, &yc, lengthscale, signal_var, nugget).expect("refit at winner");
            return Ok(GpPosterior {
                lengthscale,
                signal_var,
                nugget,
                train_features: z.clone(),
                feature_means,
                feature_scales,
                y_mean,
                y_centered: yc,
                factor,
                alpha,
            });
        }
        nugget *= 10.0;
        if nugget > nugget_cap {
            return Err(GpError::NotPositiveDefinite { nugget });
        }
        log::warn!("covariance factorization failed; escalating nugget to {nugget}");
    }
}

impl GpPosterior {
    /// Predictive mean and variance at the query features. The variance is
    /// the full predictive variance `signal_var + nugget - |L^-1 k*|^2`,
    /// clamped at zero.
    pub fn predict(&self, z_raw: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>), GpError> {
        if z_raw.ncols() != self.train_features.ncols() {
            return Err(GpError::DimensionMismatch {
                expected: self.train_features.ncols(),
                got: z_raw.ncols(),
            });
        }
        let z_star = DMatrix::from_fn(z_raw.nrows(), z_raw.ncols(), |i, j| {
            (z_raw[(i, j)] - self.feature_means[j]) / self.feature_scales[j]
        });
        let z_star = &z_star;
        let n = self.train_features.nrows();
        let m = z_star.nrows();
        let mut mean = DVector::zeros(m);
        let mut var = DVector::zeros(m);
        let two_l2 = 2.0 * self.lengthscale * self.lengthscale;
        for s in 0..m {
            let mut kstar = DVector::zeros(n);
            for i in 0..n {
                let d2 = sq_dist(self.train_features.row(i), z_star.row(s));
                kstar[i] = self.signal_var * (-d2 / two_l2).exp();
            }
            mean[s] = kstar.dot(&self.alpha) + self.y_mean;
            let v = self
                .factor
                .solve_lower_triangular(&kstar)
                .expect("factor is triangular with positive diagonal");
            var[s] = (self.signal_var + self.nugget - v.norm_squared()).max(0.0);
        }
        Ok((mean, var))
    }
}

// ---------------------------------------------------------------------------
// Lifetime model
// ---------------------------------------------------------------------------

/// Inputs of the gate-oxide breakdown lifetime model.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct LifetimeInputs {
    pub a_feol: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub voltage: f64,
    pub temperature: f64,
    pub width: f64,
    pub length: f64,
    pub stress_prob: f64,
    pub beta: f64,
}

impl LifetimeInputs {
    pub fn validate(&self) -> Result<(), GpError> {
        let positive: [(&'static str, f64); 6] = [
            ("a_feol", self.a_feol),
            ("voltage", self.voltage),
            ("temperature", self.temperature),
            ("width", self.width),
            ("length", self.length),
            ("beta", self.beta),
        ];
        for (name, value) in positive {
            if !(value > 0.0) || !value.is_finite() {
                return Err(GpError::BadLifetimeInput {
                    name,
                    value,
                    constraint: "> 0",
                });
            }
        }
        if !(self.stress_prob > 0.0 && self.stress_prob <= 1.0) {
            return Err(GpError::BadLifetimeInput {
                name: "stress_prob",
                value: self.stress_prob,
                constraint: "in (0, 1]",
            });
        }
        Ok(())
    }
}

/// Characteristic life: the time by which about 63% of devices fail.
///
/// `eta = A_FEOL (WL)^(-1/beta) e^(-1/beta) V^(a+bT) exp((cT+d)/T^2) / s`
pub fn lifetime_eta(inp: &LifetimeInputs) -> Result<f64, GpError> {
    inp.validate()?;
    let inv_beta = 1.0 / inp.beta;
    let eta = inp.a_feol
        * (inp.width * inp.length).powf(-inv_beta)
        * (-inv_beta).exp()
        * inp.voltage.powf(inp.a + inp.b * inp.temperature)
        * ((inp.c * inp.temperature + inp.d) / (inp.temperature * inp.temperature)).exp()
        / inp.stress_prob;
    Ok(eta)
}

/// Weibull survival probability `S(t) = exp(-(t/eta)^beta)`.
pub fn survival(t: f64, eta: f64, beta: f64) -> f64 {
    (-(t / eta).powf(beta)).exp()
}

/// Pointwise delta-method confidence band around the plug-in survival
/// curve: `Var(S) ~ (dS/deta)^2 * eta_var`, clipped into [0, 1].
#[derive(Debug, Clone)]
pub struct SurvivalBand {
    pub t: Vec<f64>,
    pub survival: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

pub fn delta_band(
    eta_hat: f64,
    eta_var: f64,
    beta: f64,
    t_grid: &[f64],
    level: f64,
) -> Result<SurvivalBand, GpError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(GpError::BadLevel(level));
    }
    if eta_var < 0.0 {
        return Err(GpError::NegativeVariance(eta_var));
    }
    let z = Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(1.0 - (1.0 - level) / 2.0);
    let mut band = SurvivalBand {
        t: t_grid.to_vec(),
        survival: Vec::with_capacity(t_grid.len()),
        lower: Vec::with_capacity(t_grid.len()),
        upper: Vec::with_capacity(t_grid.len()),
    };
    for &t in t_grid {
        let s = survival(t, eta_hat, beta);
        let dsdeta = s * beta * t.powf(beta) * eta_hat.powf(-beta - 1.0);
        let sd = (dsdeta * dsdeta * eta_var).sqrt();
        band.survival.push(s);
        band.lower.push((s - z * sd).clamp(0.0, 1.0));
        band.upper.push((s + z * sd).clamp(0.0, 1.0));
    }
    Ok(band)
}

// ---------------------------------------------------------------------------
// Persistence (same versioned-text convention as the model file).
// ---------------------------------------------------------------------------

impl GpPosterior {
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let _ = write!(
            out,
            "{{\"format_version\":\"1\",\"lengthscale\":{:.16e},\"signal_var\":{:.16e},\"nugget\":{:.16e},\"y_mean\":{:.16e}",
            self.lengthscale, self.signal_var, self.nugget, self.y_mean
        );
        let z = &self.train_features;
        let _ = write!(out, ",\"features\":{{\"rows\":{},\"cols\":{},\"data\":[", z.nrows(), z.ncols());
        let mut first = true;
        for i in 0..z.nrows() {
            for j in 0..z.ncols() {
                if !first {
                    out.push(',');
                }
                let _ = write!(out, "{:.16e}", z[(i, j)]);
                first = false;
            }
        }
        out.push_str("]},\"feature_means\":[");
        for (i, v) in self.feature_means.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v:.16e}");
        }
        out.push_str("],\"feature_scales\":[");
        for (i, v) in self.feature_scales.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v:.16e}");
        }
        out.push_str("],\"y_centered\":[");
        for (i, v) in self.y_centered.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v:.16e}");
        }
        out.push_str("]}");
        out
    }

    /// Rebuilds the factorization from the stored hyperparameters and data.
    pub fn deserialize(text: &str) -> Result<Self, GpError> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct MatrixFile {
            rows: usize,
            cols: usize,
            data: Vec<f64>,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct GpFile {
            format_version: String,
            lengthscale: f64,
            signal_var: f64,
            nugget: f64,
            y_mean: f64,
            features: MatrixFile,
            feature_means: Vec<f64>,
            feature_scales: Vec<f64>,
            y_centered: Vec<f64>,
        }
        let file: GpFile =
            serde_json::from_str(text).map_err(|e| GpError::Format(e.to_string()))?;
        if file.format_version != "1" {
            return Err(GpError::Format(format!(
                "unknown format_version `{}`",
                file.format_version
            )));
        }
        if file.features.data.len() != file.features.rows * file.features.cols
            || file.y_centered.len() != file.features.rows
            || file.feature_means.len() != file.features.cols
            || file.feature_scales.len() != file.features.cols
        {
            return Err(GpError::Format("shape mismatch".into()));
        }
        let z = DMatrix::from_row_slice(file.features.rows, file.features.cols, &file.features.data);
        let yc = DVector::from_vec(file.y_centered);
        let (factor, alpha, _) = try_factor(&z, &yc, file.lengthscale, file.signal_var, file.nugget)
            .ok_or(GpError::NotPositiveDefinite {
                nugget: file.nugget,
            })?;
        Ok(GpPosterior {
            lengthscale: file.lengthscale,
            signal_var: file.signal_var,
            nugget: file.nugget,
            train_features: z,
            feature_means: DVector::from_vec(file.feature_means),
            feature_scales: DVector::from_vec(file.feature_scales),
            y_mean: file.y_mean,
            y_centered: yc,
            factor,
            alpha,
        })
    }
}
