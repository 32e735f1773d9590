//! Closed-form conditional-maximization updates for the penalty weights.
//!
//! Each spline layer is viewed as a Gaussian regression of its own outputs
//! on its basis features, with the coefficient rows treated as random
//! effects whose prior precision is the (ridged) difference penalty. One
//! tuning cycle computes posterior moments per neuron, updates the two
//! variance components and their ratio `lambda = sigma^2 / xi^2` in closed
//! form, refits the linear layers, and runs a short gradient refinement at
//! the new penalty weights.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::basis::{BasisError, DifferenceOp};
use crate::data::Dataset;
use crate::linalg::{self, LinalgError};
use crate::model::{DpsModel, ModelError, OutputKind};
use crate::train::{self, LossKind, TrainError, TrainOptions};

/// Ridge added to the rank-deficient penalty so the implied prior is proper.
pub const PRIOR_RIDGE: f64 = 1e-8;

/// Cap applied to `lambda` when the random-effect variance degenerates.
pub const LAMBDA_CAP: f64 = 1e12;

const LAMBDA_FLOOR: f64 = 1e-10;

#[derive(Error, Debug)]
pub enum EcmError {
    #[error("{0} must be strictly positive, got {1}")]
    NonPositiveVariance(&'static str, f64),

    #[error(transparent)]
    Linalg(#[from] LinalgError),

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Train(#[from] TrainError),

    #[error(transparent)]
    Basis(#[from] BasisError),
}

/// Posterior state of one spline layer after a tuning cycle.
///
/// The design matrix is shared by every neuron in the layer, so the
/// posterior covariance is common; only the means differ per neuron.
#[derive(Debug, Clone)]
pub struct LayerPosterior {
    pub sigma2: f64,
    pub xi2: f64,
    pub lambda: f64,
    pub means: Vec<DVector<f64>>,
    pub covariance: DMatrix<f64>,
}

/// Posterior state across all spline layers.
#[derive(Debug, Clone)]
pub struct EcmState {
    pub layers: Vec<LayerPosterior>,
}

/// Per-cycle record: hyperparameters, the expected penalized log-likelihood
/// of each layer evaluated before/after each conditional update, and the
/// training objective after the refinement step.
#[derive(Debug, Clone)]
pub struct CycleRecord {
    pub cycle: usize,
    pub lambdas: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub xi2: Vec<f64>,
    /// `(before, after xi2 update, after sigma2 update)` per spline layer.
    pub loglik_steps: Vec<(f64, f64, f64)>,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct EcmTrajectory {
    pub cycles: Vec<CycleRecord>,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct EcmOptions {
    pub max_cycles: usize,
    /// Relative change in every layer's lambda below which the loop stops.
    /// A value of 0 disables early stopping so paired runs share budgets.
    pub tol: f64,
    pub refine_epochs: usize,
    pub refine_learning_rate: f64,
    pub loss_kind: LossKind,
    /// Pin every lambda to a fixed value instead of updating it. Pinning to
    /// 0 yields the unpenalized baseline trained on the identical budget.
    pub pinned_lambda: Option<f64>,
}

impl Default for EcmOptions {
    fn default() -> Self {
        EcmOptions {
            max_cycles: 30,
            tol: 1e-4,
            refine_epochs: 50,
            refine_learning_rate: 1e-2,
            loss_kind: LossKind::Squared,
            pinned_lambda: None,
        }
    }
}

/// Ordinary least squares of the first-layer pseudo-responses on the
/// standardized inputs; an intercept column is prepended. Rank-deficient
/// designs fall back to the minimum-norm solution with a warning.
pub fn first_layer_ols(x: &DMatrix<f64>, y1: &DMatrix<f64>) -> Result<DMatrix<f64>, EcmError> {
    let n = x.nrows();
    let mut design = DMatrix::zeros(n, x.ncols() + 1);
    for i in 0..n {
        design[(i, 0)] = 1.0;
        for j in 0..x.ncols() {
            design[(i, j + 1)] = x[(i, j)];
        }
    }
    let coef = linalg::lstsq(&design, y1)?;
    Ok(coef.transpose())
}

/// Head weights by multivariate-response least squares of the targets on the
/// last hidden activations (column per neuron, intercept prepended).
pub fn last_layer_fit(h: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>, EcmError> {
    first_layer_ols(h, y)
}

/// `S + eps*I`: the proper-prior version of the difference penalty.
pub fn ridged_penalty(op: &DifferenceOp) -> DMatrix<f64> {
    let mut s = op.penalty.clone();
    for i in 0..s.nrows() {
        s[(i, i)] += PRIOR_RIDGE;
    }
    s
}

/// Posterior mean and covariance of one neuron's coefficients:
/// `mu = (B'B + lambda*S)^-1 B'y`, `gamma = sigma2 * (B'B + lambda*S)^-1`
/// with `lambda = sigma2/xi2`.
pub fn posterior_moments(
    b: &DMatrix<f64>,
    y: &DVector<f64>,
    sigma2: f64,
    xi2: f64,
    s_ridged: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>), EcmError> {
    let ys = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
    let (means, gamma) = layer_posterior(b, &ys, sigma2, xi2, s_ridged)?;
    Ok((means.into_iter().next().unwrap(), gamma))
}

/// Shared-design posterior for all neurons of a layer, one factorization.
pub fn layer_posterior(
    b: &DMatrix<f64>,
    ys: &DMatrix<f64>,
    sigma2: f64,
    xi2: f64,
    s_ridged: &DMatrix<f64>,
) -> Result<(Vec<DVector<f64>>, DMatrix<f64>), EcmError> {
    if !(sigma2 > 0.0) {
        return Err(EcmError::NonPositiveVariance("sigma2", sigma2));
    }
    if !(xi2 > 0.0) {
        return Err(EcmError::NonPositiveVariance("xi2", xi2));
    }
    let lambda = sigma2 / xi2;
    let mut a = b.transpose() * b;
    a += s_ridged * lambda;
    let rhs = b.transpose() * ys;
    let (mu, inv) = linalg::solve_spd_with_inverse(&a, &rhs)?;
    let gamma = inv * sigma2;
    let means = (0..mu.ncols())
        .map(|j| DVector::from_column_slice(mu.column(j).as_slice()))
        .collect();
    Ok((means, gamma))
}

/// Random-effect variance update: mean of `Tr(S*Gamma) + mu'Smu` over the
/// layer's neurons, normalized by the coefficient length.
pub fn update_xi2(means: &[DVector<f64>], gamma: &DMatrix<f64>, s_ridged: &DMatrix<f64>) -> f64 {
    let p = means.len();
    let n_basis = gamma.nrows();
    let trace = linalg::trace_of_product(s_ridged, gamma);
    let quad: f64 = means.iter().map(|mu| linalg::quadratic_form(s_ridged, mu)).sum();
    (p as f64 * trace + quad) / (p * n_basis) as f64
}

/// Residual variance update: expected squared residual of each neuron's
/// pseudo-response under its coefficient posterior.
pub fn update_sigma2(
    b: &DMatrix<f64>,
    ys: &DMatrix<f64>,
    means: &[DVector<f64>],
    gamma: &DMatrix<f64>,
) -> f64 {
    let n = b.nrows();
    let p = means.len();
    let btb = b.transpose() * b;
    let spread = linalg::trace_of_product(&btb, gamma);
    let mut rss = 0.0;
    for (j, mu) in means.iter().enumerate() {
        let fitted = b * mu;
        for i in 0..n {
            let r = ys[(i, j)] - fitted[i];
            rss += r * r;
        }
    }
    (rss + p as f64 * spread) / (n * p) as f64
}

/// `lambda = sigma2 / xi2`, capped when the random-effect variance
/// degenerates to zero.
pub fn update_lambda(sigma2: f64, xi2: f64) -> f64 {
    if xi2 <= 0.0 {
        log::warn!("xi2 = {xi2} is degenerate; capping lambda at {LAMBDA_CAP}");
        return LAMBDA_CAP;
    }
    let lambda = sigma2 / xi2;
    if lambda > LAMBDA_CAP {
        log::warn!("lambda {lambda} exceeds cap; clamping to {LAMBDA_CAP}");
        LAMBDA_CAP
    } else {
        lambda
    }
}

/// Expected complete-data log-likelihood of one layer at fixed posterior
/// moments; the quantity each conditional update must not decrease.
fn layer_loglik(
    sigma2: f64,
    xi2: f64,
    b: &DMatrix<f64>,
    ys: &DMatrix<f64>,
    means: &[DVector<f64>],
    gamma: &DMatrix<f64>,
    s_ridged: &DMatrix<f64>,
    s_logdet: f64,
) -> f64 {
    let n = b.nrows() as f64;
    let p = means.len() as f64;
    let n_basis = s_ridged.nrows() as f64;
    let btb = b.transpose() * b;
    let spread = linalg::trace_of_product(&btb, gamma);
    let mut rss = 0.0;
    for (j, mu) in means.iter().enumerate() {
        let fitted = b * mu;
        for i in 0..b.nrows() {
            let r = ys[(i, j)] - fitted[i];
            rss += r * r;
        }
    }
    let rough_trace = linalg::trace_of_product(s_ridged, gamma);
    let rough_quad: f64 = means.iter().map(|mu| linalg::quadratic_form(s_ridged, mu)).sum();

    let two_pi = std::f64::consts::TAU;
    let fit_part = -0.5 * p * n * (two_pi * sigma2).ln()
        - (rss + p * spread) / (2.0 * sigma2);
    let prior_part = -0.5 * p * n_basis * (two_pi * xi2).ln() + 0.5 * p * s_logdet
        - (p * rough_trace + rough_quad) / (2.0 * xi2);
    fit_part + prior_part
}

fn spd_logdet(m: &DMatrix<f64>) -> f64 {
    match m.clone().cholesky() {
        Some(chol) => 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>(),
        None => 0.0,
    }
}

/// Pseudo-responses for one spline layer: the layer's current outputs moved
/// toward the data by the minimum-norm backprojection of the residual of a
/// linear read-out fitted on those outputs. For the layer feeding the head
/// this is exactly the head residual pulled back through the head weights;
/// treating every layer through its own read-out keeps the latent noise on
/// the scale of the data noise, which is what identifies `sigma2`.
fn layer_targets(h: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>, EcmError> {
    let readout = last_layer_fit(h, y)?; // p_L x (p+1)
    let n = h.nrows();
    let p = h.ncols();
    let mut fitted = DMatrix::zeros(n, y.ncols());
    for i in 0..n {
        for c in 0..y.ncols() {
            let mut acc = readout[(c, 0)];
            for j in 0..p {
                acc += readout[(c, j + 1)] * h[(i, j)];
            }
            fitted[(i, c)] = acc;
        }
    }
    let residual = y - fitted;
    let coef = readout.columns(1, p).transpose().into_owned(); // p x p_L
    let norm = coef.norm_squared();
    if norm < 1e-12 {
        return Ok(h.clone());
    }
    let pinv = coef
        .clone()
        .pseudo_inverse(1e-12)
        .unwrap_or_else(|_| coef.transpose() / norm);
    Ok(h + residual * pinv)
}

/// Layer-wise tuning loop. Mutates the model in place (spline weights,
/// linear layers, and penalty weights) and reports the posterior state plus
/// the per-cycle trajectory. Stops when every layer's relative lambda change
/// falls below `tol`, or after `max_cycles` (with a warning and
/// `converged = false`).
pub fn ecm_tune(
    model: &mut DpsModel,
    data: &Dataset,
    opts: &EcmOptions,
) -> Result<(EcmState, EcmTrajectory), EcmError> {
    let num_spline = model.spec.num_spline_layers();
    let y_targets = data.response.as_target_matrix();

    let ops: Vec<DifferenceOp> = model
        .spec
        .knots_per_layer
        .iter()
        .map(|&n| DifferenceOp::new(n, model.spec.penalty_order))
        .collect::<Result<_, _>>()?;
    let ridged: Vec<DMatrix<f64>> = ops.iter().map(ridged_penalty).collect();
    let logdets: Vec<f64> = ridged.iter().map(spd_logdet).collect();

    if let Some(pin) = opts.pinned_lambda {
        for l in model.lambdas.iter_mut() {
            *l = pin;
        }
    }

    let mut state = EcmState {
        layers: (0..num_spline)
            .map(|s| LayerPosterior {
                sigma2: 1.0,
                xi2: 1.0,
                lambda: model.lambdas[s],
                means: Vec::new(),
                covariance: DMatrix::zeros(0, 0),
            })
            .collect(),
    };

    let refine_opts = TrainOptions {
        learning_rate: opts.refine_learning_rate,
        max_epochs: opts.refine_epochs.max(1),
        rel_tol: 1e-14,
        momentum: 0.9,
        loss_kind: opts.loss_kind,
    };

    let mut cycles = Vec::new();
    let mut converged = false;
    let mut prev_objective = f64::INFINITY;

    for cycle in 0..opts.max_cycles {
        let (_, cache) = model.forward(&data.features)?;
        let prev_lambdas: Vec<f64> = model.lambdas.clone();
        let mut loglik_steps = Vec::with_capacity(num_spline);

        for s in 0..num_spline {
            let b = &cache.features[s];
            if opts.pinned_lambda == Some(0.0) {
                // Unpenalized baseline: smoothing at zero penalty is the
                // identity on layer outputs, so only the linear refits act.
                loglik_steps.push((0.0, 0.0, 0.0));
                continue;
            }
            let layer = &mut state.layers[s];

            // Variance components come from smoothing the observed response
            // on this layer's basis design: that block carries real noise,
            // which keeps sigma2 identified at any layer width.
            let (var_means, var_gamma) =
                layer_posterior(b, &y_targets, layer.sigma2, layer.xi2, &ridged[s])?;
            let q_before = layer_loglik(
                layer.sigma2, layer.xi2, b, &y_targets, &var_means, &var_gamma, &ridged[s],
                logdets[s],
            );
            let xi2_new = update_xi2(&var_means, &var_gamma, &ridged[s]).max(1e-300);
            let q_after_xi = layer_loglik(
                layer.sigma2, xi2_new, b, &y_targets, &var_means, &var_gamma, &ridged[s],
                logdets[s],
            );
            let sigma2_new = update_sigma2(b, &y_targets, &var_means, &var_gamma).max(1e-300);
            let q_after_sigma = layer_loglik(
                sigma2_new, xi2_new, b, &y_targets, &var_means, &var_gamma, &ridged[s],
                logdets[s],
            );
            loglik_steps.push((q_before, q_after_xi, q_after_sigma));

            layer.xi2 = xi2_new;
            layer.sigma2 = sigma2_new;
            if opts.pinned_lambda.is_none() {
                layer.lambda = update_lambda(sigma2_new, xi2_new).max(LAMBDA_FLOOR);
                model.lambdas[s] = layer.lambda;
            }

            // Conditional maximization over the coefficients: smooth the
            // data-bearing targets at the updated penalty and replace each
            // neuron's row with its posterior mean.
            let targets = layer_targets(&cache.activations[s + 1], &y_targets)?;
            let coef_sigma2 = match opts.pinned_lambda {
                Some(pin) => pin.max(LAMBDA_FLOOR) * layer.xi2,
                None => layer.sigma2,
            };
            let (means, gamma) = layer_posterior(b, &targets, coef_sigma2, layer.xi2, &ridged[s])?;
            for (j, mu) in means.iter().enumerate() {
                for k in 0..mu.len() {
                    model.spline_weights[s][(j, k)] = mu[k];
                }
            }
            layer.means = means;
            layer.covariance = gamma;
        }

        // Linear-layer refits at the current spline weights. The first-layer
        // pseudo-responses are taken on the linear-predictor scale, which
        // reproduces the current weights exactly on full-rank designs.
        let pre1 = &cache.x_design * model.first_layer_weights.transpose();
        let xs = cache
            .x_design
            .columns(1, model.spec.input_dim)
            .into_owned();
        model.first_layer_weights = first_layer_ols(&xs, &pre1)?;

        if matches!(model.spec.output_kind, OutputKind::Identity) {
            let (_, fresh) = model.forward(&data.features)?;
            let h_last = fresh.activations.last().unwrap();
            model.last_layer_weights = last_layer_fit(h_last, &y_targets)?;
        }

        train::fit(model, data, &refine_opts)?;
        let objective = train::penalized_loss(model, data, opts.loss_kind)?;

        cycles.push(CycleRecord {
            cycle,
            lambdas: model.lambdas.clone(),
            sigma2: state.layers.iter().map(|l| l.sigma2).collect(),
            xi2: state.layers.iter().map(|l| l.xi2).collect(),
            loglik_steps,
            objective,
        });

        if opts.tol > 0.0 {
            let done = if num_spline == 0 || opts.pinned_lambda.is_some() {
                let rel = (prev_objective - objective).abs() / prev_objective.abs().max(1e-300);
                cycle > 0 && rel < opts.tol
            } else {
                model
                    .lambdas
                    .iter()
                    .zip(prev_lambdas.iter())
                    .all(|(new, old)| (new - old).abs() / old.abs().max(1e-300) < opts.tol)
            };
            if done {
                converged = true;
                break;
            }
        }
        prev_objective = objective;
    }

    if !converged && opts.tol > 0.0 {
        log::warn!(
            "tuning did not converge within {} cycles (last lambdas {:?})",
            opts.max_cycles,
            model.lambdas
        );
    }
    Ok((state, EcmTrajectory { cycles, converged }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetworkSpec;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng) -> f64 {
        // Box-Muller keeps the dev-dependency surface small.
        let u1: f64 = rng.gen::<f64>().max(1e-12);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    #[test]
    fn ols_recovers_exact_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(15, 2, |_, _| rng.gen::<f64>());
        let truth = DMatrix::from_row_slice(1, 3, &[0.5, -2.0, 3.0]);
        let mut y = DMatrix::zeros(15, 1);
        for i in 0..15 {
            y[(i, 0)] = truth[(0, 0)] + truth[(0, 1)] * x[(i, 0)] + truth[(0, 2)] * x[(i, 1)];
        }
        let w = first_layer_ols(&x, &y).unwrap();
        for (got, want) in w.iter().zip(truth.iter()) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-10);
        }
    }

    #[test]
    fn ols_on_orthonormal_design_is_projection() {
        // Identity design (with zero intercept contribution by symmetry).
        let h = DMatrix::<f64>::identity(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = DMatrix::from_fn(4, 1, |_, _| randn(&mut rng));
        let w = last_layer_fit(&h, &y).unwrap();
        // With an intercept the fit is exact: residuals vanish.
        let mut design = DMatrix::zeros(4, 5);
        for i in 0..4 {
            design[(i, 0)] = 1.0;
            for j in 0..4 {
                design[(i, j + 1)] = h[(i, j)];
            }
        }
        let resid = &design * w.transpose() - &y;
        assert!(resid.norm() <= 1e-9);
    }

    #[test]
    fn ols_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DMatrix::from_fn(20, 3, |_, _| randn(&mut rng));
        let y = DMatrix::from_fn(20, 2, |_, _| randn(&mut rng));
        let w = first_layer_ols(&x, &y).unwrap();

        let mut design = DMatrix::zeros(20, 4);
        for i in 0..20 {
            design[(i, 0)] = 1.0;
            for j in 0..3 {
                design[(i, j + 1)] = x[(i, j)];
            }
        }
        let normal = (design.transpose() * &design)
            .lu()
            .solve(&(design.transpose() * &y))
            .unwrap()
            .transpose();
        for (got, want) in w.iter().zip(normal.iter()) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-10);
        }
    }

    #[test]
    fn nearly_flat_prior_recovers_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = DMatrix::from_fn(25, 5, |_, _| rng.gen::<f64>());
        let y = DVector::from_fn(25, |_, _| randn(&mut rng));
        let op = DifferenceOp::new(5, 2).unwrap();
        let s = ridged_penalty(&op);
        let (mu, _) = posterior_moments(&b, &y, 1e-10, 1e10, &s).unwrap();
        let ols = (b.transpose() * &b)
            .lu()
            .solve(&(b.transpose() * &y))
            .unwrap();
        for (got, want) in mu.iter().zip(ols.iter()) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-6);
        }
    }

    #[test]
    fn huge_lambda_shrinks_to_linear_trend() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let kv = crate::basis::KnotVector::uniform(8, 3, (0.0, 1.0)).unwrap();
        let xs: Vec<f64> = (0..40).map(|_| rng.gen()).collect();
        let b = kv.eval_matrix(&xs);
        let y = DVector::from_fn(40, |i, _| (6.0 * xs[i]).sin() + 0.1 * randn(&mut rng));
        let op = DifferenceOp::new(8, 2).unwrap();
        let s = ridged_penalty(&op);
        let (mu, _) = posterior_moments(&b, &y, 1e6, 1e-6, &s).unwrap();
        // Null space of the second-difference penalty: linear in index.
        let design = DMatrix::from_fn(8, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let coef = (design.transpose() * &design)
            .lu()
            .solve(&(design.transpose() * &mu))
            .unwrap();
        let projected = design * coef;
        let rel = (&mu - &projected).norm() / mu.norm().max(1e-12);
        assert!(rel <= 1e-3, "relative deviation from linear trend {rel}");
    }

    /// Conjugate gradients on the penalized normal equations: an
    /// independent route to the quadratic-program minimizer.
    fn cg_minimizer(
        b: &DMatrix<f64>,
        y: &DVector<f64>,
        lambda: f64,
        s: &DMatrix<f64>,
    ) -> DVector<f64> {
        let apply = |v: &DVector<f64>| -> DVector<f64> {
            b.transpose() * (b * v) + s * v * lambda
        };
        let rhs = b.transpose() * y;
        let mut x = DVector::zeros(rhs.len());
        let mut r = rhs.clone();
        let mut p = r.clone();
        let mut rs = r.dot(&r);
        for _ in 0..10_000 {
            let ap = apply(&p);
            let alpha = rs / p.dot(&ap);
            x += &p * alpha;
            r -= ap * alpha;
            let rs_new = r.dot(&r);
            if rs_new.sqrt() < 1e-14 {
                break;
            }
            p = &r + &p * (rs_new / rs);
            rs = rs_new;
        }
        x
    }

    #[test]
    fn posterior_mean_matches_quadratic_solver() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            let b = DMatrix::from_fn(30, 8, |_, _| rng.gen::<f64>());
            let y = DVector::from_fn(30, |_, _| randn(&mut rng));
            let op = DifferenceOp::new(8, 2).unwrap();
            let s = ridged_penalty(&op);
            let sigma2 = 0.5;
            let xi2 = 0.8;
            let (mu, gamma) = posterior_moments(&b, &y, sigma2, xi2, &s).unwrap();
            let oracle = cg_minimizer(&b, &y, sigma2 / xi2, &s);
            for (got, want) in mu.iter().zip(oracle.iter()) {
                assert_abs_diff_eq!(got, want, epsilon = 1e-8);
            }
            // Covariance is symmetric positive definite.
            for i in 0..8 {
                for j in 0..8 {
                    assert_abs_diff_eq!(gamma[(i, j)], gamma[(j, i)], epsilon = 1e-12);
                }
            }
            assert!(gamma.clone().cholesky().is_some());
        }
    }

    #[test]
    fn xi2_update_arithmetic_case() {
        // p = 1, S = I (2x2), Gamma = I, mu = (1, 1):
        // (Tr(S Gamma) + mu'S mu) / (p * N) = (2 + 2) / 2 = 2.
        let s = DMatrix::<f64>::identity(2, 2);
        let gamma = DMatrix::<f64>::identity(2, 2);
        let means = vec![DVector::from_vec(vec![1.0, 1.0])];
        assert_abs_diff_eq!(update_xi2(&means, &gamma, &s), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn xi2_vanishes_with_flat_posterior() {
        let op = DifferenceOp::new(4, 1).unwrap();
        let s = ridged_penalty(&op);
        let gamma = DMatrix::<f64>::identity(4, 4) * 1e-14;
        let means = vec![DVector::zeros(4), DVector::zeros(4)];
        assert!(update_xi2(&means, &gamma, &s) < 1e-13);
    }

    #[test]
    fn xi2_matches_elementwise_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let op = DifferenceOp::new(6, 2).unwrap();
        let s = ridged_penalty(&op);
        let a = DMatrix::from_fn(6, 6, |_, _| randn(&mut rng));
        let gamma = &a * a.transpose() + DMatrix::identity(6, 6);
        let means: Vec<DVector<f64>> = (0..3)
            .map(|_| DVector::from_fn(6, |_, _| randn(&mut rng)))
            .collect();
        let got = update_xi2(&means, &gamma, &s);

        let mut trace = 0.0;
        for i in 0..6 {
            for k in 0..6 {
                trace += s[(i, k)] * gamma[(k, i)];
            }
        }
        let mut quad = 0.0;
        for mu in &means {
            for i in 0..6 {
                for k in 0..6 {
                    quad += mu[i] * s[(i, k)] * mu[k];
                }
            }
        }
        let want = (3.0 * trace + quad) / (3.0 * 6.0);
        assert_abs_diff_eq!(got, want, epsilon = 1e-10);
    }

    #[test]
    fn sigma2_vanishes_at_exact_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let b = DMatrix::from_fn(10, 3, |_, _| rng.gen::<f64>());
        let mu = DVector::from_fn(3, |_, _| randn(&mut rng));
        let y = &b * &mu;
        let ys = DMatrix::from_column_slice(10, 1, y.as_slice());
        let gamma = DMatrix::zeros(3, 3);
        let got = update_sigma2(&b, &ys, &[mu], &gamma);
        assert!(got <= 1e-24);
    }

    #[test]
    fn sigma2_identity_design_arithmetic() {
        let n = 5;
        let b = DMatrix::<f64>::identity(n, n);
        let y = DVector::from_element(n, 1.0);
        let ys = DMatrix::from_column_slice(n, 1, y.as_slice());
        let got = update_sigma2(&b, &ys, &[DVector::zeros(n)], &DMatrix::zeros(n, n));
        assert_abs_diff_eq!(got, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn sigma2_matches_monte_carlo_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 12;
        let k = 4;
        let b = DMatrix::from_fn(n, k, |_, _| rng.gen::<f64>());
        let mu = DVector::from_fn(k, |_, _| randn(&mut rng));
        let a = DMatrix::from_fn(k, k, |_, _| 0.3 * randn(&mut rng));
        let gamma = &a * a.transpose() + DMatrix::identity(k, k) * 0.05;
        let y = DVector::from_fn(n, |_, _| randn(&mut rng));
        let ys = DMatrix::from_column_slice(n, 1, y.as_slice());

        let analytic = update_sigma2(&b, &ys, &[mu.clone()], &gamma) * n as f64;

        let chol = gamma.clone().cholesky().unwrap();
        let l = chol.l();
        let draws = 1_000_000usize;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..draws {
            let z = DVector::from_fn(k, |_, _| randn(&mut rng));
            let omega = &mu + &l * z;
            let r = &y - &b * omega;
            let v = r.norm_squared();
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / draws as f64;
        let var = (sum_sq / draws as f64 - mean * mean).max(0.0);
        let se = (var / draws as f64).sqrt();
        assert!(
            (analytic - mean).abs() <= 3.0 * se,
            "analytic {analytic} vs mc {mean} (se {se})"
        );
    }

    #[test]
    fn lambda_update_cases() {
        assert_abs_diff_eq!(update_lambda(0.5, 0.25), 2.0, epsilon = 0.0);
        assert_abs_diff_eq!(update_lambda(0.7, 0.7), 1.0, epsilon = 0.0);
        assert_eq!(update_lambda(1.0, 0.0), LAMBDA_CAP);
        // Monotone in both arguments.
        assert!(update_lambda(2.0, 1.0) > update_lambda(1.0, 1.0));
        assert!(update_lambda(1.0, 2.0) < update_lambda(1.0, 1.0));
    }

    #[test]
    fn head_fit_zero_residual_in_column_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let h = DMatrix::from_fn(12, 3, |_, _| randn(&mut rng));
        let coef = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let y = &h * &coef;
        let ys = DMatrix::from_column_slice(12, 1, y.as_slice());
        let w = last_layer_fit(&h, &ys).unwrap();
        assert_abs_diff_eq!(w[(0, 0)], 0.0, epsilon = 1e-9);
        for j in 0..3 {
            assert_abs_diff_eq!(w[(0, j + 1)], coef[j], epsilon = 1e-9);
        }
    }

    fn sine_dataset(seed: u64, n: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 1, |_, _| rng.gen::<f64>());
        let truth: Vec<f64> = x
            .column(0)
            .iter()
            .map(|&v| (std::f64::consts::TAU * v).sin())
            .collect();
        let mean = truth.iter().sum::<f64>() / n as f64;
        let var = truth.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = (0.05 * var).sqrt();
        let y = DVector::from_fn(n, |i, _| truth[i] + sd * randn(&mut rng));
        Dataset::regression(x, y).unwrap()
    }

    fn tune_once(seed: u64) -> (DpsModel, EcmState, EcmTrajectory) {
        let data = sine_dataset(seed, 200);
        let spec = NetworkSpec::regression(1, 4, 1, 12, 3, 2, seed);
        let mut model = DpsModel::init(&spec, seed).unwrap();
        model.set_standardization(&data.features);
        let opts = EcmOptions {
            max_cycles: 20,
            tol: 1e-4,
            ..EcmOptions::default()
        };
        let (state, traj) = ecm_tune(&mut model, &data, &opts).unwrap();
        (model, state, traj)
    }

    #[test]
    fn tuning_is_deterministic() {
        let (m1, _, t1) = tune_once(21);
        let (m2, _, t2) = tune_once(21);
        assert_eq!(m1, m2);
        assert_eq!(t1.cycles.len(), t2.cycles.len());
        for (a, b) in t1.cycles.iter().zip(t2.cycles.iter()) {
            assert_eq!(a.lambdas, b.lambdas);
            assert_eq!(a.objective, b.objective);
        }
    }

    #[test]
    fn conditional_updates_never_decrease_layer_loglik() {
        let (_, _, traj) = tune_once(22);
        assert!(!traj.cycles.is_empty());
        for record in &traj.cycles {
            for &(before, after_xi, after_sigma) in &record.loglik_steps {
                let slack = 1e-8 * before.abs().max(1.0);
                assert!(after_xi >= before - slack, "{before} -> {after_xi}");
                assert!(after_sigma >= after_xi - slack, "{after_xi} -> {after_sigma}");
            }
        }
    }

    #[test]
    fn lambdas_stay_positive_and_finite() {
        let (_, _, traj) = tune_once(23);
        for record in &traj.cycles {
            for &l in &record.lambdas {
                assert!(l.is_finite() && l > 0.0);
            }
            for (&s2, &x2) in record.sigma2.iter().zip(record.xi2.iter()) {
                assert!(s2 > 0.0 && x2 > 0.0);
            }
        }
    }

    #[test]
    fn noise_free_linear_data_prefers_heavy_smoothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let n = 150;
        let x = DMatrix::from_fn(n, 1, |_, _| rng.gen::<f64>());
        let y = DVector::from_iterator(n, x.column(0).iter().map(|v| 3.0 * v - 1.0));
        let data = Dataset::regression(x.clone(), y.clone()).unwrap();
        let spec = NetworkSpec::regression(1, 3, 1, 10, 3, 2, 25);
        let mut model = DpsModel::init(&spec, 25).unwrap();
        model.set_standardization(&data.features);
        let opts = EcmOptions {
            max_cycles: 12,
            tol: 0.0,
            ..EcmOptions::default()
        };
        let (_, traj) = ecm_tune(&mut model, &data, &opts).unwrap();
        // With an exactly representable noise-free signal the latent noise
        // variance degenerates; lambda must stay positive and finite while
        // the fit tightens to the data.
        for record in &traj.cycles {
            assert!(record.lambdas[0].is_finite() && record.lambdas[0] > 0.0);
        }
        let preds = model.predict(&x).unwrap();
        let mse = preds
            .iter()
            .zip(y.iter())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n as f64;
        assert!(mse <= 1e-6, "training mse {mse}");
    }

    #[test]
    fn pinned_zero_lambda_keeps_lambdas_at_zero() {
        let data = sine_dataset(31, 120);
        let spec = NetworkSpec::regression(1, 4, 1, 10, 3, 2, 31);
        let mut model = DpsModel::init(&spec, 31).unwrap();
        model.set_standardization(&data.features);
        let opts = EcmOptions {
            max_cycles: 4,
            tol: 0.0,
            pinned_lambda: Some(0.0),
            ..EcmOptions::default()
        };
        let (_, traj) = ecm_tune(&mut model, &data, &opts).unwrap();
        assert_eq!(traj.cycles.len(), 4);
        assert!(model.lambdas.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn per_cycle_cost_scales_no_worse_than_cubic() {
        // Doubling both the basis size and the neuron count multiplies the
        // parameter count per layer by 4; a cubic bound allows 64x per
        // cycle. Use medians over repeats to tame timing noise.
        let data = sine_dataset(41, 400);
        let time_for = |neurons: usize, knots: usize| -> f64 {
            let mut best = f64::INFINITY;
            for rep in 0..3 {
                let spec = NetworkSpec::regression(1, neurons, 1, knots, 3, 2, 41 + rep);
                let mut model = DpsModel::init(&spec, 41 + rep).unwrap();
                model.set_standardization(&data.features);
                let opts = EcmOptions {
                    max_cycles: 2,
                    tol: 0.0,
                    refine_epochs: 5,
                    ..EcmOptions::default()
                };
                let start = std::time::Instant::now();
                ecm_tune(&mut model, &data, &opts).unwrap();
                best = best.min(start.elapsed().as_secs_f64());
            }
            best
        };
        let small = time_for(4, 8);
        let large = time_for(8, 16);
        assert!(
            large <= 64.0 * small.max(1e-4),
            "per-cycle growth {small} -> {large}"
        );
    }
}
