//! The penalized training objective, its analytic gradients, and the
//! full-batch descent loop used both for standalone fitting and for the
//! short refinements inside the tuning cycle.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::basis::{BasisError, DifferenceOp};
use crate::data::{Dataset, Response};
use crate::model::{DpsModel, ForwardCache, ModelError, OutputKind};

#[derive(Error, Debug)]
pub enum TrainError {
    #[error("invalid training options: {0}")]
    InvalidOptions(String),

    #[error("model expects {expected} outputs but data provides {got}")]
    ResponseMismatch { expected: usize, got: usize },

    #[error("negative penalty weight {lambda} on spline layer {layer}")]
    NegativeLambda { layer: usize, lambda: f64 },

    #[error("training diverged at epoch {epoch}: non-finite objective after step halving")]
    Diverged { epoch: usize },

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Basis(#[from] BasisError),
}

/// Data-fit term of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Residual sum of squares.
    Squared,
    /// Negative log-likelihood of the softmax head.
    CrossEntropy,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub rel_tol: f64,
    pub momentum: f64,
    pub loss_kind: LossKind,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            learning_rate: 1e-2,
            max_epochs: 5000,
            rel_tol: 1e-8,
            momentum: 0.9,
            loss_kind: LossKind::Squared,
        }
    }
}

impl TrainOptions {
    fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::InvalidOptions("learning_rate must be > 0".into()));
        }
        if self.max_epochs == 0 {
            return Err(TrainError::InvalidOptions("max_epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::InvalidOptions("momentum must lie in [0, 1)".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(TrainError::InvalidOptions("rel_tol must be > 0".into()));
        }
        Ok(())
    }
}

/// Gradients of the penalized objective with respect to every weight matrix.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub first_layer: DMatrix<f64>,
    pub spline: Vec<DMatrix<f64>>,
    pub last_layer: DMatrix<f64>,
}

impl Gradients {
    fn zeros_like(model: &DpsModel) -> Self {
        Gradients {
            first_layer: DMatrix::zeros(
                model.first_layer_weights.nrows(),
                model.first_layer_weights.ncols(),
            ),
            spline: model
                .spline_weights
                .iter()
                .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
                .collect(),
            last_layer: DMatrix::zeros(
                model.last_layer_weights.nrows(),
                model.last_layer_weights.ncols(),
            ),
        }
    }

    fn scale_add(&mut self, scale: f64, other: &Gradients, other_scale: f64) {
        self.first_layer = &self.first_layer * scale + &other.first_layer * other_scale;
        for (s, g) in self.spline.iter_mut().zip(other.spline.iter()) {
            *s = &*s * scale + g * other_scale;
        }
        self.last_layer = &self.last_layer * scale + &other.last_layer * other_scale;
    }

    fn fill_zero(&mut self) {
        self.first_layer.fill(0.0);
        for s in self.spline.iter_mut() {
            s.fill(0.0);
        }
        self.last_layer.fill(0.0);
    }
}

fn apply_delta(model: &mut DpsModel, delta: &Gradients) {
    model.first_layer_weights += &delta.first_layer;
    for (w, d) in model.spline_weights.iter_mut().zip(delta.spline.iter()) {
        *w += d;
    }
    model.last_layer_weights += &delta.last_layer;
}

fn target_matrix(model: &DpsModel, data: &Dataset) -> Result<DMatrix<f64>, TrainError> {
    let y = data.response.as_target_matrix();
    let expected = *model.spec.neurons.last().unwrap();
    if y.ncols() != expected {
        return Err(TrainError::ResponseMismatch {
            expected,
            got: y.ncols(),
        });
    }
    if matches!(model.spec.output_kind, OutputKind::Softmax)
        && matches!(data.response, Response::Continuous(_))
    {
        return Err(TrainError::ResponseMismatch {
            expected,
            got: y.ncols(),
        });
    }
    Ok(y)
}

fn difference_ops(model: &DpsModel) -> Result<Vec<DifferenceOp>, TrainError> {
    model
        .spec
        .knots_per_layer
        .iter()
        .map(|&n| DifferenceOp::new(n, model.spec.penalty_order).map_err(TrainError::from))
        .collect()
}

fn penalty_term(model: &DpsModel, ops: &[DifferenceOp]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for (s, (w, op)) in model.spline_weights.iter().zip(ops.iter()).enumerate() {
        let lambda = model.lambdas[s];
        if lambda < 0.0 {
            return Err(TrainError::NegativeLambda { layer: s + 2, lambda });
        }
        let dw = &op.matrix * w.transpose();
        total += lambda * dw.norm_squared();
    }
    Ok(total)
}

fn data_fit(kind: LossKind, predictions: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    match kind {
        LossKind::Squared => (predictions - y).norm_squared(),
        LossKind::CrossEntropy => {
            let mut nll = 0.0;
            for i in 0..y.nrows() {
                for c in 0..y.ncols() {
                    if y[(i, c)] > 0.0 {
                        nll -= y[(i, c)] * predictions[(i, c)].max(1e-300).ln();
                    }
                }
            }
            nll
        }
    }
}

fn loss_from_cache(
    model: &DpsModel,
    cache: &ForwardCache,
    y: &DMatrix<f64>,
    kind: LossKind,
    ops: &[DifferenceOp],
) -> Result<f64, TrainError> {
    Ok(data_fit(kind, &cache.predictions, y) + penalty_term(model, ops)?)
}

/// Objective value: data-fit term plus the layer-wise difference penalties
/// `sum_l lambda_l sum_j ||D_r w_j||^2`.
pub fn penalized_loss(model: &DpsModel, data: &Dataset, kind: LossKind) -> Result<f64, TrainError> {
    let y = target_matrix(model, data)?;
    let ops = difference_ops(model)?;
    let (_, cache) = model.forward(&data.features)?;
    loss_from_cache(model, &cache, &y, kind, &ops)
}

fn gradients_from_cache(
    model: &DpsModel,
    cache: &ForwardCache,
    y: &DMatrix<f64>,
    kind: LossKind,
    ops: &[DifferenceOp],
) -> Gradients {
    let n = cache.x_design.nrows();
    let num_spline = model.spec.num_spline_layers();

    // Output map and data-fit term share their gradient shape: for the
    // squared loss with the identity head d/dlogits = 2(pred - y); for the
    // softmax with cross entropy it collapses to (probs - y).
    let dlogits: DMatrix<f64> = match kind {
        LossKind::Squared => (&cache.predictions - y) * 2.0,
        LossKind::CrossEntropy => &cache.predictions - y,
    };

    let h_last = cache.activations.last().unwrap();
    let q = h_last.ncols();
    let mut head_design = DMatrix::zeros(n, q + 1);
    for i in 0..n {
        head_design[(i, 0)] = 1.0;
        for j in 0..q {
            head_design[(i, j + 1)] = h_last[(i, j)];
        }
    }
    let grad_last = dlogits.transpose() * &head_design;

    // Pull back through the head onto the last hidden activations.
    let w_out = model
        .last_layer_weights
        .columns(1, q)
        .into_owned();
    let mut dh = &dlogits * w_out;

    let mut grad_spline = vec![DMatrix::zeros(0, 0); num_spline];
    for s in (0..num_spline).rev() {
        let features = &cache.features[s];
        let w = &model.spline_weights[s];
        let mut grad_w = dh.transpose() * features;
        grad_w += w * &ops[s].penalty * (2.0 * model.lambdas[s]);
        let dfeat = &dh * w;

        // Through the basis expansion and the squash into the previous
        // activations: d/dh_prev[i,m] = (sum_k dF[i,k] B'_k(z)) * z(1-z).
        let z = &cache.squashed_inputs[s];
        let kv = &model.knot_vectors[s];
        let mut dprev = DMatrix::zeros(n, z.ncols());
        let mut buf = vec![0.0; kv.degree + 1];
        for i in 0..n {
            for m in 0..z.ncols() {
                let zim = z[(i, m)];
                let start = kv.eval_derivative_nonzero_into(zim, &mut buf);
                let mut acc = 0.0;
                for (offset, bder) in buf.iter().enumerate() {
                    acc += dfeat[(i, start + offset)] * bder;
                }
                dprev[(i, m)] = acc * zim * (1.0 - zim);
            }
        }
        grad_spline[s] = grad_w;
        dh = dprev;
    }

    // First layer: through the logistic activation onto the linear map.
    let h1 = &cache.activations[0];
    let mut dpre1 = dh;
    for i in 0..n {
        for j in 0..h1.ncols() {
            dpre1[(i, j)] *= h1[(i, j)] * (1.0 - h1[(i, j)]);
        }
    }
    let grad_first = dpre1.transpose() * &cache.x_design;

    Gradients {
        first_layer: grad_first,
        spline: grad_spline,
        last_layer: grad_last,
    }
}

/// Analytic gradients of [`penalized_loss`] for every weight matrix.
pub fn gradients(model: &DpsModel, data: &Dataset, kind: LossKind) -> Result<Gradients, TrainError> {
    let y = target_matrix(model, data)?;
    let ops = difference_ops(model)?;
    penalty_term(model, &ops)?;
    let (_, cache) = model.forward(&data.features)?;
    Ok(gradients_from_cache(model, &cache, &y, kind, &ops))
}

/// Full-batch gradient descent with momentum and step halving. The returned
/// trajectory of accepted objective values is nonincreasing (within 1e-12
/// per step). Penalty weights stay fixed; tuning them is a separate loop.
pub fn fit(
    model: &mut DpsModel,
    data: &Dataset,
    opts: &TrainOptions,
) -> Result<Vec<f64>, TrainError> {
    opts.validate()?;
    let y = target_matrix(model, data)?;
    let ops = difference_ops(model)?;
    penalty_term(model, &ops)?;

    let (_, cache) = model.forward(&data.features)?;
    let mut loss = loss_from_cache(model, &cache, &y, opts.loss_kind, &ops)?;
    let mut trajectory = vec![loss];
    let mut velocity = Gradients::zeros_like(model);
    let mut lr = opts.learning_rate;

    for epoch in 0..opts.max_epochs {
        let (_, cache) = model.forward(&data.features)?;
        let grad = gradients_from_cache(model, &cache, &y, opts.loss_kind, &ops);

        let mut halvings = 0usize;
        let new_loss = loop {
            // velocity' = momentum * velocity - lr * grad
            let mut trial_vel = velocity.clone();
            trial_vel.scale_add(opts.momentum, &grad, -lr);
            let mut trial = model.clone();
            apply_delta(&mut trial, &trial_vel);
            let candidate = trial
                .forward(&data.features)
                .ok()
                .map(|(_, c)| loss_from_cache(&trial, &c, &y, opts.loss_kind, &ops))
                .transpose()?;
            match candidate {
                Some(l) if l.is_finite() && l <= loss + 1e-12 => {
                    *model = trial;
                    velocity = trial_vel;
                    break l;
                }
                other => {
                    halvings += 1;
                    if halvings > 80 {
                        match other {
                            Some(l) if l.is_finite() => break loss,
                            _ => return Err(TrainError::Diverged { epoch }),
                        }
                    }
                    lr *= 0.5;
                    velocity.fill_zero();
                }
            }
        };

        let prev = loss;
        loss = new_loss.min(loss);
        trajectory.push(loss);
        lr = (lr * 1.1).min(opts.learning_rate);

        let denom = prev.abs().max(1e-300);
        if (prev - loss) / denom < opts.rel_tol {
            break;
        }
    }
    Ok(trajectory)
}
