//! GCV scoring and exhaustive structure search over candidate networks.

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{Dataset, Response};
use crate::ecm::{ecm_tune, EcmError, EcmOptions};
use crate::linalg;
use crate::model::{DpsModel, ModelError, NetworkSpec, OutputKind};
use crate::train::LossKind;

#[derive(Error, Debug)]
pub enum SelectError {
    #[error("candidate grid is empty")]
    EmptyGrid,

    #[error("classification scoring needs a softmax head and labeled data")]
    ModeMismatch,

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Ecm(#[from] EcmError),
}

/// What the GCV numerator measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    /// Residual sum of squares.
    Regression,
    /// Pearson chi-squared of predicted class probabilities.
    Classification,
}

/// Effective number of parameters of a fit: the numerical rank of the last
/// hidden layer's activation matrix (intercept included), detected from a
/// column-pivoted orthogonal factorization. Smoothing that collapses neuron
/// outputs onto fewer directions lowers it.
pub fn effective_df(h_with_intercept: &DMatrix<f64>) -> f64 {
    linalg::qr_rank(h_with_intercept) as f64
}

pub(crate) fn gcv_from_parts(numerator: f64, n: usize, df: f64) -> f64 {
    let denom = n as f64 - df;
    if denom <= 0.0 {
        return f64::INFINITY;
    }
    numerator / (denom * denom)
}

/// GCV score of a fitted model: data-fit numerator over `(n - df)^2`.
/// Candidates with `df >= n` score positive infinity rather than erroring.
pub fn gcv_score(model: &DpsModel, data: &Dataset, mode: ScoreMode) -> Result<f64, SelectError> {
    let (pred, cache) = model.forward(&data.features)?;
    let h_last = cache.activations.last().unwrap();
    let n = data.num_rows();
    let mut h = DMatrix::zeros(n, h_last.ncols() + 1);
    for i in 0..n {
        h[(i, 0)] = 1.0;
        for j in 0..h_last.ncols() {
            h[(i, j + 1)] = h_last[(i, j)];
        }
    }
    let df = effective_df(&h);
    let numerator = match mode {
        ScoreMode::Regression => {
            let y = data.response.as_vector();
            (0..n).map(|i| (y[i] - pred[(i, 0)]).powi(2)).sum::<f64>()
        }
        ScoreMode::Classification => {
            if !matches!(model.spec.output_kind, OutputKind::Softmax)
                || !matches!(data.response, Response::Labels { .. })
            {
                return Err(SelectError::ModeMismatch);
            }
            let y = data.response.as_target_matrix();
            let mut chi2 = 0.0;
            for i in 0..n {
                for c in 0..y.ncols() {
                    let p = pred[(i, c)].max(1e-300);
                    let r = y[(i, c)] - p;
                    chi2 += r * r / p;
                }
            }
            chi2
        }
    };
    Ok(gcv_from_parts(numerator, n, df))
}

/// Candidate structures: spline-layer counts x neuron counts x knot counts,
/// sharing one degree and penalty order.
#[derive(Debug, Clone)]
pub struct CandidateGrid {
    pub layer_options: Vec<usize>,
    pub neuron_options: Vec<usize>,
    pub knot_options: Vec<usize>,
    pub degree: usize,
    pub penalty_order: usize,
}

impl CandidateGrid {
    /// Candidate specs in deterministic order: layers outermost, then
    /// neurons, then knots.
    pub fn specs(
        &self,
        input_dim: usize,
        output: OutputKind,
        num_classes: usize,
        base_seed: u64,
    ) -> Vec<NetworkSpec> {
        let mut out = Vec::new();
        for &layers in &self.layer_options {
            for &neurons in &self.neuron_options {
                for &knots in &self.knot_options {
                    let mut spec = match output {
                        OutputKind::Identity => NetworkSpec::regression(
                            input_dim,
                            neurons,
                            layers,
                            knots,
                            self.degree,
                            self.penalty_order,
                            base_seed,
                        ),
                        OutputKind::Softmax => NetworkSpec::classification(
                            input_dim,
                            neurons,
                            layers,
                            knots,
                            self.degree,
                            self.penalty_order,
                            num_classes,
                            base_seed,
                        ),
                    };
                    spec.seed = base_seed.wrapping_add(out.len() as u64);
                    out.push(spec);
                }
            }
        }
        out
    }
}

/// One evaluated candidate.
#[derive(Debug, Clone)]
pub struct CandidateResult {
    pub spec: NetworkSpec,
    pub gcv: f64,
    pub effective_df: f64,
    pub seconds: f64,
    pub num_parameters: usize,
    pub converged: bool,
}

/// Search outcome: all candidates in grid order plus the winner index.
#[derive(Debug, Clone)]
pub struct SelectionReport {
    pub candidates: Vec<CandidateResult>,
    pub winner: usize,
}

impl SelectionReport {
    pub fn winning_spec(&self) -> &NetworkSpec {
        &self.candidates[self.winner].spec
    }
}

fn evaluate_candidate(
    spec: &NetworkSpec,
    data: &Dataset,
    opts: &EcmOptions,
    mode: ScoreMode,
) -> CandidateResult {
    let start = std::time::Instant::now();
    let outcome = (|| -> Result<(f64, f64, usize, bool), SelectError> {
        let mut model = DpsModel::init(spec, spec.seed)?;
        model.set_standardization(&data.features);
        let (_, traj) = ecm_tune(&mut model, data, opts)?;
        let gcv = gcv_score(&model, data, mode)?;
        let (_, cache) = model.forward(&data.features)?;
        let h_last = cache.activations.last().unwrap();
        let n = data.num_rows();
        let mut h = DMatrix::zeros(n, h_last.ncols() + 1);
        for i in 0..n {
            h[(i, 0)] = 1.0;
            for j in 0..h_last.ncols() {
                h[(i, j + 1)] = h_last[(i, j)];
            }
        }
        Ok((
            gcv,
            effective_df(&h),
            model.num_parameters(),
            traj.converged,
        ))
    })();
    let seconds = start.elapsed().as_secs_f64();
    match outcome {
        Ok((gcv, df, params, converged)) => CandidateResult {
            spec: spec.clone(),
            gcv,
            effective_df: df,
            seconds,
            num_parameters: params,
            converged,
        },
        Err(err) => {
            log::warn!("candidate failed ({err}); recording infinite score");
            CandidateResult {
                spec: spec.clone(),
                gcv: f64::INFINITY,
                effective_df: f64::NAN,
                seconds,
                num_parameters: 0,
                converged: false,
            }
        }
    }
}

/// Tunes every candidate with the same budget, scores each by GCV, and
/// returns the full report. The winner minimizes GCV; ties go to the
/// smaller parameter count and then the smaller grid index. Failed
/// candidates score infinity and never win unless everything failed.
pub fn structure_search(
    grid: &CandidateGrid,
    data: &Dataset,
    opts: &EcmOptions,
    base_seed: u64,
) -> Result<SelectionReport, SelectError> {
    if grid.layer_options.is_empty()
        || grid.neuron_options.is_empty()
        || grid.knot_options.is_empty()
    {
        return Err(SelectError::EmptyGrid);
    }
    let (output, num_classes, mode) = match &data.response {
        Response::Continuous(_) => (OutputKind::Identity, 1, ScoreMode::Regression),
        Response::Labels { num_classes, .. } => {
            (OutputKind::Softmax, *num_classes, ScoreMode::Classification)
        }
    };
    let mut search_opts = *opts;
    if matches!(mode, ScoreMode::Classification) {
        search_opts.loss_kind = LossKind::CrossEntropy;
    }
    let specs = grid.specs(data.num_features(), output, num_classes, base_seed);
    for spec in &specs {
        spec.validate()?;
    }

    let candidates: Vec<CandidateResult> = specs
        .par_iter()
        .map(|spec| evaluate_candidate(spec, data, &search_opts, mode))
        .collect();

    let winner = pick_winner(&candidates);
    Ok(SelectionReport { candidates, winner })
}

/// Smallest GCV wins; exact ties go to the smaller parameter count, then
/// the smaller grid index. Infinite scores only win if nothing is finite.
pub(crate) fn pick_winner(candidates: &[CandidateResult]) -> usize {
    let mut winner = 0usize;
    for (idx, cand) in candidates.iter().enumerate() {
        let best = &candidates[winner];
        let better = cand.gcv < best.gcv
            || (cand.gcv == best.gcv && cand.num_parameters < best.num_parameters);
        if better {
            winner = idx;
        }
    }
    winner
}
