//! The deep P-spline network: structure specification, weight storage,
//! forward evaluation, and a versioned text persistence format.
//!
//! Layer layout (1-based, following the network structure `(L, p)`): layer 1
//! maps standardized inputs through a linear map plus logistic squash; layers
//! `2..=L-1` are spline layers whose neurons are penalized B-spline
//! expansions of the squashed previous-layer outputs; layer `L` is a linear
//! head, optionally followed by a row-wise softmax.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use thiserror::Error;

use crate::basis::{BasisError, KnotVector};

#[derive(Error, Debug)]
pub enum ModelError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("input has {got} features but the model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite values entering layer {layer}")]
    NonFinite { layer: usize },

    #[error("model file: {0}")]
    Format(String),

    #[error(transparent)]
    Basis(#[from] BasisError),
}

/// Output-layer map: identity for regression, row-wise softmax for
/// classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputKind {
    Identity,
    Softmax,
}

/// Structure of a network: `num_layers` total layers with `neurons[l]`
/// neurons in layer `l+1`, spline layers holding `knots_per_layer` basis
/// functions each.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub num_layers: usize,
    pub input_dim: usize,
    pub neurons: Vec<usize>,
    pub knots_per_layer: Vec<usize>,
    pub degree: usize,
    pub penalty_order: usize,
    pub output_kind: OutputKind,
    pub seed: u64,
}

impl NetworkSpec {
    /// Regression network with `spline_layers` spline layers of `neurons`
    /// neurons and `knots` basis functions each. `spline_layers = 0` yields
    /// the plain linear network used as a baseline.
    pub fn regression(
        input_dim: usize,
        neurons: usize,
        spline_layers: usize,
        knots: usize,
        degree: usize,
        penalty_order: usize,
        seed: u64,
    ) -> Self {
        let num_layers = spline_layers + 2;
        let mut p = vec![neurons; num_layers - 1];
        p.push(1);
        NetworkSpec {
            num_layers,
            input_dim,
            neurons: p,
            knots_per_layer: vec![knots; spline_layers],
            degree,
            penalty_order,
            output_kind: OutputKind::Identity,
            seed,
        }
    }

    /// Classification variant of [`NetworkSpec::regression`].
    pub fn classification(
        input_dim: usize,
        neurons: usize,
        spline_layers: usize,
        knots: usize,
        degree: usize,
        penalty_order: usize,
        num_classes: usize,
        seed: u64,
    ) -> Self {
        let mut spec = Self::regression(
            input_dim,
            neurons,
            spline_layers,
            knots,
            degree,
            penalty_order,
            seed,
        );
        spec.output_kind = OutputKind::Softmax;
        *spec.neurons.last_mut().unwrap() = num_classes;
        spec
    }

    /// Number of spline layers (`num_layers - 2`).
    pub fn num_spline_layers(&self) -> usize {
        self.num_layers.saturating_sub(2)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_layers < 2 {
            return Err(ModelError::InvalidSpec(format!(
                "num_layers must be >= 2, got {}",
                self.num_layers
            )));
        }
        if self.input_dim == 0 {
            return Err(ModelError::InvalidSpec("input_dim must be >= 1".into()));
        }
        if self.neurons.len() != self.num_layers {
            return Err(ModelError::InvalidSpec(format!(
                "neurons has {} entries for {} layers",
                self.neurons.len(),
                self.num_layers
            )));
        }
        if self.neurons.iter().any(|&p| p == 0) {
            return Err(ModelError::InvalidSpec("every layer needs >= 1 neuron".into()));
        }
        let out = *self.neurons.last().unwrap();
        match self.output_kind {
            OutputKind::Identity if out != 1 => {
                return Err(ModelError::InvalidSpec(format!(
                    "identity head requires 1 output neuron, got {out}"
                )));
            }
            OutputKind::Softmax if out < 2 => {
                return Err(ModelError::InvalidSpec(format!(
                    "softmax head requires >= 2 classes, got {out}"
                )));
            }
            _ => {}
        }
        if self.knots_per_layer.len() != self.num_spline_layers() {
            return Err(ModelError::InvalidSpec(format!(
                "expected {} knot counts, got {}",
                self.num_spline_layers(),
                self.knots_per_layer.len()
            )));
        }
        for &n in &self.knots_per_layer {
            if n < self.degree + 1 {
                return Err(ModelError::InvalidSpec(format!(
                    "knots_per_layer entry {n} violates num_basis >= degree+1 = {}",
                    self.degree + 1
                )));
            }
            if self.penalty_order == 0 || self.penalty_order >= n {
                return Err(ModelError::InvalidSpec(format!(
                    "penalty order {} outside 1..{n}",
                    self.penalty_order
                )));
            }
        }
        Ok(())
    }
}

/// Per-feature affine standardization applied to raw inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub means: DVector<f64>,
    pub scales: DVector<f64>,
}

impl Standardization {
    pub fn identity(dim: usize) -> Self {
        Standardization {
            means: DVector::zeros(dim),
            scales: DVector::from_element(dim, 1.0),
        }
    }

    /// Zero-mean, unit-variance transform fitted on a feature matrix.
    /// Constant columns keep scale 1.
    pub fn fit(features: &DMatrix<f64>) -> Self {
        let n = features.nrows() as f64;
        let means = DVector::from_iterator(
            features.ncols(),
            features.column_iter().map(|c| c.sum() / n),
        );
        let scales = DVector::from_iterator(
            features.ncols(),
            features.column_iter().enumerate().map(|(j, c)| {
                let var = c.iter().map(|v| (v - means[j]).powi(2)).sum::<f64>() / n;
                let sd = var.sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            }),
        );
        Standardization { means, scales }
    }
}

/// Numerically stable logistic map into (0, 1).
pub fn squash(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Intermediate results of a forward pass, reused by gradients and by the
/// layer-wise tuning loop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Standardized inputs with a leading intercept column, `n x (d+1)`.
    pub x_design: DMatrix<f64>,
    /// Post-activation outputs `h_(1) .. h_(L-1)`, each `n x p_l`.
    pub activations: Vec<DMatrix<f64>>,
    /// Squashed inputs feeding each spline layer, `n x p_(l-1)`.
    pub squashed_inputs: Vec<DMatrix<f64>>,
    /// Basis feature matrices per spline layer, `n x N_l`.
    pub features: Vec<DMatrix<f64>>,
    /// Linear head output before the output map, `n x p_L`.
    pub logits: DMatrix<f64>,
    /// Final predictions after the output map, `n x p_L`.
    pub predictions: DMatrix<f64>,
}

/// A fully parameterized deep P-spline network.
#[derive(Debug, Clone, PartialEq)]
pub struct DpsModel {
    pub spec: NetworkSpec,
    /// `p_1 x (d+1)`; column 0 is the intercept.
    pub first_layer_weights: DMatrix<f64>,
    /// One `p_l x N_l` coefficient matrix per spline layer; row `j` is the
    /// coefficient vector of neuron `j`.
    pub spline_weights: Vec<DMatrix<f64>>,
    pub knot_vectors: Vec<KnotVector>,
    /// `p_L x (p_(L-1)+1)`; column 0 is the intercept.
    pub last_layer_weights: DMatrix<f64>,
    /// Penalty weight per spline layer.
    pub lambdas: Vec<f64>,
    pub standardization: Standardization,
}

fn uniform_in(rng: &mut impl rand::Rng, scale: f64) -> f64 {
    scale * (2.0 * rng.gen::<f64>() - 1.0)
}

impl DpsModel {
    /// Builds a model with deterministic initialization: linear layers drawn
    /// uniform on `[-s, s]` with `s = sqrt(6/(fan_in+fan_out))`, spline
    /// coefficient rows set to the linear-in-index ramp scaled to `[0, 1]`,
    /// and all penalty weights at 1.
    pub fn init(spec: &NetworkSpec, rng_seed: u64) -> Result<Self, ModelError> {
        use rand::{Rng, SeedableRng};
        spec.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(rng_seed);
        let d = spec.input_dim;
        let p1 = spec.neurons[0];
        let s1 = (6.0 / (d + 1 + p1) as f64).sqrt();
        let first_layer_weights = DMatrix::from_fn(p1, d + 1, |_, _| uniform_in(&mut rng, s1));

        let mut spline_weights = Vec::new();
        let mut knot_vectors = Vec::new();
        for (s, &n) in spec.knots_per_layer.iter().enumerate() {
            let p = spec.neurons[s + 1];
            // Each neuron starts as a ramp that is affine in the basis
            // index, so its second differences vanish exactly. The slope and
            // offset are drawn per neuron: identical rows would stay
            // identical under both gradient descent and the tuning loop,
            // collapsing the layer onto a single shape. Features sum basis
            // values over the previous layer's neurons, so the scale is
            // divided by their count, and the +-3 span keeps the next
            // layer's squashed inputs covering most of the basis domain.
            let prev = spec.neurons[s] as f64;
            let mut w = DMatrix::zeros(p, n);
            for j in 0..p {
                let slope = 0.5 + rng.gen::<f64>(); // in [0.5, 1.5]
                let shift = rng.gen::<f64>() - 0.5; // in [-0.5, 0.5]
                for k in 0..n {
                    let centered = if n > 1 {
                        k as f64 / (n - 1) as f64 - 0.5
                    } else {
                        0.0
                    };
                    w[(j, k)] = (6.0 * slope * centered + 3.0 * shift) / prev;
                }
            }
            spline_weights.push(w);
            knot_vectors.push(KnotVector::uniform(n, spec.degree, (0.0, 1.0))?);
        }

        let q = spec.neurons[spec.num_layers - 2];
        let p_out = spec.neurons[spec.num_layers - 1];
        let sl = (6.0 / (q + 1 + p_out) as f64).sqrt();
        let last_layer_weights = DMatrix::from_fn(p_out, q + 1, |_, _| uniform_in(&mut rng, sl));

        Ok(DpsModel {
            spec: spec.clone(),
            first_layer_weights,
            spline_weights,
            knot_vectors,
            last_layer_weights,
            lambdas: vec![1.0; spec.num_spline_layers()],
            standardization: Standardization::identity(d),
        })
    }

    pub fn set_standardization(&mut self, features: &DMatrix<f64>) {
        self.standardization = Standardization::fit(features);
    }

    /// Basis feature matrix of spline layer `spline_idx` (0-based; network
    /// layer `spline_idx + 2`): inputs are squashed elementwise into (0, 1)
    /// and basis values are summed over the previous layer's neurons, so
    /// each row sums to `p_(l-1)`.
    pub fn spline_features(
        &self,
        spline_idx: usize,
        h_prev: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>, ModelError> {
        if h_prev.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite {
                layer: spline_idx + 2,
            });
        }
        let z = h_prev.map(squash);
        Ok(self.features_from_squashed(spline_idx, &z))
    }

    pub(crate) fn features_from_squashed(
        &self,
        spline_idx: usize,
        z: &DMatrix<f64>,
    ) -> DMatrix<f64> {
        let kv = &self.knot_vectors[spline_idx];
        let n = z.nrows();
        let mut features = DMatrix::zeros(n, kv.num_basis);
        let mut buf = vec![0.0; kv.degree + 1];
        for i in 0..n {
            for m in 0..z.ncols() {
                let start = kv.eval_nonzero_into(z[(i, m)], &mut buf);
                for (offset, v) in buf.iter().enumerate() {
                    features[(i, start + offset)] += *v;
                }
            }
        }
        features
    }

    /// Forward evaluation on raw inputs. Returns predictions and the cache
    /// of intermediates consumed by gradients and tuning.
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, ForwardCache), ModelError> {
        if x.ncols() != self.spec.input_dim {
            return Err(ModelError::DimensionMismatch {
                expected: self.spec.input_dim,
                got: x.ncols(),
            });
        }
        let n = x.nrows();
        let d = x.ncols();
        let mut x_design = DMatrix::zeros(n, d + 1);
        for i in 0..n {
            x_design[(i, 0)] = 1.0;
            for j in 0..d {
                x_design[(i, j + 1)] = (x[(i, j)] - self.standardization.means[j])
                    / self.standardization.scales[j];
            }
        }

        let pre1 = &x_design * self.first_layer_weights.transpose();
        let h1 = pre1.map(squash);
        if h1.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { layer: 1 });
        }

        let mut activations = vec![h1];
        let mut squashed_inputs = Vec::new();
        let mut features = Vec::new();
        for s in 0..self.spec.num_spline_layers() {
            let h_prev = activations.last().unwrap();
            if h_prev.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite { layer: s + 2 });
            }
            let z = h_prev.map(squash);
            let f = self.features_from_squashed(s, &z);
            let h = &f * self.spline_weights[s].transpose();
            squashed_inputs.push(z);
            features.push(f);
            activations.push(h);
        }

        let h_last = activations.last().unwrap();
        if h_last.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite {
                layer: self.spec.num_layers - 1,
            });
        }
        let q = h_last.ncols();
        let mut head_design = DMatrix::zeros(n, q + 1);
        for i in 0..n {
            head_design[(i, 0)] = 1.0;
            for j in 0..q {
                head_design[(i, j + 1)] = h_last[(i, j)];
            }
        }
        let logits = &head_design * self.last_layer_weights.transpose();
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite {
                layer: self.spec.num_layers,
            });
        }
        let predictions = match self.spec.output_kind {
            OutputKind::Identity => logits.clone(),
            OutputKind::Softmax => softmax_rows(&logits),
        };
        let cache = ForwardCache {
            x_design,
            activations,
            squashed_inputs,
            features,
            logits,
            predictions: predictions.clone(),
        };
        Ok((predictions, cache))
    }

    /// Regression predictions as a vector.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>, ModelError> {
        let (pred, _) = self.forward(x)?;
        Ok(DVector::from_column_slice(pred.column(0).as_slice()))
    }

    /// Total parameter count across all weight matrices.
    pub fn num_parameters(&self) -> usize {
        self.first_layer_weights.len()
            + self
                .spline_weights
                .iter()
                .map(|w| w.len())
                .sum::<usize>()
            + self.last_layer_weights.len()
    }
}

pub(crate) fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for mut row in out.row_iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Persistence: versioned key-value text (JSON) with 17-significant-digit
// reals so that reloading reproduces predictions bit for bit.
// ---------------------------------------------------------------------------

const FORMAT_VERSION: &str = "1";

fn push_float(out: &mut String, x: f64) {
    let _ = write!(out, "{x:.16e}");
}

fn push_float_slice(out: &mut String, xs: impl Iterator<Item = f64>) {
    out.push('[');
    for (i, x) in xs.enumerate() {
        if i > 0 {
            out.push(',');
        }
        push_float(out, x);
    }
    out.push(']');
}

fn push_matrix(out: &mut String, m: &DMatrix<f64>) {
    let _ = write!(out, "{{\"rows\":{},\"cols\":{},\"data\":", m.nrows(), m.ncols());
    push_float_slice(out, (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| (i, j))).map(|(i, j)| m[(i, j)]));
    out.push('}');
}

impl DpsModel {
    /// Serializes to the versioned text format. Fails on non-finite weights.
    pub fn serialize(&self) -> Result<String, ModelError> {
        let all_finite = self.first_layer_weights.iter().all(|v| v.is_finite())
            && self.spline_weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.last_layer_weights.iter().all(|v| v.is_finite())
            && self.lambdas.iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(ModelError::Format("refusing to serialize non-finite weights".into()));
        }
        let mut out = String::new();
        out.push_str("{\"format_version\":\"");
        out.push_str(FORMAT_VERSION);
        out.push_str("\",\"spec\":{");
        let spec = &self.spec;
        let _ = write!(
            out,
            "\"num_layers\":{},\"input_dim\":{},\"neurons\":{:?},\"knots_per_layer\":{:?},\"degree\":{},\"penalty_order\":{},\"output_kind\":\"{}\",\"seed\":{}",
            spec.num_layers,
            spec.input_dim,
            spec.neurons,
            spec.knots_per_layer,
            spec.degree,
            spec.penalty_order,
            match spec.output_kind {
                OutputKind::Identity => "identity",
                OutputKind::Softmax => "softmax",
            },
            spec.seed
        );
        out.push_str("},\"first_layer_weights\":");
        push_matrix(&mut out, &self.first_layer_weights);
        out.push_str(",\"spline_weights\":[");
        for (i, w) in self.spline_weights.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            push_matrix(&mut out, w);
        }
        out.push_str("],\"last_layer_weights\":");
        push_matrix(&mut out, &self.last_layer_weights);
        out.push_str(",\"lambdas\":");
        push_float_slice(&mut out, self.lambdas.iter().cloned());
        out.push_str(",\"standardization\":{\"means\":");
        push_float_slice(&mut out, self.standardization.means.iter().cloned());
        out.push_str(",\"scales\":");
        push_float_slice(&mut out, self.standardization.scales.iter().cloned());
        out.push_str("}}");
        Ok(out)
    }

    pub fn deserialize(text: &str) -> Result<Self, ModelError> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct MatrixFile {
            rows: usize,
            cols: usize,
            data: Vec<f64>,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct StdFile {
            means: Vec<f64>,
            scales: Vec<f64>,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct ModelFile {
            format_version: String,
            spec: NetworkSpec,
            first_layer_weights: MatrixFile,
            spline_weights: Vec<MatrixFile>,
            last_layer_weights: MatrixFile,
            lambdas: Vec<f64>,
            standardization: StdFile,
        }

        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| ModelError::Format(e.to_string()))?;
        if file.format_version != FORMAT_VERSION {
            return Err(ModelError::Format(format!(
                "unknown format_version `{}`",
                file.format_version
            )));
        }
        file.spec.validate()?;
        let to_matrix = |m: &MatrixFile, what: &str| -> Result<DMatrix<f64>, ModelError> {
            if m.data.len() != m.rows * m.cols {
                return Err(ModelError::Format(format!(
                    "{what}: expected {} entries, got {}",
                    m.rows * m.cols,
                    m.data.len()
                )));
            }
            if m.data.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::Format(format!("{what}: non-finite entry")));
            }
            Ok(DMatrix::from_row_slice(m.rows, m.cols, &m.data))
        };

        let spec = file.spec;
        let first = to_matrix(&file.first_layer_weights, "first_layer_weights")?;
        if first.nrows() != spec.neurons[0] || first.ncols() != spec.input_dim + 1 {
            return Err(ModelError::Format("first_layer_weights shape mismatch".into()));
        }
        if file.spline_weights.len() != spec.num_spline_layers() {
            return Err(ModelError::Format("spline layer count mismatch".into()));
        }
        let mut spline_weights = Vec::new();
        let mut knot_vectors = Vec::new();
        for (s, mf) in file.spline_weights.iter().enumerate() {
            let w = to_matrix(mf, "spline_weights")?;
            if w.nrows() != spec.neurons[s + 1] || w.ncols() != spec.knots_per_layer[s] {
                return Err(ModelError::Format(format!(
                    "spline_weights[{s}] shape mismatch"
                )));
            }
            knot_vectors.push(KnotVector::uniform(
                spec.knots_per_layer[s],
                spec.degree,
                (0.0, 1.0),
            )?);
            spline_weights.push(w);
        }
        let last = to_matrix(&file.last_layer_weights, "last_layer_weights")?;
        let q = spec.neurons[spec.num_layers - 2];
        if last.nrows() != *spec.neurons.last().unwrap() || last.ncols() != q + 1 {
            return Err(ModelError::Format("last_layer_weights shape mismatch".into()));
        }
        if file.lambdas.len() != spec.num_spline_layers()
            || file.lambdas.iter().any(|l| !l.is_finite() || *l < 0.0)
        {
            return Err(ModelError::Format("lambdas invalid".into()));
        }
        if file.standardization.means.len() != spec.input_dim
            || file.standardization.scales.len() != spec.input_dim
        {
            return Err(ModelError::Format("standardization shape mismatch".into()));
        }
        Ok(DpsModel {
            spec,
            first_layer_weights: first,
            spline_weights,
            knot_vectors,
            last_layer_weights: last,
            lambdas: file.lambdas,
            standardization: Standardization {
                means: DVector::from_vec(file.standardization.means),
                scales: DVector::from_vec(file.standardization.scales),
            },
        })
    }
}
