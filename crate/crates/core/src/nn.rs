//! Dense feed-forward network: forward pass, backpropagation, SGD.
//!
//! The experiments use a three-layer perceptron. Hidden layers are ReLU;
//! classification heads apply a log-softmax (computed with max subtraction
//! for stability), regression heads are linear after the ReLU stack. All
//! arithmetic is f64 with fixed reduction order, so a seeded model is
//! bit-for-bit reproducible.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use rand::Rng;

/// Learning task of a model; decides the output head and the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classification,
    Regression,
}

/// Architecture description: layer sizes from input to output, plus the task.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    layer_sizes: Vec<usize>,
    task: Task,
}

impl ModelSpec {
    /// A network with the given layer sizes (input, hidden..., output).
    ///
    /// At least two sizes (one affine layer) are required so degenerate
    /// linear probes can be built in tests; the experiment harness goes
    /// through [`ModelSpec::three_layer`], which enforces the three-layer
    /// architecture used throughout.
    pub fn new(layer_sizes: Vec<usize>, task: Task) -> Result<ModelSpec> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config(
                "layer_sizes needs at least input and output".into(),
            ));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if task == Task::Classification && *layer_sizes.last().unwrap() < 2 {
            return Err(Error::Config(
                "classification requires at least 2 output classes".into(),
            ));
        }
        Ok(ModelSpec { layer_sizes, task })
    }

    /// The standard three-layer network (input, one hidden, output).
    pub fn three_layer(input: usize, hidden: usize, output: usize, task: Task) -> Result<ModelSpec> {
        ModelSpec::new(vec![input, hidden, output], task)
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// (rows, cols) = (fan_out, fan_in) of each affine layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.layer_sizes
            .windows(2)
            .map(|w| (w[1], w[0]))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|&(r, c)| r * c + r)
            .sum()
    }
}

/// Flat parameter vector: per layer, a row-major weight block followed by
/// the bias block. Also the carrier for model updates and their deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    shapes: Vec<(usize, usize)>,
}

impl ParamVector {
    pub fn zeros(spec: &ModelSpec) -> ParamVector {
        let shapes = spec.layer_shapes();
        let len = shapes.iter().map(|&(r, c)| r * c + r).sum();
        ParamVector {
            values: vec![0.0; len],
            shapes,
        }
    }

    pub fn from_values(spec: &ModelSpec, values: Vec<f64>) -> Result<ParamVector> {
        if values.len() != spec.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                spec.param_count(),
                values.len()
            )));
        }
        Ok(ParamVector {
            values,
            shapes: spec.layer_shapes(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    /// Offset of layer `l`'s weight block; the bias block follows it.
    fn layer_offset(&self, layer: usize) -> usize {
        self.shapes[..layer].iter().map(|&(r, c)| r * c + r).sum()
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        let (r, c) = self.shapes[layer];
        let off = self.layer_offset(layer);
        &self.values[off..off + r * c]
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        let (r, c) = self.shapes[layer];
        let off = self.layer_offset(layer) + r * c;
        &self.values[off..off + r]
    }

    /// Euclidean norm of the flat vector.
    pub fn l2_norm(&self) -> f64 {
        l2_norm(&self.values)
    }

    /// Elementwise self - other.
    pub fn delta(&self, other: &ParamVector) -> Result<ParamVector> {
        if self.shapes != other.shapes {
            return Err(Error::Shape("parameter shapes differ".into()));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(ParamVector {
            values,
            shapes: self.shapes.clone(),
        })
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    /// Index of the first layer containing a non-finite entry, if any.
    pub fn first_non_finite_layer(&self) -> Option<usize> {
        for layer in 0..self.shapes.len() {
            let (r, c) = self.shapes[layer];
            let off = self.layer_offset(layer);
            if self.values[off..off + r * c + r].iter().any(|v| !v.is_finite()) {
                return Some(layer);
            }
        }
        None
    }
}

/// Euclidean norm of a flat update vector.
pub fn update_norm(values: &[f64]) -> f64 {
    l2_norm(values)
}

fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Targets for a batch: class labels or regression values.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Labels(Vec<usize>),
    Values(Matrix),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Labels(l) => l.len(),
            Targets::Values(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gather(&self, indices: &[usize]) -> Targets {
        match self {
            Targets::Labels(l) => Targets::Labels(indices.iter().map(|&i| l[i]).collect()),
            Targets::Values(m) => Targets::Values(m.gather_rows(indices)),
        }
    }
}

/// A batch of inputs with matching targets.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Targets,
}

impl Batch {
    pub fn new(inputs: Matrix, targets: Targets) -> Result<Batch> {
        if inputs.rows() != targets.len() {
            return Err(Error::Shape(format!(
                "{} input rows vs {} targets",
                inputs.rows(),
                targets.len()
            )));
        }
        Ok(Batch { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Glorot-uniform weight initialization, biases zero.
pub fn init_params<R: Rng>(spec: &ModelSpec, rng: &mut R) -> ParamVector {
    let mut params = ParamVector::zeros(spec);
    let shapes = spec.layer_shapes();
    let mut offset = 0;
    for &(rows, cols) in &shapes {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        for i in 0..rows * cols {
            params.values[offset + i] = rng.random_range(-limit..=limit);
        }
        offset += rows * cols + rows; // biases stay zero
    }
    params
}

fn check_dims(spec: &ModelSpec, params: &ParamVector, inputs: &Matrix) -> Result<()> {
    if inputs.cols() != spec.input_dim() {
        return Err(Error::Shape(format!(
            "input has {} columns, model expects {}",
            inputs.cols(),
            spec.input_dim()
        )));
    }
    if params.shapes != spec.layer_shapes() {
        return Err(Error::Shape("params inconsistent with model spec".into()));
    }
    Ok(())
}

/// Post-activation outputs of every layer, in order. The last entry is the
/// model output (log-probabilities for classification).
fn forward_all(spec: &ModelSpec, params: &ParamVector, inputs: &Matrix) -> Result<Vec<Matrix>> {
    check_dims(spec, params, inputs)?;
    let num_layers = spec.num_layers();
    let mut activations = Vec::with_capacity(num_layers);
    let mut current = inputs;
    for layer in 0..num_layers {
        let (rows, cols) = params.shapes[layer];
        let w = params.weights(layer);
        let b = params.biases(layer);
        let mut out = Matrix::zeros(current.rows(), rows);
        for i in 0..current.rows() {
            let x = current.row(i);
            let out_row = out.row_mut(i);
            for (o, out_val) in out_row.iter_mut().enumerate() {
                let wrow = &w[o * cols..(o + 1) * cols];
                let mut acc = b[o];
                for (wv, xv) in wrow.iter().zip(x.iter()) {
                    acc += wv * xv;
                }
                *out_val = acc;
            }
        }
        let last = layer == num_layers - 1;
        if !last {
            for i in 0..out.rows() {
                for v in out.row_mut(i) {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
        } else if spec.task == Task::Classification {
            for i in 0..out.rows() {
                log_softmax_row(out.row_mut(i));
            }
        }
        activations.push(out);
        current = activations.last().unwrap();
    }
    Ok(activations)
}

/// In-place log-softmax with max subtraction.
fn log_softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter() {
        sum += (v - max).exp();
    }
    let log_sum = max + sum.ln();
    for v in row.iter_mut() {
        *v -= log_sum;
    }
}

/// Run the model on a batch of inputs.
///
/// Classification outputs are log-probabilities (each row's exponentials sum
/// to one); regression outputs are the raw final-layer values.
pub fn forward(spec: &ModelSpec, params: &ParamVector, inputs: &Matrix) -> Result<Matrix> {
    Ok(forward_all(spec, params, inputs)?.pop().unwrap())
}

/// Mean loss over the batch: negative log-likelihood for classification,
/// mean squared error (over all output entries) for regression.
pub fn compute_loss(outputs: &Matrix, targets: &Targets, task: Task) -> Result<f64> {
    if outputs.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if outputs.rows() != targets.len() {
        return Err(Error::Shape(format!(
            "{} output rows vs {} targets",
            outputs.rows(),
            targets.len()
        )));
    }
    match (task, targets) {
        (Task::Classification, Targets::Labels(labels)) => {
            let mut total = 0.0;
            for (i, &label) in labels.iter().enumerate() {
                if label >= outputs.cols() {
                    return Err(Error::Shape(format!(
                        "label {} out of range for {} classes",
                        label,
                        outputs.cols()
                    )));
                }
                total -= outputs.get(i, label);
            }
            Ok(total / labels.len() as f64)
        }
        (Task::Regression, Targets::Values(values)) => {
            if values.cols() != outputs.cols() {
                return Err(Error::Shape(format!(
                    "{} prediction columns vs {} target columns",
                    outputs.cols(),
                    values.cols()
                )));
            }
            let n = (outputs.rows() * outputs.cols()) as f64;
            let mut total = 0.0;
            for i in 0..outputs.rows() {
                for j in 0..outputs.cols() {
                    let d = outputs.get(i, j) - values.get(i, j);
                    total += d * d;
                }
            }
            Ok(total / n)
        }
        _ => Err(Error::TaskMismatch(
            "targets kind does not match task".into(),
        )),
    }
}

/// Loss and gradient of [`compute_loss`] w.r.t. every parameter, by
/// backpropagation. Fails with the offending layer index if any gradient
/// entry is non-finite.
pub fn gradient(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<(f64, ParamVector)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let activations = forward_all(spec, params, &batch.inputs)?;
    let outputs = activations.last().unwrap();
    let loss = compute_loss(outputs, &batch.targets, spec.task)?;

    let batch_size = batch.len() as f64;
    let num_layers = spec.num_layers();

    // dL/d(final pre-activation). For classification with log-softmax + NLL
    // this is (softmax - onehot)/n; for regression MSE it is 2*(pred-y)/(n*d).
    let mut delta = Matrix::zeros(outputs.rows(), outputs.cols());
    match (&batch.targets, spec.task) {
        (Targets::Labels(labels), Task::Classification) => {
            for i in 0..outputs.rows() {
                for j in 0..outputs.cols() {
                    let softmax = outputs.get(i, j).exp();
                    let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                    delta.set(i, j, (softmax - onehot) / batch_size);
                }
            }
        }
        (Targets::Values(values), Task::Regression) => {
            let scale = 2.0 / (batch_size * outputs.cols() as f64);
            for i in 0..outputs.rows() {
                for j in 0..outputs.cols() {
                    delta.set(i, j, scale * (outputs.get(i, j) - values.get(i, j)));
                }
            }
        }
        _ => {
            return Err(Error::TaskMismatch(
                "targets kind does not match task".into(),
            ))
        }
    }

    let mut grad = ParamVector::zeros(spec);
    for layer in (0..num_layers).rev() {
        let (rows, cols) = params.shapes[layer];
        let layer_inputs: &Matrix = if layer == 0 {
            &batch.inputs
        } else {
            &activations[layer - 1]
        };
        let offset = grad.layer_offset(layer);
        // Weight and bias gradients.
        for i in 0..delta.rows() {
            let d_row = delta.row(i);
            let x_row = layer_inputs.row(i);
            for o in 0..rows {
                let d = d_row[o];
                if d != 0.0 {
                    let wslot = offset + o * cols;
                    for (c, xv) in x_row.iter().enumerate() {
                        grad.values[wslot + c] += d * xv;
                    }
                }
                grad.values[offset + rows * cols + o] += d;
            }
        }
        // Propagate to the previous layer through W and the ReLU mask.
        if layer > 0 {
            let w = params.weights(layer);
            let prev_act = &activations[layer - 1];
            let mut prev_delta = Matrix::zeros(delta.rows(), cols);
            for i in 0..delta.rows() {
                let d_row = delta.row(i);
                let out_row = prev_delta.row_mut(i);
                for (o, &d) in d_row.iter().enumerate() {
                    if d != 0.0 {
                        let wrow = &w[o * cols..(o + 1) * cols];
                        for (c, out_val) in out_row.iter_mut().enumerate() {
                            *out_val += d * wrow[c];
                        }
                    }
                }
                // ReLU derivative: pass gradient only where the unit fired.
                for (c, out_val) in out_row.iter_mut().enumerate() {
                    if prev_act.get(i, c) <= 0.0 {
                        *out_val = 0.0;
                    }
                }
            }
            delta = prev_delta;
        }
    }

    if let Some(layer) = grad.first_non_finite_layer() {
        return Err(Error::NonFinite {
            layer,
            context: "gradient".into(),
        });
    }
    Ok((loss, grad))
}

/// One SGD step on the batch: `params - eta * grad`.
pub fn sgd_step(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    eta: f64,
) -> Result<ParamVector> {
    if !(eta > 0.0) {
        return Err(Error::Config(format!("learning rate must be > 0, got {eta}")));
    }
    let (_, grad) = gradient(spec, params, batch)?;
    let mut next = params.clone();
    for (p, g) in next.values.iter_mut().zip(grad.values.iter()) {
        *p -= eta * g;
    }
    Ok(next)
}

/// Loss plus accuracy (classification only) of the model on a test batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

pub fn evaluate(spec: &ModelSpec, params: &ParamVector, test: &Batch) -> Result<EvalMetrics> {
    let outputs = forward(spec, params, &test.inputs)?;
    let loss = compute_loss(&outputs, &test.targets, spec.task)?;
    let accuracy = match (&test.targets, spec.task) {
        (Targets::Labels(labels), Task::Classification) => {
            let correct = labels
                .iter()
                .enumerate()
                .filter(|&(i, &label)| argmax(outputs.row(i)) == label)
                .count();
            Some(correct as f64 / labels.len() as f64)
        }
        _ => None,
    };
    Ok(EvalMetrics { loss, accuracy })
}

/// Index of the row maximum; first index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, StreamPurpose};
    use proptest::prelude::*;

    fn seeded_net(seed: u64, sizes: Vec<usize>, task: Task) -> (ModelSpec, ParamVector) {
        let spec = ModelSpec::new(sizes, task).unwrap();
        let mut rng = stream_rng(seed, StreamPurpose::Init, &[]);
        let params = init_params(&spec, &mut rng);
        (spec, params)
    }

    fn seeded_matrix(seed: u64, rows: usize, cols: usize) -> Matrix {
        let mut rng = stream_rng(seed, StreamPurpose::DataGen, &[]);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    /// Independent forward oracle: evaluates one output scalar at a time with
    /// naive index arithmetic, never touching the library's forward path.
    fn forward_oracle(spec: &ModelSpec, params: &ParamVector, input: &[f64]) -> Vec<f64> {
        let mut current = input.to_vec();
        let shapes = spec.layer_shapes();
        for (layer, &(rows, cols)) in shapes.iter().enumerate() {
            let w = params.weights(layer);
            let b = params.biases(layer);
            let mut next = vec![0.0; rows];
            for o in 0..rows {
                let mut acc = b[o];
                for c in 0..cols {
                    acc += w[o * cols + c] * current[c];
                }
                next[o] = acc;
            }
            let last = layer == shapes.len() - 1;
            if !last {
                for v in &mut next {
                    *v = v.max(0.0);
                }
            } else if spec.task() == Task::Classification {
                let max = next.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let log_sum = max + next.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                for v in &mut next {
                    *v -= log_sum;
                }
            }
            current = next;
        }
        current
    }

    #[test]
    fn identity_linear_net_passes_input_through() {
        let spec = ModelSpec::new(vec![2, 2], Task::Regression).unwrap();
        let mut params = ParamVector::zeros(&spec);
        params.values_mut()[0] = 1.0; // w[0][0]
        params.values_mut()[3] = 1.0; // w[1][1]
        let inputs = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let out = forward(&spec, &params, &inputs).unwrap();
        assert_eq!(out.row(0), &[1.0, 2.0]);
    }

    #[test]
    fn zero_final_layer_gives_uniform_log_probs() {
        let (spec, mut params) = seeded_net(11, vec![2, 4, 3], Task::Classification);
        // Zero the final affine layer: weights and biases of layer 1.
        let first_layer = 4 * 2 + 4;
        for v in &mut params.values_mut()[first_layer..] {
            *v = 0.0;
        }
        let inputs = seeded_matrix(3, 5, 2);
        let out = forward(&spec, &params, &inputs).unwrap();
        let expected = (1.0f64 / 3.0).ln();
        for i in 0..out.rows() {
            for j in 0..out.cols() {
                assert!((out.get(i, j) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn seeded_net_matches_independent_forward_oracle() {
        let (spec, params) = seeded_net(42, vec![2, 4, 3], Task::Classification);
        let inputs = seeded_matrix(7, 6, 2);
        let out = forward(&spec, &params, &inputs).unwrap();
        for i in 0..inputs.rows() {
            let expected = forward_oracle(&spec, &params, inputs.row(i));
            for j in 0..out.cols() {
                assert!(
                    (out.get(i, j) - expected[j]).abs() < 1e-12,
                    "row {i} col {j}: {} vs oracle {}",
                    out.get(i, j),
                    expected[j]
                );
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let (spec, params) = seeded_net(1, vec![3, 4, 2], Task::Classification);
        let inputs = seeded_matrix(2, 5, 2);
        assert!(matches!(
            forward(&spec, &params, &inputs),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        // log-prob 0 for the target class, floor elsewhere.
        let outputs = Matrix::from_vec(1, 2, vec![0.0, -1e30]).unwrap();
        let loss = compute_loss(&outputs, &Targets::Labels(vec![0]), Task::Classification).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn uniform_log_probs_cost_ln_10() {
        let uniform = (1.0f64 / 10.0).ln();
        let outputs = Matrix::from_vec(2, 10, vec![uniform; 20]).unwrap();
        let loss =
            compute_loss(&outputs, &Targets::Labels(vec![3, 7]), Task::Classification).unwrap();
        assert!((loss - 2.302585092994046).abs() < 1e-12);
    }

    #[test]
    fn mse_example() {
        let outputs = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let targets = Targets::Values(Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap());
        let loss = compute_loss(&outputs, &targets, Task::Regression).unwrap();
        assert_eq!(loss, 2.5);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let outputs = Matrix::zeros(0, 2);
        assert!(matches!(
            compute_loss(&outputs, &Targets::Labels(vec![]), Task::Classification),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        // Identity-ish single-layer net that already fits the target exactly.
        let spec = ModelSpec::new(vec![1, 1], Task::Regression).unwrap();
        let mut params = ParamVector::zeros(&spec);
        params.values_mut()[0] = 2.0;
        let batch = Batch::new(
            Matrix::from_vec(1, 1, vec![3.0]).unwrap(),
            Targets::Values(Matrix::from_vec(1, 1, vec![6.0]).unwrap()),
        )
        .unwrap();
        let next = sgd_step(&spec, &params, &batch, 0.1).unwrap();
        assert_eq!(next, params);
    }

    #[test]
    fn single_neuron_sgd_step_matches_hand_computation() {
        // w=1, b=0, x=2, target 0: dL/dw = 2*(2)*2 = 8, so w' = 1 - 0.1*8 = 0.2.
        let spec = ModelSpec::new(vec![1, 1], Task::Regression).unwrap();
        let mut params = ParamVector::zeros(&spec);
        params.values_mut()[0] = 1.0;
        let batch = Batch::new(
            Matrix::from_vec(1, 1, vec![2.0]).unwrap(),
            Targets::Values(Matrix::from_vec(1, 1, vec![0.0]).unwrap()),
        )
        .unwrap();
        let next = sgd_step(&spec, &params, &batch, 0.1).unwrap();
        assert!((next.values()[0] - 0.2).abs() < 1e-12);
        // Finite-difference cross-check of the same gradient.
        let (_, grad) = gradient(&spec, &params, &batch).unwrap();
        let fd = finite_difference(&spec, &params, &batch, 0);
        assert!((grad.values()[0] - 8.0).abs() < 1e-9);
        assert!((grad.values()[0] - fd).abs() < 1e-6);
    }

    /// Central finite difference of the batch loss w.r.t. parameter `idx`.
    fn finite_difference(spec: &ModelSpec, params: &ParamVector, batch: &Batch, idx: usize) -> f64 {
        let h = 1e-6;
        let mut plus = params.clone();
        plus.values_mut()[idx] += h;
        let mut minus = params.clone();
        minus.values_mut()[idx] -= h;
        let loss_plus = compute_loss(
            &forward(spec, &plus, &batch.inputs).unwrap(),
            &batch.targets,
            spec.task(),
        )
        .unwrap();
        let loss_minus = compute_loss(
            &forward(spec, &minus, &batch.inputs).unwrap(),
            &batch.targets,
            spec.task(),
        )
        .unwrap();
        (loss_plus - loss_minus) / (2.0 * h)
    }

    fn assert_gradient_matches_fd(seed: u64, task: Task) {
        let sizes = vec![2, 4, 3];
        let (spec, params) = seeded_net(seed, sizes, task);
        let inputs = seeded_matrix(seed.wrapping_add(1), 4, 2);
        let targets = match task {
            Task::Classification => Targets::Labels(vec![0, 1, 2, 1]),
            Task::Regression => Targets::Values(seeded_matrix(seed.wrapping_add(2), 4, 3)),
        };
        let batch = Batch::new(inputs, targets).unwrap();
        let (_, grad) = gradient(&spec, &params, &batch).unwrap();
        for idx in 0..params.len() {
            let analytic = grad.values()[idx];
            let numeric = finite_difference(&spec, &params, &batch, idx);
            let diff = (analytic - numeric).abs();
            let scale = analytic.abs().max(numeric.abs());
            assert!(
                diff <= 1e-8 || diff / scale < 1e-4,
                "seed {seed} param {idx}: analytic {analytic} vs fd {numeric}"
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences_both_tasks() {
        for seed in 0..5 {
            assert_gradient_matches_fd(100 + seed, Task::Classification);
            assert_gradient_matches_fd(200 + seed, Task::Regression);
        }
    }

    #[test]
    fn update_norm_examples() {
        assert_eq!(update_norm(&[0.0; 8]), 0.0);
        assert_eq!(update_norm(&[3.0, 4.0]), 5.0);
    }

    #[test]
    fn update_norm_matches_compensated_summation_oracle() {
        let mut rng = stream_rng(9, StreamPurpose::DataGen, &[]);
        let values: Vec<f64> = (0..1000).map(|_| rng.random_range(-10.0..10.0)).collect();
        // Kahan-compensated sum of squares as the independent accumulator.
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for v in &values {
            let y = v * v - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        let oracle = sum.sqrt();
        let got = update_norm(&values);
        assert!((got - oracle).abs() / oracle < 1e-12);
    }

    #[test]
    fn seeded_training_is_bitwise_deterministic() {
        let run = || {
            let (spec, params) = seeded_net(5, vec![3, 8, 2], Task::Classification);
            let inputs = seeded_matrix(6, 10, 3);
            let batch = Batch::new(inputs, Targets::Labels(vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1]))
                .unwrap();
            let mut p = params;
            for _ in 0..5 {
                p = sgd_step(&spec, &p, &batch, 0.05).unwrap();
            }
            p
        };
        assert_eq!(run().values(), run().values());
    }

    #[test]
    fn small_step_does_not_increase_loss() {
        for seed in 0..100u64 {
            let task = if seed % 2 == 0 {
                Task::Classification
            } else {
                Task::Regression
            };
            let (spec, params) = seeded_net(300 + seed, vec![3, 6, 2], task);
            let inputs = seeded_matrix(400 + seed, 6, 3);
            let targets = match task {
                Task::Classification => Targets::Labels(vec![0, 1, 1, 0, 1, 0]),
                Task::Regression => Targets::Values(seeded_matrix(500 + seed, 6, 2)),
            };
            let batch = Batch::new(inputs, targets).unwrap();
            let (loss_before, _) = gradient(&spec, &params, &batch).unwrap();
            let next = sgd_step(&spec, &params, &batch, 1e-3).unwrap();
            let (loss_after, _) = gradient(&spec, &next, &batch).unwrap();
            assert!(
                loss_after <= loss_before + 1e-12,
                "seed {seed}: loss rose from {loss_before} to {loss_after}"
            );
        }
    }

    proptest! {
        #[test]
        fn log_softmax_rows_sum_to_one(seed in 0u64..500, rows in 1usize..6) {
            let (spec, params) = seeded_net(seed, vec![3, 5, 4], Task::Classification);
            let inputs = seeded_matrix(seed.wrapping_add(9000), rows, 3);
            let out = forward(&spec, &params, &inputs).unwrap();
            for i in 0..out.rows() {
                let total: f64 = out.row(i).iter().map(|v| v.exp()).sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
            }
        }
    }
}
