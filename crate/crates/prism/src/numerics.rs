//! Small dense networks and the loss functions used across the pipeline.
//!
//! Everything is `f64`, row-major `Vec` storage, exact reverse-mode
//! gradients. Hidden layers apply a rectifier, the output layer is linear;
//! softmax lives inside the loss so logits stay unnormalized everywhere
//! else. `finite_difference_check` is the gradient oracle the test suite
//! leans on: central differences with detection of non-smooth points
//! (rectifier and hinge kinks) which are reported as excluded rather than
//! failed.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Row-major 2-D array.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Matrix> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in &rows {
            if row.len() != c {
                return Err(Error::shape(format!(
                    "ragged rows: expected {} columns, found {}",
                    c,
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }
}

/// Fully connected network: `dims = [input, hidden.., output]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedforwardNet {
    dims: Vec<usize>,
    /// `weights[l]` has shape `dims[l+1] x dims[l]`.
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
}

/// Per-layer parameter gradients, same shapes as the net they came from.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub d_weights: Vec<Matrix>,
    pub d_biases: Vec<Vec<f64>>,
}

impl GradientSet {
    fn zeros_like(net: &FeedforwardNet) -> GradientSet {
        GradientSet {
            d_weights: net
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows, w.cols))
                .collect(),
            d_biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }
}

impl FeedforwardNet {
    /// Uniform init on `[-l, l]` with `l = sqrt(6 / (fan_in + fan_out))`,
    /// drawn from a dedicated stream of `seed`.
    pub fn new(dims: &[usize], seed: u64) -> Result<FeedforwardNet> {
        if dims.len() < 2 {
            return Err(Error::input(format!(
                "a network needs input and output dims, got {:?}",
                dims
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::input(format!("zero-width layer in {:?}", dims)));
        }
        let mut rng = rng::stream_rng(seed, "net-init", 0);
        let mut weights = Vec::with_capacity(dims.len() - 1);
        let mut biases = Vec::with_capacity(dims.len() - 1);
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut w = Matrix::zeros(fan_out, fan_in);
            for v in w.data.iter_mut() {
                *v = rng.gen_range(-limit..limit);
            }
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(FeedforwardNet { dims: dims.to_vec(), weights, biases })
    }

    /// Rebuilds a net from explicit parameters, validating shapes.
    pub fn from_parameters(
        dims: Vec<usize>,
        weights: Vec<Matrix>,
        biases: Vec<Vec<f64>>,
    ) -> Result<FeedforwardNet> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::schema(format!("bad layer dims {:?}", dims)));
        }
        if weights.len() != dims.len() - 1 || biases.len() != dims.len() - 1 {
            return Err(Error::schema(format!(
                "expected {} layers, got {} weight and {} bias blocks",
                dims.len() - 1,
                weights.len(),
                biases.len()
            )));
        }
        for l in 0..weights.len() {
            if weights[l].rows != dims[l + 1] || weights[l].cols != dims[l] {
                return Err(Error::schema(format!(
                    "layer {} weights are {}x{}, dims say {}x{}",
                    l,
                    weights[l].rows,
                    weights[l].cols,
                    dims[l + 1],
                    dims[l]
                )));
            }
            if weights[l].data.len() != weights[l].rows * weights[l].cols {
                return Err(Error::schema(format!("layer {} weight data length", l)));
            }
            if biases[l].len() != dims[l + 1] {
                return Err(Error::schema(format!("layer {} bias length", l)));
            }
        }
        Ok(FeedforwardNet { dims, weights, biases })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    pub fn layer_weights(&self, l: usize) -> &Matrix {
        &self.weights[l]
    }

    pub fn layer_biases(&self, l: usize) -> &[f64] {
        &self.biases[l]
    }

    pub fn param_count(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.data.len() + b.len())
            .sum()
    }

    fn check_input(&self, inputs: &Matrix) -> Result<()> {
        if inputs.cols != self.dims[0] {
            return Err(Error::shape(format!(
                "network expects {} input features, batch has {}",
                self.dims[0], inputs.cols
            )));
        }
        if inputs.rows == 0 {
            return Err(Error::input("empty batch".to_string()));
        }
        Ok(())
    }

    /// Batch forward pass; returns `rows x output_dim` activations.
    pub fn forward(&self, inputs: &Matrix) -> Result<Matrix> {
        self.check_input(inputs)?;
        let mut current = inputs.clone();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            current = affine(&current, w, b);
            if l != last {
                for v in current.data.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
        }
        Ok(current)
    }

    /// Forward for a single flattened sample.
    pub fn forward_one(&self, input: &[f64]) -> Result<Vec<f64>> {
        let m = Matrix { rows: 1, cols: input.len(), data: input.to_vec() };
        Ok(self.forward(&m)?.data)
    }

    /// Reverse-mode gradients of `sum(upstream * output)` with respect to
    /// every parameter and to the inputs. `upstream` must be
    /// `rows x output_dim`; pass the loss gradient at the outputs.
    pub fn gradients(
        &self,
        inputs: &Matrix,
        upstream: &Matrix,
    ) -> Result<(GradientSet, Matrix)> {
        self.check_input(inputs)?;
        if upstream.rows != inputs.rows || upstream.cols != self.output_dim() {
            return Err(Error::shape(format!(
                "upstream is {}x{}, expected {}x{}",
                upstream.rows,
                upstream.cols,
                inputs.rows,
                self.output_dim()
            )));
        }

        // Post-activation values per layer, activations[0] being the input.
        let last = self.weights.len() - 1;
        let mut activations = Vec::with_capacity(self.weights.len() + 1);
        activations.push(inputs.clone());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = affine(activations.last().unwrap(), w, b);
            if l != last {
                for v in z.data.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            activations.push(z);
        }

        let mut grads = GradientSet::zeros_like(self);
        let mut delta = upstream.clone();
        for l in (0..self.weights.len()).rev() {
            let input_act = &activations[l];
            // d_w[j][k] = sum_i delta[i][j] * act[i][k]; d_b[j] = sum_i delta[i][j]
            let dw = &mut grads.d_weights[l];
            let db = &mut grads.d_biases[l];
            for i in 0..delta.rows {
                let drow = delta.row(i);
                let arow = input_act.row(i);
                for (j, &d) in drow.iter().enumerate() {
                    if d != 0.0 {
                        db[j] += d;
                        let wrow = dw.row_mut(j);
                        for (wk, &a) in wrow.iter_mut().zip(arow) {
                            *wk += d * a;
                        }
                    }
                }
            }
            // delta_prev[i][k] = sum_j delta[i][j] * w[j][k], masked by the
            // rectifier derivative when layer l-1 exists.
            let w = &self.weights[l];
            let mut prev = Matrix::zeros(delta.rows, w.cols);
            for i in 0..delta.rows {
                let drow = delta.row(i);
                let prow = prev.row_mut(i);
                for (j, &d) in drow.iter().enumerate() {
                    if d != 0.0 {
                        let wrow = w.row(j);
                        for (pk, &wv) in prow.iter_mut().zip(wrow) {
                            *pk += d * wv;
                        }
                    }
                }
                if l > 0 {
                    let act = activations[l].row(i);
                    for (pk, &a) in prow.iter_mut().zip(act) {
                        if a <= 0.0 {
                            *pk = 0.0;
                        }
                    }
                }
            }
            delta = prev;
        }
        Ok((grads, delta))
    }

    /// In-place step `theta -= lr * grad`.
    pub fn sgd_step(&mut self, grads: &GradientSet, lr: f64) -> Result<()> {
        if grads.d_weights.len() != self.weights.len() {
            return Err(Error::shape("gradient set from a different net".to_string()));
        }
        for (w, dw) in self.weights.iter_mut().zip(&grads.d_weights) {
            if w.rows != dw.rows || w.cols != dw.cols {
                return Err(Error::shape("gradient block shape mismatch".to_string()));
            }
            for (v, g) in w.data.iter_mut().zip(&dw.data) {
                *v -= lr * g;
            }
        }
        for (b, db) in self.biases.iter_mut().zip(&grads.d_biases) {
            for (v, g) in b.iter_mut().zip(db) {
                *v -= lr * g;
            }
        }
        Ok(())
    }

    fn param_get(&self, idx: usize) -> f64 {
        let (l, in_bias, off) = self.locate(idx);
        if in_bias {
            self.biases[l][off]
        } else {
            self.weights[l].data[off]
        }
    }

    fn param_set(&mut self, idx: usize, v: f64) {
        let (l, in_bias, off) = self.locate(idx);
        if in_bias {
            self.biases[l][off] = v;
        } else {
            self.weights[l].data[off] = v;
        }
    }

    fn locate(&self, mut idx: usize) -> (usize, bool, usize) {
        for l in 0..self.weights.len() {
            let nw = self.weights[l].data.len();
            if idx < nw {
                return (l, false, idx);
            }
            idx -= nw;
            let nb = self.biases[l].len();
            if idx < nb {
                return (l, true, idx);
            }
            idx -= nb;
        }
        panic!("parameter index out of range");
    }
}

fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    let mut out = Matrix::zeros(x.rows, w.rows);
    for i in 0..x.rows {
        let xrow = x.row(i);
        let orow = out.row_mut(i);
        for j in 0..w.rows {
            let wrow = w.row(j);
            let mut acc = b[j];
            for (xv, wv) in xrow.iter().zip(wrow) {
                acc += xv * wv;
            }
            orow[j] = acc;
        }
    }
    out
}

/// Softmax probabilities of one logit row, computed stably.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= sum;
    }
    out
}

/// Mean cross-entropy of softmaxed logits against integer labels.
///
/// Returns the loss and its gradient with respect to the logits,
/// `(softmax - onehot) / batch`.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows != labels.len() {
        return Err(Error::shape(format!(
            "{} logit rows but {} labels",
            logits.rows,
            labels.len()
        )));
    }
    if logits.rows == 0 {
        return Err(Error::input("empty batch".to_string()));
    }
    let classes = logits.cols;
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::input(format!(
            "label {} out of range for {} classes",
            bad, classes
        )));
    }
    let batch = logits.rows as f64;
    let mut grad = Matrix::zeros(logits.rows, classes);
    let mut loss = 0.0;
    for i in 0..logits.rows {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::Numeric("non-finite logit".to_string()));
        }
        let mut sum = 0.0;
        for &v in row {
            sum += (v - max).exp();
        }
        let log_sum = sum.ln() + max;
        loss += log_sum - row[labels[i]];
        let grow = grad.row_mut(i);
        for (j, &v) in row.iter().enumerate() {
            let p = (v - log_sum).exp();
            grow[j] = (p - if j == labels[i] { 1.0 } else { 0.0 }) / batch;
        }
    }
    Ok((loss / batch, grad))
}

/// One term of the pairwise contrastive loss at embedding distance `d`:
/// `d^2` for a positive pair, `max(margin - d, 0)^2` for a negative one.
///
/// Returns `(term, d(term)/d(d))`. Averaging over pairs, including the
/// `1/(2 * n_pairs)` factor, is the caller's job. The hinge subgradient at
/// `d == margin` is 0.
pub fn contrastive_pair_loss(d: f64, same: bool, margin: f64) -> Result<(f64, f64)> {
    if !(d >= 0.0) {
        return Err(Error::input(format!("pair distance must be >= 0, got {}", d)));
    }
    if !(margin > 0.0) {
        return Err(Error::input(format!("margin must be > 0, got {}", margin)));
    }
    if same {
        Ok((d * d, 2.0 * d))
    } else {
        let slack = margin - d;
        if slack > 0.0 {
            Ok((slack * slack, -2.0 * slack))
        } else {
            Ok((0.0, 0.0))
        }
    }
}

/// Identifies one scalar parameter of a net.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId {
    pub layer: usize,
    pub bias: bool,
    pub offset: usize,
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub tolerance: f64,
    pub step: f64,
    /// Largest relative error over parameters that were not excluded.
    pub max_rel_err: f64,
    pub checked: usize,
    /// Parameters sitting on a non-smooth point, where central differences
    /// say nothing; listed instead of judged.
    pub excluded: Vec<ParamId>,
    pub worst: Option<ParamId>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

const FD_STEP: f64 = 1e-5;

/// Compares the analytic gradient of an arbitrary scalar loss against
/// central finite differences over every parameter of `net`.
///
/// `loss_fn` must return the loss value and its full analytic gradient at
/// the given parameters. A parameter whose one-sided slopes disagree by
/// more than 10% of the gradient scale sits on a kink; it is excluded from
/// the verdict and reported.
pub fn finite_difference_check<F>(
    net: &mut FeedforwardNet,
    mut loss_fn: F,
    tolerance: f64,
) -> Result<FdReport>
where
    F: FnMut(&FeedforwardNet) -> Result<(f64, GradientSet)>,
{
    if !(tolerance > 0.0) {
        return Err(Error::input("tolerance must be positive".to_string()));
    }
    let (f0, analytic) = loss_fn(net)?;
    if !f0.is_finite() {
        return Err(Error::Numeric("loss is not finite at the base point".to_string()));
    }
    let h = FD_STEP;
    let n = net.param_count();
    let mut report = FdReport {
        tolerance,
        step: h,
        max_rel_err: 0.0,
        checked: 0,
        excluded: Vec::new(),
        worst: None,
    };
    for idx in 0..n {
        let (layer, bias, offset) = net.locate(idx);
        let id = ParamId { layer, bias, offset };
        let saved = net.param_get(idx);
        net.param_set(idx, saved + h);
        let (f_plus, _) = loss_fn(net)?;
        net.param_set(idx, saved - h);
        let (f_minus, _) = loss_fn(net)?;
        net.param_set(idx, saved);

        let central = (f_plus - f_minus) / (2.0 * h);
        let a = if bias {
            analytic.d_biases[layer][offset]
        } else {
            analytic.d_weights[layer].data[offset]
        };
        let scale = central.abs().max(a.abs());
        if scale < 1e-7 {
            // Both slopes vanish at finite-difference resolution.
            report.checked += 1;
            continue;
        }
        // Disagreement between the two one-sided slopes reveals a kink
        // within the stencil.
        let one_sided_gap = (f_plus - 2.0 * f0 + f_minus).abs() / h;
        let rel = (a - central).abs() / scale;
        if rel >= tolerance && one_sided_gap > 0.1 * scale {
            report.excluded.push(id);
            continue;
        }
        report.checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some(id);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn affine_layer_matches_hand_computation() {
        // W = [[2]], b = [1], x = [3] -> 7
        let net = FeedforwardNet::from_parameters(
            vec![1, 1],
            vec![Matrix { rows: 1, cols: 1, data: vec![2.0] }],
            vec![vec![1.0]],
        )
        .unwrap();
        let out = net.forward_one(&[3.0]).unwrap();
        assert_eq!(out, vec![7.0]);
    }

    #[test]
    fn hidden_layers_rectify_and_output_stays_linear() {
        // Two layers, both identity weights: negative input is clipped by
        // the hidden rectifier, then passed through linearly.
        let ident = Matrix { rows: 1, cols: 1, data: vec![1.0] };
        let net = FeedforwardNet::from_parameters(
            vec![1, 1, 1],
            vec![ident.clone(), ident],
            vec![vec![0.0], vec![0.0]],
        )
        .unwrap();
        assert_eq!(net.forward_one(&[-5.0]).unwrap(), vec![0.0]);
        assert_eq!(net.forward_one(&[2.5]).unwrap(), vec![2.5]);
    }

    #[test]
    fn init_is_seed_deterministic_and_in_glorot_range() {
        let a = FeedforwardNet::new(&[4, 8, 3], 11).unwrap();
        let b = FeedforwardNet::new(&[4, 8, 3], 11).unwrap();
        let c = FeedforwardNet::new(&[4, 8, 3], 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let limit0 = (6.0f64 / (4 + 8) as f64).sqrt();
        assert!(a.layer_weights(0).data.iter().all(|v| v.abs() < limit0));
        assert!(a.layer_biases(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_degenerate_dims() {
        assert!(FeedforwardNet::new(&[5], 0).is_err());
        assert!(FeedforwardNet::new(&[5, 0, 2], 0).is_err());
    }

    #[test]
    fn uniform_logits_cost_ln_c() {
        // All logits equal: softmax is uniform, loss = ln C for any label.
        let logits = Matrix::from_rows(vec![vec![0.3, 0.3, 0.3, 0.3]]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[2]).unwrap();
        assert_relative_eq!(loss, 4.0f64.ln(), max_relative = 1e-12);
        assert_relative_eq!(grad.get(0, 2), 0.25 - 1.0, max_relative = 1e-12);
        assert_relative_eq!(grad.get(0, 0), 0.25, max_relative = 1e-12);
    }

    #[test]
    fn two_equal_logits_cost_ln_2() {
        let logits = Matrix::from_rows(vec![vec![0.0, 0.0]]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert_relative_eq!(loss, 2.0f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn cross_entropy_grad_rows_sum_to_zero() {
        let logits = Matrix::from_rows(vec![
            vec![1.0, -2.0, 0.5],
            vec![0.0, 3.0, -1.0],
        ])
        .unwrap();
        let (_, grad) = softmax_cross_entropy(&logits, &[0, 2]).unwrap();
        for i in 0..2 {
            let s: f64 = grad.row(i).iter().sum();
            assert!(s.abs() < 1e-14);
        }
    }

    #[test]
    fn cross_entropy_is_stable_for_large_logits() {
        let logits = Matrix::from_rows(vec![vec![1000.0, 0.0]]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss.is_finite());
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels_and_shapes() {
        let logits = Matrix::from_rows(vec![vec![0.0, 0.0]]).unwrap();
        assert!(softmax_cross_entropy(&logits, &[2]).is_err());
        assert!(softmax_cross_entropy(&logits, &[0, 1]).is_err());
    }

    #[test]
    fn contrastive_hand_values() {
        // Negative pair, d = 0.4, margin 1: (1 - 0.4)^2 = 0.36.
        let (term, dd) = contrastive_pair_loss(0.4, false, 1.0).unwrap();
        assert_relative_eq!(term, 0.36, max_relative = 1e-12);
        assert_relative_eq!(dd, -1.2, max_relative = 1e-12);
        // Positive pair: d^2.
        let (term, dd) = contrastive_pair_loss(0.4, true, 1.0).unwrap();
        assert_relative_eq!(term, 0.16, max_relative = 1e-12);
        assert_relative_eq!(dd, 0.8, max_relative = 1e-12);
    }

    #[test]
    fn contrastive_hinge_is_flat_at_and_past_margin() {
        assert_eq!(contrastive_pair_loss(1.0, false, 1.0).unwrap(), (0.0, 0.0));
        assert_eq!(contrastive_pair_loss(7.0, false, 1.0).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn contrastive_rejects_bad_inputs() {
        assert!(contrastive_pair_loss(-0.1, true, 1.0).is_err());
        assert!(contrastive_pair_loss(0.5, true, 0.0).is_err());
        assert!(contrastive_pair_loss(f64::NAN, true, 1.0).is_err());
    }

    #[test]
    fn analytic_gradients_match_finite_differences_on_cross_entropy() {
        let mut net = FeedforwardNet::new(&[5, 7, 3], 99).unwrap();
        let mut x = Matrix::zeros(6, 5);
        let mut r = crate::rng::stream_rng(99, "fd-x", 0);
        for v in x.data.iter_mut() {
            *v = r.gen_range(-1.0..1.0);
        }
        let labels = vec![0, 1, 2, 0, 1, 2];
        let report = finite_difference_check(
            &mut net,
            |n| {
                let logits = n.forward(&x)?;
                let (loss, up) = softmax_cross_entropy(&logits, &labels)?;
                let (grads, _) = n.gradients(&x, &up)?;
                Ok((loss, grads))
            },
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
        assert!(report.checked > 0);
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let net = FeedforwardNet::new(&[4, 6, 2], 5).unwrap();
        let mut x = Matrix::zeros(3, 4);
        let mut r = crate::rng::stream_rng(5, "fd-in", 0);
        for v in x.data.iter_mut() {
            *v = r.gen_range(-1.0..1.0);
        }
        let labels = vec![0, 1, 1];
        let loss_of = |m: &Matrix| {
            let logits = net.forward(m).unwrap();
            softmax_cross_entropy(&logits, &labels).unwrap().0
        };
        let logits = net.forward(&x).unwrap();
        let (_, up) = softmax_cross_entropy(&logits, &labels).unwrap();
        let (_, dx) = net.gradients(&x, &up).unwrap();
        let h = 1e-5;
        for idx in 0..x.data.len() {
            let saved = x.data[idx];
            x.data[idx] = saved + h;
            let fp = loss_of(&x);
            x.data[idx] = saved - h;
            let fm = loss_of(&x);
            x.data[idx] = saved;
            let central = (fp - fm) / (2.0 * h);
            let a = dx.data[idx];
            let scale = central.abs().max(a.abs());
            if scale > 1e-7 {
                assert!(
                    (a - central).abs() / scale < 1e-4,
                    "input grad {} vs fd {}",
                    a,
                    central
                );
            }
        }
    }

    #[test]
    fn fd_check_excludes_hinge_points() {
        // A 1-parameter net feeding the negative branch of the contrastive
        // hinge exactly at d = margin. The loss is continuous but kinked,
        // so the parameter must land in the excluded list, not fail.
        let mut net = FeedforwardNet::from_parameters(
            vec![1, 1],
            vec![Matrix { rows: 1, cols: 1, data: vec![1.0] }],
            vec![vec![0.0]],
        )
        .unwrap();
        let report = finite_difference_check(
            &mut net,
            |n| {
                // d = |w|, margin = 1, negative pair: hinge at w = 1.
                let d = n.forward_one(&[1.0])?[0].abs();
                let (term, dd) = contrastive_pair_loss(d, false, 1.0)?;
                let mut grads = GradientSet::zeros_like(n);
                grads.d_weights[0].data[0] = dd;
                Ok((term, grads))
            },
            1e-4,
        )
        .unwrap();
        // Both the weight and the bias land exactly on the kink.
        assert_eq!(report.excluded.len(), 2);
        assert!(report
            .excluded
            .contains(&ParamId { layer: 0, bias: false, offset: 0 }));
        assert_eq!(report.checked, 0);
    }

    #[test]
    fn sgd_step_moves_against_gradient() {
        let mut net = FeedforwardNet::from_parameters(
            vec![1, 1],
            vec![Matrix { rows: 1, cols: 1, data: vec![2.0] }],
            vec![vec![1.0]],
        )
        .unwrap();
        let mut grads = GradientSet::zeros_like(&net);
        grads.d_weights[0].data[0] = 0.5;
        grads.d_biases[0][0] = -1.0;
        net.sgd_step(&grads, 0.1).unwrap();
        assert_relative_eq!(net.layer_weights(0).data[0], 1.95);
        assert_relative_eq!(net.layer_biases(0)[0], 1.1);
    }
}
