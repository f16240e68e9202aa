//! The boundary pseudo-gradient generator: a three-layer tanh network with
//! a 2D gradient head and a scalar benign-membership confidence head,
//! trained by hand-rolled backpropagation on the composite
//! membership/spread/separation loss.
//!
//! Cluster labels are produced by DBSCAN and are treated as constants in
//! the membership loss; gradients flow into the generated points only
//! through the spread and separation terms.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::clustering::Point2;
use crate::error::{Error, Result};

/// Probabilities are clamped to this band before the membership logs.
const PROB_CLAMP: f64 = 1e-7;
/// Guard against division by a vanishing standard deviation or pairwise
/// distance in the loss backward passes.
const GRAD_GUARD: f64 = 1e-12;

/// Checkpoint format version tag.
pub const CHECKPOINT_VERSION: &str = "encagg-gen-v1";

/// Scalar hyper-parameters of one generator training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorHyper {
    /// Weight of the directional spread loss.
    pub alpha: f64,
    /// Weight of the pairwise separation loss.
    pub beta: f64,
    /// Positive-class weight of the membership loss (`w1 > w0`).
    pub w1: f64,
    /// Negative-class weight of the membership loss.
    pub w0: f64,
    /// Minimum directional dispersion target.
    pub tau: f64,
    /// Pairwise separation target as a multiple of the clustering radius.
    pub rho: f64,
    /// Gradient-descent step size.
    pub lr: f64,
}

impl Default for GeneratorHyper {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            w1: 2.0,
            w0: 1.0,
            tau: 0.25,
            rho: 0.5,
            lr: 1e-3,
        }
    }
}

/// A batch of generated pseudo-gradients with their benign-membership
/// confidences and the noise vectors they came from.
#[derive(Debug, Clone)]
pub struct PseudoGradientBatch {
    pub points: Vec<Point2>,
    pub confidences: Vec<f64>,
    pub source_noise: Array2<f64>,
}

/// Loss components of one training step, evaluated before the update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorLossReport {
    pub membership: f64,
    pub spread: f64,
    pub separation: f64,
    pub total: f64,
    /// Benign-cluster labels the step was trained against.
    pub labels: Vec<bool>,
}

/// Parameters of the pseudo-gradient generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel {
    w1: Array2<f64>, // hidden × noise_dim
    b1: Array1<f64>,
    w2: Array2<f64>, // hidden × hidden
    b2: Array1<f64>,
    w3: Array2<f64>, // hidden × hidden
    b3: Array1<f64>,
    w_g: Array2<f64>, // 2 × hidden
    b_g: Array1<f64>,
    w_y: Array1<f64>, // hidden
    b_y: f64,
    noise_dim: usize,
    hidden_dim: usize,
    /// Affine map from the tanh box to projected-gradient coordinates.
    output_scale: f64,
    output_center: Point2,
}

/// Per-parameter gradients, same shapes as the model.
#[derive(Debug, Clone)]
pub struct GeneratorGradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
    pub w_g: Array2<f64>,
    pub b_g: Array1<f64>,
    pub w_y: Array1<f64>,
    pub b_y: f64,
}

impl GeneratorGradients {
    /// Euclidean norm over all parameter gradients.
    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.w1.iter());
        out.extend(self.b1.iter());
        out.extend(self.w2.iter());
        out.extend(self.b2.iter());
        out.extend(self.w3.iter());
        out.extend(self.b3.iter());
        out.extend(self.w_g.iter());
        out.extend(self.b_g.iter());
        out.extend(self.w_y.iter());
        out.push(self.b_y);
        out
    }
}

struct Forward {
    h1: Array2<f64>,
    h2: Array2<f64>,
    h3: Array2<f64>,
    g_raw: Array2<f64>,
    points: Array2<f64>,
    confidences: Array1<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl GeneratorModel {
    /// Fresh model with N(0, 1/fan_in) weights and zero biases.
    pub fn new(noise_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if hidden_dim < 2 || noise_dim < 1 {
            return Err(Error::InvalidInput(
                "generator needs hidden_dim >= 2, noise_dim >= 1".into(),
            ));
        }
        let mut init = |rows: usize, cols: usize| -> Array2<f64> {
            let scale = 1.0 / (cols as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| {
                let z: f64 = rng.sample(StandardNormal);
                z * scale
            })
        };
        let w1 = init(hidden_dim, noise_dim);
        let w2 = init(hidden_dim, hidden_dim);
        let w3 = init(hidden_dim, hidden_dim);
        let w_g = init(2, hidden_dim);
        let w_y = init(1, hidden_dim).row(0).to_owned();
        Ok(Self {
            w1,
            b1: Array1::zeros(hidden_dim),
            w2,
            b2: Array1::zeros(hidden_dim),
            w3,
            b3: Array1::zeros(hidden_dim),
            w_g,
            b_g: Array1::zeros(2),
            w_y,
            b_y: 0.0,
            noise_dim,
            hidden_dim,
            output_scale: 1.0,
            output_center: [0.0, 0.0],
        })
    }

    /// All-zero parameters; useful as a fixed point in tests.
    pub fn zeroed(noise_dim: usize, hidden_dim: usize) -> Self {
        Self {
            w1: Array2::zeros((hidden_dim, noise_dim)),
            b1: Array1::zeros(hidden_dim),
            w2: Array2::zeros((hidden_dim, hidden_dim)),
            b2: Array1::zeros(hidden_dim),
            w3: Array2::zeros((hidden_dim, hidden_dim)),
            b3: Array1::zeros(hidden_dim),
            w_g: Array2::zeros((2, hidden_dim)),
            b_g: Array1::zeros(2),
            w_y: Array1::zeros(hidden_dim),
            b_y: 0.0,
            noise_dim,
            hidden_dim,
            output_scale: 1.0,
            output_center: [0.0, 0.0],
        }
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn output_scale(&self) -> f64 {
        self.output_scale
    }

    pub fn output_center(&self) -> Point2 {
        self.output_center
    }

    /// Re-anchor the output box at a benign-cluster center so generated
    /// points can cover the cluster and its `gamma * epsilon` margin.
    pub fn anchor(&mut self, center: Point2, epsilon: f64, gamma: f64) {
        self.output_center = center;
        self.output_scale = (epsilon * (1.0 + gamma)).max(GRAD_GUARD);
    }

    /// Standard-normal noise batch for `n_gen` pseudo-gradients.
    pub fn sample_noise(&self, n_gen: usize, rng: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_fn((n_gen, self.noise_dim), |_| rng.sample(StandardNormal))
    }

    fn forward(&self, noise: &Array2<f64>) -> Forward {
        let a1 = noise.dot(&self.w1.t()) + &self.b1;
        let h1 = a1.mapv(f64::tanh);
        let a2 = h1.dot(&self.w2.t()) + &self.b2;
        let h2 = a2.mapv(f64::tanh);
        let a3 = h2.dot(&self.w3.t()) + &self.b3;
        let h3 = a3.mapv(f64::tanh);
        let g_raw = (h3.dot(&self.w_g.t()) + &self.b_g).mapv(f64::tanh);
        let mut points = g_raw.clone() * self.output_scale;
        points
            .column_mut(0)
            .mapv_inplace(|v| v + self.output_center[0]);
        points
            .column_mut(1)
            .mapv_inplace(|v| v + self.output_center[1]);
        let confidences = (h3.dot(&self.w_y) + self.b_y).mapv(sigmoid);
        Forward {
            h1,
            h2,
            h3,
            g_raw,
            points,
            confidences,
        }
    }

    /// Run the network on a batch of noise vectors.
    pub fn generate(&self, noise: &Array2<f64>) -> Result<PseudoGradientBatch> {
        if noise.ncols() != self.noise_dim {
            return Err(Error::InvalidInput("noise dimension mismatch".into()));
        }
        if noise.nrows() == 0 {
            return Err(Error::InvalidInput("need at least one noise vector".into()));
        }
        if !noise.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("noise contains non-finite entries".into()));
        }
        let fwd = self.forward(noise);
        Ok(PseudoGradientBatch {
            points: fwd.points.rows().into_iter().map(|r| [r[0], r[1]]).collect(),
            confidences: fwd.confidences.to_vec(),
            source_noise: noise.clone(),
        })
    }

    /// Evaluate the composite loss and all parameter gradients at the
    /// current parameters, without updating them.
    pub fn loss_and_gradients(
        &self,
        noise: &Array2<f64>,
        labels: &[bool],
        benign_center: Point2,
        epsilon: f64,
        hyper: &GeneratorHyper,
    ) -> Result<(GeneratorLossReport, GeneratorGradients)> {
        let n = noise.nrows();
        if labels.len() != n {
            return Err(Error::InvalidInput("label count does not match batch".into()));
        }
        if n < 2 {
            return Err(Error::InvalidInput("generator training needs n_gen >= 2".into()));
        }
        let fwd = self.forward(noise);
        let points: Vec<Point2> = fwd.points.rows().into_iter().map(|r| [r[0], r[1]]).collect();

        let membership = membership_loss(
            fwd.confidences.as_slice().expect("contiguous"),
            labels,
            hyper.w1,
            hyper.w0,
        )?;
        let spread = directional_spread_loss(&points, benign_center, hyper.tau);
        let separation = pairwise_separation_loss(&points, rho_target(hyper.rho, epsilon));
        let total = membership + hyper.alpha * spread + hyper.beta * separation;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        let report = GeneratorLossReport {
            membership,
            spread,
            separation,
            total,
            labels: labels.to_vec(),
        };

        // --- backward ---
        let nf = n as f64;

        // d(total)/d(points): spread + separation terms.
        let mut d_points = Array2::<f64>::zeros((n, 2));
        for c in 0..2 {
            let offsets: Vec<f64> = points.iter().map(|p| p[c] - benign_center[c]).collect();
            let mu = offsets.iter().sum::<f64>() / nf;
            let var = offsets.iter().map(|o| (o - mu).powi(2)).sum::<f64>() / nf;
            let sd = var.sqrt();
            let mu_sign = if mu > 0.0 {
                1.0
            } else if mu < 0.0 {
                -1.0
            } else {
                0.0
            };
            for j in 0..n {
                let mut g = mu_sign / nf;
                if sd < hyper.tau && sd > GRAD_GUARD {
                    g -= (offsets[j] - mu) / (nf * sd);
                }
                d_points[[j, c]] += hyper.alpha * g;
            }
        }
        let target = rho_target(hyper.rho, epsilon);
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = points[i][0] - points[j][0];
                let dy = points[i][1] - points[j][1];
                let dist = (dx * dx + dy * dy).sqrt();
                let violation = target - dist;
                if violation > 0.0 && dist > GRAD_GUARD {
                    let coeff = hyper.beta * 2.0 * violation / (nf * dist);
                    d_points[[i, 0]] -= coeff * dx;
                    d_points[[i, 1]] -= coeff * dy;
                    d_points[[j, 0]] += coeff * dx;
                    d_points[[j, 1]] += coeff * dy;
                }
            }
        }

        // d(total)/d(confidence) from the membership loss; labels are
        // constants, the clamp has zero gradient outside its band.
        let mut d_ay = Array1::<f64>::zeros(n);
        for j in 0..n {
            let y_hat = fwd.confidences[j];
            if y_hat > PROB_CLAMP && y_hat < 1.0 - PROB_CLAMP {
                let d_conf = if labels[j] {
                    -hyper.w1 / (nf * y_hat)
                } else {
                    hyper.w0 / (nf * (1.0 - y_hat))
                };
                d_ay[j] = d_conf * y_hat * (1.0 - y_hat);
            }
        }

        let d_g_raw = d_points * self.output_scale;
        let d_ag = &d_g_raw * &fwd.g_raw.mapv(|v| 1.0 - v * v);

        let d_h3 = d_ag.dot(&self.w_g)
            + d_ay
                .clone()
                .insert_axis(Axis(1))
                .dot(&self.w_y.clone().insert_axis(Axis(0)));
        let d_w_g = d_ag.t().dot(&fwd.h3);
        let d_b_g = d_ag.sum_axis(Axis(0));
        let d_w_y = fwd.h3.t().dot(&d_ay);
        let d_b_y = d_ay.sum();

        let d_a3 = &d_h3 * &fwd.h3.mapv(|v| 1.0 - v * v);
        let d_w3 = d_a3.t().dot(&fwd.h2);
        let d_b3 = d_a3.sum_axis(Axis(0));
        let d_h2 = d_a3.dot(&self.w3);

        let d_a2 = &d_h2 * &fwd.h2.mapv(|v| 1.0 - v * v);
        let d_w2 = d_a2.t().dot(&fwd.h1);
        let d_b2 = d_a2.sum_axis(Axis(0));
        let d_h1 = d_a2.dot(&self.w2);

        let d_a1 = &d_h1 * &fwd.h1.mapv(|v| 1.0 - v * v);
        let d_w1 = d_a1.t().dot(noise);
        let d_b1 = d_a1.sum_axis(Axis(0));

        Ok((
            report,
            GeneratorGradients {
                w1: d_w1,
                b1: d_b1,
                w2: d_w2,
                b2: d_b2,
                w3: d_w3,
                b3: d_b3,
                w_g: d_w_g,
                b_g: d_b_g,
                w_y: d_w_y,
                b_y: d_b_y,
            },
        ))
    }

    /// One plain gradient-descent step on the composite loss; returns the
    /// pre-step loss report.
    pub fn train_step(
        &mut self,
        noise: &Array2<f64>,
        labels: &[bool],
        benign_center: Point2,
        epsilon: f64,
        hyper: &GeneratorHyper,
    ) -> Result<GeneratorLossReport> {
        if hyper.lr <= 0.0 {
            return Err(Error::InvalidInput("learning rate must be positive".into()));
        }
        let (report, grads) =
            self.loss_and_gradients(noise, labels, benign_center, epsilon, hyper)?;
        self.apply_gradients(&grads, hyper.lr);
        Ok(report)
    }

    fn apply_gradients(&mut self, g: &GeneratorGradients, lr: f64) {
        self.w1 -= &(&g.w1 * lr);
        self.b1 -= &(&g.b1 * lr);
        self.w2 -= &(&g.w2 * lr);
        self.b2 -= &(&g.b2 * lr);
        self.w3 -= &(&g.w3 * lr);
        self.b3 -= &(&g.b3 * lr);
        self.w_g -= &(&g.w_g * lr);
        self.b_g -= &(&g.b_g * lr);
        self.w_y -= &(&g.w_y * lr);
        self.b_y -= g.b_y * lr;
    }

    /// All parameters as one flat vector (finite-difference probes and
    /// checkpoint round-trips rely on a stable order).
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.w1.iter());
        out.extend(self.b1.iter());
        out.extend(self.w2.iter());
        out.extend(self.b2.iter());
        out.extend(self.w3.iter());
        out.extend(self.b3.iter());
        out.extend(self.w_g.iter());
        out.extend(self.b_g.iter());
        out.extend(self.w_y.iter());
        out.push(self.b_y);
        out
    }

    /// Overwrite all parameters from a flat vector produced by
    /// [`Self::flatten_params`].
    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.flatten_params().len() {
            return Err(Error::InvalidInput("parameter vector length mismatch".into()));
        }
        let mut it = flat.iter().copied();
        for v in self
            .w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
            .chain(self.w3.iter_mut())
            .chain(self.b3.iter_mut())
            .chain(self.w_g.iter_mut())
            .chain(self.b_g.iter_mut())
            .chain(self.w_y.iter_mut())
        {
            *v = it.next().expect("length checked");
        }
        self.b_y = it.next().expect("length checked");
        Ok(())
    }

    /// Serialize to the `encagg-gen-v1` JSON checkpoint format.
    pub fn to_checkpoint_json(&self) -> String {
        let tensors = vec![
            CheckpointTensor::from_2d("w1", &self.w1),
            CheckpointTensor::from_1d("b1", &self.b1),
            CheckpointTensor::from_2d("w2", &self.w2),
            CheckpointTensor::from_1d("b2", &self.b2),
            CheckpointTensor::from_2d("w3", &self.w3),
            CheckpointTensor::from_1d("b3", &self.b3),
            CheckpointTensor::from_2d("w_g", &self.w_g),
            CheckpointTensor::from_1d("b_g", &self.b_g),
            CheckpointTensor::from_1d("w_y", &self.w_y),
            CheckpointTensor {
                name: "b_y".into(),
                shape: vec![1],
                data: vec![self.b_y],
            },
        ];
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION.into(),
            noise_dim: self.noise_dim,
            hidden_dim: self.hidden_dim,
            output_scale: self.output_scale,
            output_center: self.output_center,
            tensors,
        };
        serde_json::to_string_pretty(&ckpt).expect("checkpoint serializes")
    }

    /// Restore a model from the `encagg-gen-v1` JSON checkpoint format.
    pub fn from_checkpoint_json(json: &str) -> Result<Self> {
        let ckpt: Checkpoint =
            serde_json::from_str(json).map_err(|e| Error::Io(format!("bad checkpoint: {e}")))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported checkpoint version {:?}",
                ckpt.version
            )));
        }
        let mut model = GeneratorModel::zeroed(ckpt.noise_dim, ckpt.hidden_dim);
        model.output_scale = ckpt.output_scale;
        model.output_center = ckpt.output_center;
        for t in &ckpt.tensors {
            match t.name.as_str() {
                "w1" => model.w1 = t.to_2d()?,
                "b1" => model.b1 = t.to_1d()?,
                "w2" => model.w2 = t.to_2d()?,
                "b2" => model.b2 = t.to_1d()?,
                "w3" => model.w3 = t.to_2d()?,
                "b3" => model.b3 = t.to_1d()?,
                "w_g" => model.w_g = t.to_2d()?,
                "b_g" => model.b_g = t.to_1d()?,
                "w_y" => model.w_y = t.to_1d()?,
                "b_y" => model.b_y = t.data.first().copied().unwrap_or(0.0),
                other => {
                    return Err(Error::InvalidInput(format!("unknown tensor {other:?}")));
                }
            }
        }
        if !model.flatten_params().iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("checkpoint contains non-finite values".into()));
        }
        Ok(model)
    }
}

fn rho_target(rho: f64, epsilon: f64) -> f64 {
    rho * epsilon
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: String,
    noise_dim: usize,
    hidden_dim: usize,
    output_scale: f64,
    output_center: Point2,
    tensors: Vec<CheckpointTensor>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl CheckpointTensor {
    fn from_2d(name: &str, a: &Array2<f64>) -> Self {
        Self {
            name: name.into(),
            shape: vec![a.nrows(), a.ncols()],
            data: a.iter().copied().collect(),
        }
    }

    fn from_1d(name: &str, a: &Array1<f64>) -> Self {
        Self {
            name: name.into(),
            shape: vec![a.len()],
            data: a.to_vec(),
        }
    }

    fn to_2d(&self) -> Result<Array2<f64>> {
        if self.shape.len() != 2 || self.shape[0] * self.shape[1] != self.data.len() {
            return Err(Error::InvalidInput(format!("tensor {:?} shape mismatch", self.name)));
        }
        Array2::from_shape_vec((self.shape[0], self.shape[1]), self.data.clone())
            .map_err(|e| Error::InvalidInput(e.to_string()))
    }

    fn to_1d(&self) -> Result<Array1<f64>> {
        if self.shape.len() != 1 || self.shape[0] != self.data.len() {
            return Err(Error::InvalidInput(format!("tensor {:?} shape mismatch", self.name)));
        }
        Ok(Array1::from_vec(self.data.clone()))
    }
}

/// Weighted binary cross-entropy over membership confidences, labels held
/// constant; probabilities clamped to `[1e-7, 1 - 1e-7]` before the logs.
pub fn membership_loss(confidences: &[f64], labels: &[bool], w1: f64, w0: f64) -> Result<f64> {
    if !(w1 > w0 && w0 > 0.0) {
        return Err(Error::InvalidInput("membership loss needs w1 > w0 > 0".into()));
    }
    if confidences.len() != labels.len() || confidences.is_empty() {
        return Err(Error::InvalidInput("confidence/label length mismatch".into()));
    }
    let n = confidences.len() as f64;
    let mut sum = 0.0;
    for (&c, &y) in confidences.iter().zip(labels) {
        let c = c.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        sum += if y { w1 * c.ln() } else { w0 * (1.0 - c).ln() };
    }
    Ok(-sum / n)
}

/// Penalize mean offset from the benign center and directional collapse:
/// `|mu_x| + |mu_y| + relu(tau - sd_x) + relu(tau - sd_y)` with the
/// population standard deviation.
pub fn directional_spread_loss(points: &[Point2], benign_center: Point2, tau: f64) -> f64 {
    let n = points.len() as f64;
    let mut loss = 0.0;
    for c in 0..2 {
        let offsets: Vec<f64> = points.iter().map(|p| p[c] - benign_center[c]).collect();
        let mu = offsets.iter().sum::<f64>() / n;
        let var = offsets.iter().map(|o| (o - mu).powi(2)).sum::<f64>() / n;
        loss += mu.abs() + (tau - var.sqrt()).max(0.0);
    }
    loss
}

/// Quadratic hinge on pairwise distances below `target`, averaged by
/// batch size.
pub fn pairwise_separation_loss(points: &[Point2], target: f64) -> f64 {
    let n = points.len();
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = points[i][0] - points[j][0];
            let dy = points[i][1] - points[j][1];
            let d = (dx * dx + dy * dy).sqrt();
            let v = (target - d).max(0.0);
            sum += v * v;
        }
    }
    sum / n as f64
}
