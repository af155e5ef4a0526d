//! Training objectives for the two-head segmenter. All four losses are
//! means over every pixel of the grid and are computed in f64. Each loss
//! comes in a value-only form and a `_grad` form returning analytic partial
//! derivatives with respect to the predicted mask and uncertainty grids;
//! `finite_difference_grad` provides an independent numerical check.

use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("grid shape mismatch: {name} is {got:?}, expected {expected:?}")]
    ShapeMismatch {
        name: &'static str,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("{name} grid must be binary, found {value} at index {index}")]
    NotBinary {
        name: &'static str,
        value: f64,
        index: usize,
    },
    #[error("{name} grid contains a non-finite value at index {index}")]
    NonFinite { name: &'static str, index: usize },
    #[error("loss grids must be non-empty")]
    EmptyGrid,
}

/// Knobs shared by the loss family.
///
/// `lambda_weight` scales the per-pixel loss inside the weight region,
/// `epsilon_u` floors the uncertainty before any division, and `epsilon_p`
/// clamps probabilities away from 0 and 1 before logs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_weight: f64,
    pub epsilon_u: f64,
    pub epsilon_p: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_weight: 5.0,
            epsilon_u: 1e-6,
            epsilon_p: 1e-7,
        }
    }
}

/// One training sample's grids: predicted mask probability, predicted
/// uncertainty, binary target mask, and the binary region whose pixels get
/// the `lambda_weight` multiplier.
#[derive(Debug, Clone)]
pub struct LossBatchInputs {
    pub pred_mask: Array2<f64>,
    pub pred_uncertainty: Array2<f64>,
    pub target: Array2<f64>,
    pub weight_region: Array2<f64>,
}

impl LossBatchInputs {
    pub fn new(
        pred_mask: Array2<f64>,
        pred_uncertainty: Array2<f64>,
        target: Array2<f64>,
        weight_region: Array2<f64>,
    ) -> Result<Self, LossError> {
        let shape = pred_mask.dim();
        if shape.0 == 0 || shape.1 == 0 {
            return Err(LossError::EmptyGrid);
        }
        for (name, grid) in [
            ("pred_uncertainty", &pred_uncertainty),
            ("target", &target),
            ("weight_region", &weight_region),
        ] {
            if grid.dim() != shape {
                return Err(LossError::ShapeMismatch {
                    name,
                    got: grid.dim(),
                    expected: shape,
                });
            }
        }
        for (name, grid) in [
            ("pred_mask", &pred_mask),
            ("pred_uncertainty", &pred_uncertainty),
        ] {
            if let Some((index, _)) = grid.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(LossError::NonFinite { name, index });
            }
        }
        for (name, grid) in [("target", &target), ("weight_region", &weight_region)] {
            if let Some((index, &value)) =
                grid.iter().enumerate().find(|(_, &v)| v != 0.0 && v != 1.0)
            {
                return Err(LossError::NotBinary { name, value, index });
            }
        }
        Ok(Self {
            pred_mask,
            pred_uncertainty,
            target,
            weight_region,
        })
    }

    fn len(&self) -> usize {
        self.pred_mask.len()
    }
}

/// Gradients of a loss with respect to the predicted mask and uncertainty
/// grids.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub d_mask: Array2<f64>,
    pub d_uncertainty: Array2<f64>,
}

impl LossGrad {
    fn zeros_like(inputs: &LossBatchInputs) -> Self {
        Self {
            d_mask: Array2::zeros(inputs.pred_mask.dim()),
            d_uncertainty: Array2::zeros(inputs.pred_mask.dim()),
        }
    }
}

/// Uncertainty-weighted squared-error loss with a quadratic penalty on the
/// uncertainty itself. Pixels inside the weight region count
/// `config.lambda_weight` times as much as the rest:
///
///   L = mean_i  w_i * 0.5 * [ ((t_i - m_i) / u_i)^2 + u_i^2 ]
pub fn asbu_loss(inputs: &LossBatchInputs, config: &LossConfig) -> f64 {
    asbu_loss_grad(inputs, config).0
}

pub fn asbu_loss_grad(inputs: &LossBatchInputs, config: &LossConfig) -> (f64, LossGrad) {
    let n = inputs.len() as f64;
    let mut grad = LossGrad::zeros_like(inputs);
    let mut total = 0.0;
    for (i, (((&m, &u_raw), &t), &wr)) in inputs
        .pred_mask
        .iter()
        .zip(inputs.pred_uncertainty.iter())
        .zip(inputs.target.iter())
        .zip(inputs.weight_region.iter())
        .enumerate()
    {
        let w = if wr != 0.0 { config.lambda_weight } else { 1.0 };
        let clamped = u_raw < config.epsilon_u;
        let u = if clamped { config.epsilon_u } else { u_raw };
        let r = t - m;
        total += w * 0.5 * ((r / u).powi(2) + u * u);
        let g_m = w / n * (-r / (u * u));
        let g_u = if clamped {
            0.0
        } else {
            w / n * (-r * r / (u * u * u) + u)
        };
        grad.d_mask.as_slice_mut().unwrap()[i] = g_m;
        grad.d_uncertainty.as_slice_mut().unwrap()[i] = g_u;
    }
    (total / n, grad)
}

/// Gaussian negative log-likelihood with a learned variance:
///
///   L = mean_i  0.5 * [ (t_i - m_i)^2 / u_i^2 + log(u_i^2) ]
pub fn gaussian_uncertainty_loss(inputs: &LossBatchInputs, config: &LossConfig) -> f64 {
    gaussian_uncertainty_loss_grad(inputs, config).0
}

pub fn gaussian_uncertainty_loss_grad(
    inputs: &LossBatchInputs,
    config: &LossConfig,
) -> (f64, LossGrad) {
    let n = inputs.len() as f64;
    let mut grad = LossGrad::zeros_like(inputs);
    let mut total = 0.0;
    for (i, ((&m, &u_raw), &t)) in inputs
        .pred_mask
        .iter()
        .zip(inputs.pred_uncertainty.iter())
        .zip(inputs.target.iter())
        .enumerate()
    {
        let clamped = u_raw < config.epsilon_u;
        let u = if clamped { config.epsilon_u } else { u_raw };
        let r = t - m;
        total += 0.5 * ((r / u).powi(2) + (u * u).ln());
        grad.d_mask.as_slice_mut().unwrap()[i] = -r / (u * u) / n;
        grad.d_uncertainty.as_slice_mut().unwrap()[i] = if clamped {
            0.0
        } else {
            (-r * r / (u * u * u) + 1.0 / u) / n
        };
    }
    (total / n, grad)
}

/// Cross-entropy scaled by the squared uncertainty, with the same quadratic
/// uncertainty penalty as `asbu_loss`:
///
///   L = mean_i  0.5 * [ bce_i / u_i^2 + u_i^2 ]
pub fn ubce_loss(inputs: &LossBatchInputs, config: &LossConfig) -> f64 {
    ubce_loss_grad(inputs, config).0
}

pub fn ubce_loss_grad(inputs: &LossBatchInputs, config: &LossConfig) -> (f64, LossGrad) {
    let n = inputs.len() as f64;
    let mut grad = LossGrad::zeros_like(inputs);
    let mut total = 0.0;
    for (i, ((&m_raw, &u_raw), &t)) in inputs
        .pred_mask
        .iter()
        .zip(inputs.pred_uncertainty.iter())
        .zip(inputs.target.iter())
        .enumerate()
    {
        let u_clamped = u_raw < config.epsilon_u;
        let u = if u_clamped { config.epsilon_u } else { u_raw };
        let (m, m_clamped) = clamp_prob(m_raw, config.epsilon_p);
        let b = -(t * m.ln() + (1.0 - t) * (1.0 - m).ln());
        total += 0.5 * (b / (u * u) + u * u);
        grad.d_mask.as_slice_mut().unwrap()[i] = if m_clamped {
            0.0
        } else {
            0.5 * (m - t) / (m * (1.0 - m)) / (u * u) / n
        };
        grad.d_uncertainty.as_slice_mut().unwrap()[i] = if u_clamped {
            0.0
        } else {
            (-b / (u * u * u) + u) / n
        };
    }
    (total / n, grad)
}

/// Plain binary cross-entropy baseline without an uncertainty head:
///
///   L = mean_i  -[ t_i log m_i + (1 - t_i) log(1 - m_i) ]
pub fn bce_loss(inputs: &LossBatchInputs, config: &LossConfig) -> f64 {
    bce_loss_grad(inputs, config).0
}

pub fn bce_loss_grad(inputs: &LossBatchInputs, config: &LossConfig) -> (f64, LossGrad) {
    let n = inputs.len() as f64;
    let mut grad = LossGrad::zeros_like(inputs);
    let mut total = 0.0;
    for (i, (&m_raw, &t)) in inputs
        .pred_mask
        .iter()
        .zip(inputs.target.iter())
        .enumerate()
    {
        let (m, m_clamped) = clamp_prob(m_raw, config.epsilon_p);
        total += -(t * m.ln() + (1.0 - t) * (1.0 - m).ln());
        grad.d_mask.as_slice_mut().unwrap()[i] = if m_clamped {
            0.0
        } else {
            (m - t) / (m * (1.0 - m)) / n
        };
    }
    (total / n, grad)
}

fn clamp_prob(m: f64, eps: f64) -> (f64, bool) {
    if m < eps {
        (eps, true)
    } else if m > 1.0 - eps {
        (1.0 - eps, true)
    } else {
        (m, false)
    }
}

/// Central-difference gradient of an arbitrary scalar loss over the mask and
/// uncertainty grids. O(pixels) evaluations of `loss_fn`; intended for
/// verifying analytic gradients, not for training.
pub fn finite_difference_grad<F>(loss_fn: F, inputs: &LossBatchInputs, step: f64) -> LossGrad
where
    F: Fn(&LossBatchInputs) -> f64,
{
    let mut probe = inputs.clone();
    let mut grad = LossGrad::zeros_like(inputs);
    let len = inputs.len();
    for i in 0..len {
        let original = probe.pred_mask.as_slice().unwrap()[i];
        probe.pred_mask.as_slice_mut().unwrap()[i] = original + step;
        let plus = loss_fn(&probe);
        probe.pred_mask.as_slice_mut().unwrap()[i] = original - step;
        let minus = loss_fn(&probe);
        probe.pred_mask.as_slice_mut().unwrap()[i] = original;
        grad.d_mask.as_slice_mut().unwrap()[i] = (plus - minus) / (2.0 * step);
    }
    for i in 0..len {
        let original = probe.pred_uncertainty.as_slice().unwrap()[i];
        probe.pred_uncertainty.as_slice_mut().unwrap()[i] = original + step;
        let plus = loss_fn(&probe);
        probe.pred_uncertainty.as_slice_mut().unwrap()[i] = original - step;
        let minus = loss_fn(&probe);
        probe.pred_uncertainty.as_slice_mut().unwrap()[i] = original;
        grad.d_uncertainty.as_slice_mut().unwrap()[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Numerically stable softplus, the activation the uncertainty head uses.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}
