use ndarray::{Array2, ArrayView2};

use super::RobustnessError;
use crate::net::train::softmax_cross_entropy;
use crate::net::{Mode, Model};

/// One-step gradient-sign attack in pixel space:
/// `x_adv = clip(x + ε·sign(∇ₓ loss), 0, 1)`.
///
/// The forward pass uses running normalisation statistics, so the attacked
/// function is exactly the one evaluated at inference time.
pub fn fgsm_attack(
    model: &mut Model<f32>,
    x: ArrayView2<'_, f32>,
    y: &[usize],
    epsilon: f64,
) -> Result<Array2<f32>, RobustnessError> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(RobustnessError::InvalidConfig(format!("epsilon {epsilon} outside [0, 1]")));
    }
    if x.nrows() != y.len() {
        return Err(RobustnessError::InvalidInput(format!("{} inputs, {} labels", x.nrows(), y.len())));
    }
    if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(RobustnessError::InvalidInput("inputs must lie in [0, 1]".into()));
    }
    if epsilon == 0.0 || x.nrows() == 0 {
        return Ok(x.to_owned());
    }
    model.zero_grad();
    let logits = model.forward(x, Mode::Record);
    let (loss, dlogits) = softmax_cross_entropy(&logits, y);
    if !loss.is_finite() {
        return Err(RobustnessError::AttackFailed(format!("loss is {loss}")));
    }
    let grad = model.backward(&dlogits);
    model.zero_grad();
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(RobustnessError::AttackFailed("non-finite input gradient".into()));
    }
    let eps = epsilon as f32;
    let mut adv = x.to_owned();
    adv.zip_mut_with(&grad, |v, &g| {
        let step = if g > 0.0 {
            eps
        } else if g < 0.0 {
            -eps
        } else {
            0.0
        };
        *v = (*v + step).clamp(0.0, 1.0);
    });
    Ok(adv)
}
