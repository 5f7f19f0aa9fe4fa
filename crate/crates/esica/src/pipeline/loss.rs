//! Dice-Focal loss over mask logits.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Soft Dice plus focal loss.
///
/// Dice uses sigmoid probabilities with smooth term 1 in both numerator and
/// denominator, so an all-background target with confident negative logits
/// scores near zero. Focal is the mean of -(1-p_t)^gamma * ln(p_t); p_t is
/// nudged into (0,1) by an epsilon-affine so extreme logits stay finite and
/// differentiable.
pub fn dice_focal_loss(
    logits: &Tensor,
    target: &Tensor,
    lambda_focal: f64,
    gamma: f64,
) -> Result<Tensor> {
    if logits.shape() != target.shape() {
        return Err(Error::contract(format!(
            "dice_focal_loss: logits {:?} vs target {:?}",
            logits.shape(),
            target.shape()
        )));
    }
    if target.data().iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::contract("dice_focal_loss: target must be binary"));
    }
    let p = logits.sigmoid()?;
    let inter = p.mul(target)?.sum_all()?;
    let denom = p.sum_all()?.add(&target.sum_all()?)?.affine(1.0, 1.0)?;
    let dice_ratio = inter.affine(2.0, 1.0)?.div(&denom)?;
    let dice = dice_ratio.affine(-1.0, 1.0)?;

    // p_t = p*t + (1-p)*(1-t)
    let one_minus_p = p.affine(-1.0, 1.0)?;
    let one_minus_t = target.affine(-1.0, 1.0)?;
    let p_t = p.mul(target)?.add(&one_minus_p.mul(&one_minus_t)?)?;
    const EPS: f64 = 1e-12;
    let p_t = p_t.affine(1.0 - 2.0 * EPS, EPS)?;
    let focal_term = p_t
        .affine(-1.0, 1.0)?
        .pow_scalar(gamma)?
        .mul(&p_t.ln()?)?
        .mean_all()?
        .scale(-1.0)?;

    dice.add(&focal_term.scale(lambda_focal)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_prediction_loss_is_tiny() {
        // +20 logits exactly on the target, -20 elsewhere.
        let target = Tensor::new(&[1, 2, 2, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0])
            .unwrap();
        let logits_data: Vec<f64> = target
            .data()
            .iter()
            .map(|&t| if t > 0.5 { 20.0 } else { -20.0 })
            .collect();
        let logits = Tensor::new(&[1, 2, 2, 2], logits_data).unwrap();
        let loss = dice_focal_loss(&logits, &target, 1.0, 2.0).unwrap();
        assert!(loss.item().unwrap() < 1e-3, "loss {}", loss.item().unwrap());
    }

    #[test]
    fn confident_empty_prediction_on_empty_target_is_trainable() {
        // All-zero target with -20 logits: the smooth term makes the Dice
        // part 1 - 1/1 ~ 0 and the focal part vanishes.
        let target = Tensor::zeros(&[1, 3, 3, 3]);
        let logits = Tensor::full(&[1, 3, 3, 3], -20.0);
        let loss = dice_focal_loss(&logits, &target, 1.0, 2.0).unwrap();
        assert!(loss.item().unwrap() < 1e-3);
    }

    #[test]
    fn loss_decreases_as_prediction_improves() {
        let target = Tensor::new(&[1, 2, 2, 1], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let bad = Tensor::new(&[1, 2, 2, 1], vec![-2.0, -2.0, 2.0, 2.0]).unwrap();
        let good = Tensor::new(&[1, 2, 2, 1], vec![2.0, 2.0, -2.0, -2.0]).unwrap();
        let lb = dice_focal_loss(&bad, &target, 1.0, 2.0).unwrap().item().unwrap();
        let lg = dice_focal_loss(&good, &target, 1.0, 2.0).unwrap().item().unwrap();
        assert!(lg < lb);
    }

    #[test]
    fn gradcheck_on_random_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let target_data: Vec<f64> = (0..64).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect();
        let target = Tensor::new(&[1, 4, 4, 4], target_data).unwrap();
        let logits = Tensor::randn(&[1, 4, 4, 4], 2.0, &mut rng);
        let f = |t: &Tensor| dice_focal_loss(t, &target, 1.0, 2.0);
        let err = grad_check(f, &logits, 1e-5).unwrap();
        assert!(err < 1e-4, "error {err}");
    }

    #[test]
    fn non_binary_target_rejected() {
        let target = Tensor::new(&[2], vec![0.5, 1.0]).unwrap();
        let logits = Tensor::zeros(&[2]);
        assert!(dice_focal_loss(&logits, &target, 1.0, 2.0).is_err());
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let target = Tensor::new(&[4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let logits = Tensor::new(&[4], vec![700.0, -700.0, -700.0, 700.0]).unwrap();
        let loss = dice_focal_loss(&logits, &target, 1.0, 2.0).unwrap();
        assert!(loss.item().unwrap().is_finite());
    }
}
