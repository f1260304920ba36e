use crate::error::{Error, Result};
use crate::image::Image;

use super::denoiser::Denoiser;
use super::schedule::NoiseSchedule;

/// `z_t = alpha_t x + sigma_t eps`, elementwise.
pub fn add_noise(x: &Image, eps: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if eps.len() != x.data().len() {
        return Err(Error::invalid(format!(
            "noise has {} values, image has {}",
            eps.len(),
            x.data().len()
        )));
    }
    let (alpha, sigma) = schedule.coefficients(t)?;
    Ok(x
        .data()
        .iter()
        .zip(eps)
        .map(|(&xi, e)| alpha * f64::from(xi) + sigma * e)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Weight of the prior-preservation term.
    pub lambda: f64,
    /// Per-timestep weights of the reconstruction term; `None` means all 1.
    pub weight_t: Option<Vec<f64>>,
    /// Per-timestep weights of the prior term; `None` means all 1.
    pub weight_t_prime: Option<Vec<f64>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            weight_t: None,
            weight_t_prime: None,
        }
    }
}

impl LossConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        for (name, w) in [("weight_t", &self.weight_t), ("weight_t_prime", &self.weight_t_prime)] {
            if let Some(w) = w {
                if w.len() != schedule.timesteps() {
                    return Err(Error::invalid(format!(
                        "{name} has {} entries, schedule has {} timesteps",
                        w.len(),
                        schedule.timesteps()
                    )));
                }
                if w.iter().any(|v| !(*v >= 0.0)) {
                    return Err(Error::invalid(format!("{name} must be non-negative")));
                }
            }
        }
        Ok(())
    }

    fn weight(w: &Option<Vec<f64>>, t: usize) -> f64 {
        w.as_ref().map_or(1.0, |w| w[t - 1])
    }
}

/// One term of the objective: a clean image, its text condition, a
/// timestep and the noise used to corrupt it.
#[derive(Debug, Clone, Copy)]
pub struct LossItem<'a> {
    pub image: &'a Image,
    pub condition: &'a [f64],
    pub t: usize,
    pub noise: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    /// Mean weighted reconstruction error on identity images.
    pub reconstruction: f64,
    /// Mean weighted reconstruction error on reference images.
    pub prior: f64,
    /// `reconstruction + lambda * prior`.
    pub total: f64,
}

/// Identity reconstruction plus `lambda` times reconstruction of the
/// base model's own reference images under the identity-free prompt.
/// Squared errors are averaged over pixels and over items.
pub fn prior_preservation_loss(
    model: &Denoiser,
    batch: &[LossItem<'_>],
    ref_batch: &[LossItem<'_>],
    cfg: &LossConfig,
    schedule: &NoiseSchedule,
) -> Result<LossBreakdown> {
    evaluate(model, batch, ref_batch, cfg, schedule, None)
}

/// As [`prior_preservation_loss`], also returning `dL/dtheta`.
pub fn prior_preservation_loss_and_grad(
    model: &Denoiser,
    batch: &[LossItem<'_>],
    ref_batch: &[LossItem<'_>],
    cfg: &LossConfig,
    schedule: &NoiseSchedule,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let mut grad = vec![0.0; model.params().len()];
    let loss = evaluate(model, batch, ref_batch, cfg, schedule, Some(&mut grad))?;
    Ok((loss, grad))
}

fn evaluate(
    model: &Denoiser,
    batch: &[LossItem<'_>],
    ref_batch: &[LossItem<'_>],
    cfg: &LossConfig,
    schedule: &NoiseSchedule,
    mut grad: Option<&mut Vec<f64>>,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::invalid("loss batch is empty"));
    }
    if cfg.lambda > 0.0 && ref_batch.is_empty() {
        return Err(Error::invalid("lambda > 0 requires a non-empty reference batch"));
    }
    cfg.validate(schedule)?;

    let mut term = |items: &[LossItem<'_>], weights: &Option<Vec<f64>>, scale: f64| {
        let mut sum = 0.0;
        for item in items {
            if item.image.shape() != model.shape() {
                return Err(Error::invalid(format!(
                    "image shape {} does not match denoiser shape {}",
                    item.image.shape(),
                    model.shape()
                )));
            }
            let z = add_noise(item.image, item.noise, item.t, schedule)?;
            model.check_inputs(&z, item.condition)?;
            let (alpha, sigma) = schedule.coefficients(item.t)?;
            let w = LossConfig::weight(weights, item.t);
            let trace = model.forward(&z, alpha, sigma, item.condition);
            let pixels = z.len() as f64;
            let resid: Vec<f64> = trace
                .xhat
                .iter()
                .zip(item.image.data())
                .map(|(p, &x)| p - f64::from(x))
                .collect();
            sum += w * resid.iter().map(|r| r * r).sum::<f64>() / pixels;
            if let Some(g) = grad.as_deref_mut() {
                if w * scale != 0.0 {
                    let coef = 2.0 * w * scale / (pixels * items.len() as f64);
                    let dxhat: Vec<f64> = resid.iter().map(|r| coef * r).collect();
                    model.backward(&trace, alpha, item.condition, &dxhat, g);
                }
            }
        }
        Ok(if items.is_empty() {
            0.0
        } else {
            sum / items.len() as f64
        })
    };

    let reconstruction = term(batch, &cfg.weight_t, 1.0)?;
    let prior = term(ref_batch, &cfg.weight_t_prime, cfg.lambda)?;
    Ok(LossBreakdown {
        reconstruction,
        prior,
        total: reconstruction + cfg.lambda * prior,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::denoiser::DenoiserConfig;
    use crate::diffusion::schedule::{make_schedule, ScheduleKind};
    use crate::image::ImageShape;

    fn two_pixel() -> ImageShape {
        ImageShape::new(1, 1, 2)
    }

    /// A denoiser whose every parameter is zero predicts
    /// `x_hat = 0 + g (z - alpha 0) = g z`; with `log v` pushed to -inf it
    /// predicts zero.
    fn zero_denoiser() -> Denoiser {
        let cfg = DenoiserConfig {
            shape: two_pixel(),
            cond_dim: 2,
            latent_dim: 1,
            modes: 0,
        };
        let mut params = vec![0.0; cfg.param_count()];
        *params.last_mut().unwrap() = -1e6;
        Denoiser::from_params(cfg, params).unwrap()
    }

    #[test]
    fn add_noise_hand_case() {
        let s = NoiseSchedule::from_alphas(ScheduleKind::Linear, vec![0.8]).unwrap();
        let x = Image::new(two_pixel(), vec![1.0, 0.0]).unwrap();
        let z = add_noise(&x, &[0.0, 1.0], 1, &s).unwrap();
        assert!((z[0] - 0.8).abs() < 1e-12 && (z[1] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn add_noise_with_unit_signal_is_identity() {
        let s = NoiseSchedule::from_alphas(ScheduleKind::Linear, vec![1.0, 0.5]).unwrap();
        assert_eq!(s.sigma(1).unwrap(), 0.0);
        let x = Image::new(two_pixel(), vec![0.123, -0.77]).unwrap();
        let z = add_noise(&x, &[5.0, -3.0], 1, &s).unwrap();
        assert_eq!(z, x.to_f64());
    }

    #[test]
    fn add_noise_identity_and_zero_signal() {
        let s = make_schedule(8, ScheduleKind::Linear).unwrap();
        let x = Image::new(two_pixel(), vec![0.25, -0.5]).unwrap();
        let eps = [0.3, -1.2];
        let z0 = add_noise(&Image::zeros(two_pixel()), &eps, 3, &s).unwrap();
        let sg = s.sigma(3).unwrap();
        assert_eq!(z0, vec![sg * 0.3, sg * -1.2]);
        assert!(add_noise(&x, &[0.0; 3], 1, &s).is_err());
        assert!(add_noise(&x, &eps, 9, &s).is_err());
    }

    #[test]
    fn constant_zero_denoiser_hand_case() {
        let s = make_schedule(10, ScheduleKind::Cosine).unwrap();
        let model = zero_denoiser();
        let x = Image::new(two_pixel(), vec![1.0, 0.0]).unwrap();
        let c = [0.0, 0.0];
        let item = LossItem {
            image: &x,
            condition: &c,
            t: 5,
            noise: &[0.7, -0.3],
        };
        let l = prior_preservation_loss(&model, &[item], &[], &LossConfig::with_lambda(0.0), &s)
            .unwrap();
        // ||0 - x||^2 / dim = 1 / 2
        assert!((l.total - 0.5).abs() < 1e-12);
    }

    #[test]
    fn precondition_errors() {
        let s = make_schedule(10, ScheduleKind::Cosine).unwrap();
        let model = zero_denoiser();
        let x = Image::new(two_pixel(), vec![1.0, 0.0]).unwrap();
        let item = LossItem {
            image: &x,
            condition: &[0.0, 0.0],
            t: 1,
            noise: &[0.0, 0.0],
        };
        let cfg = LossConfig::default();
        assert!(prior_preservation_loss(&model, &[], &[item], &cfg, &s).is_err());
        assert!(prior_preservation_loss(&model, &[item], &[], &cfg, &s).is_err());
        let neg = LossConfig::with_lambda(-1.0);
        assert!(prior_preservation_loss(&model, &[item], &[item], &neg, &s).is_err());
    }
}
