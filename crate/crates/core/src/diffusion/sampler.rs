use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{normal_vec, rng};

use super::denoiser::Denoiser;
use super::schedule::NoiseSchedule;

/// `n` evenly spaced timesteps from `T` down to 1 (at most `T` of them).
pub fn sampling_timesteps(timesteps: usize, n: usize) -> Vec<usize> {
    let n = n.min(timesteps).max(1);
    if n == 1 {
        return vec![timesteps];
    }
    (0..n)
        .map(|i| {
            let off = (i as f64 * (timesteps - 1) as f64 / (n - 1) as f64).round() as usize;
            timesteps - off
        })
        .collect()
}

/// Deterministic DDIM-style sampling from seeded Gaussian noise. Pixel
/// values of the result are clamped to `[-1, 1]`.
pub fn sample(
    model: &Denoiser,
    condition: &[f64],
    seed: u64,
    n_steps: usize,
    schedule: &NoiseSchedule,
) -> Result<Image> {
    if n_steps == 0 {
        return Err(Error::invalid("sampling needs at least one step"));
    }
    let shape = model.shape();
    let mut z = normal_vec(&mut rng(seed), shape.len());
    model.check_inputs(&z, condition)?;
    let steps = sampling_timesteps(schedule.timesteps(), n_steps);
    let mut xhat = Vec::new();
    for (i, &t) in steps.iter().enumerate() {
        let (alpha, sigma) = schedule.coefficients(t)?;
        xhat = model.forward(&z, alpha, sigma, condition).xhat;
        if let Some(&next) = steps.get(i + 1) {
            let (a2, s2) = schedule.coefficients(next)?;
            for (zi, xi) in z.iter_mut().zip(&xhat) {
                let eps = if sigma > 0.0 { (*zi - alpha * xi) / sigma } else { 0.0 };
                *zi = a2 * xi + s2 * eps;
            }
        }
    }
    let mut img = Image::from_f64(shape, &xhat)?;
    img.clamp_pixels();
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::denoiser::DenoiserConfig;
    use crate::diffusion::schedule::{make_schedule, ScheduleKind};

    #[test]
    fn timestep_grid() {
        assert_eq!(sampling_timesteps(1000, 1), vec![1000]);
        assert_eq!(sampling_timesteps(10, 4), vec![10, 7, 4, 1]);
        assert_eq!(sampling_timesteps(3, 50), vec![3, 2, 1]);
    }

    #[test]
    fn sampling_contract() {
        let m = Denoiser::new(DenoiserConfig::default(), 2).unwrap();
        let s = make_schedule(100, ScheduleKind::Cosine).unwrap();
        let c = vec![0.1; 32];
        let a = sample(&m, &c, 5, 10, &s).unwrap();
        assert_eq!(a, sample(&m, &c, 5, 10, &s).unwrap());
        assert_eq!(a.shape(), m.shape());
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(matches!(sample(&m, &c, 5, 0, &s), Err(Error::InvalidArgument(_))));
        for pair in 0..10u64 {
            let x = sample(&m, &c, 2 * pair, 10, &s).unwrap();
            let y = sample(&m, &c, 2 * pair + 1, 10, &s).unwrap();
            assert_ne!(x, y);
        }
    }
}
