use crate::checkpoint::{content_id, Checkpoint};
use crate::error::{Error, Result};
use crate::image::ImageShape;
use crate::nn::init_weights;
use crate::rng::rng;

use super::schedule::NoiseSchedule;

pub const DENOISER_KIND: &str = "toy-denoiser";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub shape: ImageShape,
    /// Width of the text-condition embedding.
    pub cond_dim: usize,
    /// Width of the conditional bottleneck feeding the mean image.
    pub latent_dim: usize,
    /// Rank of the shared low-rank covariance term.
    pub modes: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            shape: ImageShape::toy(),
            cond_dim: 32,
            latent_dim: 16,
            modes: 4,
        }
    }
}

impl DenoiserConfig {
    pub fn param_count(&self) -> usize {
        let p = self.shape.len();
        let (k, d) = (self.latent_dim, self.cond_dim);
        p * k + p + k * d + k + 1 + p * self.modes
    }
}

/// Clean-image (x-prediction) denoiser for Gaussian-like image
/// distributions.
///
/// The condition selects a mean image `m(c) = U tanh(W c + b1) + b0`. The
/// spread around it is `S = B B^T + v I`: a few shared modes of variation
/// `B` (pixels x modes) plus isotropic pixel noise. The prediction is the
/// exact posterior mean when the data are `N(m(c), S)`:
///
/// `x_hat = m + alpha S (alpha^2 S + sigma^2 I)^-1 (z - alpha m)`,
///
/// evaluated through the Woodbury identity so the cost stays linear in the
/// pixel count. Sampling through it reproduces the learned modes, which is
/// where attribute variety between samples comes from.
///
/// Parameters are one flat vector laid out as `[U | b0 | W | b1 | log v | B]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
    params: Vec<f64>,
}

/// Intermediates of one forward pass, kept for the backward pass.
pub(crate) struct Trace {
    pub xhat: Vec<f64>,
    hidden: Vec<f64>,
    /// `(alpha^2 S + sigma^2 I)^-1 (z - alpha m)`.
    q: Vec<f64>,
    /// `B^T q`.
    bq: Vec<f64>,
    /// Cholesky factor of `s I + alpha^2 B^T B`, `s = alpha^2 v + sigma^2`.
    chol: Vec<f64>,
    s: f64,
}

struct Layout {
    u: usize,
    b0: usize,
    w: usize,
    b1: usize,
    log_var: usize,
    modes: usize,
}

/// In-place Cholesky of a small SPD matrix (row-major, lower factor).
fn cholesky(a: &mut [f64], n: usize) {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        let d = d.max(1e-300).sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut v = a[i * n + j];
            for k in 0..j {
                v -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = v / d;
        }
        for i in 0..j {
            a[i * n + j] = 0.0;
        }
    }
}

fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[i * n + k] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l[k * n + i] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    y
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        if config.shape.is_empty() || config.cond_dim == 0 || config.latent_dim == 0 {
            return Err(Error::invalid("denoiser dimensions must be positive"));
        }
        let p = config.shape.len();
        let (k, d) = (config.latent_dim, config.cond_dim);
        let mut r = rng(seed);
        let mut params = init_weights(&mut r, p * k, k, 0.5);
        params.extend(std::iter::repeat_n(0.0, p));
        params.extend(init_weights(&mut r, k * d, d, 1.0));
        params.extend(std::iter::repeat_n(0.0, k));
        params.push(0.0);
        params.extend(init_weights(&mut r, p * config.modes, p, 0.1));
        Ok(Self { config, params })
    }

    pub fn from_params(config: DenoiserConfig, params: Vec<f64>) -> Result<Self> {
        if params.len() != config.param_count() {
            return Err(Error::invalid(format!(
                "denoiser expects {} parameters, got {}",
                config.param_count(),
                params.len()
            )));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> DenoiserConfig {
        self.config
    }

    pub fn shape(&self) -> ImageShape {
        self.config.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Content hash of configuration and parameters.
    pub fn model_id(&self) -> String {
        content_id(&self.to_checkpoint().to_bytes())
    }

    fn layout(&self) -> Layout {
        let p = self.config.shape.len();
        let (k, d) = (self.config.latent_dim, self.config.cond_dim);
        let u = 0;
        let b0 = u + p * k;
        let w = b0 + p;
        let b1 = w + k * d;
        Layout {
            u,
            b0,
            w,
            b1,
            log_var: b1 + k,
            modes: b1 + k + 1,
        }
    }

    fn modes(&self) -> &[f64] {
        let l = self.layout();
        &self.params[l.modes..]
    }

    /// `B^T x`.
    fn project(&self, x: &[f64]) -> Vec<f64> {
        let n = self.config.modes;
        let b = self.modes();
        let mut out = vec![0.0; n];
        for (i, xi) in x.iter().enumerate() {
            for (j, o) in out.iter_mut().enumerate() {
                *o += b[i * n + j] * xi;
            }
        }
        out
    }

    /// `B y`.
    fn expand(&self, y: &[f64]) -> Vec<f64> {
        let n = self.config.modes;
        if n == 0 {
            return vec![0.0; self.config.shape.len()];
        }
        self.modes()
            .chunks_exact(n)
            .map(|row| row.iter().zip(y).map(|(b, v)| b * v).sum())
            .collect()
    }

    /// `(s I + alpha^2 B B^T)^-1 x` given the Cholesky factor of the
    /// capacitance matrix.
    fn solve(&self, chol: &[f64], s: f64, alpha: f64, x: &[f64]) -> Vec<f64> {
        let n = self.config.modes;
        if n == 0 {
            return x.iter().map(|v| v / s).collect();
        }
        let y = cholesky_solve(chol, n, &self.project(x));
        let by = self.expand(&y);
        x.iter().zip(by).map(|(xi, b)| (xi - alpha * alpha * b) / s).collect()
    }

    pub(crate) fn forward(&self, z: &[f64], alpha: f64, sigma: f64, cond: &[f64]) -> Trace {
        let p = self.config.shape.len();
        let k = self.config.latent_dim;
        let d = self.config.cond_dim;
        let l = self.layout();
        let th = &self.params;

        let hidden: Vec<f64> = (0..k)
            .map(|j| {
                let row = &th[l.w + j * d..l.w + (j + 1) * d];
                let a = th[l.b1 + j] + row.iter().zip(cond).map(|(w, c)| w * c).sum::<f64>();
                a.tanh()
            })
            .collect();
        let mean: Vec<f64> = (0..p)
            .map(|i| {
                let row = &th[l.u + i * k..l.u + (i + 1) * k];
                th[l.b0 + i] + row.iter().zip(&hidden).map(|(u, h)| u * h).sum::<f64>()
            })
            .collect();
        let var = th[l.log_var].exp();
        let s = alpha * alpha * var + sigma * sigma;
        let n = self.config.modes;
        let mut chol = vec![0.0; n * n];
        if n > 0 {
            let b = self.modes();
            for i in 0..p {
                let row = &b[i * n..(i + 1) * n];
                for a in 0..n {
                    for c in 0..=a {
                        chol[a * n + c] += row[a] * row[c];
                    }
                }
            }
            for a in 0..n {
                for c in 0..=a {
                    chol[a * n + c] *= alpha * alpha;
                }
                chol[a * n + a] += s;
            }
            cholesky(&mut chol, n);
        }
        let r: Vec<f64> = z.iter().zip(&mean).map(|(zi, m)| zi - alpha * m).collect();
        let q = self.solve(&chol, s, alpha, &r);
        let bq = self.project(&q);
        let bbq = self.expand(&bq);
        let xhat = (0..p)
            .map(|i| mean[i] + alpha * (var * q[i] + bbq[i]))
            .collect();
        Trace {
            xhat,
            hidden,
            q,
            bq,
            chol,
            s,
        }
    }

    /// Accumulates `dL/dtheta` into `grad` given `dL/dx_hat`.
    pub(crate) fn backward(
        &self,
        trace: &Trace,
        alpha: f64,
        cond: &[f64],
        dxhat: &[f64],
        grad: &mut [f64],
    ) {
        let p = self.config.shape.len();
        let k = self.config.latent_dim;
        let d = self.config.cond_dim;
        let l = self.layout();
        let th = &self.params;

        let n = self.config.modes;
        let var = th[l.log_var].exp();
        let q = &trace.q;

        // Direct dependence of x_hat = m + alpha (v q + B B^T q).
        let h = self.project(dxhat);
        let bh = self.expand(&h);
        let gq: Vec<f64> = (0..p).map(|i| alpha * (var * dxhat[i] + bh[i])).collect();
        let mut dvar = alpha * q.iter().zip(dxhat).map(|(a, b)| a * b).sum::<f64>();

        // q = A^-1 r with A = s I + alpha^2 B B^T.
        let w = self.solve(&trace.chol, trace.s, alpha, &gq);
        dvar -= alpha * alpha * w.iter().zip(q).map(|(a, b)| a * b).sum::<f64>();
        if n > 0 {
            let bw = self.project(&w);
            let a2 = alpha * alpha;
            for i in 0..p {
                let row = l.modes + i * n;
                for j in 0..n {
                    grad[row + j] += alpha * (dxhat[i] * trace.bq[j] + q[i] * h[j])
                        - a2 * (w[i] * trace.bq[j] + q[i] * bw[j]);
                }
            }
        }
        grad[l.log_var] += dvar * var;

        let mut dhidden = vec![0.0; k];
        for i in 0..p {
            let dm = dxhat[i] - alpha * w[i];
            grad[l.b0 + i] += dm;
            let urow = l.u + i * k;
            for j in 0..k {
                grad[urow + j] += dm * trace.hidden[j];
                dhidden[j] += dm * th[urow + j];
            }
        }
        for j in 0..k {
            let da = dhidden[j] * (1.0 - trace.hidden[j] * trace.hidden[j]);
            grad[l.b1 + j] += da;
            let wrow = l.w + j * d;
            for (c, cv) in cond.iter().enumerate() {
                grad[wrow + c] += da * cv;
            }
        }
    }

    /// Predicts the clean image from a noised image at timestep `t`.
    pub fn predict(
        &self,
        z: &[f64],
        t: usize,
        cond: &[f64],
        schedule: &NoiseSchedule,
    ) -> Result<Vec<f64>> {
        self.check_inputs(z, cond)?;
        let (alpha, sigma) = schedule.coefficients(t)?;
        Ok(self.forward(z, alpha, sigma, cond).xhat)
    }

    pub(crate) fn check_inputs(&self, z: &[f64], cond: &[f64]) -> Result<()> {
        if z.len() != self.config.shape.len() {
            return Err(Error::invalid(format!(
                "denoiser input has {} values, shape {} needs {}",
                z.len(),
                self.config.shape,
                self.config.shape.len()
            )));
        }
        if cond.len() != self.config.cond_dim {
            return Err(Error::invalid(format!(
                "condition has width {}, denoiser expects {}",
                cond.len(),
                self.config.cond_dim
            )));
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let s = self.config.shape;
        let mut ck = Checkpoint::new(DENOISER_KIND)
            .with("channels", s.channels)
            .with("height", s.height)
            .with("width", s.width)
            .with("cond_dim", self.config.cond_dim)
            .with("latent_dim", self.config.latent_dim)
            .with("modes", self.config.modes);
        ck.params = self.params.clone();
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(DENOISER_KIND)?;
        let config = DenoiserConfig {
            shape: ImageShape::new(ck.get("channels")?, ck.get("height")?, ck.get("width")?),
            cond_dim: ck.get("cond_dim")?,
            latent_dim: ck.get("latent_dim")?,
            modes: ck.get("modes")?,
        };
        Self::from_params(config, ck.params.clone())
    }
}
