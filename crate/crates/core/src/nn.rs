//! Minimal dense-network building blocks shared by the filter models and the
//! pre-training backbone: row-major matrices over flat parameter slices,
//! softmax cross-entropy, and Adam/AdamW.

use crate::rng::{normal_vec, Rng};

/// `out = W x + b` for a row-major `W` of shape (rows, cols).
pub fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *o = b[r] + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
    }
}

/// Accumulates gradients of `out = W x + b`: `dW += dout x^T`, `db += dout`,
/// and returns `dx = W^T dout`.
pub fn affine_backward(
    w: &[f64],
    x: &[f64],
    dout: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let cols = x.len();
    let mut dx = vec![0.0; cols];
    for (r, &g) in dout.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        db[r] += g;
        let row = &w[r * cols..(r + 1) * cols];
        let drow = &mut dw[r * cols..(r + 1) * cols];
        for c in 0..cols {
            drow[c] += g * x[c];
            dx[c] += g * row[c];
        }
    }
    dx
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Cross-entropy against a (possibly soft) target distribution.
/// Returns the loss and `dL/dlogits`.
pub fn softmax_cross_entropy(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let loss = -target
        .iter()
        .zip(&p)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, q)| t * q.max(1e-300).ln())
        .sum::<f64>();
    let grad = p.iter().zip(target).map(|(q, t)| q - t).collect();
    (loss, grad)
}

pub fn one_hot(n: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    v
}

/// Scaled Gaussian initialisation (fan-in).
pub fn init_weights(rng: &mut Rng, len: usize, fan_in: usize, gain: f64) -> Vec<f64> {
    let scale = gain / (fan_in.max(1) as f64).sqrt();
    normal_vec(rng, len).into_iter().map(|v| v * scale).collect()
}

pub fn l2_normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Adam with optional decoupled weight decay (AdamW).
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            if self.weight_decay > 0.0 {
                params[i] -= lr * self.weight_decay * params[i];
            }
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// One-hidden-layer tanh network (or plain linear model when `hidden == 0`)
/// trained with softmax cross-entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub params: Vec<f64>,
}

impl Mlp {
    pub fn new(input: usize, hidden: usize, output: usize, rng: &mut Rng) -> Self {
        let mut params = Vec::new();
        if hidden > 0 {
            params.extend(init_weights(rng, hidden * input, input, 1.0));
            params.extend(std::iter::repeat_n(0.0, hidden));
            params.extend(init_weights(rng, output * hidden, hidden, 1.0));
        } else {
            params.extend(init_weights(rng, output * input, input, 1.0));
        }
        params.extend(std::iter::repeat_n(0.0, output));
        Self {
            input,
            hidden,
            output,
            params,
        }
    }

    fn split(&self) -> (usize, usize, usize) {
        if self.hidden == 0 {
            (0, 0, 0)
        } else {
            let w1 = self.hidden * self.input;
            (w1, w1 + self.hidden, w1 + self.hidden + self.output * self.hidden)
        }
    }

    /// Penultimate representation: tanh hidden units, or the input itself
    /// for a linear model.
    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        if self.hidden == 0 {
            return x.to_vec();
        }
        let (b1, _, _) = self.split();
        let mut h = vec![0.0; self.hidden];
        affine(&self.params[..b1], &self.params[b1..b1 + self.hidden], x, &mut h);
        h.iter_mut().for_each(|v| *v = v.tanh());
        h
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let h = self.features(x);
        let mut out = vec![0.0; self.output];
        if self.hidden == 0 {
            let w = self.output * self.input;
            affine(&self.params[..w], &self.params[w..], &h, &mut out);
        } else {
            let (_, w2, b2) = self.split();
            affine(&self.params[w2..b2], &self.params[b2..], &h, &mut out);
        }
        out
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    /// Mean cross-entropy over the batch and its parameter gradient.
    pub fn loss_and_grad(&self, xs: &[Vec<f64>], targets: &[Vec<f64>]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.params.len()];
        let mut total = 0.0;
        let n = xs.len().max(1) as f64;
        for (x, t) in xs.iter().zip(targets) {
            let h = self.features(x);
            let logits = self.logits(x);
            let (loss, dlogits) = softmax_cross_entropy(&logits, t);
            total += loss;
            let dlogits: Vec<f64> = dlogits.iter().map(|g| g / n).collect();
            if self.hidden == 0 {
                let w = self.output * self.input;
                let (dw, db) = grad.split_at_mut(w);
                affine_backward(&self.params[..w], x, &dlogits, dw, db);
            } else {
                let (b1, w2, b2) = self.split();
                let dh = {
                    let (head, db2) = grad[w2..].split_at_mut(b2 - w2);
                    affine_backward(&self.params[w2..b2], &h, &dlogits, head, db2)
                };
                let da: Vec<f64> = dh.iter().zip(&h).map(|(d, hv)| d * (1.0 - hv * hv)).collect();
                let (dw1, rest) = grad.split_at_mut(b1);
                affine_backward(&self.params[..b1], x, &da, dw1, &mut rest[..self.hidden]);
            }
        }
        (total / n, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant() {
        let p = softmax(&[1.0, 2.0, 3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let q = softmax(&[101.0, 102.0, 103.0]);
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_backward_matches_finite_differences() {
        let w = vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.4];
        let b = vec![0.05, -0.1];
        let x = vec![1.0, -2.0, 0.5];
        let f = |w: &[f64], x: &[f64]| {
            let mut o = vec![0.0; 2];
            affine(w, &b, x, &mut o);
            o[0] * o[0] + 3.0 * o[1]
        };
        let mut o = vec![0.0; 2];
        affine(&w, &b, &x, &mut o);
        let dout = vec![2.0 * o[0], 3.0];
        let mut dw = vec![0.0; 6];
        let mut db = vec![0.0; 2];
        let dx = affine_backward(&w, &x, &dout, &mut dw, &mut db);
        let h = 1e-6;
        for i in 0..6 {
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            let fd = (f(&wp, &x) - f(&wm, &x)) / (2.0 * h);
            assert!((fd - dw[i]).abs() < 1e-6);
        }
        for i in 0..3 {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (f(&w, &xp) - f(&w, &xm)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        for hidden in [0, 3] {
            let mut r = crate::rng::rng(4);
            let mut net = Mlp::new(4, hidden, 3, &mut r);
            let xs = vec![vec![0.5, -0.2, 0.1, 0.9], vec![-0.7, 0.3, 0.8, -0.1]];
            let ts = vec![one_hot(3, 0), vec![0.25, 0.0, 0.75]];
            let (_, g) = net.loss_and_grad(&xs, &ts);
            let h = 1e-6;
            for i in 0..net.params.len() {
                let orig = net.params[i];
                net.params[i] = orig + h;
                let lp = net.loss_and_grad(&xs, &ts).0;
                net.params[i] = orig - h;
                let lm = net.loss_and_grad(&xs, &ts).0;
                net.params[i] = orig;
                assert!(((lp - lm) / (2.0 * h) - g[i]).abs() < 1e-7, "param {i}");
            }
        }
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2);
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            opt.step(&mut p, &g, 0.05);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-3));
    }
}
