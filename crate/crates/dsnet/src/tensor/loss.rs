//! Batch normalization, the dense layer, and masked cross-entropy.

use super::{BackwardOp, GradPair, Tensor};
use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Ix2, Ix4};

struct BatchNormBackward {
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    x_hat: Array4<f64>,
    inv_std: Array1<f64>,
    /// True when mean/var were computed from this batch (training mode);
    /// their dependence on x then enters the input gradient.
    stats_from_batch: bool,
}

impl BackwardOp for BatchNormBackward {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.x.clone(), self.gamma.clone(), self.beta.clone()]
    }

    fn backward(&self, g: &ArrayD<f64>) -> Vec<GradPair> {
        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = g4.dim();
        let m = (n * h * w) as f64;
        let gamma = self.gamma.data();
        let mut dgamma = Array1::<f64>::zeros(c);
        let mut dbeta = Array1::<f64>::zeros(c);
        let mut dx = Array4::<f64>::zeros((n, c, h, w));

        for ch in 0..c {
            let mut sum_g = 0.0;
            let mut sum_g_xhat = 0.0;
            for item in 0..n {
                for r in 0..h {
                    for cc in 0..w {
                        let gv = g4[(item, ch, r, cc)];
                        sum_g += gv;
                        sum_g_xhat += gv * self.x_hat[(item, ch, r, cc)];
                    }
                }
            }
            dbeta[ch] = sum_g;
            dgamma[ch] = sum_g_xhat;
            let gam = gamma[ch];
            let istd = self.inv_std[ch];
            for item in 0..n {
                for r in 0..h {
                    for cc in 0..w {
                        let gv = g4[(item, ch, r, cc)];
                        let v = if self.stats_from_batch {
                            // d/dx of ((x - mean)/std * gamma): the mean and
                            // variance terms contribute the two corrections.
                            gam * istd
                                * (gv - sum_g / m
                                    - self.x_hat[(item, ch, r, cc)] * sum_g_xhat / m)
                        } else {
                            gam * istd * gv
                        };
                        dx[(item, ch, r, cc)] = v;
                    }
                }
            }
        }
        vec![
            (self.x.clone(), dx.into_dyn()),
            (self.gamma.clone(), dgamma.into_dyn()),
            (self.beta.clone(), dbeta.into_dyn()),
        ]
    }
}

struct LinearBackward {
    x: Tensor,
    w: Tensor,
    b: Tensor,
}

impl BackwardOp for LinearBackward {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.x.clone(), self.w.clone(), self.b.clone()]
    }
    fn backward(&self, g: &ArrayD<f64>) -> Vec<GradPair> {
        let g2 = g.view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let xd = self.x.data();
        let x2 = xd.view().into_dimensionality::<Ix2>().unwrap();
        let wd = self.w.data();
        let w2 = wd.view().into_dimensionality::<Ix2>().unwrap();
        let dx = g2.dot(&w2);
        let dw = g2.t().dot(&x2);
        let db = g2.sum_axis(ndarray::Axis(0));
        drop(xd);
        drop(wd);
        vec![
            (self.x.clone(), dx.into_dyn()),
            (self.w.clone(), dw.into_dyn()),
            (self.b.clone(), db.into_dyn()),
        ]
    }
}

struct CrossEntropyBackward {
    logits: Tensor,
    softmax: Array4<f64>,
    labels: Array3<u32>,
    ignore: u32,
    n_valid: usize,
}

impl BackwardOp for CrossEntropyBackward {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.logits.clone()]
    }
    fn backward(&self, g: &ArrayD<f64>) -> Vec<GradPair> {
        let gv = g.iter().next().copied().unwrap_or(0.0);
        let (n, k, h, w) = self.softmax.dim();
        let mut dl = Array4::<f64>::zeros((n, k, h, w));
        let scale = gv / self.n_valid as f64;
        for item in 0..n {
            for r in 0..h {
                for cc in 0..w {
                    let label = self.labels[(item, r, cc)];
                    if label == self.ignore {
                        continue;
                    }
                    for cls in 0..k {
                        let p = self.softmax[(item, cls, r, cc)];
                        let y = if cls as u32 == label { 1.0 } else { 0.0 };
                        dl[(item, cls, r, cc)] = (p - y) * scale;
                    }
                }
            }
        }
        vec![(self.logits.clone(), dl.into_dyn())]
    }
}

impl Tensor {
    /// Batch normalization over (N,H,W) per channel with caller-supplied
    /// statistics. `stats_from_batch` must be true when `mean`/`var` were
    /// derived from `self` so the backward pass differentiates through them.
    pub fn batch_norm(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        mean: &Array1<f64>,
        var: &Array1<f64>,
        eps: f64,
        stats_from_batch: bool,
    ) -> Tensor {
        let (n, c, h, w) = self.dims4();
        assert_eq!(gamma.shape(), vec![c], "gamma shape");
        assert_eq!(beta.shape(), vec![c], "beta shape");
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xd = self.data();
        let x4 = xd.view().into_dimensionality::<Ix4>().unwrap();
        let gam = gamma.data();
        let bet = beta.data();
        let mut x_hat = Array4::<f64>::zeros((n, c, h, w));
        let mut out = Array4::<f64>::zeros((n, c, h, w));
        for item in 0..n {
            for ch in 0..c {
                let mu = mean[ch];
                let istd = inv_std[ch];
                for r in 0..h {
                    for cc in 0..w {
                        let xh = (x4[(item, ch, r, cc)] - mu) * istd;
                        x_hat[(item, ch, r, cc)] = xh;
                        out[(item, ch, r, cc)] = gam[ch] * xh + bet[ch];
                    }
                }
            }
        }
        drop(xd);
        drop(gam);
        drop(bet);
        Tensor::from_op(
            out.into_dyn(),
            Box::new(BatchNormBackward {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                x_hat,
                inv_std,
                stats_from_batch,
            }),
        )
    }

    /// Dense layer on (N,C): `y = x W^T + b` with `W` of shape (K, C).
    pub fn linear(&self, weight: &Tensor, bias: &Tensor) -> Tensor {
        let xd = self.data();
        let x2 = xd.view().into_dimensionality::<Ix2>().unwrap();
        let wd = weight.data();
        let w2 = wd.view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(x2.dim().1, w2.dim().1, "linear in-features mismatch");
        let mut y: Array2<f64> = x2.dot(&w2.t());
        let bd = bias.data();
        for mut row in y.rows_mut() {
            for (i, v) in row.iter_mut().enumerate() {
                *v += bd[i];
            }
        }
        drop(xd);
        drop(wd);
        drop(bd);
        Tensor::from_op(
            y.into_dyn(),
            Box::new(LinearBackward {
                x: self.clone(),
                w: weight.clone(),
                b: bias.clone(),
            }),
        )
    }

    /// Mean per-pixel cross-entropy of (N,K,H,W) logits against (N,H,W)
    /// labels, skipping pixels labeled `ignore`. Returns the scalar loss and
    /// the number of contributing pixels.
    pub fn cross_entropy_ignore(&self, labels: &Array3<u32>, ignore: u32) -> (Tensor, usize) {
        let (n, k, h, w) = self.dims4();
        assert_eq!(labels.dim(), (n, h, w), "label shape mismatch");
        let xd = self.data();
        let x4 = xd.view().into_dimensionality::<Ix4>().unwrap();
        let mut softmax = Array4::<f64>::zeros((n, k, h, w));
        let mut loss = 0.0;
        let mut n_valid = 0usize;
        for item in 0..n {
            for r in 0..h {
                for cc in 0..w {
                    let mut max_v = f64::NEG_INFINITY;
                    for cls in 0..k {
                        max_v = max_v.max(x4[(item, cls, r, cc)]);
                    }
                    let mut denom = 0.0;
                    for cls in 0..k {
                        denom += (x4[(item, cls, r, cc)] - max_v).exp();
                    }
                    let log_denom = denom.ln();
                    for cls in 0..k {
                        softmax[(item, cls, r, cc)] =
                            ((x4[(item, cls, r, cc)] - max_v) - log_denom).exp();
                    }
                    let label = labels[(item, r, cc)];
                    if label == ignore {
                        continue;
                    }
                    assert!((label as usize) < k, "label {label} out of range for {k} classes");
                    n_valid += 1;
                    loss -= (x4[(item, label as usize, r, cc)] - max_v) - log_denom;
                }
            }
        }
        drop(xd);
        assert!(n_valid > 0, "cross entropy over fully-ignored target");
        let mean = loss / n_valid as f64;
        let t = Tensor::from_op(
            ArrayD::from_elem(ndarray::IxDyn(&[1]), mean),
            Box::new(CrossEntropyBackward {
                logits: self.clone(),
                softmax,
                labels: labels.clone(),
                ignore,
                n_valid,
            }),
        );
        (t, n_valid)
    }
}
