//! Bilinear resampling with half-pixel centers (align_corners = false).

use super::{BackwardOp, GradPair, Tensor};
use ndarray::{Array4, ArrayD, Ix4};

/// Per-destination-index source taps for 1-d bilinear interpolation:
/// `(lo, hi, t)` meaning `out[i] = (1-t)*src[lo] + t*src[hi]`.
pub fn bilinear_weights(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale - 0.5;
            let clamped = center.max(0.0);
            let lo = (clamped.floor() as usize).min(src_len - 1);
            let hi = (lo + 1).min(src_len - 1);
            let t = (clamped - lo as f64).clamp(0.0, 1.0);
            (lo, hi, t)
        })
        .collect()
}

struct ResizeBilinearBackward {
    x: Tensor,
    wh: Vec<(usize, usize, f64)>,
    ww: Vec<(usize, usize, f64)>,
}

impl BackwardOp for ResizeBilinearBackward {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.x.clone()]
    }
    fn backward(&self, g: &ArrayD<f64>) -> Vec<GradPair> {
        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, oh, ow) = g4.dim();
        let xs = self.x.shape();
        let mut dx = Array4::<f64>::zeros((xs[0], xs[1], xs[2], xs[3]));
        for item in 0..n {
            for ch in 0..c {
                for i in 0..oh {
                    let (r0, r1, tr) = self.wh[i];
                    for j in 0..ow {
                        let (c0, c1, tc) = self.ww[j];
                        let gv = g4[(item, ch, i, j)];
                        dx[(item, ch, r0, c0)] += gv * (1.0 - tr) * (1.0 - tc);
                        dx[(item, ch, r0, c1)] += gv * (1.0 - tr) * tc;
                        dx[(item, ch, r1, c0)] += gv * tr * (1.0 - tc);
                        dx[(item, ch, r1, c1)] += gv * tr * tc;
                    }
                }
            }
        }
        vec![(self.x.clone(), dx.into_dyn())]
    }
}

impl Tensor {
    /// Resample to `(out_h, out_w)` with bilinear interpolation.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Tensor {
        let (n, c, h, w) = self.dims4();
        let wh = bilinear_weights(h, out_h);
        let ww = bilinear_weights(w, out_w);
        let xd = self.data();
        let x4 = xd.view().into_dimensionality::<Ix4>().unwrap();
        let mut out = Array4::<f64>::zeros((n, c, out_h, out_w));
        for item in 0..n {
            for ch in 0..c {
                for (i, &(r0, r1, tr)) in wh.iter().enumerate() {
                    for (j, &(c0, c1, tc)) in ww.iter().enumerate() {
                        let top = (1.0 - tc) * x4[(item, ch, r0, c0)] + tc * x4[(item, ch, r0, c1)];
                        let bot = (1.0 - tc) * x4[(item, ch, r1, c0)] + tc * x4[(item, ch, r1, c1)];
                        out[(item, ch, i, j)] = (1.0 - tr) * top + tr * bot;
                    }
                }
            }
        }
        drop(xd);
        Tensor::from_op(
            out.into_dyn(),
            Box::new(ResizeBilinearBackward {
                x: self.clone(),
                wh,
                ww,
            }),
        )
    }
}
