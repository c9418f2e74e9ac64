//! Adaptive average pooling, its broadcast inverse, and global reductions.

use super::{BackwardOp, GradPair, Tensor};
use ndarray::{Array2, Array4, ArrayD, Ix4};

/// Split `len` positions into `grid` contiguous regions,
/// `[i*len/grid, (i+1)*len/grid)`. Region sizes are floor or ceil of
/// `len/grid`, never empty for `grid <= len`. Pooling and unpooling share
/// this exact partition so they are transposes of each other.
pub fn partition(len: usize, grid: usize) -> Vec<(usize, usize)> {
    assert!(grid >= 1 && grid <= len, "grid {grid} must be in 1..={len}");
    (0..grid).map(|i| (i * len / grid, (i + 1) * len / grid)).collect()
}

struct AdaptiveAvgPoolBackward {
    x: Tensor,
    rows: Vec<(usize, usize)>,
    cols: Vec<(usize, usize)>,
}

impl BackwardOp for AdaptiveAvgPoolBackward {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.x.clone()]
    }
    fn backward(&self, g: &ArrayD<f64>) -> Vec<GradPair> {
        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, _, _) = g4.dim();
        let xs = self.x.shape();
        let mut dx = Array4::<f64>::zeros((xs[0], xs[1], xs[2], xs[3]));
        for item in 0..n {
            for ch in 0..c {
                for (gi, &(r0, r1)) in self.rows.iter().enumerate() {
                    for (gj, &(c0, c1)) in self.cols.iter().enumerate() {
                        let share =
                            g4[(item, ch, gi, gj)] / ((r1 - r0) * (c1 - c0)) as f64;
                        for r in r0..r1 {
                            for cc in c0..c1 {
                                dx[(item, ch, r, cc)] += share;
                            }
                        }
                    }
                }
            }
        }
        vec![(self.x.clone(), dx.into_dyn())]
    }
}

struct UnpoolBroadcastBackward {
    x: Tensor,
    rows: Vec<(usize, usize)>,
    cols: Vec<(usize, usize)>,
}

impl BackwardOp for UnpoolBroadcastBackward {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.x.clone()]
    }
    fn backward(&self, g: &ArrayD<f64>) -> Vec<GradPair> {
        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, _, _) = g4.dim();
        let xs = self.x.shape();
        let mut dx = Array4::<f64>::zeros((xs[0], xs[1], xs[2], xs[3]));
        for item in 0..n {
            for ch in 0..c {
                for (gi, &(r0, r1)) in self.rows.iter().enumerate() {
                    for (gj, &(c0, c1)) in self.cols.iter().enumerate() {
                        let mut acc = 0.0;
                        for r in r0..r1 {
                            for cc in c0..c1 {
                                acc += g4[(item, ch, r, cc)];
                            }
                        }
                        dx[(item, ch, gi, gj)] += acc;
                    }
                }
            }
        }
        vec![(self.x.clone(), dx.into_dyn())]
    }
}

struct SpatialMeanBackward {
    x: Tensor,
}

impl BackwardOp for SpatialMeanBackward {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.x.clone()]
    }
    fn backward(&self, g: &ArrayD<f64>) -> Vec<GradPair> {
        let xs = self.x.shape();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut dx = Array4::<f64>::zeros((n, c, h, w));
        let share = 1.0 / (h * w) as f64;
        for item in 0..n {
            for ch in 0..c {
                let v = g2[(item, ch)] * share;
                dx.index_axis_mut(ndarray::Axis(0), item)
                    .index_axis_mut(ndarray::Axis(0), ch)
                    .fill(v);
            }
        }
        vec![(self.x.clone(), dx.into_dyn())]
    }
}

struct PixelSumBackward {
    x: Tensor,
    row: usize,
    col: usize,
}

impl BackwardOp for PixelSumBackward {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.x.clone()]
    }
    fn backward(&self, g: &ArrayD<f64>) -> Vec<GradPair> {
        let gv = g.iter().next().copied().unwrap_or(0.0);
        let xs = self.x.shape();
        let mut dx = Array4::<f64>::zeros((xs[0], xs[1], xs[2], xs[3]));
        for item in 0..xs[0] {
            for ch in 0..xs[1] {
                dx[(item, ch, self.row, self.col)] = gv;
            }
        }
        vec![(self.x.clone(), dx.into_dyn())]
    }
}

impl Tensor {
    /// Average-pool to a `gh x gw` grid using [`partition`] regions.
    pub fn adaptive_avg_pool(&self, gh: usize, gw: usize) -> Tensor {
        let (n, c, h, w) = self.dims4();
        let rows = partition(h, gh);
        let cols = partition(w, gw);
        let xd = self.data();
        let x4 = xd.view().into_dimensionality::<Ix4>().unwrap();
        let mut out = Array4::<f64>::zeros((n, c, gh, gw));
        for item in 0..n {
            for ch in 0..c {
                for (gi, &(r0, r1)) in rows.iter().enumerate() {
                    for (gj, &(c0, c1)) in cols.iter().enumerate() {
                        let mut acc = 0.0;
                        for r in r0..r1 {
                            for cc in c0..c1 {
                                acc += x4[(item, ch, r, cc)];
                            }
                        }
                        out[(item, ch, gi, gj)] = acc / ((r1 - r0) * (c1 - c0)) as f64;
                    }
                }
            }
        }
        drop(xd);
        Tensor::from_op(
            out.into_dyn(),
            Box::new(AdaptiveAvgPoolBackward {
                x: self.clone(),
                rows,
                cols,
            }),
        )
    }

    /// Broadcast each grid cell uniformly over its source region, the exact
    /// inverse layout of [`Tensor::adaptive_avg_pool`].
    pub fn unpool_broadcast(&self, th: usize, tw: usize) -> Tensor {
        let (n, c, gh, gw) = self.dims4();
        let rows = partition(th, gh);
        let cols = partition(tw, gw);
        let xd = self.data();
        let x4 = xd.view().into_dimensionality::<Ix4>().unwrap();
        let mut out = Array4::<f64>::zeros((n, c, th, tw));
        for item in 0..n {
            for ch in 0..c {
                for (gi, &(r0, r1)) in rows.iter().enumerate() {
                    for (gj, &(c0, c1)) in cols.iter().enumerate() {
                        let v = x4[(item, ch, gi, gj)];
                        for r in r0..r1 {
                            for cc in c0..c1 {
                                out[(item, ch, r, cc)] = v;
                            }
                        }
                    }
                }
            }
        }
        drop(xd);
        Tensor::from_op(
            out.into_dyn(),
            Box::new(UnpoolBroadcastBackward {
                x: self.clone(),
                rows,
                cols,
            }),
        )
    }

    /// Global average pool collapsing spatial dims: (N,C,H,W) -> (N,C).
    pub fn spatial_mean2d(&self) -> Tensor {
        let (n, c, h, w) = self.dims4();
        let xd = self.data();
        let x4 = xd.view().into_dimensionality::<Ix4>().unwrap();
        let mut out = Array2::<f64>::zeros((n, c));
        for item in 0..n {
            for ch in 0..c {
                out[(item, ch)] =
                    x4.index_axis(ndarray::Axis(0), item).index_axis(ndarray::Axis(0), ch).sum()
                        / (h * w) as f64;
            }
        }
        drop(xd);
        Tensor::from_op(out.into_dyn(), Box::new(SpatialMeanBackward { x: self.clone() }))
    }

    /// Sum over batch and channels of one spatial position; the scalar probe
    /// used by impulse-response receptive-field measurements.
    pub fn pixel_sum(&self, row: usize, col: usize) -> Tensor {
        let (n, c, h, w) = self.dims4();
        assert!(row < h && col < w, "pixel ({row},{col}) outside {h}x{w}");
        let xd = self.data();
        let x4 = xd.view().into_dimensionality::<Ix4>().unwrap();
        let mut acc = 0.0;
        for item in 0..n {
            for ch in 0..c {
                acc += x4[(item, ch, row, col)];
            }
        }
        drop(xd);
        Tensor::from_op(
            ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1]), acc),
            Box::new(PixelSumBackward {
                x: self.clone(),
                row,
                col,
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn partition_covers_without_overlap() {
        for len in 1..40usize {
            for grid in 1..=len {
                let regions = partition(len, grid);
                assert_eq!(regions.len(), grid);
                assert_eq!(regions[0].0, 0);
                assert_eq!(regions[grid - 1].1, len);
                for w in regions.windows(2) {
                    assert_eq!(w[0].1, w[1].0);
                    assert!(w[0].0 < w[0].1);
                }
            }
        }
    }

    #[test]
    fn pool_then_unpool_is_identity_on_constants() {
        let x = Tensor::constant(Array4::from_elem((1, 2, 6, 6), 3.5).into_dyn());
        let pooled = x.adaptive_avg_pool(4, 4);
        let back = pooled.unpool_broadcast(6, 6);
        assert_eq!(back.to_array(), x.to_array());
    }

    #[test]
    fn pool_unpool_gradients_match_fd() {
        let base: Vec<f64> = (0..32).map(|i| (i as f64 * 0.7).sin()).collect();
        let x = Tensor::param(Array4::from_shape_vec((1, 2, 4, 4), base.clone()).unwrap().into_dyn());
        let y = x.adaptive_avg_pool(3, 3).unpool_broadcast(4, 4).sum_all();
        y.backward();
        let g = x.grad().unwrap();
        let eps = 1e-6;
        for idx in 0..32 {
            let f = |v: &[f64]| {
                let t = Tensor::constant(
                    Array4::from_shape_vec((1, 2, 4, 4), v.to_vec()).unwrap().into_dyn(),
                );
                t.adaptive_avg_pool(3, 3).unpool_broadcast(4, 4).sum_all().item()
            };
            let mut p = base.clone();
            p[idx] += eps;
            let mut m = base.clone();
            m[idx] -= eps;
            let fd = (f(&p) - f(&m)) / (2.0 * eps);
            assert!((g.as_slice().unwrap()[idx] - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn pixel_sum_gradient_is_one_hot() {
        let x = Tensor::param(Array4::from_elem((1, 3, 5, 5), 1.0).into_dyn());
        x.pixel_sum(2, 3).backward();
        let g = x.grad().unwrap();
        assert_eq!(g.sum(), 3.0);
        let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        for ch in 0..3 {
            assert_eq!(g4[(0, ch, 2, 3)], 1.0);
        }
    }
}
