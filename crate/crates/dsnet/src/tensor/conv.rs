//! 2-d convolution with dilation via im2col + GEMM, plus the full backward.

use super::{BackwardOp, GradPair, Tensor};
use ndarray::{Array2, Array4, ArrayD, ArrayView4, Ix4};

/// Spatial padding policy. `Same` pads by `(k-1)*d` total per axis (split
/// evenly; exact for odd kernels) so stride-1 convs preserve H and W and
/// strided convs produce `ceil(n/s)`. `Valid` pads nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_before: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        h: usize,
        w: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        padding: Padding,
    ) -> ConvGeometry {
        let extent = (kernel - 1) * dilation + 1;
        let (pad_before, pad_total) = match padding {
            Padding::Same => {
                let total = (kernel - 1) * dilation;
                (total / 2, total)
            }
            Padding::Valid => (0, 0),
        };
        assert!(
            h + pad_total >= extent && w + pad_total >= extent,
            "conv input {h}x{w} smaller than kernel extent {extent}"
        );
        let out_h = (h + pad_total - extent) / stride + 1;
        let out_w = (w + pad_total - extent) / stride + 1;
        ConvGeometry {
            kernel,
            stride,
            dilation,
            pad_before,
            out_h,
            out_w,
        }
    }
}

/// Gather one batch item into a (Cin*k*k, Ho*Wo) matrix.
fn im2col(x: &ArrayView4<f64>, n: usize, geo: &ConvGeometry) -> Array2<f64> {
    let (_, cin, h, w) = x.dim();
    let k = geo.kernel;
    let (ho, wo) = (geo.out_h, geo.out_w);
    let mut col = Array2::<f64>::zeros((cin * k * k, ho * wo));
    for ci in 0..cin {
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let mut col_row = col.row_mut(row);
                for oh in 0..ho {
                    let ih = (oh * geo.stride + kh * geo.dilation) as isize
                        - geo.pad_before as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = (ow * geo.stride + kw * geo.dilation) as isize
                            - geo.pad_before as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        col_row[oh * wo + ow] = x[(n, ci, ih as usize, iw as usize)];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add the transpose of im2col: column-space gradients back onto the
/// input image.
fn col2im(dcol: &Array2<f64>, dx: &mut Array4<f64>, n: usize, geo: &ConvGeometry) {
    let (_, cin, h, w) = dx.dim();
    let k = geo.kernel;
    let (ho, wo) = (geo.out_h, geo.out_w);
    for ci in 0..cin {
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let dcol_row = dcol.row(row);
                for oh in 0..ho {
                    let ih = (oh * geo.stride + kh * geo.dilation) as isize
                        - geo.pad_before as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = (ow * geo.stride + kw * geo.dilation) as isize
                            - geo.pad_before as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        dx[(n, ci, ih as usize, iw as usize)] += dcol_row[oh * wo + ow];
                    }
                }
            }
        }
    }
}

struct Conv2dBackward {
    x: Tensor,
    w: Tensor,
    b: Option<Tensor>,
    geo: ConvGeometry,
}

impl BackwardOp for Conv2dBackward {
    fn parents(&self) -> Vec<Tensor> {
        let mut p = vec![self.x.clone(), self.w.clone()];
        if let Some(b) = &self.b {
            p.push(b.clone());
        }
        p
    }

    fn backward(&self, grad_out: &ArrayD<f64>) -> Vec<GradPair> {
        let xd = self.x.data();
        let x4 = xd.view().into_dimensionality::<Ix4>().unwrap();
        let wd = self.w.data();
        let (n, _, _, _) = x4.dim();
        let (cout, cin, k, _) = wd
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .dim();
        let g4 = grad_out.view().into_dimensionality::<Ix4>().unwrap();
        let (ho, wo) = (self.geo.out_h, self.geo.out_w);
        let w2 = wd
            .view()
            .into_shape_with_order((cout, cin * k * k))
            .unwrap()
            .to_owned();

        let mut dw = Array2::<f64>::zeros((cout, cin * k * k));
        let mut dx = Array4::<f64>::zeros(x4.dim());
        for item in 0..n {
            // Recompute the column matrix rather than caching it from the
            // forward pass; keeps live memory proportional to activations.
            let col = im2col(&x4, item, &self.geo);
            let g2 = g4
                .index_axis(ndarray::Axis(0), item)
                .into_shape_with_order((cout, ho * wo))
                .unwrap()
                .to_owned();
            dw += &g2.dot(&col.t());
            if self.x.requires_grad() {
                let dcol = w2.t().dot(&g2);
                col2im(&dcol, &mut dx, item, &self.geo);
            }
        }

        let mut grads: Vec<GradPair> = Vec::new();
        grads.push((self.x.clone(), dx.into_dyn()));
        grads.push((
            self.w.clone(),
            dw.into_shape_with_order((cout, cin, k, k)).unwrap().into_dyn(),
        ));
        if let Some(b) = &self.b {
            let mut db = ndarray::Array1::<f64>::zeros(cout);
            for item in 0..n {
                for co in 0..cout {
                    db[co] += g4
                        .index_axis(ndarray::Axis(0), item)
                        .index_axis(ndarray::Axis(0), co)
                        .sum();
                }
            }
            grads.push((b.clone(), db.into_dyn()));
        }
        grads
    }
}

impl Tensor {
    /// 2-d convolution, NCHW layout. `weight` is (Cout, Cin, k, k); `bias`
    /// (Cout) is optional because convs feeding batch norm run without one.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        dilation: usize,
        padding: Padding,
    ) -> Tensor {
        let (n, cin, h, w) = self.dims4();
        let (cout, wcin, k, k2) = {
            let wd = weight.data();
            let s = wd.shape();
            assert_eq!(s.len(), 4, "conv weight must be 4-d");
            (s[0], s[1], s[2], s[3])
        };
        assert_eq!(k, k2, "conv kernels are square");
        assert_eq!(
            cin, wcin,
            "conv2d channel mismatch: input has {cin}, weight expects {wcin}"
        );
        let geo = ConvGeometry::new(h, w, k, stride, dilation, padding);
        let xd = self.data();
        let x4 = xd.view().into_dimensionality::<Ix4>().unwrap();
        let wd = weight.data();
        let w2 = wd
            .view()
            .into_shape_with_order((cout, cin * k * k))
            .unwrap()
            .to_owned();
        let mut out = Array4::<f64>::zeros((n, cout, geo.out_h, geo.out_w));
        for item in 0..n {
            let col = im2col(&x4, item, &geo);
            let y = w2.dot(&col); // (Cout, Ho*Wo)
            let mut out_item = out.index_axis_mut(ndarray::Axis(0), item);
            for co in 0..cout {
                let bias_v = bias.map(|b| b.data()[co]).unwrap_or(0.0);
                let y_row = y.row(co);
                let mut plane = out_item.index_axis_mut(ndarray::Axis(0), co);
                for oh in 0..geo.out_h {
                    for ow in 0..geo.out_w {
                        plane[(oh, ow)] = y_row[oh * geo.out_w + ow] + bias_v;
                    }
                }
            }
        }
        drop(xd);
        drop(wd);
        Tensor::from_op(
            out.into_dyn(),
            Box::new(Conv2dBackward {
                x: self.clone(),
                w: weight.clone(),
                b: bias.cloned(),
                geo,
            }),
        )
    }
}
