use ndarray::parallel::prelude::*;
use ndarray::{s, Array2, Array3, Array4, ArrayView3, Axis};

use super::init::{kaiming_conv, rng_for};
use super::param::Param;
use super::Feat;

/// 2-d convolution with square kernels, symmetric zero padding, and optional
/// dilation. Forward and backward are im2col + GEMM, parallel over the batch.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Param, // [cout, cin, k, k]
    pub b: Option<Param>,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        bias: bool,
        seed: u64,
        name: &str,
    ) -> Self {
        let mut rng = rng_for(seed, name);
        let w = Param::from_value(kaiming_conv(&[cout, cin, kernel, kernel], &mut rng));
        let b = bias.then(|| Param::zeros(&[cout]));
        // "same" padding at stride 1; halving at stride 2 for even inputs.
        let padding = dilation * (kernel - 1) / 2;
        Conv2d {
            w,
            b,
            stride,
            dilation,
            padding,
        }
    }

    pub fn cout(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn cin(&self) -> usize {
        self.w.value.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.w.value.shape()[2]
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        let span = self.dilation * (k - 1) + 1;
        let oh = (h + 2 * self.padding - span) / self.stride + 1;
        let ow = (w + 2 * self.padding - span) / self.stride + 1;
        (oh, ow)
    }

    pub fn forward(&self, x: &Feat) -> Feat {
        let (batch, cin, h, w) = dims4(x);
        assert_eq!(cin, self.cin(), "conv input channels");
        let (oh, ow) = self.out_hw(h, w);
        let k = self.kernel();
        let w2 = self
            .w
            .value
            .view()
            .into_shape_with_order((self.cout(), cin * k * k))
            .expect("weight reshape");

        let mut out = Array4::<f32>::zeros((batch, self.cout(), oh, ow));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(x.axis_iter(Axis(0)).into_par_iter())
            .for_each(|(mut out_s, x_s)| {
                let col = self.im2col(&x_s, oh, ow);
                let y = w2.dot(&col); // [cout, oh*ow]
                let mut y4 = y.into_shape_with_order((self.cout(), oh, ow)).unwrap();
                if let Some(b) = &self.b {
                    let bv = b.view1();
                    for (mut plane, &bc) in y4.axis_iter_mut(Axis(0)).zip(bv.iter()) {
                        plane += bc;
                    }
                }
                out_s.assign(&y4);
            });
        out
    }

    /// Backward pass: accumulates dW (and db) into the param grads and
    /// returns dL/dx. `x` must be the forward input.
    pub fn backward(&mut self, x: &Feat, gy: &Feat) -> Feat {
        let (batch, cin, h, w) = dims4(x);
        let (_, cout, oh, ow) = dims4(gy);
        assert_eq!(cout, self.cout());
        let k = self.kernel();
        let w2 = self
            .w
            .value
            .view()
            .into_shape_with_order((cout, cin * k * k))
            .expect("weight reshape");

        let per_sample: Vec<(Array3<f32>, Array2<f32>, Vec<f32>)> = x
            .axis_iter(Axis(0))
            .into_par_iter()
            .zip(gy.axis_iter(Axis(0)).into_par_iter())
            .map(|(x_s, gy_s)| {
                let col = self.im2col(&x_s, oh, ow);
                let g2 = gy_s
                    .into_shape_with_order((cout, oh * ow))
                    .expect("grad reshape");
                let dw = g2.dot(&col.t()); // [cout, cin*k*k]
                let dcol = w2.t().dot(&g2); // [cin*k*k, oh*ow]
                let dx = self.col2im(&dcol, cin, h, w, oh, ow);
                let db: Vec<f32> = g2.axis_iter(Axis(0)).map(|row| row.sum()).collect();
                (dx, dw, db)
            })
            .collect();

        let mut gx = Array4::<f32>::zeros((batch, cin, h, w));
        let mut gw = self
            .w
            .grad
            .view_mut()
            .into_shape_with_order((cout, cin * k * k))
            .expect("grad reshape");
        for (bi, (dx, dw, db)) in per_sample.into_iter().enumerate() {
            gx.slice_mut(s![bi, .., .., ..]).assign(&dx);
            gw += &dw;
            if let Some(b) = &mut self.b {
                let mut gb = b.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
                for (g, d) in gb.iter_mut().zip(db.iter()) {
                    *g += d;
                }
            }
        }
        gx
    }

    fn im2col(&self, x: &ArrayView3<f32>, oh: usize, ow: usize) -> Array2<f32> {
        let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let k = self.kernel();
        let mut col = Array2::<f32>::zeros((cin * k * k, oh * ow));
        let xs = x.as_slice().expect("contiguous input");
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let mut dst = col.row_mut(row);
                    let dsts = dst.as_slice_mut().unwrap();
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky * self.dilation) as isize
                            - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_base = ci * h * w + iy as usize * w;
                        let dst_base = oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx * self.dilation) as isize
                                - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dsts[dst_base + ox] = xs[src_base + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(
        &self,
        dcol: &Array2<f32>,
        cin: usize,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    ) -> Array3<f32> {
        let k = self.kernel();
        let mut dx = Array3::<f32>::zeros((cin, h, w));
        let dxs = dx.as_slice_mut().unwrap();
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = dcol.row(row);
                    let srcs = src.as_slice().unwrap();
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky * self.dilation) as isize
                            - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_base = ci * h * w + iy as usize * w;
                        let src_base = oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx * self.dilation) as isize
                                - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dxs[dst_base + ix as usize] += srcs[src_base + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn visit_tensors(&self, prefix: &str, f: &mut dyn FnMut(String, &ndarray::ArrayD<f32>)) {
        f(format!("{prefix}.w"), &self.w.value);
        if let Some(b) = &self.b {
            f(format!("{prefix}.b"), &b.value);
        }
    }

    pub fn visit_tensors_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &mut ndarray::ArrayD<f32>),
    ) {
        f(format!("{prefix}.w"), &mut self.w.value);
        if let Some(b) = &mut self.b {
            f(format!("{prefix}.b"), &mut b.value);
        }
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.w"), &mut self.w);
        if let Some(b) = &mut self.b {
            f(format!("{prefix}.b"), b);
        }
    }
}

pub(crate) fn dims4(x: &Feat) -> (usize, usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2], s[3])
}
