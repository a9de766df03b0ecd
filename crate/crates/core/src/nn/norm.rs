use ndarray::parallel::prelude::*;
use ndarray::{Array1, Array4, Axis};

use super::conv::dims4;
use super::param::Param;
use super::Feat;

/// Batch normalization over `[B, H, W]` per channel, with running statistics
/// for inference. Normalization uses the biased variance; the running update
/// uses the unbiased one.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
    pub momentum: f64,
    pub eps: f64,
}

pub struct BnCache {
    pub xhat: Feat,
    pub inv_std: Vec<f64>,
}

fn plane(x: &Feat, b: usize, c: usize) -> &[f32] {
    let (_, ch, h, w) = dims4(x);
    let base = (b * ch + c) * h * w;
    &x.as_slice().expect("contiguous input")[base..base + h * w]
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        let mut gamma = Param::zeros(&[channels]);
        gamma.value.fill(1.0);
        BatchNorm2d {
            gamma,
            beta: Param::zeros(&[channels]),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Training-mode forward on batch statistics. Running statistics update
    /// only when `update_running` is set; the frozen-trunk training path
    /// never calls this at all and uses `forward_eval` instead.
    pub fn forward_train(&mut self, x: &Feat, update_running: bool) -> (Feat, BnCache) {
        let (batch, c, h, w) = dims4(x);
        assert_eq!(c, self.channels());
        let n = (batch * h * w) as f64;

        let stats: Vec<(f64, f64)> = (0..c)
            .into_par_iter()
            .map(|ci| {
                let mut mean = 0.0f64;
                for b in 0..batch {
                    for &v in plane(x, b, ci) {
                        mean += v as f64;
                    }
                }
                mean /= n;
                let mut var = 0.0f64;
                for b in 0..batch {
                    for &v in plane(x, b, ci) {
                        let d = v as f64 - mean;
                        var += d * d;
                    }
                }
                (mean, var / n)
            })
            .collect();

        if update_running {
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            for (ci, &(mean, var)) in stats.iter().enumerate() {
                let m = self.momentum;
                self.running_mean[ci] =
                    ((1.0 - m) * self.running_mean[ci] as f64 + m * mean) as f32;
                self.running_var[ci] =
                    ((1.0 - m) * self.running_var[ci] as f64 + m * var * unbias) as f32;
            }
        }

        let inv_std: Vec<f64> = stats.iter().map(|&(_, v)| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = Array4::<f32>::zeros((batch, c, h, w));
        let mut y = Array4::<f32>::zeros((batch, c, h, w));
        let g = self.gamma.view1();
        let be = self.beta.view1();
        xhat.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(y.axis_iter_mut(Axis(0)).into_par_iter())
            .zip(x.axis_iter(Axis(0)).into_par_iter())
            .for_each(|((mut xh_s, mut y_s), x_s)| {
                for ci in 0..c {
                    let (mean, _) = stats[ci];
                    let istd = inv_std[ci] as f32;
                    let mean = mean as f32;
                    let gi = g[ci];
                    let bi = be[ci];
                    let src = x_s.index_axis(Axis(0), ci);
                    let src = src.to_slice().expect("contiguous plane");
                    let mut xh = xh_s.index_axis_mut(Axis(0), ci);
                    let xh = xh.as_slice_mut().unwrap();
                    let mut yy = y_s.index_axis_mut(Axis(0), ci);
                    let yy = yy.as_slice_mut().unwrap();
                    for i in 0..src.len() {
                        let v = (src[i] - mean) * istd;
                        xh[i] = v;
                        yy[i] = gi * v + bi;
                    }
                }
            });
        (y, BnCache { xhat, inv_std })
    }

    /// Inference-mode forward using running statistics. Pure.
    pub fn forward_eval(&self, x: &Feat) -> Feat {
        let (batch, c, h, w) = dims4(x);
        let g = self.gamma.view1();
        let be = self.beta.view1();
        let scale_shift: Vec<(f32, f32)> = (0..c)
            .map(|ci| {
                let inv = 1.0 / ((self.running_var[ci] as f64) + self.eps).sqrt();
                let scale = (g[ci] as f64 * inv) as f32;
                let shift =
                    (be[ci] as f64 - g[ci] as f64 * self.running_mean[ci] as f64 * inv) as f32;
                (scale, shift)
            })
            .collect();
        let mut y = Array4::<f32>::zeros((batch, c, h, w));
        y.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(x.axis_iter(Axis(0)).into_par_iter())
            .for_each(|(mut y_s, x_s)| {
                for ci in 0..c {
                    let (scale, shift) = scale_shift[ci];
                    let src = x_s.index_axis(Axis(0), ci);
                    let src = src.to_slice().expect("contiguous plane");
                    let mut dst = y_s.index_axis_mut(Axis(0), ci);
                    let dst = dst.as_slice_mut().unwrap();
                    for i in 0..src.len() {
                        dst[i] = src[i] * scale + shift;
                    }
                }
            });
        y
    }

    pub fn backward(&mut self, cache: &BnCache, gy: &Feat) -> Feat {
        let (batch, c, h, w) = dims4(gy);
        let n = (batch * h * w) as f64;
        let g: Vec<f32> = self.gamma.view1().to_vec();

        let sums: Vec<(f64, f64)> = (0..c)
            .into_par_iter()
            .map(|ci| {
                let mut sum_gy = 0.0f64;
                let mut sum_gy_xhat = 0.0f64;
                for b in 0..batch {
                    let gys = plane(gy, b, ci);
                    let xhs = plane(&cache.xhat, b, ci);
                    for i in 0..gys.len() {
                        let gv = gys[i] as f64;
                        sum_gy += gv;
                        sum_gy_xhat += gv * xhs[i] as f64;
                    }
                }
                (sum_gy, sum_gy_xhat)
            })
            .collect();

        {
            let mut gg = self
                .gamma
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap();
            let mut gb = self
                .beta
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap();
            for ci in 0..c {
                gg[ci] += sums[ci].1 as f32;
                gb[ci] += sums[ci].0 as f32;
            }
        }

        let mut gx = Array4::<f32>::zeros((batch, c, h, w));
        gx.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(gy.axis_iter(Axis(0)).into_par_iter())
            .zip(cache.xhat.axis_iter(Axis(0)).into_par_iter())
            .for_each(|((mut gx_s, gy_s), xh_s)| {
                for ci in 0..c {
                    let (sum_gy, sum_gy_xhat) = sums[ci];
                    let k = g[ci] as f64 * cache.inv_std[ci] / n;
                    let gys = gy_s.index_axis(Axis(0), ci);
                    let gys = gys.to_slice().unwrap();
                    let xhs = xh_s.index_axis(Axis(0), ci);
                    let xhs = xhs.to_slice().unwrap();
                    let mut dst = gx_s.index_axis_mut(Axis(0), ci);
                    let dst = dst.as_slice_mut().unwrap();
                    for i in 0..gys.len() {
                        dst[i] = (k
                            * (n * gys[i] as f64 - sum_gy - xhs[i] as f64 * sum_gy_xhat))
                            as f32;
                    }
                }
            });
        gx
    }

    pub fn visit_tensors(&self, prefix: &str, f: &mut dyn FnMut(String, &ndarray::ArrayD<f32>)) {
        f(format!("{prefix}.gamma"), &self.gamma.value);
        f(format!("{prefix}.beta"), &self.beta.value);
        f(
            format!("{prefix}.running_mean"),
            &self.running_mean.clone().into_dyn(),
        );
        f(
            format!("{prefix}.running_var"),
            &self.running_var.clone().into_dyn(),
        );
    }

    pub fn buffer_names(prefix: &str) -> [String; 2] {
        [
            format!("{prefix}.running_mean"),
            format!("{prefix}.running_var"),
        ]
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }

    /// Assign a named tensor (parameter or running-stat buffer) during load.
    pub fn set_tensor(&mut self, suffix: &str, data: &[f32]) -> bool {
        match suffix {
            "gamma" => self.gamma.value.as_slice_mut().unwrap().copy_from_slice(data),
            "beta" => self.beta.value.as_slice_mut().unwrap().copy_from_slice(data),
            "running_mean" => self.running_mean.as_slice_mut().unwrap().copy_from_slice(data),
            "running_var" => self.running_var.as_slice_mut().unwrap().copy_from_slice(data),
            _ => return false,
        }
        true
    }
}
