use ndarray::{Array2, Array3, Array4, Axis};

use super::conv::dims4;
use super::Feat;

pub fn relu_inplace(x: &mut Feat) {
    x.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

/// ReLU backward through the activation output `y` (zero where y == 0).
pub fn relu_backward_inplace(gy: &mut Feat, y: &Feat) {
    ndarray::Zip::from(gy).and(y).for_each(|g, &yv| {
        if yv <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Mean over the spatial dims: `[B, C, H, W] -> [B, C]`.
pub fn global_avg_pool(x: &Feat) -> Array2<f32> {
    let (batch, c, h, w) = dims4(x);
    let n = (h * w) as f64;
    let mut out = Array2::<f32>::zeros((batch, c));
    for b in 0..batch {
        for ci in 0..c {
            let mut acc = 0.0f64;
            for iy in 0..h {
                for ix in 0..w {
                    acc += x[[b, ci, iy, ix]] as f64;
                }
            }
            out[[b, ci]] = (acc / n) as f32;
        }
    }
    out
}

pub fn global_avg_pool_backward(g: &Array2<f32>, h: usize, w: usize) -> Feat {
    let (batch, c) = (g.shape()[0], g.shape()[1]);
    let scale = 1.0 / (h * w) as f32;
    let mut gx = Array4::<f32>::zeros((batch, c, h, w));
    for b in 0..batch {
        for ci in 0..c {
            let v = g[[b, ci]] * scale;
            gx.slice_mut(ndarray::s![b, ci, .., ..]).fill(v);
        }
    }
    gx
}

/// Tile a `[B, C]` vector across `[H, W]`.
pub fn broadcast_spatial(v: &Array2<f32>, h: usize, w: usize) -> Feat {
    let (batch, c) = (v.shape()[0], v.shape()[1]);
    let mut out = Array4::<f32>::zeros((batch, c, h, w));
    for b in 0..batch {
        for ci in 0..c {
            out.slice_mut(ndarray::s![b, ci, .., ..]).fill(v[[b, ci]]);
        }
    }
    out
}

pub fn broadcast_spatial_backward(gy: &Feat) -> Array2<f32> {
    let (batch, c, _, _) = dims4(gy);
    let mut g = Array2::<f32>::zeros((batch, c));
    for b in 0..batch {
        for ci in 0..c {
            g[[b, ci]] = gy.index_axis(Axis(0), b).index_axis(Axis(0), ci).sum();
        }
    }
    g
}

/// Linear interpolation table for one axis: output index -> two source
/// indices and the weight of the first one. Half-pixel-centre convention.
fn interp_axis(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = (src - i0 as f64).clamp(0.0, 1.0);
            (i0, i1, (1.0 - frac) as f32)
        })
        .collect()
}

/// Bilinear upsampling by an integer factor.
pub fn upsample_bilinear(x: &Feat, factor: usize) -> Feat {
    use ndarray::parallel::prelude::*;
    let (batch, c, h, w) = dims4(x);
    let (oh, ow) = (h * factor, w * factor);
    let ys = interp_axis(h, oh);
    let xs = interp_axis(w, ow);
    let mut out = Array4::<f32>::zeros((batch, c, oh, ow));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(x.axis_iter(Axis(0)).into_par_iter())
        .for_each(|(mut out_s, x_s)| {
            for ci in 0..c {
                let src = x_s.index_axis(Axis(0), ci);
                let src = src.as_slice().expect("contiguous input");
                let mut dst = out_s.index_axis_mut(Axis(0), ci);
                let dst = dst.as_slice_mut().expect("contiguous output");
                for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                    let top_row = &src[y0 * w..y0 * w + w];
                    let bot_row = &src[y1 * w..y1 * w + w];
                    let out_row = &mut dst[oy * ow..oy * ow + ow];
                    for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                        let top = top_row[x0] * wx + top_row[x1] * (1.0 - wx);
                        let bot = bot_row[x0] * wx + bot_row[x1] * (1.0 - wx);
                        out_row[ox] = top * wy + bot * (1.0 - wy);
                    }
                }
            }
        });
    out
}

/// Transpose of `upsample_bilinear`: scatters output gradients back to the
/// low-resolution grid.
pub fn upsample_bilinear_backward(gy: &Feat, in_h: usize, in_w: usize, factor: usize) -> Feat {
    use ndarray::parallel::prelude::*;
    let (batch, c, oh, ow) = dims4(gy);
    assert_eq!(oh, in_h * factor);
    assert_eq!(ow, in_w * factor);
    let ys = interp_axis(in_h, oh);
    let xs = interp_axis(in_w, ow);
    let mut gx = Array4::<f32>::zeros((batch, c, in_h, in_w));
    gx.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(gy.axis_iter(Axis(0)).into_par_iter())
        .for_each(|(mut gx_s, gy_s)| {
            for ci in 0..c {
                let src = gy_s.index_axis(Axis(0), ci);
                let src = src.as_slice().expect("contiguous grad");
                let mut dst = gx_s.index_axis_mut(Axis(0), ci);
                let dst = dst.as_slice_mut().expect("contiguous output");
                for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                    let row = &src[oy * ow..oy * ow + ow];
                    for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                        let g = row[ox];
                        dst[y0 * in_w + x0] += g * wy * wx;
                        dst[y0 * in_w + x1] += g * wy * (1.0 - wx);
                        dst[y1 * in_w + x0] += g * (1.0 - wy) * wx;
                        dst[y1 * in_w + x1] += g * (1.0 - wy) * (1.0 - wx);
                    }
                }
            }
        });
    gx
}

/// Channel concatenation for a list of equal-spatial feature maps. The
/// result is forced into standard layout (concatenate would otherwise make
/// the channel axis outermost, breaking contiguous per-sample views).
pub fn concat_channels(parts: &[&Feat]) -> Feat {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let cat = ndarray::concatenate(Axis(1), &views).expect("channel concat");
    into_standard(cat)
}

/// Return the array itself when already standard layout, else a copy.
pub fn into_standard(a: Feat) -> Feat {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Split a channel gradient back into per-part slices.
pub fn split_channels(g: &Feat, widths: &[usize]) -> Vec<Feat> {
    let mut out = Vec::with_capacity(widths.len());
    let mut start = 0;
    for &wd in widths {
        out.push(g.slice(ndarray::s![.., start..start + wd, .., ..]).to_owned());
        start += wd;
    }
    out
}

/// Promote a single image `[C, H, W]` to a contiguous batch of one.
pub fn unsqueeze_batch(x: &Array3<f32>) -> Feat {
    let x = if x.is_standard_layout() {
        x.clone()
    } else {
        x.as_standard_layout().into_owned()
    };
    x.insert_axis(Axis(0))
}
