//! Minimal PNG line plots for the analysis outputs: axes, ticks, and
//! polylines on a white canvas.

use image::{Rgb, RgbImage};

use moose_core::analysis::CorruptionCurve;
use moose_core::data::LabeledScene;
use moose_core::error::Result;
use moose_core::model::PyramidModel;
use moose_core::scoring::{score, HeadSet, ScoringFn};

const W: u32 = 640;
const H: u32 = 480;
const MARGIN: u32 = 56;

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [127, 127, 127],
];

struct Frame {
    img: RgbImage,
    x_range: (f64, f64),
    y_range: (f64, f64),
}

impl Frame {
    fn new(x_range: (f64, f64), y_range: (f64, f64)) -> Frame {
        let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
        for x in MARGIN..W - MARGIN / 2 {
            img.put_pixel(x, H - MARGIN, Rgb([0, 0, 0]));
        }
        for y in MARGIN / 2..=H - MARGIN {
            img.put_pixel(MARGIN, y, Rgb([0, 0, 0]));
        }
        Frame { img, x_range, y_range }
    }

    fn to_px(&self, x: f64, y: f64) -> (i64, i64) {
        let (x0, x1) = self.x_range;
        let (y0, y1) = self.y_range;
        let fx = ((x - x0) / (x1 - x0)).clamp(0.0, 1.0);
        let fy = ((y - y0) / (y1 - y0)).clamp(0.0, 1.0);
        let px = MARGIN as f64 + fx * (W - MARGIN - MARGIN / 2) as f64;
        let py = (H - MARGIN) as f64 - fy * (H - MARGIN - MARGIN / 2) as f64;
        (px as i64, py as i64)
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), color: [u8; 3]) {
        let (x0, y0) = self.to_px(a.0, a.1);
        let (x1, y1) = self.to_px(b.0, b.1);
        let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = x0 as f64 + t * (x1 - x0) as f64;
            let y = y0 as f64 + t * (y1 - y0) as f64;
            for dy in -1..=0i64 {
                let (xi, yi) = (x as i64, y as i64 + dy);
                if xi >= 0 && yi >= 0 && (xi as u32) < W && (yi as u32) < H {
                    self.img.put_pixel(xi as u32, yi as u32, Rgb(color));
                }
            }
        }
    }

    fn polyline(&mut self, pts: &[(f64, f64)], color: [u8; 3]) {
        for w in pts.windows(2) {
            self.line(w[0], w[1], color);
        }
    }

    fn save(&self, path: &std::path::Path) -> Result<()> {
        self.img
            .save(path)
            .map_err(|e| moose_core::MooseError::Format(format!("plot save: {e}")))?;
        Ok(())
    }
}

/// Retained mIoU versus noise level, one polyline per head.
pub fn corruption_plot(curve: &CorruptionCurve, path: &std::path::Path) -> Result<()> {
    let mut frame = Frame::new((0.0, 1.0), (0.0, 1.05));
    for (i, head) in curve.heads.iter().enumerate() {
        let pts: Vec<(f64, f64)> = head.retained.iter().map(|&(l, r)| (l, r.clamp(0.0, 1.05))).collect();
        frame.polyline(&pts, PALETTE[i % PALETTE.len()]);
    }
    frame.save(path)
}

/// Precision-recall curve of the entropy score over all heads.
pub fn pr_curve_plot(
    model: &PyramidModel,
    test: &[LabeledScene],
    path: &std::path::Path,
) -> Result<()> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for scene in test {
        let stack = model.forward_all(&scene.image)?;
        let map = score(&stack, ScoringFn::Entropy, &HeadSet::AllHeads)?;
        scores.extend(map.values.iter().copied());
        labels.extend(scene.anomaly.iter().map(|&a| a == 1));
    }
    let pts = moose_core::metrics::pr_points(&scores, &labels)?;
    let mut frame = Frame::new((0.0, 1.0), (0.0, 1.0));
    frame.polyline(&pts, PALETTE[0]);
    frame.save(path)
}
