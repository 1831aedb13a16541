//! Differentiable bilinear resampling.

use super::Tx;
use ndarray::{ArrayD, Ix4, IxDyn};

/// Source coordinate for an output pixel, half-pixel-center convention.
fn src_coord(out_idx: usize, in_extent: usize, out_extent: usize) -> (usize, usize, f64) {
    let scale = in_extent as f64 / out_extent as f64;
    let s = (out_idx as f64 + 0.5) * scale - 0.5;
    let s = s.max(0.0);
    let lo = (s.floor() as usize).min(in_extent - 1);
    let hi = (lo + 1).min(in_extent - 1);
    let frac = (s - lo as f64).clamp(0.0, 1.0);
    (lo, hi, frac)
}

impl<'t> Tx<'t> {
    /// Bilinear resize of `[B,C,H,W]` to `[B,C,out_h,out_w]`.
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Tx<'t> {
        let xv = self.value_rc();
        assert_eq!(xv.ndim(), 4, "resize_bilinear input must be [B,C,H,W]");
        let (bsz, c, h, w) = {
            let s = xv.shape();
            (s[0], s[1], s[2], s[3])
        };
        let ys: Vec<(usize, usize, f64)> = (0..out_h).map(|i| src_coord(i, h, out_h)).collect();
        let xs: Vec<(usize, usize, f64)> = (0..out_w).map(|j| src_coord(j, w, out_w)).collect();

        let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
        let mut out = ArrayD::zeros(IxDyn(&[bsz, c, out_h, out_w]));
        {
            let mut o4 = out.view_mut().into_dimensionality::<Ix4>().unwrap();
            for b in 0..bsz {
                for ch in 0..c {
                    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                            let v00 = x4[(b, ch, y0, x0)];
                            let v01 = x4[(b, ch, y0, x1)];
                            let v10 = x4[(b, ch, y1, x0)];
                            let v11 = x4[(b, ch, y1, x1)];
                            let top = v00 + (v01 - v00) * fx;
                            let bot = v10 + (v11 - v10) * fx;
                            o4[(b, ch, oy, ox)] = top + (bot - top) * fy;
                        }
                    }
                }
            }
        }

        let ix = self.index();
        self.tape().push_op(
            out,
            self.needs_grad(),
            Box::new(move |gout, sink| {
                let g4 = gout.view().into_dimensionality::<Ix4>().unwrap();
                let mut gx = ArrayD::<f64>::zeros(IxDyn(&[bsz, c, h, w]));
                {
                    let mut gx4 = gx.view_mut().into_dimensionality::<Ix4>().unwrap();
                    for b in 0..bsz {
                        for ch in 0..c {
                            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                                    let g = g4[(b, ch, oy, ox)];
                                    gx4[(b, ch, y0, x0)] += g * (1.0 - fy) * (1.0 - fx);
                                    gx4[(b, ch, y0, x1)] += g * (1.0 - fy) * fx;
                                    gx4[(b, ch, y1, x0)] += g * fy * (1.0 - fx);
                                    gx4[(b, ch, y1, x1)] += g * fy * fx;
                                }
                            }
                        }
                    }
                }
                sink.add(ix, gx);
            }),
        )
    }

    /// 2x bilinear upsample, the decoder's stage-to-stage step.
    pub fn upsample_2x(self) -> Tx<'t> {
        let s = self.shape();
        self.resize_bilinear(s[2] * 2, s[3] * 2)
    }
}
