//! Grouped 2-D convolution via im2col + matmul.

use super::Tx;
use ndarray::{Array2, ArrayD, Ix4, IxDyn};

#[derive(Clone, Copy, Debug)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

fn out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Lower one image's group-slice into column form:
/// `[cin_g*kh*kw, h_out*w_out]`.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &ndarray::ArrayView4<f64>,
    b: usize,
    c_start: usize,
    cin_g: usize,
    kh: usize,
    kw: usize,
    geo: ConvGeometry,
    h_out: usize,
    w_out: usize,
) -> Array2<f64> {
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let mut col = Array2::<f64>::zeros((cin_g * kh * kw, h_out * w_out));
    for ci in 0..cin_g {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ci * kh * kw + ki * kw + kj;
                for oy in 0..h_out {
                    let iy = (oy * geo.stride + ki) as isize - geo.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w_out {
                        let ix = (ox * geo.stride + kj) as isize - geo.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[(row, oy * w_out + ox)] =
                            x[(b, c_start + ci, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    col
}

/// Scatter a column-form gradient back onto the input gradient.
#[allow(clippy::too_many_arguments)]
fn col2im_acc(
    gcol: &Array2<f64>,
    gx: &mut ndarray::ArrayViewMut4<f64>,
    b: usize,
    c_start: usize,
    cin_g: usize,
    kh: usize,
    kw: usize,
    geo: ConvGeometry,
    h_out: usize,
    w_out: usize,
) {
    let (h, w) = (gx.shape()[2], gx.shape()[3]);
    for ci in 0..cin_g {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ci * kh * kw + ki * kw + kj;
                for oy in 0..h_out {
                    let iy = (oy * geo.stride + ki) as isize - geo.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w_out {
                        let ix = (ox * geo.stride + kj) as isize - geo.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        gx[(b, c_start + ci, iy as usize, ix as usize)] +=
                            gcol[(row, oy * w_out + ox)];
                    }
                }
            }
        }
    }
}

impl<'t> Tx<'t> {
    /// Grouped convolution: `x [B,Cin,H,W]` with `w [Cout,Cin/g,kh,kw]`.
    /// Bias is applied separately by the layer wrapper.
    pub fn conv2d(self, weight: Tx<'t>, geo: ConvGeometry) -> Tx<'t> {
        let (xv, wv) = (self.value_rc(), weight.value_rc());
        assert_eq!(xv.ndim(), 4, "conv2d input must be [B,Cin,H,W]");
        assert_eq!(wv.ndim(), 4, "conv2d weight must be [Cout,Cin/g,kh,kw]");
        let (bsz, cin, h, w) = {
            let s = xv.shape();
            (s[0], s[1], s[2], s[3])
        };
        let (cout, cin_g, kh, kw) = {
            let s = wv.shape();
            (s[0], s[1], s[2], s[3])
        };
        let g = geo.groups;
        assert_eq!(cin % g, 0, "conv2d: Cin not divisible by groups");
        assert_eq!(cout % g, 0, "conv2d: Cout not divisible by groups");
        assert_eq!(cin / g, cin_g, "conv2d: weight in-channels mismatch");
        assert!(
            h + 2 * geo.padding >= kh && w + 2 * geo.padding >= kw,
            "conv2d: kernel larger than padded input"
        );
        let h_out = out_extent(h, kh, geo.stride, geo.padding);
        let w_out = out_extent(w, kw, geo.stride, geo.padding);
        let cout_g = cout / g;

        let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
        let wmat = wv
            .view()
            .into_shape_with_order((cout, cin_g * kh * kw))
            .unwrap();
        let mut out = ArrayD::zeros(IxDyn(&[bsz, cout, h_out, w_out]));
        {
            let mut out4 = out.view_mut().into_dimensionality::<Ix4>().unwrap();
            for b in 0..bsz {
                for gi in 0..g {
                    let col = im2col(&x4, b, gi * cin_g, cin_g, kh, kw, geo, h_out, w_out);
                    let wg = wmat.slice(ndarray::s![gi * cout_g..(gi + 1) * cout_g, ..]);
                    let res = wg.dot(&col); // [cout_g, h_out*w_out]
                    for co in 0..cout_g {
                        let dst = res.row(co);
                        let mut plane = out4.slice_mut(ndarray::s![b, gi * cout_g + co, .., ..]);
                        plane.assign(
                            &dst.into_shape_with_order((h_out, w_out)).unwrap(),
                        );
                    }
                }
            }
        }

        let (ix, iw) = (self.index(), weight.index());
        let (nx, nw) = (self.needs_grad(), weight.needs_grad());
        self.tape().push_op(
            out,
            nx || nw,
            Box::new(move |gout, sink| {
                let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
                let wmat = wv
                    .view()
                    .into_shape_with_order((cout, cin_g * kh * kw))
                    .unwrap();
                let g4 = gout.view().into_dimensionality::<Ix4>().unwrap();
                let mut gx = if nx {
                    Some(ArrayD::<f64>::zeros(IxDyn(&[bsz, cin, h, w])))
                } else {
                    None
                };
                let mut gw = if nw {
                    Some(Array2::<f64>::zeros((cout, cin_g * kh * kw)))
                } else {
                    None
                };
                for b in 0..bsz {
                    for gi in 0..g {
                        // [cout_g, h_out*w_out] slice of the output gradient.
                        let mut gslab = Array2::<f64>::zeros((cout_g, h_out * w_out));
                        for co in 0..cout_g {
                            let plane = g4.slice(ndarray::s![b, gi * cout_g + co, .., ..]);
                            gslab
                                .row_mut(co)
                                .assign(&plane.into_shape_with_order(h_out * w_out).unwrap());
                        }
                        let col = im2col(&x4, b, gi * cin_g, cin_g, kh, kw, geo, h_out, w_out);
                        if let Some(gw) = gw.as_mut() {
                            let contrib = gslab.dot(&col.t());
                            let mut dst =
                                gw.slice_mut(ndarray::s![gi * cout_g..(gi + 1) * cout_g, ..]);
                            dst += &contrib;
                        }
                        if let Some(gx) = gx.as_mut() {
                            let wg = wmat.slice(ndarray::s![gi * cout_g..(gi + 1) * cout_g, ..]);
                            let gcol = wg.t().dot(&gslab);
                            let mut gx4 =
                                gx.view_mut().into_dimensionality::<Ix4>().unwrap();
                            col2im_acc(
                                &gcol, &mut gx4, b, gi * cin_g, cin_g, kh, kw, geo, h_out,
                                w_out,
                            );
                        }
                    }
                }
                if let Some(gx) = gx {
                    sink.add(ix, gx);
                }
                if let Some(gw) = gw {
                    sink.add(
                        iw,
                        gw.into_shape_with_order(IxDyn(&[cout, cin_g, kh, kw]))
                            .unwrap()
                            .into_dyn(),
                    );
                }
            }),
        )
    }

    /// Global average pool `[B,C,H,W] -> [B,C,1,1]`.
    pub fn global_avg_pool(self) -> Tx<'t> {
        self.mean_axes(&[2, 3])
    }

    /// Sum a `[B,Cout,H,W]` gradient path for a bias: used by layers as
    /// `conv.add_b(bias.reshape([1,C,1,1]))`; nothing extra needed here.
    pub fn conv_bias(self, bias: Tx<'t>) -> Tx<'t> {
        let c = bias.value().len();
        self.add_b(bias.reshape(&[1, c, 1, 1]))
    }
}

