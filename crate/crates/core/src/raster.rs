//! Plain u8 raster resampling shared by dataset preparation and
//! augmentation: bilinear for images, nearest-neighbor for masks.

use ndarray::{Array2, Array3};

/// Inverse-warp an RGB image: `map(oy, ox) -> (sy, sx)` in source pixel
/// coordinates. Taps outside the source contribute `fill`.
pub fn warp_image<F>(src: &Array3<u8>, out_h: usize, out_w: usize, fill: [u8; 3], map: F) -> Array3<u8>
where
    F: Fn(f64, f64) -> (f64, f64),
{
    let (h, w, _) = src.dim();
    let mut out = Array3::<u8>::zeros((out_h, out_w, 3));
    let tap = |y: isize, x: isize, c: usize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            fill[c] as f64
        } else {
            src[(y as usize, x as usize, c)] as f64
        }
    };
    for oy in 0..out_h {
        for ox in 0..out_w {
            let (sy, sx) = map(oy as f64, ox as f64);
            let y0 = sy.floor();
            let x0 = sx.floor();
            let fy = sy - y0;
            let fx = sx - x0;
            let (y0, x0) = (y0 as isize, x0 as isize);
            for c in 0..3 {
                let v00 = tap(y0, x0, c);
                let v01 = tap(y0, x0 + 1, c);
                let v10 = tap(y0 + 1, x0, c);
                let v11 = tap(y0 + 1, x0 + 1, c);
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                let v = top + (bot - top) * fy;
                out[(oy, ox, c)] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

/// Inverse-warp a label map with nearest-neighbor sampling. Out-of-bounds
/// samples take `fill` so geometry never invents a class.
pub fn warp_mask<F>(src: &Array2<u8>, out_h: usize, out_w: usize, fill: u8, map: F) -> Array2<u8>
where
    F: Fn(f64, f64) -> (f64, f64),
{
    let (h, w) = src.dim();
    let mut out = Array2::<u8>::zeros((out_h, out_w));
    for oy in 0..out_h {
        for ox in 0..out_w {
            let (sy, sx) = map(oy as f64, ox as f64);
            let y = sy.round() as isize;
            let x = sx.round() as isize;
            out[(oy, ox)] = if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                fill
            } else {
                src[(y as usize, x as usize)]
            };
        }
    }
    out
}

/// Bilinear resize (half-pixel-center convention).
pub fn resize_image(src: &Array3<u8>, out_h: usize, out_w: usize) -> Array3<u8> {
    let (h, w, _) = src.dim();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    warp_image(src, out_h, out_w, [0, 0, 0], |oy, ox| {
        (
            ((oy + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64),
            ((ox + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64),
        )
    })
}

/// Nearest-neighbor resize for label maps.
pub fn resize_mask(src: &Array2<u8>, out_h: usize, out_w: usize) -> Array2<u8> {
    let (h, w) = src.dim();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    warp_mask(src, out_h, out_w, 0, |oy, ox| {
        (
            ((oy + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64),
            ((ox + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64),
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_warp_is_exact() {
        let src = Array3::from_shape_fn((5, 7, 3), |(y, x, c)| (y * 31 + x * 7 + c) as u8);
        let out = warp_image(&src, 5, 7, [0, 0, 0], |y, x| (y, x));
        assert_eq!(src, out);
        let m = Array2::from_shape_fn((5, 7), |(y, x)| ((y + x) % 4) as u8);
        let out = warp_mask(&m, 5, 7, 0, |y, x| (y, x));
        assert_eq!(m, out);
    }

    #[test]
    fn out_of_bounds_takes_fill() {
        let src = Array3::from_elem((2, 2, 3), 200u8);
        let out = warp_image(&src, 2, 2, [0, 0, 0], |y, x| (y + 10.0, x));
        assert!(out.iter().all(|&v| v == 0));
        let m = Array2::from_elem((2, 2), 3u8);
        let out = warp_mask(&m, 2, 2, 0, |y, x| (y, x + 10.0));
        assert!(out.iter().all(|&v| v == 0));
    }

    #[test]
    fn resize_preserves_constant_plane() {
        let src = Array3::from_elem((4, 4, 3), 90u8);
        let out = resize_image(&src, 9, 3);
        assert!(out.iter().all(|&v| v == 90));
    }
}
