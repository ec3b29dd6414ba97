use crate::linalg::Matrix;

/// Rotates an `h × w` image counterclockwise (as displayed, rows growing
/// downward) by `theta` radians about its center.
///
/// Each output pixel is pulled back through the inverse rotation and
/// bilinearly interpolated; source positions outside the image read as 0.
pub fn rotate_image(img: &Matrix, theta: f64) -> Matrix {
    let (h, w) = img.shape();
    let mut out = Matrix::zeros(h, w);
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (sin, cos) = theta.sin_cos();
    for r in 0..h {
        let dy = r as f64 - cy;
        for c in 0..w {
            let dx = c as f64 - cx;
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            out.set(r, c, bilinear(img, sy, sx));
        }
    }
    out
}

fn pixel(img: &Matrix, r: i64, c: i64) -> f64 {
    if r < 0 || c < 0 || r >= img.rows() as i64 || c >= img.cols() as i64 {
        0.0
    } else {
        img.get(r as usize, c as usize)
    }
}

fn bilinear(img: &Matrix, y: f64, x: f64) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let (r, c) = (y0 as i64, x0 as i64);
    let top = pixel(img, r, c) * (1.0 - fx) + pixel(img, r, c + 1) * fx;
    let bottom = pixel(img, r + 1, c) * (1.0 - fx) + pixel(img, r + 1, c + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Nearest-neighbor resize to `h × w`.
pub fn resize_nearest(img: &Matrix, h: usize, w: usize) -> Matrix {
    let (sh, sw) = img.shape();
    let mut out = Matrix::zeros(h, w);
    for r in 0..h {
        let src_r = ((r as f64 + 0.5) * sh as f64 / h as f64).floor() as usize;
        for c in 0..w {
            let src_c = ((c as f64 + 0.5) * sw as f64 / w as f64).floor() as usize;
            out.set(r, c, img.get(src_r.min(sh - 1), src_c.min(sw - 1)));
        }
    }
    out
}
