//! HWC convolution via im2col and GEMM.

use crate::gemm::{gemm, Layout};
use crate::graph::ConvGeom;

fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (ho, wo) = g.out_hw();
    let patch = g.kernel * g.kernel * g.cin;
    let mut cols = vec![0.0; ho * wo * patch];
    for oy in 0..ho {
        for ox in 0..wo {
            let base = (oy * wo + ox) * patch;
            for ky in 0..g.kernel {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kernel {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.cin;
                    let dst = base + (ky * g.kernel + kx) * g.cin;
                    cols[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (ho, wo) = g.out_hw();
    let patch = g.kernel * g.kernel * g.cin;
    let mut x = vec![0.0; g.h * g.w * g.cin];
    for oy in 0..ho {
        for ox in 0..wo {
            let base = (oy * wo + ox) * patch;
            for ky in 0..g.kernel {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kernel {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    let src = base + (ky * g.kernel + kx) * g.cin;
                    for c in 0..g.cin {
                        x[dst + c] += cols[src + c];
                    }
                }
            }
        }
    }
    x
}

/// Forward convolution: `x: [h, w, cin]` → `[ho, wo, cout]`.
pub fn conv2d_forward(x: &[f32], w: &[f32], b: Option<&[f32]>, g: &ConvGeom) -> Vec<f32> {
    let (ho, wo) = g.out_hw();
    let patch = g.kernel * g.kernel * g.cin;
    let cols = im2col(x, g);
    let mut out = vec![0.0; ho * wo * g.cout];
    if let Some(b) = b {
        for px in out.chunks_mut(g.cout) {
            px.copy_from_slice(b);
        }
    }
    gemm(
        ho * wo,
        patch,
        g.cout,
        1.0,
        &cols,
        Layout::row_major(patch),
        w,
        Layout::row_major(g.cout),
        if b.is_some() { 1.0 } else { 0.0 },
        &mut out,
        Layout::row_major(g.cout),
    );
    out
}

/// Returns `(dx, dw, db)`; `dx`/`dw` only when requested.
pub fn conv2d_backward(
    x: &[f32],
    w: &[f32],
    grad: &[f32],
    g: &ConvGeom,
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Vec<f32>) {
    let (ho, wo) = g.out_hw();
    let patch = g.kernel * g.kernel * g.cin;
    let mut db = vec![0.0; g.cout];
    for px in grad.chunks(g.cout) {
        db.iter_mut().zip(px).for_each(|(a, b)| *a += b);
    }
    let dx = want_x.then(|| {
        let mut dcols = vec![0.0; ho * wo * patch];
        gemm(
            ho * wo,
            g.cout,
            patch,
            1.0,
            grad,
            Layout::row_major(g.cout),
            w,
            Layout::transposed(g.cout),
            0.0,
            &mut dcols,
            Layout::row_major(patch),
        );
        col2im(&dcols, g)
    });
    let dw = want_w.then(|| {
        let cols = im2col(x, g);
        let mut dw = vec![0.0; patch * g.cout];
        gemm(
            patch,
            ho * wo,
            g.cout,
            1.0,
            &cols,
            Layout::transposed(patch),
            grad,
            Layout::row_major(g.cout),
            0.0,
            &mut dw,
            Layout::row_major(g.cout),
        );
        dw
    });
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_copies_input() {
        let g = ConvGeom {
            h: 3,
            w: 3,
            cin: 1,
            cout: 1,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let x: Vec<f32> = (0..9).map(|v| v as f32).collect();
        assert_eq!(conv2d_forward(&x, &k, None, &g), x);
    }

    #[test]
    fn stride_two_output_size() {
        let g = ConvGeom {
            h: 64,
            w: 64,
            cin: 3,
            cout: 8,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        assert_eq!(g.out_hw(), (32, 32));
    }
}
