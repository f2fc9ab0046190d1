//! Same-padded 3x3 cross-correlation via im2col and a dense GEMM.

use crate::{Error, Result};

const K: usize = 3;

fn check(
    x_len: usize,
    dims: (usize, usize, usize, usize),
    w_len: usize,
    c_out: usize,
) -> Result<()> {
    let (b, c_in, h, w) = dims;
    if x_len != b * c_in * h * w {
        return Err(Error::Shape(format!(
            "input has {x_len} values, expected {b}x{c_in}x{h}x{w}"
        )));
    }
    if w_len != c_out * c_in * K * K {
        return Err(Error::Shape(format!(
            "kernel has {w_len} values, expected {c_out}x{c_in}x3x3"
        )));
    }
    Ok(())
}

/// Columns `[c_in * 9, h * w]` for one sample of `[c_in, h, w]`.
fn im2col(x: &[f64], c_in: usize, h: usize, w: usize, col: &mut [f64]) {
    let hw = h * w;
    for c in 0..c_in {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..K {
            for kx in 0..K {
                let row = &mut col[((c * K + ky) * K + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `[c_in, h, w]`.
fn col2im(col: &[f64], c_in: usize, h: usize, w: usize, x: &mut [f64]) {
    let hw = h * w;
    for c in 0..c_in {
        let plane = &mut x[c * hw..(c + 1) * hw];
        for ky in 0..K {
            for kx in 0..K {
                let row = &col[((c * K + ky) * K + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
}

/// `c = a * b (+ c if accumulate)`, all row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover m*k, k*n and m*n elements with the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Forward pass. `x` is `[b, c_in, h, w]`, `weight` is `[c_out, c_in, 3, 3]`.
pub fn conv2d_forward(
    x: &[f64],
    dims: (usize, usize, usize, usize),
    weight: &[f64],
    bias: Option<&[f64]>,
    c_out: usize,
) -> Result<Vec<f64>> {
    check(x.len(), dims, weight.len(), c_out)?;
    let (b, c_in, h, w) = dims;
    let hw = h * w;
    let kk = c_in * K * K;
    let mut col = vec![0.0; kk * hw];
    let mut out = vec![0.0; b * c_out * hw];
    for s in 0..b {
        im2col(&x[s * c_in * hw..(s + 1) * c_in * hw], c_in, h, w, &mut col);
        let y = &mut out[s * c_out * hw..(s + 1) * c_out * hw];
        if let Some(bias) = bias {
            for (o, chunk) in y.chunks_mut(hw).enumerate() {
                chunk.fill(bias[o]);
            }
        }
        gemm(c_out, kk, hw, weight, false, &col, false, y, bias.is_some());
    }
    Ok(out)
}

/// Gradients `(dx, dweight, dbias)` of the forward pass given upstream `dy`.
/// `dx` is skipped when `need_dx` is false.
pub fn conv2d_backward(
    x: &[f64],
    dims: (usize, usize, usize, usize),
    weight: &[f64],
    c_out: usize,
    dy: &[f64],
    need_dx: bool,
) -> Result<(Option<Vec<f64>>, Vec<f64>, Vec<f64>)> {
    check(x.len(), dims, weight.len(), c_out)?;
    let (b, c_in, h, w) = dims;
    let hw = h * w;
    let kk = c_in * K * K;
    let mut col = vec![0.0; kk * hw];
    let mut dcol = vec![0.0; kk * hw];
    let mut dw = vec![0.0; c_out * kk];
    let mut db = vec![0.0; c_out];
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    for s in 0..b {
        let g = &dy[s * c_out * hw..(s + 1) * c_out * hw];
        for (o, chunk) in g.chunks(hw).enumerate() {
            db[o] += chunk.iter().sum::<f64>();
        }
        im2col(&x[s * c_in * hw..(s + 1) * c_in * hw], c_in, h, w, &mut col);
        gemm(c_out, hw, kk, g, false, &col, true, &mut dw, true);
        if let Some(dx) = dx.as_mut() {
            gemm(kk, c_out, hw, weight, true, g, false, &mut dcol, false);
            col2im(&dcol, c_in, h, w, &mut dx[s * c_in * hw..(s + 1) * c_in * hw]);
        }
    }
    Ok((dx, dw, db))
}
