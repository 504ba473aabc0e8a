//! Raw f64 kernels shared by forward evaluation and backward rules.
//!
//! Everything here is plain slice arithmetic with a fixed accumulation order
//! so that repeated runs are bitwise identical.

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// C[m,n] = A[m,k] * B[n,k]^T
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// C[m,n] = A[k,m]^T * B[k,n]
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Numerically stable sigmoid.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^z) without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

/// Tanh-form GELU; its derivative below is exact for this closed form.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Cosine similarity with an epsilon floor on each norm: zero vectors
/// similarity 0 instead of NaN.
pub fn cos_sim(a: &[f64], b: &[f64], eps: f64) -> f64 {
    dot(a, b) / (norm(a).max(eps) * norm(b).max(eps))
}

/// Gradient of `cos_sim` w.r.t. both arguments, scaled by `d_out`.
/// Where a norm sits below the epsilon floor the denominator is constant,
/// so that branch contributes no norm term.
pub fn cos_sim_grad(a: &[f64], b: &[f64], eps: f64, d_out: f64, da: &mut [f64], db: &mut [f64]) {
    let na = norm(a);
    let nb = norm(b);
    let fa = na.max(eps);
    let fb = nb.max(eps);
    let denom = fa * fb;
    let d = dot(a, b);
    let cos = d / denom;
    for i in 0..a.len() {
        let mut g = b[i] / denom;
        if na >= eps {
            g -= cos * a[i] / (na * na);
        }
        da[i] += d_out * g;
    }
    for i in 0..b.len() {
        let mut g = a[i] / denom;
        if nb >= eps {
            g -= cos * b[i] / (nb * nb);
        }
        db[i] += d_out * g;
    }
}

/// In-place row softmax with max subtraction.
pub fn softmax_rows(x: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &mut x[r * cols..(r + 1) * cols];
        let mut m = f64::NEG_INFINITY;
        for &v in row.iter() {
            if v > m {
                m = v;
            }
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Bilinear interpolation of an [h,w,c] map to [oh,ow,c], half-pixel centers,
/// edges clamped.
pub fn bilinear_resize(x: &[f64], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        let (y0, y1, fy) = src_coords(oy, oh, h);
        for ox in 0..ow {
            let (x0, x1, fx) = src_coords(ox, ow, w);
            let w00 = (1.0 - fy) * (1.0 - fx);
            let w01 = (1.0 - fy) * fx;
            let w10 = fy * (1.0 - fx);
            let w11 = fy * fx;
            let o = (oy * ow + ox) * c;
            let p00 = (y0 * w + x0) * c;
            let p01 = (y0 * w + x1) * c;
            let p10 = (y1 * w + x0) * c;
            let p11 = (y1 * w + x1) * c;
            for ch in 0..c {
                out[o + ch] = w00 * x[p00 + ch]
                    + w01 * x[p01 + ch]
                    + w10 * x[p10 + ch]
                    + w11 * x[p11 + ch];
            }
        }
    }
    out
}

/// Adjoint of `bilinear_resize`: scatter output gradients back to the input grid.
pub fn bilinear_resize_adjoint(
    g: &[f64],
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f64],
) {
    for oy in 0..oh {
        let (y0, y1, fy) = src_coords(oy, oh, h);
        for ox in 0..ow {
            let (x0, x1, fx) = src_coords(ox, ow, w);
            let w00 = (1.0 - fy) * (1.0 - fx);
            let w01 = (1.0 - fy) * fx;
            let w10 = fy * (1.0 - fx);
            let w11 = fy * fx;
            let o = (oy * ow + ox) * c;
            let p00 = (y0 * w + x0) * c;
            let p01 = (y0 * w + x1) * c;
            let p10 = (y1 * w + x0) * c;
            let p11 = (y1 * w + x1) * c;
            for ch in 0..c {
                let gv = g[o + ch];
                dx[p00 + ch] += w00 * gv;
                dx[p01 + ch] += w01 * gv;
                dx[p10 + ch] += w10 * gv;
                dx[p11 + ch] += w11 * gv;
            }
        }
    }
}

fn src_coords(o: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (s.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, s - i0 as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let c = matmul_nn(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);

        // b^T stored as 2x3
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 2), c);

        // a^T stored as 3x2
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        assert_eq!(matmul_tn(&at, &b, 2, 3, 2), c);
    }

    #[test]
    fn sigmoid_extremes_finite() {
        assert!(sigmoid(1e4) > 0.0 && sigmoid(1e4).is_finite());
        assert!(sigmoid(-1e4) >= 0.0 && sigmoid(-1e4).is_finite());
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        let h = 1e-6;
        for &x in &[-2.5, -0.3, 0.0, 0.7, 3.1] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn bilinear_identity_when_same_size() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = bilinear_resize(&x, 2, 2, 1, 2, 2);
        assert_eq!(y, x.to_vec());
    }

    #[test]
    fn bilinear_upsamples_constant_exactly() {
        let x = vec![3.5; 4 * 4 * 2];
        let y = bilinear_resize(&x, 4, 4, 2, 8, 8);
        assert!(y.iter().all(|&v| (v - 3.5).abs() < 1e-12));
    }
}
