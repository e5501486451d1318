//! Flat-slice matrix kernels used by the tape ops. Loop orders are chosen
//! so the innermost loop runs over contiguous memory and auto-vectorizes.

/// c[m,n] = a[m,k] * b[k,n]
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (l, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// c[m,n] = a[m,k] * b[n,k]^T
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (av, bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            *cv = s;
        }
    }
    c
}

/// c[k,n] = a[m,k]^T * b[m,n]
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for l in 0..m {
        let a_row = &a[l * k..(l + 1) * k];
        let b_row = &b[l * n..(l + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// 3x3, stride 1, pad 1 column buffer for one image: [ci*9, h*w].
pub fn im2col3x3(x: &[f64], ci: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; ci * 9 * hw];
    for c in 0..ci {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = &mut cols[(c * 9 + ky * 3 + kx) * hw..(c * 9 + ky * 3 + kx + 1) * hw];
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                for y in 0..h as isize {
                    let sy = y + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = (-dx).max(0);
                    let x_hi = (w as isize - dx).min(w as isize);
                    for xx in x_lo..x_hi {
                        row[(y * w as isize + xx) as usize] =
                            plane[(sy * w as isize + xx + dx) as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of a column buffer back onto an image gradient.
pub fn col2im3x3(cols: &[f64], ci: usize, h: usize, w: usize, out: &mut [f64]) {
    let hw = h * w;
    for c in 0..ci {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = &cols[(c * 9 + ky * 3 + kx) * hw..(c * 9 + ky * 3 + kx + 1) * hw];
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                for y in 0..h as isize {
                    let sy = y + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = (-dx).max(0);
                    let x_hi = (w as isize - dx).min(w as isize);
                    for xx in x_lo..x_hi {
                        plane[(sy * w as isize + xx + dx) as usize] +=
                            row[(y * w as isize + xx) as usize];
                    }
                }
            }
        }
    }
}
