// Plain row-major matrix kernels. All of them accumulate into `out`.

/// `out[m×n] += a[m×k] · b[k×n]`
///
/// Every output cell is summed as `((out + a₀b₀) + a₁b₁) + …` in `p` order,
/// whatever the blocking, so all three layouts give bit-identical results.
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    const R: usize = 2;
    const C: usize = 8;
    let mut i = 0;
    while i + R <= m {
        let mut j = 0;
        while j + C <= n {
            let mut acc = [[0.0f64; C]; R];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(i + r) * n + j..(i + r) * n + j + C]);
            }
            for p in 0..k {
                let b_blk: &[f64; C] = b[p * n + j..p * n + j + C].try_into().expect("block width");
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for (o, &bv) in row.iter_mut().zip(b_blk) {
                        *o += av * bv;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i + r) * n + j..(i + r) * n + j + C].copy_from_slice(row);
            }
            j += C;
        }
        for r in i..i + R {
            for jj in j..n {
                let mut s = out[r * n + jj];
                for p in 0..k {
                    s += a[r * k + p] * b[p * n + jj];
                }
                out[r * n + jj] = s;
            }
        }
        i += R;
    }
    for r in i..m {
        let out_row = &mut out[r * n..(r + 1) * n];
        for (p, &av) in a[r * k..(r + 1) * k].iter().enumerate() {
            for (o, &bv) in out_row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    if m >= 8 {
        let mut bt = vec![0.0; k * n];
        for j in 0..n {
            for p in 0..k {
                bt[p * n + j] = b[j * k + p];
            }
        }
        return matmul_nn(a, &bt, m, k, n, out);
    }
    // same summation order as `matmul_nn`, so results do not depend on `m`
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let mut s = out[i * n + j];
            for (&x, &y) in a_row.iter().zip(&b[j * k..(j + 1) * k]) {
                s += x * y;
            }
            out[i * n + j] = s;
        }
    }
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut at = vec![0.0; m * k];
    for p in 0..k {
        for i in 0..m {
            at[i * k + p] = a[p * m + i];
        }
    }
    matmul_nn(&at, b, m, k, n, out);
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail_start = n - ca.remainder().len();
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in a[tail_start..].iter().zip(&b[tail_start..]) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
