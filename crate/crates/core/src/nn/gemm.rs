/// Strided view of a row-major (or transposed) matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f32],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> Mat<'a> {
    /// `rows x cols` stored row-major with row stride `ld`.
    pub fn rows(data: &'a [f32], ld: usize) -> Self {
        Self { data, rs: ld, cs: 1 }
    }

    /// Transpose of a matrix stored row-major with row stride `ld`.
    #[cfg(test)]
    pub fn transposed(data: &'a [f32], ld: usize) -> Self {
        Self { data, rs: 1, cs: ld }
    }

    fn reach(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return 0;
        }
        (rows - 1) * self.rs + (cols - 1) * self.cs + 1
    }
}

/// `c = a * b + beta * c` where `a` is `m x k`, `b` is `k x n` and `c` is
/// `m x n` with row stride `ldc`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(m: usize, k: usize, n: usize, a: Mat, b: Mat, c: &mut [f32], ldc: usize, beta: f32) {
    assert!(a.data.len() >= a.reach(m, k), "gemm: lhs too small");
    assert!(b.data.len() >= b.reach(k, n), "gemm: rhs too small");
    assert!(ldc >= n && c.len() >= Mat::rows(c, ldc).reach(m, n), "gemm: output too small");
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// `out[i * ldo + j] += a_i . b_j` over `m` rows of `a` (stride `lda`) and
/// `n` rows of `b` (stride `ldb`), each `len` long. Faster than `gemm_strided`
/// when `len` is long and `m x n` is small, as in convolution weight gradients.
#[allow(clippy::too_many_arguments)]
pub(crate) fn add_row_dots(a: &[f32], lda: usize, m: usize, b: &[f32], ldb: usize, n: usize, len: usize, out: &mut [f32], ldo: usize) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= (m - 1) * lda + len && b.len() >= (n - 1) * ldb + len, "row dots: input too small");
    assert!(ldo >= n && out.len() >= (m - 1) * ldo + n, "row dots: output too small");
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
        // SAFETY: the features the function is compiled for were detected above.
        unsafe { row_dots_avx2(a, lda, m, b, ldb, n, len, out, ldo) };
        return;
    }
    row_dots(a, lda, m, b, ldb, n, len, out, ldo);
}

#[allow(clippy::too_many_arguments)]
fn row_dots(a: &[f32], lda: usize, m: usize, b: &[f32], ldb: usize, n: usize, len: usize, out: &mut [f32], ldo: usize) {
    for i in 0..m {
        let ra = &a[i * lda..i * lda + len];
        for j in 0..n {
            let rb = &b[j * ldb..j * ldb + len];
            out[i * ldo + j] += ra.iter().zip(rb).map(|(x, y)| x * y).sum::<f32>();
        }
    }
}

/// Blocks of 4 `a` rows by 2 `b` rows keep eight independent FMA chains in
/// flight; ragged edges fall back to single dot products.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
#[allow(clippy::too_many_arguments)]
unsafe fn row_dots_avx2(a: &[f32], lda: usize, m: usize, b: &[f32], ldb: usize, n: usize, len: usize, out: &mut [f32], ldo: usize) {
    use std::arch::x86_64::*;

    unsafe fn hsum(v: __m256) -> f32 {
        let q = _mm_add_ps(_mm256_castps256_ps128(v), _mm256_extractf128_ps(v, 1));
        let q = _mm_add_ps(q, _mm_movehl_ps(q, q));
        _mm_cvtss_f32(_mm_add_ss(q, _mm_shuffle_ps(q, q, 1)))
    }

    let body = len - len % 8;
    let pa = a.as_ptr();
    let pb = b.as_ptr();
    let tail = |i: usize, j: usize| -> f32 { (body..len).map(|o| a[i * lda + o] * b[j * ldb + o]).sum() };
    let mut i = 0;
    while i < m {
        let rows = (m - i).min(4);
        let mut j = 0;
        while j < n {
            let cols = (n - j).min(2);
            if rows == 4 && cols == 2 {
                let mut acc = [[_mm256_setzero_ps(); 2]; 4];
                let (b0, b1) = (pb.add(j * ldb), pb.add((j + 1) * ldb));
                let mut o = 0;
                while o < body {
                    let v0 = _mm256_loadu_ps(b0.add(o));
                    let v1 = _mm256_loadu_ps(b1.add(o));
                    for (p, acc) in acc.iter_mut().enumerate() {
                        let av = _mm256_loadu_ps(pa.add((i + p) * lda + o));
                        acc[0] = _mm256_fmadd_ps(av, v0, acc[0]);
                        acc[1] = _mm256_fmadd_ps(av, v1, acc[1]);
                    }
                    o += 8;
                }
                for (p, acc) in acc.iter().enumerate() {
                    for (q, &v) in acc.iter().enumerate() {
                        out[(i + p) * ldo + j + q] += hsum(v) + tail(i + p, j + q);
                    }
                }
            } else {
                for p in i..i + rows {
                    for q in j..j + cols {
                        let mut acc = _mm256_setzero_ps();
                        let mut o = 0;
                        while o < body {
                            acc = _mm256_fmadd_ps(_mm256_loadu_ps(pa.add(p * lda + o)), _mm256_loadu_ps(pb.add(q * ldb + o)), acc);
                            o += 8;
                        }
                        out[p * ldo + q] += hsum(acc) + tail(p, q);
                    }
                }
            }
            j += cols;
        }
        i += rows;
    }
}

/// Dense convenience form: with `a_t` set, `a` is stored as `k x m`; with
/// `b_t` set, `b` is stored as `n x k`.
#[allow(clippy::too_many_arguments)]
#[cfg(test)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, c: &mut [f32], beta: f32) {
    let a = if a_t { Mat::transposed(a, m) } else { Mat::rows(a, k) };
    let b = if b_t { Mat::transposed(b, k) } else { Mat::rows(b, n) };
    gemm_strided(m, k, n, a, b, c, n, beta);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    let av = if a_t { a[p * m + i] } else { a[i * k + p] };
                    let bv = if b_t { b[j * k + p] } else { b[p * n + j] };
                    c[i * n + j] += av * bv;
                }
            }
        }
        c
    }

    #[test]
    fn matches_naive_for_all_transpositions() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        for a_t in [false, true] {
            for b_t in [false, true] {
                let mut c = vec![1.0; m * n];
                gemm(m, k, n, &a, a_t, &b, b_t, &mut c, 1.0);
                let want = naive(m, k, n, &a, a_t, &b, b_t);
                for (got, want) in c.iter().zip(&want) {
                    assert!((got - (want + 1.0)).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn row_dots_match_naive_on_ragged_sizes() {
        for (m, n, len) in [(7, 5, 37), (4, 2, 16), (1, 3, 5), (9, 1, 8)] {
            let (lda, ldb, ldo) = (len + 3, len + 1, n + 2);
            let a: Vec<f32> = (0..m * lda).map(|i| (i as f32 * 0.37).sin()).collect();
            let b: Vec<f32> = (0..n * ldb).map(|i| (i as f32 * 0.11).cos()).collect();
            let mut out = vec![0.5; m * ldo];
            add_row_dots(&a, lda, m, &b, ldb, n, len, &mut out, ldo);
            for i in 0..m {
                for j in 0..n {
                    let want: f32 = (0..len).map(|p| a[i * lda + p] * b[j * ldb + p]).sum();
                    assert!((out[i * ldo + j] - 0.5 - want).abs() < 1e-4, "{m}x{n}x{len} at ({i}, {j})");
                }
                assert_eq!(out[i * ldo + n], 0.5);
            }
        }
    }

    #[test]
    fn writes_into_a_column_window() {
        // 2x2 product written into columns 1..3 of a 2x4 output
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 0.0, 0.0, 1.0];
        let mut c = vec![9.0; 8];
        gemm_strided(2, 2, 2, Mat::rows(&a, 2), Mat::rows(&b, 2), &mut c[1..], 4, 0.0);
        assert_eq!(c, vec![9.0, 1.0, 2.0, 9.0, 9.0, 3.0, 4.0, 9.0]);
    }
}
