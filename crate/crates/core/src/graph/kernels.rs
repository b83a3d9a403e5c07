//! Dense matrix kernels. All dot products accumulate in `f64`.

use crate::tensor::Real;

fn widen<T: Real>(x: &[T]) -> Vec<f64> {
    x.iter().map(|v| v.as_f64()).collect()
}

/// `c[m×n] = a · b` for strided `f64` operands; `(row stride, column stride)`
/// pairs describe each operand.
#[allow(clippy::too_many_arguments)]
fn gemm(a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0f64; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: the strides address exactly the `m×k` and `k×n` elements of
    // `a` and `b`, and `c` is a fresh dense `m×n` buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

fn narrow<T: Real>(x: Vec<f64>) -> Vec<T> {
    x.into_iter().map(T::of_f64).collect()
}

/// `a[m×k] · b[k×n]`
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    assert!(a.len() >= m * k && b.len() >= k * n);
    narrow(gemm(&widen(a), (k, 1), &widen(b), (n, 1), m, k, n))
}

/// `g[m×n] · b[k×n]ᵀ`, shape m×k.
pub fn matmul_nt<T: Real>(g: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    assert!(g.len() >= m * n && b.len() >= k * n);
    narrow(gemm(&widen(g), (n, 1), &widen(b), (1, n), m, n, k))
}

/// `a[m×k]ᵀ · g[m×n]`, shape k×n.
pub fn matmul_tn<T: Real>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    assert!(a.len() >= m * k && g.len() >= m * n);
    narrow(gemm(&widen(a), (1, k), &widen(g), (n, 1), k, m, n))
}

/// Column sums of `g[m×n]`.
pub fn col_sums<T: Real>(g: &[T], m: usize, n: usize) -> Vec<T> {
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        for (o, v) in acc.iter_mut().zip(&g[i * n..(i + 1) * n]) {
            *o += v.as_f64();
        }
    }
    acc.into_iter().map(T::of_f64).collect()
}

pub fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn transposed_variants_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let g: Vec<f64> = (0..m * n).map(|i| (i as f64 * 0.23).sin()).collect();
        let close = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-12);
        assert!(close(&matmul(&a, &b, m, k, n), &naive(&a, &b, m, k, n)));
        assert!(close(
            &matmul_nt(&g, &b, m, n, k),
            &naive(&g, &transpose(&b, k, n), m, n, k)
        ));
        assert!(close(
            &matmul_tn(&a, &g, m, k, n),
            &naive(&transpose(&a, m, k), &g, k, m, n)
        ));
    }
}
