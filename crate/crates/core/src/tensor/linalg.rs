use super::exec::{self, BLOCK_ROWS};
use super::Real;

/// Row-major matrix product `c (m×n) = op(a) (m×k) · op(b) (k×n)`.
///
/// `a_t` means `a` is stored as k×m, `b_t` that `b` is stored as n×k.
/// With `accumulate` the product is added to `c`. Rows of `c` are computed in
/// fixed blocks, possibly in parallel; each row's arithmetic is independent
/// of the blocking.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: a");
    assert_eq!(b.len(), k * n, "gemm: b");
    assert_eq!(c.len(), m * n, "gemm: c");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = if a_t { (1isize, m as isize) } else { (k as isize, 1isize) };
    let (rsb, csb) = if b_t { (1isize, k as isize) } else { (n as isize, 1isize) };
    let beta = if accumulate { T::one() } else { T::zero() };
    let a_addr = a.as_ptr() as usize;
    let b_addr = b.as_ptr() as usize;
    exec::for_each_chunk_mut(c, BLOCK_ROWS * n, |block, c_rows| {
        let row0 = block * BLOCK_ROWS;
        let rows = c_rows.len() / n;
        // SAFETY: the block covers rows row0..row0+rows of `a` and `c`, all in
        // bounds by the length asserts above; `b` is only read.
        unsafe {
            let a_ptr = (a_addr as *const T).offset(row0 as isize * rsa);
            T::gemm_raw(
                rows,
                k,
                n,
                a_ptr,
                rsa,
                csa,
                b_addr as *const T,
                rsb,
                csb,
                beta,
                c_rows.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

/// `out (k×n) += aᵀ · b` where `a` is m×k and `b` is m×n, reducing over `m`
/// in fixed row blocks whose partial products are summed in block order.
pub fn gemm_tn_reduce<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), m * n);
    assert_eq!(out.len(), k * n);
    let blocks = m.div_ceil(BLOCK_ROWS);
    let partials = exec::map_indexed(blocks, |bi| {
        let r0 = bi * BLOCK_ROWS;
        let r1 = (r0 + BLOCK_ROWS).min(m);
        let mut p = vec![T::zero(); k * n];
        gemm_block_tn(r1 - r0, k, n, &a[r0 * k..r1 * k], &b[r0 * n..r1 * n], &mut p);
        p
    });
    for p in partials {
        out.iter_mut().zip(p).for_each(|(o, v)| *o += v);
    }
}

fn gemm_block_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    // SAFETY: sizes asserted by the caller; a stored m×k read as its transpose.
    unsafe {
        T::gemm_raw(
            k,
            m,
            n,
            a.as_ptr(),
            1,
            k as isize,
            b.as_ptr(),
            n as isize,
            1,
            T::zero(),
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Column sums of an m×n matrix, reduced in the same fixed blocks.
pub fn column_sums<T: Real>(m: usize, n: usize, a: &[T], out: &mut [T]) {
    let blocks = m.div_ceil(BLOCK_ROWS);
    let partials = exec::map_indexed(blocks, |bi| {
        let r0 = bi * BLOCK_ROWS;
        let r1 = (r0 + BLOCK_ROWS).min(m);
        let mut p = vec![T::zero(); n];
        for row in a[r0 * n..r1 * n].chunks_exact(n) {
            p.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
        }
        p
    });
    for p in partials {
        out.iter_mut().zip(p).for_each(|(o, v)| *o += v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn all_transpose_variants_match_naive() {
        let (m, k, n) = (300, 7, 5);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, ta, bb, tb, &mut c, false);
                assert_eq!(c, want);
            }
        }
        let mut r = vec![0.0; k * n];
        let bm: Vec<f64> = (0..m * n).map(|i| (i % 5) as f64).collect();
        gemm_tn_reduce(m, k, n, &a, &bm, &mut r);
        assert_eq!(r, naive(k, m, n, &at, &bm));
    }

    #[test]
    fn column_sums_small() {
        let mut s = vec![0.0; 2];
        column_sums(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &mut s);
        assert_eq!(s, vec![9.0, 12.0]);
    }
}
