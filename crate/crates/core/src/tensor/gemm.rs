//! Thin safe wrappers over `matrixmultiply` for row-major buffers.

use super::C64;

/// Whether an operand is used as stored or transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

fn strides(t: Trans, rows_stored: usize, cols_stored: usize) -> (isize, isize) {
    let _ = rows_stored;
    match t {
        Trans::No => (cols_stored as isize, 1),
        Trans::Yes => (1, cols_stored as isize),
    }
}

/// `c = alpha·op(a)·op(b) + beta·c` where `op(a)` is `m×k`, `op(b)` is
/// `k×n` and all buffers are row-major.
#[allow(clippy::too_many_arguments)]
pub fn dgemm(
    ta: Trans,
    tb: Trans,
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "dgemm: lhs buffer");
    assert_eq!(b.len(), k * n, "dgemm: rhs buffer");
    assert_eq!(c.len(), m * n, "dgemm: output buffer");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match ta {
        Trans::No => strides(ta, m, k),
        Trans::Yes => strides(ta, k, m),
    };
    let (rsb, csb) = match tb {
        Trans::No => strides(tb, k, n),
        Trans::Yes => strides(tb, n, k),
    };
    // SAFETY: buffer lengths are checked above and strides stay within them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

/// Complex counterpart of [`dgemm`]. Conjugation is the caller's job.
#[allow(clippy::too_many_arguments)]
pub fn cgemm(
    ta: Trans,
    tb: Trans,
    m: usize,
    k: usize,
    n: usize,
    alpha: C64,
    a: &[C64],
    b: &[C64],
    beta: C64,
    c: &mut [C64],
) {
    assert_eq!(a.len(), m * k, "cgemm: lhs buffer");
    assert_eq!(b.len(), k * n, "cgemm: rhs buffer");
    assert_eq!(c.len(), m * n, "cgemm: output buffer");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match ta {
        Trans::No => strides(ta, m, k),
        Trans::Yes => strides(ta, k, m),
    };
    let (rsb, csb) = match tb {
        Trans::No => strides(tb, k, n),
        Trans::Yes => strides(tb, n, k),
    };
    // SAFETY: Complex<f64> is repr(C) with layout [re, im], identical to
    // matrixmultiply's c64; lengths are checked above.
    unsafe {
        matrixmultiply::zgemm(
            matrixmultiply::CGemmOption::Standard,
            matrixmultiply::CGemmOption::Standard,
            m,
            k,
            n,
            [alpha.re, alpha.im],
            a.as_ptr() as *const [f64; 2],
            rsa,
            csa,
            b.as_ptr() as *const [f64; 2],
            rsb,
            csb,
            [beta.re, beta.im],
            c.as_mut_ptr() as *mut [f64; 2],
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_operands() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        dgemm(Trans::Yes, Trans::No, 2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        // aᵀb = [[1,3],[2,4]]·b
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        dgemm(Trans::No, Trans::Yes, 2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn rectangular_complex() {
        let j = C64::new(0.0, 1.0);
        let one = C64::new(1.0, 0.0);
        // a: 1×2 = [1, j], b: 2×3
        let a = [one, j];
        let b = [one, one * 2.0, one * 3.0, j, j, j];
        let mut c = [C64::new(0.0, 0.0); 3];
        cgemm(Trans::No, Trans::No, 1, 2, 3, one, &a, &b, C64::new(0.0, 0.0), &mut c);
        assert_eq!(c, [one * 0.0, one, one * 2.0]);
    }
}
