//! Strided matrix views over row-major buffers and a thin wrapper around
//! `matrixmultiply::dgemm`.

#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl View {
    /// View of a stored `rows x cols` row-major matrix, optionally transposed.
    pub fn of(rows: usize, cols: usize, transposed: bool) -> Self {
        let v = Self {
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        };
        if transposed {
            v.t()
        } else {
            v
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn max_offset(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        (self.rows - 1) * self.rs as usize + (self.cols - 1) * self.cs as usize
    }
}

/// `c = alpha * a * b + beta * c` over strided views.
pub(crate) fn gemm(
    alpha: f64,
    a: &[f64],
    av: View,
    b: &[f64],
    bv: View,
    beta: f64,
    c: &mut [f64],
    cv: View,
) {
    assert_eq!(av.cols, bv.rows);
    assert_eq!(av.rows, cv.rows);
    assert_eq!(bv.cols, cv.cols);
    let (m, k, n) = (av.rows, av.cols, bv.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = i * cv.rs as usize + j * cv.cs as usize;
                c[idx] *= beta;
            }
        }
        return;
    }
    assert!(av.max_offset() < a.len());
    assert!(bv.max_offset() < b.len());
    assert!(cv.max_offset() < c.len());
    // SAFETY: every view was bounds-checked against its slice above, and `c`
    // is exclusively borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            av.rs,
            av.cs,
            b.as_ptr(),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr(),
            cv.rs,
            cv.cs,
        );
    }
}
