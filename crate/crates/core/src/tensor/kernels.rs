//! Bounds-checked wrapper over the GEMM kernels.

use super::Element;

/// A strided matrix view into a slice, starting at `offset`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Mat {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Mat {
    /// Dense row-major `rows × cols` matrix, optionally viewed transposed.
    pub fn dense(rows: usize, cols: usize, transposed: bool) -> Self {
        if transposed {
            Mat { offset: 0, rows: cols, cols: rows, rs: 1, cs: cols }
        } else {
            Mat { offset: 0, rows, cols, rs: cols, cs: 1 }
        }
    }

    pub fn strided(offset: usize, rows: usize, cols: usize, rs: usize) -> Self {
        Mat { offset, rows, cols, rs, cs: 1 }
    }

    pub fn t(self) -> Self {
        Mat { offset: self.offset, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

/// `c = alpha * a · b + beta * c`.
pub(crate) fn gemm<T: Element>(alpha: T, a: &[T], am: Mat, b: &[T], bm: Mat, beta: T, c: &mut [T], cm: Mat) {
    assert_eq!(am.cols, bm.rows, "gemm inner dimensions");
    assert_eq!(am.rows, cm.rows, "gemm output rows");
    assert_eq!(bm.cols, cm.cols, "gemm output cols");
    if cm.rows == 0 || cm.cols == 0 {
        return;
    }
    assert!(am.last_index() < a.len().max(1) || am.cols == 0);
    assert!(bm.last_index() < b.len().max(1) || bm.rows == 0);
    assert!(cm.last_index() < c.len());
    // SAFETY: every index touched is in bounds (checked above) and `c` is a
    // unique borrow, so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            am.rows,
            am.cols,
            bm.cols,
            alpha,
            a.as_ptr().add(am.offset),
            am.rs as isize,
            am.cs as isize,
            b.as_ptr().add(bm.offset),
            bm.rs as isize,
            bm.cs as isize,
            beta,
            c.as_mut_ptr().add(cm.offset),
            cm.rs as isize,
            cm.cs as isize,
        );
    }
}
