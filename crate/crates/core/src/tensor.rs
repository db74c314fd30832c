//! Dense row-major matrices and a thin safe wrapper over `matrixmultiply`.
//!
//! Everything numeric in the crate (tokenizer MLP, transformer, k-means) runs
//! on these `f64` matrices. Views carry explicit strides so attention heads and
//! transposes are expressed without copying.

/// Row-major `rows × cols` matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec: length mismatch");
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "Mat::from_rows: ragged rows");
            data.extend_from_slice(r);
        }
        Mat {
            rows: rows.len(),
            cols,
            data,
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn view(&self) -> MatRef<'_> {
        MatRef {
            data: &self.data,
            offset: 0,
            rows: self.rows,
            cols: self.cols,
            rs: self.cols as isize,
            cs: 1,
        }
    }

    pub fn view_mut(&mut self) -> MatMut<'_> {
        MatMut {
            rows: self.rows,
            cols: self.cols,
            rs: self.cols as isize,
            cs: 1,
            offset: 0,
            data: &mut self.data,
        }
    }

    /// Column block `[start, start + n)` as a strided view.
    pub fn col_block(&self, start: usize, n: usize) -> MatRef<'_> {
        assert!(start + n <= self.cols);
        MatRef {
            data: &self.data,
            offset: start,
            rows: self.rows,
            cols: n,
            rs: self.cols as isize,
            cs: 1,
        }
    }

    pub fn col_block_mut(&mut self, start: usize, n: usize) -> MatMut<'_> {
        assert!(start + n <= self.cols);
        MatMut {
            rows: self.rows,
            cols: n,
            rs: self.cols as isize,
            cs: 1,
            offset: start,
            data: &mut self.data,
        }
    }

    /// Rows `[r0, r0 + nr)` × columns `[c0, c0 + nc)`.
    pub fn block(&self, r0: usize, nr: usize, c0: usize, nc: usize) -> MatRef<'_> {
        assert!(r0 + nr <= self.rows && c0 + nc <= self.cols);
        MatRef {
            data: &self.data,
            offset: r0 * self.cols + c0,
            rows: nr,
            cols: nc,
            rs: self.cols as isize,
            cs: 1,
        }
    }

    pub fn block_mut(&mut self, r0: usize, nr: usize, c0: usize, nc: usize) -> MatMut<'_> {
        assert!(r0 + nr <= self.rows && c0 + nc <= self.cols);
        MatMut {
            rows: nr,
            cols: nc,
            rs: self.cols as isize,
            cs: 1,
            offset: r0 * self.cols + c0,
            data: &mut self.data,
        }
    }

    /// Copy of the listed rows.
    pub fn gather_rows(&self, idx: &[usize]) -> Mat {
        let mut out = Mat::zeros(idx.len(), self.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.row(i));
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Borrowed strided matrix view.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a> {
    data: &'a [f64],
    offset: usize,
    pub rows: usize,
    pub cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> MatRef<'a> {
    /// View over a plain row-major slice.
    pub fn from_slice(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols);
        MatRef {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn check(&self) {
        if self.rows == 0 || self.cols == 0 {
            return;
        }
        let last = self.offset as isize
            + (self.rows as isize - 1) * self.rs
            + (self.cols as isize - 1) * self.cs;
        assert!(
            last >= 0 && (last as usize) < self.data.len(),
            "view out of bounds"
        );
    }
}

/// Mutable strided matrix view.
#[derive(Debug)]
pub struct MatMut<'a> {
    data: &'a mut [f64],
    offset: usize,
    pub rows: usize,
    pub cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> MatMut<'a> {
    pub fn from_slice(data: &'a mut [f64], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols);
        MatMut {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatMut {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            offset: self.offset,
            data: self.data,
        }
    }

    fn check(&self) {
        if self.rows == 0 || self.cols == 0 {
            return;
        }
        let last = self.offset as isize
            + (self.rows as isize - 1) * self.rs
            + (self.cols as isize - 1) * self.cs;
        assert!(
            last >= 0 && (last as usize) < self.data.len(),
            "view out of bounds"
        );
    }
}

/// `c ← alpha · a · b + beta · c`.
pub fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: MatMut<'_>) {
    assert_eq!(a.cols, b.rows, "gemm: inner dimension mismatch");
    assert_eq!(
        (a.rows, b.cols),
        (c.rows, c.cols),
        "gemm: output shape mismatch"
    );
    a.check();
    b.check();
    c.check();
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        // matrixmultiply does not scale c when k == 0
        for i in 0..c.rows {
            for j in 0..c.cols {
                let idx = (c.offset as isize + i as isize * c.rs + j as isize * c.cs) as usize;
                c.data[idx] *= beta;
            }
        }
        return;
    }
    // SAFETY: every view was bounds-checked above for its full extent, and the
    // output view is uniquely borrowed so it cannot alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs,
            a.cs,
            b.data.as_ptr().add(b.offset),
            b.rs,
            b.cs,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs,
            c.cs,
        );
    }
}

/// `a · b` as a fresh matrix.
pub fn matmul(a: MatRef<'_>, b: MatRef<'_>) -> Mat {
    let mut out = Mat::zeros(a.rows, b.cols);
    gemm(1.0, a, b, 0.0, out.view_mut());
    out
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}
