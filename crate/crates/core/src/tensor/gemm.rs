/// Strided view of a row-major buffer used as a GEMM operand.
#[derive(Clone, Copy)]
pub(crate) struct Operand<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> Operand<'a> {
    /// A `rows x cols` row-major matrix, optionally read transposed.
    pub fn new(data: &'a [f64], rows: usize, cols: usize, transposed: bool) -> Self {
        assert_eq!(data.len(), rows * cols, "operand buffer size");
        if transposed {
            Operand {
                data,
                rows: cols,
                cols: rows,
                rs: 1,
                cs: cols as isize,
            }
        } else {
            Operand {
                data,
                rows,
                cols,
                rs: cols as isize,
                cs: 1,
            }
        }
    }

    pub fn t(self) -> Self {
        Operand {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = beta * c + a * b`; the output is written through strides so a
/// transposed destination costs nothing extra.
pub(crate) fn gemm(a: Operand, b: Operand, beta: f64, c: &mut [f64], rsc: isize, csc: isize) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n, "gemm output buffer size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    // SAFETY: operand/destination extents were checked against their
    // buffers above and all strides address within those buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}
