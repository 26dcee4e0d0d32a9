use crate::exec;

/// Dense row-major `f64` tensor. Image batches use NCHW layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected NCHW tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `c = a · b` (or `c += a · b` when `accumulate`), with `a` m×k and `b` k×n given
/// by explicit row/column strides so transposes are free.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // Split rows of the output across workers once the problem is big enough.
    // Each output element is produced by exactly one call, so results do not
    // depend on the split.
    let rows_per_task = if exec::parallel_enabled() && m * n * k > 1 << 18 {
        m.div_ceil(8).max(8)
    } else {
        m
    };
    exec::for_each_chunk_mut(c, rows_per_task * n, |ci, c_rows| {
        let row0 = ci * rows_per_task;
        let rows = c_rows.len() / n;
        let a_off = (row0 as isize * a_strides.0) as usize;
        // SAFETY: pointers and strides describe in-bounds row-major blocks of
        // `a`, `b` and `c_rows`, which outlive the call; `c_rows` is exclusive.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.as_ptr().add(a_off),
                a_strides.0,
                a_strides.1,
                b.as_ptr(),
                b_strides.0,
                b_strides.1,
                beta,
                c_rows.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

/// Convolution geometry shared by im2col/col2im.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Geometry {
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        let out_h = (height + 2 * pad - kernel) / stride + 1;
        let out_w = (width + 2 * pad - kernel) / stride + 1;
        Geometry {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h,
            out_w,
        }
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold one CHW image into a `(C·k·k) × (out_h·out_w)` matrix.
pub(crate) fn im2col(img: &[f64], g: &Geometry) -> Vec<f64> {
    let cols = g.col_cols();
    let mut out = vec![0.0; g.col_rows() * cols];
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let src_row = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.width as isize {
                            dst[oh * g.out_w + ow] = src_row[iw as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-add columns back into a CHW image.
pub(crate) fn col2im(cols_data: &[f64], g: &Geometry) -> Vec<f64> {
    let cols = g.col_cols();
    let mut img = vec![0.0; g.channels * g.height * g.width];
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols_data[row * cols..(row + 1) * cols];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let base = ih as usize * g.width;
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.width as isize {
                            plane[base + iw as usize] += src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
    img
}
