//! Dense row-major `f64` arrays and the numeric kernels behind tensor ops.

use std::fmt;

/// A dense, row-major n-dimensional array of `f64`.
#[derive(Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Array {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Array")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Broadcast two same-rank shapes; `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// Strides of `shape` viewed inside `out` (zero on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    shape
        .iter()
        .zip(out)
        .zip(s)
        .map(|((&d, &o), st)| if d == o { st } else { 0 })
        .collect()
}

/// Visit every multi-index of `shape` in row-major order, yielding the flat
/// offsets into each of the stride sets.
fn for_each_offset<const K: usize>(
    shape: &[usize],
    stride_sets: [&[usize]; K],
    mut f: impl FnMut([usize; K]),
) {
    let n = numel(shape);
    if n == 0 {
        return;
    }
    let nd = shape.len();
    let mut idx = vec![0usize; nd];
    let mut offs = [0usize; K];
    for _ in 0..n {
        f(offs);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            for k in 0..K {
                offs[k] += stride_sets[k][ax];
            }
            if idx[ax] < shape[ax] {
                break;
            }
            for k in 0..K {
                offs[k] -= stride_sets[k][ax] * shape[ax];
            }
            idx[ax] = 0;
        }
    }
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            numel(&shape),
            data.len(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; numel(shape)],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(vec![1], vec![v])
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

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Self {
        assert_eq!(
            numel(shape),
            self.len(),
            "cannot reshape {:?} into {:?}",
            self.shape,
            shape
        );
        Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Elementwise binary op with same-rank broadcasting.
    pub fn zip_broadcast(&self, other: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Array::new(self.shape.clone(), data);
        }
        let out = broadcast_shape(&self.shape, &other.shape).unwrap_or_else(|| {
            panic!(
                "shapes {:?} and {:?} are not broadcast-compatible",
                self.shape, other.shape
            )
        });
        let sa = broadcast_strides(&self.shape, &out);
        let sb = broadcast_strides(&other.shape, &out);
        let mut data = Vec::with_capacity(numel(&out));
        for_each_offset(&out, [&sa, &sb], |[i, j]| data.push(f(self.data[i], other.data[j])));
        Array::new(out, data)
    }

    /// Expand size-1 axes to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Array {
        if self.shape == shape {
            return self.clone();
        }
        match broadcast_shape(&self.shape, shape) {
            Some(s) if s == shape => {}
            _ => panic!("cannot broadcast {:?} to {:?}", self.shape, shape),
        }
        let sa = broadcast_strides(&self.shape, shape);
        let mut data = Vec::with_capacity(numel(shape));
        for_each_offset(shape, [&sa], |[i]| data.push(self.data[i]));
        Array::new(shape.to_vec(), data)
    }

    /// Sum over the axes where `shape` has extent 1 (inverse of `broadcast_to`).
    pub fn sum_to(&self, shape: &[usize]) -> Array {
        if self.shape == shape {
            return self.clone();
        }
        match broadcast_shape(shape, &self.shape) {
            Some(s) if s == self.shape => {}
            _ => panic!("cannot sum {:?} down to {:?}", self.shape, shape),
        }
        let st = broadcast_strides(shape, &self.shape);
        let ones = strides(&self.shape);
        let mut out = vec![0.0; numel(shape)];
        for_each_offset(&self.shape, [&ones, &st], |[i, j]| out[j] += self.data[i]);
        Array::new(shape.to_vec(), out)
    }

    /// Extremum along `axis` (kept as extent 1) plus a one-hot mask marking
    /// the first position attaining it.
    pub fn extreme_along(&self, axis: usize, max: bool) -> (Array, Array) {
        let (pre, n, post) = split_axis(&self.shape, axis);
        let mut out_shape = self.shape.clone();
        out_shape[axis] = 1;
        let mut out = vec![0.0; pre * post];
        let mut mask = vec![0.0; self.len()];
        for p in 0..pre {
            for q in 0..post {
                let base = p * n * post + q;
                let mut best = 0usize;
                for i in 1..n {
                    let v = self.data[base + i * post];
                    let b = self.data[base + best * post];
                    if (max && v > b) || (!max && v < b) {
                        best = i;
                    }
                }
                out[p * post + q] = self.data[base + best * post];
                mask[base + best * post] = 1.0;
            }
        }
        (
            Array::new(out_shape, out),
            Array::new(self.shape.clone(), mask),
        )
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Array {
        let (pre, n, post) = split_axis(&self.shape, axis);
        assert!(start + len <= n, "narrow {start}+{len} out of range {n}");
        let mut shape = self.shape.clone();
        shape[axis] = len;
        let mut data = Vec::with_capacity(pre * len * post);
        for p in 0..pre {
            let from = (p * n + start) * post;
            data.extend_from_slice(&self.data[from..from + len * post]);
        }
        Array::new(shape, data)
    }

    pub fn pad(&self, axis: usize, before: usize, after: usize) -> Array {
        let (pre, n, post) = split_axis(&self.shape, axis);
        let total = before + n + after;
        let mut shape = self.shape.clone();
        shape[axis] = total;
        let mut data = vec![0.0; pre * total * post];
        for p in 0..pre {
            let to = (p * total + before) * post;
            let from = p * n * post;
            data[to..to + n * post].copy_from_slice(&self.data[from..from + n * post]);
        }
        Array::new(shape, data)
    }

    pub fn transpose2d(&self) -> Array {
        assert_eq!(self.shape.len(), 2, "transpose2d expects a matrix");
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Array::new(vec![c, r], data)
    }

    pub fn matmul(&self, other: &Array) -> Array {
        assert!(
            self.shape.len() == 2 && other.shape.len() == 2 && self.shape[1] == other.shape[0],
            "matmul shape mismatch {:?} x {:?}",
            self.shape,
            other.shape
        );
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &other.data, false, &mut out, 0.0);
        Array::new(vec![m, n], out)
    }

    /// Contract `matrix` (`[out, in]`) against `axis` of `self`.
    pub fn axis_matmul(&self, axis: usize, matrix: &Array) -> Array {
        let (pre, n, post) = split_axis(&self.shape, axis);
        let (out_n, in_n) = (matrix.shape[0], matrix.shape[1]);
        assert_eq!(in_n, n, "axis_matmul: matrix expects {in_n}, axis has {n}");
        let mut shape = self.shape.clone();
        shape[axis] = out_n;
        let mut data = vec![0.0; pre * out_n * post];
        for p in 0..pre {
            let src = &self.data[p * n * post..(p + 1) * n * post];
            let dst = &mut data[p * out_n * post..(p + 1) * out_n * post];
            gemm(out_n, n, post, &matrix.data, false, src, false, dst, 0.0);
        }
        Array::new(shape, data)
    }
}

/// `(prod(shape[..axis]), shape[axis], prod(shape[axis+1..]))`
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

/// `c = a·b + beta·c` on row-major buffers; `ta`/`tb` read the operand
/// transposed (`a` stored as `[k, m]`, `b` stored as `[n, k]`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the buffers are sized m*k, k*n and m*n and the strides above
    // address exactly those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

/// Geometry of a 2-D convolution over NCHW input with OIHW weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_size(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.pad - kernel) / self.stride + 1
    }
}

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    fn new(x: &[usize], w: &[usize], g: ConvGeom) -> Self {
        assert_eq!(x.len(), 4, "conv input must be NCHW, got {x:?}");
        assert_eq!(w.len(), 4, "conv weight must be OIHW, got {w:?}");
        assert_eq!(x[1], w[1], "conv channel mismatch: input {x:?}, weight {w:?}");
        assert!(
            x[2] + 2 * g.pad >= w[2] && x[3] + 2 * g.pad >= w[3],
            "conv kernel {w:?} larger than padded input {x:?}"
        );
        Self {
            n: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            o: w[0],
            kh: w[2],
            kw: w[3],
            oh: g.out_size(x[2], w[2]),
            ow: g.out_size(x[3], w[3]),
        }
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(img: &[f64], d: &ConvDims, g: ConvGeom, cols: &mut [f64]) {
    let (ohw, ow) = (d.col_cols(), d.ow);
    for c in 0..d.c {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oi in 0..d.oh {
                    let y = (oi * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oi * ow..(oi + 1) * ow];
                    if y < 0 || y >= d.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &img[(c * d.h + y as usize) * d.w..(c * d.h + y as usize + 1) * d.w];
                    for (oj, v) in line.iter_mut().enumerate() {
                        let x = (oj * g.stride + kj) as isize - g.pad as isize;
                        *v = if x < 0 || x >= d.w as isize {
                            0.0
                        } else {
                            src[x as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], d: &ConvDims, g: ConvGeom, img: &mut [f64]) {
    let (ohw, ow) = (d.col_cols(), d.ow);
    for c in 0..d.c {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oi in 0..d.oh {
                    let y = (oi * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y >= d.h as isize {
                        continue;
                    }
                    let base = (c * d.h + y as usize) * d.w;
                    for oj in 0..d.ow {
                        let x = (oj * g.stride + kj) as isize - g.pad as isize;
                        if x >= 0 && (x as usize) < d.w {
                            img[base + x as usize] += src[oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d(x: &Array, w: &Array, g: ConvGeom) -> Array {
    let d = ConvDims::new(&x.shape, &w.shape, g);
    let (rows, ncols) = (d.col_rows(), d.col_cols());
    let mut cols = vec![0.0; rows * ncols];
    let mut out = vec![0.0; d.n * d.o * ncols];
    let in_sz = d.c * d.h * d.w;
    for n in 0..d.n {
        im2col(&x.data[n * in_sz..(n + 1) * in_sz], &d, g, &mut cols);
        let dst = &mut out[n * d.o * ncols..(n + 1) * d.o * ncols];
        gemm(d.o, rows, ncols, &w.data, false, &cols, false, dst, 0.0);
    }
    Array::new(vec![d.n, d.o, d.oh, d.ow], out)
}

/// Adjoint of `conv2d` in its input: maps an output-shaped gradient back to
/// an input of spatial size `input_hw`.
pub fn conv2d_input_grad(gy: &Array, w: &Array, g: ConvGeom, input_hw: (usize, usize)) -> Array {
    let x_shape = [gy.shape[0], w.shape[1], input_hw.0, input_hw.1];
    let d = ConvDims::new(&x_shape, &w.shape, g);
    assert_eq!(
        &gy.shape[..],
        &[d.n, d.o, d.oh, d.ow],
        "conv input-grad: gradient shape mismatch"
    );
    let (rows, ncols) = (d.col_rows(), d.col_cols());
    let mut cols = vec![0.0; rows * ncols];
    let in_sz = d.c * d.h * d.w;
    let mut out = vec![0.0; d.n * in_sz];
    for n in 0..d.n {
        let src = &gy.data[n * d.o * ncols..(n + 1) * d.o * ncols];
        gemm(rows, d.o, ncols, &w.data, true, src, false, &mut cols, 0.0);
        col2im_add(&cols, &d, g, &mut out[n * in_sz..(n + 1) * in_sz]);
    }
    Array::new(x_shape.to_vec(), out)
}

/// Adjoint of `conv2d` in its weight: kernel-shaped gradient from input and
/// output gradient.
pub fn conv2d_weight_grad(x: &Array, gy: &Array, g: ConvGeom, kernel_hw: (usize, usize)) -> Array {
    let w_shape = [gy.shape[1], x.shape[1], kernel_hw.0, kernel_hw.1];
    let d = ConvDims::new(&x.shape, &w_shape, g);
    assert_eq!(
        &gy.shape[..],
        &[d.n, d.o, d.oh, d.ow],
        "conv weight-grad: gradient shape mismatch"
    );
    let (rows, ncols) = (d.col_rows(), d.col_cols());
    let mut cols = vec![0.0; rows * ncols];
    let mut out = vec![0.0; d.o * rows];
    let in_sz = d.c * d.h * d.w;
    for n in 0..d.n {
        im2col(&x.data[n * in_sz..(n + 1) * in_sz], &d, g, &mut cols);
        let src = &gy.data[n * d.o * ncols..(n + 1) * d.o * ncols];
        gemm(d.o, ncols, rows, src, false, &cols, true, &mut out, 1.0);
    }
    Array::new(w_shape.to_vec(), out)
}
