use crate::scalar::Scalar;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    strides
}

/// Output shape of a numpy-style broadcast, or `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` when viewed inside the broadcast shape `out` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Walk every index of `out`, tracking the linear offsets into two strided operands.
fn for_each_index2(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel(out);
    if total == 0 {
        return;
    }
    let n = out.len();
    let mut idx = vec![0usize; n];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        let mut d = n;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Padding behaviour at image borders for [`Tensor::conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zeros,
    Replicate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub pad_mode: PadMode,
}

impl Conv2dSpec {
    pub fn same(kernel: usize) -> Self {
        Self {
            stride: 1,
            padding: kernel / 2,
            pad_mode: PadMode::Zeros,
        }
    }

    pub fn output_size(&self, input: usize, kernel: usize) -> usize {
        assert!(input + 2 * self.padding >= kernel, "kernel larger than padded input");
        (input + 2 * self.padding - kernel) / self.stride + 1
    }
}

struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: Conv2dSpec,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], spec: Conv2dSpec) -> Self {
        assert_eq!(x.len(), 4, "conv2d input must be NCHW");
        assert_eq!(w.len(), 4, "conv2d weight must be OIHW");
        assert_eq!(x[1], w[1], "conv2d channel mismatch");
        Self {
            batch: x[0],
            c_in: x[1],
            h: x[2],
            w: x[3],
            c_out: w[0],
            kh: w[2],
            kw: w[3],
            ho: spec.output_size(x[2], w[2]),
            wo: spec.output_size(x[3], w[3]),
            spec,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Source pixel for output position and kernel tap, `None` for a zero pad.
    #[inline]
    fn source(&self, oy: usize, ox: usize, i: usize, j: usize) -> Option<(usize, usize)> {
        let y = (oy * self.spec.stride + i) as isize - self.spec.padding as isize;
        let x = (ox * self.spec.stride + j) as isize - self.spec.padding as isize;
        let inside = y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w;
        match (inside, self.spec.pad_mode) {
            (true, _) => Some((y as usize, x as usize)),
            (false, PadMode::Zeros) => None,
            (false, PadMode::Replicate) => Some((
                y.clamp(0, self.h as isize - 1) as usize,
                x.clamp(0, self.w as isize - 1) as usize,
            )),
        }
    }

    fn im2col<T: Scalar>(&self, image: &[T], col: &mut [T]) {
        let cols = self.col_cols();
        for c in 0..self.c_in {
            let plane = &image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            dst[oy * self.wo + ox] = match self.source(oy, ox, i, j) {
                                Some((y, x)) => plane[y * self.w + x],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], image: &mut [T]) {
        let cols = self.col_cols();
        for c in 0..self.c_in {
            let plane = &mut image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some((y, x)) = self.source(oy, ox, i, j) {
                                plane[y * self.w + x] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Self {
        let shape = shape.into();
        assert_eq!(
            numel(&shape),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape, data }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Self {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        assert_eq!(numel(&shape), self.data.len(), "reshape {:?} -> {shape:?}", self.shape);
        self.shape = shape;
        self
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.f64()).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shape tensors.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Elementwise combination under numpy broadcasting rules.
    pub fn broadcast_zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        if self.shape == other.shape {
            return self.zip_map(other, f);
        }
        let out = broadcast_shape(&self.shape, &other.shape).unwrap_or_else(|| {
            panic!("cannot broadcast {:?} with {:?}", self.shape, other.shape)
        });
        let sa = broadcast_strides(&self.shape, &out);
        let sb = broadcast_strides(&other.shape, &out);
        let mut data = vec![T::zero(); numel(&out)];
        for_each_index2(&out, &sa, &sb, |o, ia, ib| {
            data[o] = f(self.data[ia], other.data[ib]);
        });
        Self { shape: out, data }
    }

    /// Sum away broadcast axes so the result has `shape`.
    pub fn sum_to_shape(&self, shape: &[usize]) -> Self {
        if self.shape == shape {
            return self.clone();
        }
        assert!(
            broadcast_shape(shape, &self.shape).as_deref() == Some(&self.shape[..]),
            "cannot reduce {:?} to {shape:?}",
            self.shape
        );
        let st = broadcast_strides(shape, &self.shape);
        let zero = vec![0; self.shape.len()];
        let mut data = vec![T::zero(); numel(shape)];
        for_each_index2(&self.shape, &st, &zero, |o, it, _| {
            data[it] += self.data[o];
        });
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Expand to a broadcast-compatible larger shape.
    pub fn broadcast_to(&self, shape: &[usize]) -> Self {
        let zeros = Self::zeros(shape.to_vec());
        zeros.broadcast_zip(self, |_, b| b)
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean_all(&self) -> T {
        self.sum_all() / T::of(self.data.len() as f64)
    }

    /// Shape after reducing `axes` with `keepdim` retained as size 1.
    pub fn reduced_shape(&self, axes: &[usize]) -> Vec<usize> {
        self.shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect()
    }

    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Self {
        let kept = self.reduced_shape(axes);
        let summed = self.sum_to_shape(&kept);
        if keepdim {
            summed
        } else {
            let squeezed: Vec<usize> = self
                .shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect();
            summed.reshape(squeezed)
        }
    }

    pub fn permute(&self, axes: &[usize]) -> Self {
        assert_eq!(axes.len(), self.shape.len(), "permute rank mismatch");
        let out: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let own = contiguous_strides(&self.shape);
        let src: Vec<usize> = axes.iter().map(|&a| own[a]).collect();
        let zero = vec![0; out.len()];
        let mut data = vec![T::zero(); self.data.len()];
        for_each_index2(&out, &src, &zero, |o, is, _| data[o] = self.data[is]);
        Self { shape: out, data }
    }

    fn split3(&self, axis: usize) -> (usize, usize, usize) {
        let outer = numel(&self.shape[..axis]);
        let inner = numel(&self.shape[axis + 1..]);
        (outer, self.shape[axis], inner)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Self {
        let (outer, size, inner) = self.split3(axis);
        assert!(start + len <= size, "narrow out of range");
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * size + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Self { shape, data }
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Self {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = parts[0];
        let mut shape = first.shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        for p in parts {
            assert_eq!(p.shape.len(), shape.len(), "concat rank mismatch");
            for (d, (&a, &b)) in p.shape.iter().zip(&first.shape).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch");
            }
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Self { shape, data }
    }

    /// Extremum along `axis` (removed from the shape) plus the winning positions.
    pub fn extremum_axis(&self, axis: usize, take_max: bool) -> (Self, Vec<usize>) {
        let (outer, size, inner) = self.split3(axis);
        assert!(size > 0, "extremum over empty axis");
        let mut values = Vec::with_capacity(outer * inner);
        let mut args = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = self.data[o * size * inner + i];
                for k in 1..size {
                    let v = self.data[(o * size + k) * inner + i];
                    let better = if take_max { v > best_v } else { v < best_v };
                    if better {
                        best = k;
                        best_v = v;
                    }
                }
                values.push(best_v);
                args.push(best);
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        (Self { shape, data: values }, args)
    }

    /// Batched matrix product. Operands are `[m,k]`/`[k,n]` or carry a leading batch axis;
    /// `ta`/`tb` mean the stored operand is the transpose of the logical one.
    pub fn matmul(&self, other: &Self, ta: bool, tb: bool) -> Self {
        let (ba, ra, ca) = mat_dims(&self.shape);
        let (bb, rb, cb) = mat_dims(&other.shape);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", self.shape, other.shape);
        let batch = match (ba, bb) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("matmul batch mismatch {:?} x {:?}", self.shape, other.shape),
        };
        let mut out = vec![T::zero(); batch * m * n];
        let sa = if ta { (1, ca as isize) } else { (ca as isize, 1) };
        let sb = if tb { (1, cb as isize) } else { (cb as isize, 1) };
        for b in 0..batch {
            let a_off = if ba == 1 { 0 } else { b * ra * ca };
            let b_off = if bb == 1 { 0 } else { b * rb * cb };
            T::gemm(
                m,
                k,
                n,
                &self.data[a_off..a_off + ra * ca],
                sa,
                &other.data[b_off..b_off + rb * cb],
                sb,
                &mut out[b * m * n..(b + 1) * m * n],
                (n as isize, 1),
                false,
            );
        }
        let shape = if self.shape.len() == 2 && other.shape.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        Self { shape, data: out }
    }

    pub fn conv2d(&self, weight: &Self, spec: Conv2dSpec) -> Self {
        let g = ConvGeom::new(&self.shape, &weight.shape, spec);
        let (rows, cols) = (g.col_rows(), g.col_cols());
        let mut out = vec![T::zero(); g.batch * g.c_out * cols];
        let mut col = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * cols]
        };
        let in_len = g.c_in * g.h * g.w;
        for b in 0..g.batch {
            let image = &self.data[b * in_len..(b + 1) * in_len];
            let col_ref: &[T] = if g.is_pointwise() {
                image
            } else {
                g.im2col(image, &mut col);
                &col
            };
            T::gemm(
                g.c_out,
                rows,
                cols,
                &weight.data,
                (rows as isize, 1),
                col_ref,
                (cols as isize, 1),
                &mut out[b * g.c_out * cols..(b + 1) * g.c_out * cols],
                (cols as isize, 1),
                false,
            );
        }
        Self {
            shape: vec![g.batch, g.c_out, g.ho, g.wo],
            data: out,
        }
    }

    /// Gradients of a convolution with respect to its input and weight.
    pub fn conv2d_backward(
        input: &Self,
        weight: &Self,
        grad_out: &Self,
        spec: Conv2dSpec,
        need_input: bool,
        need_weight: bool,
    ) -> (Option<Self>, Option<Self>) {
        let g = ConvGeom::new(&input.shape, &weight.shape, spec);
        let (rows, cols) = (g.col_rows(), g.col_cols());
        let in_len = g.c_in * g.h * g.w;
        let out_len = g.c_out * cols;
        let mut d_input = need_input.then(|| vec![T::zero(); input.data.len()]);
        let mut d_weight = need_weight.then(|| vec![T::zero(); weight.data.len()]);
        let mut col = vec![T::zero(); rows * cols];
        for b in 0..g.batch {
            let dy = &grad_out.data[b * out_len..(b + 1) * out_len];
            if let Some(dw) = d_weight.as_mut() {
                let image = &input.data[b * in_len..(b + 1) * in_len];
                let col_ref: &[T] = if g.is_pointwise() {
                    image
                } else {
                    g.im2col(image, &mut col);
                    &col
                };
                // dW[o, r] += dY[o, p] * col[r, p]
                T::gemm(
                    g.c_out,
                    cols,
                    rows,
                    dy,
                    (cols as isize, 1),
                    col_ref,
                    (1, cols as isize),
                    dw,
                    (rows as isize, 1),
                    true,
                );
            }
            if let Some(dx) = d_input.as_mut() {
                let dx_b = &mut dx[b * in_len..(b + 1) * in_len];
                if g.is_pointwise() {
                    T::gemm(
                        rows,
                        g.c_out,
                        cols,
                        &weight.data,
                        (1, rows as isize),
                        dy,
                        (cols as isize, 1),
                        dx_b,
                        (cols as isize, 1),
                        true,
                    );
                } else {
                    T::gemm(
                        rows,
                        g.c_out,
                        cols,
                        &weight.data,
                        (1, rows as isize),
                        dy,
                        (cols as isize, 1),
                        &mut col,
                        (cols as isize, 1),
                        false,
                    );
                    g.col2im(&col, dx_b);
                }
            }
        }
        (
            d_input.map(|d| Self::new(input.shape.clone(), d)),
            d_weight.map(|d| Self::new(weight.shape.clone(), d)),
        )
    }

    /// Nearest-neighbour 2x upsampling of an NCHW tensor.
    pub fn upsample2x(&self) -> Self {
        let [b, c, h, w] = nchw(&self.shape);
        let mut data = vec![T::zero(); b * c * h * w * 4];
        for p in 0..b * c {
            let src = &self.data[p * h * w..(p + 1) * h * w];
            let dst = &mut data[p * h * w * 4..(p + 1) * h * w * 4];
            for y in 0..2 * h {
                for x in 0..2 * w {
                    dst[y * 2 * w + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        Self {
            shape: vec![b, c, 2 * h, 2 * w],
            data,
        }
    }

    /// Adjoint of [`Tensor::upsample2x`]: sums each 2x2 block.
    pub fn sum_pool2x(&self) -> Self {
        let [b, c, h2, w2] = nchw(&self.shape);
        let (h, w) = (h2 / 2, w2 / 2);
        let mut data = vec![T::zero(); b * c * h * w];
        for p in 0..b * c {
            let src = &self.data[p * h2 * w2..(p + 1) * h2 * w2];
            let dst = &mut data[p * h * w..(p + 1) * h * w];
            for y in 0..h2 {
                for x in 0..w2 {
                    dst[(y / 2) * w + x / 2] += src[y * w2 + x];
                }
            }
        }
        Self {
            shape: vec![b, c, h, w],
            data,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }
}

fn mat_dims(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [r, c] => (1, *r, *c),
        [b, r, c] => (*b, *r, *c),
        _ => panic!("matmul operand must be rank 2 or 3, got {shape:?}"),
    }
}

fn nchw(shape: &[usize]) -> [usize; 4] {
    match shape {
        [b, c, h, w] => [*b, *c, *h, *w],
        _ => panic!("expected NCHW tensor, got {shape:?}"),
    }
}

impl Tensor<f32> {
    /// Little-endian bytes of the payload.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}
