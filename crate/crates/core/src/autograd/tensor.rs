use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Scalar type the engine runs on. Training uses `f32`; gradient checks use `f64`.
pub trait Real:
    Float
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` with arbitrary strides (see `matrixmultiply`).
    ///
    /// # Safety
    /// Pointers and strides must describe valid matrices of the given sizes.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major matrix product `c (m×n) [+]= op(a) (m×k) · op(b) (k×n)`.
///
/// With `trans_a` the slice `a` holds a row-major `k×m` matrix, likewise for `b`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Real>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[F],
    b: &[F],
    c: &mut [F],
    accumulate: bool,
) {
    assert!(a.len() >= m * k, "gemm: lhs too small");
    assert!(b.len() >= k * n, "gemm: rhs too small");
    assert!(c.len() >= m * n, "gemm: output too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: sizes were checked above and the strides describe dense row-major storage.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::one(),
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

/// Dense row-major tensor of rank ≤ 4.
#[derive(Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Debug> Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<F: Real> Tensor<F> {
    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Self {
        assert!(shape.len() <= 4, "rank {} unsupported", shape.len());
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Self::from_vec(shape, vec![value; shape.iter().product()])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    pub fn scalar(value: F) -> Self {
        Self::from_vec(&[1, 1, 1, 1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Shape as `(n, c, h, w)`; panics unless rank 4.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected rank-4 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Self {
        assert_eq!(self.shape, other.shape);
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

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::of(v.as_f64())).collect(),
        }
    }

    pub fn as_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Channels `[start, start+len)` of a rank-4 tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Self {
        let (n, c, h, w) = self.dims4();
        assert!(start + len <= c);
        let hw = h * w;
        let mut out = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            let base = (b * c + start) * hw;
            out.extend_from_slice(&self.data[base..base + len * hw]);
        }
        Self::from_vec(&[n, len, h, w], out)
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Self {
        assert!(!parts.is_empty());
        let (n, _, h, w) = parts[0].dims4();
        let hw = h * w;
        let c_total: usize = parts
            .iter()
            .map(|p| {
                let (pn, pc, ph, pw) = p.dims4();
                assert_eq!((pn, ph, pw), (n, h, w), "concat: mismatched dims");
                pc
            })
            .sum();
        let mut out = Vec::with_capacity(n * c_total * hw);
        for b in 0..n {
            for p in parts {
                let pc = p.shape[1];
                out.extend_from_slice(&p.data[b * pc * hw..(b + 1) * pc * hw]);
            }
        }
        Self::from_vec(&[n, c_total, h, w], out)
    }

    /// Sample `b` of a rank-4 tensor as a `(1,c,h,w)` tensor.
    pub fn batch_item(&self, b: usize) -> Self {
        let (n, c, h, w) = self.dims4();
        assert!(b < n);
        let len = c * h * w;
        Self::from_vec(&[1, c, h, w], self.data[b * len..(b + 1) * len].to_vec())
    }

    /// Stacks `(1,c,h,w)` or `(c,h,w)`-sized tensors into a batch.
    pub fn stack_batch(items: &[&Self]) -> Self {
        assert!(!items.is_empty());
        let tail: Vec<usize> = if items[0].shape.len() == 4 {
            assert_eq!(items[0].shape[0], 1);
            items[0].shape[1..].to_vec()
        } else {
            items[0].shape.clone()
        };
        let mut data = Vec::with_capacity(items.len() * items[0].numel());
        for it in items {
            assert_eq!(it.numel(), items[0].numel(), "stack: mismatched sizes");
            data.extend_from_slice(&it.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(tail);
        Self::from_vec(&shape, data)
    }
}

/// Left-pads a shape with ones to rank 4.
pub(crate) fn pad4(shape: &[usize]) -> [usize; 4] {
    let mut out = [1usize; 4];
    let off = 4 - shape.len();
    out[off..].copy_from_slice(shape);
    out
}

/// Row-major strides for a rank-4 shape, with zero stride on axes broadcast to `out`.
pub(crate) fn broadcast_strides(shape: [usize; 4], out: [usize; 4]) -> [usize; 4] {
    let mut strides = [0usize; 4];
    let mut acc = 1;
    for d in (0..4).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Result shape of broadcasting two same-rank shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` over every element of the broadcast output.
pub(crate) fn for_each_broadcast(
    a_shape: &[usize],
    b_shape: &[usize],
    out_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let out4 = pad4(out_shape);
    let sa = broadcast_strides(pad4(a_shape), out4);
    let sb = broadcast_strides(pad4(b_shape), out4);
    let mut o = 0;
    for i0 in 0..out4[0] {
        for i1 in 0..out4[1] {
            for i2 in 0..out4[2] {
                let abase = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let bbase = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..out4[3] {
                    f(o, abase + i3 * sa[3], bbase + i3 * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2,3],[4,5,6]] (2x3), b = [[1,0],[0,1],[1,1]] (3x2)
        let a = [1.0f64, 2., 3., 4., 5., 6.];
        let b = [1.0f64, 0., 0., 1., 1., 1.];
        let mut c = [0.0f64; 4];
        gemm(false, false, 2, 2, 3, &a, &b, &mut c, false);
        assert_eq!(c, [4., 5., 10., 11.]);
        // a^T stored as 3x2
        let at = [1.0f64, 4., 2., 5., 3., 6.];
        let mut c2 = [0.0f64; 4];
        gemm(true, false, 2, 2, 3, &at, &b, &mut c2, false);
        assert_eq!(c2, c);
        let bt = [1.0f64, 0., 1., 0., 1., 1.];
        let mut c3 = [1.0f64; 4];
        gemm(false, true, 2, 2, 3, &a, &bt, &mut c3, true);
        assert_eq!(c3, [5., 6., 11., 12.]);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3, 1, 1], &[2, 3, 4, 4]), Some(vec![2, 3, 4, 4]));
        assert_eq!(broadcast_shape(&[1, 3, 1, 1], &[2, 1, 4, 4]), Some(vec![2, 3, 4, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[3, 3]), None);
        let mut seen = Vec::new();
        for_each_broadcast(&[2, 1], &[1, 3], &[2, 3], |o, a, b| seen.push((o, a, b)));
        assert_eq!(seen[4], (4, 1, 1));
    }

    #[test]
    fn channel_slicing_and_concat() {
        let t = Tensor::<f32>::from_vec(&[2, 3, 1, 2], (0..12).map(|v| v as f32).collect());
        let s = t.slice_channels(1, 2);
        assert_eq!(s.data(), &[2., 3., 4., 5., 8., 9., 10., 11.]);
        let a = t.slice_channels(0, 1);
        let back = Tensor::concat_channels(&[&a, &s]);
        assert_eq!(back, t);
    }
}
