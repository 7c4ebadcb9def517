use std::ops::Range;

use crate::scalar::Scalar;

/// Dense 4-D array stored channel-major: `[channel][sample][row][col]`.
///
/// Keeping channels outermost makes every convolution a single matrix
/// product over `n * h * w` columns and turns channel slicing into a
/// contiguous copy.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self { c, n, h, w, data: vec![S::zero(); c * n * h * w] }
    }

    pub fn filled(c: usize, n: usize, h: usize, w: usize, v: S) -> Self {
        Self { c, n, h, w, data: vec![v; c * n * h * w] }
    }

    pub fn from_vec(c: usize, n: usize, h: usize, w: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), c * n * h * w, "tensor data length does not match shape");
        Self { c, n, h, w, data }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(other.c, other.n, other.h, other.w)
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.c, self.n, self.h, self.w]
    }

    /// Number of elements in one channel (`n * h * w`).
    #[inline]
    pub fn plane(&self) -> usize {
        self.n * self.h * self.w
    }

    #[inline]
    pub fn index(&self, c: usize, n: usize, y: usize, x: usize) -> usize {
        ((c * self.n + n) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, c: usize, n: usize, y: usize, x: usize) -> S {
        self.data[self.index(c, n, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, n: usize, y: usize, x: usize, v: S) {
        let i = self.index(c, n, y, x);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[S] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [S] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn slice_channels(&self, range: Range<usize>) -> Self {
        assert!(range.end <= self.c, "channel range out of bounds");
        let p = self.plane();
        Self {
            c: range.len(),
            n: self.n,
            h: self.h,
            w: self.w,
            data: self.data[range.start * p..range.end * p].to_vec(),
        }
    }

    pub fn concat_channels(parts: &[&Self]) -> Self {
        let first = parts.first().expect("at least one tensor");
        let (n, h, w) = (first.n, first.h, first.w);
        let mut data = Vec::with_capacity(parts.iter().map(|t| t.data.len()).sum());
        let mut c = 0;
        for t in parts {
            assert_eq!((t.n, t.h, t.w), (n, h, w), "spatial shapes differ in concat");
            data.extend_from_slice(&t.data);
            c += t.c;
        }
        Self { c, n, h, w, data }
    }

    /// Copy of one sample of the batch, with `n == 1`.
    pub fn sample(&self, n: usize) -> Self {
        let hw = self.h * self.w;
        let mut out = Self::zeros(self.c, 1, self.h, self.w);
        for c in 0..self.c {
            let src = (c * self.n + n) * hw;
            out.data[c * hw..(c + 1) * hw].copy_from_slice(&self.data[src..src + hw]);
        }
        out
    }

    /// Stacks single-sample tensors along the batch axis.
    pub fn stack(samples: &[Self]) -> Self {
        let first = samples.first().expect("at least one sample");
        let (c, h, w) = (first.c, first.h, first.w);
        let n: usize = samples.iter().map(|s| s.n).sum();
        let mut out = Self::zeros(c, n, h, w);
        let hw = h * w;
        let mut offset = 0;
        for s in samples {
            assert_eq!((s.c, s.h, s.w), (c, h, w), "sample shapes differ in stack");
            for ch in 0..c {
                let src = &s.data[ch * s.n * hw..(ch + 1) * s.n * hw];
                let dst = (ch * n + offset) * hw;
                out.data[dst..dst + s.n * hw].copy_from_slice(src);
            }
            offset += s.n;
        }
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in add");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn add_scaled(&mut self, other: &Self, k: S) {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in add");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b * k;
        }
    }

    pub fn scale(&mut self, k: S) {
        for v in &mut self.data {
            *v *= k;
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { c: self.c, n: self.n, h: self.h, w: self.w, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            c: self.c,
            n: self.n,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| T::of(v.f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, v| m.max(v.abs()))
    }
}

/// Row-major `c = alpha * op(a) @ op(b) + beta * c` where `op` optionally
/// transposes. `a` is `m x k` after `op`, `b` is `k x n` after `op`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<S: Scalar>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: S,
    a: &[S],
    b: &[S],
    beta: S,
    c: &mut [S],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: extents checked above; `c` is a distinct &mut borrow.
    unsafe {
        S::gemm_raw(
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_for_all_transpositions() {
        let (m, n, k) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        for ta in [false, true] {
            for tb in [false, true] {
                let mut c = vec![1.0; m * n];
                gemm(ta, tb, m, n, k, 2.0, &a, &b, 0.5, &mut c);
                for i in 0..m {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for p in 0..k {
                            let av = if ta { a[p * m + i] } else { a[i * k + p] };
                            let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                            acc += av * bv;
                        }
                        assert!((c[i * n + j] - (2.0 * acc + 0.5)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn stack_and_sample_are_inverse() {
        let t = Tensor::<f32>::from_vec(2, 3, 1, 2, (0..12).map(|v| v as f32).collect());
        let parts: Vec<_> = (0..3).map(|i| t.sample(i)).collect();
        assert_eq!(Tensor::stack(&parts), t);
        assert_eq!(parts[1].data, vec![2.0, 3.0, 8.0, 9.0]);
    }

    #[test]
    fn concat_reverses_slicing() {
        let t = Tensor::<f64>::from_vec(5, 2, 2, 2, (0..40).map(f64::from).collect());
        let a = t.slice_channels(0..2);
        let b = t.slice_channels(2..2);
        let c = t.slice_channels(2..5);
        assert_eq!(Tensor::concat_channels(&[&a, &b, &c]), t);
    }
}
