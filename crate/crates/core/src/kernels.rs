//! Fixed-order `f64` inner loops behind the matrix kernels.
//!
//! A dot product keeps [`LANES`] partial sums, lane `l` taking elements
//! `l, l+8, l+16, …`. Leftover elements past the last full chunk are summed
//! sequentially into `tail`. The result is
//! `((s0 + s4) + (s1 + s5)) + ((s2 + s6) + (s3 + s7)) + tail`.
//!
//! [`Portable`] spells this out in scalar code. [`Avx`] does the same
//! multiplies and adds four lanes at a time, with no fused multiply-add, so
//! the two agree bit for bit.

pub(crate) const LANES: usize = 8;

/// # Safety
///
/// Implementations may use instructions the CPU lacks. Callers must only
/// invoke a kernel set after checking the CPU supports it.
pub(crate) unsafe trait Kernels {
    /// # Safety
    /// See the trait.
    unsafe fn dot(a: &[f64], b: &[f64]) -> f64;

    /// Four dot products against the same left operand.
    ///
    /// # Safety
    /// See the trait.
    unsafe fn dot4(a: &[f64], b: [&[f64]; 4]) -> [f64; 4];

    /// `acc[i] += p * v[i]`.
    ///
    /// # Safety
    /// See the trait.
    unsafe fn axpy(acc: &mut [f64], p: f64, v: &[f64]);
}

#[inline(always)]
fn tail(a: &[f64], b: &[f64], from: usize) -> f64 {
    a[from..].iter().zip(&b[from..]).fold(0.0, |s, (x, y)| s + x * y)
}

#[inline(always)]
fn full_len(n: usize) -> usize {
    n - n % LANES
}

pub(crate) struct Portable;

#[inline(always)]
fn combine(acc: &[f64; LANES], tail: f64) -> f64 {
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline(always)]
fn lanes(x: &[f64]) -> &[f64; LANES] {
    x.try_into().expect("chunk of LANES values")
}

unsafe impl Kernels for Portable {
    #[inline(always)]
    unsafe fn dot(a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), b.len());
        let full = full_len(a.len());
        let mut acc = [0.0f64; LANES];
        for (x, y) in a[..full].chunks_exact(LANES).zip(b[..full].chunks_exact(LANES)) {
            let (x, y) = (lanes(x), lanes(y));
            for l in 0..LANES {
                acc[l] += x[l] * y[l];
            }
        }
        combine(&acc, tail(a, b, full))
    }

    #[inline(always)]
    unsafe fn dot4(a: &[f64], b: [&[f64]; 4]) -> [f64; 4] {
        // SAFETY: portable code has no requirements.
        unsafe {
            [
                Self::dot(a, b[0]),
                Self::dot(a, b[1]),
                Self::dot(a, b[2]),
                Self::dot(a, b[3]),
            ]
        }
    }

    #[inline(always)]
    unsafe fn axpy(acc: &mut [f64], p: f64, v: &[f64]) {
        assert_eq!(acc.len(), v.len());
        for (a, &x) in acc.iter_mut().zip(v) {
            *a += p * x;
        }
    }
}

#[cfg(target_arch = "x86_64")]
pub(crate) use avx::Avx;

#[cfg(target_arch = "x86_64")]
mod avx {
    use std::arch::x86_64::*;

    use super::{full_len, tail, Kernels, LANES};

    pub(crate) struct Avx;

    /// Lanes 0..4 live in `lo`, 4..8 in `hi`.
    #[inline(always)]
    unsafe fn finish(lo: __m256d, hi: __m256d, tail: f64) -> f64 {
        let mut s = [0.0f64; 4];
        // SAFETY: `s` holds four doubles; the caller has AVX.
        unsafe { _mm256_storeu_pd(s.as_mut_ptr(), _mm256_add_pd(lo, hi)) };
        ((s[0] + s[1]) + (s[2] + s[3])) + tail
    }

    // SAFETY: every method uses AVX only; the trait contract puts the CPU
    // check on the caller.
    unsafe impl Kernels for Avx {
        #[inline(always)]
        unsafe fn dot(a: &[f64], b: &[f64]) -> f64 {
            assert_eq!(a.len(), b.len());
            let full = full_len(a.len());
            let (pa, pb) = (a.as_ptr(), b.as_ptr());
            // SAFETY: offsets stay below `full <= len` of both slices.
            unsafe {
                let (mut lo, mut hi) = (_mm256_setzero_pd(), _mm256_setzero_pd());
                let mut c = 0;
                while c < full {
                    let x0 = _mm256_loadu_pd(pa.add(c));
                    let x1 = _mm256_loadu_pd(pa.add(c + 4));
                    lo = _mm256_add_pd(lo, _mm256_mul_pd(x0, _mm256_loadu_pd(pb.add(c))));
                    hi = _mm256_add_pd(hi, _mm256_mul_pd(x1, _mm256_loadu_pd(pb.add(c + 4))));
                    c += LANES;
                }
                finish(lo, hi, tail(a, b, full))
            }
        }

        #[inline(always)]
        unsafe fn dot4(a: &[f64], b: [&[f64]; 4]) -> [f64; 4] {
            let n = a.len();
            assert!(b.iter().all(|c| c.len() == n));
            let full = full_len(n);
            let pa = a.as_ptr();
            let pb = [b[0].as_ptr(), b[1].as_ptr(), b[2].as_ptr(), b[3].as_ptr()];
            // SAFETY: offsets stay below `full <= n` of every slice.
            unsafe {
                let z = _mm256_setzero_pd();
                let (mut l0, mut h0, mut l1, mut h1) = (z, z, z, z);
                let (mut l2, mut h2, mut l3, mut h3) = (z, z, z, z);
                let mut c = 0;
                while c < full {
                    let x0 = _mm256_loadu_pd(pa.add(c));
                    let x1 = _mm256_loadu_pd(pa.add(c + 4));
                    l0 = _mm256_add_pd(l0, _mm256_mul_pd(x0, _mm256_loadu_pd(pb[0].add(c))));
                    h0 = _mm256_add_pd(h0, _mm256_mul_pd(x1, _mm256_loadu_pd(pb[0].add(c + 4))));
                    l1 = _mm256_add_pd(l1, _mm256_mul_pd(x0, _mm256_loadu_pd(pb[1].add(c))));
                    h1 = _mm256_add_pd(h1, _mm256_mul_pd(x1, _mm256_loadu_pd(pb[1].add(c + 4))));
                    l2 = _mm256_add_pd(l2, _mm256_mul_pd(x0, _mm256_loadu_pd(pb[2].add(c))));
                    h2 = _mm256_add_pd(h2, _mm256_mul_pd(x1, _mm256_loadu_pd(pb[2].add(c + 4))));
                    l3 = _mm256_add_pd(l3, _mm256_mul_pd(x0, _mm256_loadu_pd(pb[3].add(c))));
                    h3 = _mm256_add_pd(h3, _mm256_mul_pd(x1, _mm256_loadu_pd(pb[3].add(c + 4))));
                    c += LANES;
                }
                [
                    finish(l0, h0, tail(a, b[0], full)),
                    finish(l1, h1, tail(a, b[1], full)),
                    finish(l2, h2, tail(a, b[2], full)),
                    finish(l3, h3, tail(a, b[3], full)),
                ]
            }
        }

        #[inline(always)]
        unsafe fn axpy(acc: &mut [f64], p: f64, v: &[f64]) {
            assert_eq!(acc.len(), v.len());
            let n = acc.len();
            let quad = n - n % 4;
            let (pa, pv) = (acc.as_mut_ptr(), v.as_ptr());
            // SAFETY: offsets stay below `quad <= n` of both slices.
            unsafe {
                let pp = _mm256_set1_pd(p);
                let mut c = 0;
                while c < quad {
                    let sum = _mm256_add_pd(
                        _mm256_loadu_pd(pa.add(c)),
                        _mm256_mul_pd(pp, _mm256_loadu_pd(pv.add(c))),
                    );
                    _mm256_storeu_pd(pa.add(c), sum);
                    c += 4;
                }
            }
            for (a, &x) in acc[quad..].iter_mut().zip(&v[quad..]) {
                *a += p * x;
            }
        }
    }
}

/// Calls `$generic::<K>($args)` with the fastest kernel set this CPU
/// supports. The AVX copy is compiled with the feature enabled so the
/// intrinsics inline.
macro_rules! with_kernels {
    ($generic:ident, $wide:ident, ($($arg:ident: $ty:ty),*) -> $ret:ty) => {{
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2")]
        unsafe fn $wide($($arg: $ty),*) -> $ret {
            // SAFETY: only called once AVX2 is detected.
            unsafe { $generic::<$crate::kernels::Avx>($($arg),*) }
        }

        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: AVX2 was detected at runtime.
            return unsafe { $wide($($arg),*) };
        }
        // SAFETY: portable code has no requirements.
        unsafe { $generic::<$crate::kernels::Portable>($($arg),*) }
    }};
}

pub(crate) use with_kernels;

#[cfg(test)]
mod tests {
    use super::*;

    fn data(n: usize, seed: f64) -> Vec<f64> {
        (0..n)
            .map(|i| ((i as f64 + seed) * 1.618).sin() * 10f64.powi((i % 7) as i32 - 3))
            .collect()
    }

    #[test]
    fn portable_matches_written_out_order() {
        let a = data(21, 0.5);
        let b = data(21, 2.5);
        let mut s = [0.0f64; 8];
        for i in 0..16 {
            s[i % 8] += a[i] * b[i];
        }
        let mut t = 0.0;
        for i in 16..21 {
            t += a[i] * b[i];
        }
        let expected = ((s[0] + s[4]) + (s[1] + s[5])) + ((s[2] + s[6]) + (s[3] + s[7])) + t;
        // SAFETY: portable.
        assert_eq!(unsafe { Portable::dot(&a, &b) }.to_bits(), expected.to_bits());
    }

    #[cfg(target_arch = "x86_64")]
    #[test]
    fn avx_matches_portable_bitwise() {
        if !std::is_x86_feature_detected!("avx2") {
            return;
        }
        for n in [0, 1, 7, 8, 9, 16, 23, 64, 100] {
            let a = data(n, 0.1);
            let cols: Vec<Vec<f64>> = (0..4).map(|j| data(n, 3.0 + j as f64)).collect();
            let b = [&cols[0][..], &cols[1][..], &cols[2][..], &cols[3][..]];
            // SAFETY: AVX2 detected above.
            unsafe {
                assert_eq!(Avx::dot(&a, b[0]).to_bits(), Portable::dot(&a, b[0]).to_bits());
                let (x, y) = (Avx::dot4(&a, b), Portable::dot4(&a, b));
                assert_eq!(x.map(f64::to_bits), y.map(f64::to_bits));
                let mut acc_a = data(n, 9.0);
                let mut acc_p = acc_a.clone();
                Avx::axpy(&mut acc_a, 0.37, &a);
                Portable::axpy(&mut acc_p, 0.37, &a);
                assert_eq!(acc_a, acc_p);
            }
        }
    }
}
