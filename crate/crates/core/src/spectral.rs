//! Radix-2 FFT and FFT-based lag correlation.
//!
//! Sign convention: forward transform uses `e^{-2πi kn/N}` and is
//! unnormalized; [`ifft`] divides by `N`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexBuffer {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexBuffer {
    pub fn zeros(n: usize) -> Self {
        ComplexBuffer {
            re: vec![0.0; n],
            im: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }
}

fn check_pow2(n: usize) -> Result<()> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::Contract(format!("FFT length {n} is not a power of two")));
    }
    Ok(())
}

/// Padded length used for lag correlation of length-`len` sequences.
pub fn correlation_len(len: usize) -> usize {
    2 * len.next_power_of_two()
}

/// In-place iterative radix-2 transform. `inverse` flips the twiddle sign
/// but does not normalize.
pub fn fft_in_place(buf: &mut ComplexBuffer, inverse: bool) -> Result<()> {
    let n = buf.len();
    check_pow2(n)?;
    if buf.im.len() != n {
        return Err(Error::Contract("re/im length mismatch".into()));
    }
    let (re, im) = (&mut buf.re, &mut buf.im);
    // bit reversal
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let half = n / 2;
    let (tw_re, tw_im): (Vec<f64>, Vec<f64>) = (0..half)
        .map(|k| {
            let a = sign * 2.0 * PI * k as f64 / n as f64;
            (libm::cos(a), libm::sin(a))
        })
        .unzip();
    let mut len = 2;
    while len <= n {
        let step = n / len;
        let h = len / 2;
        for start in (0..n).step_by(len) {
            for k in 0..h {
                let (wr, wi) = (tw_re[k * step], tw_im[k * step]);
                let (a, b) = (start + k, start + k + h);
                let xr = re[b] * wr - im[b] * wi;
                let xi = re[b] * wi + im[b] * wr;
                re[b] = re[a] - xr;
                im[b] = im[a] - xi;
                re[a] += xr;
                im[a] += xi;
            }
        }
        len <<= 1;
    }
    Ok(())
}

/// Forward transform of a real sequence zero-padded to `padded_len`.
pub fn fft(x: &[f64], padded_len: usize) -> Result<ComplexBuffer> {
    check_pow2(padded_len)?;
    if x.len() > padded_len {
        return Err(Error::Contract(format!(
            "sequence of length {} does not fit padded length {padded_len}",
            x.len()
        )));
    }
    let mut buf = ComplexBuffer::zeros(padded_len);
    buf.re[..x.len()].copy_from_slice(x);
    fft_in_place(&mut buf, false)?;
    Ok(buf)
}

/// Normalized inverse transform.
pub fn ifft(x: &ComplexBuffer) -> Result<ComplexBuffer> {
    let mut buf = x.clone();
    fft_in_place(&mut buf, true)?;
    let c = 1.0 / buf.len() as f64;
    buf.re.iter_mut().chain(buf.im.iter_mut()).for_each(|v| *v *= c);
    Ok(buf)
}

fn check_pair(q: &[f64], k: &[f64]) -> Result<()> {
    if q.len() != k.len() {
        return Err(Error::Contract(format!(
            "correlation length mismatch: {} vs {}",
            q.len(),
            k.len()
        )));
    }
    if q.len() < 2 {
        return Err(Error::Contract("correlation needs length >= 2".into()));
    }
    Ok(())
}

/// Raw padded cross-correlation `c[m] = Σ_t q_t k_{t-m}` (indices mod the
/// padded length, zero outside `0..L`).
fn padded_cross(q: &[f64], k: &[f64]) -> Result<Vec<f64>> {
    let n = correlation_len(q.len());
    let mut z = ComplexBuffer::zeros(n);
    z.re[..q.len()].copy_from_slice(q);
    z.im[..k.len()].copy_from_slice(k);
    fft_in_place(&mut z, false)?;
    let mut prod = ComplexBuffer::zeros(n);
    accumulate_packed_cross(&z, &mut prod);
    Ok(ifft(&prod)?.re)
}

/// Given `Z = FFT(q + i·k)` for real q, k, adds `FFT(q) · conj(FFT(k))` into `acc`.
fn accumulate_packed_cross(z: &ComplexBuffer, acc: &mut ComplexBuffer) {
    let n = z.len();
    for f in 0..n {
        let g = (n - f) % n;
        // Q = (Z[f] + conj(Z[-f])) / 2 ; K = (Z[f] - conj(Z[-f])) / 2i
        let (ar, ai) = (z.re[f], z.im[f]);
        let (br, bi) = (z.re[g], -z.im[g]);
        let (qr, qi) = ((ar + br) * 0.5, (ai + bi) * 0.5);
        let (dr, di) = ((ar - br) * 0.5, (ai - bi) * 0.5);
        // divide by i: (dr + i di)/i = di - i dr
        let (kr, ki) = (di, -dr);
        acc.re[f] += qr * kr + qi * ki;
        acc.im[f] += qi * kr - qr * ki;
    }
}

/// Linear lag correlation `R(τ) = Σ_t q_t · k_{t-τ}` for `τ ∈ 0..L`, computed
/// through a zero-padded FFT so no wrap-around enters.
pub fn autocorrelation(q: &[f64], k: &[f64]) -> Result<Vec<f64>> {
    check_pair(q, k)?;
    let mut c = padded_cross(q, k)?;
    c.truncate(q.len());
    Ok(c)
}

/// Direct O(L²) evaluation of [`autocorrelation`].
pub fn naive_autocorrelation(q: &[f64], k: &[f64]) -> Result<Vec<f64>> {
    check_pair(q, k)?;
    let l = q.len();
    Ok((0..l)
        .map(|tau| (tau..l).map(|t| q[t] * k[t - tau]).sum())
        .collect())
}

/// Circular lag correlation `R(τ) = Σ_t q_t · k_{(t-τ) mod L}` for `τ ∈ 0..L`,
/// folded out of the same zero-padded FFT.
pub fn circular_autocorrelation(q: &[f64], k: &[f64]) -> Result<Vec<f64>> {
    check_pair(q, k)?;
    let c = padded_cross(q, k)?;
    Ok(fold_circular(&c, q.len()))
}

fn fold_circular(c: &[f64], l: usize) -> Vec<f64> {
    let n = c.len();
    (0..l)
        .map(|tau| if tau == 0 { c[0] } else { c[tau] + c[n - (l - tau)] })
        .collect()
}

/// Direct O(L²) evaluation of [`circular_autocorrelation`].
pub fn naive_circular_autocorrelation(q: &[f64], k: &[f64]) -> Result<Vec<f64>> {
    check_pair(q, k)?;
    let l = q.len();
    Ok((0..l)
        .map(|tau| (0..l).map(|t| q[t] * k[(t + l - tau) % l]).sum())
        .collect())
}

/// Circular lag correlation averaged over channels.
///
/// `q` and `k` are laid out `[outer, len, inner]`; every `(outer, inner)`
/// pair is one channel. Returns `mean_channels(R_c(τ)) / len` for `τ ∈ 0..len`,
/// which equals the tape's `lag_correlation` at the same delays.
pub fn mean_circular_correlation(
    q: &[f64],
    k: &[f64],
    outer: usize,
    len: usize,
    inner: usize,
) -> Result<Vec<f64>> {
    if q.len() != k.len() || q.len() != outer * len * inner {
        return Err(Error::Contract(format!(
            "correlation layout [{outer},{len},{inner}] does not match {} / {} values",
            q.len(),
            k.len()
        )));
    }
    if len < 2 {
        return Err(Error::Contract("correlation needs length >= 2".into()));
    }
    let n = correlation_len(len);
    let mut acc = ComplexBuffer::zeros(n);
    let mut z = ComplexBuffer::zeros(n);
    for o in 0..outer {
        for i in 0..inner {
            z.re.iter_mut().chain(z.im.iter_mut()).for_each(|v| *v = 0.0);
            for t in 0..len {
                let at = (o * len + t) * inner + i;
                z.re[t] = q[at];
                z.im[t] = k[at];
            }
            fft_in_place(&mut z, false)?;
            accumulate_packed_cross(&z, &mut acc);
        }
    }
    let c = ifft(&acc)?.re;
    let scale = 1.0 / (outer * inner * len) as f64;
    Ok(fold_circular(&c, len).into_iter().map(|v| v * scale).collect())
}
