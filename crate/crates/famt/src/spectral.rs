//! 1-D FFT/IFFT and the Gaussian low-pass filter used for per-token
//! frequency weighting.
//!
//! Power-of-two lengths run through an iterative radix-2 transform; every
//! other length goes through Bluestein's chirp-z algorithm, which reduces to
//! a radix-2 convolution. The forward transform is unnormalized,
//! `X[k] = Σ_t v[t]·exp(-2πi·kt/n)`; the inverse carries the `1/n` factor.

use crate::error::{Error, Result};

/// Planar complex vector (separate real and imaginary parts).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexVector {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexVector {
    pub fn new(re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        if re.len() != im.len() {
            return Err(Error::Shape(format!(
                "complex vector parts differ in length: {} vs {}",
                re.len(),
                im.len()
            )));
        }
        Ok(ComplexVector { re, im })
    }

    pub fn from_real(re: &[f64]) -> Self {
        ComplexVector { re: re.to_vec(), im: vec![0.0; re.len()] }
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    /// Squared Euclidean norm over both parts.
    pub fn energy(&self) -> f64 {
        self.re.iter().map(|x| x * x).sum::<f64>() + self.im.iter().map(|x| x * x).sum::<f64>()
    }
}

/// Radix-2 in-place transform; `sign` is -1 for forward, +1 for inverse
/// (unnormalized).
fn radix2(re: &mut [f64], im: &mut [f64], sign: f64) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());
    // bit-reversal permutation
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
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * std::f64::consts::PI / len as f64;
        let (wim, wre) = ang.sin_cos();
        let mut base = 0;
        while base < n {
            let mut cr = 1.0;
            let mut ci = 0.0;
            for off in 0..len / 2 {
                let a = base + off;
                let b = a + len / 2;
                let tr = re[b] * cr - im[b] * ci;
                let ti = re[b] * ci + im[b] * cr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                let ncr = cr * wre - ci * wim;
                ci = cr * wim + ci * wre;
                cr = ncr;
            }
            base += len;
        }
        len <<= 1;
    }
}

/// Bluestein chirp-z transform for arbitrary n, built on radix-2 convolution.
fn bluestein(re: &[f64], im: &[f64], sign: f64) -> (Vec<f64>, Vec<f64>) {
    let n = re.len();
    let m = (2 * n - 1).next_power_of_two();
    // chirp c[t] = exp(sign * i * pi * t^2 / n); t^2 taken mod 2n keeps the
    // angle argument small and exact.
    let mut cre = vec![0.0; n];
    let mut cim = vec![0.0; n];
    for t in 0..n {
        let q = ((t as u64 * t as u64) % (2 * n as u64)) as f64;
        let ang = sign * std::f64::consts::PI * q / n as f64;
        cre[t] = ang.cos();
        cim[t] = ang.sin();
    }
    // a[t] = x[t] * c[t], zero padded to m
    let mut are = vec![0.0; m];
    let mut aim = vec![0.0; m];
    for t in 0..n {
        are[t] = re[t] * cre[t] - im[t] * cim[t];
        aim[t] = re[t] * cim[t] + im[t] * cre[t];
    }
    // b[t] = conj(c[t]) wrapped circularly
    let mut bre = vec![0.0; m];
    let mut bim = vec![0.0; m];
    for t in 0..n {
        bre[t] = cre[t];
        bim[t] = -cim[t];
        if t > 0 {
            bre[m - t] = cre[t];
            bim[m - t] = -cim[t];
        }
    }
    radix2(&mut are, &mut aim, -1.0);
    radix2(&mut bre, &mut bim, -1.0);
    for t in 0..m {
        let pr = are[t] * bre[t] - aim[t] * bim[t];
        let pi = are[t] * bim[t] + aim[t] * bre[t];
        are[t] = pr;
        aim[t] = pi;
    }
    radix2(&mut are, &mut aim, 1.0);
    let inv_m = 1.0 / m as f64;
    let mut out_re = vec![0.0; n];
    let mut out_im = vec![0.0; n];
    for k in 0..n {
        let vr = are[k] * inv_m;
        let vi = aim[k] * inv_m;
        out_re[k] = vr * cre[k] - vi * cim[k];
        out_im[k] = vr * cim[k] + vi * cre[k];
    }
    (out_re, out_im)
}

fn transform(v: &ComplexVector, sign: f64) -> ComplexVector {
    let n = v.len();
    if n <= 1 {
        return v.clone();
    }
    if n.is_power_of_two() {
        let mut re = v.re.clone();
        let mut im = v.im.clone();
        radix2(&mut re, &mut im, sign);
        ComplexVector { re, im }
    } else {
        let (re, im) = bluestein(&v.re, &v.im, sign);
        ComplexVector { re, im }
    }
}

/// Unnormalized forward DFT.
pub fn fft(v: &ComplexVector) -> ComplexVector {
    transform(v, -1.0)
}

/// Inverse DFT with `1/n` normalization; `ifft(fft(v)) == v`.
pub fn ifft(v: &ComplexVector) -> ComplexVector {
    let n = v.len();
    let mut out = transform(v, 1.0);
    if n > 1 {
        let inv = 1.0 / n as f64;
        for x in out.re.iter_mut().chain(out.im.iter_mut()) {
            *x *= inv;
        }
    }
    out
}

/// Gaussian low-pass gains over the symmetric frequency index.
#[derive(Debug, Clone)]
pub struct LowPassFilter {
    n: usize,
    sigma: f64,
    gains: Vec<f64>,
}

/// `gains[k] = exp(-f_k² / (2σ²))` with `f_k = min(k, n-k)`; DC always
/// passes with unit gain.
pub fn gaussian_lowpass(n: usize, sigma: f64) -> Result<LowPassFilter> {
    if n == 0 {
        return Err(Error::Parameter("filter length must be at least 1".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::Parameter(format!("cutoff factor sigma must be positive, got {sigma}")));
    }
    let gains = (0..n)
        .map(|k| {
            let f = k.min(n - k) as f64;
            (-(f * f) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    Ok(LowPassFilter { n, sigma, gains })
}

impl LowPassFilter {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    /// Pointwise product of the gains with a spectrum of matching length.
    pub fn apply(&self, spectrum: &ComplexVector) -> Result<ComplexVector> {
        if spectrum.len() != self.n {
            return Err(Error::Shape(format!(
                "filter length {} vs spectrum length {}",
                self.n,
                spectrum.len()
            )));
        }
        let re = spectrum.re.iter().zip(&self.gains).map(|(&x, &g)| x * g).collect();
        let im = spectrum.im.iter().zip(&self.gains).map(|(&x, &g)| x * g).collect();
        Ok(ComplexVector { re, im })
    }
}
