//! Complex FFT for arbitrary lengths.
//!
//! Power-of-two sizes use an iterative radix-2 Cooley-Tukey transform. Every
//! other size is mapped onto a power-of-two convolution with Bluestein's chirp-z
//! algorithm. Plans are cached per size behind a mutex and shared as `Arc`s.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{GmaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    pub const ZERO: Complex = Complex { re: 0.0, im: 0.0 };

    pub fn new(re: f64, im: f64) -> Self {
        Complex { re, im }
    }

    /// `exp(i * theta)`
    pub fn cis(theta: f64) -> Self {
        Complex::new(theta.cos(), theta.sin())
    }

    pub fn conj(self) -> Self {
        Complex::new(self.re, -self.im)
    }

    pub fn scale(self, s: f64) -> Self {
        Complex::new(self.re * s, self.im * s)
    }
}

impl Add for Complex {
    type Output = Complex;
    fn add(self, o: Complex) -> Complex {
        Complex::new(self.re + o.re, self.im + o.im)
    }
}

impl Sub for Complex {
    type Output = Complex;
    fn sub(self, o: Complex) -> Complex {
        Complex::new(self.re - o.re, self.im - o.im)
    }
}

impl Mul for Complex {
    type Output = Complex;
    fn mul(self, o: Complex) -> Complex {
        Complex::new(
            self.re * o.re - self.im * o.im,
            self.re * o.im + self.im * o.re,
        )
    }
}

#[derive(Debug)]
enum Algorithm {
    Radix2 {
        twiddles: Vec<Complex>,
        bitrev: Vec<usize>,
    },
    Bluestein {
        chirp: Vec<Complex>,
        kernel_spectrum: Vec<Complex>,
        inner: Arc<FftPlan>,
    },
}

/// Precomputed forward/inverse transform of a fixed length.
#[derive(Debug)]
pub struct FftPlan {
    len: usize,
    algorithm: Algorithm,
}

impl FftPlan {
    pub fn new(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(GmaError::contract("FftPlan::new", "length must be positive"));
        }
        let algorithm = if len.is_power_of_two() {
            radix2_tables(len)
        } else {
            bluestein_tables(len)?
        };
        Ok(FftPlan { len, algorithm })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// In-place forward DFT, `X_k = sum_n x_n exp(-2 pi i n k / N)`.
    pub fn forward(&self, buf: &mut [Complex]) {
        assert_eq!(buf.len(), self.len, "buffer length does not match plan");
        match &self.algorithm {
            Algorithm::Radix2 { twiddles, bitrev } => radix2(buf, twiddles, bitrev),
            Algorithm::Bluestein {
                chirp,
                kernel_spectrum,
                inner,
            } => {
                let m = inner.len();
                let mut work = vec![Complex::ZERO; m];
                for (w, (&x, &c)) in work.iter_mut().zip(buf.iter().zip(chirp)) {
                    *w = x * c;
                }
                inner.forward(&mut work);
                for (w, &k) in work.iter_mut().zip(kernel_spectrum) {
                    *w = *w * k;
                }
                inner.inverse(&mut work);
                for (x, (&w, &c)) in buf.iter_mut().zip(work.iter().zip(chirp)) {
                    *x = w * c;
                }
            }
        }
    }

    /// In-place inverse DFT including the `1/N` normalisation.
    pub fn inverse(&self, buf: &mut [Complex]) {
        for v in buf.iter_mut() {
            *v = v.conj();
        }
        self.forward(buf);
        let s = 1.0 / self.len as f64;
        for v in buf.iter_mut() {
            *v = v.conj().scale(s);
        }
    }
}

fn radix2_tables(n: usize) -> Algorithm {
    let twiddles = (0..n / 2)
        .map(|k| Complex::cis(-2.0 * PI * k as f64 / n as f64))
        .collect();
    let bits = n.trailing_zeros();
    let bitrev = (0..n)
        .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
        .collect();
    Algorithm::Radix2 { twiddles, bitrev }
}

fn bluestein_tables(n: usize) -> Result<Algorithm> {
    // n^2 is reduced mod 2n so the chirp angle stays small.
    let chirp: Vec<Complex> = (0..n)
        .map(|k| {
            let k2 = ((k as u128 * k as u128) % (2 * n as u128)) as f64;
            Complex::cis(-PI * k2 / n as f64)
        })
        .collect();
    let m = (2 * n - 1).next_power_of_two();
    let inner = plan(m)?;
    let mut kernel = vec![Complex::ZERO; m];
    kernel[0] = chirp[0].conj();
    for k in 1..n {
        kernel[k] = chirp[k].conj();
        kernel[m - k] = chirp[k].conj();
    }
    inner.forward(&mut kernel);
    Ok(Algorithm::Bluestein {
        chirp,
        kernel_spectrum: kernel,
        inner,
    })
}

fn radix2(buf: &mut [Complex], twiddles: &[Complex], bitrev: &[usize]) {
    let n = buf.len();
    for i in 0..n {
        let j = bitrev[i];
        if i < j {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = n / len;
        for start in (0..n).step_by(len) {
            for j in 0..half {
                let w = twiddles[j * step];
                let u = buf[start + j];
                let v = buf[start + j + half] * w;
                buf[start + j] = u + v;
                buf[start + j + half] = u - v;
            }
        }
        len <<= 1;
    }
}

/// Returns the cached plan for `len`, building it on first use.
pub fn plan(len: usize) -> Result<Arc<FftPlan>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<FftPlan>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(p) = cache.lock().expect("fft cache poisoned").get(&len) {
        return Ok(Arc::clone(p));
    }
    // Built outside the lock: Bluestein plans recursively request their inner plan.
    let built = Arc::new(FftPlan::new(len)?);
    let mut guard = cache.lock().expect("fft cache poisoned");
    Ok(Arc::clone(guard.entry(len).or_insert(built)))
}

fn to_complex(x: &[f64]) -> Vec<Complex> {
    x.iter().map(|&re| Complex::new(re, 0.0)).collect()
}

/// Circular convolution `out[k] = sum_i a[i] b[(k - i) mod D]` through the FFT.
pub fn circular_convolve(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    spectral_product(a, b, false)
}

/// Circular cross-correlation `out[k] = sum_i g[i] b[(i - k) mod D]`,
/// i.e. the adjoint of convolution by `b`.
pub fn circular_correlate(g: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    spectral_product(g, b, true)
}

fn spectral_product(a: &[f64], b: &[f64], conj_b: bool) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(GmaError::shape("circular_convolve", &[a.len()], &[b.len()]));
    }
    if a.is_empty() {
        return Err(GmaError::contract("circular_convolve", "length must be >= 1"));
    }
    let p = plan(a.len())?;
    let mut fa = to_complex(a);
    let mut fb = to_complex(b);
    p.forward(&mut fa);
    p.forward(&mut fb);
    for (x, &y) in fa.iter_mut().zip(&fb) {
        *x = *x * if conj_b { y.conj() } else { y };
    }
    p.inverse(&mut fa);
    Ok(fa.into_iter().map(|c| c.re).collect())
}
