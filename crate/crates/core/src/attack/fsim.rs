//! Feature similarity between two grayscale images.
//!
//! Low-level features drive the score: phase congruency from a small
//! log-Gabor filter bank (2 scales, 4 orientations) acts as both similarity
//! component and per-pixel weight, and Scharr gradient magnitude captures
//! contrast. Identical images score exactly 1, the score is symmetric in its
//! arguments, and it always lies in [0, 1].

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Phase-congruency stabilizer in the similarity ratio.
pub const T1_PC: f64 = 0.85;
/// Gradient stabilizer, scaled for images in [0, 1].
pub const T2_GRAD: f64 = 160.0 / (255.0 * 255.0);

const N_SCALES: usize = 2;
const N_ORIENT: usize = 4;
const MIN_WAVELENGTH: f64 = 3.0;
const SCALE_MULT: f64 = 2.0;
const SIGMA_ONF: f64 = 0.55;
const D_THETA_ON_SIGMA: f64 = 1.2;
const NOISE_K: f64 = 2.0;
const EPS: f64 = 1e-4;

/// Cached FFT plans and filter bank for one image size.
pub struct FsimPlan {
    h: usize,
    w: usize,
    fft_row: Arc<dyn Fft<f64>>,
    fft_col: Arc<dyn Fft<f64>>,
    ifft_row: Arc<dyn Fft<f64>>,
    ifft_col: Arc<dyn Fft<f64>>,
    /// `filters[o][s]` is the frequency-domain log-Gabor at orientation o,
    /// scale s, stored row-major over the full spectrum.
    filters: Vec<Vec<Vec<f64>>>,
}

fn fft_freqs(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            if i < n.div_ceil(2) {
                i as f64 / n as f64
            } else {
                (i as f64 - n as f64) / n as f64
            }
        })
        .collect()
}

impl FsimPlan {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        if h < 4 || w < 4 {
            return Err(Error::InvalidArgument(format!(
                "feature similarity needs at least 4x4 images, got {h}x{w}"
            )));
        }
        let mut planner = FftPlanner::new();
        let fy = fft_freqs(h);
        let fx = fft_freqs(w);
        let theta_sigma = std::f64::consts::PI / N_ORIENT as f64 / D_THETA_ON_SIGMA;
        let log_sigma = SIGMA_ONF.ln();

        let mut radial = vec![vec![0.0; h * w]; N_SCALES];
        let mut spread = vec![vec![0.0; h * w]; N_ORIENT];
        for y in 0..h {
            for x in 0..w {
                let idx = y * w + x;
                let r = fy[y].hypot(fx[x]);
                // Corner frequencies get suppressed so the largest filter
                // stays band-limited.
                let lowpass = 1.0 / (1.0 + (r / 0.45).powi(30));
                let r = if idx == 0 { 1.0 } else { r };
                for (s, rad) in radial.iter_mut().enumerate() {
                    let f0 = 1.0 / (MIN_WAVELENGTH * SCALE_MULT.powi(s as i32));
                    let g = (-((r / f0).ln().powi(2)) / (2.0 * log_sigma * log_sigma)).exp();
                    rad[idx] = if idx == 0 { 0.0 } else { g * lowpass };
                }
                let theta = (-fy[y]).atan2(fx[x]);
                let (sin_t, cos_t) = theta.sin_cos();
                for (o, spr) in spread.iter_mut().enumerate() {
                    let angle = o as f64 * std::f64::consts::PI / N_ORIENT as f64;
                    let ds = sin_t * angle.cos() - cos_t * angle.sin();
                    let dc = cos_t * angle.cos() + sin_t * angle.sin();
                    let dtheta = ds.atan2(dc).abs();
                    spr[idx] = (-dtheta * dtheta / (2.0 * theta_sigma * theta_sigma)).exp();
                }
            }
        }
        let filters = (0..N_ORIENT)
            .map(|o| {
                (0..N_SCALES)
                    .map(|s| {
                        (0..h * w).map(|i| radial[s][i] * spread[o][i]).collect()
                    })
                    .collect()
            })
            .collect();
        Ok(FsimPlan {
            h,
            w,
            fft_row: planner.plan_fft_forward(w),
            fft_col: planner.plan_fft_forward(h),
            ifft_row: planner.plan_fft_inverse(w),
            ifft_col: planner.plan_fft_inverse(h),
            filters,
        })
    }

    fn fft2(&self, buf: &mut [Complex<f64>], inverse: bool) {
        let (row, col) = if inverse {
            (&self.ifft_row, &self.ifft_col)
        } else {
            (&self.fft_row, &self.fft_col)
        };
        row.process(buf);
        let mut t = transpose(buf, self.h, self.w);
        col.process(&mut t);
        let back = transpose(&t, self.w, self.h);
        buf.copy_from_slice(&back);
        if inverse {
            let scale = 1.0 / (self.h * self.w) as f64;
            for v in buf.iter_mut() {
                *v *= scale;
            }
        }
    }

    /// Phase-congruency map of one image, in [0, 1] per pixel.
    fn phase_congruency(&self, img: &[f64]) -> Vec<f64> {
        let n = self.h * self.w;
        let mut spectrum: Vec<Complex<f64>> =
            img.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.fft2(&mut spectrum, false);

        let mut energy_all = vec![0.0; n];
        let mut an_all = vec![0.0; n];
        for bank in &self.filters {
            // Filter responses for every scale at this orientation.
            let eos: Vec<Vec<Complex<f64>>> = bank
                .iter()
                .map(|filt| {
                    let mut buf: Vec<Complex<f64>> =
                        spectrum.iter().zip(filt).map(|(v, &f)| v * f).collect();
                    self.fft2(&mut buf, true);
                    buf
                })
                .collect();
            let mut sum_e = vec![0.0; n];
            let mut sum_o = vec![0.0; n];
            let mut sum_an = vec![0.0; n];
            for eo in &eos {
                for i in 0..n {
                    sum_e[i] += eo[i].re;
                    sum_o[i] += eo[i].im;
                    sum_an[i] += eo[i].norm();
                }
            }
            // Rayleigh-based noise floor estimated from the finest scale.
            let mut amps: Vec<f64> = eos[0].iter().map(|v| v.norm()).collect();
            let tau = median(&mut amps) / 4f64.ln().sqrt();
            let total_tau =
                tau * (1.0 - (1.0 / SCALE_MULT).powi(N_SCALES as i32)) / (1.0 - 1.0 / SCALE_MULT);
            let noise_mean = total_tau * (std::f64::consts::PI / 2.0).sqrt();
            let noise_sigma = noise_mean * (4.0 / std::f64::consts::PI - 1.0).sqrt();
            let threshold = noise_mean + NOISE_K * noise_sigma;

            for i in 0..n {
                let xenergy = sum_e[i].hypot(sum_o[i]) + EPS;
                let mean_e = sum_e[i] / xenergy;
                let mean_o = sum_o[i] / xenergy;
                let mut energy = 0.0;
                for eo in &eos {
                    let (e, o) = (eo[i].re, eo[i].im);
                    energy += e * mean_e + o * mean_o - (e * mean_o - o * mean_e).abs();
                }
                energy_all[i] += (energy - threshold).max(0.0);
                an_all[i] += sum_an[i];
            }
        }
        (0..n).map(|i| energy_all[i] / (an_all[i] + EPS)).collect()
    }

    /// Scharr gradient magnitude with zero padding.
    fn gradient_magnitude(&self, img: &[f64]) -> Vec<f64> {
        let (h, w) = (self.h, self.w);
        let at = |y: isize, x: isize| -> f64 {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                0.0
            } else {
                img[y as usize * w + x as usize]
            }
        };
        let mut out = vec![0.0; h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let gx = (3.0 * (at(y - 1, x - 1) - at(y - 1, x + 1))
                    + 10.0 * (at(y, x - 1) - at(y, x + 1))
                    + 3.0 * (at(y + 1, x - 1) - at(y + 1, x + 1)))
                    / 16.0;
                let gy = (3.0 * (at(y - 1, x - 1) - at(y + 1, x - 1))
                    + 10.0 * (at(y - 1, x) - at(y + 1, x))
                    + 3.0 * (at(y - 1, x + 1) - at(y + 1, x + 1)))
                    / 16.0;
                out[y as usize * w + x as usize] = gx.hypot(gy);
            }
        }
        out
    }

    /// Feature similarity of two images of this plan's size.
    pub fn fsim(&self, a: &Tensor, b: &Tensor) -> Result<f64> {
        let ga = self.to_gray(a)?;
        let gb = self.to_gray(b)?;
        let (pc1, g1) = (self.phase_congruency(&ga), self.gradient_magnitude(&ga));
        let (pc2, g2) = (self.phase_congruency(&gb), self.gradient_magnitude(&gb));
        let mut num = 0.0;
        let mut den = 0.0;
        let mut plain = 0.0;
        for i in 0..ga.len() {
            let s_pc = (2.0 * pc1[i] * pc2[i] + T1_PC) / (pc1[i] * pc1[i] + pc2[i] * pc2[i] + T1_PC);
            let s_g = (2.0 * g1[i] * g2[i] + T2_GRAD) / (g1[i] * g1[i] + g2[i] * g2[i] + T2_GRAD);
            let s = s_pc * s_g;
            let weight = pc1[i].max(pc2[i]);
            num += s * weight;
            den += weight;
            plain += s;
        }
        // Featureless pairs (both images flat) carry no weight anywhere;
        // fall back to the unweighted mean.
        Ok(if den <= 1e-12 { plain / ga.len() as f64 } else { num / den })
    }

    fn to_gray(&self, t: &Tensor) -> Result<Vec<f64>> {
        if !t.is_finite() {
            return Err(Error::NonFinite("feature-similarity input"));
        }
        let gray: Vec<f64> = match t.shape.as_slice() {
            [h, w] if *h == self.h && *w == self.w => t.data.clone(),
            [c, h, w] if *h == self.h && *w == self.w && *c >= 1 => {
                let plane = h * w;
                (0..plane)
                    .map(|i| (0..*c).map(|ch| t.data[ch * plane + i]).sum::<f64>() / *c as f64)
                    .collect()
            }
            _ => {
                return Err(Error::shape(
                    "feature similarity",
                    format!("[{}, {}] or [c, {}, {}]", self.h, self.w, self.h, self.w),
                    format!("{:?}", t.shape),
                ))
            }
        };
        Ok(gray)
    }
}

fn transpose(buf: &[Complex<f64>], h: usize, w: usize) -> Vec<Complex<f64>> {
    let mut out = vec![Complex::new(0.0, 0.0); buf.len()];
    for y in 0..h {
        for x in 0..w {
            out[x * h + y] = buf[y * w + x];
        }
    }
    out
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite amplitudes"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One-shot scoring. Building a [`FsimPlan`] once is cheaper when scoring
/// many pairs of the same size.
pub fn fsim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (h, w) = image_hw(a)?;
    FsimPlan::new(h, w)?.fsim(a, b)
}

fn image_hw(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        [h, w] => Ok((*h, *w)),
        [_, h, w] => Ok((*h, *w)),
        _ => Err(Error::shape("feature similarity", "[h, w] or [c, h, w]", format!("{:?}", t.shape))),
    }
}
