//! Extended difference-of-Gaussians line extraction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sharpness of the soft threshold used when `binary` is off.
const SOFT_PHI: f64 = 10.0;

/// Responses this close to `epsilon` count as reaching it, so a constant
/// image at exactly `epsilon` stays blank despite blur rounding.
const THRESHOLD_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct XdogParams {
    pub sigma: f64,
    pub k: f64,
    pub p: f64,
    pub epsilon: f64,
    pub binary: bool,
}

impl Default for XdogParams {
    fn default() -> Self {
        XdogParams {
            sigma: 1.0,
            k: 1.6,
            p: 20.0,
            epsilon: 0.5,
            binary: true,
        }
    }
}

impl XdogParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !(self.k > 1.0) || !self.p.is_finite() || !self.epsilon.is_finite()
        {
            return Err(Error::Config(format!(
                "xdog needs sigma > 0 and k > 1, got sigma={} k={}",
                self.sigma, self.k
            )));
        }
        Ok(())
    }
}

/// Gaussian taps of radius `ceil(3σ)`, normalized to sum to one.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Mirror index without repeating the edge sample.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    // a single fold suffices while the kernel radius is below n
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i.clamp(0, n - 1) as usize
}

/// Separable Gaussian blur with reflective boundaries.
pub fn gaussian_blur(img: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; img.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (t, &w) in k.iter().enumerate() {
                let xx = reflect(x as isize + t as isize - r, width);
                acc += w * img[y * width + xx];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; img.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (t, &w) in k.iter().enumerate() {
                let yy = reflect(y as isize + t as isize - r, height);
                acc += w * tmp[yy * width + x];
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// The sharpened difference-of-Gaussians response
/// `(1 + p)·G_σ∗L − p·G_{kσ}∗L`.
pub fn dog_response(gray: &[f64], height: usize, width: usize, params: &XdogParams) -> Vec<f64> {
    let g1 = gaussian_blur(gray, height, width, params.sigma);
    let g2 = gaussian_blur(gray, height, width, params.k * params.sigma);
    g1.iter()
        .zip(&g2)
        .map(|(a, b)| (1.0 + params.p) * a - params.p * b)
        .collect()
}

/// Applies the XDoG threshold to the response: lines (0) where it drops
/// below `epsilon`, blank (1) elsewhere.
pub fn threshold(response: &[f64], params: &XdogParams) -> Vec<f64> {
    response
        .iter()
        .map(|&s| {
            if s >= params.epsilon - THRESHOLD_SLACK {
                1.0
            } else if params.binary {
                0.0
            } else {
                (1.0 + (SOFT_PHI * (s - params.epsilon)).tanh()).clamp(0.0, 1.0)
            }
        })
        .collect()
}

/// Line map of a `[0, 1]` grayscale image.
pub fn xdog(gray: &[f64], height: usize, width: usize, params: &XdogParams) -> Result<Vec<f64>> {
    params.validate()?;
    if gray.len() != height * width {
        return Err(Error::Input(format!(
            "xdog: {} pixels for {height}x{width}",
            gray.len()
        )));
    }
    let radius = (3.0 * params.k * params.sigma).ceil() as usize;
    if height <= radius || width <= radius {
        return Err(Error::Input(format!(
            "xdog: {height}x{width} image smaller than kernel radius {radius}"
        )));
    }
    if let Some(i) = gray.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("xdog input pixel {i}")));
    }
    Ok(threshold(&dog_response(gray, height, width, params), params))
}

/// BT.601 luma of packed RGB bytes, scaled to `[0, 1]`.
pub fn luminance(rgb: &[u8]) -> Vec<f64> {
    rgb.chunks(3)
        .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0)
        .collect()
}

/// Sketch bytes (0 = line, 255 = blank) of one RGB frame.
pub fn sketch_frame(rgb: &[u8], height: usize, width: usize, params: &XdogParams) -> Result<Vec<u8>> {
    let lines = xdog(&luminance(rgb), height, width, params)?;
    Ok(lines.iter().map(|&v| (v * 255.0).round() as u8).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct (non-separable) 2-D convolution of the response.
    fn response_2d(img: &[f64], h: usize, w: usize, p: &XdogParams) -> Vec<f64> {
        let blur = |sigma: f64| {
            let k = gaussian_kernel(sigma);
            let r = (k.len() / 2) as isize;
            let mut out = vec![0.0; h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (a, ka) in k.iter().enumerate() {
                        for (b, kb) in k.iter().enumerate() {
                            let yy = reflect(y as isize + a as isize - r, h);
                            let xx = reflect(x as isize + b as isize - r, w);
                            acc += ka * kb * img[yy * w + xx];
                        }
                    }
                    out[y * w + x] = acc;
                }
            }
            out
        };
        let g1 = blur(p.sigma);
        let g2 = blur(p.k * p.sigma);
        g1.iter().zip(&g2).map(|(a, b)| (1.0 + p.p) * a - p.p * b).collect()
    }

    #[test]
    fn kernel_is_normalized() {
        let k = gaussian_kernel(1.0);
        assert_eq!(k.len(), 7);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_image_is_preserved_and_blank() {
        let p = XdogParams::default();
        for c in [0.5, 0.73, 1.0] {
            let img = vec![c; 20 * 24];
            let s = dog_response(&img, 20, 24, &p);
            assert!(s.iter().all(|v| (v - c).abs() < 1e-9));
            assert!(xdog(&img, 20, 24, &p).unwrap().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn step_edge_lines_sit_on_the_edge() {
        let (h, w) = (32, 32);
        let img: Vec<f64> = (0..h * w).map(|i| if i % w < 16 { 0.0 } else { 1.0 }).collect();
        let p = XdogParams::default();
        let oracle = threshold(&response_2d(&img, h, w, &p), &p);
        let got = xdog(&img, h, w, &p).unwrap();
        assert_eq!(got, oracle);
        // The dark half is itself below ε, so the line region is the whole
        // dark side; its boundary must sit within 3 px of the edge.
        for y in 0..h {
            let row = &got[y * w..(y + 1) * w];
            let first_blank = row.iter().position(|&v| v == 1.0).unwrap();
            assert!((13..=19).contains(&first_blank), "row {y}: {first_blank}");
            assert!(row[..first_blank].iter().all(|&v| v == 0.0));
            assert!(row[first_blank..].iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn rejects_non_finite_and_bad_params() {
        let mut img = vec![0.5; 16 * 16];
        img[3] = f64::NAN;
        assert!(xdog(&img, 16, 16, &XdogParams::default()).is_err());
        let bad = XdogParams {
            k: 1.0,
            ..Default::default()
        };
        assert!(xdog(&[0.5; 256], 16, 16, &bad).is_err());
    }
}
