//! Image and video metrics on packed RGB bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::synthgen::{xdog, VideoClip, XdogParams, PALETTE};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

fn same_len(op: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Input(format!("{op}: {a} vs {b} values")));
    }
    if a == 0 {
        return Err(Error::Input(format!("{op}: empty input")));
    }
    Ok(())
}

pub fn to_unit(bytes: &[u8]) -> Vec<f64> {
    bytes.iter().map(|&b| b as f64 / 255.0).collect()
}

/// `10·log10(1 / MSE)` for values on `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(x: &[f64], y: &[f64]) -> Result<f64> {
    same_len("psnr", x.len(), y.len())?;
    let mse = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

pub fn psnr_bytes(x: &[u8], y: &[u8]) -> Result<f64> {
    psnr(&to_unit(x), &to_unit(y))
}

pub(crate) fn ssim_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum::<f64>().powi(2);
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &k {
        for b in &k {
            w.push(a * b / s);
        }
    }
    w
}

/// Mean SSIM of two `[0, 1]` grayscale images over all window positions
/// that fit inside the image.
pub fn ssim(x: &[f64], y: &[f64], height: usize, width: usize) -> Result<f64> {
    same_len("ssim", x.len(), y.len())?;
    if x.len() != height * width {
        return Err(Error::Input(format!("ssim: {} values for {height}x{width}", x.len())));
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::Input(format!(
            "ssim: {height}x{width} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let win = ssim_window();
    let (nh, nw) = (height - SSIM_WINDOW + 1, width - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for i in 0..nh {
        for j in 0..nw {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..SSIM_WINDOW {
                for v in 0..SSIM_WINDOW {
                    let w = win[u * SSIM_WINDOW + v];
                    let p = (i + u) * width + j + v;
                    let (a, b) = (x[p], y[p]);
                    mx += w * a;
                    my += w * b;
                    xx += w * a * a;
                    yy += w * b * b;
                    xy += w * a * b;
                }
            }
            let vx = xx - mx * mx;
            let vy = yy - my * my;
            let cov = xy - mx * my;
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
        }
    }
    Ok(total / (nh * nw) as f64)
}

/// Mean per-frame SSIM of the BT.601 luma of two RGB clips.
pub fn ssim_clip(x: &[u8], y: &[u8], frames: usize, height: usize, width: usize) -> Result<f64> {
    same_len("ssim", x.len(), y.len())?;
    let n = height * width * 3;
    if frames == 0 || x.len() != frames * n {
        return Err(Error::Input(format!(
            "ssim: {} bytes for {frames} frames of {height}x{width}",
            x.len()
        )));
    }
    let mut s = 0.0;
    for t in 0..frames {
        let r = t * n..(t + 1) * n;
        s += ssim(&xdog::luminance(&x[r.clone()]), &xdog::luminance(&y[r]), height, width)?;
    }
    Ok(s / frames as f64)
}

/// RMSE between sketches re-extracted from `generated` and the input
/// sketches, both scaled to `[0, 1]`, over the selected frames.
pub fn sketch_alignment_frames(
    generated: &[u8],
    sketches: &[u8],
    frames: usize,
    height: usize,
    width: usize,
    params: &XdogParams,
    which: std::ops::Range<usize>,
) -> Result<f64> {
    let n = height * width;
    if sketches.len() != frames * n {
        return Err(Error::Input(format!(
            "sketch alignment: {} sketch bytes for {frames} frames of {height}x{width}",
            sketches.len()
        )));
    }
    if generated.len() != frames * n * 3 {
        return Err(Error::Input(format!(
            "sketch alignment: {} generated bytes for {frames} frames of {height}x{width}",
            generated.len()
        )));
    }
    if which.is_empty() || which.end > frames {
        return Err(Error::Input(format!("sketch alignment: frames {which:?} of {frames}")));
    }
    let mut sq = 0.0;
    for t in which.clone() {
        let gen = xdog::sketch_frame(&generated[t * n * 3..(t + 1) * n * 3], height, width, params)?;
        for (a, b) in gen.iter().zip(&sketches[t * n..(t + 1) * n]) {
            let d = (*a as f64 - *b as f64) / 255.0;
            sq += d * d;
        }
    }
    Ok((sq / (which.len() * n) as f64).sqrt())
}

pub fn sketch_alignment(
    generated: &[u8],
    sketches: &[u8],
    frames: usize,
    height: usize,
    width: usize,
    params: &XdogParams,
) -> Result<f64> {
    sketch_alignment_frames(generated, sketches, frames, height, width, params, 0..frames)
}

/// Stacks pixel row `row` of every frame into a `T × W × 3` image.
pub fn temporal_profile(rgb: &[u8], frames: usize, height: usize, width: usize, row: usize) -> Result<Vec<u8>> {
    if row >= height {
        return Err(Error::Input(format!("profile row {row} outside {height} rows")));
    }
    let n = height * width * 3;
    if rgb.len() != frames * n {
        return Err(Error::Input(format!(
            "profile: {} bytes for {frames} frames of {height}x{width}",
            rgb.len()
        )));
    }
    let mut out = Vec::with_capacity(frames * width * 3);
    for t in 0..frames {
        let at = t * n + row * width * 3;
        out.extend(&rgb[at..at + width * 3]);
    }
    Ok(out)
}

/// Binary portable pixmap (`P6`) bytes.
pub fn ppm_bytes(rgb: &[u8], height: usize, width: usize) -> Result<Vec<u8>> {
    if rgb.len() != height * width * 3 {
        return Err(Error::Input(format!("ppm: {} bytes for {height}x{width}", rgb.len())));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(rgb);
    Ok(out)
}

pub fn write_ppm(path: &Path, rgb: &[u8], height: usize, width: usize) -> Result<()> {
    write_atomic(path, &ppm_bytes(rgb, height, width)?)
}

/// Parses a binary `P6` pixmap with maxval 255.
pub fn read_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::Format(format!("ppm: {m}"));
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let s = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if s == i {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[s..i]).map_err(|_| bad("header is not text"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("not a binary pixmap"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let data = &bytes[(i + 1).min(bytes.len())..];
    if data.len() != width * height * 3 {
        return Err(bad("pixel data length does not match the header"));
    }
    Ok((height, width, data.to_vec()))
}

/// Mean per-pixel temporal variance (on `[0, 1]`, averaged over channels)
/// of the pixels selected by `mask`; `None` for an empty mask.
pub fn background_variance(rgb: &[u8], frames: usize, height: usize, width: usize, mask: &[bool]) -> Result<Option<f64>> {
    let n = height * width;
    if mask.len() != n || rgb.len() != frames * n * 3 || frames == 0 {
        return Err(Error::Input("background variance: mask or clip size mismatch".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for p in (0..n).filter(|&p| mask[p]) {
        for c in 0..3 {
            let vals: Vec<f64> = (0..frames).map(|t| rgb[(t * n + p) * 3 + c] as f64 / 255.0).collect();
            let m = vals.iter().sum::<f64>() / frames as f64;
            total += vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / frames as f64;
            count += 1;
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// Palette index closest (Euclidean RGB) to `color`.
pub fn nearest_palette(color: [f64; 3]) -> usize {
    let dist = |p: &[u8; 3]| (0..3).map(|c| (p[c] as f64 - color[c]).powi(2)).sum::<f64>();
    (0..PALETTE.len())
        .min_by(|&a, &b| dist(&PALETTE[a]).total_cmp(&dist(&PALETTE[b])))
        .expect("non-empty palette")
}

/// Mean RGB of the pixels selected per frame by `masks`.
pub fn masked_mean(rgb: &[u8], height: usize, width: usize, masks: &[Vec<bool>]) -> Option<[f64; 3]> {
    let n = height * width;
    let mut acc = [0.0; 3];
    let mut count = 0usize;
    for (t, m) in masks.iter().enumerate() {
        for p in (0..n).filter(|&p| m[p]) {
            for c in 0..3 {
                acc[c] += rgb[(t * n + p) * 3 + c] as f64;
            }
            count += 1;
        }
    }
    (count > 0).then(|| acc.map(|v| v / count as f64))
}

/// Full-clip SA of a clip against its own sketches.
pub fn clip_sa(generated: &[u8], clip: &VideoClip, params: &XdogParams) -> Result<f64> {
    sketch_alignment(generated, &clip.sketch, clip.frames, clip.height, clip.width, params)
}

