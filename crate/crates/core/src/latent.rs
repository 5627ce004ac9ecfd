//! Lossless space-to-depth latentizer.
//!
//! A `P×P` patch of a `C`-channel frame becomes one latent cell of `C·P²`
//! channels, ordered row-major within the patch with channels fastest:
//! latent channel `(py·P + px)·C + ch` holds pixel `(P·i + py, P·j + px)`,
//! channel `ch`. Bytes map to `[−1, 1]` by `x / 127.5 − 1`.

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Where a latent came from, needed to decode it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub patch: usize,
    pub source_channels: usize,
}

/// A `T × h × w × c` latent volume.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub frames: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
    pub provenance: Provenance,
}

impl LatentGrid {
    pub fn zeros_like(&self) -> Self {
        LatentGrid {
            data: vec![0.0; self.data.len()],
            ..self.clone()
        }
    }

    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        if data.len() != self.data.len() {
            return Err(Error::shape(
                "latent",
                format!("{} values for a grid of {}", data.len(), self.data.len()),
            ));
        }
        Ok(LatentGrid {
            data,
            ..self.clone()
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.frames, self.h, self.w, self.c]
    }

    /// Number of cells (`T·h·w`), i.e. vision tokens.
    pub fn cells(&self) -> usize {
        self.frames * self.h * self.w
    }

    pub fn frame_len(&self) -> usize {
        self.h * self.w * self.c
    }

    /// The single-frame grid holding frame `t`.
    pub fn frame(&self, t: usize) -> Result<Self> {
        if t >= self.frames {
            return Err(Error::Input(format!("frame {t} of {}", self.frames)));
        }
        let n = self.frame_len();
        Ok(LatentGrid {
            frames: 1,
            data: self.data[t * n..(t + 1) * n].to_vec(),
            ..self.clone()
        })
    }

    /// The grid as a `[cells, c]` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[self.cells(), self.c], self.data.clone()).expect("grid dims")
    }
}

pub fn byte_to_unit(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

pub fn unit_to_byte(v: f32) -> u8 {
    ((v as f64 + 1.0) * 127.5 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Rearranges `T × H × W × C` bytes into a latent grid with patch size `P`.
pub fn patchify(
    bytes: &[u8],
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    patch: usize,
) -> Result<LatentGrid> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::Input(format!(
            "{height}x{width} frames are not divisible into {patch}x{patch} patches"
        )));
    }
    if bytes.len() != frames * height * width * channels {
        return Err(Error::Input(format!(
            "{} bytes for {frames}x{height}x{width}x{channels}",
            bytes.len()
        )));
    }
    let (h, w) = (height / patch, width / patch);
    let c = channels * patch * patch;
    let mut data = Vec::with_capacity(bytes.len());
    for t in 0..frames {
        for i in 0..h {
            for j in 0..w {
                for py in 0..patch {
                    for px in 0..patch {
                        let y = i * patch + py;
                        let x = j * patch + px;
                        let at = ((t * height + y) * width + x) * channels;
                        data.extend(bytes[at..at + channels].iter().map(|&b| byte_to_unit(b)));
                    }
                }
            }
        }
    }
    Ok(LatentGrid {
        frames,
        h,
        w,
        c,
        data,
        provenance: Provenance {
            patch,
            source_channels: channels,
        },
    })
}

/// Inverse of [`patchify`], rounding half up and clamping to `[0, 255]`.
pub fn unpatchify(grid: &LatentGrid) -> Result<Vec<u8>> {
    let Provenance {
        patch,
        source_channels: ch,
    } = grid.provenance;
    if patch == 0 || ch * patch * patch != grid.c {
        return Err(Error::Input(format!(
            "latent of {} channels does not come from {ch}-channel {patch}x{patch} patches",
            grid.c
        )));
    }
    if grid.data.len() != grid.cells() * grid.c {
        return Err(Error::shape("unpatchify", format!("{} values", grid.data.len())));
    }
    let (height, width) = (grid.h * patch, grid.w * patch);
    let mut out = vec![0u8; grid.frames * height * width * ch];
    let mut src = grid.data.iter();
    for t in 0..grid.frames {
        for i in 0..grid.h {
            for j in 0..grid.w {
                for py in 0..patch {
                    for px in 0..patch {
                        let at = ((t * height + i * patch + py) * width + j * patch + px) * ch;
                        for o in &mut out[at..at + ch] {
                            *o = unit_to_byte(*src.next().unwrap());
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{gen_clip, GenConfig};
    use proptest::prelude::*;

    #[test]
    fn default_frame_shape() {
        let g = patchify(&vec![7u8; 32 * 32 * 3], 1, 32, 32, 3, 4).unwrap();
        assert_eq!(g.shape(), [1, 8, 8, 48]);
    }

    #[test]
    fn element_order_within_a_patch() {
        // pixel (y, x) channel ch holds 32y + 8x + ch
        let mut img = vec![0u8; 4 * 4 * 2];
        for y in 0..4 {
            for x in 0..4 {
                for ch in 0..2 {
                    img[(y * 4 + x) * 2 + ch] = (y * 32 + x * 8 + ch) as u8;
                }
            }
        }
        let g = patchify(&img, 1, 4, 4, 2, 2).unwrap();
        assert_eq!(g.shape(), [1, 2, 2, 8]);
        // hand-enumerated cell (1, 0): rows 2..4, cols 0..2
        let cell: Vec<u8> = g.data[2 * 8..3 * 8].iter().map(|&v| unit_to_byte(v)).collect();
        assert_eq!(cell, [64, 65, 72, 73, 96, 97, 104, 105]);
        let cell: Vec<u8> = g.data[8..16].iter().map(|&v| unit_to_byte(v)).collect();
        assert_eq!(cell, [16, 17, 24, 25, 48, 49, 56, 57]);
    }

    #[test]
    fn decode_of_special_values() {
        let g = patchify(&vec![0u8; 2 * 16 * 16 * 3], 2, 16, 16, 3, 4).unwrap();
        let zero = g.zeros_like();
        assert!(unpatchify(&zero).unwrap().iter().all(|&b| b == 128));
        let two = g.with_data(vec![2.0; g.data.len()]).unwrap();
        assert!(unpatchify(&two).unwrap().iter().all(|&b| b == 255));
        let low = g.with_data(vec![-3.0; g.data.len()]).unwrap();
        assert!(unpatchify(&low).unwrap().iter().all(|&b| b == 0));
    }

    #[test]
    fn errors() {
        assert!(patchify(&[0u8; 18 * 18], 1, 18, 18, 1, 4).is_err());
        let mut g = patchify(&[0u8; 16 * 16], 1, 16, 16, 1, 4).unwrap();
        g.provenance.source_channels = 3;
        assert!(unpatchify(&g).is_err());
    }

    #[test]
    fn clips_roundtrip_bitwise() {
        let cfg = GenConfig::default();
        for seed in 0..100 {
            let c = gen_clip(seed, &cfg).unwrap().clip;
            let g = patchify(&c.rgb, c.frames, c.height, c.width, 3, 4).unwrap();
            assert!(g.data.iter().all(|v| (-1.0..=1.0).contains(v)));
            assert_eq!(unpatchify(&g).unwrap(), c.rgb);
            let s = patchify(&c.sketch, c.frames, c.height, c.width, 1, 4).unwrap();
            assert_eq!(unpatchify(&s).unwrap(), c.sketch);
        }
    }

    proptest! {
        #[test]
        fn every_byte_roundtrips(bytes in proptest::collection::vec(any::<u8>(), 2 * 8 * 8 * 3)) {
            let g = patchify(&bytes, 2, 8, 8, 3, 2).unwrap();
            prop_assert_eq!(unpatchify(&g).unwrap(), bytes);
        }
    }
}
