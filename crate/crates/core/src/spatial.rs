//! Frame-wise spatial features with Scaling-on-Scales (S²) fusion.
//!
//! Every frame is resized to each scale in turn. Scales larger than the
//! encoder's native input are tiled into native-size sub-images whose features
//! are mean-pooled, and the per-scale vectors are concatenated, giving `k·d`
//! features per frame for `k` scales.

use ndarray::{s, Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Mat;
use crate::data::{Frame, Video};
use crate::error::{argument, Result};
use crate::params::{normal, uniform_fan_in};

/// A frozen image encoder: square `input_size` frames in, `embed_dim` features out.
pub trait FrameEncoder {
    fn embed_dim(&self) -> usize;
    fn input_size(&self) -> usize;
    /// Encode one `input_size × input_size × C` frame.
    fn encode(&self, frame: &Frame) -> Array1<f64>;
}

/// Patch embedding followed by `tanh` and mean pooling over patches.
#[derive(Clone, Debug)]
pub struct ToyFrameEncoder {
    input_size: usize,
    patch: usize,
    channels: usize,
    weight: Array2<f64>,
    bias: Array1<f64>,
    pos: Array2<f64>,
}

impl ToyFrameEncoder {
    pub fn new(input_size: usize, patch: usize, channels: usize, embed_dim: usize, seed: u64) -> Result<Self> {
        if patch == 0 || input_size == 0 || !input_size.is_multiple_of(patch) {
            return Err(argument("input_size must be a positive multiple of the patch size"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = patch * patch * channels;
        let num_patches = (input_size / patch).pow(2);
        // Frames live in [0, 1]; a wider init keeps the tanh out of its linear
        // regime so features are not just a linear image statistic.
        let weight = uniform_fan_in(&mut rng, fan_in, embed_dim, fan_in) * 3.0;
        let bias = normal(&mut rng, 1, embed_dim, 0.5).row(0).to_owned();
        let pos = normal(&mut rng, num_patches, embed_dim, 0.5);
        Ok(Self {
            input_size,
            patch,
            channels,
            weight,
            bias,
            pos,
        })
    }
}

impl FrameEncoder for ToyFrameEncoder {
    fn embed_dim(&self) -> usize {
        self.weight.ncols()
    }

    fn input_size(&self) -> usize {
        self.input_size
    }

    fn encode(&self, frame: &Frame) -> Array1<f64> {
        let (h, w, c) = frame.dim();
        assert_eq!((h, w, c), (self.input_size, self.input_size, self.channels), "frame shape");
        let per_side = self.input_size / self.patch;
        let mut patches = Mat::zeros((per_side * per_side, self.patch * self.patch * c));
        for py in 0..per_side {
            for px in 0..per_side {
                let row = py * per_side + px;
                let block = frame.slice(s![
                    py * self.patch..(py + 1) * self.patch,
                    px * self.patch..(px + 1) * self.patch,
                    ..
                ]);
                for (k, v) in block.iter().enumerate() {
                    patches[[row, k]] = *v as f64;
                }
            }
        }
        let mut h = patches.dot(&self.weight) + &self.bias + &self.pos;
        h.mapv_inplace(f64::tanh);
        h.mean_axis(ndarray::Axis(0)).expect("at least one patch")
    }
}

/// Bilinear resize to `size × size` with half-pixel centres and edge clamping.
/// Resizing to the input's own (square) size is the identity.
pub fn resize_bilinear(frame: &Frame, size: usize) -> Frame {
    let (h, w, c) = frame.dim();
    let sy = h as f64 / size as f64;
    let sx = w as f64 / size as f64;
    let coord = |dst: usize, scale: f64, len: usize| -> (usize, usize, f32) {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, (src - i0 as f64) as f32)
    };
    let mut out = Array3::zeros((size, size, c));
    for y in 0..size {
        let (y0, y1, fy) = coord(y, sy, h);
        for x in 0..size {
            let (x0, x1, fx) = coord(x, sx, w);
            for ch in 0..c {
                let top = frame[[y0, x0, ch]] * (1.0 - fx) + frame[[y0, x1, ch]] * fx;
                let bot = frame[[y1, x0, ch]] * (1.0 - fx) + frame[[y1, x1, ch]] * fx;
                out[[y, x, ch]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Split a square frame into `(side/tile)²` non-overlapping tiles, row-major.
pub fn tiles(frame: &Frame, tile: usize) -> Vec<Frame> {
    let side = frame.dim().0;
    let n = side / tile;
    let mut out = Vec::with_capacity(n * n);
    for ty in 0..n {
        for tx in 0..n {
            out.push(
                frame
                    .slice(s![ty * tile..(ty + 1) * tile, tx * tile..(tx + 1) * tile, ..])
                    .to_owned(),
            );
        }
    }
    out
}

fn check_scales(base: usize, scales: &[usize]) -> Result<()> {
    let Some(&first) = scales.first() else {
        return Err(argument("S² needs at least one scale"));
    };
    if first != base {
        return Err(argument(format!(
            "first scale must equal the encoder input size {base}, got {first}"
        )));
    }
    if let Some(bad) = scales.iter().find(|&&sc| sc == 0 || sc % base != 0) {
        return Err(argument(format!(
            "scale {bad} is not a positive multiple of the encoder input size {base}"
        )));
    }
    Ok(())
}

/// Multi-scale encoding of one frame: `k·d` features for `k` scales.
pub fn s2_encode_frame<E: FrameEncoder + ?Sized>(frame: &Frame, encoder: &E, scales: &[usize]) -> Result<Array1<f64>> {
    let base = encoder.input_size();
    check_scales(base, scales)?;
    let d = encoder.embed_dim();
    let mut out = Array1::zeros(d * scales.len());
    for (i, &scale) in scales.iter().enumerate() {
        let resized = resize_bilinear(frame, scale);
        let feat = if scale == base {
            encoder.encode(&resized)
        } else {
            let subs = tiles(&resized, base);
            let mut acc = Array1::zeros(d);
            for sub in &subs {
                acc += &encoder.encode(sub);
            }
            acc / subs.len() as f64
        };
        out.slice_mut(s![i * d..(i + 1) * d]).assign(&feat);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialFeatures {
    /// `T × k·d`, row `i` from frame `i`.
    pub matrix: Mat,
    pub scales: Vec<usize>,
}

pub fn encode_video_spatial<E: FrameEncoder + ?Sized>(video: &Video, encoder: &E, scales: &[usize]) -> Result<SpatialFeatures> {
    check_scales(encoder.input_size(), scales)?;
    let width = encoder.embed_dim() * scales.len();
    let mut matrix = Mat::zeros((video.len(), width));
    for (i, frame) in video.frames().iter().enumerate() {
        matrix.row_mut(i).assign(&s2_encode_frame(frame, encoder, scales)?);
    }
    Ok(SpatialFeatures {
        matrix,
        scales: scales.to_vec(),
    })
}
