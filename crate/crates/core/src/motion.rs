//! Sliding-window clip segmentation and clip-wise motion features.

use ndarray::{s, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Mat;
use crate::data::{Frame, Video};
use crate::error::{argument, Error, Result};
use crate::params::{normal, uniform_fan_in};

/// Half-open frame range `[start, end)` of one clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClipWindow {
    pub start: usize,
    pub end: usize,
}

fn check_window(num_frames: usize, window: usize, stride: usize) -> Result<()> {
    if window == 0 {
        return Err(argument("window size must be at least 1"));
    }
    if stride == 0 {
        return Err(argument("stride must be at least 1"));
    }
    if stride > window {
        return Err(argument(format!(
            "stride {stride} exceeds window {window}; clips would skip frames"
        )));
    }
    if num_frames == 0 {
        return Err(argument("video has no frames"));
    }
    Ok(())
}

/// `N = ⌊(T′ − w)/s⌋ + 1` with `T′ = max(T, w)`.
pub fn num_segments(num_frames: usize, window: usize, stride: usize) -> Result<usize> {
    check_window(num_frames, window, stride)?;
    let padded = num_frames.max(window);
    Ok((padded - window) / stride + 1)
}

/// Windows `[i·s, i·s + w)` for `i < N`. Videos shorter than `w` are treated
/// as right-padded with their final frame; tail frames past the last full
/// window are dropped.
pub fn segment_clips(num_frames: usize, window: usize, stride: usize) -> Result<Vec<ClipWindow>> {
    let n = num_segments(num_frames, window, stride)?;
    let padded = num_frames.max(window);
    let covered = (n - 1) * stride + window;
    if covered < padded {
        log::warn!(
            "sliding window drops {} tail frame(s) of {num_frames} (w={window}, s={stride})",
            padded - covered
        );
    }
    Ok((0..n)
        .map(|i| ClipWindow {
            start: i * stride,
            end: i * stride + window,
        })
        .collect())
}

/// A frozen video encoder over fixed-length clips.
pub trait ClipEncoder {
    fn embed_dim(&self) -> usize;
    fn clip_len(&self) -> usize;
    fn encode(&self, clip: &[&Frame]) -> Array1<f64>;
}

/// Frame-difference statistics followed by a small temporal network, so the
/// output is driven by how the picture changes rather than what it shows.
#[derive(Clone, Debug)]
pub struct ToyClipEncoder {
    clip_len: usize,
    grid: usize,
    step_proj: Array2<f64>,
    step_bias: Array1<f64>,
    out_proj: Array2<f64>,
    out_bias: Array1<f64>,
}

const DIFF_GAIN: f64 = 10.0;

impl ToyClipEncoder {
    pub fn new(clip_len: usize, grid: usize, channels: usize, embed_dim: usize, seed: u64) -> Result<Self> {
        if clip_len < 2 {
            return Err(argument("clip length must be at least 2 to see motion"));
        }
        if grid == 0 {
            return Err(argument("grid must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feat = grid * grid * channels;
        let hidden = embed_dim;
        Ok(Self {
            clip_len,
            grid,
            step_proj: uniform_fan_in(&mut rng, feat, hidden, feat) * 2.0,
            step_bias: normal(&mut rng, 1, hidden, 0.1).row(0).to_owned(),
            out_proj: uniform_fan_in(&mut rng, 2 * hidden, embed_dim, 2 * hidden) * 2.0,
            out_bias: normal(&mut rng, 1, embed_dim, 0.1).row(0).to_owned(),
        })
    }

    fn pooled(&self, frame: &Frame) -> Array1<f64> {
        let (h, w, c) = frame.dim();
        let g = self.grid;
        let mut out = Array1::zeros(g * g * c);
        for gy in 0..g {
            let (y0, y1) = (gy * h / g, ((gy + 1) * h / g).max(gy * h / g + 1).min(h));
            for gx in 0..g {
                let (x0, x1) = (gx * w / g, ((gx + 1) * w / g).max(gx * w / g + 1).min(w));
                let cell = frame.slice(s![y0..y1, x0..x1, ..]);
                let area = ((y1 - y0) * (x1 - x0)) as f64;
                for ch in 0..c {
                    let sum: f64 = cell.slice(s![.., .., ch]).iter().map(|&v| v as f64).sum();
                    out[(gy * g + gx) * c + ch] = sum / area;
                }
            }
        }
        out
    }
}

impl ClipEncoder for ToyClipEncoder {
    fn embed_dim(&self) -> usize {
        self.out_proj.ncols()
    }

    fn clip_len(&self) -> usize {
        self.clip_len
    }

    fn encode(&self, clip: &[&Frame]) -> Array1<f64> {
        assert_eq!(clip.len(), self.clip_len, "clip length");
        let pooled: Vec<Array1<f64>> = clip.iter().map(|f| self.pooled(f)).collect();
        let steps = self.clip_len - 1;
        let hidden = self.step_proj.ncols();
        let centre = (steps as f64 - 1.0) / 2.0;
        let mut mean = Array1::<f64>::zeros(hidden);
        let mut trend = Array1::<f64>::zeros(hidden);
        for t in 0..steps {
            let diff = (&pooled[t + 1] - &pooled[t]) * DIFF_GAIN;
            let e = (diff.dot(&self.step_proj) + &self.step_bias).mapv(f64::tanh);
            let wt = if centre > 0.0 { (t as f64 - centre) / centre } else { 0.0 };
            mean += &e;
            trend += &(&e * wt);
        }
        mean /= steps as f64;
        trend /= steps as f64;
        let mut joined = Array1::zeros(2 * hidden);
        joined.slice_mut(s![..hidden]).assign(&mean);
        joined.slice_mut(s![hidden..]).assign(&trend);
        (joined.dot(&self.out_proj) + &self.out_bias).mapv(f64::tanh)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionFeatures {
    /// `N × d`, row `i` from `windows[i]`.
    pub matrix: Mat,
    pub windows: Vec<ClipWindow>,
}

pub fn encode_clips<E: ClipEncoder + ?Sized>(video: &Video, windows: &[ClipWindow], encoder: &E) -> Result<MotionFeatures> {
    let t = video.len();
    let w = encoder.clip_len();
    let padded = t.max(w);
    let mut matrix = Mat::zeros((windows.len(), encoder.embed_dim()));
    for (i, win) in windows.iter().enumerate() {
        if win.end - win.start != w {
            return Err(argument(format!(
                "window {i} spans {} frames, encoder expects {w}",
                win.end - win.start
            )));
        }
        if win.end > padded {
            return Err(Error::Contract(format!(
                "window [{}, {}) exceeds padded length {padded}",
                win.start, win.end
            )));
        }
        let clip: Vec<&Frame> = (win.start..win.end).map(|f| video.frame(f.min(t - 1))).collect();
        matrix.row_mut(i).assign(&encoder.encode(&clip));
    }
    Ok(MotionFeatures {
        matrix,
        windows: windows.to_vec(),
    })
}

/// Segment and encode in one call.
pub fn encode_video_motion<E: ClipEncoder + ?Sized>(video: &Video, encoder: &E, stride: usize) -> Result<MotionFeatures> {
    let windows = segment_clips(video.len(), encoder.clip_len(), stride)?;
    encode_clips(video, &windows, encoder)
}
