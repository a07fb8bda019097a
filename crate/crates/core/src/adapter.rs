//! The sign adapter: per-stream linear projections, temporal concatenation,
//! a `{K5, P2, K5, P2}` temporal convolution stack and a two-layer connector
//! into the decoder's embedding width.
//!
//! Fused length is `L = T + N`; each pooling halves it, so the output has
//! `M = ⌊⌊L/2⌋/2⌋ = ⌊L/4⌋` rows.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::error::{argument, Result};
use crate::params::{uniform_fan_in, ParamStore};

pub const PREFIX: &str = "adapter.";
pub const KERNEL: usize = 5;
const TCN_BLOCKS: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Width of spatial features, `k·d`.
    pub spatial_dim: usize,
    /// Width of motion features, `d`.
    pub motion_dim: usize,
    pub hidden: usize,
    /// Decoder embedding width `d′`.
    pub out_dim: usize,
}

impl AdapterConfig {
    /// Widths used with CLIP ViT-L/14 (two scales), VideoMAE-L and a
    /// 2048-wide decoder.
    pub fn full_scale() -> Self {
        Self {
            spatial_dim: 2048,
            motion_dim: 1024,
            hidden: 1024,
            out_dim: 2048,
        }
    }

    /// Fresh parameters (all trainable), fan-in scaled uniform.
    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        if self.hidden == 0 || self.out_dim == 0 || self.spatial_dim == 0 || self.motion_dim == 0 {
            return Err(argument("adapter widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = self.hidden;
        let mut p = ParamStore::new();
        let mut lin = |p: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize| {
            p.insert(format!("{PREFIX}{name}.w"), uniform_fan_in(&mut rng, fan_in, fan_out, fan_in), true);
            p.insert(format!("{PREFIX}{name}.b"), uniform_fan_in(&mut rng, 1, fan_out, fan_in), true);
        };
        lin(&mut p, "proj_s", self.spatial_dim, h);
        lin(&mut p, "proj_m", self.motion_dim, h);
        for i in 0..TCN_BLOCKS {
            lin(&mut p, &format!("tcn.{i}"), KERNEL * h, h);
        }
        lin(&mut p, "mlp.0", h, self.out_dim);
        lin(&mut p, "mlp.1", self.out_dim, self.out_dim);
        Ok(p)
    }
}

/// `M = ⌊(T + N)/4⌋`.
pub fn output_len(num_frames: usize, num_clips: usize) -> usize {
    (num_frames + num_clips) / 2 / 2
}

fn pname(s: &str) -> String {
    format!("{PREFIX}{s}")
}

fn check_width(store: &ParamStore, name: &str, cols: usize) -> Result<()> {
    let w = &store
        .get(&pname(name))
        .ok_or_else(|| argument(format!("missing adapter parameter {name}")))?
        .value;
    if w.nrows() != cols {
        return Err(argument(format!(
            "{name} expects {} input columns, got {cols}",
            w.nrows()
        )));
    }
    Ok(())
}

/// Project both streams to the hidden width and concatenate in time
/// (spatial rows first, then motion rows).
pub fn fuse(g: &mut Graph, store: &ParamStore, spatial: Var, motion: Var) -> Result<Var> {
    let (ts, cs) = g.value(spatial).dim();
    let (tm, cm) = g.value(motion).dim();
    if ts == 0 || tm == 0 {
        return Err(argument("fuse needs nonempty spatial and motion features"));
    }
    check_width(store, "proj_s.w", cs)?;
    check_width(store, "proj_m.w", cm)?;
    let (ws, bs) = (g.param(store, &pname("proj_s.w")), g.param(store, &pname("proj_s.b")));
    let (wm, bm) = (g.param(store, &pname("proj_m.w")), g.param(store, &pname("proj_m.b")));
    let s = g.linear(spatial, ws, Some(bs));
    let m = g.linear(motion, wm, Some(bm));
    Ok(g.concat_rows(&[s, m]))
}

/// Two blocks of same-length kernel-5 convolution, ReLU and max-pool(2, 2).
pub fn temporal_conv(g: &mut Graph, store: &ParamStore, fused: Var) -> Result<Var> {
    let len = g.value(fused).nrows();
    if len < 4 {
        return Err(argument(format!(
            "temporal convolution needs at least 4 positions, got {len}; pad the input upstream"
        )));
    }
    let mut x = fused;
    for i in 0..TCN_BLOCKS {
        let w = g.param(store, &pname(&format!("tcn.{i}.w")));
        let b = g.param(store, &pname(&format!("tcn.{i}.b")));
        let cols = g.im2col(x, KERNEL);
        let y = g.linear(cols, w, Some(b));
        let y = g.relu(y);
        x = g.max_pool2(y);
    }
    Ok(x)
}

/// Row-wise `Linear → GELU → Linear` into the decoder embedding width.
pub fn connect(g: &mut Graph, store: &ParamStore, seq: Var) -> Result<Var> {
    if g.value(seq).nrows() == 0 {
        return Err(argument("connector input has no rows"));
    }
    let (w0, b0) = (g.param(store, &pname("mlp.0.w")), g.param(store, &pname("mlp.0.b")));
    let (w1, b1) = (g.param(store, &pname("mlp.1.w")), g.param(store, &pname("mlp.1.b")));
    let h = g.linear(seq, w0, Some(b0));
    let h = g.gelu(h);
    Ok(g.linear(h, w1, Some(b1)))
}

/// Full adapter on graph inputs: `connect ∘ temporal_conv ∘ fuse`.
pub fn forward(g: &mut Graph, store: &ParamStore, spatial: Var, motion: Var) -> Result<Var> {
    let fused = fuse(g, store, spatial, motion)?;
    let seq = temporal_conv(g, store, fused)?;
    connect(g, store, seq)
}

/// `Z_sm` for one sample, `M × d′`.
#[derive(Clone, Debug, PartialEq)]
pub struct SignFeature(pub Mat);

/// Evaluate the adapter outside of training.
pub fn apply(store: &ParamStore, spatial: &Mat, motion: &Mat) -> Result<SignFeature> {
    let mut g = Graph::new();
    let s = g.constant(spatial.clone());
    let m = g.constant(motion.clone());
    let out = forward(&mut g, store, s, m)?;
    Ok(SignFeature(g.value(out).clone()))
}
