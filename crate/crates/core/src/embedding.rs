//! Scene tokens (agent SSM embedding, polyline point-net, type embeddings,
//! pose encoding) and the learnable motion tokens.

use std::f64::consts::PI;

use hamf_tensor::{ParamId, Scalar, Var, MASK_FILL};

use crate::error::{CoreError, Result};
use crate::features::{SceneInput, AGENT_CHANNELS, MAP_CHANNELS};
use crate::model::ModelConfig;
use crate::nn::{Fwd, Linear, ParamBuilder, INIT_STD};
use crate::ssm::MambaBlock;

/// Scale applied to the heading components before the Fourier features, so that
/// orientation and position share one frequency ladder.
const HEADING_SCALE: f64 = 20.0;

#[derive(Clone, Debug)]
pub struct Embedding {
    pub agent_in: Linear,
    pub agent_blocks: Vec<MambaBlock>,
    pub absent: ParamId,
    pub point_mlp: [Linear; 2],
    pub map_out: Linear,
    pub category: ParamId,
    pub lane_type: ParamId,
    pub pe_proj: Linear,
    /// `[K_e, C]`; `None` when the model runs without motion tokens.
    pub motion: Option<ParamId>,
    pub pe_frequencies: usize,
    pub d_model: usize,
}

impl Embedding {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.d_model;
        let agent_in = Linear::new(pb, "embed.agent.in", AGENT_CHANNELS, c, true);
        let agent_blocks =
            (0..cfg.agent_blocks).map(|i| MambaBlock::new(pb, &format!("embed.agent.ssm{i}"), c, &cfg.ssm)).collect();
        let absent = pb.normal("embed.agent.absent", &[1, c], INIT_STD);
        let point_mlp = [
            Linear::new(pb, "embed.map.point0", MAP_CHANNELS, cfg.pointnet_hidden, true),
            Linear::new(pb, "embed.map.point1", cfg.pointnet_hidden, c, true),
        ];
        let map_out = Linear::new(pb, "embed.map.out", c, c, true);
        let category = pb.normal("embed.category", &[4, c], INIT_STD);
        let lane_type = pb.normal("embed.lane_type", &[3, c], INIT_STD);
        let pe_proj = Linear::new(pb, "embed.pe", 8 * cfg.pe_frequencies, c, true);
        let motion = if cfg.uses_motion_tokens() {
            if cfg.motion_tokens < 1 {
                return Err(CoreError::Config("at least one motion token is required".into()));
            }
            Some(pb.normal("embed.motion", &[cfg.motion_tokens, c], INIT_STD))
        } else {
            None
        };
        Ok(Embedding {
            agent_in,
            agent_blocks,
            absent,
            point_mlp,
            map_out,
            category,
            lane_type,
            pe_proj,
            motion,
            pe_frequencies: cfg.pe_frequencies,
            d_model: c,
        })
    }

    /// Agent tokens `[N, C]`: per-step projection, stacked causal SSM blocks over the
    /// history, output at each agent's last valid step. Fully padded agents get the
    /// learned absent embedding.
    pub fn embed_agents<T: Scalar>(&self, f: &mut Fwd<'_, T>, input: &SceneInput) -> Result<Var> {
        let (n, h, c) = (input.n_agents, input.history, self.d_model);
        let x = f.constant_f64(&[n, h, AGENT_CHANNELS], &input.agent_steps)?;
        let mut x = self.agent_in.forward(f, x)?;
        for block in &self.agent_blocks {
            x = block.forward(f, x, Some(&input.agent_step_valid))?;
        }
        let flat = f.tape.reshape(x, &[n * h, c])?;
        let absent = f.p(self.absent);
        let rows = f.tape.concat(&[flat, absent], 0)?;
        let idx: Vec<usize> =
            input.agent_last.iter().enumerate().map(|(i, last)| last.map_or(n * h, |t| i * h + t)).collect();
        Ok(f.tape.gather(rows, &idx)?)
    }

    /// Polyline tokens `[M, C]`: shared point MLP, max-pool over valid points, linear.
    pub fn embed_map<T: Scalar>(&self, f: &mut Fwd<'_, T>, input: &SceneInput) -> Result<Var> {
        let (m, l, c) = (input.n_polylines, input.points_per_polyline, self.d_model);
        if m == 0 {
            return Err(CoreError::Invalid("scene has no map polylines".into()));
        }
        for j in 0..m {
            if !input.map_point_valid[j * l..(j + 1) * l].iter().any(|&v| v) {
                return Err(CoreError::Invalid(format!("polyline {j} has no valid points")));
            }
        }
        let x = f.constant_f64(&[m, l, MAP_CHANNELS], &input.map_points)?;
        let hdn = self.point_mlp[0].forward(f, x)?;
        let hdn = f.tape.relu(hdn)?;
        let feats = self.point_mlp[1].forward(f, hdn)?;
        let masked: Vec<bool> = input.map_point_valid.iter().flat_map(|&v| std::iter::repeat_n(!v, c)).collect();
        let feats = f.tape.mask_fill(feats, &masked, T::from_f64_lossy(MASK_FILL))?;
        let pooled = f.tape.max(feats, 1)?;
        self.map_out.forward(f, pooled)
    }

    /// `S⁰ = concat(X_a, X_m) + type embeddings + PE(reference pose)`.
    pub fn assemble<T: Scalar>(&self, f: &mut Fwd<'_, T>, xa: Var, xm: Var, input: &SceneInput) -> Result<Var> {
        let expect = [input.n_agents, self.d_model];
        if f.tape.shape(xa) != expect || f.tape.shape(xm) != [input.n_polylines, self.d_model] {
            return Err(CoreError::Invalid(format!(
                "token shapes {:?} / {:?} do not match the scene ({} agents, {} polylines, C={})",
                f.tape.shape(xa),
                f.tape.shape(xm),
                input.n_agents,
                input.n_polylines,
                self.d_model
            )));
        }
        let tokens = f.tape.concat(&[xa, xm], 0)?;
        let cat_table = f.p(self.category);
        let cats: Vec<usize> = input.agent_category.iter().map(|c| c.index()).collect();
        let cat = f.tape.gather(cat_table, &cats)?;
        let lane_table = f.p(self.lane_type);
        let lanes: Vec<usize> = input.lane_type.iter().map(|l| l.index()).collect();
        let lane = f.tape.gather(lane_table, &lanes)?;
        let types = f.tape.concat(&[cat, lane], 0)?;
        let tokens = f.tape.add(tokens, types)?;
        let pe = self.pose_encoding(f, &input.token_poses())?;
        Ok(f.tape.add(tokens, pe)?)
    }

    pub fn pose_encoding<T: Scalar>(&self, f: &mut Fwd<'_, T>, poses: &[[f64; 4]]) -> Result<Var> {
        let feats = fourier_features(poses, self.pe_frequencies);
        let x = f.constant_f64(&[poses.len(), 8 * self.pe_frequencies], &feats)?;
        self.pe_proj.forward(f, x)
    }

    pub fn scene_tokens<T: Scalar>(&self, f: &mut Fwd<'_, T>, input: &SceneInput) -> Result<Var> {
        let xa = self.embed_agents(f, input)?;
        let xm = self.embed_map(f, input)?;
        self.assemble(f, xa, xm, input)
    }

    /// Initial motion tokens `F⁰`.
    pub fn motion_tokens<T: Scalar>(&self, f: &mut Fwd<'_, T>) -> Option<Var> {
        self.motion.map(|id| f.p(id))
    }
}

/// Sin/cos features of (x, y, s·cosθ, s·sinθ) at `freqs` geometrically spaced
/// frequencies, wavelengths from 200 m down to 1 m. Row layout per pose:
/// for each input, `freqs` sines then `freqs` cosines.
pub fn fourier_features(poses: &[[f64; 4]], freqs: usize) -> Vec<f64> {
    let ladder: Vec<f64> = (0..freqs)
        .map(|j| {
            let frac = if freqs > 1 { j as f64 / (freqs - 1) as f64 } else { 0.0 };
            2.0 * PI / 200.0 * 200f64.powf(frac)
        })
        .collect();
    let mut out = Vec::with_capacity(poses.len() * 8 * freqs);
    for p in poses {
        let inputs = [p[0], p[1], HEADING_SCALE * p[2], HEADING_SCALE * p[3]];
        for v in inputs {
            out.extend(ladder.iter().map(|w| (w * v).sin()));
            out.extend(ladder.iter().map(|w| (w * v).cos()));
        }
    }
    out
}
