//! Sequence decoding of motion tokens and the trajectory / probability / auxiliary heads.

use std::fmt;
use std::str::FromStr;

use hamf_tensor::{ParamId, Scalar, Var};
use serde::{Deserialize, Serialize};

use crate::encoder::AttnBlock;
use crate::error::{CoreError, Result};
use crate::nn::{Fwd, Mlp2, ParamBuilder};
use crate::ssm::{BiMambaBlock, MambaBlock, SsmConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    UniMamba,
    BiMamba,
    Attention,
    /// No sequence module between the encoder and the heads.
    None,
}

impl DecoderKind {
    pub const ALL: [DecoderKind; 4] = [Self::UniMamba, Self::BiMamba, Self::Attention, Self::None];

    pub fn name(self) -> &'static str {
        match self {
            Self::UniMamba => "uni_mamba",
            Self::BiMamba => "bi_mamba",
            Self::Attention => "attention",
            Self::None => "none",
        }
    }
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DecoderKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        DecoderKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CoreError::Unknown { kind: "decoder kind", name: s.to_string() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    pub depth: usize,
    /// Hidden width of the two-layer heads.
    pub head_hidden: usize,
    /// Probability head reads the decoded tokens (`true`) or the encoder output.
    pub prob_after_decoder: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { kind: DecoderKind::UniMamba, depth: 1, head_hidden: 128, prob_after_decoder: true }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kind != DecoderKind::None && self.depth < 1 {
            return Err(CoreError::Config(format!("decoder '{}' needs depth ≥ 1", self.kind)));
        }
        if self.head_hidden < 1 {
            return Err(CoreError::Config("head width must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum SeqBlock {
    Uni(MambaBlock),
    Bi(BiMambaBlock),
    Attn(AttnBlock),
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub blocks: Vec<SeqBlock>,
    /// `[K, K_e]` token-axis projection when fewer tokens than modes.
    pub projection: Option<ParamId>,
    pub traj_head: Mlp2,
    pub prob_head: Mlp2,
    pub aux_head: Option<Mlp2>,
    pub modes: usize,
    pub future: usize,
    pub output_scale: f64,
}

/// Shapes the decoder is built for.
#[derive(Clone, Copy, Debug)]
pub struct DecoderDims {
    pub d_model: usize,
    pub tokens: usize,
    pub modes: usize,
    pub future: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub aux: bool,
    pub output_scale: f64,
}

impl Decoder {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        cfg: &DecoderConfig,
        ssm: &SsmConfig,
        dims: DecoderDims,
    ) -> Result<Self> {
        cfg.validate()?;
        if dims.tokens > dims.modes {
            return Err(CoreError::Config(format!(
                "{} motion tokens for {} modes is unsupported",
                dims.tokens, dims.modes
            )));
        }
        if dims.tokens == 0 {
            return Err(CoreError::Config("at least one motion token is required".into()));
        }
        let c = dims.d_model;
        let depth = if cfg.kind == DecoderKind::None { 0 } else { cfg.depth };
        let blocks = (0..depth)
            .map(|i| {
                let name = format!("dec.block{i}");
                match cfg.kind {
                    DecoderKind::UniMamba => SeqBlock::Uni(MambaBlock::new(pb, &name, c, ssm)),
                    DecoderKind::BiMamba => SeqBlock::Bi(BiMambaBlock::new(pb, &name, c, ssm)),
                    DecoderKind::Attention => SeqBlock::Attn(AttnBlock::new(pb, &name, c, dims.heads, dims.ffn_mult)),
                    DecoderKind::None => unreachable!(),
                }
            })
            .collect();
        let projection = (dims.tokens < dims.modes).then(|| {
            // Each mode starts from one token (cyclically) plus small noise.
            let noise = pb.uniform_values(dims.modes * dims.tokens, -0.02, 0.02);
            let w: Vec<f64> = (0..dims.modes * dims.tokens)
                .map(|i| {
                    let (k, e) = (i / dims.tokens, i % dims.tokens);
                    noise[i] + if k % dims.tokens == e { 1.0 } else { 0.0 }
                })
                .collect();
            pb.from_f64("dec.token_proj", &[dims.modes, dims.tokens], &w)
        });
        let h = cfg.head_hidden;
        Ok(Decoder {
            config: cfg.clone(),
            blocks,
            projection,
            traj_head: Mlp2::new(pb, "head.traj", c, h, dims.future * 2),
            prob_head: Mlp2::new(pb, "head.prob", c, h, 1),
            aux_head: dims.aux.then(|| Mlp2::new(pb, "head.aux", c, h, dims.future * 2)),
            modes: dims.modes,
            future: dims.future,
            output_scale: dims.output_scale,
        })
    }

    /// `F' = SeqModule(F_L)` over the token axis in fixed token order.
    pub fn decode_tokens<T: Scalar>(&self, f: &mut Fwd<'_, T>, tokens: Var) -> Result<Var> {
        let mut x = tokens;
        for block in &self.blocks {
            x = match block {
                SeqBlock::Uni(b) => b.forward(f, x, None)?,
                SeqBlock::Bi(b) => b.forward(f, x)?,
                SeqBlock::Attn(b) => {
                    let n = f.tape.shape(x)[0];
                    b.self_forward(f, x, &vec![true; n])?
                }
            };
        }
        Ok(x)
    }

    /// Maps `[K_e, C]` token features to `[K, C]` mode features.
    pub fn project_modes<T: Scalar>(&self, f: &mut Fwd<'_, T>, tokens: Var) -> Result<Var> {
        let n = f.tape.shape(tokens)[0];
        match self.projection {
            Some(w) => {
                let w = f.p(w);
                Ok(f.tape.matmul(w, tokens)?)
            }
            None if n == self.modes => Ok(tokens),
            None => Err(CoreError::Invalid(format!("{n} tokens for {} modes", self.modes))),
        }
    }

    /// `[K, C]` → `[K, T_f, 2]`.
    pub fn trajectories<T: Scalar>(&self, f: &mut Fwd<'_, T>, modes: Var) -> Result<Var> {
        let k = f.tape.shape(modes)[0];
        let y = self.traj_head.forward(f, modes)?;
        let y = f.tape.scale(y, T::from_f64_lossy(self.output_scale))?;
        Ok(f.tape.reshape(y, &[k, self.future, 2])?)
    }

    /// `[K, C]` → unnormalized scores `[K]`.
    pub fn logits<T: Scalar>(&self, f: &mut Fwd<'_, T>, modes: Var) -> Result<Var> {
        let k = f.tape.shape(modes)[0];
        let y = self.prob_head.forward(f, modes)?;
        Ok(f.tape.reshape(y, &[k])?)
    }

    /// Single-mode futures of the given agent tokens, `[N, T_f, 2]`, as offsets
    /// from each agent's last observed position.
    pub fn aux_trajectories<T: Scalar>(&self, f: &mut Fwd<'_, T>, agents: Var) -> Result<Option<Var>> {
        let Some(head) = &self.aux_head else {
            return Ok(None);
        };
        let n = f.tape.shape(agents)[0];
        let y = head.forward(f, agents)?;
        let y = f.tape.scale(y, T::from_f64_lossy(self.output_scale))?;
        Ok(Some(f.tape.reshape(y, &[n, self.future, 2])?))
    }
}
