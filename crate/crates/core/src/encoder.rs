//! Unified encoder: self-attention over motion + scene tokens, cross-attention
//! from motion tokens to the scene, fused by a per-layer sum; plus the ablation
//! variants.

use std::fmt;
use std::str::FromStr;

use hamf_tensor::{ParamId, Scalar, Var, MASK_FILL};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::{Fwd, Linear, Norm, ParamBuilder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    /// Self-attention over concat(F, S), cross-attention F→S, summed every layer.
    Full,
    /// M1: self-attention over the concatenation only.
    SelfOnly,
    /// M2: cross-attention only; the scene is refined by self-attention over S.
    CrossOnly,
    /// M3: both branches, fused once after the last layer.
    NoInteraction,
    /// Mc: cross-attention before self-attention.
    Reversed,
    /// Mp: both branches from the previous layer's tokens, in parallel.
    Parallel,
    /// Mb: scene self-attention only, no motion tokens.
    NoMotionTokens,
}

impl EncoderVariant {
    pub const ALL: [EncoderVariant; 7] = [
        Self::Full,
        Self::SelfOnly,
        Self::CrossOnly,
        Self::NoInteraction,
        Self::Reversed,
        Self::Parallel,
        Self::NoMotionTokens,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::SelfOnly => "self_only",
            Self::CrossOnly => "cross_only",
            Self::NoInteraction => "no_interaction",
            Self::Reversed => "reversed",
            Self::Parallel => "parallel",
            Self::NoMotionTokens => "no_motion_tokens",
        }
    }

    /// Short row label used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Self::Full => "Ours",
            Self::SelfOnly => "M1",
            Self::CrossOnly => "M2",
            Self::NoInteraction => "M3",
            Self::Reversed => "Mc",
            Self::Parallel => "Mp",
            Self::NoMotionTokens => "Mb",
        }
    }
}

impl fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncoderVariant {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        EncoderVariant::ALL
            .into_iter()
            .find(|v| v.name() == lower || v.label().to_ascii_lowercase() == lower)
            .ok_or_else(|| CoreError::Unknown { kind: "encoder variant", name: s.to_string() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward width as a multiple of C.
    pub ffn_mult: usize,
    pub variant: EncoderVariant,
    /// Cross-attention keys/values read the scene tokens after the layer norm
    /// that follows self-attention (`true`) or before it.
    pub cross_kv_post_norm: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { layers: 5, heads: 8, ffn_mult: 4, variant: EncoderVariant::Full, cross_kv_post_norm: true }
    }
}

impl EncoderConfig {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.layers < 1 {
            return Err(CoreError::Config("encoder needs at least one layer".into()));
        }
        if self.heads == 0 || !d_model.is_multiple_of(self.heads) {
            return Err(CoreError::Config(format!("model width {d_model} is not divisible by {} heads", self.heads)));
        }
        if self.ffn_mult == 0 {
            return Err(CoreError::Config("ffn_mult must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Multi-head scaled dot-product attention with key masking.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, d_model: usize, heads: usize) -> Self {
        Attention {
            wq: Linear::new(pb, &format!("{name}.q"), d_model, d_model, true),
            wk: Linear::new(pb, &format!("{name}.k"), d_model, d_model, true),
            wv: Linear::new(pb, &format!("{name}.v"), d_model, d_model, true),
            wo: Linear::new(pb, &format!("{name}.o"), d_model, d_model, true),
            heads,
        }
    }

    /// `q_in: [nq, C]`, `kv_in: [nk, C]`, `key_valid: [nk]`. Returns the output and
    /// the per-head attention weights `[nq, nk]`.
    pub fn forward_with_weights<T: Scalar>(
        &self,
        f: &mut Fwd<'_, T>,
        q_in: Var,
        kv_in: Var,
        key_valid: &[bool],
    ) -> Result<(Var, Vec<Var>)> {
        let nk = f.tape.shape(kv_in)[0];
        if key_valid.len() != nk {
            return Err(CoreError::Invalid(format!("{} key flags for {nk} keys", key_valid.len())));
        }
        if !key_valid.iter().any(|&v| v) {
            return Err(CoreError::Invalid("attention with every key masked".into()));
        }
        let c = self.wq.d_out;
        let dh = c / self.heads;
        let q = self.wq.forward(f, q_in)?;
        let k = self.wk.forward(f, kv_in)?;
        let v = self.wv.forward(f, kv_in)?;
        let masked: Vec<bool> = key_valid.iter().map(|&ok| !ok).collect();
        let any_masked = masked.iter().any(|&m| m);
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (f.tape.slice(q, 1, h * dh, dh)?, f.tape.slice(k, 1, h * dh, dh)?, f.tape.slice(v, 1, h * dh, dh)?)
            };
            let scores = f.tape.matmul_nt(qh, kh)?;
            let mut scores = f.tape.scale(scores, scale)?;
            if any_masked {
                scores = f.tape.mask_fill(scores, &masked, T::from_f64_lossy(MASK_FILL))?;
            }
            let p = f.tape.softmax(scores, 1)?;
            outs.push(f.tape.matmul(p, vh)?);
            weights.push(p);
        }
        let o = if outs.len() == 1 { outs[0] } else { f.tape.concat(&outs, 1)? };
        Ok((self.wo.forward(f, o)?, weights))
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<'_, T>, q_in: Var, kv_in: Var, key_valid: &[bool]) -> Result<Var> {
        Ok(self.forward_with_weights(f, q_in, kv_in, key_valid)?.0)
    }
}

/// Pre-norm transformer sub-block: attention and a SiLU feed-forward.
#[derive(Clone, Debug)]
pub struct AttnBlock {
    pub norm_attn: Norm,
    pub attn: Attention,
    pub norm_ffn: Norm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl AttnBlock {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        d_model: usize,
        heads: usize,
        ffn_mult: usize,
    ) -> Self {
        AttnBlock {
            norm_attn: Norm::new(pb, &format!("{name}.norm_attn"), d_model),
            attn: Attention::new(pb, &format!("{name}.attn"), d_model, heads),
            norm_ffn: Norm::new(pb, &format!("{name}.norm_ffn"), d_model),
            ff1: Linear::new(pb, &format!("{name}.ff1"), d_model, ffn_mult * d_model, true),
            ff2: Linear::new(pb, &format!("{name}.ff2"), ffn_mult * d_model, d_model, true),
        }
    }

    fn ffn<T: Scalar>(&self, f: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let n = self.norm_ffn.forward(f, x)?;
        let h = self.ff1.forward(f, n)?;
        let h = f.tape.silu(h)?;
        self.ff2.forward(f, h)
    }

    /// `x + Attn(LN(x))`, then `+ FFN(LN(·))`.
    pub fn self_forward<T: Scalar>(&self, f: &mut Fwd<'_, T>, x: Var, valid: &[bool]) -> Result<Var> {
        let n = self.norm_attn.forward(f, x)?;
        let a = self.attn.forward(f, n, n, valid)?;
        let x = f.tape.add(x, a)?;
        let d = self.ffn(f, x)?;
        Ok(f.tape.add(x, d)?)
    }

    /// Cross branch output without the query residual: `h + FFN(LN(h))` with
    /// `h = Attn(LN(q), kv)`. The caller decides how it is fused.
    pub fn cross_forward<T: Scalar>(&self, f: &mut Fwd<'_, T>, q: Var, kv: Var, valid: &[bool]) -> Result<Var> {
        let n = self.norm_attn.forward(f, q)?;
        let h = self.attn.forward(f, n, kv, valid)?;
        let d = self.ffn(f, h)?;
        Ok(f.tape.add(h, d)?)
    }

    /// The two output projections (attention and feed-forward); zeroing them makes
    /// the cross branch output exactly zero.
    pub fn output_params(&self) -> Vec<ParamId> {
        let mut ids = self.attn.wo.param_ids();
        ids.extend(self.ff2.param_ids());
        ids
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub self_block: AttnBlock,
    pub cross_block: Option<AttnBlock>,
    /// Layer norm applied to the self-attention output before the split.
    pub norm: Norm,
}

/// Tokens after one layer, with the branch outputs kept for inspection.
#[derive(Clone, Debug)]
pub struct LayerState {
    pub s: Var,
    pub f: Option<Var>,
    pub f_sa: Option<Var>,
    pub f_ca: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub f: Option<Var>,
    pub s: Var,
    pub layers: Vec<LayerState>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub layers: Vec<EncoderLayer>,
    pub d_model: usize,
}

impl Encoder {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &EncoderConfig, d_model: usize) -> Result<Self> {
        cfg.validate(d_model)?;
        let cross = !matches!(cfg.variant, EncoderVariant::SelfOnly | EncoderVariant::NoMotionTokens);
        let layers = (0..cfg.layers)
            .map(|l| EncoderLayer {
                self_block: AttnBlock::new(pb, &format!("enc{l}.self"), d_model, cfg.heads, cfg.ffn_mult),
                cross_block: cross
                    .then(|| AttnBlock::new(pb, &format!("enc{l}.cross"), d_model, cfg.heads, cfg.ffn_mult)),
                norm: Norm::new(pb, &format!("enc{l}.norm"), d_model),
            })
            .collect();
        Ok(Encoder { config: cfg.clone(), layers, d_model })
    }

    /// Runs every layer. `f0: [K_e, C]` (absent for the no-motion-token variant),
    /// `s0: [N_in + M, C]`, `scene_valid` marks real scene tokens.
    pub fn encode<T: Scalar>(
        &self,
        f: &mut Fwd<'_, T>,
        f0: Option<Var>,
        s0: Var,
        scene_valid: &[bool],
    ) -> Result<EncoderOutput> {
        use EncoderVariant as V;
        let variant = self.config.variant;
        if (variant == V::NoMotionTokens) != f0.is_none() {
            return Err(CoreError::Invalid(format!(
                "variant '{variant}' {} motion tokens",
                if f0.is_none() { "requires" } else { "does not take" }
            )));
        }
        let ns = f.tape.shape(s0)[0];
        if scene_valid.len() != ns {
            return Err(CoreError::Invalid(format!("{} validity flags for {ns} scene tokens", scene_valid.len())));
        }
        let ke = f0.map_or(0, |v| f.tape.shape(v)[0]);
        let mut joint_valid = vec![true; ke];
        joint_valid.extend_from_slice(scene_valid);

        let (mut fp, mut sp) = (f0, s0);
        // Cross-branch chain for the fuse-once variant.
        let mut chain = f0;
        let mut states = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let state = match variant {
                V::NoMotionTokens => {
                    let x = layer.self_block.self_forward(f, sp, scene_valid)?;
                    let s = layer.norm.forward(f, x)?;
                    LayerState { s, f: None, f_sa: None, f_ca: None }
                }
                V::CrossOnly => {
                    let fprev = fp.expect("motion tokens");
                    let x = layer.self_block.self_forward(f, sp, scene_valid)?;
                    let s = layer.norm.forward(f, x)?;
                    let kv = if self.config.cross_kv_post_norm { s } else { x };
                    let ca = cross(layer, f, fprev, kv, scene_valid)?;
                    let fl = f.tape.add(fprev, ca)?;
                    LayerState { s, f: Some(fl), f_sa: None, f_ca: Some(ca) }
                }
                V::Full | V::SelfOnly | V::NoInteraction | V::Parallel => {
                    let fprev = fp.expect("motion tokens");
                    let (f_sa, s, s_pre) = self.joint_self(layer, f, fprev, sp, &joint_valid, ke)?;
                    let kv = if self.config.cross_kv_post_norm { s } else { s_pre };
                    match variant {
                        V::SelfOnly => LayerState { s, f: Some(f_sa), f_sa: Some(f_sa), f_ca: None },
                        V::Full | V::Parallel => {
                            let kv = if variant == V::Parallel { sp } else { kv };
                            let ca = cross(layer, f, fprev, kv, scene_valid)?;
                            let fl = f.tape.add(f_sa, ca)?;
                            LayerState { s, f: Some(fl), f_sa: Some(f_sa), f_ca: Some(ca) }
                        }
                        _ => {
                            let g = chain.expect("motion tokens");
                            let ca = cross(layer, f, g, kv, scene_valid)?;
                            chain = Some(f.tape.add(g, ca)?);
                            LayerState { s, f: Some(f_sa), f_sa: Some(f_sa), f_ca: Some(ca) }
                        }
                    }
                }
                V::Reversed => {
                    let fprev = fp.expect("motion tokens");
                    let ca = cross(layer, f, fprev, sp, scene_valid)?;
                    let q = f.tape.add(fprev, ca)?;
                    let (f_sa, s, _) = self.joint_self(layer, f, q, sp, &joint_valid, ke)?;
                    let fl = f.tape.add(f_sa, ca)?;
                    LayerState { s, f: Some(fl), f_sa: Some(f_sa), f_ca: Some(ca) }
                }
            };
            fp = state.f;
            sp = state.s;
            states.push(state);
        }
        if variant == V::NoInteraction {
            // F_L = F_sa^L + Σ_l cross increments.
            let (g, g0) = (chain.expect("chain"), f0.expect("motion tokens"));
            let inc = f.tape.sub(g, g0)?;
            fp = Some(f.tape.add(fp.expect("motion tokens"), inc)?);
        }
        Ok(EncoderOutput { f: fp, s: sp, layers: states })
    }

    /// Self-attention over concat(F, S), layer norm, split. Returns (F_sa, S_l, S before the norm).
    fn joint_self<T: Scalar>(
        &self,
        layer: &EncoderLayer,
        f: &mut Fwd<'_, T>,
        fq: Var,
        s: Var,
        valid: &[bool],
        ke: usize,
    ) -> Result<(Var, Var, Var)> {
        let ns = f.tape.shape(s)[0];
        let x = f.tape.concat(&[fq, s], 0)?;
        let x = layer.self_block.self_forward(f, x, valid)?;
        let xn = layer.norm.forward(f, x)?;
        let parts = f.tape.split(xn, 0, &[ke, ns])?;
        let s_pre = f.tape.slice(x, 0, ke, ns)?;
        Ok((parts[0], parts[1], s_pre))
    }
}

fn cross<T: Scalar>(layer: &EncoderLayer, f: &mut Fwd<'_, T>, q: Var, kv: Var, valid: &[bool]) -> Result<Var> {
    layer.cross_block.as_ref().expect("variant has a cross branch").cross_forward(f, q, kv, valid)
}
