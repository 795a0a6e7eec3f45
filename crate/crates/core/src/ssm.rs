//! Selective state-space blocks: unidirectional (causal) and bidirectional.

use hamf_tensor::{ParamId, Scalar, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::{Fwd, Linear, Norm, ParamBuilder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsmConfig {
    /// State size N per channel.
    pub state: usize,
    /// Inner width factor E (inner width = E·C).
    pub expand: usize,
    pub conv_width: usize,
    /// Rank of the Δ projection; `None` means ceil(C/16).
    pub dt_rank: Option<usize>,
    pub dt_min: f64,
    pub dt_max: f64,
}

impl Default for SsmConfig {
    fn default() -> Self {
        Self { state: 16, expand: 2, conv_width: 4, dt_rank: None, dt_min: 0.001, dt_max: 0.1 }
    }
}

impl SsmConfig {
    pub fn dt_rank_for(&self, d_model: usize) -> usize {
        self.dt_rank.unwrap_or(d_model.div_ceil(16)).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.state == 0 || self.expand == 0 || self.conv_width == 0 {
            return Err(CoreError::Config("ssm state, expand and conv_width must be ≥ 1".into()));
        }
        if !(self.dt_min > 0.0 && self.dt_max >= self.dt_min) {
            return Err(CoreError::Config("ssm requires 0 < dt_min ≤ dt_max".into()));
        }
        Ok(())
    }
}

/// The input-dependent scan path: conv → silu → (Δ, B, C) projections → scan + skip.
#[derive(Clone, Debug)]
pub struct ScanBranch {
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub x_proj: Linear,
    pub dt_proj: Linear,
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub state: usize,
    pub dt_rank: usize,
}

impl ScanBranch {
    fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        d_inner: usize,
        dt_rank: usize,
        cfg: &SsmConfig,
    ) -> Self {
        let k = cfg.conv_width;
        let bound = 1.0 / (k as f64).sqrt();
        let conv = pb.uniform_values(d_inner * k, -bound, bound);
        let conv_w = pb.from_f64(&format!("{name}.conv.w"), &[d_inner, k], &conv);
        let conv_b = pb.zeros(&format!("{name}.conv.b"), &[d_inner]);
        let x_proj = Linear::new(pb, &format!("{name}.x_proj"), d_inner, dt_rank + 2 * cfg.state, false);
        let dt_proj = Linear::new(pb, &format!("{name}.dt_proj"), dt_rank, d_inner, true);
        // Δ bias = softplus⁻¹(dt) with dt log-uniform in [dt_min, dt_max].
        let (lo, hi) = (cfg.dt_min.ln(), cfg.dt_max.ln());
        let dt_bias: Vec<f64> = pb
            .uniform_values(d_inner, 0.0, 1.0)
            .into_iter()
            .map(|u| {
                let dt = (lo + u * (hi - lo)).exp();
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        let b = dt_proj.b.expect("dt projection has a bias");
        pb.store.set(b, hamf_tensor::Tensor::from_f64(&[d_inner], &dt_bias).expect("shape"));
        let a: Vec<f64> = (0..d_inner).flat_map(|_| (1..=cfg.state).map(|n| (n as f64).ln())).collect();
        let a_log = pb.from_f64(&format!("{name}.a_log"), &[d_inner, cfg.state], &a);
        let d_skip = pb.ones(&format!("{name}.d"), &[d_inner]);
        ScanBranch { conv_w, conv_b, x_proj, dt_proj, a_log, d_skip, state: cfg.state, dt_rank }
    }

    /// `stream: [B?, T, D_inner]` (already masked). `dt_mask` zeroes Δ on padded steps,
    /// which freezes the state there.
    pub fn forward<T: Scalar>(&self, f: &mut Fwd<'_, T>, stream: Var, dt_mask: Option<Var>) -> Result<Var> {
        let axis = f.tape.shape(stream).len() - 1;
        let (w, b) = (f.p(self.conv_w), f.p(self.conv_b));
        let u = f.tape.causal_conv(stream, w, b)?;
        let u = f.tape.silu(u)?;
        let dbc = self.x_proj.forward(f, u)?;
        let parts = f.tape.split(dbc, axis, &[self.dt_rank, self.state, self.state])?;
        let dt = self.dt_proj.forward(f, parts[0])?;
        let mut dt = f.tape.softplus(dt)?;
        if let Some(m) = dt_mask {
            dt = f.tape.mul(dt, m)?;
        }
        let a_log = f.p(self.a_log);
        let a = f.tape.exp(a_log)?;
        let a = f.tape.scale(a, -T::one())?;
        let y = f.tape.selective_scan(u, dt, a, parts[1], parts[2])?;
        let d = f.p(self.d_skip);
        let skip = f.tape.mul(u, d)?;
        Ok(f.tape.add(y, skip)?)
    }

    /// Parameters that read the state out (C columns of the x projection and D).
    pub fn readout_params(&self) -> (ParamId, usize, usize, ParamId) {
        (self.x_proj.w, self.dt_rank + self.state, self.state, self.d_skip)
    }
}

/// Pre-norm selective-SSM block with a gated output and residual connection.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub norm: Norm,
    pub in_proj: Linear,
    pub branch: ScanBranch,
    pub out_proj: Linear,
    pub d_model: usize,
    pub d_inner: usize,
}

impl MambaBlock {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, d_model: usize, cfg: &SsmConfig) -> Self {
        let d_inner = cfg.expand * d_model;
        let dt_rank = cfg.dt_rank_for(d_model);
        MambaBlock {
            norm: Norm::new(pb, &format!("{name}.norm"), d_model),
            in_proj: Linear::new(pb, &format!("{name}.in_proj"), d_model, 2 * d_inner, false),
            branch: ScanBranch::new(pb, &format!("{name}.fwd"), d_inner, dt_rank, cfg),
            out_proj: Linear::new(pb, &format!("{name}.out_proj"), d_inner, d_model, false),
            d_model,
            d_inner,
        }
    }

    /// `x: [B?, T, C]`; `valid` (length B·T) marks real steps. Padded steps neither
    /// feed the state nor the convolution.
    pub fn forward<T: Scalar>(&self, f: &mut Fwd<'_, T>, x: Var, valid: Option<&[bool]>) -> Result<Var> {
        let (stream, gate) = self.project(f, x)?;
        let mask = match valid {
            Some(v) => {
                let shape = f.tape.shape(stream).to_vec();
                if v.len() * self.d_inner != f.tape.value(stream).len() {
                    return Err(CoreError::Invalid(format!("ssm mask of {} steps for stream {shape:?}", v.len())));
                }
                Some(f.mask_const(&shape, v, self.d_inner)?)
            }
            None => None,
        };
        let stream = match mask {
            Some(m) => f.tape.mul(stream, m)?,
            None => stream,
        };
        let y = self.branch.forward(f, stream, mask)?;
        self.finish(f, x, y, gate)
    }

    fn project<T: Scalar>(&self, f: &mut Fwd<'_, T>, x: Var) -> Result<(Var, Var)> {
        let axis = f.tape.shape(x).len() - 1;
        let n = self.norm.forward(f, x)?;
        let xz = self.in_proj.forward(f, n)?;
        let parts = f.tape.split(xz, axis, &[self.d_inner, self.d_inner])?;
        Ok((parts[0], parts[1]))
    }

    fn finish<T: Scalar>(&self, f: &mut Fwd<'_, T>, x: Var, y: Var, gate: Var) -> Result<Var> {
        let g = f.tape.silu(gate)?;
        let y = f.tape.mul(y, g)?;
        let out = self.out_proj.forward(f, y)?;
        Ok(f.tape.add(x, out)?)
    }
}

/// Bidirectional variant: a second scan branch runs over the reversed sequence and
/// its (re-reversed) output is summed with the forward branch before gating.
#[derive(Clone, Debug)]
pub struct BiMambaBlock {
    pub uni: MambaBlock,
    pub backward: ScanBranch,
}

impl BiMambaBlock {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, d_model: usize, cfg: &SsmConfig) -> Self {
        let uni = MambaBlock::new(pb, name, d_model, cfg);
        let backward = ScanBranch::new(pb, &format!("{name}.bwd"), uni.d_inner, cfg.dt_rank_for(d_model), cfg);
        BiMambaBlock { uni, backward }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let (stream, gate) = self.uni.project(f, x)?;
        let y_f = self.uni.branch.forward(f, stream, None)?;
        let rev = reverse_time(f, stream)?;
        let y_b = self.backward.forward(f, rev, None)?;
        let y_b = reverse_time(f, y_b)?;
        let y = f.tape.add(y_f, y_b)?;
        self.uni.finish(f, x, y, gate)
    }

    /// A unidirectional block made of the shared projections and the backward branch.
    pub fn backward_as_uni(&self) -> MambaBlock {
        MambaBlock { branch: self.backward.clone(), ..self.uni.clone() }
    }
}

/// Reverses the time axis of `[T, D]` or `[B, T, D]`.
pub fn reverse_time<T: Scalar>(f: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
    let shape = f.tape.shape(x).to_vec();
    match shape.as_slice() {
        [t, _] => {
            let idx: Vec<usize> = (0..*t).rev().collect();
            Ok(f.tape.gather(x, &idx)?)
        }
        [b, t, d] => {
            let (b, t, d) = (*b, *t, *d);
            let flat = f.tape.reshape(x, &[b * t, d])?;
            let idx: Vec<usize> = (0..b).flat_map(|i| (0..t).rev().map(move |j| i * t + j)).collect();
            let r = f.tape.gather(flat, &idx)?;
            Ok(f.tape.reshape(r, &shape)?)
        }
        _ => Err(CoreError::Invalid(format!("cannot reverse time of shape {shape:?}"))),
    }
}
