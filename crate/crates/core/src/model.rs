//! The full forecasting model: embedding → encoder → decoder → heads.

use hamf_tensor::{ParamStore, Scalar, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderConfig, DecoderDims};
use crate::embedding::Embedding;
use crate::encoder::{Encoder, EncoderConfig, EncoderOutput, EncoderVariant};
use crate::error::{CoreError, Result};
use crate::features::SceneInput;
use crate::nn::{Fwd, Linear, ParamBuilder};
use crate::scene::{PredictionSet, FUTURE_STEPS, HISTORY_STEPS};
use crate::ssm::SsmConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Token width C.
    pub d_model: usize,
    pub history_steps: usize,
    pub future_steps: usize,
    /// Predicted modes K.
    pub modes: usize,
    /// Learnable motion tokens K_e (≤ K).
    pub motion_tokens: usize,
    /// Stacked causal SSM blocks in the agent embedder.
    pub agent_blocks: usize,
    pub pointnet_hidden: usize,
    pub pe_frequencies: usize,
    /// Also add the (focal-origin) pose encoding to the motion tokens.
    pub pe_on_motion_tokens: bool,
    /// Multiplier on the trajectory head outputs (meters per head unit).
    pub output_scale: f64,
    pub aux_head: bool,
    pub ssm: SsmConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            history_steps: HISTORY_STEPS,
            future_steps: FUTURE_STEPS,
            modes: 6,
            motion_tokens: 6,
            agent_blocks: 2,
            pointnet_hidden: 64,
            pe_frequencies: 64,
            pe_on_motion_tokens: false,
            output_scale: 10.0,
            aux_head: true,
            ssm: SsmConfig::default(),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Reference configuration (C=128, five encoder layers, one uni-SSM decoder block).
    pub fn reference() -> Self {
        Self::default()
    }

    /// Reduced width/depth for single-core desk runs.
    pub fn desk() -> Self {
        Self {
            d_model: 32,
            pointnet_hidden: 32,
            pe_frequencies: 16,
            ssm: SsmConfig { state: 8, ..SsmConfig::default() },
            encoder: EncoderConfig { layers: 2, heads: 4, ffn_mult: 2, ..EncoderConfig::default() },
            ..Self::default()
        }
    }

    pub fn uses_motion_tokens(&self) -> bool {
        self.encoder.variant != EncoderVariant::NoMotionTokens
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.history_steps == 0 || self.future_steps == 0 {
            return Err(CoreError::Config("width and horizons must be positive".into()));
        }
        if self.modes == 0 || self.motion_tokens == 0 {
            return Err(CoreError::Config("modes and motion tokens must be ≥ 1".into()));
        }
        if self.uses_motion_tokens() && self.motion_tokens > self.modes {
            return Err(CoreError::Config(format!(
                "{} motion tokens for {} modes is unsupported",
                self.motion_tokens, self.modes
            )));
        }
        if self.pe_frequencies == 0 || self.pointnet_hidden == 0 {
            return Err(CoreError::Config("pe_frequencies and pointnet_hidden must be ≥ 1".into()));
        }
        if !(self.output_scale > 0.0) {
            return Err(CoreError::Config("output_scale must be positive".into()));
        }
        self.ssm.validate()?;
        self.encoder.validate(self.d_model)?;
        self.decoder.validate()
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `[K, T_f, 2]` in the focal frame.
    pub trajectories: Var,
    /// `[K]` unnormalized mode scores.
    pub logits: Var,
    /// `[K]` softmax of `logits`.
    pub probabilities: Var,
    /// `[N_in, T_f, 2]` offsets from each agent's last observed position.
    pub aux: Option<Var>,
    pub scene_tokens: Var,
    pub motion_tokens: Option<Var>,
    pub encoded: EncoderOutput,
    /// Decoder output before the mode projection.
    pub decoded: Var,
    /// Per-mode features fed to the trajectory head.
    pub mode_features: Var,
}

#[derive(Clone, Debug)]
pub struct Hamf<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub embedding: Embedding,
    pub encoder: Encoder,
    pub decoder: Decoder,
    /// Expands the focal token into K mode features when there are no motion tokens.
    pub mode_proj: Option<Linear>,
}

impl<T: Scalar> Hamf<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut pb = ParamBuilder::new(&mut params, seed);
        let c = config.d_model;
        let embedding = Embedding::new(&mut pb, &config)?;
        let encoder = Encoder::new(&mut pb, &config.encoder, c)?;
        let tokens = if config.uses_motion_tokens() { config.motion_tokens } else { config.modes };
        let dims = DecoderDims {
            d_model: c,
            tokens,
            modes: config.modes,
            future: config.future_steps,
            heads: config.encoder.heads,
            ffn_mult: config.encoder.ffn_mult,
            aux: config.aux_head,
            output_scale: config.output_scale,
        };
        let decoder = Decoder::new(&mut pb, &config.decoder, &config.ssm, dims)?;
        let mode_proj =
            (!config.uses_motion_tokens()).then(|| Linear::new(&mut pb, "dec.mode_proj", c, config.modes * c, true));
        Ok(Hamf { config, params, embedding, encoder, decoder, mode_proj })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Rebuilds the module layout for `config` and takes parameter values from `params`.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if params.len() != model.params.len() {
            return Err(CoreError::Checkpoint(format!(
                "{} parameters for a model with {}",
                params.len(),
                model.params.len()
            )));
        }
        for id in model.params.ids() {
            let (a, b) = (model.params.get(id), params.get(id));
            if a.shape() != b.shape() || model.params.name(id) != params.name(id) {
                return Err(CoreError::Checkpoint(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    model.params.name(id),
                    a.shape(),
                    params.name(id),
                    b.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn cast<U: Scalar>(&self) -> Hamf<U> {
        Hamf {
            config: self.config.clone(),
            params: self.params.cast(),
            embedding: self.embedding.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            mode_proj: self.mode_proj.clone(),
        }
    }

    fn check_input(&self, input: &SceneInput) -> Result<()> {
        if input.history != self.config.history_steps || input.future != self.config.future_steps {
            return Err(CoreError::Invalid(format!(
                "scene '{}' has horizons {}/{} but the model expects {}/{}",
                input.id, input.history, input.future, self.config.history_steps, self.config.future_steps
            )));
        }
        if input.focal >= input.n_agents {
            return Err(CoreError::Invalid(format!("focal index {} out of range", input.focal)));
        }
        Ok(())
    }

    /// Records the forward pass of one scene on `tape`.
    pub fn forward(&self, tape: &mut Tape<T>, input: &SceneInput) -> Result<ModelOutput> {
        self.check_input(input)?;
        let mut f = Fwd::new(tape, &self.params);
        let scene_tokens = self.embedding.scene_tokens(&mut f, input)?;
        let mut motion_tokens = self.embedding.motion_tokens(&mut f);
        if let (Some(m), true) = (motion_tokens, self.config.pe_on_motion_tokens) {
            let pe = self.embedding.pose_encoding(&mut f, &[[0.0, 0.0, 1.0, 0.0]])?;
            let pe = f.tape.reshape(pe, &[self.config.d_model])?;
            motion_tokens = Some(f.tape.add(m, pe)?);
        }
        let valid = input.token_valid();
        let encoded = self.encoder.encode(&mut f, motion_tokens, scene_tokens, &valid)?;

        let (decoded, mode_features, prob_features) = match (encoded.f, &self.mode_proj) {
            (Some(fl), _) => {
                let decoded = self.decoder.decode_tokens(&mut f, fl)?;
                let modes = self.decoder.project_modes(&mut f, decoded)?;
                let prob = if self.decoder.config.prob_after_decoder {
                    modes
                } else {
                    self.decoder.project_modes(&mut f, fl)?
                };
                (decoded, modes, prob)
            }
            (None, Some(proj)) => {
                let focal = f.tape.gather(encoded.s, &[input.focal])?;
                let expanded = proj.forward(&mut f, focal)?;
                let seeds = f.tape.reshape(expanded, &[self.config.modes, self.config.d_model])?;
                let decoded = self.decoder.decode_tokens(&mut f, seeds)?;
                let prob = if self.decoder.config.prob_after_decoder { decoded } else { seeds };
                (decoded, decoded, prob)
            }
            (None, None) => return Err(CoreError::Invalid("encoder produced no motion tokens".into())),
        };
        let trajectories = self.decoder.trajectories(&mut f, mode_features)?;
        let logits = self.decoder.logits(&mut f, prob_features)?;
        let probabilities = f.tape.softmax(logits, 0)?;
        let agents = f.tape.slice(encoded.s, 0, 0, input.n_agents)?;
        let aux = self.decoder.aux_trajectories(&mut f, agents)?;
        Ok(ModelOutput {
            trajectories,
            logits,
            probabilities,
            aux,
            scene_tokens,
            motion_tokens,
            encoded,
            decoded,
            mode_features,
        })
    }

    /// Predictions for one scene in its focal frame.
    pub fn predict(&self, input: &SceneInput) -> Result<PredictionSet> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, input)?;
        Ok(prediction_from(&tape, &out, &input.id))
    }
}

/// Reads a [`PredictionSet`] out of a finished forward pass.
pub fn prediction_from<T: Scalar>(tape: &Tape<T>, out: &ModelOutput, id: &str) -> PredictionSet {
    let traj = tape.value(out.trajectories);
    let (k, steps) = (traj.shape()[0], traj.shape()[1]);
    let data = traj.to_f64_vec();
    let trajectories = (0..k)
        .map(|m| (0..steps).map(|t| [data[(m * steps + t) * 2], data[(m * steps + t) * 2 + 1]]).collect())
        .collect();
    let mut probabilities = tape.value(out.probabilities).to_f64_vec();
    // Renormalize in f64 so the simplex holds to double precision.
    let total: f64 = probabilities.iter().sum();
    probabilities.iter_mut().for_each(|p| *p /= total);
    PredictionSet { scenario_id: id.to_string(), trajectories, probabilities }
}

pub type Hamf32 = Hamf<f32>;
pub type Hamf64 = Hamf<f64>;
