//! Ablation suites: variant grids, multi-seed training and result tables.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{scene_inputs, synthetic_split, SplitConfig};
use crate::decoder::DecoderKind;
use crate::encoder::EncoderVariant;
use crate::error::{CoreError, Result};
use crate::features::SceneInput;
use crate::metrics::MetricReport;
use crate::model::{Hamf32, ModelConfig};
use crate::training::{evaluate_model, TrainConfig, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Encoder,
    Decoder,
    Depth,
    Ke,
    Arch,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Self::Encoder, Self::Decoder, Self::Depth, Self::Ke, Self::Arch];

    pub fn name(self) -> &'static str {
        match self {
            Self::Encoder => "encoder",
            Self::Decoder => "decoder",
            Self::Depth => "depth",
            Self::Ke => "ke",
            Self::Arch => "arch",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Self::Encoder => "Effects of different encoder modules",
            Self::Decoder => "Different configurations in the decoder",
            Self::Depth => "Different encoder depths",
            Self::Ke => "Different numbers of future motion tokens",
            Self::Arch => "Different encoder architectures",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| CoreError::Unknown { kind: "ablation suite", name: s.to_string() })
    }
}

/// One table row: a label, suite-specific descriptive cells and the config change.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub cells: Vec<(&'static str, String)>,
    apply: Change,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Change {
    Encoder(EncoderVariant),
    Decoder(DecoderKind, usize),
    Depth(usize),
    MotionTokens(usize),
}

impl Variant {
    fn new(label: impl Into<String>, cells: Vec<(&'static str, String)>, apply: Change) -> Self {
        Variant { label: label.into(), cells, apply }
    }

    /// `base` with this row's change applied.
    pub fn config(&self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        match self.apply {
            Change::Encoder(v) => c.encoder.variant = v,
            Change::Decoder(kind, depth) => {
                c.decoder.kind = kind;
                c.decoder.depth = depth;
            }
            Change::Depth(l) => c.encoder.layers = l,
            Change::MotionTokens(k) => c.motion_tokens = k,
        }
        c
    }
}

fn check(on: bool) -> String {
    if on { "✓" } else { "" }.to_string()
}

/// Rows of `suite` in table order.
pub fn suite_variants(suite: Suite) -> Vec<Variant> {
    use EncoderVariant as E;
    match suite {
        Suite::Encoder => [
            (E::NoMotionTokens, false, false, false),
            (E::SelfOnly, true, false, false),
            (E::CrossOnly, false, true, false),
            (E::NoInteraction, true, true, false),
            (E::Full, true, true, true),
        ]
        .into_iter()
        .map(|(v, sa, ca, inter)| {
            Variant::new(
                v.label(),
                vec![("Self Attn.", check(sa)), ("Cross Attn.", check(ca)), ("Interaction", check(inter))],
                Change::Encoder(v),
            )
        })
        .collect(),
        Suite::Decoder => {
            let mut rows = vec![Variant::new("Md", vec![("Depth", "/".into())], Change::Decoder(DecoderKind::None, 1))];
            for (kind, name, depths) in [
                (DecoderKind::UniMamba, "Uni-Mamba", 1..=2),
                (DecoderKind::BiMamba, "Bi-Mamba", 1..=3),
                (DecoderKind::Attention, "Attention", 1..=3),
            ] {
                rows.extend(depths.map(|d| {
                    Variant::new(format!("{name}-{d}"), vec![("Depth", d.to_string())], Change::Decoder(kind, d))
                }));
            }
            rows
        }
        Suite::Depth => (4..=6)
            .map(|l| Variant::new(format!("L={l}"), vec![("Encoder depth", l.to_string())], Change::Depth(l)))
            .collect(),
        Suite::Ke => [1, 2, 3, 6]
            .into_iter()
            .map(|k| Variant::new(format!("Ke={k}"), vec![("K_e", k.to_string())], Change::MotionTokens(k)))
            .collect(),
        Suite::Arch => [E::Parallel, E::Reversed, E::Full]
            .into_iter()
            .map(|v| Variant::new(v.label(), Vec::new(), Change::Encoder(v)))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Seeds used for model init and data order, one run each.
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            model: ModelConfig::desk(),
            train: TrainConfig { epochs: 30, eval_every: 0, ..TrainConfig::default() },
            split: SplitConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub label: String,
    pub cells: Vec<(String, String)>,
    /// Parameters of the trained (possibly reduced) configuration.
    pub params: usize,
    /// Parameters of the same variant at the reference configuration.
    pub reference_params: usize,
    pub seeds: Vec<u64>,
    pub runs: Vec<MetricReport>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl VariantResult {
    pub fn stat(&self, metric: impl Fn(&MetricReport) -> f64) -> (f64, f64) {
        mean_std(&self.runs.iter().map(metric).collect::<Vec<_>>())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub suite: Suite,
    pub rows: Vec<VariantResult>,
}

fn pm((m, s): (f64, f64)) -> String {
    format!("{m:.3} ± {s:.3}")
}

impl AblationReport {
    pub fn row(&self, label: &str) -> Option<&VariantResult> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("### {} ({})\n\n", self.suite.title(), self.suite);
        let extra: Vec<&str> = self.rows.first().map_or(Vec::new(), |r| r.cells.iter().map(|c| c.0.as_str()).collect());
        let mut header = vec!["Model"];
        header.extend(&extra);
        header.extend(["Params(M) ref", "Params trained", "minADE6", "minFDE6", "MR6", "seeds"]);
        let _ = writeln!(out, "| {} |", header.join(" | "));
        let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
        for r in &self.rows {
            let mut cells = vec![r.label.clone()];
            cells.extend(r.cells.iter().map(|c| c.1.clone()));
            cells.push(format!("{:.2}", r.reference_params as f64 / 1e6));
            cells.push(r.params.to_string());
            cells.push(pm(r.stat(|m| m.min_ade6)));
            cells.push(pm(r.stat(|m| m.min_fde6)));
            cells.push(pm(r.stat(|m| m.miss_rate6)));
            cells.push(r.runs.len().to_string());
            let _ = writeln!(out, "| {} |", cells.join(" | "));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "suite,model,params,reference_params,seeds,min_ade6_mean,min_ade6_std,min_fde6_mean,min_fde6_std,miss6_mean,miss6_std,min_fde1_mean,brier_min_fde6_mean\n",
        );
        for r in &self.rows {
            let (a, sa) = r.stat(|m| m.min_ade6);
            let (f, sf) = r.stat(|m| m.min_fde6);
            let (mr, smr) = r.stat(|m| m.miss_rate6);
            let (f1, _) = r.stat(|m| m.min_fde1);
            let (b, _) = r.stat(|m| m.brier_min_fde6);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{a},{sa},{f},{sf},{mr},{smr},{f1},{b}",
                self.suite,
                r.label,
                r.params,
                r.reference_params,
                r.runs.len()
            );
        }
        out
    }
}

/// Trains `config` with `seed` on `train` and scores it on `val`.
pub fn train_and_evaluate(
    config: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
    train: &[SceneInput],
    val: &[SceneInput],
) -> Result<(Hamf32, MetricReport)> {
    let model = Hamf32::new(config.clone(), seed)?;
    let mut trainer = Trainer::new(model, TrainConfig { seed, eval_every: 0, ..train_cfg.clone() })?;
    trainer.fit(train, None, |_, _| Ok(()))?;
    let (report, _) = evaluate_model(&trainer.model, val)?;
    Ok((trainer.model, report))
}

/// Runs every row of `suite` for every seed. `progress` sees `(label, seed, report)`.
pub fn run_suite(
    suite: Suite,
    cfg: &AblationConfig,
    mut progress: impl FnMut(&str, u64, &MetricReport),
) -> Result<AblationReport> {
    if cfg.seeds.is_empty() {
        return Err(CoreError::Config("at least one seed is required".into()));
    }
    let (train, val) = synthetic_split(&cfg.split)?;
    if val.is_empty() {
        return Err(CoreError::Config("ablation needs a validation split".into()));
    }
    let (train, val) = (scene_inputs(&train)?, scene_inputs(&val)?);
    let mut rows = Vec::new();
    for v in suite_variants(suite) {
        let config = v.config(&cfg.model);
        let reference = Hamf32::new(v.config(&ModelConfig::reference()), 0)?.num_params();
        let mut runs = Vec::new();
        let mut params = 0;
        for &seed in &cfg.seeds {
            let (model, report) = train_and_evaluate(&config, &cfg.train, seed, &train, &val)?;
            params = model.num_params();
            progress(&v.label, seed, &report);
            runs.push(report);
        }
        rows.push(VariantResult {
            label: v.label.clone(),
            cells: v.cells.iter().map(|(k, c)| (k.to_string(), c.clone())).collect(),
            params,
            reference_params: reference,
            seeds: cfg.seeds.clone(),
            runs,
        });
    }
    Ok(AblationReport { suite, rows })
}
