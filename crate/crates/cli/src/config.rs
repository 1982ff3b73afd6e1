//! Run configuration: a TOML file mirroring every knob of the pipeline,
//! with full defaults emitted by `versecraft print-config`.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use versecraft::controller::ControllerConfig;
use versecraft::corpus::{BatchMode, Language};
use versecraft::diffusion::{DenoiserConfig, ScheduleKind, TrainConfig};
use versecraft::sampler::GuidanceConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub language: Language,
    /// Training corpus (JSONL).
    pub corpus: PathBuf,
    /// Held-out corpus used for reference databases and accuracy summaries.
    pub heldout: Option<PathBuf>,
    /// Rhyme/tone lexicon (TSV).
    pub lexicon: PathBuf,
    /// Checkpoints, logs and generated files land here.
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Rhyme-space size; defaults to the language convention
    /// (6219 for sonnets, 17 for songci) when omitted.
    pub r_size: Option<u32>,
    pub diffusion: DiffusionSection,
    pub controller: ControllerSection,
    pub guidance: GuidanceSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            language: Language::Sonnet,
            corpus: "fixtures/sonnet/train.jsonl".into(),
            heldout: Some("fixtures/sonnet/heldout.jsonl".into()),
            lexicon: "fixtures/sonnet/lexicon.tsv".into(),
            out_dir: "runs/sonnet".into(),
            seed: 7,
            r_size: None,
            diffusion: DiffusionSection::default(),
            controller: ControllerSection::default(),
            guidance: GuidanceSection::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    /// Number of trained diffusion steps T.
    pub t_max: usize,
    /// Rescaled step count K executed at sampling time.
    pub rescaled_steps: usize,
    pub embed_dim: usize,
    pub schedule: ScheduleKind,
    pub hidden: usize,
    pub blocks: usize,
    pub ffn: usize,
    pub rounding_hidden: usize,
    pub iterations: usize,
    pub lr: f64,
    pub batch_mode: BatchMode,
    pub batch_size: usize,
    /// Row length of training batches; 0 means "longest training poem".
    pub block_len: usize,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        DiffusionSection {
            t_max: 2000,
            rescaled_steps: 200,
            embed_dim: 16,
            schedule: ScheduleKind::Sqrt,
            hidden: 64,
            blocks: 2,
            ffn: 128,
            rounding_hidden: 64,
            iterations: 4000,
            lr: 1e-3,
            batch_mode: BatchMode::Pad,
            batch_size: 16,
            block_len: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerSection {
    pub hidden: usize,
    pub iterations: usize,
    pub lr: f64,
}

impl Default for ControllerSection {
    fn default() -> Self {
        ControllerSection {
            hidden: 64,
            iterations: 30000,
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSection {
    pub steps_per_t: usize,
    pub step_size: f64,
    /// Fixed (format, tone, rhyme) weights; omitted means auto-scaling from
    /// recorded training-loss averages.
    pub lambda: Option<[f64; 3]>,
    pub clamp_norm: Option<f64>,
    pub log_trajectory: bool,
    pub snapshot_every: usize,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        let g = GuidanceConfig::default();
        GuidanceSection {
            steps_per_t: g.guidance_steps_per_t,
            step_size: g.step_size,
            lambda: None,
            clamp_norm: None,
            log_trajectory: g.log_trajectory,
            snapshot_every: g.snapshot_every,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| format!("bad config {}: {e}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn r_size(&self) -> u32 {
        self.r_size.unwrap_or(match self.language {
            Language::Sonnet => 6219,
            Language::SongCi => 17,
        })
    }

    /// Every module precondition that can be checked before side effects.
    pub fn validate(&self) -> Result<(), String> {
        let d = &self.diffusion;
        if d.t_max < 2 {
            return Err("diffusion.t_max must be at least 2".into());
        }
        if d.rescaled_steps == 0 || d.rescaled_steps > d.t_max {
            return Err(format!(
                "diffusion.rescaled_steps must lie in 1..={}",
                d.t_max
            ));
        }
        if d.embed_dim < 2 {
            return Err("diffusion.embed_dim must be at least 2".into());
        }
        if d.hidden == 0 || d.blocks == 0 || d.ffn == 0 || d.rounding_hidden == 0 {
            return Err("diffusion network dimensions must be positive".into());
        }
        if d.batch_size == 0 {
            return Err("diffusion.batch_size must be positive".into());
        }
        if !(d.lr > 0.0) || !(self.controller.lr > 0.0) {
            return Err("learning rates must be positive".into());
        }
        if self.controller.hidden == 0 {
            return Err("controller.hidden must be positive".into());
        }
        let g = &self.guidance;
        if g.steps_per_t > 0 && !(g.step_size > 0.0) {
            return Err("guidance.step_size must be positive when steps_per_t > 0".into());
        }
        if g.snapshot_every == 0 {
            return Err("guidance.snapshot_every must be at least 1".into());
        }
        if let Some(l) = g.lambda {
            if l.iter().any(|v| !(*v >= 0.0)) {
                return Err("guidance.lambda entries must be non-negative".into());
            }
        }
        if let Some(c) = g.clamp_norm {
            if !(c > 0.0) {
                return Err("guidance.clamp_norm must be positive".into());
            }
        }
        if self.r_size() == 0 {
            return Err("r_size must be positive".into());
        }
        Ok(())
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            dim: self.diffusion.embed_dim,
            hidden: self.diffusion.hidden,
            blocks: self.diffusion.blocks,
            ffn: self.diffusion.ffn,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.diffusion.iterations,
            lr: self.diffusion.lr,
            seed: self.seed,
            log_every: 50,
        }
    }

    pub fn controller_config(&self) -> ControllerConfig {
        ControllerConfig {
            hidden: self.controller.hidden,
            iterations: self.controller.iterations,
            lr: self.controller.lr,
            // derived so diffusion and controller streams stay independent
            seed: self.seed.wrapping_add(1),
            log_every: 500,
        }
    }

    pub fn guidance_config(&self) -> GuidanceConfig {
        GuidanceConfig {
            guidance_steps_per_t: self.guidance.steps_per_t,
            step_size: self.guidance.step_size,
            lambda_override: self.guidance.lambda.map(|l| (l[0], l[1], l[2])),
            clamp_norm: self.guidance.clamp_norm,
            log_trajectory: self.guidance.log_trajectory,
            snapshot_every: self.guidance.snapshot_every,
        }
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out_dir.join("ckpt")
    }
}
