//! Run configuration: typed fields, flat `key = value` files, validation and hashing.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Where the joint-module position embeddings are injected.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PeTarget {
    None,
    /// Added to queries and keys.
    Qk,
    /// Added to keys and values.
    Kv,
}

impl FromStr for PeTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(PeTarget::None),
            "qk" => Ok(PeTarget::Qk),
            "kv" => Ok(PeTarget::Kv),
            other => Err(Error::Config(format!("pe_target must be none|qk|kv, got {other:?}"))),
        }
    }
}

impl PeTarget {
    pub fn as_str(&self) -> &'static str {
        match self {
            PeTarget::None => "none",
            PeTarget::Qk => "qk",
            PeTarget::Kv => "kv",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Frame height and width (square frames).
    pub resolution: usize,
    pub frames: usize,
    pub f_c: usize,
    pub f_u: usize,
    pub latent_dim: usize,

    // autoencoder
    pub vae_hidden: usize,
    pub vae_res_layers: usize,
    pub disc_hidden: usize,
    pub kl_weight: f64,
    pub adv_weight: f64,
    pub perceptual_weight: f64,
    pub adv_warmup_iters: u64,
    pub vae_lr: f64,
    pub vae_batch: usize,
    pub vae_iters: u64,
    /// Frames decoded per clip during training (rest skipped; 0 = all).
    pub vae_train_frames: usize,

    // diffusion
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,

    // denoiser
    pub model_dim: usize,
    pub channel_multiplies: Vec<usize>,
    pub attention_resolutions: Vec<usize>,
    pub num_res_blocks: usize,
    pub block_factor: usize,
    pub pe_target: PeTarget,
    pub joint_modules: bool,
    pub ldm_lr: f64,
    pub ldm_batch: usize,
    pub ldm_iters: u64,
    pub ema_interval: u64,
    pub ema_decay: f64,

    /// Cosine-anneal both learning rates to a tenth over their iteration budgets.
    pub lr_decay: bool,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for RunConfig {
    /// Desk-scale preset: 64² clips, 16 frames, 32-wide denoiser.
    fn default() -> Self {
        Self {
            resolution: 64,
            frames: 16,
            f_c: 4,
            f_u: 16,
            latent_dim: 3,
            vae_hidden: 64,
            vae_res_layers: 2,
            disc_hidden: 32,
            kl_weight: 1e-6,
            adv_weight: 0.1,
            perceptual_weight: 1.0,
            adv_warmup_iters: 2000,
            vae_lr: 2e-4,
            vae_batch: 1,
            vae_iters: 10_000,
            vae_train_frames: 0,
            diffusion_steps: 1000,
            beta_start: 0.00085,
            beta_end: 0.0012,
            model_dim: 32,
            channel_multiplies: vec![1, 2],
            attention_resolutions: vec![16, 8, 4],
            num_res_blocks: 1,
            block_factor: 2,
            pe_target: PeTarget::Kv,
            joint_modules: true,
            ldm_lr: 1e-4,
            ldm_batch: 4,
            ldm_iters: 5000,
            ema_interval: 100,
            ema_decay: 0.9999,
            lr_decay: false,
            checkpoint_every: 1000,
            seed: 0,
        }
    }
}

impl RunConfig {
    /// The 128² setting with full-size model widths.
    pub fn full() -> Self {
        Self {
            resolution: 128,
            vae_hidden: 256,
            vae_res_layers: 4,
            disc_hidden: 32,
            adv_warmup_iters: 150_000,
            vae_lr: 2e-4,
            vae_batch: 32,
            vae_iters: 200_000,
            model_dim: 224,
            channel_multiplies: vec![1, 1, 3, 4],
            num_res_blocks: 2,
            ldm_lr: 4e-5,
            ldm_batch: 72,
            ldm_iters: 250_000,
            ..Self::default()
        }
    }

    /// Desk-scale settings that train both stages on one CPU core in under an hour.
    pub fn smoke() -> Self {
        Self {
            vae_hidden: 48,
            vae_lr: 4e-4,
            vae_train_frames: 4,
            adv_warmup_iters: 10_000,
            beta_end: 0.012,
            ldm_lr: 2e-4,
            ldm_iters: 4000,
            ema_interval: 10,
            ema_decay: 0.99,
            lr_decay: true,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" | "default" => Ok(Self::default()),
            "full" => Ok(Self::full()),
            "smoke" => Ok(Self::smoke()),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn common_side(&self) -> usize {
        self.resolution / self.f_c
    }

    pub fn unique_side(&self) -> usize {
        self.resolution / self.f_u
    }

    pub fn common_shape(&self) -> [usize; 3] {
        [self.common_side(), self.common_side(), self.latent_dim]
    }

    pub fn unique_shape(&self) -> [usize; 4] {
        [self.frames, self.unique_side(), self.unique_side(), self.latent_dim]
    }

    /// Extra down/up stages of the commonness stream: log2(f_u / f_c).
    pub fn extra_common_levels(&self) -> usize {
        (self.f_u / self.f_c).trailing_zeros() as usize
    }

    /// Resolutions of the merge ladder, coarse to fine: H/f_u … H/f_c.
    pub fn merge_ladder(&self) -> Vec<usize> {
        (0..=self.extra_common_levels()).map(|i| self.unique_side() << i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.frames < 1 {
            return bad("frames must be at least 1".into());
        }
        if self.latent_dim < 1 {
            return bad("latent_dim must be at least 1".into());
        }
        if !self.f_c.is_power_of_two() || !self.f_u.is_power_of_two() {
            return bad(format!("f_c={} and f_u={} must be powers of two", self.f_c, self.f_u));
        }
        if self.f_c >= self.f_u {
            return bad(format!("f_c={} must be smaller than f_u={}", self.f_c, self.f_u));
        }
        if self.block_factor < 1 {
            return bad("block_factor must be at least 1".into());
        }
        if self.resolution == 0 || self.resolution % (self.f_u * self.block_factor) != 0 {
            return bad(format!(
                "resolution {} must be divisible by f_u·w = {}",
                self.resolution,
                self.f_u * self.block_factor
            ));
        }
        if !(self.beta_start > 0.0 && self.beta_start < self.beta_end && self.beta_end < 1.0) {
            return bad(format!("need 0 < beta_start < beta_end < 1, got {} and {}", self.beta_start, self.beta_end));
        }
        if self.diffusion_steps < 1 {
            return bad("diffusion_steps must be at least 1".into());
        }
        if self.model_dim < 1 || self.vae_hidden < 4 || self.disc_hidden < 1 {
            return bad("model widths must be positive (vae_hidden ≥ 4)".into());
        }
        if self.vae_hidden % 4 != 0 {
            return bad(format!("vae_hidden {} must be divisible by 4", self.vae_hidden));
        }
        if self.channel_multiplies.is_empty() || self.channel_multiplies.contains(&0) {
            return bad("channel_multiplies must be a non-empty list of positive integers".into());
        }
        let levels = self.channel_multiplies.len();
        let unique_side = self.unique_side();
        if levels > 1 && unique_side % (1 << (levels - 1)) != 0 {
            return bad(format!(
                "{levels} denoiser levels need the unique latent side {unique_side} divisible by {}",
                1 << (levels - 1)
            ));
        }
        if self.num_res_blocks < 1 {
            return bad("num_res_blocks must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay {} must lie in [0, 1)", self.ema_decay));
        }
        if self.ema_interval < 1 {
            return bad("ema_interval must be at least 1".into());
        }
        if self.vae_lr <= 0.0 || self.ldm_lr <= 0.0 {
            return bad("learning rates must be positive".into());
        }
        if self.kl_weight < 0.0 || self.adv_weight < 0.0 || self.perceptual_weight < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        if self.vae_batch < 1 || self.ldm_batch < 1 {
            return bad("batch sizes must be at least 1".into());
        }
        if self.vae_train_frames > self.frames {
            return bad(format!("vae_train_frames {} exceeds frames {}", self.vae_train_frames, self.frames));
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("resolution", self.resolution.to_string()),
            ("frames", self.frames.to_string()),
            ("f_c", self.f_c.to_string()),
            ("f_u", self.f_u.to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("vae_hidden", self.vae_hidden.to_string()),
            ("vae_res_layers", self.vae_res_layers.to_string()),
            ("disc_hidden", self.disc_hidden.to_string()),
            ("kl_weight", fmt_f64(self.kl_weight)),
            ("adv_weight", fmt_f64(self.adv_weight)),
            ("perceptual_weight", fmt_f64(self.perceptual_weight)),
            ("adv_warmup_iters", self.adv_warmup_iters.to_string()),
            ("vae_lr", fmt_f64(self.vae_lr)),
            ("vae_batch", self.vae_batch.to_string()),
            ("vae_iters", self.vae_iters.to_string()),
            ("vae_train_frames", self.vae_train_frames.to_string()),
            ("diffusion_steps", self.diffusion_steps.to_string()),
            ("beta_start", fmt_f64(self.beta_start)),
            ("beta_end", fmt_f64(self.beta_end)),
            ("model_dim", self.model_dim.to_string()),
            ("channel_multiplies", list(&self.channel_multiplies)),
            ("attention_resolutions", list(&self.attention_resolutions)),
            ("num_res_blocks", self.num_res_blocks.to_string()),
            ("block_factor", self.block_factor.to_string()),
            ("pe_target", self.pe_target.as_str().to_string()),
            ("joint_modules", self.joint_modules.to_string()),
            ("ldm_lr", fmt_f64(self.ldm_lr)),
            ("ldm_batch", self.ldm_batch.to_string()),
            ("ldm_iters", self.ldm_iters.to_string()),
            ("ema_interval", self.ema_interval.to_string()),
            ("ema_decay", fmt_f64(self.ema_decay)),
            ("lr_decay", self.lr_decay.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Canonical `key = value` text, one entry per line.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv_str(&text)
    }

    /// Sets one field from its textual form. `preset` resets everything first.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
        }
        fn list(key: &str, v: &str) -> std::result::Result<Vec<usize>, String> {
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|x| num(key, x.trim())).collect()
        }
        match key {
            "preset" => *self = RunConfig::preset(value).map_err(|e| e.to_string())?,
            "resolution" => self.resolution = num(key, value)?,
            "frames" => self.frames = num(key, value)?,
            "f_c" => self.f_c = num(key, value)?,
            "f_u" => self.f_u = num(key, value)?,
            "latent_dim" => self.latent_dim = num(key, value)?,
            "vae_hidden" => self.vae_hidden = num(key, value)?,
            "vae_res_layers" => self.vae_res_layers = num(key, value)?,
            "disc_hidden" => self.disc_hidden = num(key, value)?,
            "kl_weight" => self.kl_weight = num(key, value)?,
            "adv_weight" => self.adv_weight = num(key, value)?,
            "perceptual_weight" => self.perceptual_weight = num(key, value)?,
            "adv_warmup_iters" => self.adv_warmup_iters = num(key, value)?,
            "vae_lr" => self.vae_lr = num(key, value)?,
            "vae_batch" => self.vae_batch = num(key, value)?,
            "vae_iters" => self.vae_iters = num(key, value)?,
            "vae_train_frames" => self.vae_train_frames = num(key, value)?,
            "diffusion_steps" => self.diffusion_steps = num(key, value)?,
            "beta_start" => self.beta_start = num(key, value)?,
            "beta_end" => self.beta_end = num(key, value)?,
            "model_dim" => self.model_dim = num(key, value)?,
            "channel_multiplies" => self.channel_multiplies = list(key, value)?,
            "attention_resolutions" => self.attention_resolutions = list(key, value)?,
            "num_res_blocks" => self.num_res_blocks = num(key, value)?,
            "block_factor" => self.block_factor = num(key, value)?,
            "pe_target" => self.pe_target = value.parse().map_err(|e: Error| e.to_string())?,
            "joint_modules" => self.joint_modules = num(key, value)?,
            "ldm_lr" => self.ldm_lr = num(key, value)?,
            "ldm_batch" => self.ldm_batch = num(key, value)?,
            "ldm_iters" => self.ldm_iters = num(key, value)?,
            "ema_interval" => self.ema_interval = num(key, value)?,
            "ema_decay" => self.ema_decay = num(key, value)?,
            "lr_decay" => self.lr_decay = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    /// Learning rate at `iteration` of a `total`-iteration run.
    pub fn lr_at(&self, base: f64, iteration: u64, total: u64) -> f64 {
        if !self.lr_decay || total == 0 {
            return base;
        }
        let p = (iteration as f64 / total as f64).min(1.0);
        base * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
    }

    /// Hash over every field.
    pub fn hash(&self) -> String {
        digest(&self.to_kv_string())
    }

    /// Hash over the fields that fix the autoencoder's architecture and latent layout.
    pub fn vae_hash(&self) -> String {
        let keys = ["resolution", "frames", "f_c", "f_u", "latent_dim", "vae_hidden", "vae_res_layers"];
        let text: String = self
            .entries()
            .into_iter()
            .filter(|(k, _)| keys.contains(k))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        digest(&text)
    }

    /// Hash over the fields that fix the denoiser's architecture.
    pub fn ldm_hash(&self) -> String {
        let keys = [
            "resolution",
            "frames",
            "f_c",
            "f_u",
            "latent_dim",
            "model_dim",
            "channel_multiplies",
            "attention_resolutions",
            "num_res_blocks",
            "block_factor",
            "pe_target",
            "joint_modules",
        ];
        let text: String = self
            .entries()
            .into_iter()
            .filter(|(k, _)| keys.contains(k))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        digest(&text)
    }
}

fn fmt_f64(v: f64) -> String {
    // shortest representation that parses back to the same value
    format!("{v:?}")
}

fn digest(text: &str) -> String {
    let d = Sha256::digest(text.as_bytes());
    d.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_have_expected_latent_shapes() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.common_shape(), [16, 16, 3]);
        assert_eq!(c.unique_shape(), [16, 4, 4, 3]);
        assert_eq!(c.merge_ladder(), vec![4, 8, 16]);
        assert_eq!(c.extra_common_levels(), 2);
        assert_eq!(c.beta_start, 0.00085);
        assert_eq!(c.beta_end, 0.0012);
        assert_eq!(c.block_factor, 2);
    }

    #[test]
    fn full_preset_validates() {
        let c = RunConfig::full();
        c.validate().unwrap();
        assert_eq!(c.model_dim, 224);
        assert_eq!(c.channel_multiplies, vec![1, 1, 3, 4]);
        assert_eq!(c.common_shape(), [32, 32, 3]);
        assert_eq!(c.unique_shape(), [16, 8, 8, 3]);
        assert_eq!(c.merge_ladder(), vec![8, 16, 32]);
    }

    #[test]
    fn kv_round_trip_is_exact() {
        let mut c = RunConfig::full();
        c.pe_target = PeTarget::Qk;
        c.kl_weight = 3.3e-7;
        let back = RunConfig::from_kv_str(&c.to_kv_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn parser_handles_comments_presets_and_errors() {
        let c = RunConfig::from_kv_str("preset = full\n# note\nframes = 16 # trailing\n\nseed=9\n").unwrap();
        assert_eq!(c.resolution, 128);
        assert_eq!(c.seed, 9);
        assert!(matches!(RunConfig::from_kv_str("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_kv_str("frames"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_kv_str("frames = x"), Err(Error::Config(_))));
    }

    #[test]
    fn validation_rejects_each_broken_invariant() {
        let cases: Vec<(&str, Box<dyn Fn(&mut RunConfig)>)> = vec![
            ("f_c >= f_u", Box::new(|c| c.f_c = 16)),
            ("f_u not power of two", Box::new(|c| c.f_u = 12)),
            ("resolution not divisible by f_u*w", Box::new(|c| c.resolution = 48)),
            ("beta_start >= beta_end", Box::new(|c| c.beta_start = 0.0012)),
            ("beta_end >= 1", Box::new(|c| c.beta_end = 1.0)),
            ("beta_start <= 0", Box::new(|c| c.beta_start = 0.0)),
            ("latent_dim 0", Box::new(|c| c.latent_dim = 0)),
            ("frames 0", Box::new(|c| c.frames = 0)),
            ("too many levels", Box::new(|c| c.channel_multiplies = vec![1, 1, 1, 1])),
            ("ema decay 1", Box::new(|c| c.ema_decay = 1.0)),
            ("w = 0", Box::new(|c| c.block_factor = 0)),
        ];
        for (what, mutate) in cases {
            let mut c = RunConfig::default();
            mutate(&mut c);
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{what} accepted");
        }
    }

    #[test]
    fn hashes_track_relevant_fields_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.ldm_lr = 1e-3;
        assert_eq!(a.vae_hash(), b.vae_hash());
        assert_eq!(a.ldm_hash(), b.ldm_hash());
        assert_ne!(a.hash(), b.hash());
        b.vae_hidden = 32;
        assert_ne!(a.vae_hash(), b.vae_hash());
    }
}
