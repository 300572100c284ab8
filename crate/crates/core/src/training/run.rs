use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::clip::{write_atomic, VideoClip};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::vae::loss::VaeLossReport;
use crate::vae::{LatentBundle, VaeModel};

use super::{LdmLossReport, LdmTrainer, VaeTrainer};

pub const VAE_LOSS_HEADER: &str = "iteration,rec,kl,adv,perceptual,total";
pub const LDM_LOSS_HEADER: &str = "iteration,diffusion_common,diffusion_unique,total";

/// Where a training run writes its checkpoints and loss log.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root })
    }

    pub fn checkpoint(&self, kind: &str, iteration: u64) -> PathBuf {
        self.root.join(format!("{kind}_{iteration:07}.ckpt"))
    }

    /// The checkpoint of the last completed iteration.
    pub fn latest(&self, kind: &str) -> PathBuf {
        self.root.join(format!("{kind}.ckpt"))
    }

    pub fn loss_log(&self, kind: &str) -> PathBuf {
        self.root.join(format!("{kind}_loss.csv"))
    }
}

/// Checkpoints written by a run, in iteration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointSeries {
    pub entries: Vec<(u64, PathBuf)>,
}

fn vae_row(i: u64, r: &VaeLossReport) -> String {
    format!("{i},{},{},{},{},{}\n", r.rec, r.kl, r.adv, r.perceptual, r.total)
}

fn ldm_row(i: u64, r: &LdmLossReport) -> String {
    format!("{i},{},{},{}\n", r.common, r.unique, r.total)
}

/// Shared loop: step, log, checkpoint every `every` iterations and at the end.
/// A failing step leaves the previous checkpoints and the log up to it on disk.
fn drive<R>(
    iters: u64,
    every: u64,
    header: &str,
    log_path: &Path,
    mut step: impl FnMut() -> Result<(u64, R)>,
    row: impl Fn(u64, &R) -> String,
    mut save: impl FnMut(u64) -> Result<PathBuf>,
    mut progress: impl FnMut(u64, &R),
) -> Result<CheckpointSeries> {
    let mut log = String::new();
    let _ = writeln!(log, "{header}");
    let mut series = CheckpointSeries::default();
    for _ in 0..iters {
        let (i, report) = match step() {
            Ok(v) => v,
            Err(e) => {
                write_atomic(log_path, log.as_bytes())?;
                return Err(e);
            }
        };
        log.push_str(&row(i, &report));
        progress(i, &report);
        let done = i + 1;
        if every > 0 && done % every == 0 {
            series.entries.push((done, save(done)?));
            write_atomic(log_path, log.as_bytes())?;
        }
    }
    write_atomic(log_path, log.as_bytes())?;
    Ok(series)
}

/// Autoencoder training for `cfg.vae_iters` steps.
pub fn train_vae(
    cfg: &RunConfig,
    dataset: &[VideoClip],
    dir: &RunDir,
    progress: impl FnMut(u64, &VaeLossReport),
) -> Result<(VaeTrainer, CheckpointSeries)> {
    if dataset.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    cfg.validate()?;
    let mut tr = VaeTrainer::new(cfg)?;
    let cell = std::cell::RefCell::new(&mut tr);
    let mut series = drive(
        cfg.vae_iters,
        cfg.checkpoint_every,
        VAE_LOSS_HEADER,
        &dir.loss_log("vae"),
        || {
            let mut t = cell.borrow_mut();
            let i = t.iteration;
            t.step(dataset).map(|r| (i, r))
        },
        vae_row,
        |done| {
            let t = cell.borrow();
            let ckpt = t.model.to_checkpoint(done, Some(&t.disc));
            let path = dir.checkpoint("vae", done);
            ckpt.save(&path)?;
            ckpt.save(&dir.latest("vae"))?;
            Ok(path)
        },
        progress,
    )?;
    let t = cell.into_inner();
    if series.entries.last().map(|e| e.0) != Some(t.iteration) {
        let ckpt = t.model.to_checkpoint(t.iteration, Some(&t.disc));
        let path = dir.checkpoint("vae", t.iteration);
        ckpt.save(&path)?;
        ckpt.save(&dir.latest("vae"))?;
        series.entries.push((t.iteration, path));
    }
    Ok((tr, series))
}

/// Posterior-mean latents of every clip.
pub fn encode_dataset(vae: &VaeModel, dataset: &[VideoClip]) -> Result<Vec<LatentBundle>> {
    dataset.iter().map(|c| vae.encode(c)).collect()
}

/// Denoiser training for `cfg.ldm_iters` steps on precomputed latents.
pub fn train_ldm(
    cfg: &RunConfig,
    latents: &[LatentBundle],
    dir: &RunDir,
    progress: impl FnMut(u64, &LdmLossReport),
) -> Result<(LdmTrainer, CheckpointSeries)> {
    cfg.validate()?;
    let mut tr = LdmTrainer::new(cfg, latents)?;
    let save_now = |t: &LdmTrainer, done: u64| -> Result<PathBuf> {
        let ckpt: Checkpoint = t.model.to_checkpoint(done, &t.ema.shadow, &t.vae_hash);
        let path = dir.checkpoint("ldm", done);
        ckpt.save(&path)?;
        ckpt.save(&dir.latest("ldm"))?;
        Ok(path)
    };
    let cell = std::cell::RefCell::new(&mut tr);
    let mut series = drive(
        cfg.ldm_iters,
        cfg.checkpoint_every,
        LDM_LOSS_HEADER,
        &dir.loss_log("ldm"),
        || {
            let mut t = cell.borrow_mut();
            let i = t.iteration;
            t.step(latents).map(|r| (i, r))
        },
        ldm_row,
        |done| save_now(&cell.borrow(), done),
        progress,
    )?;
    let t = cell.into_inner();
    if series.entries.last().map(|e| e.0) != Some(t.iteration) {
        series.entries.push((t.iteration, save_now(t, t.iteration)?));
    }
    Ok((tr, series))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_dataset, SceneDistribution};

    fn tiny() -> RunConfig {
        RunConfig {
            resolution: 16,
            frames: 2,
            f_c: 2,
            f_u: 4,
            vae_hidden: 8,
            vae_res_layers: 1,
            disc_hidden: 4,
            vae_iters: 3,
            adv_warmup_iters: 1,
            model_dim: 8,
            channel_multiplies: vec![1],
            attention_resolutions: vec![4],
            ldm_batch: 1,
            ldm_iters: 3,
            ema_interval: 1,
            checkpoint_every: 2,
            ..RunConfig::default()
        }
    }

    #[test]
    fn failing_step_keeps_earlier_checkpoints_and_log() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("loss.csv");
        let mut i = 0u64;
        let saved = std::cell::RefCell::new(Vec::new());
        let err = drive(
            10,
            2,
            "iteration,x",
            &log,
            || {
                i += 1;
                if i == 4 {
                    Err(Error::TrainingDivergence { iteration: 3, report: "x=NaN".into() })
                } else {
                    Ok((i - 1, i as f64))
                }
            },
            |i, r| format!("{i},{r}\n"),
            |done| {
                saved.borrow_mut().push(done);
                Ok(PathBuf::from(done.to_string()))
            },
            |_, _| {},
        )
        .unwrap_err();
        assert!(matches!(err, Error::TrainingDivergence { iteration: 3, .. }));
        assert_eq!(*saved.borrow(), vec![2]);
        assert_eq!(std::fs::read_to_string(&log).unwrap(), "iteration,x\n0,1\n1,2\n2,3\n");
    }

    #[test]
    fn both_stages_write_series_logs_and_loadable_checkpoints() {
        let cfg = tiny();
        let data: Vec<VideoClip> = generate_dataset(3, &SceneDistribution::for_resolution(16, 2), 0).unwrap().into_iter().map(|c| c.0).collect();
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path().join("run")).unwrap();
        let (vae, series) = train_vae(&cfg, &data, &run, |_, _| {}).unwrap();
        assert_eq!(series.entries.iter().map(|e| e.0).collect::<Vec<_>>(), vec![2, 3]);
        let csv = std::fs::read_to_string(run.loss_log("vae")).unwrap();
        assert_eq!(csv.lines().next(), Some(VAE_LOSS_HEADER));
        assert_eq!(csv.lines().count(), 4);
        let loaded = VaeModel::from_checkpoint(&Checkpoint::load(&run.latest("vae")).unwrap()).unwrap();
        assert_eq!(loaded.params, vae.model.params);

        let latents = encode_dataset(&vae.model, &data).unwrap();
        let (ldm, series) = train_ldm(&cfg, &latents, &run, |_, _| {}).unwrap();
        assert_eq!(series.entries.len(), 2);
        let csv = std::fs::read_to_string(run.loss_log("ldm")).unwrap();
        assert_eq!(csv.lines().next(), Some(LDM_LOSS_HEADER));
        let ckpt = Checkpoint::load(&run.latest("ldm")).unwrap();
        assert_eq!(ckpt.iteration().unwrap(), 3);
        assert_eq!(crate::ldm::LdmModel::from_checkpoint(&ckpt, true).unwrap().params, ldm.ema.shadow);
        crate::ldm::LdmModel::check_vae(&ckpt, &vae.model).unwrap();
    }
}
