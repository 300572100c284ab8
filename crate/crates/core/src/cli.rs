//! Command-line surface. `run` returns the process exit status.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::{Checkpoint, LDM_KIND, VAE_KIND};
use crate::clip::{write_atomic, VideoClip};
use crate::config::RunConfig;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::generation::{conditional_generate, sample_video, ConditionSpec, Sampler, Strategy};
use crate::ldm::{shared_times, LdmModel};
use crate::metrics::{evaluate, proxy_fvd};
use crate::nn::Binding;
use crate::synthetic::{generate_dataset, read_dataset, write_dataset, SceneDistribution};
use crate::tensor::Tensor;
use crate::training::{encode_dataset, train_ldm, train_vae, RunDir};
use crate::vae::{LatentBundle, VaeModel};

#[derive(Parser, Debug)]
#[command(name = "comuni", version, about = "Common/unique video latent diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// `key = value` configuration file (defaults when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides a single configuration key, e.g. `--set vae_iters=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum CondMode {
    CommonToUnique,
    UniqueToCommon,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes a synthetic moving-sprite dataset.
    MakeData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
    },
    /// Trains the autoencoder on a dataset directory.
    TrainVae {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the denoiser on latents of a dataset encoded by a trained autoencoder.
    TrainLdm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encodes and decodes one clip.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Decodes the common latent of one clip with the unique latents of another.
    Swap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long = "common-from")]
        common_from: PathBuf,
        #[arg(long = "unique-from")]
        unique_from: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Samples a video, extending it past the clip length when `--frames` asks for more.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        ldm: PathBuf,
        #[arg(long, default_value_t = Strategy::DEFAULT.id())]
        strategy: u8,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        /// Use the raw weights instead of the moving average.
        #[arg(long)]
        no_ema: bool,
        #[arg(long)]
        output: PathBuf,
    },
    /// Generates the missing latent kind of a clip while holding the other.
    CondGen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        ldm: PathBuf,
        #[arg(long, value_enum)]
        mode: CondMode,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long)]
        no_ema: bool,
        #[arg(long)]
        output: PathBuf,
    },
    /// Scores reconstructions of a dataset, or compares two clip directories by proxy-FVD.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Autoencoder used to reconstruct every clip of `--data`.
        #[arg(long, conflicts_with = "generated")]
        vae: Option<PathBuf>,
        /// Directory of `.clip` files compared with `--data` by proxy-FVD only.
        #[arg(long)]
        generated: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Writes the noise schedule as CSV (stdout without `--output`).
    DumpSchedule {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Writes the joint-module attention weights for one encoded clip.
    ExportAttn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        ldm: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Diffusion time in [0, 1] at which the clean latents are presented.
        #[arg(long, default_value_t = 0.0)]
        time: f64,
        #[arg(long)]
        output: PathBuf,
    },
}

/// Parses `argv` (program name first), runs the command and maps errors to exit codes.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Caps rayon's global pool at `COMUNI_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("COMUNI_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| Error::Config(format!("COMUNI_THREADS must be a positive integer, got {v:?}")))?;
    // a second initialisation in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &c.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v.trim()).map_err(Error::Config)?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_vae(path: &Path) -> Result<VaeModel> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.expect_kind(VAE_KIND)?;
    VaeModel::from_checkpoint(&ckpt)
}

fn load_ldm(path: &Path, vae: &VaeModel, ema: bool) -> Result<LdmModel> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.expect_kind(LDM_KIND)?;
    LdmModel::check_vae(&ckpt, vae)?;
    LdmModel::from_checkpoint(&ckpt, ema)
}

fn clips(dir: &Path) -> Result<Vec<VideoClip>> {
    Ok(read_dataset(dir)?.into_iter().map(|(c, _)| c).collect())
}

fn clip_files(dir: &Path) -> Result<Vec<VideoClip>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "clip"))
        .collect();
    paths.sort();
    paths.iter().map(|p| VideoClip::read(p)).collect()
}

fn execute(command: Command) -> Result<()> {
    init_threads()?;
    match command {
        Command::MakeData { common, out, count } => {
            let cfg = load_config(&common)?;
            let items = generate_dataset(count, &SceneDistribution::for_resolution(cfg.resolution, cfg.frames), cfg.seed)?;
            write_dataset(&out, &items)
        }
        Command::TrainVae { common, data, out } => {
            let cfg = load_config(&common)?;
            let dataset = clips(&data)?;
            let dir = RunDir::new(out)?;
            write_atomic(&dir.root.join("config.txt"), cfg.to_kv_string().as_bytes())?;
            let (_, series) = train_vae(&cfg, &dataset, &dir, |i, r| {
                if (i + 1) % 100 == 0 {
                    eprintln!("vae {} {r}", i + 1);
                }
            })?;
            eprintln!("wrote {} checkpoints to {}", series.entries.len(), dir.root.display());
            Ok(())
        }
        Command::TrainLdm { common, data, vae, out } => {
            let cfg = load_config(&common)?;
            let vae = load_vae(&vae)?;
            if vae.cfg().vae_hash() != cfg.vae_hash() {
                return Err(Error::Compatibility(format!(
                    "autoencoder checkpoint has config hash {}, the run config expects {}",
                    vae.cfg().vae_hash(),
                    cfg.vae_hash()
                )));
            }
            let latents = encode_dataset(&vae, &clips(&data)?)?;
            let dir = RunDir::new(out)?;
            write_atomic(&dir.root.join("config.txt"), cfg.to_kv_string().as_bytes())?;
            let (_, series) = train_ldm(&cfg, &latents, &dir, |i, r| {
                if (i + 1) % 100 == 0 {
                    eprintln!("ldm {} {r}", i + 1);
                }
            })?;
            eprintln!("wrote {} checkpoints to {}", series.entries.len(), dir.root.display());
            Ok(())
        }
        Command::Reconstruct { common, vae, input, output } => {
            load_config(&common)?;
            let vae = load_vae(&vae)?;
            vae.reconstruct(&VideoClip::read(&input)?)?.write(&output)
        }
        Command::Swap { common, vae, common_from, unique_from, output } => {
            load_config(&common)?;
            let vae = load_vae(&vae)?;
            vae.swap_recompose(&VideoClip::read(&common_from)?, &VideoClip::read(&unique_from)?)?.write(&output)
        }
        Command::Sample { common, vae, ldm, strategy, frames, stride, no_ema, output } => {
            let run_cfg = load_config(&common)?;
            let vae = load_vae(&vae)?;
            let model = load_ldm(&ldm, &vae, !no_ema)?;
            let strategy = Strategy::new(strategy)?;
            let sampler = Sampler::new(model.cfg(), stride)?;
            let frames = frames.unwrap_or(model.cfg().frames);
            let (latents, manifest) = sample_video(&model, &sampler, frames, strategy, run_cfg.seed)?;
            let clip = vae.decode(&latents)?;
            clip.write(&output)?;
            write_atomic(&sidecar(&output, "manifest"), manifest.to_text().as_bytes())
        }
        Command::CondGen { common, vae, ldm, mode, input, stride, no_ema, output } => {
            let run_cfg = load_config(&common)?;
            let vae = load_vae(&vae)?;
            let model = load_ldm(&ldm, &vae, !no_ema)?;
            let enc = vae.encode(&VideoClip::read(&input)?)?;
            let spec = match mode {
                CondMode::CommonToUnique => ConditionSpec::from_bundle(&enc, true, false),
                CondMode::UniqueToCommon => ConditionSpec::from_bundle(&enc, false, true),
            };
            let sampler = Sampler::new(model.cfg(), stride)?;
            let out = conditional_generate(&model, &sampler, &spec, run_cfg.seed)?;
            vae.decode(&out)?.write(&output)
        }
        Command::Eval { common, data, vae, generated, output } => {
            let cfg = load_config(&common)?;
            let real = clips(&data)?;
            let csv = match (vae, generated) {
                (Some(vae), None) => {
                    let vae = load_vae(&vae)?;
                    let recon = real.iter().map(|c| vae.reconstruct(c)).collect::<Result<Vec<_>>>()?;
                    let names: Vec<String> = (0..real.len()).map(|i| format!("{i:06}")).collect();
                    evaluate(&names, &real, &recon, &vae.cfg().hash())?.to_csv()
                }
                (None, Some(dir)) => {
                    let gen = clip_files(&dir)?;
                    let score = proxy_fvd(&real, &gen)?;
                    format!(
                        "real,generated,proxy_fvd,features,config_hash\n{},{},{score:.6},{},{}\n",
                        real.len(),
                        gen.len(),
                        crate::metrics::PROXY_FEATURES,
                        cfg.hash()
                    )
                }
                _ => return Err(Error::Config("eval needs exactly one of --vae or --generated".into())),
            };
            write_atomic(&output, csv.as_bytes())
        }
        Command::DumpSchedule { common, output } => {
            let cfg = load_config(&common)?;
            let csv = NoiseSchedule::linear(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)?.to_csv();
            match output {
                Some(p) => write_atomic(&p, csv.as_bytes()),
                None => {
                    print!("{csv}");
                    Ok(())
                }
            }
        }
        Command::ExportAttn { common, vae, ldm, input, time, output } => {
            load_config(&common)?;
            let vae = load_vae(&vae)?;
            let model = load_ldm(&ldm, &vae, true)?;
            let enc = vae.encode(&VideoClip::read(&input)?)?;
            write_atomic(&output, attention_csv(&model, &enc, time)?.as_bytes())
        }
    }
}

fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Nonzero joint-attention weights as `module,side,head,query,key,weight` rows. Modules are
/// numbered in execution order; token indices run over (part, row, col) with part 0 the
/// common latent.
pub fn attention_csv(model: &LdmModel, enc: &LatentBundle, time: f64) -> Result<String> {
    let cfg = model.cfg();
    enc.check_shapes(cfg)?;
    if enc.frames() != cfg.frames {
        return Err(Error::Shape(format!("clip has {} frames, the model expects {}", enc.frames(), cfg.frames)));
    }
    let scale = |t: &Tensor<f32>, s: f32| Tensor::from_vec(t.shape(), t.data().iter().map(|v| v * s).collect());
    let p = Binding::frozen(&model.params);
    let (_, maps) = model.arch.predict_noise_with_attention(
        &p,
        &scale(&enc.common, model.scale.common),
        &scale(&enc.unique, model.scale.unique),
        &shared_times(&[time], cfg.frames),
    )?;
    let mut csv = String::from("module,side,head,query,key,weight\n");
    for (m, ((site, module), w)) in model.arch.joint_order().into_iter().zip(&maps).enumerate() {
        let dense = module.dense_weights(w, 1, cfg.frames);
        let (heads, n) = (dense.dim(0), dense.dim(1));
        let d = dense.data();
        for h in 0..heads {
            for q in 0..n {
                for k in 0..n {
                    let v = d[(h * n + q) * n + k];
                    if v != 0.0 {
                        let _ = writeln!(csv, "{m},{},{h},{q},{k},{v}", site.side);
                    }
                }
            }
        }
    }
    Ok(csv)
}
