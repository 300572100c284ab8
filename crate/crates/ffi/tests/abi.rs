use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use comuni::config::RunConfig;
use comuni::ldm::LdmModel;
use comuni::synthetic::{generate_dataset, SceneDistribution};
use comuni::vae::VaeModel;
use comuni_ffi::*;

fn tiny() -> RunConfig {
    RunConfig {
        resolution: 16,
        frames: 2,
        f_c: 2,
        f_u: 4,
        vae_hidden: 8,
        vae_res_layers: 1,
        disc_hidden: 4,
        diffusion_steps: 10,
        beta_end: 0.02,
        model_dim: 8,
        channel_multiplies: vec![1],
        attention_resolutions: vec![4],
        ..RunConfig::default()
    }
}

fn write_models(dir: &Path) -> (CString, CString) {
    let cfg = tiny();
    let vae = VaeModel::init(&cfg, 1).unwrap();
    let ldm = LdmModel::init(&cfg, 2).unwrap();
    let (pv, pl) = (dir.join("vae.ckpt"), dir.join("ldm.ckpt"));
    vae.to_checkpoint(0, None).save(&pv).unwrap();
    ldm.to_checkpoint(0, &ldm.params, &cfg.vae_hash()).save(&pl).unwrap();
    (CString::new(pv.to_str().unwrap()).unwrap(), CString::new(pl.to_str().unwrap()).unwrap())
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(comuni_last_error()).to_string_lossy().into_owned() }
}

#[test]
fn load_reconstruct_swap_and_sample() {
    let dir = tempfile::tempdir().unwrap();
    let (pv, pl) = write_models(dir.path());
    let clips = generate_dataset(2, &SceneDistribution::for_resolution(16, 2), 0).unwrap();
    let (a, b) = (&clips[0].0.data, &clips[1].0.data);
    unsafe {
        let mut vae = ptr::null_mut();
        assert_eq!(comuni_vae_load(pv.as_ptr(), &mut vae), ComuniStatus::Ok);
        assert_eq!(last_error(), "");
        let mut dims = [0usize; 4];
        assert_eq!(comuni_vae_clip_dims(vae, dims.as_mut_ptr()), ComuniStatus::Ok);
        assert_eq!(dims, [2, 16, 16, 3]);

        let mut out = vec![0f32; a.len()];
        assert_eq!(comuni_vae_reconstruct(vae, a.as_ptr(), a.len(), out.as_mut_ptr(), out.len()), ComuniStatus::Ok);
        let model = VaeModel::from_checkpoint(&comuni::checkpoint::Checkpoint::load(Path::new(pv.to_str().unwrap())).unwrap()).unwrap();
        assert_eq!(out, model.reconstruct(&clips[0].0).unwrap().data);
        assert_eq!(comuni_vae_swap(vae, a.as_ptr(), b.as_ptr(), a.len(), out.as_mut_ptr(), out.len()), ComuniStatus::Ok);
        assert_eq!(out, model.swap_recompose(&clips[0].0, &clips[1].0).unwrap().data);

        let mut small = vec![0f32; 10];
        assert_eq!(comuni_vae_reconstruct(vae, a.as_ptr(), a.len(), small.as_mut_ptr(), small.len()), ComuniStatus::BufferTooSmall);
        assert!(last_error().contains("10"));
        assert_eq!(comuni_vae_reconstruct(vae, a.as_ptr(), a.len() - 1, out.as_mut_ptr(), out.len()), ComuniStatus::Shape);

        let mut ldm = ptr::null_mut();
        assert_eq!(comuni_ldm_load(pl.as_ptr(), vae, true, &mut ldm), ComuniStatus::Ok);
        let mut video = vec![0f32; 4 * 16 * 16 * 3];
        let mut again = video.clone();
        assert_eq!(comuni_sample(ldm, vae, 6, 4, 2, 9, video.as_mut_ptr(), video.len()), ComuniStatus::Ok);
        assert_eq!(comuni_sample(ldm, vae, 6, 4, 2, 9, again.as_mut_ptr(), again.len()), ComuniStatus::Ok);
        assert_eq!(video, again);
        assert!(video.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(comuni_sample(ldm, vae, 7, 4, 2, 9, video.as_mut_ptr(), video.len()), ComuniStatus::Config);

        comuni_ldm_free(ldm);
        comuni_vae_free(vae);
        comuni_vae_free(ptr::null_mut());
    }
}

#[test]
fn error_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (pv, pl) = write_models(dir.path());
    unsafe {
        let mut vae = ptr::null_mut();
        assert_eq!(comuni_vae_load(ptr::null(), &mut vae), ComuniStatus::NullArgument);
        assert_eq!(comuni_vae_load(pv.as_ptr(), ptr::null_mut()), ComuniStatus::NullArgument);
        let missing = CString::new(dir.path().join("missing.ckpt").to_str().unwrap()).unwrap();
        assert_eq!(comuni_vae_load(missing.as_ptr(), &mut vae), ComuniStatus::Io);
        assert!(last_error().contains("missing.ckpt"));
        assert_eq!(comuni_vae_load(pl.as_ptr(), &mut vae), ComuniStatus::Compatibility);
        let junk = dir.path().join("junk.ckpt");
        std::fs::write(&junk, b"junk").unwrap();
        let junk = CString::new(junk.to_str().unwrap()).unwrap();
        assert_eq!(comuni_vae_load(junk.as_ptr(), &mut vae), ComuniStatus::Format);
        assert!(vae.is_null());

        // denoiser trained against a different autoencoder layout
        let other = RunConfig { vae_hidden: 12, ..tiny() };
        VaeModel::init(&other, 1).unwrap().to_checkpoint(0, None).save(&dir.path().join("other.ckpt")).unwrap();
        let po = CString::new(dir.path().join("other.ckpt").to_str().unwrap()).unwrap();
        assert_eq!(comuni_vae_load(po.as_ptr(), &mut vae), ComuniStatus::Ok);
        let mut ldm = ptr::null_mut();
        assert_eq!(comuni_ldm_load(pl.as_ptr(), vae, true, &mut ldm), ComuniStatus::Compatibility);
        comuni_vae_free(vae);
    }
}

#[test]
fn metrics() {
    let a = vec![0.5f32; 12 * 12 * 3];
    let b = vec![0.6f32; 12 * 12 * 3];
    let mut v = 0.0;
    unsafe {
        assert_eq!(comuni_psnr(a.as_ptr(), a.as_ptr(), a.len(), &mut v), ComuniStatus::Ok);
        assert_eq!(v, 99.0);
        assert_eq!(comuni_psnr(a.as_ptr(), b.as_ptr(), a.len(), &mut v), ComuniStatus::Ok);
        assert!((v - 20.0).abs() < 1e-5);
        assert_eq!(comuni_ssim(a.as_ptr(), a.as_ptr(), 12, 12, 3, &mut v), ComuniStatus::Ok);
        assert!((v - 1.0).abs() < 1e-12);
        assert_eq!(comuni_ssim(a.as_ptr(), a.as_ptr(), 4, 4, 27, &mut v), ComuniStatus::Shape);
        assert_eq!(comuni_psnr(a.as_ptr(), ptr::null(), a.len(), &mut v), ComuniStatus::NullArgument);
        assert!(!CStr::from_ptr(comuni_version()).to_bytes().is_empty());
    }
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"comuni.h\"\nint main(void) { ComuniVae *v = 0; ComuniStatus s = comuni_vae_load(\"x\", &v); comuni_vae_free(v); return s == COMUNI_STATUS_OK; }\n",
    )
    .unwrap();
    let Ok(status) = std::process::Command::new("cc").arg("-fsyntax-only").arg("-Wall").arg("-Werror").arg("-I").arg(&header).arg(&src).status() else {
        eprintln!("no C compiler; skipped");
        return;
    };
    assert!(status.success());
}
