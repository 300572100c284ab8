//! Binary checkpoint container: a text header (kind, config, metadata) followed by
//! named little-endian f32 blobs.
//!
//! Layout: magic, u32 version, u32 header length, UTF-8 header, u32 blob count, then
//! per blob u32 name length, name, u32 rank, u64 dims, f32 values. Writing a decoded
//! checkpoint reproduces the input bytes.

use std::fs;
use std::path::Path;

use crate::clip::write_atomic;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::ldm::{LatentScale, LdmModel};
use crate::nn::ParamStore;
use crate::vae::disc::DiscModel;
use crate::vae::VaeModel;

pub const MAGIC: &[u8; 12] = b"COMUNICKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: RunConfig,
    /// Extra `key = value` entries, in order.
    pub meta: Vec<(String, String)>,
    pub blobs: Vec<Blob>,
}

impl Checkpoint {
    pub fn new(kind: &str, config: &RunConfig) -> Self {
        Self { kind: kind.into(), config: config.clone(), meta: Vec::new(), blobs: Vec::new() }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.push((key.into(), value.to_string()));
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn meta_parsed<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.meta(key).ok_or_else(|| Error::Format(format!("checkpoint has no {key:?} entry")))?;
        raw.parse().map_err(|_| Error::Format(format!("bad {key:?} value {raw:?}")))
    }

    pub fn iteration(&self) -> Result<u64> {
        self.meta_parsed("iteration")
    }

    /// Appends every entry of `store`, prefixing names with `prefix`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for e in store.entries() {
            self.blobs.push(Blob { name: format!("{prefix}{}", e.name), shape: e.shape.clone(), data: e.data.clone() });
        }
    }

    /// Fills `store` from the blobs under `prefix`; every parameter must be present with its shape.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        let mut used = 0;
        for e in store.entries_mut() {
            let name = format!("{prefix}{}", e.name);
            let blob = self
                .blobs
                .iter()
                .find(|b| b.name == name)
                .ok_or_else(|| Error::Compatibility(format!("checkpoint lacks parameter {name}")))?;
            if blob.shape != e.shape {
                return Err(Error::Compatibility(format!("{name} has shape {:?}, model expects {:?}", blob.shape, e.shape)));
            }
            e.data.clone_from(&blob.data);
            used += 1;
        }
        let available = self.blobs.iter().filter(|b| b.name.starts_with(prefix)).count();
        if available != used {
            return Err(Error::Compatibility(format!("checkpoint has {available} {prefix:?} parameters, model has {used}")));
        }
        Ok(())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Compatibility(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    fn header(&self) -> String {
        let mut s = format!("kind = {}\nconfig_hash = {}\n", self.kind, self.config.hash());
        for (k, v) in &self.meta {
            s.push_str(&format!("meta.{k} = {v}\n"));
        }
        s.push_str("---\n");
        s.push_str(&self.config.to_kv_string());
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header();
        let payload: usize = self.blobs.iter().map(|b| 12 + b.name.len() + 8 * b.shape.len() + 4 * b.data.len()).sum();
        let mut out = Vec::with_capacity(24 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for b in &self.blobs {
            out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
            for &d in &b.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(12)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format("header is not UTF-8".into()))?;
        let (head, body) = header.split_once("---\n").ok_or_else(|| Error::Format("header has no config section".into()))?;
        let config = RunConfig::from_kv_str(body)?;
        let mut kind = None;
        let mut hash = None;
        let mut meta = Vec::new();
        for line in head.lines() {
            let (k, v) = line.split_once(" = ").ok_or_else(|| Error::Format(format!("bad header line {line:?}")))?;
            match k {
                "kind" => kind = Some(v.to_string()),
                "config_hash" => hash = Some(v.to_string()),
                _ => {
                    let key = k.strip_prefix("meta.").ok_or_else(|| Error::Format(format!("unknown header key {k:?}")))?;
                    meta.push((key.to_string(), v.to_string()));
                }
            }
        }
        let kind = kind.ok_or_else(|| Error::Format("header has no kind".into()))?;
        if hash.as_deref() != Some(config.hash().as_str()) {
            return Err(Error::Format("config hash does not match the stored config".into()));
        }
        let count = r.u32()? as usize;
        let mut blobs = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format("blob name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Range("dimension overflows usize".into()))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some())
                .ok_or_else(|| Error::Range(format!("blob {name} shape {shape:?} overflows")))?;
            let data = r.take(4 * numel)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            blobs.push(Blob { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { kind, config, meta, blobs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub const VAE_KIND: &str = "vae";
pub const LDM_KIND: &str = "ldm";

impl VaeModel {
    /// Autoencoder weights, plus the discriminator when given.
    pub fn to_checkpoint(&self, iteration: u64, disc: Option<&DiscModel>) -> Checkpoint {
        let mut c = Checkpoint::new(VAE_KIND, self.cfg())
            .with_meta("iteration", iteration)
            .with_meta("vae_hash", self.cfg().vae_hash());
        c.push_store("vae.", &self.params);
        if let Some(d) = disc {
            c.push_store("disc.", &d.params);
        }
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(VAE_KIND)?;
        let mut m = VaeModel::init(&ckpt.config, 0)?;
        ckpt.load_store("vae.", &mut m.params)?;
        Ok(m)
    }
}

impl LdmModel {
    /// Raw and EMA weights, the latent scaling and the autoencoder hash they belong to.
    pub fn to_checkpoint(&self, iteration: u64, ema: &ParamStore<f32>, vae_hash: &str) -> Checkpoint {
        let mut c = Checkpoint::new(LDM_KIND, self.cfg())
            .with_meta("iteration", iteration)
            .with_meta("vae_hash", vae_hash)
            .with_meta("scale_common", self.scale.common)
            .with_meta("scale_unique", self.scale.unique);
        c.push_store("ldm.", &self.params);
        c.push_store("ema.", ema);
        c
    }

    /// Loads the EMA weights when `ema` is set, the raw weights otherwise.
    pub fn from_checkpoint(ckpt: &Checkpoint, ema: bool) -> Result<Self> {
        ckpt.expect_kind(LDM_KIND)?;
        let mut m = LdmModel::init(&ckpt.config, 0)?;
        ckpt.load_store(if ema { "ema." } else { "ldm." }, &mut m.params)?;
        m.scale = LatentScale { common: ckpt.meta_parsed("scale_common")?, unique: ckpt.meta_parsed("scale_unique")? };
        Ok(m)
    }

    /// Fails unless this denoiser was trained on latents of `vae`.
    pub fn check_vae(ckpt: &Checkpoint, vae: &VaeModel) -> Result<()> {
        let want = vae.cfg().vae_hash();
        match ckpt.meta("vae_hash") {
            Some(h) if h == want => Ok(()),
            other => Err(Error::Compatibility(format!("denoiser was trained on autoencoder {other:?}, not {want}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig { resolution: 32, frames: 2, f_c: 4, f_u: 16, vae_hidden: 8, vae_res_layers: 1, model_dim: 8, channel_multiplies: vec![1], ..RunConfig::default() }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let cfg = tiny();
        let m = VaeModel::init(&cfg, 1).unwrap();
        let d = DiscModel::init(2, 4, 2);
        let bytes = m.to_checkpoint(7, Some(&d)).to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.iteration().unwrap(), 7);
        let m2 = VaeModel::from_checkpoint(&back).unwrap();
        assert_eq!(m2.params, m.params);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        back.save(&path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn ldm_round_trip_keeps_scale_and_both_weight_sets() {
        let cfg = tiny();
        let mut m = LdmModel::init(&cfg, 3).unwrap();
        m.scale = LatentScale { common: 0.25, unique: 3.5 };
        let mut ema = m.params.clone();
        ema.entries_mut()[0].data[0] = 42.0;
        let ckpt = Checkpoint::from_bytes(&m.to_checkpoint(9, &ema, "abc").to_bytes()).unwrap();
        let raw = LdmModel::from_checkpoint(&ckpt, false).unwrap();
        let shadow = LdmModel::from_checkpoint(&ckpt, true).unwrap();
        assert_eq!(raw.params, m.params);
        assert_eq!(shadow.params, ema);
        assert_eq!(raw.scale, m.scale);
        let vae = VaeModel::init(&cfg, 0).unwrap();
        assert!(matches!(LdmModel::check_vae(&ckpt, &vae), Err(Error::Compatibility(_))));
    }

    #[test]
    fn mismatched_or_damaged_checkpoints_are_rejected() {
        let cfg = tiny();
        let bytes = VaeModel::init(&cfg, 1).unwrap().to_checkpoint(0, None).to_bytes();
        let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
        assert!(matches!(LdmModel::from_checkpoint(&ckpt, true), Err(Error::Compatibility(_))));

        let mut other = ckpt.clone();
        other.config.vae_hidden = 16;
        assert!(matches!(VaeModel::from_checkpoint(&other), Err(Error::Compatibility(_))));

        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Format(_))));
    }
}
