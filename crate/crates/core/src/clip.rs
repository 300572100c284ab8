//! Clip container: a 16-byte header (12-byte magic, u32 LE version), four u32 LE
//! dims, then a row-major f32 LE payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 12] = b"COMUNICLIP\0\0";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 32;

/// T×H×W×C frames with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub dims: [usize; 4],
    pub data: Vec<f32>,
    /// Metadata only, not stored in the container.
    pub fps: Option<u32>,
}

impl VideoClip {
    pub fn new(dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("dims {dims:?} do not match {} values", data.len())));
        }
        Ok(Self { dims, data, fps: None })
    }

    pub fn frames(&self) -> usize {
        self.dims[0]
    }

    pub fn height(&self) -> usize {
        self.dims[1]
    }

    pub fn width(&self) -> usize {
        self.dims[2]
    }

    pub fn channels(&self) -> usize {
        self.dims[3]
    }

    pub fn frame_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    /// Checks the clip invariants for a model with unique downsampling `f_u`.
    pub fn validate(&self, f_u: usize) -> Result<()> {
        let [t, h, w, c] = self.dims;
        if t < 1 {
            return Err(Error::Shape("clip has no frames".into()));
        }
        if c != 3 {
            return Err(Error::Shape(format!("clip has {c} channels, expected 3")));
        }
        if h % f_u != 0 || w % f_u != 0 {
            return Err(Error::Shape(format!("frame size {h}×{w} not divisible by {f_u}")));
        }
        if let Some(v) = self.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Range(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&self.dims, self.data.clone())
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        if t.rank() != 4 {
            return Err(Error::Shape(format!("expected a rank-4 tensor, got {:?}", t.shape())));
        }
        Self::new([t.dim(0), t.dim(1), t.dim(2), t.dim(3)], t.to_vec())
    }

    /// Frames `start..start+len`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Self {
        let n = self.frame_len();
        Self {
            dims: [len, self.dims[1], self.dims[2], self.dims[3]],
            data: self.data[start * n..(start + len) * n].to_vec(),
            fps: self.fps,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_array4(path, self.dims, &self.data)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (dims, data) = read_array4(path)?;
        Self::new(dims, data)
    }
}

pub fn encode_array4(dims: [usize; 4], data: &[f32]) -> Result<Vec<u8>> {
    let mut dims32 = [0u32; 4];
    for (d, &v) in dims32.iter_mut().zip(&dims) {
        *d = u32::try_from(v).map_err(|_| Error::Range(format!("dimension {v} exceeds u32")))?;
    }
    let count = checked_count(&dims32)?;
    if count != data.len() {
        return Err(Error::Shape(format!("dims {dims:?} do not match {} values", data.len())));
    }
    let mut bytes = Vec::with_capacity(HEADER_BYTES + 4 * count);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    for d in dims32 {
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(bytes)
}

pub fn decode_array4(bytes: &[u8]) -> Result<([usize; 4], Vec<f32>)> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::Format(format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    if &bytes[..12] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(12);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let dims32 = [word(16), word(20), word(24), word(28)];
    let count = checked_count(&dims32)?;
    let payload = &bytes[HEADER_BYTES..];
    if payload.len() != count * 4 {
        return Err(Error::Format(format!("payload is {} bytes, dims {dims32:?} need {}", payload.len(), count * 4)));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((dims32.map(|d| d as usize), data))
}

fn checked_count(dims: &[u32; 4]) -> Result<usize> {
    dims.iter()
        .try_fold(4usize, |acc, &d| acc.checked_mul(d as usize))
        .map(|bytes| bytes / 4)
        .ok_or_else(|| Error::Range(format!("dims {dims:?} overflow the address space")))
}

pub fn write_array4(path: &Path, dims: [usize; 4], data: &[f32]) -> Result<()> {
    write_atomic(path, &encode_array4(dims, data)?)
}

pub fn read_array4(path: &Path) -> Result<([usize; 4], Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_array4(&bytes)
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}
