//! On-disk formats.
//!
//! Image file (`.img`): magic `DDAI`, `u32` version, `u32` channels, height
//! and width, then `C*H*W` `f32` values in channel-major order, all
//! little-endian.
//!
//! Checkpoint (`.ckpt`): magic `DDAICKPT`, `u32` version, `u32` layer count
//! `n`, `n` `u32` layer widths, `u32` diffusion steps `T`, `u32` time
//! embedding width, then every parameter as a little-endian `f64`, layer by
//! layer (weights row-major, then biases).
//!
//! Graymap export writes binary PGM (`P5`, 8-bit) for viewing only.

use std::fs;
use std::io::Write;
use std::path::Path;

use ddim_anomaly_core::nn::{ConditionedNet, DenseNet, TimeEmbedding};
use ddim_anomaly_core::{ImageTensor, Shape};

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: &[u8; 4] = b"DDAI";
pub const IMAGE_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DDAICKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const IMAGE_HEADER: usize = 4 + 4 * 4;

pub fn encode_image(image: &ImageTensor) -> Vec<u8> {
    let shape = image.shape();
    let mut out = Vec::with_capacity(IMAGE_HEADER + 4 * image.len());
    out.extend_from_slice(IMAGE_MAGIC);
    for v in [IMAGE_VERSION, shape.channels as u32, shape.height as u32, shape.width as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in image.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_image(bytes: &[u8]) -> Result<ImageTensor> {
    if bytes.len() < IMAGE_HEADER {
        return Err(Error::CorruptHeader(format!(
            "image header needs {IMAGE_HEADER} bytes, found {}",
            bytes.len()
        )));
    }
    if &bytes[..4] != IMAGE_MAGIC {
        return Err(Error::CorruptHeader("bad image magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != IMAGE_VERSION {
        return Err(Error::UnsupportedVersion { found: version, expected: IMAGE_VERSION });
    }
    let shape = Shape::new(word(1) as usize, word(2) as usize, word(3) as usize);
    if shape.is_empty() {
        return Err(Error::CorruptHeader(format!("empty image shape {shape}")));
    }
    let payload = &bytes[IMAGE_HEADER..];
    let expected = shape.len() * 4;
    if payload.len() != expected {
        return Err(Error::PayloadLength { expected, found: payload.len() });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(ImageTensor::new(shape, data)?)
}

pub fn save_image(path: &Path, image: &ImageTensor) -> Result<()> {
    write_file(path, &encode_image(image))
}

pub fn load_image(path: &Path) -> Result<ImageTensor> {
    decode_image(&read_file(path)?).map_err(|e| e.in_file(path))
}

/// 8-bit graymap of channel `channel`. Values are mapped linearly from
/// `[0, max]` to `[0, 255]` and clamped; `max` defaults to 1.
pub fn encode_pgm(image: &ImageTensor, channel: usize, max: Option<f64>) -> Vec<u8> {
    let max = max.filter(|m| *m > 0.0).unwrap_or(1.0);
    let mut out = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(
        image
            .channel(channel)
            .iter()
            .map(|&v| (v / max * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    out
}

pub fn save_pgm(path: &Path, image: &ImageTensor, channel: usize, max: Option<f64>) -> Result<()> {
    write_file(path, &encode_pgm(image, channel, max))
}

/// A network checkpoint together with the schedule length it was trained for.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: ConditionedNet,
    pub steps: usize,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let net = ckpt.net.net();
    let dims = net.layer_dims();
    let mut out = Vec::with_capacity(32 + 4 * dims.len() + 8 * net.parameter_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(ckpt.steps as u32).to_le_bytes());
    out.extend_from_slice(&(ckpt.net.embedding().dim() as u32).to_le_bytes());
    for p in net.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

/// What a loaded checkpoint must match.
#[derive(Debug, Clone, Default)]
pub struct CheckpointExpectation<'a> {
    pub layer_dims: Option<&'a [usize]>,
    pub steps: Option<usize>,
}

pub fn decode_checkpoint(bytes: &[u8], expect: &CheckpointExpectation<'_>) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).ok() != Some(&CHECKPOINT_MAGIC[..]) {
        return Err(Error::CorruptHeader("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion { found: version, expected: CHECKPOINT_VERSION });
    }
    let n = r.u32()? as usize;
    if !(2..=64).contains(&n) {
        return Err(Error::CorruptHeader(format!("implausible layer count {n}")));
    }
    let dims = (0..n).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let steps = r.u32()? as usize;
    let embed = r.u32()? as usize;
    if let Some(want) = expect.layer_dims {
        if want != dims.as_slice() {
            return Err(Error::CheckpointMismatch(format!("layer dims {dims:?}, expected {want:?}")));
        }
    }
    if let Some(want) = expect.steps {
        if want != steps {
            return Err(Error::CheckpointMismatch(format!("trained for T={steps}, expected T={want}")));
        }
    }
    let template = DenseNet::zeros(&dims)?;
    let payload = &bytes[r.pos..];
    let expected = template.parameter_count() * 8;
    if payload.len() != expected {
        return Err(Error::PayloadLength { expected, found: payload.len() });
    }
    let params = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let net = ConditionedNet::new(DenseNet::from_params(&dims, params)?, TimeEmbedding::new(embed)?)?;
    Ok(Checkpoint { net, steps })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_file(path, &encode_checkpoint(ckpt))
}

pub fn load_checkpoint(path: &Path, expect: &CheckpointExpectation<'_>) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?, expect).map_err(|e| e.in_file(path))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::CorruptHeader("checkpoint header truncated".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}
