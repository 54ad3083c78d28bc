//! On-disk formats: TNSR tensors, PGM/PPM images, checkpoint archives.
//!
//! TNSR layout: magic bytes `T N S R`, one version byte (1), one dtype byte
//! (0 = 32-bit float), one byte for the number of dimensions, the dimensions
//! as unsigned 32-bit little-endian integers, then the row-major payload as
//! 32-bit little-endian floats. Tensors are narrowed to 32 bits on save and
//! widened back on load.
//!
//! Images are binary PGM (P5, grayscale) or PPM (P6, RGB) with maxval 255;
//! byte values map linearly to `[0, 1]`.
//!
//! All writers go through a temp-file-and-rename so a failed write never
//! leaves a partial output behind.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::num::Real;
use crate::sampler::ImageBuffer;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic in {0}")]
    BadMagic(String),
    #[error("unsupported {0}")]
    Unsupported(String),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, FormatError>;

const TNSR_MAGIC: &[u8; 4] = b"TNSR";

/// Serialize a tensor into TNSR bytes.
pub fn tensor_to_bytes<T: Real>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let shape = t.shape();
    if shape.len() > u8::MAX as usize {
        return Err(FormatError::Unsupported(format!(
            "{}-dimensional tensor",
            shape.len()
        )));
    }
    let mut out = Vec::with_capacity(7 + 4 * shape.len() + 4 * t.numel());
    out.extend_from_slice(TNSR_MAGIC);
    out.push(1); // version
    out.push(0); // dtype: f32
    out.push(shape.len() as u8);
    for &d in shape {
        let d = u32::try_from(d)
            .map_err(|_| FormatError::Unsupported(format!("dimension {d}")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parse one TNSR tensor from the front of `bytes`, returning the tensor and
/// the number of bytes consumed.
pub fn tensor_from_bytes<T: Real>(bytes: &[u8]) -> Result<(Tensor<T>, usize)> {
    if bytes.len() < 7 {
        return Err(FormatError::Corrupt("truncated TNSR header".into()));
    }
    if &bytes[0..4] != TNSR_MAGIC {
        return Err(FormatError::BadMagic("TNSR tensor".into()));
    }
    if bytes[4] != 1 {
        return Err(FormatError::Unsupported(format!("TNSR version {}", bytes[4])));
    }
    if bytes[5] != 0 {
        return Err(FormatError::Unsupported(format!("TNSR dtype {}", bytes[5])));
    }
    let ndim = bytes[6] as usize;
    let dims_end = 7 + 4 * ndim;
    if bytes.len() < dims_end {
        return Err(FormatError::Corrupt("truncated TNSR dims".into()));
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let off = 7 + 4 * i;
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        shape.push(d);
    }
    let numel: usize = shape.iter().product();
    let end = dims_end + 4 * numel;
    if bytes.len() < end {
        return Err(FormatError::Corrupt("truncated TNSR payload".into()));
    }
    let data = bytes[dims_end..end]
        .chunks_exact(4)
        .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Ok((Tensor::new(shape, data)?, end))
}

/// Write `bytes` to `path` atomically: temp file in the same directory, then
/// rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp).to_path_buf();
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_tensor<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    write_atomic(path, &tensor_to_bytes(t)?)
}

pub fn load_tensor<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (t, used) = tensor_from_bytes(&bytes)?;
    if used != bytes.len() {
        return Err(FormatError::Corrupt(format!(
            "{} trailing bytes after tensor",
            bytes.len() - used
        )));
    }
    Ok(t)
}

fn quantize<T: Real>(v: T) -> u8 {
    let x = (v.to_f64_lossy() * 255.0).round();
    x.clamp(0.0, 255.0) as u8
}

/// Encode a grayscale image as binary PGM (P5) or an RGB image as PPM (P6).
pub fn image_to_bytes<T: Real>(img: &ImageBuffer<T>) -> Vec<u8> {
    let (h, w) = (img.height(), img.width());
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    if img.channels() == 1 {
        out.extend(img.plane(0).iter().map(|&v| quantize(v)));
    } else {
        let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
        for i in 0..h * w {
            out.push(quantize(r[i]));
            out.push(quantize(g[i]));
            out.push(quantize(b[i]));
        }
    }
    out
}

fn parse_netpbm_header(bytes: &[u8]) -> Result<(u8, usize, usize, usize)> {
    if bytes.len() < 2 || bytes[0] != b'P' || (bytes[1] != b'5' && bytes[1] != b'6') {
        return Err(FormatError::BadMagic("PGM/PPM image".into()));
    }
    let kind = bytes[1];
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comment lines
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(FormatError::Corrupt("bad netpbm header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| FormatError::Corrupt("bad netpbm number".into()))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(FormatError::Corrupt("bad netpbm header end".into()));
    }
    pos += 1;
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(FormatError::Unsupported(format!("netpbm maxval {maxval}")));
    }
    Ok((kind, w, h, pos))
}

/// Decode a binary PGM or PPM image.
pub fn image_from_bytes<T: Real>(bytes: &[u8]) -> Result<ImageBuffer<T>> {
    let (kind, w, h, pos) = parse_netpbm_header(bytes)?;
    let channels = if kind == b'5' { 1 } else { 3 };
    let need = w * h * channels;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(FormatError::Corrupt("truncated netpbm payload".into()));
    }
    let scale = T::from_f64_lossy(1.0 / 255.0);
    let mut data = vec![T::zero(); need];
    if channels == 1 {
        for (i, &b) in payload[..need].iter().enumerate() {
            data[i] = T::from_usize_lossy(b as usize) * scale;
        }
    } else {
        // interleaved on disk, planar in memory
        for i in 0..w * h {
            for c in 0..3 {
                data[c * w * h + i] = T::from_usize_lossy(payload[i * 3 + c] as usize) * scale;
            }
        }
    }
    Ok(ImageBuffer::new(h, w, channels, data)?)
}

pub fn save_image<T: Real>(path: &Path, img: &ImageBuffer<T>) -> Result<()> {
    write_atomic(path, &image_to_bytes(img))
}

pub fn load_image<T: Real>(path: &Path) -> Result<ImageBuffer<T>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    image_from_bytes(&bytes)
}

/// Checkpoint archive: a text manifest (one `name<TAB>d0xd1x...` line per
/// parameter), a blank line, then the TNSR blobs concatenated in manifest
/// order.
pub fn checkpoint_to_bytes<T: Real>(params: &[(String, Tensor<T>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for (name, t) in params {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        out.extend_from_slice(format!("{name}\t{}\n", dims.join("x")).as_bytes());
    }
    out.push(b'\n');
    for (_, t) in params {
        out.extend_from_slice(&tensor_to_bytes(t)?);
    }
    Ok(out)
}

pub fn checkpoint_from_bytes<T: Real>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let sep = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| FormatError::Corrupt("checkpoint manifest not terminated".into()))?;
    let manifest = std::str::from_utf8(&bytes[..sep + 1])
        .map_err(|_| FormatError::Corrupt("manifest is not UTF-8".into()))?;
    let mut entries = Vec::new();
    for line in manifest.lines() {
        let (name, dims) = line
            .split_once('\t')
            .ok_or_else(|| FormatError::Corrupt(format!("bad manifest line: {line}")))?;
        let shape: Vec<usize> = dims
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| FormatError::Corrupt(format!("bad shape in: {line}")))?;
        entries.push((name.to_string(), shape));
    }
    let mut pos = sep + 2;
    let mut params = Vec::with_capacity(entries.len());
    for (name, shape) in entries {
        let (t, used) = tensor_from_bytes::<T>(&bytes[pos..])?;
        if t.shape() != shape.as_slice() {
            return Err(FormatError::Corrupt(format!(
                "shape of {name} disagrees with manifest: {:?} vs {shape:?}",
                t.shape()
            )));
        }
        pos += used;
        params.push((name, t));
    }
    Ok(params)
}

pub fn save_checkpoint<T: Real>(path: &Path, params: &[(String, Tensor<T>)]) -> Result<()> {
    write_atomic(path, &checkpoint_to_bytes(params)?)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tnsr_header_layout_is_bit_exact() {
        let t = Tensor::new(vec![2, 1, 2], vec![1.0f64, 0.0, -2.0, 0.5]).unwrap();
        let b = tensor_to_bytes(&t).unwrap();
        assert_eq!(&b[0..4], b"TNSR");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 0);
        assert_eq!(b[6], 3);
        assert_eq!(&b[7..11], &2u32.to_le_bytes());
        assert_eq!(&b[11..15], &1u32.to_le_bytes());
        assert_eq!(&b[15..19], &2u32.to_le_bytes());
        assert_eq!(&b[19..23], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 19 + 16);
    }

    #[test]
    fn tnsr_roundtrip() {
        let t = Tensor::new(vec![3, 2], vec![0.25f64, -1.5, 3.0, 0.0, 10.0, -0.125]).unwrap();
        let b = tensor_to_bytes(&t).unwrap();
        let (back, used) = tensor_from_bytes::<f64>(&b).unwrap();
        assert_eq!(used, b.len());
        assert_eq!(back, t);
    }

    #[test]
    fn tnsr_rejects_garbage() {
        assert!(tensor_from_bytes::<f64>(b"TNSX\x01\x00\x01").is_err());
        assert!(tensor_from_bytes::<f64>(b"TN").is_err());
        let t = Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap();
        let mut b = tensor_to_bytes(&t).unwrap();
        b.truncate(b.len() - 1);
        assert!(tensor_from_bytes::<f64>(&b).is_err());
    }

    #[test]
    fn pgm_roundtrip() {
        let img =
            ImageBuffer::<f64>::new(2, 3, 1, vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1]).unwrap();
        let b = image_to_bytes(&img);
        assert!(b.starts_with(b"P5\n3 2\n255\n"));
        let back = image_from_bytes::<f64>(&b).unwrap();
        assert_eq!(back.height(), 2);
        assert_eq!(back.width(), 3);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn ppm_roundtrip_planar_interleave() {
        let img = ImageBuffer::<f64>::new(2, 2, 3, vec![
            1.0, 0.0, 0.0, 0.0, // red plane
            0.0, 1.0, 0.0, 0.0, // green plane
            0.0, 0.0, 1.0, 0.0, // blue plane
        ])
        .unwrap();
        let b = image_to_bytes(&img);
        assert!(b.starts_with(b"P6\n2 2\n255\n"));
        let back = image_from_bytes::<f64>(&b).unwrap();
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let params = vec![
            ("conv1".to_string(), Tensor::new(vec![2, 1, 3, 3], (0..18).map(|v| v as f64).collect()).unwrap()),
            ("fc_w".to_string(), Tensor::new(vec![2, 4], vec![0.5f64; 8]).unwrap()),
        ];
        let b = checkpoint_to_bytes(&params).unwrap();
        let back = checkpoint_from_bytes::<f64>(&b).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "conv1");
        assert_eq!(back[0].1, params[0].1);
        assert_eq!(back[1].1, params[1].1);
    }

    #[test]
    fn atomic_write_creates_no_partial_on_success_path() {
        let dir = std::env::temp_dir().join("tasn-io-test");
        let path = dir.join("t.tnsr");
        let t = Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap();
        save_tensor(&path, &t).unwrap();
        assert!(path.exists());
        assert!(!dir.join("t.tnsr.tmp").exists());
        let _ = fs::remove_dir_all(&dir);
    }
}
