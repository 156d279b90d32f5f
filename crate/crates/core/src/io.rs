//! Tensor files and checkpoints.
//!
//! Tensor file layout, all little-endian:
//!
//! ```text
//! "CRVT" | version u8 = 1 | dtype u8 (0 f32, 1 f64) | ndim u8 | reserved u8 = 0
//! dims: ndim x u32 | payload: row-major elements
//! ```
//!
//! Checkpoint layout:
//!
//! ```text
//! "CRVK" | version u8 = 1 | 3 reserved zero bytes | text_len u64
//! text (UTF-8): manifest, then the model config echo
//! blobs: one tensor file per manifest entry, concatenated
//! ```
//!
//! The manifest starts with `config_hash <hex>` followed by one
//! `param <name> <dims> <offset> <length>` line per tensor (offsets are
//! relative to the first blob), then a `config` line and the echo.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::{model_echo, parse_model_echo};
use crate::error::{Error, Result};
use crate::params::KernelSet;
use crate::pipeline::{ModelConfig, ModelParams};
use crate::tensor::{Precision, Scalar, Shape3, Tensor3, Tensor4};

pub const TENSOR_MAGIC: [u8; 4] = *b"CRVT";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CRVK";
pub const FORMAT_VERSION: u8 = 1;
const TENSOR_HEADER: usize = 8;
const CHECKPOINT_HEADER: usize = 16;

/// Decoded tensor file payload.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlob {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl TensorBlob {
    pub fn precision(&self) -> Precision {
        match self.data {
            TensorData::F32(_) => Precision::F32,
            TensorData::F64(_) => Precision::F64,
        }
    }

    /// Payload as `T`, failing unless the stored dtype is `T`.
    pub fn into_vec<T: Scalar>(self) -> Result<Vec<T>> {
        let found = self.precision();
        if found != T::PRECISION {
            return Err(Error::DtypeMismatch {
                expected: T::PRECISION.name(),
                found: found.name(),
            });
        }
        Ok(self.convert_vec())
    }

    /// Payload converted to `T`.
    pub fn convert_vec<T: Scalar>(self) -> Vec<T> {
        match self.data {
            TensorData::F32(v) => v.into_iter().map(|x| T::of(x as f64)).collect(),
            TensorData::F64(v) => v.into_iter().map(T::of).collect(),
        }
    }

    fn tensor4_dims(&self) -> Result<(usize, Shape3)> {
        match self.dims[..] {
            [t, h, w, c] => Ok((t, Shape3::new(h, w, c))),
            _ => Err(Error::BadHeader(format!("expected 4 dims, found {}", self.dims.len()))),
        }
    }

    fn tensor3_dims(&self) -> Result<Shape3> {
        match self.dims[..] {
            [h, w, c] => Ok(Shape3::new(h, w, c)),
            _ => Err(Error::BadHeader(format!("expected 3 dims, found {}", self.dims.len()))),
        }
    }

    pub fn into_tensor4<T: Scalar>(self) -> Result<Tensor4<T>> {
        let (t, s) = self.tensor4_dims()?;
        Tensor4::from_vec(t, s, self.into_vec()?)
    }

    /// Like [`TensorBlob::into_tensor4`] but converting from either dtype.
    pub fn convert_tensor4<T: Scalar>(self) -> Result<Tensor4<T>> {
        let (t, s) = self.tensor4_dims()?;
        Tensor4::from_vec(t, s, self.convert_vec())
    }

    pub fn into_tensor3<T: Scalar>(self) -> Result<Tensor3<T>> {
        let s = self.tensor3_dims()?;
        Tensor3::from_vec(s, self.into_vec()?)
    }
}

fn element_count(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d).ok_or(Error::DimOverflow))
}

/// Serializes `data` with the given dims.
pub fn encode_tensor<T: Scalar>(dims: &[usize], data: &[T]) -> Result<Vec<u8>> {
    if dims.len() > u8::MAX as usize {
        return Err(Error::DimOverflow);
    }
    let n = element_count(dims)?;
    if n != data.len() {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: data.len(),
        });
    }
    let elem = T::PRECISION.elem_size();
    let mut out = Vec::with_capacity(TENSOR_HEADER + 4 * dims.len() + elem * n);
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&[FORMAT_VERSION, T::PRECISION.code(), dims.len() as u8, 0]);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::DimOverflow)?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        v.write_le(&mut out);
    }
    Ok(out)
}

/// Parses one tensor from the front of `bytes`, returning it and the
/// number of bytes consumed.
pub fn decode_tensor_prefix(bytes: &[u8]) -> Result<(TensorBlob, usize)> {
    if bytes.len() < TENSOR_HEADER {
        return Err(Error::BadHeader(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("four bytes");
    if magic != TENSOR_MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(Error::BadVersion(bytes[4]));
    }
    let precision = Precision::from_code(bytes[5])?;
    let ndim = bytes[6] as usize;
    if bytes[7] != 0 {
        return Err(Error::BadHeader(format!("reserved byte is {}", bytes[7])));
    }
    let dims_end = TENSOR_HEADER + 4 * ndim;
    if bytes.len() < dims_end {
        return Err(Error::BadHeader("dims truncated".into()));
    }
    let dims: Vec<usize> = bytes[TENSOR_HEADER..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("four bytes")) as usize)
        .collect();
    let n = element_count(&dims)?;
    let payload = n.checked_mul(precision.elem_size()).ok_or(Error::DimOverflow)?;
    let end = dims_end.checked_add(payload).ok_or(Error::DimOverflow)?;
    if bytes.len() < end {
        return Err(Error::TruncatedPayload {
            expected: payload,
            actual: bytes.len() - dims_end,
        });
    }
    let body = &bytes[dims_end..end];
    let data = match precision {
        Precision::F32 => TensorData::F32(body.chunks_exact(4).map(f32::read_le).collect()),
        Precision::F64 => TensorData::F64(body.chunks_exact(8).map(f64::read_le).collect()),
    };
    Ok((TensorBlob { dims, data }, end))
}

/// Parses a complete tensor file; trailing bytes are an error.
pub fn decode_tensor(bytes: &[u8]) -> Result<TensorBlob> {
    let (blob, used) = decode_tensor_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::TrailingBytes(bytes.len() - used));
    }
    Ok(blob)
}

/// Writes via a sibling temporary file and a rename, so `path` is either
/// absent or complete.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn tensor4_bytes<T: Scalar>(x: &Tensor4<T>) -> Result<Vec<u8>> {
    encode_tensor(&x.dims(), x.data())
}

pub fn tensor3_bytes<T: Scalar>(x: &Tensor3<T>) -> Result<Vec<u8>> {
    let s = x.shape();
    encode_tensor(&[s.h, s.w, s.c], x.data())
}

pub fn write_tensor4<T: Scalar>(path: &Path, x: &Tensor4<T>) -> Result<()> {
    atomic_write(path, &tensor4_bytes(x)?)
}

pub fn write_tensor3<T: Scalar>(path: &Path, x: &Tensor3<T>) -> Result<()> {
    atomic_write(path, &tensor3_bytes(x)?)
}

pub fn read_tensor(path: &Path) -> Result<TensorBlob> {
    decode_tensor(&fs::read(path)?)
}

pub fn read_tensor4<T: Scalar>(path: &Path) -> Result<Tensor4<T>> {
    read_tensor(path)?.into_tensor4()
}

pub fn read_tensor3<T: Scalar>(path: &Path) -> Result<Tensor3<T>> {
    read_tensor(path)?.into_tensor3()
}

/// Short hex digest of a config echo.
pub fn config_hash(echo: &str) -> String {
    let digest = Sha256::digest(echo.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn dims_text(dims: &[usize]) -> String {
    dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

/// Every stored tensor in canonical order: `(name, dims, values)`.
fn param_tensors<T: Scalar>(params: &ModelParams<T>) -> Vec<(String, Vec<usize>, &[T])> {
    let mut out = Vec::new();
    for (name, k) in params.kernel_list() {
        let d = k.weight_dims();
        out.push((format!("{name}.weight"), d.to_vec(), k.weights()));
        out.push((format!("{name}.bias"), vec![d[0]], k.bias()));
    }
    out
}

pub fn checkpoint_bytes<T: Scalar>(params: &ModelParams<T>, config: &ModelConfig) -> Result<Vec<u8>> {
    if T::PRECISION != config.precision {
        return Err(Error::DtypeMismatch {
            expected: config.precision.name(),
            found: T::PRECISION.name(),
        });
    }
    let template = ModelParams::<T>::zeros(config)?;
    let ours: Vec<_> = param_tensors(params).into_iter().map(|(n, d, _)| (n, d)).collect();
    let want: Vec<_> = param_tensors(&template).into_iter().map(|(n, d, _)| (n, d)).collect();
    if ours != want {
        return Err(Error::Manifest("parameters do not match the config structure".into()));
    }
    let echo = model_echo(config);
    let mut text = format!("config_hash {}\n", config_hash(&echo));
    let mut blobs = Vec::new();
    for (name, dims, data) in param_tensors(params) {
        let b = encode_tensor(&dims, data)?;
        text.push_str(&format!(
            "param {name} {} {} {}\n",
            dims_text(&dims),
            blobs.len(),
            b.len()
        ));
        blobs.extend_from_slice(&b);
    }
    text.push_str("config\n");
    text.push_str(&echo);
    let mut out = Vec::with_capacity(CHECKPOINT_HEADER + text.len() + blobs.len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&[FORMAT_VERSION, 0, 0, 0]);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&blobs);
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, params: &ModelParams<T>, config: &ModelConfig) -> Result<()> {
    atomic_write(path, &checkpoint_bytes(params, config)?)
}

struct ManifestEntry {
    name: String,
    dims: Vec<usize>,
    offset: usize,
    length: usize,
}

struct Parsed<'a> {
    config: ModelConfig,
    entries: Vec<ManifestEntry>,
    blobs: &'a [u8],
}

fn parse_dims(s: &str) -> Option<Vec<usize>> {
    s.split('x').map(|d| d.parse().ok()).collect()
}

fn parse_checkpoint(bytes: &[u8]) -> Result<Parsed<'_>> {
    if bytes.len() < CHECKPOINT_HEADER {
        return Err(Error::BadHeader(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("four bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(Error::BadVersion(bytes[4]));
    }
    if bytes[5..8] != [0, 0, 0] {
        return Err(Error::BadHeader("reserved bytes are not zero".into()));
    }
    let text_len = u64::from_le_bytes(bytes[8..16].try_into().expect("eight bytes"));
    let text_end = usize::try_from(text_len)
        .ok()
        .and_then(|l| l.checked_add(CHECKPOINT_HEADER))
        .ok_or(Error::DimOverflow)?;
    if bytes.len() < text_end {
        return Err(Error::TruncatedPayload {
            expected: text_len as usize,
            actual: bytes.len() - CHECKPOINT_HEADER,
        });
    }
    let text = std::str::from_utf8(&bytes[CHECKPOINT_HEADER..text_end])
        .map_err(|_| Error::Manifest("manifest is not UTF-8".into()))?;
    let (manifest, echo) = text
        .split_once("\nconfig\n")
        .ok_or_else(|| Error::Manifest("missing config section".into()))?;
    let mut lines = manifest.lines();
    let stored = lines
        .next()
        .and_then(|l| l.strip_prefix("config_hash "))
        .ok_or_else(|| Error::Manifest("first line must be config_hash".into()))?
        .to_string();
    let computed = config_hash(echo);
    if stored != computed {
        return Err(Error::ConfigHashMismatch { stored, computed });
    }
    let config = parse_model_echo(echo)?;
    let mut entries = Vec::new();
    for (i, line) in lines.enumerate() {
        let bad = || Error::Manifest(format!("malformed manifest entry {}: '{line}'", i + 1));
        let f: Vec<&str> = line.split(' ').collect();
        if f.len() != 5 || f[0] != "param" {
            return Err(bad());
        }
        entries.push(ManifestEntry {
            name: f[1].to_string(),
            dims: parse_dims(f[2]).ok_or_else(bad)?,
            offset: f[3].parse().map_err(|_| bad())?,
            length: f[4].parse().map_err(|_| bad())?,
        });
    }
    Ok(Parsed {
        config,
        entries,
        blobs: &bytes[text_end..],
    })
}

/// Model config stored in a checkpoint, without reading the parameters.
pub fn peek_checkpoint_config(path: &Path) -> Result<ModelConfig> {
    let bytes = fs::read(path)?;
    Ok(parse_checkpoint(&bytes)?.config)
}

/// Parameters from checkpoint bytes. Every manifest entry is checked
/// against the structure implied by the stored config and against its blob.
pub fn checkpoint_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(ModelParams<T>, ModelConfig)> {
    let parsed = parse_checkpoint(bytes)?;
    let config = parsed.config;
    if config.precision != T::PRECISION {
        return Err(Error::DtypeMismatch {
            expected: T::PRECISION.name(),
            found: config.precision.name(),
        });
    }
    let mut params = ModelParams::<T>::zeros(&config)?;
    let expected: Vec<(String, Vec<usize>)> = param_tensors(&params).into_iter().map(|(n, d, _)| (n, d)).collect();
    if parsed.entries.len() != expected.len() {
        return Err(Error::Manifest(format!(
            "manifest lists {} tensors, config implies {}",
            parsed.entries.len(),
            expected.len()
        )));
    }
    let mut values = Vec::with_capacity(expected.len());
    let mut cursor = 0usize;
    for (e, (name, dims)) in parsed.entries.iter().zip(&expected) {
        if &e.name != name {
            return Err(Error::Manifest(format!("expected tensor {name}, found {}", e.name)));
        }
        if &e.dims != dims {
            return Err(Error::Manifest(format!(
                "{name}: manifest dims {} differ from config dims {}",
                dims_text(&e.dims),
                dims_text(dims)
            )));
        }
        if e.offset != cursor {
            return Err(Error::Manifest(format!(
                "{name}: offset {} should be {cursor}",
                e.offset
            )));
        }
        let end = e.offset.checked_add(e.length).ok_or(Error::DimOverflow)?;
        if end > parsed.blobs.len() {
            return Err(Error::TruncatedPayload {
                expected: end,
                actual: parsed.blobs.len(),
            });
        }
        let blob = decode_tensor(&parsed.blobs[e.offset..end])?;
        if &blob.dims != dims {
            return Err(Error::Manifest(format!(
                "{name}: blob dims {} differ from manifest dims {}",
                dims_text(&blob.dims),
                dims_text(dims)
            )));
        }
        values.push(blob.into_vec::<T>()?);
        cursor = end;
    }
    if cursor != parsed.blobs.len() {
        return Err(Error::TrailingBytes(parsed.blobs.len() - cursor));
    }
    let mut it = values.into_iter();
    for k in params.kernel_list_mut() {
        k.weights_mut().copy_from_slice(&it.next().expect("weight entry"));
        k.bias_mut().copy_from_slice(&it.next().expect("bias entry"));
    }
    Ok((params, config))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ModelParams<T>, ModelConfig)> {
    checkpoint_from_bytes(&fs::read(path)?)
}
