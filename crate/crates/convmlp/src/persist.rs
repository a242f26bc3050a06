//! Checkpoint (`CMLP`) and single-tensor (`CMLT`) binary files.
//!
//! Both share one record encoding and end in a CRC-32 (IEEE) of every
//! preceding byte. All integers and values are little-endian.
//!
//! ```text
//! checkpoint = "CMLP" version:u32 cfg_len:u32 cfg_text count:u32 record* crc:u32
//! tensor     = "CMLT" version:u32 record crc:u32
//! record     = name_len:u32 name dtype:u8 rank:u8 extent:u64{rank} values
//! ```

use std::path::Path;

use convmlp_core::{DType, Model, ModelConfig, Real, Tensor};

use crate::config_text::{parse_config, serialize_config};
use crate::error::{FormatError, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CMLP";
pub const TENSOR_MAGIC: [u8; 4] = *b"CMLT";
pub const FORMAT_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if left < n {
            return Err(FormatError::Truncated { offset: self.pos, needed: n - left, what: what.into() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// One record as stored, values still encoded.
#[derive(Debug, Clone)]
pub struct RawRecord<'a> {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Byte offset of the first value.
    pub offset: usize,
    values: &'a [u8],
}

impl RawRecord<'_> {
    pub fn decode<T: Real>(&self) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE {
            return Err(FormatError::DType { name: self.name.clone(), code: self.dtype.code(), expected: dtype_name(T::DTYPE) });
        }
        let size = T::DTYPE.size();
        let data = self.values.chunks_exact(size).map(T::read_le).collect();
        Ok(Tensor::from_vec(&self.shape, data)?)
    }

    /// Decodes into `f32` whatever the stored dtype.
    pub fn decode_as_f32(&self) -> Result<Tensor<f32>> {
        Ok(match self.dtype {
            DType::F32 => self.decode::<f32>()?,
            DType::F64 => self.decode::<f64>()?.cast(),
        })
    }
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F32 => "f32",
        DType::F64 => "f64",
    }
}

fn write_record<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

fn read_record<'a>(r: &mut Reader<'a>) -> Result<RawRecord<'a>> {
    let start = r.pos;
    let len = r.u32("tensor name length")? as usize;
    let name = std::str::from_utf8(r.take(len, "tensor name")?)
        .map_err(|_| FormatError::malformed(start + 4, "tensor name is not UTF-8"))?
        .to_string();
    let code_at = r.pos;
    let code = r.u8("dtype code")?;
    let dtype = DType::from_code(code).ok_or_else(|| FormatError::malformed(code_at, format!("unknown dtype code {code} for `{name}`")))?;
    let rank_at = r.pos;
    let rank = r.u8("rank")? as usize;
    if rank > convmlp_core::MAX_RANK {
        return Err(FormatError::malformed(rank_at, format!("rank {rank} of `{name}` exceeds {}", convmlp_core::MAX_RANK)));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let at = r.pos;
        let d = r.u64("extent")?;
        shape.push(usize::try_from(d).map_err(|_| FormatError::malformed(at, format!("extent {d} of `{name}` too large")))?);
    }
    let bytes = shape
        .iter()
        .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| FormatError::malformed(rank_at, format!("size of `{name}` overflows")))?;
    let offset = r.pos;
    let values = r.take(bytes, &format!("values of `{name}`"))?;
    Ok(RawRecord { name, dtype, shape, offset, values })
}

fn header(r: &mut Reader, magic: [u8; 4]) -> Result<()> {
    let found: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if found != magic {
        return Err(FormatError::Magic { expected: magic, found });
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(FormatError::Version(version));
    }
    Ok(())
}

fn finish(r: &mut Reader) -> Result<()> {
    r.u32("CRC")?;
    if r.pos != r.bytes.len() {
        return Err(FormatError::malformed(r.pos, format!("{} trailing bytes after the CRC", r.bytes.len() - r.pos)));
    }
    Ok(())
}

/// Validates the trailer. When the CRC disagrees, a structural walk decides
/// whether the file was cut short (reported with its offset) or corrupted.
fn verify<'a, T>(bytes: &'a [u8], magic: [u8; 4], walk: fn(&'a [u8]) -> Result<T>) -> Result<T> {
    header(&mut Reader::new(bytes), magic)?;
    let body = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body]);
    if stored != computed {
        return match walk(bytes) {
            Err(e @ FormatError::Truncated { .. }) => Err(e),
            _ => Err(FormatError::Crc { stored, computed }),
        };
    }
    walk(bytes)
}

/// Parsed but not yet bound to a model.
#[derive(Debug, Clone)]
pub struct CheckpointView<'a> {
    pub config: ModelConfig,
    pub records: Vec<RawRecord<'a>>,
}

fn walk_checkpoint(bytes: &[u8]) -> Result<(String, usize, Vec<RawRecord<'_>>)> {
    let mut r = Reader::new(bytes);
    header(&mut r, CHECKPOINT_MAGIC)?;
    let len = r.u32("config length")? as usize;
    let at = r.pos;
    let text = std::str::from_utf8(r.take(len, "config text")?)
        .map_err(|_| FormatError::malformed(at, "config text is not UTF-8"))?
        .to_string();
    let count = r.u32("tensor count")? as usize;
    let mut records = Vec::new();
    for _ in 0..count {
        records.push(read_record(&mut r)?);
    }
    finish(&mut r)?;
    Ok((text, at, records))
}

pub fn encode_checkpoint<T: Real>(model: &Model<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let text = serialize_config(model.config());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params().iter() {
        write_record(&mut out, &p.name, &p.value);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Checks magic, version, structure and CRC, and parses the embedded config.
pub fn inspect_checkpoint(bytes: &[u8]) -> Result<CheckpointView<'_>> {
    let (text, at, records) = verify(bytes, CHECKPOINT_MAGIC, walk_checkpoint)?;
    let config = parse_config(&text).map_err(|e| match e {
        FormatError::Config { line, detail } => FormatError::malformed(at, format!("embedded config line {line}: {detail}")),
        other => other,
    })?;
    Ok(CheckpointView { config, records })
}

/// Rebuilds a model from checkpoint bytes. With `expected` set, the embedded
/// config must equal it; the first differing field is named otherwise.
pub fn decode_checkpoint<T: Real>(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Model<T>> {
    let view = inspect_checkpoint(bytes)?;
    if let Some(field) = expected.and_then(|e| e.first_difference(&view.config)) {
        return Err(FormatError::ConfigMismatch { field });
    }
    let mut model = Model::<T>::new(&view.config, 0)?;
    if view.records.len() != model.params().len() {
        return Err(FormatError::Count { expected: model.params().len(), found: view.records.len() });
    }
    for (index, (rec, p)) in view.records.iter().zip(model.params_mut().iter_mut()).enumerate() {
        if rec.name != p.name {
            return Err(FormatError::Name { index, expected: p.name.clone(), found: rec.name.clone() });
        }
        if rec.shape != p.value.shape() {
            return Err(FormatError::Shape { name: rec.name.clone(), expected: p.value.shape().to_vec(), found: rec.shape.clone() });
        }
        p.value = rec.decode()?;
    }
    Ok(model)
}

pub fn save_checkpoint<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| FormatError::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path, expected: Option<&ModelConfig>) -> Result<Model<T>> {
    let bytes = std::fs::read(path).map_err(|e| FormatError::io(path, e))?;
    decode_checkpoint(&bytes, expected)
}

pub fn encode_tensor<T: Real>(name: &str, t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    write_record(&mut out, name, t);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn walk_tensor(bytes: &[u8]) -> Result<RawRecord<'_>> {
    let mut r = Reader::new(bytes);
    header(&mut r, TENSOR_MAGIC)?;
    let rec = read_record(&mut r)?;
    finish(&mut r)?;
    Ok(rec)
}

/// Parses a tensor file, returning its record.
pub fn decode_tensor(bytes: &[u8]) -> Result<RawRecord<'_>> {
    verify(bytes, TENSOR_MAGIC, walk_tensor)
}

pub fn write_tensor_file<T: Real>(path: &Path, name: &str, t: &Tensor<T>) -> Result<()> {
    std::fs::write(path, encode_tensor(name, t)).map_err(|e| FormatError::io(path, e))
}

/// Reads a tensor file of element type `T`, returning `(name, tensor)`.
pub fn read_tensor_file<T: Real>(path: &Path) -> Result<(String, Tensor<T>)> {
    let bytes = std::fs::read(path).map_err(|e| FormatError::io(path, e))?;
    let rec = decode_tensor(&bytes)?;
    Ok((rec.name.clone(), rec.decode()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model<f32> {
        Model::new(&ModelConfig::tiny(3), 4).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = encode_checkpoint(&tiny());
        let back: Model<f32> = decode_checkpoint(&bytes, Some(&ModelConfig::tiny(3))).unwrap();
        assert_eq!(encode_checkpoint(&back), bytes);
        for (p, q) in tiny().params().iter().zip(back.params().iter()) {
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn f64_models_round_trip_and_refuse_f32() {
        let m: Model<f64> = tiny().cast();
        let bytes = encode_checkpoint(&m);
        let back: Model<f64> = decode_checkpoint(&bytes, None).unwrap();
        assert_eq!(encode_checkpoint(&back), bytes);
        assert!(matches!(decode_checkpoint::<f32>(&bytes, None), Err(FormatError::DType { .. })));
    }

    #[test]
    fn header_errors() {
        let mut bytes = encode_checkpoint(&tiny());
        assert!(matches!(decode_checkpoint::<f32>(&bytes[..2], None), Err(FormatError::Truncated { offset: 0, .. })));
        bytes[4] = 9;
        assert!(matches!(decode_checkpoint::<f32>(&bytes, None), Err(FormatError::Version(9))));
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint::<f32>(&bytes, None), Err(FormatError::Magic { .. })));
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_checkpoint(&tiny());
        for cut in [1, 3, 10, 500] {
            let short = &bytes[..bytes.len() - cut];
            match decode_checkpoint::<f32>(short, None) {
                Err(FormatError::Truncated { offset, .. }) => assert!(offset <= short.len()),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn tensor_file_round_trip() {
        let t = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.25 - 1.0);
        let bytes = encode_tensor("map", &t);
        let rec = decode_tensor(&bytes).unwrap();
        assert_eq!(rec.name, "map");
        assert_eq!(rec.decode::<f64>().unwrap(), t);
        assert_eq!(rec.decode_as_f32().unwrap(), t.cast::<f32>());
        let mut bad = bytes.clone();
        bad[rec.offset + 3] ^= 0x10;
        assert!(matches!(decode_tensor(&bad), Err(FormatError::Crc { .. })));
    }
}
