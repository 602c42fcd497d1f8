//! Checkpoint persistence.
//!
//! Little-endian binary with a versioned header: magic, version, kind
//! (full/delta), strategy, dtype, architecture fingerprint, the serialized
//! architecture config, a per-blob name/shape table, then the raw buffers.
//! Round trips are bit-exact.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use sha2::{Digest, Sha256};

use super::{select_learnable, TuningStrategy};
use crate::autograd::{NdArray, Scalar};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PromptConfig, SegModel};

const MAGIC: &[u8; 4] = b"PSEG";
const VERSION: u16 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct ArchDescriptor {
    model: ModelConfig,
    prompt: PromptConfig,
}

/// SHA-256 over the canonical JSON of the architecture configuration.
pub fn fingerprint(model: &ModelConfig, prompt: &PromptConfig) -> [u8; 32] {
    let json = serde_json::to_string(&ArchDescriptor {
        model: model.clone(),
        prompt: prompt.clone(),
    })
    .expect("config serialization cannot fail");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    hasher.finalize().into()
}

pub fn fingerprint_hex(fp: &[u8; 32]) -> String {
    fp.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug)]
pub struct CheckpointHeader {
    pub is_delta: bool,
    pub strategy: TuningStrategy,
    pub dtype: u8,
    pub fingerprint: [u8; 32],
    pub blob_names: Vec<String>,
}

fn encode<F: Scalar>(
    model: &SegModel<F>,
    names: &[String],
    is_delta: bool,
    strategy: TuningStrategy,
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(u8::from(is_delta));
    out.push(strategy.tag());
    out.push(F::DTYPE_TAG);
    out.extend_from_slice(&fingerprint(&model.config, &model.prompt));
    let json = serde_json::to_vec(&ArchDescriptor {
        model: model.config.clone(),
        prompt: model.prompt.clone(),
    })
    .unwrap();
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(names.len() as u32).to_le_bytes());
    for name in names {
        let shape = model.param(name).value.shape();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(shape.len() as u8);
        for &e in shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
    }
    for name in names {
        for &v in model.param(name).value.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                detail: format!("truncated: wanted {n} bytes, {} remain", self.buf.len() - self.pos),
                offset: self.pos as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(LittleEndian::read_u16(self.take(2)?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4)?))
    }
}

fn decode_header<'a>(r: &mut Reader<'a>) -> Result<(CheckpointHeader, ArchDescriptor, Vec<Vec<usize>>)> {
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format {
            path: r.path.to_path_buf(),
            detail: format!("bad magic {magic:?}"),
            offset: 0,
        });
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format {
            path: r.path.to_path_buf(),
            detail: format!("unsupported version {version}"),
            offset: 4,
        });
    }
    let is_delta = r.u8()? != 0;
    let strategy_tag = r.u8()?;
    let strategy = TuningStrategy::from_tag(strategy_tag).ok_or_else(|| Error::Format {
        path: r.path.to_path_buf(),
        detail: format!("unknown strategy tag {strategy_tag}"),
        offset: 7,
    })?;
    let dtype = r.u8()?;
    let mut fp = [0u8; 32];
    fp.copy_from_slice(r.take(32)?);
    let json_len = r.u32()? as usize;
    let json_off = r.pos;
    let arch: ArchDescriptor =
        serde_json::from_slice(r.take(json_len)?).map_err(|e| Error::Format {
            path: r.path.to_path_buf(),
            detail: format!("bad architecture json: {e}"),
            offset: json_off as u64,
        })?;
    let blob_count = r.u32()? as usize;
    let mut names = Vec::with_capacity(blob_count);
    let mut shapes = Vec::with_capacity(blob_count);
    for _ in 0..blob_count {
        let name_len = r.u16()? as usize;
        let name_off = r.pos;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Format {
            path: r.path.to_path_buf(),
            detail: "non-utf8 blob name".into(),
            offset: name_off as u64,
        })?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        names.push(name);
        shapes.push(shape);
    }
    Ok((
        CheckpointHeader {
            is_delta,
            strategy,
            dtype,
            fingerprint: fp,
            blob_names: names,
        },
        arch,
        shapes,
    ))
}

fn read_blob<F: Scalar>(r: &mut Reader<'_>, shape: Vec<usize>) -> Result<NdArray<F>> {
    let numel: usize = shape.iter().product();
    let raw = r.take(numel * F::BYTES)?;
    let data: Vec<F> = raw.chunks_exact(F::BYTES).map(F::read_le).collect();
    NdArray::new(shape, data)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Persist every parameter.
pub fn save_full<F: Scalar>(model: &SegModel<F>, path: &Path) -> Result<u64> {
    let names: Vec<String> = model.param_names().map(String::from).collect();
    let bytes = encode(model, &names, false, TuningStrategy::Full);
    write_file(path, &bytes)?;
    Ok(bytes.len() as u64)
}

/// Persist only the strategy's learnable blobs (prompts and/or head).
pub fn save_delta<F: Scalar>(
    model: &SegModel<F>,
    strategy: TuningStrategy,
    path: &Path,
) -> Result<u64> {
    if strategy == TuningStrategy::Full {
        return Err(Error::Contract(
            "full strategy persists a full checkpoint, not a delta".into(),
        ));
    }
    let set: BTreeSet<String> = select_learnable(model, strategy)?;
    let names: Vec<String> = model
        .param_names()
        .filter(|n| set.contains(*n))
        .map(String::from)
        .collect();
    let bytes = encode(model, &names, true, strategy);
    write_file(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0, path };
    Ok(decode_header(&mut r)?.0)
}

/// Reconstruct a self-describing full checkpoint.
pub fn load_full<F: Scalar>(path: &Path) -> Result<SegModel<F>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0, path };
    let (header, arch, shapes) = decode_header(&mut r)?;
    if header.is_delta {
        return Err(Error::Contract(format!(
            "{} is a delta checkpoint; load it onto a backbone",
            path.display()
        )));
    }
    if header.dtype != F::DTYPE_TAG {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("dtype tag {} does not match requested precision", header.dtype),
            offset: 8,
        });
    }
    let mut model = SegModel::<F>::init(arch.model, arch.prompt, 0)?;
    let expected: Vec<String> = model.param_names().map(String::from).collect();
    if header.blob_names != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: "full checkpoint blob table does not match architecture".into(),
            offset: 0,
        });
    }
    for (name, shape) in header.blob_names.iter().zip(shapes) {
        model.param_mut(name).value = read_blob::<F>(&mut r, shape)?;
    }
    Ok(model)
}

/// Load a delta onto a fingerprint-matching frozen backbone, producing the
/// tuned model.
pub fn load_delta<F: Scalar>(path: &Path, backbone: &SegModel<F>) -> Result<SegModel<F>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0, path };
    let (header, _, shapes) = decode_header(&mut r)?;
    if !header.is_delta {
        return Err(Error::Contract(format!(
            "{} is a full checkpoint, not a delta",
            path.display()
        )));
    }
    if header.dtype != F::DTYPE_TAG {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("dtype tag {} does not match requested precision", header.dtype),
            offset: 8,
        });
    }
    let backbone_fp = fingerprint(&backbone.config, &backbone.prompt);
    if header.fingerprint != backbone_fp {
        return Err(Error::FingerprintMismatch {
            file: fingerprint_hex(&header.fingerprint),
            backbone: fingerprint_hex(&backbone_fp),
        });
    }
    let mut model = backbone.cast::<F>();
    for (name, shape) in header.blob_names.iter().zip(shapes) {
        let blob = read_blob::<F>(&mut r, shape)?;
        if model.param(name).value.shape() != blob.shape() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("blob {name} shape mismatch"),
                offset: r.pos as u64,
            });
        }
        model.param_mut(name).value = blob;
    }
    Ok(model)
}
