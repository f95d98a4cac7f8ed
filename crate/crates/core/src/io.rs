//! Binary containers for checkpoints, datasets and retrieval indexes.
//!
//! Every file is laid out as
//!
//! ```text
//! magic "CONAFILE" | u64 LE header length | JSON header | payload
//! ```
//!
//! Payload floats are little-endian `f64` blocks in the order the header
//! declares them. Index files put a table of length-prefixed (u32 LE) UTF-8
//! ids before the embedding block.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{Affine, DualEncoderBundle, Encoder, EncoderParams, EncoderSpec};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::retrieval::{build_index, RetrievalIndex};
use crate::scalar::Scalar;
use crate::training::{DataSpec, SyntheticDataset};

pub const MAGIC: &[u8; 8] = b"CONAFILE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderRole {
    TextTeacher,
    ImageTeacher,
    TextStudent,
    ImageStudent,
}

impl EncoderRole {
    pub fn is_teacher(self) -> bool {
        matches!(self, EncoderRole::TextTeacher | EncoderRole::ImageTeacher)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorDecl {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncoderDecl {
    role: EncoderRole,
    spec: EncoderSpec,
    frozen: bool,
    tensors: Vec<TensorDecl>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum Header {
    Checkpoint {
        format_version: u32,
        encoders: Vec<EncoderDecl>,
    },
    Dataset {
        format_version: u32,
        #[serde(flatten)]
        spec: DataSpec,
    },
    Index {
        format_version: u32,
        count: usize,
        dim: usize,
    },
}

fn header_version(h: &Header) -> u32 {
    match h {
        Header::Checkpoint { format_version, .. }
        | Header::Dataset { format_version, .. }
        | Header::Index { format_version, .. } => *format_version,
    }
}

fn frame(header: &Header, payload: &[u8]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    out
}

fn unframe(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("missing CONAFILE magic".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..end])?;
    if header_version(&header) != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {}",
            header_version(&header)
        )));
    }
    Ok((header, &bytes[end..]))
}

fn put_floats<T: Scalar>(out: &mut Vec<u8>, values: &[T]) {
    for v in values {
        out.extend_from_slice(&v.widen().to_le_bytes());
    }
}

struct FloatReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> FloatReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let end = self
            .pos
            .checked_add(n * 8)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("payload shorter than header declares".into()))?;
        let out = self.bytes[self.pos..end]
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        self.pos = end;
        Ok(out)
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format("trailing bytes after payload".into()));
        }
        Ok(())
    }
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Format(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Named encoders stored in one checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub encoders: Vec<(EncoderRole, Encoder<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn get(&self, role: EncoderRole) -> Option<&Encoder<T>> {
        self.encoders.iter().find(|(r, _)| *r == role).map(|(_, e)| e)
    }

    pub fn require(&self, role: EncoderRole) -> Result<&Encoder<T>> {
        self.get(role)
            .ok_or_else(|| Error::Format(format!("checkpoint has no {role:?} encoder")))
    }

    pub fn from_bundle(bundle: &DualEncoderBundle<T>) -> Self {
        Self {
            encoders: vec![
                (EncoderRole::TextTeacher, bundle.text_teacher.clone()),
                (EncoderRole::ImageTeacher, bundle.image_teacher.clone()),
                (EncoderRole::TextStudent, bundle.text_student.clone()),
                (EncoderRole::ImageStudent, bundle.image_student.clone()),
            ],
        }
    }

    pub fn teachers(text: &Encoder<T>, image: &Encoder<T>) -> Self {
        Self {
            encoders: vec![
                (EncoderRole::TextTeacher, text.clone()),
                (EncoderRole::ImageTeacher, image.clone()),
            ],
        }
    }

    pub fn into_bundle(self) -> Result<DualEncoderBundle<T>> {
        let bundle = DualEncoderBundle {
            text_teacher: self.require(EncoderRole::TextTeacher)?.clone(),
            image_teacher: self.require(EncoderRole::ImageTeacher)?.clone(),
            text_student: self.require(EncoderRole::TextStudent)?.clone(),
            image_student: self.require(EncoderRole::ImageStudent)?.clone(),
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut decls = Vec::with_capacity(self.encoders.len());
        for (role, enc) in &self.encoders {
            let mut tensors = Vec::new();
            let blocks = enc
                .params
                .layers
                .iter()
                .enumerate()
                .map(|(k, a)| (format!("layer{k}"), a))
                .chain(std::iter::once(("projection".to_string(), &enc.params.projection)));
            for (name, affine) in blocks {
                tensors.push(TensorDecl {
                    name: format!("{name}.weight"),
                    shape: vec![affine.weight.rows(), affine.weight.cols()],
                });
                put_floats(&mut payload, affine.weight.as_slice());
                tensors.push(TensorDecl {
                    name: format!("{name}.bias"),
                    shape: vec![affine.bias.len()],
                });
                put_floats(&mut payload, &affine.bias);
            }
            decls.push(EncoderDecl {
                role: *role,
                spec: enc.spec,
                frozen: enc.params.frozen,
                tensors,
            });
        }
        frame(
            &Header::Checkpoint {
                format_version: FORMAT_VERSION,
                encoders: decls,
            },
            &payload,
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = unframe(bytes)?;
        let Header::Checkpoint { encoders, .. } = header else {
            return Err(Error::Format("not a checkpoint file".into()));
        };
        let mut reader = FloatReader::new(payload);
        let mut out = Vec::with_capacity(encoders.len());
        for decl in encoders {
            decl.spec.validate()?;
            let expected = 2 * (decl.spec.num_layers + 1);
            if decl.tensors.len() != expected {
                return Err(Error::Format(format!(
                    "{:?}: expected {expected} tensors, header lists {}",
                    decl.role,
                    decl.tensors.len()
                )));
            }
            let mut affines = Vec::with_capacity(decl.spec.num_layers + 1);
            for pair in decl.tensors.chunks_exact(2) {
                let (w, b) = (&pair[0], &pair[1]);
                if w.shape.len() != 2 || b.shape.len() != 1 {
                    return Err(Error::Format(format!("bad tensor shapes for {}", w.name)));
                }
                let weight = Matrix::from_vec(w.shape[0], w.shape[1], reader.take(w.shape[0] * w.shape[1])?)?;
                let bias = reader.take(b.shape[0])?;
                affines.push(Affine { weight, bias });
            }
            let projection = affines.pop().expect("at least one block");
            let params = EncoderParams {
                layers: affines,
                projection,
                frozen: decl.frozen,
            };
            out.push((decl.role, Encoder::new(decl.spec, params)?));
        }
        reader.finish()?;
        Ok(Self { encoders: out })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Raw little-endian bytes of one encoder's parameter blocks, for
/// byte-level comparisons.
pub fn parameter_bytes<T: Scalar>(encoder: &Encoder<T>) -> Vec<u8> {
    let mut out = Vec::new();
    for t in encoder.params.tensors() {
        put_floats(&mut out, t);
    }
    out
}

pub fn dataset_to_bytes<T: Scalar>(d: &SyntheticDataset<T>) -> Vec<u8> {
    let mut payload = Vec::with_capacity(8 * (d.text_inputs.as_slice().len() + d.image_inputs.as_slice().len()));
    put_floats(&mut payload, d.text_inputs.as_slice());
    put_floats(&mut payload, d.image_inputs.as_slice());
    frame(
        &Header::Dataset {
            format_version: FORMAT_VERSION,
            spec: d.spec,
        },
        &payload,
    )
}

pub fn dataset_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<SyntheticDataset<T>> {
    let (header, payload) = unframe(bytes)?;
    let Header::Dataset { spec, .. } = header else {
        return Err(Error::Format("not a dataset file".into()));
    };
    spec.validate()?;
    let mut reader = FloatReader::new(payload);
    let text_inputs = Matrix::from_vec(spec.pairs, spec.text_dim, reader.take(spec.pairs * spec.text_dim)?)?;
    let image_inputs = Matrix::from_vec(spec.pairs, spec.image_dim, reader.take(spec.pairs * spec.image_dim)?)?;
    reader.finish()?;
    if !text_inputs.is_finite() || !image_inputs.is_finite() {
        return Err(Error::NonFiniteValue("dataset file"));
    }
    Ok(SyntheticDataset {
        text_inputs,
        image_inputs,
        spec,
    })
}

pub fn save_dataset<T: Scalar>(d: &SyntheticDataset<T>, path: &Path) -> Result<()> {
    write_atomic(path, &dataset_to_bytes(d))
}

pub fn load_dataset<T: Scalar>(path: &Path) -> Result<SyntheticDataset<T>> {
    dataset_from_bytes(&fs::read(path)?)
}

pub fn index_to_bytes<T: Scalar>(index: &RetrievalIndex<T>) -> Vec<u8> {
    let mut payload = Vec::new();
    for id in index.ids() {
        payload.extend_from_slice(&(id.len() as u32).to_le_bytes());
        payload.extend_from_slice(id.as_bytes());
    }
    put_floats(&mut payload, index.embeddings().as_slice());
    frame(
        &Header::Index {
            format_version: FORMAT_VERSION,
            count: index.len(),
            dim: index.dim(),
        },
        &payload,
    )
}

pub fn index_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<RetrievalIndex<T>> {
    let (header, payload) = unframe(bytes)?;
    let Header::Index { count, dim, .. } = header else {
        return Err(Error::Format("not an index file".into()));
    };
    let mut pos = 0usize;
    let mut ids = Vec::with_capacity(count);
    for _ in 0..count {
        let len_bytes = payload
            .get(pos..pos + 4)
            .ok_or_else(|| Error::Format("truncated id table".into()))?;
        let len = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
        pos += 4;
        let raw = payload
            .get(pos..pos + len)
            .ok_or_else(|| Error::Format("truncated id table".into()))?;
        ids.push(String::from_utf8(raw.to_vec()).map_err(|e| Error::Format(e.to_string()))?);
        pos += len;
    }
    let mut reader = FloatReader::new(&payload[pos..]);
    let embeddings = Matrix::from_vec(count, dim, reader.take(count * dim)?)?;
    reader.finish()?;
    build_index(ids, embeddings)
}

pub fn save_index<T: Scalar>(index: &RetrievalIndex<T>, path: &Path) -> Result<()> {
    write_atomic(path, &index_to_bytes(index))
}

pub fn load_index<T: Scalar>(path: &Path) -> Result<RetrievalIndex<T>> {
    index_from_bytes(&fs::read(path)?)
}
