//! Training checkpoints and the packed quantized model format.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "QRCK" | version u32 | payload_len u64 | crc32(payload) u32 | payload
//! ```
//!
//! where `payload` is the bincode encoding of [`Checkpoint`].
//!
//! The quantized model format (`"BRNN"`) is documented byte-by-byte in
//! `docs/FORMAT.md`. Weights are never dequantized on load: inference runs
//! on bit planes through [`bitpack::qmatvec`].

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::sigmoid;
use crate::bitpack::{self, words_for, BitPlanes, PackError, PackedActivation, PackedQuantMatrix};
use crate::cells::{CellKind, CellParams, Model};
use crate::data::Vocab;
use crate::quantizers::{self, levels, unit_code, QuantConfig, QuantError, QuantizedMatrix, MAX_BITS};
use crate::tensor::Matrix;
use crate::training::{TrainConfig, TrainerState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"QRCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MODEL_MAGIC: &[u8; 4] = b"BRNN";
pub const MODEL_VERSION: u32 = 1;

const RECORD_PACKED: u8 = 0;
const RECORD_DENSE_F32: u8 = 1;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:?}")]
    Magic { expected: &'static str },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("file truncated: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("checksum mismatch in {what}: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { what: String, stored: u32, computed: u32 },
    #[error("decode error: {0}")]
    Decode(String),
    #[error("refusing to export: {0}")]
    Refused(String),
    #[error("malformed model file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Pack(#[from] PackError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelIoError + '_ {
    move |source| ModelIoError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write to a sibling temp file, then rename over `path`.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ModelIoError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Everything needed to resume training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: Model,
    pub train: TrainConfig,
    pub state: TrainerState,
    #[serde(default)]
    pub vocab: Option<Vocab>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>, ModelIoError> {
    let payload = bincode::serialize(ckpt).map_err(|e| ModelIoError::Decode(e.to_string()))?;
    let mut out = Vec::with_capacity(payload.len() + 20);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, ModelIoError> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(ModelIoError::Magic { expected: "QRCK" });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelIoError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = r.u64()? as usize;
    let stored = r.u32()?;
    let payload = r.take(len)?;
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(ModelIoError::Checksum {
            what: "checkpoint payload".into(),
            stored,
            computed,
        });
    }
    let mut ckpt: Checkpoint = bincode::deserialize(payload).map_err(|e| ModelIoError::Decode(e.to_string()))?;
    if let Some(v) = ckpt.vocab.as_mut() {
        v.reindex();
    }
    Ok(ckpt)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), ModelIoError> {
    write_atomic(path, &encode_checkpoint(ckpt)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelIoError> {
    decode_checkpoint(&fs::read(path).map_err(io_err(path))?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelIoError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(ModelIoError::Truncated {
                offset: self.pos,
                needed: n.saturating_sub(self.buf.len() - self.pos),
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelIoError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ModelIoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelIoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, ModelIoError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Header of a quantized model file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelHeader {
    pub cell: CellKind,
    pub weight_bits: u8,
    pub activation_bits: u8,
    pub classifier: bool,
    pub hidden: u32,
    pub embed: u32,
    pub vocab: u32,
    pub out_dim: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RecordTensor {
    /// Bit-plane codes with f32 affine pair.
    Packed(PackedQuantMatrix),
    /// Full-precision values (biases), stored as f32.
    Dense { rows: usize, cols: usize, values: Vec<f32> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub tensor: RecordTensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantModelFile {
    pub header: ModelHeader,
    pub records: Vec<Record>,
}

/// Byte counts reported by [`export_quantized`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub total_bytes: usize,
    /// Bit-plane bytes of the quantized weight matrices.
    pub weight_payload_bytes: usize,
    /// Per-row code sums stored next to those planes.
    pub row_sum_bytes: usize,
    /// The same weight matrices stored as f32.
    pub weight_f32_bytes: usize,
}

/// Bit planes of the whole matrix, rows concatenated without per-row padding.
fn matrix_planes(p: &PackedQuantMatrix) -> BitPlanes {
    let codes: Vec<u8> = p.rows.iter().flat_map(|r| r.unpack()).collect();
    bitpack::pack(&codes, p.bits).expect("codes come from valid planes")
}

fn encode_record(rec: &Record, out: &mut Vec<u8>) {
    let start = out.len();
    let (kind, rows, cols) = match &rec.tensor {
        RecordTensor::Packed(p) => (RECORD_PACKED, p.shape.0, p.shape.1),
        RecordTensor::Dense { rows, cols, .. } => (RECORD_DENSE_F32, *rows, *cols),
    };
    out.push(kind);
    out.extend_from_slice(&(rec.name.len() as u32).to_le_bytes());
    out.extend_from_slice(rec.name.as_bytes());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    match &rec.tensor {
        RecordTensor::Packed(p) => {
            out.push(p.bits);
            out.extend_from_slice(&(p.alpha as f32).to_le_bytes());
            out.extend_from_slice(&(p.beta as f32).to_le_bytes());
            for s in &p.code_sums {
                out.extend_from_slice(&s.to_le_bytes());
            }
            for w in matrix_planes(p).raw_words() {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        RecordTensor::Dense { values, .. } => {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
}

fn decode_record(r: &mut Reader<'_>) -> Result<Record, ModelIoError> {
    let start = r.pos;
    let kind = r.u8()?;
    let name_len = r.u32()? as usize;
    let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| ModelIoError::Malformed(e.to_string()))?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let tensor = match kind {
        RECORD_PACKED => {
            let bits = r.u8()?;
            if !(1..=MAX_BITS).contains(&bits) {
                return Err(ModelIoError::Malformed(format!("{name}: bit-width {bits}")));
            }
            let alpha = r.f32()? as f64;
            let beta = r.f32()? as f64;
            let code_sums = (0..rows).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
            let n = rows * cols;
            let words = (0..words_for(n) * bits as usize)
                .map(|_| r.u64())
                .collect::<Result<Vec<_>, _>>()?;
            let planes = BitPlanes::from_raw(words, n, bits)?;
            if planes != bitpack::pack(&planes.unpack(), bits)? {
                return Err(ModelIoError::Malformed(format!("{name}: nonzero padding bits")));
            }
            let packed = PackedQuantMatrix::from_quantized(&QuantizedMatrix {
                codes: planes.unpack(),
                bits,
                alpha,
                beta,
                rows,
                cols,
            })?;
            if packed.code_sums != code_sums {
                return Err(ModelIoError::Malformed(format!("{name}: row sums disagree with codes")));
            }
            RecordTensor::Packed(packed)
        }
        RECORD_DENSE_F32 => {
            let values = (0..rows * cols).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
            RecordTensor::Dense { rows, cols, values }
        }
        k => return Err(ModelIoError::Malformed(format!("{name}: unknown record kind {k}"))),
    };
    let computed = crc32fast::hash(&r.buf[start..r.pos]);
    let stored = r.u32()?;
    if stored != computed {
        return Err(ModelIoError::Checksum {
            what: format!("record {name}"),
            stored,
            computed,
        });
    }
    Ok(Record { name, tensor })
}

impl QuantModelFile {
    pub fn encode(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&[h.cell.code(), h.weight_bits, h.activation_bits, h.classifier as u8]);
        for d in [h.hidden, h.embed, h.vocab, h.out_dim, self.records.len() as u32] {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for rec in &self.records {
            encode_record(rec, &mut out);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ModelIoError> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MODEL_MAGIC {
            return Err(ModelIoError::Magic { expected: "BRNN" });
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(ModelIoError::Version {
                found: version,
                expected: MODEL_VERSION,
            });
        }
        let cell = CellKind::from_code(r.u8()?).ok_or_else(|| ModelIoError::Malformed("unknown cell kind".into()))?;
        let weight_bits = r.u8()?;
        let activation_bits = r.u8()?;
        let classifier = r.u8()? != 0;
        let header = ModelHeader {
            cell,
            weight_bits,
            activation_bits,
            classifier,
            hidden: r.u32()?,
            embed: r.u32()?,
            vocab: r.u32()?,
            out_dim: r.u32()?,
        };
        let n = r.u32()? as usize;
        let records = (0..n).map(|_| decode_record(&mut r)).collect::<Result<Vec<_>, _>>()?;
        if !r.done() {
            return Err(ModelIoError::Malformed("trailing bytes after last record".into()));
        }
        Ok(Self { header, records })
    }

    pub fn read(path: &Path) -> Result<Self, ModelIoError> {
        Self::decode(&fs::read(path).map_err(io_err(path))?)
    }

    pub fn record(&self, name: &str) -> Result<&RecordTensor, ModelIoError> {
        self.records
            .iter()
            .find(|r| r.name == name)
            .map(|r| &r.tensor)
            .ok_or_else(|| ModelIoError::Malformed(format!("missing record {name}")))
    }
}

/// Quantize and pack `model` with `quant` into the on-disk representation.
pub fn quantize_model(model: &Model, quant: &QuantConfig) -> Result<QuantModelFile, ModelIoError> {
    if !quant.weights_quantized() || !quant.activations_quantized() {
        return Err(ModelIoError::Refused(
            "the packed format stores quantized weights and activations only (bit-width 32 given)".into(),
        ));
    }
    quant.validate()?;
    let cfg = &model.config;
    let mut records = Vec::new();

    let ka = quant.activation_bits;
    let emb = &model.params.embedding;
    let emb_q = QuantizedMatrix {
        codes: emb.data().iter().map(|&v| unit_code(v.clamp(0.0, 1.0), ka)).collect(),
        bits: ka,
        alpha: 1.0,
        beta: 0.0,
        rows: emb.rows(),
        cols: emb.cols(),
    };
    records.push(Record {
        name: "embedding".into(),
        tensor: RecordTensor::Packed(PackedQuantMatrix::from_quantized(&emb_q)?),
    });

    let mut push_weight = |name: &str, w: &Matrix| -> Result<(), ModelIoError> {
        let (_, q) = quantizers::quantize_weights(w, quant)?;
        let mut packed = PackedQuantMatrix::from_quantized(&q)?;
        packed.alpha = packed.alpha as f32 as f64;
        packed.beta = packed.beta as f32 as f64;
        records.push(Record {
            name: name.into(),
            tensor: RecordTensor::Packed(packed),
        });
        Ok(())
    };
    let dense = |name: &str, m: &Matrix| Record {
        name: name.into(),
        tensor: RecordTensor::Dense {
            rows: m.rows(),
            cols: m.cols(),
            values: m.data().iter().map(|&v| v as f32).collect(),
        },
    };
    let mut biases = Vec::new();
    match &model.params.cell {
        CellParams::Gru(g) => {
            push_weight("cell.w_z", &g.w_z)?;
            push_weight("cell.w_r", &g.w_r)?;
            push_weight("cell.w_h", &g.w_h)?;
        }
        CellParams::Lstm(l) => {
            push_weight("cell.w_f", &l.w_f)?;
            push_weight("cell.w_i", &l.w_i)?;
            push_weight("cell.w_c", &l.w_c)?;
            push_weight("cell.w_o", &l.w_o)?;
            biases.extend([
                dense("cell.b_f", &l.b_f),
                dense("cell.b_i", &l.b_i),
                dense("cell.b_c", &l.b_c),
                dense("cell.b_o", &l.b_o),
            ]);
        }
    }
    let out_w = if cfg.fc_tanh {
        model.params.out_w.map(f64::tanh)
    } else {
        model.params.out_w.clone()
    };
    push_weight("out.w", &out_w)?;
    records.extend(biases);
    records.push(dense("out.b", &model.params.out_b));

    Ok(QuantModelFile {
        header: ModelHeader {
            cell: cfg.cell,
            weight_bits: quant.weight_bits,
            activation_bits: ka,
            classifier: cfg.is_classifier(),
            hidden: cfg.hidden as u32,
            embed: cfg.embed as u32,
            vocab: cfg.vocab as u32,
            out_dim: cfg.output_dim() as u32,
        },
        records,
    })
}

/// Quantize, pack and write `model`; returns the byte accounting.
pub fn export_quantized(model: &Model, quant: &QuantConfig, path: &Path) -> Result<ExportSummary, ModelIoError> {
    let file = quantize_model(model, quant)?;
    let bytes = file.encode();
    write_atomic(path, &bytes)?;
    let mut summary = ExportSummary {
        total_bytes: bytes.len(),
        weight_payload_bytes: 0,
        row_sum_bytes: 0,
        weight_f32_bytes: 0,
    };
    for rec in &file.records {
        if let (true, RecordTensor::Packed(p)) = (crate::cells::is_weight_matrix(&rec.name), &rec.tensor) {
            summary.weight_payload_bytes += 8 * words_for(p.shape.0 * p.shape.1) * p.bits as usize;
            summary.row_sum_bytes += 4 * p.code_sums.len();
            summary.weight_f32_bytes += 4 * p.shape.0 * p.shape.1;
        }
    }
    Ok(summary)
}

/// Inference engine over a loaded [`QuantModelFile`].
///
/// Matrix products run on packed bit planes; gate nonlinearities and the
/// LSTM cell state are computed in `f64`.
#[derive(Clone, Debug)]
pub struct QuantModel {
    pub header: ModelHeader,
    embedding: PackedQuantMatrix,
    /// GRU: z, r, h. LSTM: f, i, c, o.
    gates: Vec<PackedQuantMatrix>,
    biases: Vec<Vec<f64>>,
    out_w: PackedQuantMatrix,
    out_b: Vec<f64>,
}

fn packed(file: &QuantModelFile, name: &str) -> Result<PackedQuantMatrix, ModelIoError> {
    match file.record(name)? {
        RecordTensor::Packed(p) => Ok(p.clone()),
        _ => Err(ModelIoError::Malformed(format!("{name} should be packed"))),
    }
}

fn dense_vec(file: &QuantModelFile, name: &str) -> Result<Vec<f64>, ModelIoError> {
    match file.record(name)? {
        RecordTensor::Dense { values, .. } => Ok(values.iter().map(|&v| v as f64).collect()),
        _ => Err(ModelIoError::Malformed(format!("{name} should be dense"))),
    }
}

impl QuantModel {
    pub fn from_file(file: &QuantModelFile) -> Result<Self, ModelIoError> {
        let lstm = file.header.cell.is_lstm();
        let gate_names: &[&str] = if lstm {
            &["cell.w_f", "cell.w_i", "cell.w_c", "cell.w_o"]
        } else {
            &["cell.w_z", "cell.w_r", "cell.w_h"]
        };
        let gates = gate_names
            .iter()
            .map(|n| packed(file, n))
            .collect::<Result<Vec<_>, _>>()?;
        let biases = if lstm {
            ["cell.b_f", "cell.b_i", "cell.b_c", "cell.b_o"]
                .iter()
                .map(|n| dense_vec(file, n))
                .collect::<Result<Vec<_>, _>>()?
        } else {
            Vec::new()
        };
        let m = Self {
            header: file.header.clone(),
            embedding: packed(file, "embedding")?,
            gates,
            biases,
            out_w: packed(file, "out.w")?,
            out_b: dense_vec(file, "out.b")?,
        };
        let (h, e) = (m.header.hidden as usize, m.header.embed as usize);
        if m.embedding.shape.1 != e || m.gates.iter().any(|g| g.shape != (h, h + e)) || m.out_w.shape.1 != h {
            return Err(ModelIoError::Malformed("tensor shapes disagree with header".into()));
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self, ModelIoError> {
        Self::from_file(&QuantModelFile::read(path)?)
    }

    fn act(&self, codes: &[u8]) -> Result<PackedActivation, ModelIoError> {
        Ok(PackedActivation::new(codes, self.header.activation_bits, 1.0, 0.0)?)
    }

    /// Logits after every step of one token sequence, starting from zero state.
    pub fn forward(&self, ids: &[usize]) -> Result<Vec<Vec<f64>>, ModelIoError> {
        let ka = self.header.activation_bits;
        let la = levels(ka) as f64;
        let hidden = self.header.hidden as usize;
        let vocab = self.embedding.shape.0;
        let code = |v: f64| unit_code(v.clamp(0.0, 1.0), ka);
        let mut h = vec![0u8; hidden];
        let mut c = vec![0.0f64; hidden];
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            if id >= vocab {
                return Err(ModelIoError::Malformed(format!(
                    "token id {id} out of range for {vocab}"
                )));
            }
            let x = self.embedding.row_codes(id);
            let hx: Vec<u8> = h.iter().chain(&x).copied().collect();
            let a = self.act(&hx)?;
            let hval: Vec<f64> = h.iter().map(|&q| q as f64 / la).collect();
            if self.header.cell.is_lstm() {
                let pre = |k: usize| -> Result<Vec<f64>, ModelIoError> {
                    let mut v = bitpack::qmatvec(&self.gates[k], &a)?;
                    for (o, b) in v.iter_mut().zip(&self.biases[k]) {
                        *o += b;
                    }
                    Ok(v)
                };
                let (f, i, g, o) = (pre(0)?, pre(1)?, pre(2)?, pre(3)?);
                for j in 0..hidden {
                    c[j] = sigmoid(f[j]) * c[j] + sigmoid(i[j]) * g[j].tanh();
                    h[j] = code(sigmoid(o[j]) * sigmoid(c[j]));
                }
            } else {
                let z: Vec<f64> = bitpack::qmatvec(&self.gates[0], &a)?.into_iter().map(sigmoid).collect();
                let r: Vec<f64> = bitpack::qmatvec(&self.gates[1], &a)?.into_iter().map(sigmoid).collect();
                let rh: Vec<u8> = r
                    .iter()
                    .zip(&hval)
                    .map(|(r, h)| code(r * h))
                    .chain(x.iter().copied())
                    .collect();
                let a2 = self.act(&rh)?;
                let cand: Vec<f64> = bitpack::qmatvec(&self.gates[2], &a2)?
                    .into_iter()
                    .map(sigmoid)
                    .collect();
                for j in 0..hidden {
                    h[j] = code((1.0 - z[j]) * hval[j] + z[j] * cand[j]);
                }
            }
            let mut logits = bitpack::qmatvec(&self.out_w, &self.act(&h)?)?;
            for (l, b) in logits.iter_mut().zip(&self.out_b) {
                *l += b;
            }
            out.push(logits);
        }
        Ok(out)
    }
}
