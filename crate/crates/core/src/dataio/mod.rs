//! Binary embedding and prompt-bank files, CSV import, and dataset directories.
//!
//! All multi-byte fields are little-endian. Embedding file layout:
//!
//! ```text
//! "COGE" | version u16 | T u32 | d_vis u32 | fps f32 | f32[T·d_vis]
//!        | optional: 0x01 | u8[T] labels
//! ```
//!
//! Prompt-bank layout: `"COGP" | J u32 | d_text u32 | J × (utf-8, 0x00) | f32[J·d_text]`.

pub mod synth;

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::error::{at_path, Result};
use crate::gvr::GesturePromptBank;
use crate::tensor::Tensor;

pub use synth::{synth_generate, SynthConfig};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"COGE";
pub const EMBEDDING_VERSION: u16 = 1;
pub const PROMPT_MAGIC: &[u8; 4] = b"COGP";
pub const LABEL_MARKER: u8 = 0x01;
pub const DEFAULT_FPS: f32 = 5.0;
pub const MANIFEST: &str = "manifest.csv";
pub const PROMPT_FILE: &str = "prompts.cogp";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { expected: u16, found: u16 },
    #[error("truncated {what}: needed {needed} bytes, {available} available")]
    Truncated {
        what: &'static str,
        needed: u64,
        available: u64,
    },
    #[error("bad label block marker 0x{0:02x}")]
    BadLabelMarker(u8),
    #[error("label at frame {index} is {value}, expected 0 or 1")]
    BadLabel { index: usize, value: u8 },
    #[error("{0} unexpected trailing bytes")]
    TrailingData(usize),
    #[error("prompt {index} is not valid utf-8")]
    InvalidUtf8 { index: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("line {line}: {detail}")]
    Csv { line: usize, detail: String },
}

/// A sequence of frame embeddings with optional per-frame error labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence {
    /// `[T × d_vis]`
    pub frames: Tensor<f32>,
    pub fps: f32,
    pub labels: Option<Vec<u8>>,
}

impl EmbeddingSequence {
    pub fn new(frames: Tensor<f32>, fps: f32, labels: Option<Vec<u8>>) -> Result<Self> {
        let (t, _) = frames.dims2("embeddings")?;
        if let Some(l) = &labels {
            if l.len() != t {
                return Err(
                    FormatError::Invalid(format!("{} labels for {t} frames", l.len())).into(),
                );
            }
            if let Some((index, &value)) = l.iter().enumerate().find(|(_, &v)| v > 1) {
                return Err(FormatError::BadLabel { index, value }.into());
            }
        }
        Ok(Self {
            frames,
            fps,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_vis(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        self.frames.row(t)
    }
}

/// Little-endian byte cursor that reports truncation as a typed error.
pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: u64, what: &'static str) -> Result<&'a [u8], FormatError> {
        let available = self.remaining() as u64;
        if n > available {
            return Err(FormatError::Truncated {
                what,
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n as usize];
        self.pos += n as usize;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], FormatError> {
        Ok(self
            .take(N as u64, what)?
            .try_into()
            .expect("length checked"))
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn u64(&mut self, what: &'static str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn f32(&mut self, what: &'static str) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn f64(&mut self, what: &'static str) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn f32s(&mut self, n: u64, what: &'static str) -> Result<Vec<f32>, FormatError> {
        let bytes = n.checked_mul(4).ok_or(FormatError::Truncated {
            what,
            needed: u64::MAX,
            available: self.remaining() as u64,
        })?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect())
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<(), FormatError> {
        let found = self.take(4.min(self.remaining() as u64), "magic")?;
        if found.len() < 4 && expected.starts_with(found) {
            return Err(FormatError::Truncated {
                what: "magic",
                needed: 4,
                available: found.len() as u64,
            });
        }
        if found != expected {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<(), FormatError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(FormatError::TrailingData(n)),
        }
    }
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_embeddings(seq: &EmbeddingSequence) -> Result<Vec<u8>> {
    let (t, d) = seq.frames.dims2("embeddings")?;
    let t32 = u32::try_from(t).map_err(|_| FormatError::Invalid("too many frames".into()))?;
    let d32 = u32::try_from(d).map_err(|_| FormatError::Invalid("embedding too wide".into()))?;
    let mut out = Vec::with_capacity(18 + t * d * 4 + t + 1);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&t32.to_le_bytes());
    out.extend_from_slice(&d32.to_le_bytes());
    out.extend_from_slice(&seq.fps.to_le_bytes());
    put_f32s(&mut out, seq.frames.data());
    if let Some(labels) = &seq.labels {
        out.push(LABEL_MARKER);
        out.extend_from_slice(labels);
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingSequence> {
    let mut c = Cursor::new(bytes);
    c.magic(EMBEDDING_MAGIC)?;
    let version = c.u16("version")?;
    if version != EMBEDDING_VERSION {
        return Err(FormatError::VersionMismatch {
            expected: EMBEDDING_VERSION,
            found: version,
        }
        .into());
    }
    let t = c.u32("header")? as usize;
    let d = c.u32("header")? as usize;
    let fps = c.f32("header")?;
    let data = c.f32s(t as u64 * d as u64, "payload")?;
    let labels = if c.remaining() == 0 {
        None
    } else {
        let marker = c.take(1, "label marker")?[0];
        if marker != LABEL_MARKER {
            return Err(FormatError::BadLabelMarker(marker).into());
        }
        let l = c.take(t as u64, "labels")?.to_vec();
        if let Some((index, &value)) = l.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(FormatError::BadLabel { index, value }.into());
        }
        Some(l)
    };
    c.finish()?;
    Ok(EmbeddingSequence {
        frames: Tensor::new(vec![t, d], data)?,
        fps,
        labels,
    })
}

pub fn write_embeddings(seq: &EmbeddingSequence, path: &Path) -> Result<()> {
    fs::write(path, encode_embeddings(seq)?).map_err(at_path(path))?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSequence> {
    decode_embeddings(&fs::read(path).map_err(at_path(path))?)
}

/// Reads a whole embedding file from any reader (e.g. standard input).
pub fn read_embeddings_from(mut r: impl Read) -> Result<EmbeddingSequence> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode_embeddings(&buf)
}

pub fn encode_prompt_bank(bank: &GesturePromptBank) -> Result<Vec<u8>> {
    let (j, d) = bank.vectors.dims2("prompt bank")?;
    let mut out = Vec::new();
    out.extend_from_slice(PROMPT_MAGIC);
    out.extend_from_slice(&(j as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for text in &bank.texts {
        if text.as_bytes().contains(&0) {
            return Err(FormatError::Invalid("prompt text contains a NUL byte".into()).into());
        }
        out.extend_from_slice(text.as_bytes());
        out.push(0);
    }
    put_f32s(&mut out, bank.vectors.data());
    Ok(out)
}

pub fn decode_prompt_bank(bytes: &[u8]) -> Result<GesturePromptBank> {
    let mut c = Cursor::new(bytes);
    c.magic(PROMPT_MAGIC)?;
    let j = c.u32("header")? as usize;
    let d = c.u32("header")? as usize;
    if j == 0 {
        return Err(FormatError::Invalid("prompt bank is empty".into()).into());
    }
    let mut texts = Vec::with_capacity(j.min(1 << 16));
    for index in 0..j {
        let rest = &c.buf[c.pos..];
        let end = rest
            .iter()
            .position(|&b| b == 0)
            .ok_or(FormatError::Truncated {
                what: "prompt text",
                needed: rest.len() as u64 + 1,
                available: rest.len() as u64,
            })?;
        let s =
            std::str::from_utf8(&rest[..end]).map_err(|_| FormatError::InvalidUtf8 { index })?;
        texts.push(s.to_owned());
        c.pos += end + 1;
    }
    let data = c.f32s(j as u64 * d as u64, "payload")?;
    c.finish()?;
    GesturePromptBank::new(texts, Tensor::new(vec![j, d], data)?)
}

pub fn write_prompt_bank(bank: &GesturePromptBank, path: &Path) -> Result<()> {
    fs::write(path, encode_prompt_bank(bank)?).map_err(at_path(path))?;
    Ok(())
}

pub fn read_prompt_bank(path: &Path) -> Result<GesturePromptBank> {
    decode_prompt_bank(&fs::read(path).map_err(at_path(path))?)
}

/// Parses comma-separated rows of `d_vis` floats with an optional trailing
/// 0/1 label column. Every row must agree on whether the label is present.
pub fn parse_csv(text: &str, d_vis: usize) -> Result<EmbeddingSequence> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut labelled: Option<bool> = None;
    let mut t = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let row = raw.trim();
        if row.is_empty() {
            continue;
        }
        let cells: Vec<&str> = row.split(',').map(str::trim).collect();
        let has_label = match cells.len() {
            n if n == d_vis => false,
            n if n == d_vis + 1 => true,
            n => {
                return Err(FormatError::Csv {
                    line,
                    detail: format!("expected {d_vis} or {} columns, found {n}", d_vis + 1),
                }
                .into())
            }
        };
        if *labelled.get_or_insert(has_label) != has_label {
            return Err(FormatError::Csv {
                line,
                detail: "label column present on some rows only".into(),
            }
            .into());
        }
        for (col, cell) in cells[..d_vis].iter().enumerate() {
            let v: f32 = cell.parse().map_err(|_| FormatError::Csv {
                line,
                detail: format!("column {}: `{cell}` is not a number", col + 1),
            })?;
            data.push(v);
        }
        if has_label {
            let cell = cells[d_vis];
            let l = match cell {
                "0" => 0,
                "1" => 1,
                _ => {
                    return Err(FormatError::Csv {
                        line,
                        detail: format!("label `{cell}` is not 0 or 1"),
                    }
                    .into())
                }
            };
            labels.push(l);
        }
        t += 1;
    }
    let labels = (labelled == Some(true)).then_some(labels);
    EmbeddingSequence::new(Tensor::new(vec![t, d_vis], data)?, DEFAULT_FPS, labels)
}

pub fn import_csv(path: &Path, d_vis: usize) -> Result<EmbeddingSequence> {
    parse_csv(&fs::read_to_string(path).map_err(at_path(path))?, d_vis)
}

/// One recorded video with its LOSO identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: String,
    pub surgeon: u32,
    pub trial: u32,
    pub sequence: EmbeddingSequence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub videos: Vec<Video>,
    pub prompts: GesturePromptBank,
}

impl Dataset {
    pub fn d_vis(&self) -> Option<usize> {
        self.videos.first().map(|v| v.sequence.d_vis())
    }
}

/// Writes `manifest.csv`, one `<id>.coge` per video and `prompts.cogp`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = BufWriter::new(fs::File::create(dir.join(MANIFEST))?);
    writeln!(manifest, "id,surgeon,trial,file")?;
    for v in &ds.videos {
        if v.id.is_empty() || v.id.contains([',', '/', '\\', '\n']) {
            return Err(FormatError::Invalid(format!("unusable video id `{}`", v.id)).into());
        }
        let file = format!("{}.coge", v.id);
        write_embeddings(&v.sequence, &dir.join(&file))?;
        writeln!(manifest, "{},{},{},{}", v.id, v.surgeon, v.trial, file)?;
    }
    manifest.flush()?;
    write_prompt_bank(&ds.prompts, &dir.join(PROMPT_FILE))?;
    Ok(())
}

/// Manifest rows: `(id, surgeon, trial, file)`.
pub fn read_manifest(dir: &Path) -> Result<Vec<(String, u32, u32, PathBuf)>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(at_path(&path))?;
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate().skip(1) {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = raw.split(',').map(str::trim).collect();
        let [id, surgeon, trial, file] = cells[..] else {
            return Err(FormatError::Csv {
                line,
                detail: format!("expected 4 manifest columns, found {}", cells.len()),
            }
            .into());
        };
        let num = |s: &str, what: &str| {
            s.parse::<u32>().map_err(|_| FormatError::Csv {
                line,
                detail: format!("{what} `{s}` is not an integer"),
            })
        };
        rows.push((
            id.to_owned(),
            num(surgeon, "surgeon")?,
            num(trial, "trial")?,
            dir.join(file),
        ));
    }
    Ok(rows)
}

/// Loads a dataset directory. `prompts` overrides the bundled prompt file.
pub fn read_dataset(dir: &Path, prompts: Option<&Path>) -> Result<Dataset> {
    let prompt_path = prompts.map_or_else(|| dir.join(PROMPT_FILE), Path::to_path_buf);
    let prompts = read_prompt_bank(&prompt_path)?;
    let mut videos = Vec::new();
    for (id, surgeon, trial, file) in read_manifest(dir)? {
        let sequence = read_embeddings(&file)?;
        videos.push(Video {
            id,
            surgeon,
            trial,
            sequence,
        });
    }
    if let Some(v) = videos
        .iter()
        .find(|v| Some(v.sequence.d_vis()) != videos.first().map(|f| f.sequence.d_vis()))
    {
        return Err(FormatError::Invalid(format!(
            "video `{}` has a different embedding width",
            v.id
        ))
        .into());
    }
    Ok(Dataset { videos, prompts })
}
