//! On-disk formats.
//!
//! # NRVF feature bundle (version 1)
//!
//! All integers are unsigned 32-bit little-endian, all tensors row-major
//! little-endian `f32`. `N = grid_h · grid_w`.
//!
//! | field            | size                               |
//! |------------------|------------------------------------|
//! | magic `"NRVF"`   | 4                                  |
//! | version          | 4                                  |
//! | grid_h           | 4                                  |
//! | grid_w           | 4                                  |
//! | D (feature dim)  | 4                                  |
//! | head_count       | 4                                  |
//! | K (classes)      | 4                                  |
//! | label_mode       | 4 (0 = CROSS_ATTN, 1 = PROBS)      |
//! | source tag       | u32 length + UTF-8 bytes           |
//! | class names      | K × (u32 length + UTF-8 bytes)     |
//! | heads            | head_count × (layer u32, head u32, Q N×D, K N×D) |
//! | label block      | CROSS_ATTN: token queries N×D then prompt keys K×D; PROBS: G N×K |
//! | crc32            | 4, IEEE CRC-32 of every preceding byte |
//!
//! Magic, version and header limits are checked before anything sized from the
//! header is allocated; the checksum is verified before the body is parsed.
//!
//! # NRVP probabilities
//!
//! Magic `"NRVP"`, version, grid_h, grid_w, K, steps_used (u32 each), the
//! residual bound as `f64`, N×K `f32` probabilities, trailing CRC-32.
//!
//! # Masks
//!
//! Binary PGM (`P5`, maxval 255), one byte per patch holding the class index.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::affinity::{FeatureBundle, HeadFeatures};
use crate::error::{Error, Result};
use crate::label_gen::{cross_attention_g, g_from_probabilities, LabelGenerator};
use crate::matrix::Grid;
use crate::walk::{LabelProbabilities, Mask};

pub const BUNDLE_MAGIC: [u8; 4] = *b"NRVF";
pub const PROBS_MAGIC: [u8; 4] = *b"NRVP";
pub const FORMAT_VERSION: u32 = 1;

const HEADER_LEN: usize = 32;
const CRC_LEN: usize = 4;

pub const MAX_NODES: u64 = 1 << 24;
pub const MAX_FEATURE_DIM: u64 = 1 << 16;
pub const MAX_HEADS: u64 = 1 << 12;
pub const MAX_CLASSES: u64 = 1 << 16;

const MODE_CROSS_ATTN: u32 = 0;
const MODE_PROBS: u32 = 1;

/// Label inputs carried by a bundle file.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelInput {
    /// Token query embeddings (N×D) and class-prompt key embeddings (K×D).
    CrossAttention {
        token_queries: Array2<f64>,
        prompt_keys: Array2<f64>,
    },
    /// Precomputed row-stochastic N×K probabilities.
    Probabilities(Array2<f64>),
}

/// Everything stored in an NRVF file.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleFile {
    pub bundle: FeatureBundle,
    pub class_names: Vec<String>,
    pub labels: LabelInput,
}

impl BundleFile {
    pub fn label_generator(&self) -> Result<LabelGenerator> {
        match &self.labels {
            LabelInput::CrossAttention {
                token_queries,
                prompt_keys,
            } => cross_attention_g(token_queries.view(), prompt_keys.view(), self.class_names.clone()),
            LabelInput::Probabilities(p) => g_from_probabilities(p.clone(), self.class_names.clone()),
        }
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn len(&mut self, v: usize, field: &'static str) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::InconsistentHeader {
            field,
            detail: format!("{v} does not fit in 32 bits"),
        })?;
        self.u32(v);
        Ok(())
    }

    fn string(&mut self, s: &str, field: &'static str) -> Result<()> {
        self.len(s.len(), field)?;
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }

    fn tensor(&mut self, m: &Array2<f64>) {
        for v in m.iter() {
            self.buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }

    fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

/// Serializes a bundle to NRVF bytes.
pub fn encode_bundle(file: &BundleFile) -> Result<Vec<u8>> {
    let b = &file.bundle;
    let grid = b.grid();
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(&BUNDLE_MAGIC);
    w.u32(FORMAT_VERSION);
    w.len(grid.height, "grid_h")?;
    w.len(grid.width, "grid_w")?;
    w.len(b.feature_dim(), "feature_dim")?;
    w.len(b.heads().len(), "head_count")?;
    w.len(file.class_names.len(), "class_count")?;
    let mode = match &file.labels {
        LabelInput::CrossAttention {
            token_queries,
            prompt_keys,
        } => {
            if token_queries.dim() != (b.n(), b.feature_dim())
                || prompt_keys.dim() != (file.class_names.len(), b.feature_dim())
            {
                return Err(Error::InconsistentHeader {
                    field: "label_block",
                    detail: "cross-attention inputs do not match N, K, D".into(),
                });
            }
            MODE_CROSS_ATTN
        }
        LabelInput::Probabilities(p) => {
            if p.dim() != (b.n(), file.class_names.len()) {
                return Err(Error::InconsistentHeader {
                    field: "label_block",
                    detail: format!("probabilities have shape {:?}", p.dim()),
                });
            }
            MODE_PROBS
        }
    };
    w.u32(mode);
    w.string(b.source_tag(), "source_tag")?;
    for name in &file.class_names {
        w.string(name, "class_names")?;
    }
    for head in b.heads() {
        w.u32(head.layer_index);
        w.u32(head.head_index);
        w.tensor(&head.queries);
        w.tensor(&head.keys);
    }
    match &file.labels {
        LabelInput::CrossAttention {
            token_queries,
            prompt_keys,
        } => {
            w.tensor(token_queries);
            w.tensor(prompt_keys);
        }
        LabelInput::Probabilities(p) => w.tensor(p),
    }
    Ok(w.finish())
}

pub fn save_bundle(path: impl AsRef<Path>, file: &BundleFile) -> Result<()> {
    fs::write(path, encode_bundle(file)?)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, len: usize, field: &'static str) -> Result<&'a [u8]> {
        if len > self.remaining() {
            return Err(Error::InconsistentHeader {
                field,
                detail: format!("needs {len} bytes, {} remain", self.remaining()),
            });
        }
        let out = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self, field: &'static str) -> Result<f64> {
        let b = self.take(8, field)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn string(&mut self, field: &'static str) -> Result<String> {
        let len = self.u32(field)? as usize;
        let bytes = self.take(len, field)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| Error::CorruptPayload {
            field,
            detail: e.to_string(),
        })
    }

    fn tensor(&mut self, rows: usize, cols: usize, field: &'static str) -> Result<Array2<f64>> {
        let bytes = self.take(rows * cols * 4, field)?;
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::CorruptPayload {
                field,
                detail: "non-finite value".into(),
            });
        }
        Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
    }
}

fn header_field(bytes: &[u8], index: usize) -> u32 {
    let at = 4 + 4 * index;
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn check_magic_and_crc(bytes: &[u8], magic: [u8; 4], min_len: usize) -> Result<()> {
    if bytes.len() < 8 {
        return Err(Error::CorruptPayload {
            field: "header",
            detail: format!("file truncated to {} bytes", bytes.len()),
        });
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if found != magic {
        return Err(Error::BadMagic {
            expected: magic,
            found,
        });
    }
    let version = header_field(bytes, 0);
    if version != FORMAT_VERSION {
        return Err(Error::VersionUnsupported {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    if bytes.len() < min_len + CRC_LEN {
        return Err(Error::CorruptPayload {
            field: "header",
            detail: format!("file truncated to {} bytes", bytes.len()),
        });
    }
    Ok(())
}

fn verify_crc(bytes: &[u8]) -> Result<&[u8]> {
    let (body, tail) = bytes.split_at(bytes.len() - CRC_LEN);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::CorruptPayload {
            field: "crc32",
            detail: format!("stored {stored:#010x}, computed {computed:#010x}"),
        });
    }
    Ok(body)
}

fn bounded(value: u32, field: &'static str, min: u64, max: u64) -> Result<usize> {
    let v = value as u64;
    if v < min || v > max {
        return Err(Error::InconsistentHeader {
            field,
            detail: format!("{v} outside [{min}, {max}]"),
        });
    }
    Ok(v as usize)
}

/// Parses NRVF bytes.
pub fn decode_bundle(bytes: &[u8]) -> Result<BundleFile> {
    check_magic_and_crc(bytes, BUNDLE_MAGIC, HEADER_LEN)?;
    let grid_h = bounded(header_field(bytes, 1), "grid_h", 2, MAX_NODES)?;
    let grid_w = bounded(header_field(bytes, 2), "grid_w", 2, MAX_NODES)?;
    let n = grid_h as u64 * grid_w as u64;
    if n > MAX_NODES {
        return Err(Error::InconsistentHeader {
            field: "grid_h*grid_w",
            detail: format!("{n} nodes exceeds limit {MAX_NODES}"),
        });
    }
    let n = n as usize;
    let d = bounded(header_field(bytes, 3), "feature_dim", 1, MAX_FEATURE_DIM)?;
    let heads = bounded(header_field(bytes, 4), "head_count", 1, MAX_HEADS)?;
    let k = bounded(header_field(bytes, 5), "class_count", 1, MAX_CLASSES)?;
    let mode = header_field(bytes, 6);
    if mode != MODE_CROSS_ATTN && mode != MODE_PROBS {
        return Err(Error::InconsistentHeader {
            field: "label_mode",
            detail: format!("unknown mode {mode}"),
        });
    }

    let body = verify_crc(bytes)?;
    let mut r = Reader {
        buf: body,
        pos: HEADER_LEN,
    };
    let source_tag = r.string("source_tag")?;
    let class_names = (0..k)
        .map(|_| r.string("class_names"))
        .collect::<Result<Vec<_>>>()?;

    let per_head = 8 + 2 * (n as u64) * (d as u64) * 4;
    let label_bytes = if mode == MODE_CROSS_ATTN {
        (n as u64 + k as u64) * d as u64 * 4
    } else {
        n as u64 * k as u64 * 4
    };
    let expected = heads as u64 * per_head + label_bytes;
    if expected != r.remaining() as u64 {
        return Err(Error::InconsistentHeader {
            field: "payload_length",
            detail: format!(
                "header implies {expected} tensor bytes, file holds {}",
                r.remaining()
            ),
        });
    }

    let mut head_features = Vec::with_capacity(heads);
    for _ in 0..heads {
        let layer_index = r.u32("head_record")?;
        let head_index = r.u32("head_record")?;
        head_features.push(HeadFeatures {
            queries: r.tensor(n, d, "head_queries")?,
            keys: r.tensor(n, d, "head_keys")?,
            layer_index,
            head_index,
        });
    }
    let labels = if mode == MODE_CROSS_ATTN {
        LabelInput::CrossAttention {
            token_queries: r.tensor(n, d, "token_queries")?,
            prompt_keys: r.tensor(k, d, "prompt_keys")?,
        }
    } else {
        LabelInput::Probabilities(r.tensor(n, k, "probabilities")?)
    };
    let bundle = FeatureBundle::new(head_features, Grid::new(grid_h, grid_w), d, source_tag)
        .map_err(|e| Error::CorruptPayload {
            field: "heads",
            detail: e.to_string(),
        })?;
    Ok(BundleFile {
        bundle,
        class_names,
        labels,
    })
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<BundleFile> {
    decode_bundle(&fs::read(path)?)
}

/// Serializes probabilities to NRVP bytes.
pub fn encode_probabilities(probs: &LabelProbabilities, grid: Grid) -> Result<Vec<u8>> {
    grid.check_nodes(probs.p.nrows())?;
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(&PROBS_MAGIC);
    w.u32(FORMAT_VERSION);
    w.len(grid.height, "grid_h")?;
    w.len(grid.width, "grid_w")?;
    w.len(probs.p.ncols(), "class_count")?;
    w.len(probs.steps_used, "steps_used")?;
    w.buf.extend_from_slice(&probs.residual_bound_value.to_le_bytes());
    w.tensor(&probs.p);
    Ok(w.finish())
}

/// Probabilities read back from an NRVP file.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredProbabilities {
    pub grid: Grid,
    pub p: Array2<f64>,
    pub steps_used: usize,
    pub residual_bound_value: f64,
}

pub fn decode_probabilities(bytes: &[u8]) -> Result<StoredProbabilities> {
    check_magic_and_crc(bytes, PROBS_MAGIC, 32)?;
    let grid_h = bounded(header_field(bytes, 1), "grid_h", 1, MAX_NODES)?;
    let grid_w = bounded(header_field(bytes, 2), "grid_w", 1, MAX_NODES)?;
    let n = grid_h as u64 * grid_w as u64;
    if n > MAX_NODES {
        return Err(Error::InconsistentHeader {
            field: "grid_h*grid_w",
            detail: format!("{n} nodes exceeds limit {MAX_NODES}"),
        });
    }
    let k = bounded(header_field(bytes, 3), "class_count", 1, MAX_CLASSES)?;
    let steps_used = header_field(bytes, 4) as usize;
    let body = verify_crc(bytes)?;
    let mut r = Reader { buf: body, pos: 24 };
    let residual_bound_value = r.f64("residual_bound")?;
    if r.remaining() as u64 != n * k as u64 * 4 {
        return Err(Error::InconsistentHeader {
            field: "payload_length",
            detail: format!("{} bytes for {n}x{k} probabilities", r.remaining()),
        });
    }
    let p = r.tensor(n as usize, k, "probabilities")?;
    Ok(StoredProbabilities {
        grid: Grid::new(grid_h, grid_w),
        p,
        steps_used,
        residual_bound_value,
    })
}

/// Binary PGM of class indices.
pub fn encode_pgm(mask: &Mask) -> Result<Vec<u8>> {
    let mut out = format!("P5\n{} {}\n255\n", mask.grid.width, mask.grid.height).into_bytes();
    for &label in &mask.labels {
        let byte = u8::try_from(label).map_err(|_| Error::invalid(
            "class index",
            label,
            "masks hold at most 256 classes",
        ))?;
        out.push(byte);
    }
    Ok(out)
}

/// Parses a binary PGM written by [`encode_pgm`].
pub fn decode_pgm(bytes: &[u8]) -> Result<Mask> {
    let corrupt = |detail: &str| Error::CorruptPayload {
        field: "pgm",
        detail: detail.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(corrupt("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| corrupt("header"))?);
    }
    if fields[0] != "P5" {
        return Err(corrupt("not a binary graymap"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| corrupt("bad number"));
    let (width, height) = (parse(fields[1])?, parse(fields[2])?);
    let data = &bytes[(pos + 1).min(bytes.len())..];
    if data.len() != width * height {
        return Err(corrupt("pixel count mismatch"));
    }
    Ok(Mask {
        grid: Grid::new(height, width),
        labels: data.iter().map(|&b| b as u32).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny_bundle(mode_probs: bool) -> BundleFile {
        let q = Array2::from_shape_fn((4, 2), |(i, j)| (i * 2 + j) as f64 * 0.5 + 0.25);
        let k = Array2::from_shape_fn((4, 2), |(i, j)| 1.0 - (i + j) as f64 * 0.125);
        let head = HeadFeatures {
            queries: q.clone(),
            keys: k,
            layer_index: 3,
            head_index: 1,
        };
        let bundle = FeatureBundle::new(vec![head], Grid::new(2, 2), 2, "unit").unwrap();
        let labels = if mode_probs {
            LabelInput::Probabilities(array![[0.5, 0.5], [0.25, 0.75], [1.0, 0.0], [0.0, 1.0]])
        } else {
            LabelInput::CrossAttention {
                token_queries: q,
                prompt_keys: array![[1.0, 0.0], [0.0, 1.0]],
            }
        };
        BundleFile {
            bundle,
            class_names: vec!["sky".into(), "tree".into()],
            labels,
        }
    }

    #[test]
    fn bundle_round_trip() {
        for probs in [false, true] {
            let file = tiny_bundle(probs);
            let bytes = encode_bundle(&file).unwrap();
            let back = decode_bundle(&bytes).unwrap();
            assert_eq!(back, file);
            assert_eq!(encode_bundle(&back).unwrap(), bytes);
            back.label_generator().unwrap();
        }
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = encode_bundle(&tiny_bundle(true)).unwrap();
        assert_eq!(&bytes[..4], b"NRVF");
        let fields: Vec<u32> = (0..7).map(|i| header_field(&bytes, i)).collect();
        assert_eq!(fields, vec![1, 2, 2, 2, 1, 2, 1]);
        // tag(4+4) + names(4+3+4+4) + head(8+2·4·2·4) + probs(4·2·4) + crc
        assert_eq!(bytes.len(), 32 + 8 + 15 + 72 + 32 + 4);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let bytes = encode_bundle(&tiny_bundle(false)).unwrap();
        for cut in [0, 3, 20, 40, bytes.len() - 1] {
            let err = decode_bundle(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::CorruptPayload { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn huge_grid_rejected_before_allocation() {
        let mut bytes = encode_bundle(&tiny_bundle(false)).unwrap();
        bytes[8..12].copy_from_slice(&65536u32.to_le_bytes());
        bytes[12..16].copy_from_slice(&65536u32.to_le_bytes());
        let err = decode_bundle(&bytes).unwrap_err();
        assert!(matches!(err, Error::InconsistentHeader { field: "grid_h*grid_w", .. }));
    }

    #[test]
    fn probabilities_round_trip() {
        let p = LabelProbabilities {
            p: array![[0.1, 0.9], [0.3, 0.7], [0.5, 0.5], [1.0 / 3.0, 2.0 / 3.0]],
            steps_used: 40,
            residual_bound_value: 4.0 * 0.9f64.powi(41),
            mode: crate::walk::WalkMode::TruncatedIterative,
        };
        let bytes = encode_probabilities(&p, Grid::new(2, 2)).unwrap();
        let back = decode_probabilities(&bytes).unwrap();
        assert_eq!(back.steps_used, 40);
        assert_eq!(back.residual_bound_value, p.residual_bound_value);
        for (a, b) in back.p.iter().zip(p.p.iter()) {
            assert!((a - b).abs() <= f32::EPSILON as f64);
        }
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(decode_probabilities(&flipped), Err(Error::CorruptPayload { .. })));
    }

    #[test]
    fn pgm_layout() {
        let mask = Mask {
            grid: Grid::new(2, 2),
            labels: vec![0, 2, 1, 2],
        };
        let bytes = encode_pgm(&mask).unwrap();
        assert_eq!(bytes, b"P5\n2 2\n255\n\x00\x02\x01\x02".to_vec());
        assert_eq!(decode_pgm(&bytes).unwrap(), mask);
        let big = Mask {
            grid: Grid::new(1, 1),
            labels: vec![300],
        };
        assert!(encode_pgm(&big).is_err());
    }
}
