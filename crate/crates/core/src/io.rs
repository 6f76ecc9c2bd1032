//! File formats: the `DFT1` binary tensor container, multi-section
//! checkpoint files with sibling text manifests, and binary PGM (`P5`)
//! images.
//!
//! ## DFT1 container
//! One tensor record is: magic bytes `DFT1`, a `u8` dtype code (0 = f32,
//! 1 = f64), a `u8` rank, then rank × `u32` little-endian extents, then the
//! payload as little-endian scalars in row-major order.
//!
//! A multi-section file is a sequence of named records, each prefixed with
//! a `u16` little-endian name length and the UTF-8 name bytes. Parse errors
//! report the absolute byte offset at which the file stopped making sense,
//! and a truncated payload never yields a partial tensor.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scalar encodings supported by the container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    fn scalar_width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

const MAGIC: &[u8; 4] = b"DFT1";

fn fmt_err(path: &Path, offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        detail: detail.into(),
    }
}

/// Byte-slice cursor that tracks its absolute offset for error reporting.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(fmt_err(
                self.path,
                self.pos,
                format!("truncated while reading {what} ({n} bytes needed, {} left)", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn write_record(out: &mut Vec<u8>, tensor: &Tensor, dtype: DType) -> Result<()> {
    out.extend_from_slice(MAGIC);
    out.push(dtype.code());
    let rank = tensor.shape().len();
    if rank > u8::MAX as usize {
        return Err(Error::param(format!("rank {rank} exceeds the container limit")));
    }
    out.push(rank as u8);
    for &extent in tensor.shape() {
        let e = u32::try_from(extent)
            .map_err(|_| Error::param(format!("extent {extent} exceeds the u32 container limit")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    match dtype {
        DType::F32 => {
            for &v in tensor.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        DType::F64 => {
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(())
}

fn read_record(c: &mut Cursor) -> Result<Tensor> {
    let start = c.pos;
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(fmt_err(c.path, start, format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let code_at = c.pos;
    let code = c.u8("dtype code")?;
    let dtype = DType::from_code(code).ok_or_else(|| fmt_err(c.path, code_at, format!("unknown dtype code {code}")))?;
    let rank = c.u8("rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut numel = 1usize;
    for i in 0..rank {
        let at = c.pos;
        let extent = c.u32(&format!("extent {i}"))? as usize;
        numel = numel
            .checked_mul(extent)
            .ok_or_else(|| fmt_err(c.path, at, "element count overflows"))?;
        shape.push(extent);
    }
    let payload_at = c.pos;
    let payload = c.take(numel * dtype.scalar_width(), "payload")?;
    let data: Vec<f64> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
            .collect(),
    };
    Tensor::new(&shape, data).map_err(|e| fmt_err(c.path, payload_at, format!("invalid payload: {e}")))
}

/// Writes one bare (unnamed) tensor record.
pub fn save_tensor(path: impl AsRef<Path>, tensor: &Tensor, dtype: DType) -> Result<()> {
    let mut out = Vec::new();
    write_record(&mut out, tensor, dtype)?;
    fs::write(path.as_ref(), out).map_err(|e| Error::io(path.as_ref(), e))
}

/// Reads a file holding exactly one bare tensor record.
pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { bytes: &bytes, pos: 0, path };
    let t = read_record(&mut c)?;
    if !c.done() {
        return Err(fmt_err(path, c.pos, "trailing bytes after the tensor record"));
    }
    Ok(t)
}

/// Writes named tensor sections: each is a `u16` name length, the UTF-8
/// name, then a full DFT1 record.
pub fn save_dft(path: impl AsRef<Path>, sections: &[(String, Tensor)], dtype: DType) -> Result<()> {
    let mut out = Vec::new();
    for (name, tensor) in sections {
        let name_bytes = name.as_bytes();
        let len = u16::try_from(name_bytes.len())
            .map_err(|_| Error::param(format!("section name '{name}' exceeds 65535 bytes")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name_bytes);
        write_record(&mut out, tensor, dtype)?;
    }
    fs::write(path.as_ref(), out).map_err(|e| Error::io(path.as_ref(), e))
}

/// Reads every named section of a multi-section file, in file order.
pub fn load_dft(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { bytes: &bytes, pos: 0, path };
    let mut sections = Vec::new();
    while !c.done() {
        let len = c.u16("section name length")? as usize;
        let at = c.pos;
        let name_bytes = c.take(len, "section name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| fmt_err(path, at, "section name is not UTF-8"))?
            .to_string();
        let tensor = read_record(&mut c)?;
        sections.push((name, tensor));
    }
    Ok(sections)
}

/// Fetches one section by name from a loaded section list.
pub fn section<'a>(sections: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    sections
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::contract(format!("missing checkpoint section '{name}'")))
}

// ── checkpoints with manifests ───────────────────────────────────────

/// Path of the human-readable manifest written next to a checkpoint.
pub fn manifest_path(ckpt: &Path) -> PathBuf {
    let stem = ckpt.file_stem().unwrap_or_default().to_string_lossy();
    ckpt.with_file_name(format!("{stem}.manifest.txt"))
}

/// Writes a checkpoint (f64 sections) plus a sibling text manifest listing
/// `cfg.<key>=<value>` lines followed by `tensor.<name>=f64:<shape>` lines.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    sections: &[(String, Tensor)],
    cfg: &[(String, String)],
) -> Result<()> {
    let path = path.as_ref();
    save_dft(path, sections, DType::F64)?;
    let mut manifest = String::new();
    for (k, v) in cfg {
        manifest.push_str(&format!("cfg.{k}={v}\n"));
    }
    for (name, tensor) in sections {
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("tensor.{name}=f64:[{}]\n", dims.join(",")));
    }
    write_text(manifest_path(path), &manifest)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    load_dft(path)
}

// ── PGM images ───────────────────────────────────────────────────────

/// Affine map from the internal [−1, 1] domain to an 8-bit level.
fn to_level(v: f64) -> u8 {
    (((v + 1.0) * 127.5).round()).clamp(0.0, 255.0) as u8
}

/// Inverse of [`to_level`] up to quantization.
fn from_level(u: u8) -> f64 {
    u as f64 / 127.5 - 1.0
}

/// Writes a binary `P5` PGM with maxval 255. Accepts shape `(h, w)` or
/// `(1, h, w)`; values are mapped affinely from [−1, 1] to [0, 255].
pub fn save_pgm(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    let s = img.shape();
    let (h, w) = match s {
        [h, w] => (*h, *w),
        [1, h, w] => (*h, *w),
        _ => {
            return Err(Error::shape(
                "save_pgm",
                format!("expected (h, w) or (1, h, w), got {s:?}"),
            ))
        }
    };
    let mut out = Vec::with_capacity(32 + h * w);
    out.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    out.extend(img.data().iter().map(|&v| to_level(v)));
    fs::write(path.as_ref(), out).map_err(|e| Error::io(path.as_ref(), e))
}

/// Reads a binary `P5` PGM with maxval 255 into a `(h, w)` tensor over
/// [−1, 1]. Header comments (`#` to end of line) are skipped.
pub fn load_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;

    let mut token = |what: &str| -> Result<(usize, String)> {
        // Skip whitespace and comments.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(fmt_err(path, start, format!("missing {what}")));
        }
        let s = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| fmt_err(path, start, format!("{what} is not ASCII")))?;
        Ok((start, s.to_string()))
    };

    let (at, magic) = token("magic")?;
    if magic != "P5" {
        return Err(fmt_err(path, at, format!("bad magic '{magic}', expected 'P5'")));
    }
    let mut dim = |what: &str| -> Result<usize> {
        let (at, tok) = token(what)?;
        tok.parse::<usize>()
            .map_err(|_| fmt_err(path, at, format!("invalid {what} '{tok}'")))
    };
    let w = dim("width")?;
    let h = dim("height")?;
    let (at, maxval) = token("maxval")?;
    if maxval != "255" {
        return Err(fmt_err(path, at, format!("unsupported maxval '{maxval}', expected 255")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(fmt_err(path, pos, "missing separator before raster"));
    }
    pos += 1;
    let need = h
        .checked_mul(w)
        .ok_or_else(|| fmt_err(path, pos, "image size overflows"))?;
    if bytes.len() - pos < need {
        return Err(fmt_err(
            path,
            pos,
            format!("truncated raster: need {need} bytes, have {}", bytes.len() - pos),
        ));
    }
    let data: Vec<f64> = bytes[pos..pos + need].iter().map(|&u| from_level(u)).collect();
    Tensor::new(&[h, w], data)
}

// ── small text helpers ───────────────────────────────────────────────

pub fn write_text(path: impl AsRef<Path>, contents: &str) -> Result<()> {
    fs::write(path.as_ref(), contents).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn read_text(path: impl AsRef<Path>) -> Result<String> {
    fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))
}

/// Creates a directory (and parents) if missing.
pub fn ensure_dir(path: impl AsRef<Path>) -> Result<()> {
    fs::create_dir_all(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))
}

/// Streams content to a file through a buffered writer; used for logs.
pub fn with_file_writer<T>(
    path: impl AsRef<Path>,
    f: impl FnOnce(&mut dyn Write) -> std::io::Result<T>,
) -> Result<T> {
    let file = fs::File::create(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    let mut buf = std::io::BufWriter::new(file);
    let out = f(&mut buf).map_err(|e| Error::io(path.as_ref(), e))?;
    buf.flush().map_err(|e| Error::io(path.as_ref(), e))?;
    Ok(out)
}

/// Reads a whole file as raw bytes.
pub fn read_bytes(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn bare_tensor_roundtrip_is_bit_exact_in_f64() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.dft");
        let x = t(&[2, 3], vec![1.0, -2.5, 3.25e-11, 4.0, 5.0, -0.0]);
        save_tensor(&path, &x, DType::F64).unwrap();
        let y = load_tensor(&path).unwrap();
        assert_eq!(y.shape(), x.shape());
        for (a, b) in x.data().iter().zip(y.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn f32_roundtrip_quantizes_to_f32() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.dft");
        let x = t(&[3], vec![0.1, -1.0e10, 7.0]);
        save_tensor(&path, &x, DType::F32).unwrap();
        let y = load_tensor(&path).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert_eq!(*b, *a as f32 as f64);
        }
    }

    #[test]
    fn multi_section_roundtrip_preserves_names_and_order() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.dft");
        let sections = vec![
            ("b/second".to_string(), t(&[2], vec![3.0, 4.0])),
            ("a/first".to_string(), t(&[1, 2], vec![1.0, 2.0])),
            ("empty".to_string(), t(&[0, 4], vec![])),
        ];
        save_dft(&path, &sections, DType::F64).unwrap();
        let loaded = load_dft(&path).unwrap();
        assert_eq!(loaded.len(), 3);
        for ((n0, t0), (n1, t1)) in sections.iter().zip(&loaded) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            assert_eq!(t0.data(), t1.data());
        }
        assert!(section(&loaded, "a/first").is_ok());
        assert!(section(&loaded, "nope").is_err());
    }

    #[test]
    fn truncated_payload_is_a_format_error_with_offset() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.dft");
        let x = t(&[4], vec![1.0, 2.0, 3.0, 4.0]);
        save_tensor(&path, &x, DType::F64).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 5]).unwrap();
        match load_tensor(&path) {
            Err(Error::Format { offset, .. }) => {
                // Payload starts after magic(4) + dtype(1) + rank(1) + extent(4).
                assert_eq!(offset, 10);
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_bad_dtype_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.dft");
        std::fs::write(&path, b"NOPE\x01\x01\x01\x00\x00\x00").unwrap();
        assert!(matches!(load_tensor(&path), Err(Error::Format { offset: 0, .. })));
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"DFT1");
        bytes.push(9); // unknown dtype code
        bytes.push(0);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_tensor(&path), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn trailing_garbage_after_bare_record_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.dft");
        let x = t(&[1], vec![5.0]);
        save_tensor(&path, &x, DType::F64).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0xFF);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_tensor(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn pgm_roundtrip_stays_within_one_quantization_step() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let data: Vec<f64> = (0..64).map(|i| -1.0 + 2.0 * (i as f64) / 63.0).collect();
        let img = t(&[8, 8], data);
        save_pgm(&path, &img).unwrap();
        let back = load_pgm(&path).unwrap();
        assert_eq!(back.shape(), &[8, 8]);
        let err = img.max_abs_diff(&back).unwrap();
        assert!(err <= 1.0 / 127.5, "round-trip error {err}");
    }

    #[test]
    fn pgm_extremes_map_to_full_range() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let img = t(&[1, 2], vec![-1.0, 1.0]);
        save_pgm(&path, &img).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let raster = &bytes[bytes.len() - 2..];
        assert_eq!(raster, &[0u8, 255u8]);
        let back = load_pgm(&path).unwrap();
        assert_eq!(back.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn pgm_header_with_comment_parses() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let mut bytes = b"P5\n# a comment\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 64, 128, 255]);
        std::fs::write(&path, bytes).unwrap();
        let img = load_pgm(&path).unwrap();
        assert_eq!(img.shape(), &[2, 2]);
    }

    #[test]
    fn pgm_bad_magic_and_truncation_carry_offsets() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        std::fs::write(&path, b"P2\n2 2\n255\n....").unwrap();
        assert!(matches!(load_pgm(&path), Err(Error::Format { offset: 0, .. })));
        std::fs::write(&path, b"P5\n4 4\n255\nab").unwrap();
        match load_pgm(&path) {
            Err(Error::Format { offset, detail, .. }) => {
                assert_eq!(offset, 11);
                assert!(detail.contains("truncated"));
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_writes_manifest_listing_sections() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.dft");
        let sections = vec![("enc/w".to_string(), t(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]))];
        let cfg = vec![("seed".to_string(), "7".to_string())];
        save_checkpoint(&path, &sections, &cfg).unwrap();
        let manifest = read_text(manifest_path(&path)).unwrap();
        assert!(manifest.contains("cfg.seed=7"));
        assert!(manifest.contains("tensor.enc/w=f64:[2,2]"));
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded[0].0, "enc/w");
    }
}
