//! Binary and CSV persistence for [`EmbeddingSet`].
//!
//! Binary layout (little-endian):
//!
//! ```text
//! "XMA1" | u32 N | u32 d | u8 flags | N*d f32 row-major | N u8 modality
//!        | [N u32 true_id] | [N u32 camera]
//! ```
//!
//! `flags` bit 0: true ids present, bit 1: cameras present, bit 2: normalized.
//!
//! CSV has the header `f0,..,f{d-1},modality[,id][,camera]`, modality as
//! `VIS`/`IR`.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::{EmbeddingSet, Modality};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"XMA1";

const FLAG_IDS: u8 = 1;
const FLAG_CAMERA: u8 = 1 << 1;
const FLAG_NORMALIZED: u8 = 1 << 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Binary,
    Csv,
}

impl Format {
    /// `.csv` selects CSV, anything else binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Binary,
        }
    }
}

pub fn load(path: impl AsRef<Path>, format: Format) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    match format {
        Format::Binary => {
            let mut bytes = Vec::new();
            File::open(path)
                .and_then(|mut f| f.read_to_end(&mut bytes))
                .map_err(|e| Error::io(path, e))?;
            decode_binary(&bytes)
        }
        Format::Csv => {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            read_csv(file)
        }
    }
}

pub fn save(set: &EmbeddingSet, path: impl AsRef<Path>, format: Format) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    match format {
        Format::Binary => w
            .write_all(&encode_binary(set))
            .map_err(|e| Error::io(path, e))?,
        Format::Csv => write_csv(set, &mut w).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })?,
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn encode_binary(set: &EmbeddingSet) -> Vec<u8> {
    let (n, d) = set.features.dim();
    let mut out = Vec::with_capacity(13 + n * d * 4 + n * 9);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    let mut flags = 0u8;
    if set.true_id.is_some() {
        flags |= FLAG_IDS;
    }
    if set.camera.is_some() {
        flags |= FLAG_CAMERA;
    }
    if set.normalized {
        flags |= FLAG_NORMALIZED;
    }
    out.push(flags);
    for v in set.features.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend(set.modality.iter().map(|m| m.as_byte()));
    for col in [&set.true_id, &set.camera].into_iter().flatten() {
        for v in col {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::BadHeader(format!("file truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u32_vec(&mut self, n: usize, what: &str) -> Result<Vec<u32>> {
        let b = self.take(n * 4, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub fn decode_binary(bytes: &[u8]) -> Result<EmbeddingSet> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadHeader(format!(
            "bad magic {:?}, expected \"XMA1\"",
            String::from_utf8_lossy(magic)
        )));
    }
    let n = cur.u32("row count")? as usize;
    let d = cur.u32("dimension")? as usize;
    let flags = cur.take(1, "flags")?[0];
    if flags & !(FLAG_IDS | FLAG_CAMERA | FLAG_NORMALIZED) != 0 {
        return Err(Error::BadHeader(format!("unknown flag bits {flags:#010b}")));
    }
    if n == 0 {
        return Err(Error::EmptySet);
    }
    let raw = cur.take(
        n.checked_mul(d)
            .and_then(|x| x.checked_mul(4))
            .ok_or_else(|| Error::BadHeader("N*d overflows".into()))?,
        "features",
    )?;
    let values: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let features = Array2::from_shape_vec((n, d), values)
        .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
    let modality = cur
        .take(n, "modality tags")?
        .iter()
        .enumerate()
        .map(|(row, &b)| {
            Modality::from_byte(b).ok_or(Error::UnknownModality {
                row,
                tag: b.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let true_id = if flags & FLAG_IDS != 0 {
        Some(cur.u32_vec(n, "true ids")?)
    } else {
        None
    };
    let camera = if flags & FLAG_CAMERA != 0 {
        Some(cur.u32_vec(n, "cameras")?)
    } else {
        None
    };
    if cur.pos != bytes.len() {
        return Err(Error::BadHeader(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    EmbeddingSet::from_parts(
        features,
        modality,
        true_id,
        camera,
        flags & FLAG_NORMALIZED != 0,
    )
}

pub fn write_csv<W: Write>(set: &EmbeddingSet, w: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::io("<csv>", std::io::Error::other(e));
    let mut header: Vec<String> = (0..set.dim()).map(|j| format!("f{j}")).collect();
    header.push("modality".into());
    if set.true_id.is_some() {
        header.push("id".into());
    }
    if set.camera.is_some() {
        header.push("camera".into());
    }
    writer.write_record(&header).map_err(csv_err)?;
    for (i, row) in set.features.outer_iter().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(set.modality[i].tag().to_string());
        if let Some(ids) = &set.true_id {
            rec.push(ids[i].to_string());
        }
        if let Some(c) = &set.camera {
            rec.push(c[i].to_string());
        }
        writer.write_record(&rec).map_err(csv_err)?;
    }
    writer.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn read_csv<R: Read>(r: R) -> Result<EmbeddingSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(r);
    let header = reader
        .headers()
        .map_err(|e| Error::BadHeader(e.to_string()))?
        .clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    let d = names
        .iter()
        .take_while(|h| h.starts_with('f') && h[1..].parse::<usize>().is_ok())
        .count();
    for (j, name) in names.iter().take(d).enumerate() {
        if *name != format!("f{j}") {
            return Err(Error::BadHeader(format!(
                "feature column {j} is named {name:?}"
            )));
        }
    }
    let rest = &names[d..];
    let (has_id, has_cam) = match rest {
        ["modality"] => (false, false),
        ["modality", "id"] => (true, false),
        ["modality", "camera"] => (false, true),
        ["modality", "id", "camera"] => (true, true),
        _ => {
            return Err(Error::BadHeader(format!(
                "expected f0..f{{d-1}},modality[,id][,camera], got {}",
                names.join(",")
            )))
        }
    };
    let width = names.len();

    let mut values = Vec::new();
    let mut modality = Vec::new();
    let mut ids = Vec::new();
    let mut cams = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::BadHeader(e.to_string()))?;
        if rec.len() != width {
            return Err(Error::RowLength {
                row,
                expected: width,
                found: rec.len(),
            });
        }
        for (col, field) in rec.iter().take(d).enumerate() {
            let v: f32 = field.trim().parse().map_err(|_| {
                Error::BadHeader(format!("row {row}, column {col}: cannot parse {field:?}"))
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite { row, col });
            }
            values.push(v);
        }
        let tag = &rec[d];
        modality.push(tag.parse::<Modality>().map_err(|tag| Error::UnknownModality {
            row,
            tag,
        })?);
        let parse_u32 = |s: &str, what: &str| {
            s.trim()
                .parse::<u32>()
                .map_err(|_| Error::BadHeader(format!("row {row}: bad {what} {s:?}")))
        };
        let mut next = d + 1;
        if has_id {
            ids.push(parse_u32(&rec[next], "id")?);
            next += 1;
        }
        if has_cam {
            cams.push(parse_u32(&rec[next], "camera")?);
        }
    }
    let n = modality.len();
    if n == 0 {
        return Err(Error::EmptySet);
    }
    let features = Array2::from_shape_vec((n, d), values)
        .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
    let mut set = EmbeddingSet::new(features, modality)?;
    if has_id {
        set = set.with_true_ids(ids)?;
    }
    if has_cam {
        set = set.with_cameras(cams)?;
    }
    // CSV carries no flag; infer it from the rows.
    if set.first_non_unit_row().is_none() {
        set.normalized = true;
    }
    Ok(set)
}
