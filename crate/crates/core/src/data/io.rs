//! Dataset files.
//!
//! Both formats are a CSV manifest whose first line is a header comment
//! `# kdssl-dataset v1 kind=<vector|raster> classes=<C>`:
//!
//! * vector: columns `id,label,f0,...,f{d-1}`; floats are written in the
//!   shortest form that parses back to the same bits.
//! * raster: columns `id,label,path`, where `path` is relative to the
//!   manifest and names a binary PGM (`P5`) image. Pixels map to `[0,1]`
//!   by dividing by the PGM maxval; images are written with maxval 65535
//!   unless every pixel is an exact multiple of 1/255.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{Dataset, Example, Payload, Raster};
use crate::error::{Error, Result};

const MAGIC: &str = "# kdssl-dataset v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Vector,
    Raster,
}

fn parse_header(line: &str, source: &str) -> Result<(Kind, usize)> {
    let rest = line
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::parse(source, "line 1", format!("expected '{MAGIC} ...' header")))?;
    let mut kind = None;
    let mut classes = None;
    for tok in rest.split_whitespace() {
        match tok.split_once('=') {
            Some(("kind", "vector")) => kind = Some(Kind::Vector),
            Some(("kind", "raster")) => kind = Some(Kind::Raster),
            Some(("classes", v)) => {
                classes = Some(
                    v.parse::<usize>()
                        .map_err(|_| Error::parse(source, "line 1", format!("bad class count '{v}'")))?,
                )
            }
            _ => return Err(Error::parse(source, "line 1", format!("unknown header token '{tok}'"))),
        }
    }
    match (kind, classes) {
        (Some(k), Some(c)) => Ok((k, c)),
        _ => Err(Error::parse(source, "line 1", "header needs kind= and classes=")),
    }
}

/// Reads a dataset manifest (vector CSV or raster manifest + PGM files).
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let source = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let (first, body) = match text.split_once('\n') {
        Some((f, b)) => (f.trim_end_matches('\r'), b),
        None if text.trim().is_empty() => return Err(Error::parse(&source, "line 1", "empty file")),
        None => (text.as_str(), ""),
    };
    let (kind, num_classes) = parse_header(first, &source)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(body.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(&source, "line 2", e.to_string()))?
        .clone();
    if headers.len() < 3 || &headers[0] != "id" || &headers[1] != "label" {
        return Err(Error::parse(&source, "line 2", "expected columns 'id,label,...'"));
    }
    let dim = headers.len() - 2;
    match kind {
        Kind::Vector => {
            for (j, h) in headers.iter().skip(2).enumerate() {
                if h != format!("f{j}") {
                    return Err(Error::parse(
                        &source,
                        "line 2",
                        format!("column {} should be f{j}", j + 2),
                    ));
                }
            }
        }
        Kind::Raster => {
            if dim != 1 || &headers[2] != "path" {
                return Err(Error::parse(&source, "line 2", "raster manifest needs 'id,label,path'"));
            }
        }
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut examples = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let loc = e
                .position()
                .map_or("unknown".to_string(), |p| format!("line {}", p.line() + 1));
            Error::parse(&source, loc, e.to_string())
        })?;
        // csv counts lines within the body; +1 for the header comment.
        let line = rec.position().map_or(0, |p| p.line() + 1);
        let loc = format!("line {line}");
        let id: u64 = rec[0]
            .parse()
            .map_err(|_| Error::parse(&source, &loc, format!("bad id '{}'", &rec[0])))?;
        let label: usize = rec[1]
            .parse()
            .map_err(|_| Error::parse(&source, &loc, format!("bad label '{}'", &rec[1])))?;
        if label >= num_classes {
            return Err(Error::Validation(format!(
                "{source} {loc}: label {label} ≥ declared class count {num_classes}"
            )));
        }
        let payload = match kind {
            Kind::Vector => {
                let mut x = Vec::with_capacity(dim);
                for (j, f) in rec.iter().skip(2).enumerate() {
                    let v: f64 = f
                        .parse()
                        .map_err(|_| Error::parse(&source, &loc, format!("bad value '{f}' in column f{j}")))?;
                    if !v.is_finite() {
                        return Err(Error::parse(&source, &loc, format!("non-finite value in column f{j}")));
                    }
                    x.push(v);
                }
                Payload::Vector(x)
            }
            Kind::Raster => Payload::Raster(read_pgm(base.join(&rec[2]))?),
        };
        examples.push(Example::labeled(id, payload, label));
    }
    if examples.is_empty() {
        return Err(Error::parse(&source, "line 3", "no data rows"));
    }
    Dataset::new(num_classes, examples)
}

fn raster_dir(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map_or("dataset".into(), |s| s.to_string_lossy().into_owned());
    PathBuf::from(format!("{stem}_images"))
}

/// Writes `dataset` to `path`. Raster datasets also write one PGM per
/// example into a sibling `<stem>_images/` directory.
pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let kind = match dataset.examples.first().map(|e| &e.payload) {
        Some(Payload::Vector(_)) | None => Kind::Vector,
        Some(Payload::Raster(_)) => Kind::Raster,
    };
    let mut out = Vec::new();
    let kind_name = if kind == Kind::Vector { "vector" } else { "raster" };
    writeln!(out, "{MAGIC} kind={kind_name} classes={}", dataset.num_classes)?;
    let mut w = csv::Writer::from_writer(&mut out);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    match kind {
        Kind::Vector => {
            let dim = dataset.examples.first().map_or(0, |e| e.payload.len());
            let mut header = vec!["id".to_string(), "label".to_string()];
            header.extend((0..dim).map(|j| format!("f{j}")));
            w.write_record(&header).map_err(csv_err)?;
            for e in &dataset.examples {
                let Payload::Vector(x) = &e.payload else {
                    return Err(Error::InvalidInput("mixed payload kinds".into()));
                };
                if x.len() != dim {
                    return Err(Error::InvalidInput(format!("example {} has width {}", e.id, x.len())));
                }
                let mut row = vec![e.id.to_string(), label_str(e)?];
                row.extend(x.iter().map(|v| format!("{v:?}")));
                w.write_record(&row).map_err(csv_err)?;
            }
        }
        Kind::Raster => {
            let rel_dir = raster_dir(path);
            let abs_dir = path.parent().unwrap_or(Path::new("")).join(&rel_dir);
            fs::create_dir_all(&abs_dir)?;
            w.write_record(["id", "label", "path"]).map_err(csv_err)?;
            for e in &dataset.examples {
                let Payload::Raster(r) = &e.payload else {
                    return Err(Error::InvalidInput("mixed payload kinds".into()));
                };
                let name = format!("{}.pgm", e.id);
                write_pgm(r, abs_dir.join(&name))?;
                let rel = format!("{}/{name}", rel_dir.display());
                w.write_record([e.id.to_string(), label_str(e)?, rel])
                    .map_err(csv_err)?;
            }
        }
    }
    w.flush()?;
    drop(w);
    fs::write(path, out)?;
    Ok(())
}

fn label_str(e: &Example) -> Result<String> {
    e.label
        .map(|l| l.to_string())
        .ok_or_else(|| Error::InvalidInput(format!("example {} is unlabeled", e.id)))
}

/// Writes a binary PGM; see the module docs for the maxval rule.
pub fn write_pgm(raster: &Raster, path: impl AsRef<Path>) -> Result<()> {
    if raster.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidInput("raster values must lie in [0, 1]".into()));
    }
    let eight_bit = raster.values.iter().all(|&v| (v * 255.0).round() / 255.0 == v);
    let maxval: u32 = if eight_bit { 255 } else { 65535 };
    let mut out = format!("P5\n{} {}\n{maxval}\n", raster.width, raster.height).into_bytes();
    for &v in &raster.values {
        let q = (v * maxval as f64).round() as u32;
        if eight_bit {
            out.push(q as u8);
        } else {
            out.extend_from_slice(&(q as u16).to_be_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a binary PGM (`P5`), scaling samples by `1 / maxval`.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let source = path.display().to_string();
    let bytes = fs::read(path)?;
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // whitespace and comments
        while pos < bytes.len() {
            if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(&source, format!("byte {pos}"), "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::parse(
            &source,
            "byte 0",
            format!("unsupported magic '{}'", fields[0]),
        ));
    }
    let num = |i: usize, what: &str| -> Result<usize> {
        fields[i]
            .parse::<usize>()
            .map_err(|_| Error::parse(&source, "header", format!("bad {what} '{}'", fields[i])))
    };
    let (width, height, maxval) = (num(1, "width")?, num(2, "height")?, num(3, "maxval")?);
    if maxval == 0 || maxval > 65535 || width == 0 || height == 0 {
        return Err(Error::parse(&source, "header", "invalid PGM dimensions or maxval"));
    }
    // exactly one whitespace byte separates header and raster
    pos += 1;
    let bps = if maxval < 256 { 1 } else { 2 };
    let need = width * height * bps;
    if bytes.len() < pos + need {
        return Err(Error::parse(
            &source,
            format!("byte {}", bytes.len()),
            format!("expected {need} pixel bytes, found {}", bytes.len().saturating_sub(pos)),
        ));
    }
    let data = &bytes[pos..pos + need];
    let values = if bps == 1 {
        data.iter().map(|&b| b as f64 / maxval as f64).collect()
    } else {
        data.chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / maxval as f64)
            .collect()
    };
    Raster::new(height, width, values)
}
