use std::fs::{self, File};
use std::io::{Read, Write};
use std::path::Path;

use super::LabeledDataset;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

fn parse_err(offset: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

fn infer_classes(labels: &[usize], classes: Option<usize>) -> usize {
    classes.unwrap_or_else(|| labels.iter().max().map_or(2, |&m| (m + 1).max(2)))
}

/// Leaves values already in `[0,1]` untouched; otherwise min-max scales the
/// whole array to `[0,1]`.
fn scale_unit(values: &mut [f64]) {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    if lo >= 0.0 && hi <= 1.0 {
        return;
    }
    let span = hi - lo;
    for v in values {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
}

/// Reads `label,f0,f1,...` rows. `classes` defaults to `max label + 1`.
pub fn read_csv<R: Read>(reader: R, classes: Option<usize>) -> Result<LabeledDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| parse_err(0, format!("header: {e}")))?
        .clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(parse_err(0, "empty file"));
    }
    if &header[0] != "label" {
        return Err(parse_err(
            0,
            format!("first column must be `label`, got `{}`", &header[0]),
        ));
    }
    for (i, name) in header.iter().skip(1).enumerate() {
        if name != format!("f{i}") {
            return Err(parse_err(
                0,
                format!("column {} must be `f{i}`, got `{name}`", i + 1),
            ));
        }
    }
    let dim = header.len() - 1;
    if dim == 0 {
        return Err(parse_err(0, "no feature columns"));
    }
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let off = e.position().map_or(0, |p| p.byte());
            parse_err(off, e.to_string())
        })?;
        let off = rec.position().map_or(0, |p| p.byte());
        if rec.len() != dim + 1 {
            return Err(parse_err(
                off,
                format!("expected {} fields, got {}", dim + 1, rec.len()),
            ));
        }
        let y: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(off, format!("bad label `{}`", &rec[0])))?;
        labels.push(y);
        for f in rec.iter().skip(1) {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| parse_err(off, format!("bad value `{f}`")))?;
            if !v.is_finite() {
                return Err(parse_err(off, format!("non-finite value `{f}`")));
            }
            values.push(v);
        }
    }
    if labels.is_empty() {
        return Err(parse_err(0, "no data rows"));
    }
    scale_unit(&mut values);
    let k = infer_classes(&labels, classes);
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(parse_err(0, format!("label {bad} out of range for k={k}")));
    }
    let n = labels.len();
    LabeledDataset::new(Tensor::new(vec![n, dim], values)?, labels, k)
}

pub fn load_csv(path: &Path, classes: Option<usize>) -> Result<LabeledDataset> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(f, classes)
}

/// Writes inputs flattened per sample; floats use shortest round-trip form.
pub fn write_csv<W: Write>(data: &LabeledDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let dim = data.inputs().row_len();
    let mut header = vec!["label".to_string()];
    header.extend((0..dim).map(|i| format!("f{i}")));
    let csv_err = |e: csv::Error| Error::contract(format!("csv write: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..data.len() {
        let mut row = vec![data.labels()[i].to_string()];
        row.extend(data.inputs().row(i).iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()
        .map_err(|e| Error::contract(format!("csv write: {e}")))?;
    Ok(())
}

struct Idx {
    dims: Vec<usize>,
    body_offset: usize,
}

fn idx_header(bytes: &[u8]) -> Result<Idx> {
    if bytes.len() < 4 {
        return Err(parse_err(0, "file shorter than the IDX magic"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(parse_err(0, "IDX magic must start with two zero bytes"));
    }
    if bytes[2] != 0x08 {
        return Err(parse_err(
            2,
            format!("unsupported IDX element type 0x{:02x}", bytes[2]),
        ));
    }
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(parse_err(3, "IDX file with zero dimensions"));
    }
    let body_offset = 4 + 4 * ndim;
    if bytes.len() < body_offset {
        return Err(parse_err(4, "truncated IDX dimension list"));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let expect = dims.iter().product::<usize>();
    let have = bytes.len() - body_offset;
    if have != expect {
        return Err(parse_err(
            body_offset as u64,
            format!("IDX body has {have} bytes, dims {dims:?} need {expect}"),
        ));
    }
    Ok(Idx { dims, body_offset })
}

/// Parses unsigned-byte IDX image and label files. Images of shape
/// `[n, h, w]` become `[n, 1, h, w]`; values are divided by 255.
pub fn read_idx(images: &[u8], labels: &[u8], classes: Option<usize>) -> Result<LabeledDataset> {
    let hi = idx_header(images)?;
    let hl = idx_header(labels)?;
    if hl.dims.len() != 1 {
        return Err(parse_err(3, "label file must be one-dimensional"));
    }
    let n = hi.dims[0];
    if n == 0 {
        return Err(parse_err(4, "IDX file with zero samples"));
    }
    if hl.dims[0] != n {
        return Err(parse_err(
            4,
            format!("{n} images but {} labels", hl.dims[0]),
        ));
    }
    let mut shape = hi.dims.clone();
    if shape.len() == 3 {
        shape.insert(1, 1);
    }
    let values = images[hi.body_offset..]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let ys: Vec<usize> = labels[hl.body_offset..]
        .iter()
        .map(|&b| b as usize)
        .collect();
    let k = infer_classes(&ys, classes);
    if let Some(p) = ys.iter().position(|&y| y >= k) {
        return Err(parse_err(
            (hl.body_offset + p) as u64,
            format!("label {} out of range for k={k}", ys[p]),
        ));
    }
    LabeledDataset::new(Tensor::new(shape, values)?, ys, k)
}

pub fn load_idx(images: &Path, labels: &Path, classes: Option<usize>) -> Result<LabeledDataset> {
    let a = fs::read(images).map_err(|e| Error::io(images, e))?;
    let b = fs::read(labels).map_err(|e| Error::io(labels, e))?;
    read_idx(&a, &b, classes)
}

fn idx_bytes(dims: &[usize], body: impl Iterator<Item = u8>) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(body);
    out
}

/// Encodes inputs as unsigned bytes (`round(v * 255)`), dropping a unit
/// channel axis.
pub fn write_idx_images(data: &LabeledDataset) -> Result<Vec<u8>> {
    let mut dims = data.inputs().shape().to_vec();
    if dims.len() == 4 && dims[1] == 1 {
        dims.remove(1);
    }
    if data
        .inputs()
        .data()
        .iter()
        .any(|&v| !(0.0..=1.0).contains(&v))
    {
        return Err(Error::contract("IDX images need values in [0,1]"));
    }
    Ok(idx_bytes(
        &dims,
        data.inputs()
            .data()
            .iter()
            .map(|&v| (v * 255.0).round() as u8),
    ))
}

pub fn write_idx_labels(data: &LabeledDataset) -> Result<Vec<u8>> {
    if data.classes() > 256 {
        return Err(Error::contract("IDX labels hold at most 256 classes"));
    }
    Ok(idx_bytes(
        &[data.len()],
        data.labels().iter().map(|&y| y as u8),
    ))
}
