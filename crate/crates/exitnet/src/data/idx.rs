//! IDX-format dataset files (the MNIST container format).
//!
//! Magic layout: two zero bytes, a dtype byte (0x08 = unsigned byte), a
//! dimension-count byte, then that many big-endian u32 extents, then raw
//! data. Standard 28x28 handwritten-digit archives load without changes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const DTYPE_U8: u8 = 0x08;

/// Reads an IDX image file into an `[N, C, H, W]` tensor with values in
/// [0, 1]. Three-dimensional files are treated as single-channel.
pub fn load_images(path: impl AsRef<Path>) -> Result<Tensor> {
    let path_str = path.as_ref().display().to_string();
    let mut r = BufReader::new(File::open(path.as_ref())?);
    let dims = read_header(&mut r, &path_str)?;
    let shape: Vec<usize> = match dims.as_slice() {
        [n, h, w] => vec![*n, 1, *h, *w],
        [n, c, h, w] => vec![*n, *c, *h, *w],
        _ => {
            return Err(Error::format(
                &path_str,
                format!("expected 3 or 4 dimensions for images, got {}", dims.len()),
            ))
        }
    };
    let count: usize = shape.iter().product();
    let mut bytes = vec![0u8; count];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::format(&path_str, "truncated image data"))?;
    ensure_eof(&mut r, &path_str)?;
    let data: Vec<f32> = bytes.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(shape, data)
}

/// Reads an IDX label file (one u8 class index per sample).
pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path_str = path.as_ref().display().to_string();
    let mut r = BufReader::new(File::open(path.as_ref())?);
    let dims = read_header(&mut r, &path_str)?;
    let n = match dims.as_slice() {
        [n] => *n,
        _ => {
            return Err(Error::format(
                &path_str,
                format!("expected 1 dimension for labels, got {}", dims.len()),
            ))
        }
    };
    let mut bytes = vec![0u8; n];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::format(&path_str, "truncated label data"))?;
    ensure_eof(&mut r, &path_str)?;
    Ok(bytes.iter().map(|&b| b as usize).collect())
}

/// Writes images as u8 (values quantised to 1/255 steps).
pub fn save_images(images: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let shape = images.shape();
    if shape.len() != 4 {
        return Err(Error::config(format!(
            "image tensor must be [N, C, H, W], got {shape:?}"
        )));
    }
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    // Single-channel data keeps the classic 3-dimensional layout.
    let dims: Vec<usize> = if shape[1] == 1 {
        vec![shape[0], shape[2], shape[3]]
    } else {
        shape.to_vec()
    };
    write_header(&mut w, &dims)?;
    for &v in images.data() {
        let byte = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        w.write_all(&[byte])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_labels(labels: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    write_header(&mut w, &[labels.len()])?;
    for &label in labels {
        if label > u8::MAX as usize {
            return Err(Error::config(format!(
                "label {label} does not fit the u8 IDX label format"
            )));
        }
        w.write_all(&[label as u8])?;
    }
    w.flush()?;
    Ok(())
}

/// Loads an image/label file pair into a [`Dataset`].
pub fn load_dataset(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    num_classes: usize,
) -> Result<Dataset> {
    let images = load_images(images_path)?;
    let labels = load_labels(labels_path)?;
    Dataset::new(images, labels, num_classes)
}

/// Writes a [`Dataset`] as `{stem}-images-idx3-ubyte` / `{stem}-labels-idx1-ubyte`.
pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>, stem: &str) -> Result<(String, String)> {
    let images_name = format!("{stem}-images-idx3-ubyte");
    let labels_name = format!("{stem}-labels-idx1-ubyte");
    save_images(&ds.images, dir.as_ref().join(&images_name))?;
    save_labels(&ds.labels, dir.as_ref().join(&labels_name))?;
    Ok((images_name, labels_name))
}

fn read_header(r: &mut impl Read, path: &str) -> Result<Vec<usize>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format(path, "truncated magic"))?;
    if magic[0] != 0 || magic[1] != 0 {
        return Err(Error::format(path, "bad magic bytes, not an IDX file"));
    }
    if magic[2] != DTYPE_U8 {
        return Err(Error::format(
            path,
            format!(
                "unsupported IDX dtype 0x{:02x}, only u8 is supported",
                magic[2]
            ),
        ));
    }
    let ndim = magic[3] as usize;
    if ndim == 0 || ndim > 4 {
        return Err(Error::format(
            path,
            format!("unsupported dimension count {ndim}"),
        ));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut buf = [0u8; 4];
        r.read_exact(&mut buf)
            .map_err(|_| Error::format(path, "truncated extents"))?;
        dims.push(u32::from_be_bytes(buf) as usize);
    }
    Ok(dims)
}

fn ensure_eof(r: &mut impl Read, path: &str) -> Result<()> {
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::format(path, "trailing bytes after data"));
    }
    Ok(())
}

fn write_header(w: &mut impl Write, dims: &[usize]) -> Result<()> {
    w.write_all(&[0, 0, DTYPE_U8, dims.len() as u8])?;
    for &d in dims {
        w.write_all(&(d as u32).to_be_bytes())?;
    }
    Ok(())
}
