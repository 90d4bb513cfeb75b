//! Bit-exact checkpoint format.
//!
//! Layout: magic `PEPH`, little-endian u16 format version, a length-prefixed
//! textual topology description, then every parameter tensor as raw
//! little-endian f32 in declaration order (backbone blocks, exit heads by
//! ordinal, final classifier). A save/load roundtrip reproduces parameters
//! bit-identically.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::layer::{LayerKind, LayerSpec};
use crate::model::{BackboneBlock, ExitHead, ModelGraph};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PEPH";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn save_checkpoint(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let topo = write_topology(model);
    w.write_all(&(topo.len() as u32).to_le_bytes())?;
    w.write_all(topo.as_bytes())?;
    let mut io_err: Option<std::io::Error> = None;
    model.visit_params(|t| {
        if io_err.is_some() {
            return;
        }
        for v in t.data() {
            if let Err(e) = w.write_all(&v.to_le_bytes()) {
                io_err = Some(e);
                return;
            }
        }
    });
    if let Some(e) = io_err {
        return Err(e.into());
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelGraph> {
    let path_str = path.as_ref().display().to_string();
    let mut r = BufReader::new(File::open(path.as_ref())?);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, &path_str, "magic header")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(
            &path_str,
            "bad magic bytes, not a checkpoint",
        ));
    }
    let mut version = [0u8; 2];
    read_exact(&mut r, &mut version, &path_str, "format version")?;
    let version = u16::from_le_bytes(version);
    if version > CHECKPOINT_VERSION {
        return Err(Error::format(
            &path_str,
            format!("format version {version} is newer than supported {CHECKPOINT_VERSION}"),
        ));
    }
    let mut len = [0u8; 4];
    read_exact(&mut r, &mut len, &path_str, "topology length")?;
    let mut topo = vec![0u8; u32::from_le_bytes(len) as usize];
    read_exact(&mut r, &mut topo, &path_str, "topology text")?;
    let topo = String::from_utf8(topo)
        .map_err(|_| Error::format(&path_str, "topology text is not valid UTF-8"))?;

    let mut model = parse_topology(&topo, &path_str)?;

    let mut load_err: Option<Error> = None;
    visit_params_mut(&mut model, |t| {
        if load_err.is_some() {
            return;
        }
        let mut buf = vec![0u8; t.numel() * 4];
        if let Err(e) = read_exact(&mut r, &mut buf, &path_str, "parameter tensor") {
            load_err = Some(e);
            return;
        }
        for (v, chunk) in t.data_mut().iter_mut().zip(buf.chunks_exact(4)) {
            *v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
    });
    if let Some(e) = load_err {
        return Err(e);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::format(&path_str, "trailing bytes after parameters"));
    }
    model.validate()?;
    Ok(model)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &str, what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(path, format!("truncated file while reading {what}")))
}

fn write_topology(model: &ModelGraph) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "input {} {} {}\n",
        model.input_shape[0], model.input_shape[1], model.input_shape[2]
    ));
    out.push_str(&format!("classes {}\n", model.num_classes));
    for block in &model.blocks {
        out.push_str("block\n");
        for layer in &block.layers {
            out.push_str(&layer_line(layer));
        }
    }
    for exit in &model.exits {
        out.push_str(&format!("exit {}\n", exit.placement));
        for layer in &exit.layers {
            out.push_str(&layer_line(layer));
        }
    }
    out.push_str("final\n");
    for layer in &model.final_head {
        out.push_str(&layer_line(layer));
    }
    out
}

fn layer_line(layer: &LayerSpec) -> String {
    match layer.kind {
        LayerKind::Conv2d {
            kh,
            kw,
            stride,
            padding,
            c_in,
            c_out,
            bias,
        } => format!(
            "conv2d {kh} {kw} {stride} {padding} {c_in} {c_out} {}\n",
            bias as u8
        ),
        LayerKind::Dense { n_in, n_out, bias } => {
            format!("dense {n_in} {n_out} {}\n", bias as u8)
        }
        LayerKind::Relu => "relu\n".to_string(),
        LayerKind::MaxPool { k, stride } => format!("maxpool {k} {stride}\n"),
        LayerKind::GlobalAvgPool => "globalavgpool\n".to_string(),
    }
}

enum Section {
    None,
    Block(usize),
    Exit(usize),
    Final,
}

fn parse_topology(topo: &str, path: &str) -> Result<ModelGraph> {
    let mut input_shape: Option<[usize; 3]> = None;
    let mut num_classes: Option<usize> = None;
    let mut blocks: Vec<BackboneBlock> = Vec::new();
    let mut exits: Vec<ExitHead> = Vec::new();
    let mut final_head: Vec<LayerSpec> = Vec::new();
    let mut section = Section::None;

    let bad = |line: &str| Error::format(path, format!("malformed topology line: {line:?}"));

    for line in topo.lines() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let ints = |n: usize| -> Result<Vec<usize>> {
            if fields.len() != n + 1 {
                return Err(bad(line));
            }
            fields[1..]
                .iter()
                .map(|f| f.parse::<usize>().map_err(|_| bad(line)))
                .collect()
        };
        match fields[0] {
            "input" => {
                let v = ints(3)?;
                input_shape = Some([v[0], v[1], v[2]]);
            }
            "classes" => num_classes = Some(ints(1)?[0]),
            "block" => {
                blocks.push(BackboneBlock { layers: Vec::new() });
                section = Section::Block(blocks.len() - 1);
            }
            "exit" => {
                let v = ints(1)?;
                exits.push(ExitHead {
                    placement: v[0],
                    layers: Vec::new(),
                });
                section = Section::Exit(exits.len() - 1);
            }
            "final" => section = Section::Final,
            kind => {
                let layer = match kind {
                    "conv2d" => {
                        let v = ints(7)?;
                        LayerSpec::conv2d(v[0], v[1], v[2], v[3], v[4], v[5], v[6] != 0)
                    }
                    "dense" => {
                        let v = ints(3)?;
                        LayerSpec::dense(v[0], v[1], v[2] != 0)
                    }
                    "relu" => LayerSpec::relu(),
                    "maxpool" => {
                        let v = ints(2)?;
                        LayerSpec::maxpool(v[0], v[1])
                    }
                    "globalavgpool" => LayerSpec::globalavgpool(),
                    _ => return Err(bad(line)),
                };
                match section {
                    Section::Block(i) => blocks[i].layers.push(layer),
                    Section::Exit(i) => exits[i].layers.push(layer),
                    Section::Final => final_head.push(layer),
                    Section::None => return Err(bad(line)),
                }
            }
        }
    }

    let input_shape =
        input_shape.ok_or_else(|| Error::format(path, "topology missing input line"))?;
    let num_classes =
        num_classes.ok_or_else(|| Error::format(path, "topology missing classes line"))?;
    Ok(ModelGraph {
        input_shape,
        num_classes,
        blocks,
        exits,
        final_head,
    })
}

fn visit_params_mut(model: &mut ModelGraph, mut f: impl FnMut(&mut Tensor)) {
    let layer_params = |layers: &mut [LayerSpec], f: &mut dyn FnMut(&mut Tensor)| {
        for layer in layers {
            if let Some(w) = &mut layer.weight {
                f(w);
            }
            if let Some(b) = &mut layer.bias {
                f(b);
            }
        }
    };
    for block in &mut model.blocks {
        layer_params(&mut block.layers, &mut f);
    }
    for exit in &mut model.exits {
        layer_params(&mut exit.layers, &mut f);
    }
    layer_params(&mut model.final_head, &mut f);
}
