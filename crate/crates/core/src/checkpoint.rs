//! Binary model checkpoints.
//!
//! Self-describing container: a fixed header followed by row-major 64-bit
//! little-endian arrays in declared order. Identical bytes imply an
//! identical model, and saving is deterministic, so checkpoints double as
//! model digests for reproducibility checks.
//!
//! Layout:
//!
//! ```text
//! magic   b"FAMC"
//! version u32     (currently 1)
//! client  u32
//! layers  u32     number of backbone layers L
//! rank    u32     adapter rank; 0 marks a fused (plain dense) model
//! classes u32     C
//! dims    u32 * (L + 1)
//! arrays  f64-LE, row-major:
//!   rank > 0: per layer w_pre, a_fixed, b_train; then classifier
//!   rank = 0: per layer w; then classifier
//! ```
//!
//! Activations are not stored: layers use ReLU except the last, which is
//! identity (the only stack this crate builds).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::{activation_for, AdapterLayer, ClientModel, FusedLayer, FusedModel};
use crate::Scalar;

const MAGIC: &[u8; 4] = b"FAMC";
const VERSION: u32 = 1;

fn write_matrix<F: Scalar, W: Write>(w: &mut W, m: &Array2<F>) -> Result<()> {
    for v in m.iter() {
        w.write_f64::<LittleEndian>(v.to_f64_c())?;
    }
    Ok(())
}

fn read_matrix<F: Scalar, R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<Array2<F>> {
    let mut values = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        values.push(F::from_f64_c(r.read_f64::<LittleEndian>()?));
    }
    Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| Error::CheckpointFormat(e.to_string()))
}

fn write_header<W: Write>(
    w: &mut W,
    client_id: usize,
    dims: &[usize],
    rank: usize,
    num_classes: usize,
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(client_id as u32)?;
    w.write_u32::<LittleEndian>((dims.len() - 1) as u32)?;
    w.write_u32::<LittleEndian>(rank as u32)?;
    w.write_u32::<LittleEndian>(num_classes as u32)?;
    for &d in dims {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    Ok(())
}

struct Header {
    client_id: usize,
    rank: usize,
    num_classes: usize,
    dims: Vec<usize>,
}

fn read_header<R: Read>(r: &mut R) -> Result<Header> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::CheckpointFormat("bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::CheckpointFormat(format!(
            "unsupported version {version}"
        )));
    }
    let client_id = r.read_u32::<LittleEndian>()? as usize;
    let num_layers = r.read_u32::<LittleEndian>()? as usize;
    let rank = r.read_u32::<LittleEndian>()? as usize;
    let num_classes = r.read_u32::<LittleEndian>()? as usize;
    if num_layers == 0 {
        return Err(Error::CheckpointFormat("zero layers".into()));
    }
    let mut dims = Vec::with_capacity(num_layers + 1);
    for _ in 0..num_layers + 1 {
        dims.push(r.read_u32::<LittleEndian>()? as usize);
    }
    Ok(Header {
        client_id,
        rank,
        num_classes,
        dims,
    })
}

/// Serializes an adapter model (header `rank > 0`).
pub fn save_model<F: Scalar, W: Write>(model: &ClientModel<F>, w: &mut W) -> Result<()> {
    write_header(w, model.client_id, &model.dims(), model.rank(), model.num_classes())?;
    for layer in model.layers() {
        write_matrix(w, layer.w_pre())?;
        write_matrix(w, layer.a_fixed())?;
        write_matrix(w, layer.b_train())?;
    }
    write_matrix(w, model.classifier())
}

/// Serializes a fused model (header `rank = 0`).
pub fn save_fused<F: Scalar, W: Write>(model: &FusedModel<F>, w: &mut W) -> Result<()> {
    write_header(w, model.client_id, &model.dims(), 0, model.num_classes())?;
    for layer in model.layers() {
        write_matrix(w, &layer.weight)?;
    }
    write_matrix(w, model.classifier())
}

/// Either kind of checkpointed model.
pub enum LoadedModel<F> {
    Adapter(ClientModel<F>),
    Fused(FusedModel<F>),
}

pub fn load<F: Scalar, R: Read>(r: &mut R) -> Result<LoadedModel<F>> {
    let h = read_header(r)?;
    let num_layers = h.dims.len() - 1;
    if h.rank > 0 {
        let mut layers = Vec::with_capacity(num_layers);
        for i in 0..num_layers {
            let (d_in, d_out) = (h.dims[i], h.dims[i + 1]);
            let w_pre = read_matrix(r, d_in, d_out)?;
            let a_fixed = read_matrix(r, d_in, h.rank)?;
            let b_train = read_matrix(r, h.rank, d_out)?;
            layers.push(AdapterLayer::new(
                w_pre,
                a_fixed,
                b_train,
                activation_for(i, num_layers),
            )?);
        }
        let classifier = read_matrix(r, h.dims[num_layers], h.num_classes)?;
        Ok(LoadedModel::Adapter(ClientModel::new(
            h.client_id,
            layers,
            classifier,
            h.num_classes,
        )?))
    } else {
        let mut layers = Vec::with_capacity(num_layers);
        for i in 0..num_layers {
            layers.push(FusedLayer {
                weight: read_matrix(r, h.dims[i], h.dims[i + 1])?,
                activation: activation_for(i, num_layers),
            });
        }
        let classifier = read_matrix(r, h.dims[num_layers], h.num_classes)?;
        Ok(LoadedModel::Fused(FusedModel::new(
            h.client_id,
            layers,
            classifier,
            h.num_classes,
        )?))
    }
}

pub fn save_model_to_path<F: Scalar, P: AsRef<Path>>(model: &ClientModel<F>, path: P) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    save_model(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn save_fused_to_path<F: Scalar, P: AsRef<Path>>(model: &FusedModel<F>, path: P) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    save_fused(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_from_path<F: Scalar, P: AsRef<Path>>(path: P) -> Result<LoadedModel<F>> {
    let mut r = BufReader::new(File::open(path)?);
    load(&mut r)
}

/// Serialized bytes of an adapter model (handy as a cheap model digest).
pub fn model_bytes<F: Scalar>(model: &ClientModel<F>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    save_model(model, &mut buf)?;
    Ok(buf)
}
