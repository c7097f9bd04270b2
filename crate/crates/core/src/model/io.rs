//! Model serialization.
//!
//! Both variants share one layout: a 6-byte ASCII magic, a little-endian
//! `u32` header, then every trainable parameter as little-endian `f64` in
//! the canonical flat order. Round trips are bit-exact.
//!
//! Factorized (`RRFNN1`): header is Q, R, C, s, b, activation id, bias flag.
//! Dense (`DFNN01`): header is Q, C, s, b, activation id, bias flag.

use std::fs;
use std::path::Path;

use crate::binio::ByteReader;
use crate::error::{Error, Result};
use crate::model::{Activation, AnyModel, DenseFnn, LayerDims, Model, RankRFnn};

const RANK_R_MAGIC: &[u8; 6] = b"RRFNN1";
const DENSE_MAGIC: &[u8; 6] = b"DFNN01";

/// Writes a factorized model to `path` in the `RRFNN1` format.
pub fn save_rank_r(model: &RankRFnn, path: &Path) -> Result<()> {
    let dims = model.dims();
    let mut bytes = Vec::with_capacity(6 + 7 * 4 + model.param_count() * 8);
    bytes.extend_from_slice(RANK_R_MAGIC);
    for v in [
        dims.hidden_count,
        model.rank(),
        dims.class_count,
        dims.patch_side,
        dims.band_count,
        model.activation().id() as usize,
        model.has_bias() as usize,
    ] {
        bytes.extend_from_slice(&(v as u32).to_le_bytes());
    }
    append_params(&mut bytes, model);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a dense model to `path` in the `DFNN01` format.
pub fn save_dense(model: &DenseFnn, path: &Path) -> Result<()> {
    let dims = model.dims();
    let mut bytes = Vec::with_capacity(6 + 6 * 4 + model.param_count() * 8);
    bytes.extend_from_slice(DENSE_MAGIC);
    for v in [
        dims.hidden_count,
        dims.class_count,
        dims.patch_side,
        dims.band_count,
        model.activation().id() as usize,
        model.has_bias() as usize,
    ] {
        bytes.extend_from_slice(&(v as u32).to_le_bytes());
    }
    append_params(&mut bytes, model);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn append_params<M: Model>(bytes: &mut Vec<u8>, model: &M) {
    let mut params = vec![0.0; model.param_count()];
    model.write_params(&mut params);
    for p in params {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
}

/// Reads either model format, dispatching on the magic bytes.
pub fn load_model(path: &Path) -> Result<AnyModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut reader = ByteReader::new(path, &bytes);
    let magic = reader.take(6, "magic")?;
    match magic {
        m if m == RANK_R_MAGIC => Ok(AnyModel::RankR(read_rank_r(&mut reader)?)),
        m if m == DENSE_MAGIC => Ok(AnyModel::Dense(read_dense(&mut reader)?)),
        m => Err(reader.format_at(
            0,
            format!("unrecognized magic {:?}, expected RRFNN1 or DFNN01", String::from_utf8_lossy(m)),
        )),
    }
}

fn read_rank_r(reader: &mut ByteReader) -> Result<RankRFnn> {
    let hidden_count = reader.read_u32("hidden count")? as usize;
    let rank = reader.read_u32("rank")? as usize;
    let class_count = reader.read_u32("class count")? as usize;
    let patch_side = reader.read_u32("patch side")? as usize;
    let band_count = reader.read_u32("band count")? as usize;
    let activation = reader.read_activation()?;
    let with_bias = reader.read_bias_flag()?;
    let dims = LayerDims {
        hidden_count,
        class_count,
        patch_side,
        band_count,
    };
    let mut model = RankRFnn::zeros(dims, rank, activation, with_bias)
        .map_err(|e| reader.format_at(6, e.to_string()))?;
    let params = reader.read_params(model.param_count())?;
    reader.expect_end()?;
    model.read_params(&params)?;
    Ok(model)
}

fn read_dense(reader: &mut ByteReader) -> Result<DenseFnn> {
    let hidden_count = reader.read_u32("hidden count")? as usize;
    let class_count = reader.read_u32("class count")? as usize;
    let patch_side = reader.read_u32("patch side")? as usize;
    let band_count = reader.read_u32("band count")? as usize;
    let activation = reader.read_activation()?;
    let with_bias = reader.read_bias_flag()?;
    let dims = LayerDims {
        hidden_count,
        class_count,
        patch_side,
        band_count,
    };
    let mut model = DenseFnn::zeros(dims, activation, with_bias)
        .map_err(|e| reader.format_at(6, e.to_string()))?;
    let params = reader.read_params(model.param_count())?;
    reader.expect_end()?;
    model.read_params(&params)?;
    Ok(model)
}

/// Format-specific field parsers on top of the shared byte cursor.
trait ModelFields {
    fn read_activation(&mut self) -> Result<Activation>;
    fn read_bias_flag(&mut self) -> Result<bool>;
    fn read_params(&mut self, count: usize) -> Result<Vec<f64>>;
}

impl ModelFields for ByteReader<'_> {
    fn read_activation(&mut self) -> Result<Activation> {
        let at = self.offset;
        let id = self.read_u32("activation id")?;
        Activation::from_id(id).ok_or_else(|| self.format_at(at, format!("unknown activation id {id}")))
    }

    fn read_bias_flag(&mut self) -> Result<bool> {
        let at = self.offset;
        match self.read_u32("bias flag")? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(self.format_at(at, format!("bias flag must be 0 or 1, got {other}"))),
        }
    }

    fn read_params(&mut self, count: usize) -> Result<Vec<f64>> {
        let raw = self.take(count * 8, "parameters")?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
