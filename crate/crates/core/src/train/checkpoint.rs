//! `GFCK` checkpoints.
//!
//! Layout (little-endian): magic `GFCK`, `u32` version, `u32` length plus
//! UTF-8 text of the grid config (`key=value` lines), `u32` entry count,
//! then per entry a `u32`-length path followed by a `GFT1` tensor.

use crate::autodiff::ParamStore;
use crate::config::{grid_from_text, grid_to_text};
use crate::error::{Error, Result};
use crate::grid::{GridConfig, GridFormer};
use crate::tensor::io::{decode, encode, Cursor};
use crate::tensor::{Scalar, Tensor};
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 4] = b"GFCK";
const VERSION: u32 = 1;

/// A decoded checkpoint: the grid config and every parameter by path.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: GridConfig,
    pub params: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_store<T: Scalar>(config: &GridConfig, store: &ParamStore<T>) -> Self {
        Checkpoint {
            config: config.clone(),
            params: store.iter().map(|(_, p)| (p.path().to_string(), p.value().cast())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut buf, &grid_to_text(&self.config));
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (path, t) in &self.params {
            put_str(&mut buf, path);
            encode(t, &mut buf);
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor::new(bytes);
        if c.take(4)? != MAGIC {
            return Err(Error::format("bad checkpoint magic, expected GFCK"));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(Error::format(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let config = grid_from_text(&get_str(&mut c)?).map_err(|e| Error::format(format!("checkpoint config: {e}")))?;
        let count = c.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let path = get_str(&mut c)?;
            params.push((path, decode(&mut c)?.into_typed()));
        }
        if !c.is_empty() {
            return Err(Error::format("trailing bytes after checkpoint"));
        }
        Ok(Checkpoint { config, params })
    }

    /// Builds the model and loads every parameter.
    pub fn instantiate<T: Scalar>(&self) -> Result<(GridFormer, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let model = GridFormer::new(self.config.clone(), &mut store, 0)?;
        self.load_into(&mut store)?;
        Ok((model, store))
    }

    /// Copies values into an existing store. Every store path must be
    /// present with the same shape; the first violation is reported.
    pub fn load_into<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let by_path: std::collections::HashMap<&str, &Tensor<f32>> =
            self.params.iter().map(|(p, t)| (p.as_str(), t)).collect();
        let mut staged = Vec::with_capacity(store.len());
        for (id, p) in store.iter() {
            let t = by_path
                .get(p.path())
                .ok_or_else(|| Error::format(format!("checkpoint has no parameter {}", p.path())))?;
            if t.shape() != p.value().shape() {
                return Err(Error::format(format!(
                    "parameter {}: checkpoint shape {} but model expects {}",
                    p.path(),
                    t.shape(),
                    p.value().shape()
                )));
            }
            staged.push((id, t.cast()));
        }
        if self.params.len() != store.len() {
            let extra = self.params.iter().find(|(p, _)| store.id(p).is_none()).map(|(p, _)| p.as_str());
            return Err(Error::format(format!(
                "checkpoint parameter {} is not in the model",
                extra.unwrap_or("?")
            )));
        }
        for (id, t) in staged {
            store.set_value(id, t)?;
        }
        Ok(())
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn get_str(c: &mut Cursor<'_>) -> Result<String> {
    let n = c.u32()? as usize;
    String::from_utf8(c.take(n)?.to_vec()).map_err(|_| Error::format("non-UTF-8 string in checkpoint"))
}

pub fn save_checkpoint<T: Scalar>(path: &Path, config: &GridConfig, store: &ParamStore<T>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, Checkpoint::from_store(config, store).to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(GridFormer, ParamStore<T>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)?.instantiate()
}

/// Loads the parameters of `path` into a store built for another model
/// instance of the same config.
pub fn restore_into<T: Scalar>(path: &Path, store: &mut ParamStore<T>) -> Result<GridConfig> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    ck.load_into(store)?;
    Ok(ck.config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::data::synth_scene;

    fn tiny() -> GridConfig {
        GridConfig::preset("micro").unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact_on_parameters_and_outputs() {
        let (model, store) = GridFormer::init::<f32>(tiny(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gfck");
        save_checkpoint(&path, model.config(), &store).unwrap();
        let (model2, store2) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(model2.config(), model.config());
        for ((_, a), (_, b)) in store.iter().zip(store2.iter()) {
            assert_eq!(a.path(), b.path());
            assert_eq!(a.value(), b.value());
        }
        let img = synth_scene(1, "ck", 32, 32);
        let run = |m: &GridFormer, s: &ParamStore<f32>| {
            let mut tape = Tape::inference();
            m.restore(&mut tape, s, &img).unwrap()[0].value().unwrap().clone()
        };
        assert_eq!(run(&model, &store), run(&model2, &store2));
    }

    #[test]
    fn truncation_is_a_format_error_at_every_length() {
        let (model, store) = GridFormer::init::<f32>(tiny(), 0).unwrap();
        let bytes = Checkpoint::from_store(model.config(), &store).to_bytes();
        for cut in [0, 3, 4, 8, 12, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Format(_))));
    }

    #[test]
    fn mismatched_config_names_the_first_bad_path() {
        let (model, store) = GridFormer::init::<f32>(tiny(), 0).unwrap();
        let ck = Checkpoint::from_store(model.config(), &store);
        let wider = GridConfig { base_channels: 12, ..tiny() };
        let (_, mut other) = GridFormer::init::<f32>(wider, 0).unwrap();
        let first = other.iter().find(|(_, p)| {
            store.by_path(p.path()).map(|q| q.value().shape() != p.value().shape()).unwrap_or(true)
        });
        let first = first.unwrap().1.path().to_string();
        let err = ck.load_into(&mut other).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(err.to_string().contains(&first), "{err} should name {first}");
    }
}
