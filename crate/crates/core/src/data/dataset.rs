//! Paired datasets on disk:
//!
//! ```text
//! <dir>/clean/<id>.png
//! <dir>/degraded/<id>.png
//! <dir>/manifest.txt      one "id key=value ..." line per pair
//! ```

use super::{item_rng, load_image, make_pyramid, save_image, synth_scene, DegradationKind, DegradationSpec};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug)]
pub struct PairDataset {
    pub ids: Vec<String>,
    /// Generation parameters, when known.
    pub specs: Vec<Option<DegradationSpec>>,
    pub degraded: Vec<Tensor<f32>>,
    pub clean: Vec<Tensor<f32>>,
}

/// Degraded and clean pyramids of one pair.
#[derive(Clone, Debug)]
pub struct PyramidSample<T> {
    pub id: String,
    pub degraded: Vec<Tensor<T>>,
    pub clean: Vec<Tensor<T>>,
}

impl<T: Scalar> PyramidSample<T> {
    pub fn new(id: impl Into<String>, degraded: &Tensor<T>, clean: &Tensor<T>, levels: usize) -> Result<Self> {
        if degraded.shape() != clean.shape() {
            return Err(Error::contract(format!(
                "pair extents differ: {} vs {}",
                degraded.shape(),
                clean.shape()
            )));
        }
        Ok(PyramidSample {
            id: id.into(),
            degraded: make_pyramid(degraded, levels)?,
            clean: make_pyramid(clean, levels)?,
        })
    }
}

impl PairDataset {
    /// `count` procedural scenes of size `size x size`, each degraded by
    /// `kind`; everything derives from `(seed, id)`.
    pub fn synthesize(kind: DegradationKind, count: usize, size: usize, seed: u64, prefix: &str) -> Result<Self> {
        let mut out = PairDataset {
            ids: Vec::with_capacity(count),
            specs: Vec::with_capacity(count),
            degraded: Vec::with_capacity(count),
            clean: Vec::with_capacity(count),
        };
        for i in 0..count {
            let id = format!("{prefix}{kind}_{i:04}");
            let clean = synth_scene(seed, &id, size, size);
            let spec = DegradationSpec::sample(kind, &mut item_rng(seed ^ 0x5eed, &id), size, size);
            out.degraded.push(spec.apply(&clean)?);
            out.clean.push(clean);
            out.specs.push(Some(spec));
            out.ids.push(id);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn extend(&mut self, other: PairDataset) {
        self.ids.extend(other.ids);
        self.specs.extend(other.specs);
        self.degraded.extend(other.degraded);
        self.clean.extend(other.clean);
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for sub in ["clean", "degraded"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        let mut manifest = String::new();
        for i in 0..self.len() {
            let file = format!("{}.png", self.ids[i]);
            save_image(&self.clean[i], &dir.join("clean").join(&file))?;
            save_image(&self.degraded[i], &dir.join("degraded").join(&file))?;
            manifest.push_str(&self.ids[i]);
            if let Some(spec) = &self.specs[i] {
                for (k, v) in spec.to_pairs() {
                    manifest.push_str(&format!(" {k}={v}"));
                }
            }
            manifest.push('\n');
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, manifest).map_err(|e| Error::io(path, e))
    }

    /// Reads a dataset directory. Without a manifest, every file in
    /// `degraded/` with a same-named file in `clean/` is a pair.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = dir.join(MANIFEST);
        let entries: Vec<(String, Option<DegradationSpec>)> = if manifest.exists() {
            let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
            parse_manifest(&text)?
        } else {
            let listing = fs::read_dir(dir.join("degraded")).map_err(|e| Error::io(dir.join("degraded"), e))?;
            let mut ids = Vec::new();
            for entry in listing {
                let entry = entry.map_err(|e| Error::io(dir.join("degraded"), e))?;
                let name = entry.file_name().to_string_lossy().to_string();
                if let Some(id) = name.strip_suffix(".png") {
                    ids.push(id.to_string());
                }
            }
            ids.sort();
            ids.into_iter().map(|id| (id, None)).collect()
        };
        let mut out = PairDataset {
            ids: Vec::new(),
            specs: Vec::new(),
            degraded: Vec::new(),
            clean: Vec::new(),
        };
        for (id, spec) in entries {
            let file = format!("{id}.png");
            let degraded = load_image(&dir.join("degraded").join(&file))?;
            let clean = load_image(&dir.join("clean").join(&file))?;
            if degraded.shape() != clean.shape() {
                return Err(Error::contract(format!("pair {id} has mismatched extents")));
            }
            out.ids.push(id);
            out.specs.push(spec);
            out.degraded.push(degraded);
            out.clean.push(clean);
        }
        if out.is_empty() {
            return Err(Error::contract(format!("no pairs found in {}", dir.display())));
        }
        Ok(out)
    }
}

pub fn parse_manifest(text: &str) -> Result<Vec<(String, Option<DegradationSpec>)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut words = line.split_whitespace();
        let id = words.next().expect("non-empty line").to_string();
        let mut pairs = BTreeMap::new();
        for word in words {
            let (k, v) = word
                .split_once('=')
                .ok_or_else(|| Error::format(format!("manifest line {}: expected key=value, got {word}", lineno + 1)))?;
            pairs.insert(k.to_string(), v.to_string());
        }
        let spec = if pairs.is_empty() {
            None
        } else {
            Some(DegradationSpec::from_pairs(&pairs)?)
        };
        out.push((id, spec));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let data = PairDataset::synthesize(DegradationKind::Rain, 3, 16, 4, "t").unwrap();
        data.write(dir.path()).unwrap();
        let back = PairDataset::load(dir.path()).unwrap();
        assert_eq!(back.ids, data.ids);
        assert_eq!(back.specs, data.specs);
        for (a, b) in back.degraded.iter().zip(&data.degraded) {
            assert!(a.max_abs_diff(b).unwrap() <= 1.0 / 510.0 + 1e-7);
        }
        fs::remove_file(dir.path().join(MANIFEST)).unwrap();
        let listed = PairDataset::load(dir.path()).unwrap();
        assert_eq!(listed.ids, data.ids);
        assert!(listed.specs.iter().all(Option::is_none));
    }

    #[test]
    fn synthesis_is_seeded() {
        let a = PairDataset::synthesize(DegradationKind::Haze, 2, 16, 1, "").unwrap();
        let b = PairDataset::synthesize(DegradationKind::Haze, 2, 16, 1, "").unwrap();
        assert_eq!(a.degraded, b.degraded);
        assert_ne!(a.clean[0], a.clean[1]);
    }

    #[test]
    fn pyramid_sample_checks_pairs() {
        let a = Tensor::<f32>::zeros(&[1, 3, 8, 8]).unwrap();
        let b = Tensor::<f32>::zeros(&[1, 3, 8, 4]).unwrap();
        assert!(PyramidSample::new("x", &a, &b, 3).is_err());
        let s = PyramidSample::new("x", &a, &a, 3).unwrap();
        assert_eq!(s.clean[2].dims(), &[1, 3, 2, 2]);
    }

    #[test]
    fn malformed_manifest_is_rejected() {
        assert!(parse_manifest("a kind=haze beta\n").is_err());
        assert!(parse_manifest("a kind=fog seed=1\n").is_err());
        assert_eq!(parse_manifest("# c\n\nx\n").unwrap().len(), 1);
    }
}
