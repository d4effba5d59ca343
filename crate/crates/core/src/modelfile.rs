//! Versioned binary model file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RMLP"  u32 version
//! u64 len, metadata JSON
//! u64 len, preprocessor JSON
//! u32 array count, then per array:
//!   u16 name len, name, u8 ndim, ndim × u64 dims, u8 element width (8), f64 payload
//! ```

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::RealMlpConfig;
use crate::dataio::{DatasetSchema, Task};
use crate::error::{Error, Result};
use crate::model::{Architecture, RealMlp};
use crate::preprocess::FittedPreprocessor;
use crate::rng::{self, Purpose};
use crate::train::{RegressionOutput, TrainedModel};

pub const MAGIC: &[u8; 4] = b"RMLP";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    task: Task,
    preset: String,
    config: Vec<(String, String)>,
    schema: String,
    schema_digest: String,
    seed: u64,
    regression: Option<RegressionOutput>,
    class_names: Vec<String>,
}

fn put_block(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

pub fn to_bytes(model: &TrainedModel) -> Result<Vec<u8>> {
    let meta = Metadata {
        task: model.task(),
        preset: model.config.preset.clone(),
        config: model.config.to_key_values(),
        schema: model.schema.to_text(),
        schema_digest: model.schema.digest(),
        seed: model.seed,
        regression: model.regression.clone(),
        class_names: model.class_names.clone(),
    };
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_block(&mut out, &serde_json::to_vec(&meta)?);
    put_block(&mut out, &serde_json::to_vec(&model.preprocessor)?);
    out.extend_from_slice(&(model.network.params.len() as u32).to_le_bytes());
    for p in &model.network.params {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(2);
        out.extend_from_slice(&(p.value.nrows() as u64).to_le_bytes());
        out.extend_from_slice(&(p.value.ncols() as u64).to_le_bytes());
        out.push(8);
        for v in p.value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::ModelFile(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn block(&mut self) -> Result<&'a [u8]> {
        let n =
            usize::try_from(self.u64()?).map_err(|_| Error::ModelFile("block too large".into()))?;
        self.take(n)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainedModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::ModelFile("not a model file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.array()?);
    if version != VERSION {
        return Err(Error::ModelFile(format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }
    let meta: Metadata = serde_json::from_slice(r.block()?)?;
    let preprocessor: FittedPreprocessor = serde_json::from_slice(r.block()?)?;

    let schema = DatasetSchema::parse(&meta.schema)?;
    if schema.digest() != meta.schema_digest || schema.task != meta.task {
        return Err(Error::ModelFile(
            "schema digest does not match the stored schema".into(),
        ));
    }
    let mut config = RealMlpConfig::td(meta.task);
    for (k, v) in &meta.config {
        config.set(k, v)?;
    }
    let n_outputs = if meta.task == Task::Classification {
        meta.class_names.len()
    } else {
        1
    };
    let arch = Architecture::new(&config, &preprocessor, n_outputs);
    // parameter values are overwritten below; the draw only shapes them
    let mut network = RealMlp::new(
        arch,
        config.periodic_init_std,
        &mut rng::stream(0, Purpose::Init),
    )?;

    let count = u32::from_le_bytes(r.array()?) as usize;
    if count != network.params.len() {
        return Err(Error::ModelFile(format!(
            "file has {count} arrays, the architecture needs {}",
            network.params.len()
        )));
    }
    for p in &mut network.params {
        let len = u16::from_le_bytes(r.array()?) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::ModelFile("array name is not UTF-8".into()))?;
        if name != p.name {
            return Err(Error::ModelFile(format!(
                "expected array {}, found {name}",
                p.name
            )));
        }
        let ndim = r.array::<1>()?[0];
        if ndim != 2 {
            return Err(Error::ModelFile(format!(
                "array {name} has {ndim} dimensions"
            )));
        }
        let dims = (r.u64()? as usize, r.u64()? as usize);
        if dims != p.value.dim() {
            return Err(Error::ModelFile(format!(
                "array {name} has shape {dims:?}, expected {:?}",
                p.value.dim()
            )));
        }
        if r.array::<1>()?[0] != 8 {
            return Err(Error::ModelFile(format!("array {name} is not 64-bit")));
        }
        let payload = r.take(dims.0 * dims.1 * 8)?;
        let values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        p.value =
            Array2::from_shape_vec(dims, values).map_err(|e| Error::ModelFile(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::ModelFile(
            "trailing bytes after the last array".into(),
        ));
    }
    Ok(TrainedModel {
        config,
        schema,
        preprocessor,
        network,
        regression: meta.regression,
        class_names: meta.class_names,
        seed: meta.seed,
    })
}

pub fn save(model: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<TrainedModel> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::parse_csv;
    use crate::train::{fit, EpochSelection, Prediction};

    fn trained(task: &str) -> (TrainedModel, crate::dataio::Dataset) {
        let schema =
            DatasetSchema::parse(&format!("task,{task}\na,num\nc,cat\nd,cat\ny,target\n")).unwrap();
        let mut text = String::from("a,c,d,y\n");
        for i in 0..40 {
            let a = (i as f64 * 0.7).sin();
            let y = if task == "classification" {
                ["u", "v", "w"][i % 3].to_string()
            } else {
                format!("{}", a * 3.0 + (i % 4) as f64)
            };
            text.push_str(&format!("{a},{},k{},{y}\n", ["x", "z"][i % 2], i % 11));
        }
        let ds = parse_csv(&text, &schema).unwrap();
        let mut cfg = if task == "classification" {
            RealMlpConfig::td(Task::Classification)
        } else {
            RealMlpConfig::td(Task::Regression)
        };
        cfg.hidden_sizes = vec![8, 8];
        cfg.epochs = 3;
        let rows: Vec<usize> = (0..30).collect();
        let val: Vec<usize> = (30..40).collect();
        (
            fit(&ds, &rows, &val, &cfg, EpochSelection::Best, 17)
                .unwrap()
                .0,
            ds,
        )
    }

    #[test]
    fn round_trip_is_exact() {
        for task in ["classification", "regression"] {
            let (m, ds) = trained(task);
            let bytes = to_bytes(&m).unwrap();
            let back = from_bytes(&bytes).unwrap();
            assert_eq!(back, m);
            assert_eq!(to_bytes(&back).unwrap(), bytes);
            let (a, b) = (m.predict_all(&ds).unwrap(), back.predict_all(&ds).unwrap());
            match (a, b) {
                (Prediction::Probabilities(x), Prediction::Probabilities(y)) => assert_eq!(x, y),
                (Prediction::Values(x), Prediction::Values(y)) => assert_eq!(x, y),
                _ => panic!("prediction kinds differ"),
            }
        }
    }

    #[test]
    fn rejects_bad_files() {
        let (m, _) = trained("classification");
        let bytes = to_bytes(&m).unwrap();
        assert!(matches!(
            from_bytes(b"NOPE\x01\0\0\0"),
            Err(Error::ModelFile(_))
        ));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(from_bytes(&v2), Err(Error::ModelFile(_))));
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }
}
