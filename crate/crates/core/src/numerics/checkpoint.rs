//! Single-file tensor checkpoints.
//!
//! Layout: the 8-byte magic `WSICKPT1`, a little-endian `u64` manifest
//! length, the JSON manifest, then every tensor payload as little-endian
//! `f64` values. Manifest offsets are byte offsets into the payload region.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamConfig, AdamState, EmaState, Moments};
use super::tensor::Tensor;
use super::ParamMap;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"WSICKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    tensors: Vec<ManifestEntry>,
}

/// Named tensors plus free-form JSON metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Map<String, serde_json::Value>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_params(&mut self, prefix: &str, params: &ParamMap) {
        for (name, t) in params {
            self.tensors.insert(format!("{prefix}{name}"), t.clone());
        }
    }

    pub fn params(&self, prefix: &str) -> ParamMap {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|k| (k.to_string(), t.clone())))
            .collect()
    }

    pub fn insert_adam(&mut self, key: &str, adam: &AdamState) {
        let mut steps = serde_json::Map::new();
        for (name, m) in &adam.moments {
            let shape = m.shape.clone();
            self.tensors.insert(
                format!("adam/{key}/m/{name}"),
                Tensor::new(shape.clone(), m.first.clone()).expect("moment shape"),
            );
            self.tensors.insert(
                format!("adam/{key}/v/{name}"),
                Tensor::new(shape, m.second.clone()).expect("moment shape"),
            );
            steps.insert(name.clone(), m.steps.into());
        }
        self.meta.insert(
            format!("adam/{key}"),
            serde_json::json!({
                "config": adam.config,
                "step": adam.step_count(),
                "param_steps": steps,
            }),
        );
    }

    pub fn adam(&self, key: &str) -> Result<AdamState> {
        let meta = self
            .meta
            .get(&format!("adam/{key}"))
            .ok_or_else(|| Error::Checkpoint(format!("no optimizer state {key}")))?;
        let config: AdamConfig = serde_json::from_value(meta["config"].clone())?;
        let mut adam = AdamState::new(config);
        let steps = meta["param_steps"]
            .as_object()
            .ok_or_else(|| Error::Checkpoint("param_steps".into()))?;
        for (name, s) in steps {
            let first = self.get(&format!("adam/{key}/m/{name}"))?;
            let second = self.get(&format!("adam/{key}/v/{name}"))?;
            adam.moments.insert(
                name.clone(),
                Moments {
                    first: first.data().to_vec(),
                    second: second.data().to_vec(),
                    shape: first.shape().to_vec(),
                    steps: s.as_u64().unwrap_or(0),
                },
            );
        }
        adam.set_step_count(meta["step"].as_u64().unwrap_or(0));
        Ok(adam)
    }

    pub fn insert_ema(&mut self, key: &str, ema: &EmaState) {
        self.insert_params(&format!("ema/{key}/"), ema.shadow());
        self.meta.insert(
            format!("ema/{key}"),
            serde_json::json!({
                "decay": ema.decay,
                "warmup": ema.warmup,
                "updates": ema.updates(),
            }),
        );
    }

    pub fn ema(&self, key: &str) -> Result<EmaState> {
        let meta = self
            .meta
            .get(&format!("ema/{key}"))
            .ok_or_else(|| Error::Checkpoint(format!("no ema state {key}")))?;
        Ok(EmaState::restore(
            meta["decay"].as_f64().unwrap_or(0.0),
            meta["warmup"].as_bool().unwrap_or(false),
            meta["updates"].as_u64().unwrap_or(0),
            self.params(&format!("ema/{key}/")),
        ))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 8 * t.numel() as u64;
        }
        let manifest = serde_json::to_vec(&Manifest {
            meta: serde_json::Value::Object(self.meta.clone()),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(16 + manifest.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let manifest_end = 16usize
            .checked_add(len)
            .filter(|e| *e <= bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..manifest_end])?;
        let payload = &bytes[manifest_end..];
        let mut tensors = BTreeMap::new();
        for e in manifest.tensors {
            let numel: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 8 * numel;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!("truncated payload for {}", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(e.name, Tensor::new(e.shape, data)?);
        }
        let meta = match manifest.meta {
            serde_json::Value::Object(m) => m,
            _ => serde_json::Map::new(),
        };
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bytes_round_trip(values in prop::collection::vec(-1e6f64..1e6, 1..40), rows in 1usize..4) {
            let cols = values.len();
            let data: Vec<f64> = (0..rows).flat_map(|_| values.iter().copied()).collect();
            let mut ck = Checkpoint::new();
            ck.tensors.insert("decoder/w".into(), Tensor::new(vec![rows, cols], data).unwrap());
            ck.tensors.insert("seg_head/b".into(), Tensor::new(vec![cols], values.clone()).unwrap());
            ck.meta.insert("config_hash".into(), "abc".into());
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back, ck);
        }
    }

    #[test]
    fn optimizer_state_survives() {
        let mut params = ParamMap::new();
        params.insert("w".into(), Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let grads: BTreeMap<_, _> =
            [("w".to_string(), Tensor::new(vec![3], vec![0.5, -0.1, 0.0]).unwrap())].into();
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut params, &grads, |_| 1.0).unwrap();
        let mut ema = EmaState::new(&params, 0.9, true).unwrap();
        ema.update(&params).unwrap();

        let mut ck = Checkpoint::new();
        ck.insert_params("params/", &params);
        ck.insert_adam("main", &adam);
        ck.insert_ema("enc", &ema);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.params("params/"), params);
        assert_eq!(back.adam("main").unwrap(), adam);
        assert_eq!(back.ema("enc").unwrap(), ema);

        // Resumed optimizer continues identically.
        let mut a2 = back.adam("main").unwrap();
        let mut p2 = back.params("params/");
        adam.step(&mut params, &grads, |_| 1.0).unwrap();
        a2.step(&mut p2, &grads, |_| 1.0).unwrap();
        assert_eq!(params, p2);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
    }
}
