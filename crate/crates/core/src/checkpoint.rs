// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary checkpoints for model weights and adapter sets.
//!
//! Layout: magic `MPCK`, `u32` format version, `u64` header length, a JSON
//! header, then every tensor as little-endian `f32` in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{Adapter, AdapterSet, AdapterSpec};
use crate::autodiff::Tensor;
use crate::digest::Digest;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Site, Weights};

const MAGIC: &[u8; 4] = b"MPCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Model,
    Adapters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: Kind,
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter_spec: Option<AdapterSpec>,
    pub seed: u64,
    pub digest: Digest,
    pub tensors: Vec<ManifestEntry>,
}

fn write_file<'a>(path: &Path, header: &Header, tensors: impl IntoIterator<Item = &'a Tensor<f32>>) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for t in tensors {
        w.write_all(&t.le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_file(path: &Path) -> Result<(Header, Vec<Tensor<f32>>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("{}: not a checkpoint", path.display())));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b)?;
    let version = u32::from_le_bytes(u32b);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b)?;
    let len = usize::try_from(u64::from_le_bytes(u64b)).map_err(|_| Error::Format("header length overflows".into()))?;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Format(format!("{}: truncated tensor {}", path.display(), e.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(Tensor::new(e.shape.clone(), data)?);
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Format(format!("{}: trailing bytes", path.display())));
    }
    Ok((header, tensors))
}

fn check_kind(header: &Header, kind: Kind) -> Result<()> {
    if header.kind != kind {
        return Err(Error::Format(format!(
            "expected a {kind:?} checkpoint, found {:?}",
            header.kind
        )));
    }
    Ok(())
}

fn check_digest(expected: &Digest, actual: Digest) -> Result<()> {
    if *expected != actual {
        return Err(Error::Format(format!(
            "digest mismatch: header {expected}, content {actual}"
        )));
    }
    Ok(())
}

pub fn save_model(path: &Path, weights: &Weights<f32>, seed: u64) -> Result<Digest> {
    let digest = weights.digest();
    let header = Header {
        kind: Kind::Model,
        config: weights.config,
        adapter_spec: None,
        seed,
        digest: digest.clone(),
        tensors: Weights::<f32>::names(&weights.config)
            .into_iter()
            .zip(weights.tensors())
            .map(|(name, t)| ManifestEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    write_file(path, &header, weights.tensors())?;
    Ok(digest)
}

/// Loads weights, verifying manifest names, shapes and the content digest.
pub fn load_model(path: &Path) -> Result<(Weights<f32>, Header)> {
    let (header, tensors) = read_file(path)?;
    check_kind(&header, Kind::Model)?;
    let names = Weights::<f32>::names(&header.config);
    if names.iter().ne(header.tensors.iter().map(|e| &e.name)) {
        return Err(Error::Format("model manifest does not match the configuration".into()));
    }
    let weights = Weights::from_tensors(header.config, tensors)?;
    check_digest(&header.digest, weights.digest())?;
    Ok((weights, header))
}

pub fn save_adapters(path: &Path, adapters: &AdapterSet<f32>, seed: u64) -> Result<Digest> {
    let digest = adapters.digest();
    let named = adapters.named_tensors();
    let header = Header {
        kind: Kind::Adapters,
        config: adapters.config,
        adapter_spec: Some(adapters.spec.clone()),
        seed,
        digest: digest.clone(),
        tensors: named
            .iter()
            .map(|(name, t)| ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    write_file(path, &header, named.iter().map(|(_, t)| *t))?;
    Ok(digest)
}

pub fn load_adapters(path: &Path) -> Result<(AdapterSet<f32>, Header)> {
    let (header, tensors) = read_file(path)?;
    check_kind(&header, Kind::Adapters)?;
    let spec = header
        .adapter_spec
        .clone()
        .ok_or_else(|| Error::Format("adapter checkpoint lacks its spec".into()))?;
    spec.validate(&header.config)?;
    let sites: Vec<(usize, Site)> = spec.sites().into_iter().collect();
    if tensors.len() != 2 * sites.len() {
        return Err(Error::Format(format!(
            "expected {} adapter matrices, found {}",
            2 * sites.len(),
            tensors.len()
        )));
    }
    let mut it = tensors.into_iter().zip(&header.tensors);
    let mut entries = std::collections::BTreeMap::new();
    for (l, site) in sites {
        let (d_in, d_out) = site.dims(&header.config);
        let (a, ea) = it.next().expect("count checked");
        let (b, eb) = it.next().expect("count checked");
        if ea.name != format!("layers.{l}.{site}.A") || eb.name != format!("layers.{l}.{site}.B") {
            return Err(Error::Format(format!(
                "unexpected adapter entries {} / {}",
                ea.name, eb.name
            )));
        }
        if a.shape() != [d_in, spec.rank] || b.shape() != [spec.rank, d_out] {
            return Err(Error::Format(format!("adapter layers.{l}.{site} has wrong shape")));
        }
        entries.insert((l, site), Adapter { a, b });
    }
    let set = AdapterSet {
        spec,
        config: header.config,
        entries,
    };
    check_digest(&header.digest, set.digest())?;
    Ok((set, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_weights;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 10,
            max_seq: 6,
        }
    }

    #[test]
    fn model_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let w = init_weights(cfg(), 3).unwrap();
        let d = save_model(&p, &w, 3).unwrap();
        let (back, header) = load_model(&p).unwrap();
        assert_eq!(back, w);
        assert_eq!(header.digest, d);
        assert_eq!(header.seed, 3);
    }

    #[test]
    fn adapter_round_trip_and_kind_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let mut ad = AdapterSet::new(cfg(), AdapterSpec::standard([0]), 5).unwrap();
        ad.tensors_mut()[1].data_mut()[0] = 0.25;
        save_adapters(&p, &ad, 5).unwrap();
        assert_eq!(load_adapters(&p).unwrap().0, ad);
        assert!(load_model(&p).is_err());
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_model(&p, &init_weights(cfg(), 3).unwrap(), 3).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_model(&p), Err(Error::Format(_))));
        std::fs::write(&p, &bytes[..last]).unwrap();
        assert!(load_model(&p).is_err());
    }
}
