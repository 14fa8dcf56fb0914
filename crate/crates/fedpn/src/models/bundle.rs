//! Flat parameter vectors with a shape manifest, used for federated
//! parameter exchange and bit-exact checkpointing.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseArray;

const FORMAT_TAG: &str = "fedpn-params";
const FORMAT_VERSION: u32 = 1;

/// Ordered (name, shape) entries describing a flat payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeManifest {
    entries: Vec<(String, Vec<usize>)>,
}

impl ShapeManifest {
    pub fn entries(&self) -> &[(String, Vec<usize>)] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Named flat parameter vector; `flatten` then `unflatten` is the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterBundle {
    manifest: ShapeManifest,
    data: Vec<f64>,
}

impl ParameterBundle {
    pub fn from_named(params: &[(String, &DenseArray)]) -> Self {
        let mut entries = Vec::with_capacity(params.len());
        let mut data = Vec::new();
        for (name, arr) in params {
            entries.push((name.clone(), arr.shape().to_vec()));
            data.extend_from_slice(arr.data());
        }
        ParameterBundle {
            manifest: ShapeManifest { entries },
            data,
        }
    }

    pub fn manifest(&self) -> &ShapeManifest {
        &self.manifest
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Write the payload back into parameter storage; the target list must
    /// match the manifest exactly (same names, shapes, order).
    pub fn apply_to(&self, targets: &mut [(String, &mut DenseArray)]) -> Result<()> {
        if targets.len() != self.manifest.entries.len() {
            return Err(Error::contract(format!(
                "manifest has {} tensors, target has {}",
                self.manifest.entries.len(),
                targets.len()
            )));
        }
        let mut offset = 0;
        for ((name, shape), (tname, target)) in
            self.manifest.entries.iter().zip(targets.iter_mut())
        {
            if name != tname || shape != &target.shape().to_vec() {
                return Err(Error::contract(format!(
                    "manifest mismatch at {}: {:?} vs {} {:?}",
                    name,
                    shape,
                    tname,
                    target.shape()
                )));
            }
            let n = target.len();
            target
                .data_mut()
                .copy_from_slice(&self.data[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Componentwise unweighted mean of bundles with identical manifests.
    pub fn mean(bundles: &[ParameterBundle]) -> Result<ParameterBundle> {
        Self::weighted_mean_impl(bundles, None)
    }

    /// Componentwise mean with the given non-negative weights.
    pub fn weighted_mean(
        bundles: &[ParameterBundle],
        weights: &[f64],
    ) -> Result<ParameterBundle> {
        if weights.len() != bundles.len() {
            return Err(Error::contract("one weight per bundle required"));
        }
        Self::weighted_mean_impl(bundles, Some(weights))
    }

    fn weighted_mean_impl(
        bundles: &[ParameterBundle],
        weights: Option<&[f64]>,
    ) -> Result<ParameterBundle> {
        let first = bundles
            .first()
            .ok_or_else(|| Error::contract("mean of zero bundles"))?;
        for b in bundles.iter().skip(1) {
            if b.manifest != first.manifest {
                return Err(Error::contract("bundle manifests differ"));
            }
        }
        let total_weight: f64 = match weights {
            Some(w) => w.iter().sum(),
            None => bundles.len() as f64,
        };
        if total_weight <= 0.0 {
            return Err(Error::contract("aggregation weights sum to zero"));
        }
        let mut data = vec![0.0; first.data.len()];
        for (i, b) in bundles.iter().enumerate() {
            let w = weights.map_or(1.0, |ws| ws[i]) / total_weight;
            for (acc, v) in data.iter_mut().zip(b.data.iter()) {
                *acc += w * v;
            }
        }
        Ok(ParameterBundle {
            manifest: first.manifest.clone(),
            data,
        })
    }

    /// Versioned text serialization; payload entries are hex-encoded f64
    /// bits so round-trips are bit-exact.
    pub fn write_text(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{} v{}", FORMAT_TAG, FORMAT_VERSION)?;
        writeln!(w, "{}", self.manifest.entries.len())?;
        for (name, shape) in &self.manifest.entries {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            writeln!(w, "{} {}", name, dims.join(" "))?;
        }
        for chunk in self.data.chunks(8) {
            let line: Vec<String> = chunk
                .iter()
                .map(|v| format!("{:016x}", v.to_bits()))
                .collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn read_text(r: impl BufRead) -> Result<ParameterBundle> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Serialization("empty parameter file".into()))??;
        let expected = format!("{} v{}", FORMAT_TAG, FORMAT_VERSION);
        if header.trim() != expected {
            return Err(Error::Serialization(format!(
                "unsupported parameter header: {}",
                header
            )));
        }
        let count: usize = lines
            .next()
            .ok_or_else(|| Error::Serialization("truncated parameter file".into()))??
            .trim()
            .parse()
            .map_err(|e| Error::Serialization(format!("bad tensor count: {}", e)))?;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let line = lines
                .next()
                .ok_or_else(|| Error::Serialization("truncated manifest".into()))??;
            let mut parts = line.split_whitespace();
            let name = parts
                .next()
                .ok_or_else(|| Error::Serialization("missing tensor name".into()))?
                .to_string();
            let shape: Vec<usize> = parts
                .map(|p| p.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Serialization(format!("bad shape: {}", e)))?;
            entries.push((name, shape));
        }
        let manifest = ShapeManifest { entries };
        let total = manifest.total_len();
        let mut data = Vec::with_capacity(total);
        for line in lines {
            let line = line?;
            for tok in line.split_whitespace() {
                let bits = u64::from_str_radix(tok, 16)
                    .map_err(|e| Error::Serialization(format!("bad payload word: {}", e)))?;
                data.push(f64::from_bits(bits));
            }
        }
        if data.len() != total {
            return Err(Error::Serialization(format!(
                "payload holds {} values, manifest expects {}",
                data.len(),
                total
            )));
        }
        Ok(ParameterBundle { manifest, data })
    }
}
