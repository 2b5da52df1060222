//! Model checkpoints.
//!
//! File layout:
//!
//! ```text
//! b"FSSLCKPT"                      8-byte magic
//! u64 LE                           header length in bytes
//! JSON header                      format_version, components, provenance
//! f32 LE parameter blocks          component order, then block order
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Architecture, Network};
use crate::nn::{Param, ParamKind};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"FSSLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockDescriptor {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub kind: ParamKind,
}

impl BlockDescriptor {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentState {
    pub name: String,
    pub architecture: Architecture,
    pub blocks: Vec<BlockDescriptor>,
    #[serde(skip)]
    pub values: Vec<Vec<f32>>,
}

impl ComponentState {
    pub fn capture<T: Scalar, N: Network<T> + ?Sized>(name: &str, net: &N) -> Self {
        let params = net.params();
        ComponentState {
            name: name.to_string(),
            architecture: net.architecture(),
            blocks: params
                .iter()
                .map(|p| BlockDescriptor {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    trainable: p.trainable,
                    kind: p.kind,
                })
                .collect(),
            values: params
                .iter()
                .map(|p| p.value.iter().map(|v| v.as_f64() as f32).collect())
                .collect(),
        }
    }

    /// Copy stored values into `net`, which must share the architecture.
    pub fn restore<T: Scalar, N: Network<T> + ?Sized>(&self, net: &mut N) -> Result<()> {
        if net.architecture() != self.architecture {
            return Err(Error::Architecture(format!(
                "component `{}` stores {:?}, target network is {:?}",
                self.name,
                self.architecture,
                net.architecture()
            )));
        }
        let mut params = net.params_mut();
        if params.len() != self.blocks.len() {
            return Err(Error::Architecture(format!(
                "component `{}` has {} blocks, network has {}",
                self.name,
                self.blocks.len(),
                params.len()
            )));
        }
        for ((p, b), vals) in params.iter_mut().zip(&self.blocks).zip(&self.values) {
            if p.shape != b.shape || p.name != b.name {
                return Err(Error::Architecture(format!(
                    "block `{}` {:?} does not match `{}` {:?}",
                    b.name, b.shape, p.name, p.shape
                )));
            }
            load_block(p, vals);
        }
        Ok(())
    }

    pub fn num_values(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }
}

fn load_block<T: Scalar>(p: &mut Param<T>, vals: &[f32]) {
    for (dst, &v) in p.value.iter_mut().zip(vals) {
        *dst = T::of(v as f64);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub epoch: usize,
    pub loss_curve: Vec<f64>,
    pub config_fingerprint: Option<String>,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    components: Vec<ComponentState>,
    provenance: Provenance,
}

/// Serialized parameters of one or more networks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelState {
    pub components: Vec<ComponentState>,
    pub provenance: Provenance,
}

impl ModelState {
    pub fn component(&self, name: &str) -> Result<&ComponentState> {
        self.components
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("no component named `{name}`")))
    }

    pub fn push<T: Scalar, N: Network<T> + ?Sized>(&mut self, name: &str, net: &N) {
        self.components.retain(|c| c.name != name);
        self.components.push(ComponentState::capture(name, net));
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            components: self.components.clone(),
            provenance: self.provenance.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::format("checkpoint header", e))?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.components.iter().map(|c| c.num_values()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for c in &self.components {
            for (b, vals) in c.blocks.iter().zip(&c.values) {
                debug_assert_eq!(b.len(), vals.len());
                for v in vals {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let mut data = &bytes[16 + hlen..];
        let mut components = header.components;
        for c in &mut components {
            if c.num_values() != c.architecture.param_count() {
                return Err(Error::Checkpoint(format!(
                    "component `{}` lists {} values but its architecture has {}",
                    c.name,
                    c.num_values(),
                    c.architecture.param_count()
                )));
            }
            c.values = Vec::with_capacity(c.blocks.len());
            for b in &c.blocks {
                let n = b.len() * 4;
                if data.len() < n {
                    return Err(Error::Checkpoint(format!("truncated block `{}`", b.name)));
                }
                let vals = data[..n]
                    .chunks_exact(4)
                    .map(|ch| f32::from_le_bytes(ch.try_into().expect("4 bytes")))
                    .collect();
                c.values.push(vals);
                data = &data[n..];
            }
        }
        if !data.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", data.len())));
        }
        Ok(ModelState {
            components,
            provenance: header.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        ModelState::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{ClassifierHead, ClassifierHeadSpec, Encoder, EncoderSpec};

    #[test]
    fn roundtrip_preserves_f32_values() {
        let enc = Encoder::<f32>::new(EncoderSpec::default(), 1);
        let head = ClassifierHead::<f32>::new(ClassifierHeadSpec::new(3), 2);
        let mut st = ModelState::default();
        st.push("encoder", &enc);
        st.push("head", &head);
        st.provenance.seed = 9;
        st.provenance.loss_curve = vec![0.5, 0.25];
        let back = ModelState::from_bytes(&st.to_bytes().unwrap()).unwrap();
        assert_eq!(back, st);

        let mut enc2 = Encoder::<f32>::new(EncoderSpec::default(), 77);
        back.component("encoder").unwrap().restore(&mut enc2).unwrap();
        for (a, b) in enc.params().iter().zip(enc2.params()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn architecture_mismatch_rejected() {
        let enc = Encoder::<f32>::new(EncoderSpec::default(), 1);
        let mut st = ModelState::default();
        st.push("encoder", &enc);
        let mut other = Encoder::<f32>::new(
            EncoderSpec {
                channels: vec![8, 16, 32],
                ..Default::default()
            },
            1,
        );
        assert!(matches!(
            st.component("encoder").unwrap().restore(&mut other),
            Err(Error::Architecture(_))
        ));
    }

    #[test]
    fn corrupt_bytes_rejected() {
        let enc = Encoder::<f32>::new(EncoderSpec::default(), 1);
        let mut st = ModelState::default();
        st.push("encoder", &enc);
        let bytes = st.to_bytes().unwrap();
        assert!(ModelState::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ModelState::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(ModelState::from_bytes(&extra).is_err());
    }
}
