//! Binary checkpoint format.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "OBJN" | version u32 | head tag u8 | config len u32 | config JSON
//! tensor count u32 | per tensor: name len u16, name, rank u8, dims u32 * rank, f32 data
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{HeadKind, NetworkConfig};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"OBJN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(config: NetworkConfig, tensors: Vec<(String, Tensor<f32>)>) -> Self {
        Checkpoint { config, tensors }
    }

    pub fn head_kind(&self) -> HeadKind {
        self.config.head.kind()
    }

    pub fn tensors(&self) -> &[(String, Tensor<f32>)] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn remove_tensor(&mut self, name: &str) -> Option<Tensor<f32>> {
        let i = self.tensors.iter().position(|(n, _)| n == name)?;
        Some(self.tensors.remove(i).1)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = serde_json::to_vec(&self.config)
            .map_err(|e| Error::Checkpoint(format!("cannot encode config: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.head_kind().tag());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let tag = r.take(1, "head tag")?[0];
        let kind = HeadKind::from_tag(tag)
            .ok_or_else(|| Error::Checkpoint(format!("unknown head tag {tag}")))?;
        let config_len = r.u32("config length")? as usize;
        let config: NetworkConfig = serde_json::from_slice(r.take(config_len, "config")?)
            .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        if config.head.kind() != kind {
            return Err(Error::Checkpoint(format!(
                "head tag says {} but config has a {} head",
                kind.name(),
                config.head.kind().name()
            )));
        }
        let count = r.u32("tensor count")? as usize;
        let mut seen = HashSet::new();
        let mut tensors = Vec::with_capacity(count.min(1024));
        for i in 0..count {
            let what = format!("tensor #{i}");
            let name_len = u16::from_le_bytes(r.take(2, &what)?.try_into().expect("2 bytes"));
            let name = std::str::from_utf8(r.take(name_len as usize, &what)?)
                .map_err(|_| Error::Checkpoint(format!("{what}: name is not UTF-8")))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
            }
            let rank = r.take(1, &name)?[0] as usize;
            let dims = (0..rank)
                .map(|_| r.u32(&name).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = dims.iter().product();
            let raw = r.take(len * 4, &name)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(dims, data)
                .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Truncated(what.to_string()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bbox::BBoxGrid;
    use crate::model::{HeadSpec, Model};

    fn small() -> Model {
        let cfg = NetworkConfig {
            input_dims: [3, 8, 8],
            trunk: vec!["conv(4,3,1,1)".parse().unwrap(), "relu".parse().unwrap(), "dense(16)".parse().unwrap()],
            feature_dim: 16,
            head: HeadSpec::BBox {
                grid: BBoxGrid {
                    nx: 2,
                    ny: 2,
                    ns: 2,
                    na: 1,
                    ..BBoxGrid::default()
                },
            },
            init_seed: 3,
            init_std: Some(0.01),
        };
        Model::build(&cfg).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = small().checkpoint().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"OBJN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes[8], 1);
    }

    #[test]
    fn distinct_errors() {
        let bytes = small().checkpoint().to_bytes().unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic(_))));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::UnsupportedVersion(9))));

        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(Checkpoint::from_bytes(cut), Err(Error::Truncated(_))));

        let mut ck = small().checkpoint();
        ck.remove_tensor("trunk.0.bias");
        let reread = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        match Model::from_checkpoint(&reread) {
            Err(Error::MissingParameter(name)) => assert_eq!(name, "trunk.0.bias"),
            other => panic!("expected missing parameter, got {other:?}"),
        }

        let mut ck = small().checkpoint();
        let w = ck.remove_tensor("head.bias").unwrap();
        ck.tensors.push(("head.bias".into(), w.reshape(&[2, 4]).unwrap()));
        assert!(matches!(
            Model::from_checkpoint(&ck),
            Err(Error::ParameterShape { .. })
        ));
    }
}
