//! Binary checkpoint format.
//!
//! Layout (little-endian): magic `FFSEP1`, u32 version, u8-length kind tag, u32-length
//! TOML config, u64 step, u64 seed, u32 parameter count, then per parameter a u16-length
//! name, u8 rank, u32 dims and f32 data; finally a u64 FNV-1a checksum of everything before.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::biometric::{BiometricConfig, BiometricModel};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::separation::{SeparatorConfig, SeparatorKind, SeparatorModel};

pub const MAGIC: &[u8; 6] = b"FFSEP1";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Biometric,
    Separator,
    PitBaseline,
}

impl ModelKind {
    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::Biometric => "biometric",
            ModelKind::Separator => "separator",
            ModelKind::PitBaseline => "pit-baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "biometric" => Ok(ModelKind::Biometric),
            "separator" => Ok(ModelKind::Separator),
            "pit-baseline" => Ok(ModelKind::PitBaseline),
            _ => Err(format_err("kind", format!("unknown model kind `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: String,
    pub step: u64,
    pub seed: u64,
    pub params: Vec<(String, Vec<usize>, Vec<f32>)>,
}

fn format_err(field: &str, detail: impl Into<String>) -> Error {
    Error::Format {
        field: format!("checkpoint {field}"),
        detail: detail.into(),
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xCBF2_9CE4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01B3))
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.b.len() - self.pos < n {
            return Err(format_err(field, "unexpected end of file (truncated)"));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, f: &str) -> Result<u8> {
        Ok(self.take(1, f)?[0])
    }
    fn u16(&mut self, f: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, f)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self, f: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, f)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, f: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, f)?.try_into().expect("8 bytes")))
    }
    fn string(&mut self, n: usize, f: &str) -> Result<String> {
        String::from_utf8(self.take(n, f)?.to_vec()).map_err(|_| format_err(f, "invalid UTF-8"))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let tag = self.kind.tag().as_bytes();
        out.push(tag.len() as u8);
        out.extend_from_slice(tag);
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.params {
            let n = u16::try_from(name.len()).map_err(|_| Error::Argument(format!("parameter name too long: {name}")))?;
            out.extend_from_slice(&n.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(format_err("magic", "file does not start with FFSEP1"));
        }
        let mut r = Reader { b: bytes, pos: MAGIC.len() };
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(format_err("version", format!("unsupported version {version}, expected {VERSION}")));
        }
        if bytes.len() < 8 + r.pos {
            return Err(format_err("checksum", "file too short"));
        }
        let body = &bytes[..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
        if fnv1a(body) != stored {
            return Err(format_err("checksum", "content does not match its checksum (corrupted file)"));
        }
        let mut r = Reader { b: body, pos: r.pos };
        let tag_len = r.u8("kind")? as usize;
        let kind = ModelKind::parse(&r.string(tag_len, "kind")?)?;
        let cfg_len = r.u32("config length")? as usize;
        let config = r.string(cfg_len, "config")?;
        let step = r.u64("step")?;
        let seed = r.u64("seed")?;
        let count = r.u32("parameter count")? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let field = format!("parameter {i}");
            let nl = r.u16(&field)? as usize;
            let name = r.string(nl, &field)?;
            let rank = r.u8(&name)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32(&name)? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| format_err(&name, "shape overflows"))?, &name)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.push((name, shape, data));
        }
        if r.pos != body.len() {
            return Err(format_err("trailer", format!("{} unexpected trailing bytes", body.len() - r.pos)));
        }
        Ok(Self {
            kind,
            config,
            step,
            seed,
            params,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()
        };
        if let Err(e) = write() {
            let _ = fs::remove_file(&tmp);
            return Err(Error::io(&tmp, e));
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { field, detail } => Error::Format {
                field,
                detail: format!("{detail} ({})", path.display()),
            },
            other => other,
        })
    }

    fn expect_kind(&self, expected: &[ModelKind]) -> Result<()> {
        if expected.contains(&self.kind) {
            Ok(())
        } else {
            Err(Error::Kind {
                expected: expected.iter().map(|k| k.tag()).collect::<Vec<_>>().join(" or "),
                found: self.kind.tag().into(),
            })
        }
    }

    fn parse_config<C: DeserializeOwned>(&self) -> Result<C> {
        toml::from_str(&self.config).map_err(|e| format_err("config", e.to_string()))
    }
}

pub fn config_text<C: Serialize>(cfg: &C) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))
}

fn params_of(store: &ParamStore<f32>) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.tensor.shape().to_vec(), p.tensor.data().to_vec()))
        .collect()
}

/// Overwrites every entry of `store` from the table; names and shapes must match exactly.
fn fill_store(store: &mut ParamStore<f32>, params: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
    if params.len() != store.len() {
        let have: Vec<&str> = params.iter().map(|p| p.0.as_str()).collect();
        let missing: Vec<&str> = store
            .iter()
            .map(|(_, p)| p.name.as_str())
            .filter(|n| !have.contains(n))
            .collect();
        return Err(format_err(
            "parameter table",
            format!("{} entries, model declares {} (missing: {missing:?})", params.len(), store.len()),
        ));
    }
    for (name, shape, data) in params {
        let id = store
            .id(name)
            .ok_or_else(|| format_err("parameter table", format!("unknown parameter `{name}`")))?;
        if store.get(id).shape() != shape.as_slice() {
            return Err(Error::Format {
                field: format!("checkpoint parameter {name}"),
                detail: format!("shape {shape:?}, model declares {:?}", store.get(id).shape()),
            });
        }
        store.set(name, Tensor::new(shape, data.clone())?)?;
    }
    Ok(())
}

impl BiometricModel {
    pub fn to_checkpoint(&self, step: u64, seed: u64) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: ModelKind::Biometric,
            config: config_text(&self.config)?,
            step,
            seed,
            params: params_of(&self.store),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(&[ModelKind::Biometric])?;
        let cfg: BiometricConfig = ck.parse_config()?;
        let mut m = BiometricModel::new(cfg, 0)?;
        fill_store(&mut m.store, &ck.params)?;
        Ok(m)
    }
}

impl SeparatorModel {
    pub fn checkpoint_kind(&self) -> ModelKind {
        match self.config.kind {
            SeparatorKind::Conditioned => ModelKind::Separator,
            SeparatorKind::Pit => ModelKind::PitBaseline,
        }
    }

    pub fn to_checkpoint(&self, step: u64, seed: u64) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: self.checkpoint_kind(),
            config: config_text(&self.config)?,
            step,
            seed,
            params: params_of(&self.store),
        })
    }

    /// Accepts either separator kind; use [`SeparatorModel::from_checkpoint_kind`] to insist on one.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(&[ModelKind::Separator, ModelKind::PitBaseline])?;
        let cfg: SeparatorConfig = ck.parse_config()?;
        let m = SeparatorModel::new(cfg, 0)?;
        if m.checkpoint_kind() != ck.kind {
            return Err(Error::Kind {
                expected: m.checkpoint_kind().tag().into(),
                found: ck.kind.tag().into(),
            });
        }
        let mut m = m;
        fill_store(&mut m.store, &ck.params)?;
        Ok(m)
    }

    pub fn from_checkpoint_kind(ck: &Checkpoint, kind: ModelKind) -> Result<Self> {
        ck.expect_kind(&[kind])?;
        Self::from_checkpoint(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip_and_corruption() {
        let ck = Checkpoint {
            kind: ModelKind::PitBaseline,
            config: "a = 1\n".into(),
            step: 7,
            seed: 9,
            params: vec![("w".into(), vec![2, 1], vec![1.5, -0.25]), ("b".into(), vec![], vec![3.0])],
        };
        let b = ck.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&b).unwrap(), ck);
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = b.clone();
        bad[6] = 2;
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("version"));
        let mut bad = b.clone();
        let n = bad.len();
        bad[n - 12] ^= 1;
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("checksum"));
        assert!(Checkpoint::from_bytes(&b[..b.len() - 3]).is_err());
    }

    #[test]
    fn kind_mismatch_is_reported() {
        let bio = BiometricModel::new(BiometricConfig::default(), 0).unwrap();
        let ck = bio.to_checkpoint(0, 0).unwrap();
        assert!(matches!(SeparatorModel::from_checkpoint(&ck), Err(Error::Kind { .. })));
        let back = BiometricModel::from_checkpoint(&ck).unwrap();
        assert_eq!(back.to_checkpoint(0, 0).unwrap(), ck);
    }
}
