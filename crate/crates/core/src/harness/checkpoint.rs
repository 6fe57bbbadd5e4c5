//! Versioned binary checkpoints.
//!
//! Layout: magic `BLXS1`, `u32` LE version, `u64` LE length + JSON metadata,
//! `u64` LE float count + that many `f64` LE values, then an FNV-1a 64
//! checksum (LE) over every preceding byte. All numeric state lives in the
//! float block, so a round trip is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterMode, AdapterModule, AdapterSet, HeadDelta, SiteId};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{Backbone, BackboneConfig};
use crate::rng::RngStream;
use crate::swag::{CovNormalization, SwagPosterior};

pub const MAGIC: &[u8; 5] = b"BLXS1";
pub const VERSION: u32 = 1;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "object", rename_all = "snake_case")]
pub enum Metadata {
    Backbone {
        config: BackboneConfig,
    },
    Adapters {
        modules: Vec<ModuleMeta>,
        head: Option<(usize, usize)>,
    },
    Posterior {
        dim: usize,
        k_eff: usize,
        normalization: CovNormalization,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleMeta {
    pub site: SiteId,
    pub mode: AdapterMode,
    pub alpha: f64,
    pub rank: usize,
    pub a: (usize, usize),
    pub b: (usize, usize),
    pub core: Option<(usize, usize)>,
}

/// Raw decoded checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: Metadata,
    pub floats: Vec<f64>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.metadata)?;
        let mut out = Vec::with_capacity(32 + meta.len() + 8 * self.floats.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.floats.len() as u64).to_le_bytes());
        for v in &self.floats {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_owned());
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        if bytes.len() < MAGIC.len() + 4 + 8 + 8 + 8 {
            return Err(bad("truncated file"));
        }
        let mut cur = Cursor {
            bytes,
            pos: MAGIC.len(),
        };
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let meta_len = cur.u64()? as usize;
        let meta_bytes = cur.take(meta_len)?;
        let n = cur.u64()? as usize;
        let float_bytes = cur.take(n.checked_mul(8).ok_or_else(|| bad("truncated file"))?)?;
        let body_end = cur.pos;
        let stored = cur.u64()?;
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes after checksum"));
        }
        if fnv1a64(&bytes[..body_end]) != stored {
            return Err(bad("checksum mismatch"));
        }
        let metadata = serde_json::from_slice(meta_bytes)?;
        let floats = float_bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { metadata, floats })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn wrong_object(want: &str) -> Error {
    Error::Checkpoint(format!("checkpoint does not hold {want}"))
}

fn take_matrix(floats: &mut std::slice::Iter<'_, f64>, (r, c): (usize, usize)) -> Result<Matrix> {
    let data: Vec<f64> = floats.by_ref().take(r * c).copied().collect();
    if data.len() != r * c {
        return Err(Error::Checkpoint(
            "float block shorter than metadata".into(),
        ));
    }
    Matrix::new(r, c, data)
}

fn finish(floats: std::slice::Iter<'_, f64>) -> Result<()> {
    if floats.len() != 0 {
        return Err(Error::Checkpoint("float block longer than metadata".into()));
    }
    Ok(())
}

pub fn encode_backbone(net: &Backbone) -> Checkpoint {
    Checkpoint {
        metadata: Metadata::Backbone {
            config: net.config(),
        },
        floats: net.flat_params(),
    }
}

pub fn decode_backbone(ck: &Checkpoint) -> Result<Backbone> {
    let Metadata::Backbone { config } = &ck.metadata else {
        return Err(wrong_object("a backbone"));
    };
    let mut net = Backbone::init(config, &mut RngStream::new(0))?;
    net.set_flat_params(&ck.floats)
        .map_err(|e| Error::Checkpoint(format!("backbone weights do not fit config: {e}")))?;
    Ok(net)
}

pub fn encode_adapters(set: &AdapterSet) -> Checkpoint {
    let mut floats = Vec::new();
    let modules = set
        .modules()
        .map(|m| {
            floats.extend_from_slice(m.a.data());
            floats.extend_from_slice(m.b.data());
            if let Some(c) = &m.core {
                floats.extend_from_slice(c.data());
            }
            ModuleMeta {
                site: m.site,
                mode: m.mode,
                alpha: m.alpha,
                rank: m.rank,
                a: m.a.shape(),
                b: m.b.shape(),
                core: m.core.as_ref().map(Matrix::shape),
            }
        })
        .collect();
    let head = set.head().map(|h| {
        floats.extend_from_slice(h.weight.data());
        floats.extend_from_slice(h.bias.data());
        h.weight.shape()
    });
    Checkpoint {
        metadata: Metadata::Adapters { modules, head },
        floats,
    }
}

pub fn decode_adapters(ck: &Checkpoint) -> Result<AdapterSet> {
    let Metadata::Adapters { modules, head } = &ck.metadata else {
        return Err(wrong_object("adapters"));
    };
    let mut it = ck.floats.iter();
    let mut set = AdapterSet::new();
    for m in modules {
        set.insert(AdapterModule {
            site: m.site,
            mode: m.mode,
            a: take_matrix(&mut it, m.a)?,
            b: take_matrix(&mut it, m.b)?,
            core: m.core.map(|s| take_matrix(&mut it, s)).transpose()?,
            alpha: m.alpha,
            rank: m.rank,
        });
    }
    if let Some((r, c)) = *head {
        set.set_head(HeadDelta {
            weight: take_matrix(&mut it, (r, c))?,
            bias: take_matrix(&mut it, (1, c))?,
        })?;
    }
    finish(it)?;
    Ok(set)
}

pub fn encode_posterior(post: &SwagPosterior) -> Checkpoint {
    let mut floats = Vec::with_capacity(post.storage_len());
    floats.extend_from_slice(&post.mean);
    floats.extend_from_slice(&post.var);
    floats.extend_from_slice(post.dev.data());
    Checkpoint {
        metadata: Metadata::Posterior {
            dim: post.dim(),
            k_eff: post.k_eff(),
            normalization: post.normalization,
        },
        floats,
    }
}

pub fn decode_posterior(ck: &Checkpoint) -> Result<SwagPosterior> {
    let Metadata::Posterior {
        dim,
        k_eff,
        normalization,
    } = ck.metadata
    else {
        return Err(wrong_object("a posterior"));
    };
    let mut it = ck.floats.iter();
    let mean = take_matrix(&mut it, (1, dim))?.into_data();
    let var = take_matrix(&mut it, (1, dim))?.into_data();
    let dev = take_matrix(&mut it, (dim, k_eff))?;
    finish(it)?;
    Ok(SwagPosterior {
        mean,
        var,
        dev,
        normalization,
    })
}
