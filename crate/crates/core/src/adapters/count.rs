//! Trainable-parameter accounting per method and architecture preset.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::module::AdapterMode;
use super::params::{SiteId, SiteKind};
use crate::error::{Error, Result};
use crate::nn::{MlpConfig, TransformerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "lora")]
    Lora,
    #[serde(rename = "lora-xs", alias = "lora_xs")]
    LoraXs,
    #[serde(rename = "swag-lora", alias = "swag_lora")]
    SwagLora,
    #[serde(rename = "b-lora-xs", alias = "b_lora_xs")]
    BLoraXs,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Lora,
        Method::LoraXs,
        Method::SwagLora,
        Method::BLoraXs,
    ];

    pub fn mode(self) -> AdapterMode {
        match self {
            Method::Lora | Method::SwagLora => AdapterMode::Lora,
            Method::LoraXs | Method::BLoraXs => AdapterMode::LoraXs,
        }
    }

    pub fn is_bayesian(self) -> bool {
        matches!(self, Method::SwagLora | Method::BLoraXs)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Lora => "lora",
            Method::LoraXs => "lora-xs",
            Method::SwagLora => "swag-lora",
            Method::BLoraXs => "b-lora-xs",
        }
    }

    /// Name used in the reference parameter table.
    pub fn display_name(self) -> &'static str {
        match self {
            Method::Lora => "LoRA",
            Method::LoraXs => "LoRA-XS",
            Method::SwagLora => "SWAG-LoRA",
            Method::BLoraXs => "B-LoRA-XS",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "lora" => Ok(Method::Lora),
            "lora-xs" => Ok(Method::LoraXs),
            "swag-lora" => Ok(Method::SwagLora),
            "b-lora-xs" => Ok(Method::BLoraXs),
            other => Err(Error::invalid(format!("unknown method {other:?}"))),
        }
    }
}

/// Architecture whose adapter sites are counted.
#[derive(Debug, Clone, PartialEq)]
pub enum ShapePreset {
    /// 24 layers, d=1024, FFN 4096. LoRA-family sites at Q,V; XS-family sites
    /// at Q, V, attention output and FFN output.
    RobertaLarge,
    Mlp(MlpConfig),
    Transformer(TransformerConfig),
}

impl ShapePreset {
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "roberta-large" | "roberta-large-count-only" => Ok(ShapePreset::RobertaLarge),
            "mlp" => Ok(ShapePreset::Mlp(MlpConfig::default())),
            "transformer" => Ok(ShapePreset::Transformer(TransformerConfig::default())),
            other => Err(Error::invalid(format!("unknown shape preset {other:?}"))),
        }
    }

    /// `(site, m, n)` for every adapted weight under `mode`.
    pub fn sites(&self, mode: AdapterMode) -> Vec<(SiteId, usize, usize)> {
        match self {
            ShapePreset::RobertaLarge => {
                let (d, ff) = (1024, 4096);
                let mut out = Vec::new();
                for layer in 0..24 {
                    out.push((SiteId::new(layer, SiteKind::Query), d, d));
                    out.push((SiteId::new(layer, SiteKind::Value), d, d));
                    if mode == AdapterMode::LoraXs {
                        out.push((SiteId::new(layer, SiteKind::AttnOut), d, d));
                        out.push((SiteId::new(layer, SiteKind::FcOut), ff, d));
                    }
                }
                out
            }
            ShapePreset::Mlp(c) => c.adapter_sites(),
            ShapePreset::Transformer(c) => c.adapter_sites(mode),
        }
    }
}

/// Trainable parameters: `Σ(m+n)r` for LoRA, `Σr²` for LoRA-XS, times `k+2`
/// for the SWAG variants (mean, diagonal variance, k deviation columns).
pub fn param_count(method: Method, preset: &ShapePreset, r: usize, k: usize) -> Result<u64> {
    if r == 0 {
        return Err(Error::invalid("rank must be positive"));
    }
    let base: u64 = preset
        .sites(method.mode())
        .iter()
        .map(|&(_, m, n)| match method.mode() {
            AdapterMode::Lora => ((m + n) * r) as u64,
            AdapterMode::LoraXs => (r * r) as u64,
        })
        .sum();
    Ok(if method.is_bayesian() {
        base * (k as u64 + 2)
    } else {
        base
    })
}

/// Count in the table's display units: millions with one decimal from 100k
/// up, otherwise whole thousands.
pub fn display_count(n: u64) -> String {
    if n >= 100_000 {
        format!("{:.1}M", n as f64 / 1e6)
    } else {
        format!("{}k", (n as f64 / 1e3).round() as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountRow {
    pub method: Method,
    pub r: usize,
    pub k: Option<usize>,
    pub params: u64,
    pub display: String,
}

/// The method/rank/k grid of the reference parameter table.
pub const REFERENCE_GRID: [(Method, usize, Option<usize>); 10] = [
    (Method::Lora, 2, None),
    (Method::Lora, 8, None),
    (Method::LoraXs, 8, None),
    (Method::LoraXs, 25, None),
    (Method::SwagLora, 2, Some(10)),
    (Method::SwagLora, 8, Some(10)),
    (Method::SwagLora, 8, Some(5)),
    (Method::BLoraXs, 8, Some(10)),
    (Method::BLoraXs, 25, Some(10)),
    (Method::BLoraXs, 25, Some(5)),
];

pub fn count_table(preset: &ShapePreset) -> Result<Vec<CountRow>> {
    REFERENCE_GRID
        .iter()
        .map(|&(method, r, k)| {
            let params = param_count(method, preset, r, k.unwrap_or(0))?;
            Ok(CountRow {
                method,
                r,
                k,
                params,
                display: display_count(params),
            })
        })
        .collect()
}
