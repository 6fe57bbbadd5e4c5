use std::fmt;

use serde::{Deserialize, Serialize};

/// Kind of host weight an adapter is attached to. Declaration order is the
/// within-layer packing order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SiteKind {
    Query,
    Value,
    AttnOut,
    FcOut,
    /// Hidden dense layer of an MLP.
    Dense,
}

impl SiteKind {
    fn short(self) -> &'static str {
        match self {
            SiteKind::Query => "q",
            SiteKind::Value => "v",
            SiteKind::AttnOut => "attn_out",
            SiteKind::FcOut => "fc_out",
            SiteKind::Dense => "dense",
        }
    }
}

/// Adapter attachment point. Orders by layer, then kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SiteId {
    pub layer: usize,
    pub kind: SiteKind,
}

impl SiteId {
    pub fn new(layer: usize, kind: SiteKind) -> Self {
        Self { layer, kind }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "l{}.{}", self.layer, self.kind.short())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AdapterMatrix {
    A,
    B,
    R,
}

/// Identifies one trainable tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamId {
    Site { site: SiteId, matrix: AdapterMatrix },
    HeadWeight,
    HeadBias,
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamId::Site { site, matrix } => write!(f, "{site}.{matrix:?}"),
            ParamId::HeadWeight => write!(f, "head.weight"),
            ParamId::HeadBias => write!(f, "head.bias"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub id: ParamId,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flattened trainable parameters with their layout. Each tensor is stored
/// column-stacked (see [`crate::Matrix::vec`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointParamVector {
    pub values: Vec<f64>,
    pub layout: Vec<LayoutEntry>,
}

impl JointParamVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn offsets(&self) -> Vec<usize> {
        self.layout.iter().map(|e| e.offset).collect()
    }

    pub fn slice(&self, id: ParamId) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|e| e.id == id)
            .map(|e| &self.values[e.range()])
    }
}

/// Build a contiguous layout from `(id, rows, cols)` triples in order.
pub(crate) fn contiguous_layout(
    shapes: impl IntoIterator<Item = (ParamId, usize, usize)>,
) -> Vec<LayoutEntry> {
    let mut offset = 0;
    shapes
        .into_iter()
        .map(|(id, rows, cols)| {
            let e = LayoutEntry {
                id,
                rows,
                cols,
                offset,
            };
            offset += rows * cols;
            e
        })
        .collect()
}
