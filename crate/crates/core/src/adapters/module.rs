use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{
    contiguous_layout, AdapterMatrix, JointParamVector, LayoutEntry, ParamId, SiteId,
};
use crate::error::{Error, Result};
use crate::linalg::{truncated_svd, Matrix};
use crate::rng::RngStream;

/// Standard deviation of the LoRA `A` initialization.
pub const LORA_INIT_STD: f64 = 0.02;
pub const DEFAULT_ALPHA: f64 = 16.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AdapterMode {
    /// Trainable `A` (m×r) and `B` (r×n).
    Lora,
    /// Frozen SVD projectors `A`, `B` around a trainable r×r core.
    LoraXs,
}

/// One host weight's adaptation state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterModule {
    pub site: SiteId,
    pub mode: AdapterMode,
    pub a: Matrix,
    pub b: Matrix,
    /// Present only for [`AdapterMode::LoraXs`].
    pub core: Option<Matrix>,
    pub alpha: f64,
    pub rank: usize,
}

fn check_rank(m: usize, n: usize, r: usize) -> Result<()> {
    if r == 0 || r > m.min(n) {
        return Err(Error::invalid(format!(
            "adapter rank {r} out of range 1..={} for {m}x{n} weight",
            m.min(n)
        )));
    }
    Ok(())
}

impl AdapterModule {
    /// LoRA: `A ~ N(0, 0.02²)`, `B = 0`, so the initial update is zero.
    pub fn init_lora(
        site: SiteId,
        m: usize,
        n: usize,
        r: usize,
        alpha: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        check_rank(m, n, r)?;
        let a = Matrix::from_fn(m, r, |_, _| LORA_INIT_STD * rng.normal());
        Ok(Self {
            site,
            mode: AdapterMode::Lora,
            a,
            b: Matrix::zeros(r, n),
            core: None,
            alpha,
            rank: r,
        })
    }

    /// LoRA-XS: `A = U_r·diag(S_r)`, `B = V_rᵀ` from the truncated SVD of the
    /// host weight, and a zero core.
    pub fn init_lora_xs(site: SiteId, w0: &Matrix, r: usize, alpha: f64) -> Result<Self> {
        let (m, n) = w0.shape();
        check_rank(m, n, r)?;
        let svd = truncated_svd(w0, r)?;
        let a = Matrix::from_fn(m, r, |i, j| svd.u.get(i, j) * svd.s[j]);
        Ok(Self {
            site,
            mode: AdapterMode::LoraXs,
            a,
            b: svd.v.transpose(),
            core: Some(Matrix::zeros(r, r)),
            alpha,
            rank: r,
        })
    }

    pub fn host_shape(&self) -> (usize, usize) {
        (self.a.rows(), self.b.cols())
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn trainable(&self) -> &'static [AdapterMatrix] {
        match self.mode {
            AdapterMode::Lora => &[AdapterMatrix::A, AdapterMatrix::B],
            AdapterMode::LoraXs => &[AdapterMatrix::R],
        }
    }

    pub fn is_trainable(&self, which: AdapterMatrix) -> bool {
        self.trainable().contains(&which)
    }

    pub fn matrix(&self, which: AdapterMatrix) -> Option<&Matrix> {
        match which {
            AdapterMatrix::A => Some(&self.a),
            AdapterMatrix::B => Some(&self.b),
            AdapterMatrix::R => self.core.as_ref(),
        }
    }

    fn matrix_mut(&mut self, which: AdapterMatrix) -> Option<&mut Matrix> {
        match which {
            AdapterMatrix::A => Some(&mut self.a),
            AdapterMatrix::B => Some(&mut self.b),
            AdapterMatrix::R => self.core.as_mut(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.trainable()
            .iter()
            .map(|&w| self.matrix(w).map_or(0, Matrix::len))
            .sum()
    }

    /// The additive output term `(alpha/r)·x·A·R·B` (or `x·A·B` for LoRA),
    /// computed right-to-left through the rank-r bottleneck.
    pub fn update(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(x)?.0)
    }

    /// Explicit `(alpha/r)·A·R·B`. Materializes an m×n matrix; test use only.
    pub fn effective_update(&self) -> Matrix {
        let mid = match &self.core {
            Some(r) => self.a.matmul(r).expect("core shape"),
            None => self.a.clone(),
        };
        mid.matmul(&self.b)
            .expect("adapter shapes")
            .scale(self.scale())
    }

    pub(crate) fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, AdapterCache)> {
        let xa = x.matmul(&self.a)?;
        let mut out = match &self.core {
            Some(r) => xa.matmul(r)?.matmul(&self.b)?,
            None => xa.matmul(&self.b)?,
        };
        out.scale_in_place(self.scale());
        Ok((out, AdapterCache { xa }))
    }

    /// Accumulates requested gradients into `grads` and returns the
    /// contribution to `dL/dx`.
    pub(crate) fn backward(
        &self,
        cache: &AdapterCache,
        x: &Matrix,
        dy: &Matrix,
        grads: &mut AdapterGrads,
    ) -> Result<Matrix> {
        let s = self.scale();
        // g = dY·Bᵀ, batch×r
        let g = dy.matmul_t(&self.b)?;
        let id = |matrix| ParamId::Site {
            site: self.site,
            matrix,
        };
        match &self.core {
            Some(core) => {
                if let Some(dr) = grads.get_mut(id(AdapterMatrix::R)) {
                    dr.axpy(s, &cache.xa.t_matmul(&g)?)?;
                }
                let gr = g.matmul_t(core)?;
                let mut dx = gr.matmul_t(&self.a)?;
                dx.scale_in_place(s);
                Ok(dx)
            }
            None => {
                if let Some(da) = grads.get_mut(id(AdapterMatrix::A)) {
                    da.axpy(s, &x.t_matmul(&g)?)?;
                }
                if let Some(db) = grads.get_mut(id(AdapterMatrix::B)) {
                    db.axpy(s, &cache.xa.t_matmul(dy)?)?;
                }
                let mut dx = g.matmul_t(&self.a)?;
                dx.scale_in_place(s);
                Ok(dx)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct AdapterCache {
    xa: Matrix,
}

/// Trainable additive delta on the classification head. Only present when
/// the head is fine-tuned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadDelta {
    pub weight: Matrix,
    /// 1×classes.
    pub bias: Matrix,
}

impl HeadDelta {
    pub fn zeros(m: usize, n: usize) -> Self {
        Self {
            weight: Matrix::zeros(m, n),
            bias: Matrix::zeros(1, n),
        }
    }
}

/// Ordered collection of adapters (plus optional head delta) forming θ.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdapterSet {
    modules: BTreeMap<SiteId, AdapterModule>,
    head: Option<HeadDelta>,
}

impl AdapterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, module: AdapterModule) {
        self.modules.insert(module.site, module);
    }

    pub fn with_head_delta(mut self, m: usize, n: usize) -> Self {
        self.head = Some(HeadDelta::zeros(m, n));
        self
    }

    pub fn set_head(&mut self, head: HeadDelta) -> Result<()> {
        if head.bias.shape() != (1, head.weight.cols()) {
            return Err(Error::Shape {
                op: "set_head",
                left: (1, head.weight.cols()),
                right: head.bias.shape(),
            });
        }
        self.head = Some(head);
        Ok(())
    }

    pub fn get(&self, site: &SiteId) -> Option<&AdapterModule> {
        self.modules.get(site)
    }

    pub fn get_mut(&mut self, site: &SiteId) -> Option<&mut AdapterModule> {
        self.modules.get_mut(site)
    }

    pub fn head(&self) -> Option<&HeadDelta> {
        self.head.as_ref()
    }

    /// Modules in packing order.
    pub fn modules(&self) -> impl Iterator<Item = &AdapterModule> {
        self.modules.values()
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty() && self.head.is_none()
    }

    pub fn layout(&self) -> Vec<LayoutEntry> {
        let mut shapes = Vec::new();
        for m in self.modules.values() {
            for &w in m.trainable() {
                let mat = m.matrix(w).expect("trainable matrix present");
                shapes.push((
                    ParamId::Site {
                        site: m.site,
                        matrix: w,
                    },
                    mat.rows(),
                    mat.cols(),
                ));
            }
        }
        if let Some(h) = &self.head {
            shapes.push((ParamId::HeadWeight, h.weight.rows(), h.weight.cols()));
            shapes.push((ParamId::HeadBias, 1, h.bias.cols()));
        }
        contiguous_layout(shapes)
    }

    /// |θ|.
    pub fn param_count(&self) -> usize {
        self.layout().iter().map(LayoutEntry::len).sum()
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        match id {
            ParamId::Site { site, matrix } => {
                let m = self.modules.get(&site)?;
                if m.is_trainable(matrix) {
                    m.matrix(matrix)
                } else {
                    None
                }
            }
            ParamId::HeadWeight => self.head.as_ref().map(|h| &h.weight),
            ParamId::HeadBias => self.head.as_ref().map(|h| &h.bias),
        }
    }

    fn param_mut(&mut self, id: ParamId) -> Option<&mut Matrix> {
        match id {
            ParamId::Site { site, matrix } => {
                let m = self.modules.get_mut(&site)?;
                if m.is_trainable(matrix) {
                    m.matrix_mut(matrix)
                } else {
                    None
                }
            }
            ParamId::HeadWeight => self.head.as_mut().map(|h| &mut h.weight),
            ParamId::HeadBias => self.head.as_mut().map(|h| &mut h.bias),
        }
    }

    /// Flatten every trainable tensor into θ: sites ascending, each tensor
    /// column-stacked, head delta last.
    pub fn pack(&self) -> JointParamVector {
        let layout = self.layout();
        let mut values = Vec::with_capacity(layout.iter().map(LayoutEntry::len).sum());
        for e in &layout {
            values.extend(self.param(e.id).expect("layout id").vec());
        }
        JointParamVector { values, layout }
    }

    /// Write θ back into the trainable tensors.
    pub fn unpack(&mut self, theta: &[f64]) -> Result<()> {
        let layout = self.layout();
        let total: usize = layout.iter().map(LayoutEntry::len).sum();
        if theta.len() != total {
            return Err(Error::invalid(format!(
                "parameter vector length {} does not match layout length {total}",
                theta.len()
            )));
        }
        for e in &layout {
            let m = Matrix::from_vec(e.rows, e.cols, &theta[e.range()])?;
            *self.param_mut(e.id).expect("layout id") = m;
        }
        Ok(())
    }

    /// Zero-initialized gradient buffers for `ids` (all trainable when `None`).
    pub(crate) fn grad_buffers(&self, ids: Option<&[ParamId]>) -> Result<AdapterGrads> {
        let layout = self.layout();
        let mut map = BTreeMap::new();
        match ids {
            None => {
                for e in &layout {
                    map.insert(e.id, Matrix::zeros(e.rows, e.cols));
                }
            }
            Some(ids) => {
                for id in ids {
                    let e = layout
                        .iter()
                        .find(|e| e.id == *id)
                        .ok_or_else(|| Error::UnknownParam(id.to_string()))?;
                    map.insert(e.id, Matrix::zeros(e.rows, e.cols));
                }
            }
        }
        Ok(AdapterGrads { map, layout })
    }
}

/// Gradient buffers keyed by parameter, flattened in pack order.
#[derive(Debug, Clone)]
pub(crate) struct AdapterGrads {
    map: BTreeMap<ParamId, Matrix>,
    layout: Vec<LayoutEntry>,
}

impl AdapterGrads {
    pub(crate) fn get_mut(&mut self, id: ParamId) -> Option<&mut Matrix> {
        self.map.get_mut(&id)
    }

    pub(crate) fn into_joint(self) -> JointParamVector {
        let mut map = self.map;
        let shapes: Vec<_> = self
            .layout
            .iter()
            .filter(|e| map.contains_key(&e.id))
            .map(|e| (e.id, e.rows, e.cols))
            .collect();
        let layout = contiguous_layout(shapes);
        let mut values = Vec::with_capacity(layout.iter().map(LayoutEntry::len).sum());
        for e in &layout {
            values.extend(map.remove(&e.id).expect("present").vec());
        }
        JointParamVector { values, layout }
    }
}
