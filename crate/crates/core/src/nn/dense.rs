use crate::adapters::{AdapterGrads, AdapterSet, ParamId, SiteId};
use crate::error::Result;
use crate::linalg::Matrix;
use crate::rng::RngStream;

/// `y = x·W0 + b`, plus an adapter term when `site` has one in the set, or
/// the head delta when `head` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// in×out, frozen during fine-tuning.
    pub w0: Matrix,
    pub bias: Vec<f64>,
    pub site: Option<SiteId>,
    pub head: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct DenseTape {
    x: Matrix,
    adapter: Option<crate::adapters::AdapterCache>,
}

impl DenseLayer {
    pub fn new(w0: Matrix, bias: Vec<f64>) -> Self {
        debug_assert_eq!(w0.cols(), bias.len());
        Self {
            w0,
            bias,
            site: None,
            head: false,
        }
    }

    /// Gaussian init with variance `1/fan_in`, zero bias.
    pub fn random(fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        Self::new(
            Matrix::from_fn(fan_in, fan_out, |_, _| std * rng.normal()),
            vec![0.0; fan_out],
        )
    }

    pub fn with_site(mut self, site: SiteId) -> Self {
        self.site = Some(site);
        self
    }

    pub fn as_head(mut self) -> Self {
        self.head = true;
        self
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w0: Matrix::zeros(self.w0.rows(), self.w0.cols()),
            bias: vec![0.0; self.bias.len()],
            site: self.site,
            head: self.head,
        }
    }

    pub(crate) fn forward(&self, x: &Matrix, adapters: &AdapterSet) -> Result<(Matrix, DenseTape)> {
        let mut y = x.matmul(&self.w0)?;
        y.add_row_vector(&self.bias)?;
        let mut cache = None;
        if let Some(ad) = self.site.and_then(|s| adapters.get(&s)) {
            let (u, c) = ad.forward_cached(x)?;
            y.add_assign(&u)?;
            cache = Some(c);
        }
        if self.head {
            if let Some(h) = adapters.head() {
                y.add_assign(&x.matmul(&h.weight)?)?;
                y.add_row_vector(h.bias.data())?;
            }
        }
        Ok((
            y,
            DenseTape {
                x: x.clone(),
                adapter: cache,
            },
        ))
    }

    /// Backpropagates `dy`; returns `dL/dx` when `need_dx`.
    pub(crate) fn backward(
        &self,
        tape: &DenseTape,
        dy: &Matrix,
        adapters: &AdapterSet,
        grads: &mut AdapterGrads,
        full: Option<&mut DenseLayer>,
        need_dx: bool,
    ) -> Result<Option<Matrix>> {
        if let Some(g) = full {
            g.w0.add_assign(&tape.x.t_matmul(dy)?)?;
            for (b, s) in g.bias.iter_mut().zip(dy.column_sums()) {
                *b += s;
            }
        }
        let mut dx = if need_dx {
            Some(dy.matmul_t(&self.w0)?)
        } else {
            None
        };
        if let (Some(ad), Some(cache)) = (self.site.and_then(|s| adapters.get(&s)), &tape.adapter) {
            let d = ad.backward(cache, &tape.x, dy, grads)?;
            if let Some(dx) = dx.as_mut() {
                dx.add_assign(&d)?;
            }
        }
        if self.head {
            if let Some(h) = adapters.head() {
                if let Some(gw) = grads.get_mut(ParamId::HeadWeight) {
                    gw.add_assign(&tape.x.t_matmul(dy)?)?;
                }
                if let Some(gb) = grads.get_mut(ParamId::HeadBias) {
                    for (b, s) in gb.data_mut().iter_mut().zip(dy.column_sums()) {
                        *b += s;
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    dx.add_assign(&dy.matmul_t(&h.weight)?)?;
                }
            }
        }
        Ok(dx)
    }
}
