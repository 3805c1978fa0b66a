//! Three-layer MLP projecting encoder states into the LM embedding space.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::Scalar;

/// Number of affine layers. Fixed.
pub const ADAPTOR_LAYERS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptorConfig {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
}

impl AdaptorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.hidden_dim == 0 || self.out_dim == 0 {
            return Err(Error::config("adaptor dimensions must be positive"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (i, h, o) = (self.in_dim, self.hidden_dim, self.out_dim);
        i * h + h + h * h + h + h * o + o
    }
}

/// affine → GELU → affine → GELU → affine.
#[derive(Clone, Debug)]
pub struct Adaptor {
    pub cfg: AdaptorConfig,
    pub layers: [Linear; ADAPTOR_LAYERS],
}

impl Adaptor {
    pub fn build<T: Scalar>(cfg: &AdaptorConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let (i, h, o) = (cfg.in_dim, cfg.hidden_dim, cfg.out_dim);
        Ok(Adaptor {
            cfg: cfg.clone(),
            layers: [
                Linear::new(store, rng, "adaptor.fc1", i, h)?,
                Linear::new(store, rng, "adaptor.fc2", h, h)?,
                Linear::new(store, rng, "adaptor.fc3", h, o)?,
            ],
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var) -> Result<Var> {
        let shape = g.shape(z);
        if shape.len() != 2 || shape[1] != self.cfg.in_dim {
            return Err(Error::shape(format!(
                "adaptor expects [T′ × {}], got {shape:?}",
                self.cfg.in_dim
            )));
        }
        let mut x = z;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x)?;
            if i + 1 < ADAPTOR_LAYERS {
                x = g.gelu(x);
            }
        }
        Ok(x)
    }
}
