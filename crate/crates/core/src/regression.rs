//! Shared-trunk linear regression model with one module per feature block.
//!
//! The prediction is `Σ_k x_k · θ_k` over `blocks` feature blocks of `width`
//! features each. Every block weight is its own module, so a conflict
//! engineered into one block's targets stays confined to that module.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::registry::{AttentionRole, Component, ModuleKind, ModuleMeta, ModuleRegistry, RegistryBuilder};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct BlockRegression<T> {
    pub params: ParamStore<T>,
    blocks: Vec<ParamId>,
    width: usize,
}

impl<T: Scalar> BlockRegression<T> {
    pub fn new(blocks: usize, width: usize, seed: u64) -> Result<(Self, ModuleRegistry)> {
        if blocks == 0 {
            return Err(Error::config("blocks", "must be at least 1"));
        }
        if width == 0 {
            return Err(Error::config("width", "must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = Normal::new(0.0, 0.1).expect("valid normal");
        let mut params = ParamStore::new();
        let mut reg = RegistryBuilder::new(0);
        let mut ids = Vec::with_capacity(blocks);
        for k in 0..blocks {
            let data = (0..width).map(|_| T::from_f64(init.sample(&mut rng))).collect();
            let id = params.add(format!("trunk.{k}.weight"), Tensor::new(vec![width, 1], data)?);
            reg.push(
                ModuleMeta {
                    kind: ModuleKind::FfnW1,
                    layer_index: k as i32,
                    component: Component::Shared,
                    attention_role: AttentionRole::None,
                },
                &[id],
                &params,
            )?;
            ids.push(id);
        }
        let reg = reg.finish(&params)?;
        Ok((
            Self {
                params,
                blocks: ids,
                width,
            },
            reg,
        ))
    }

    pub fn blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Records `½ · mean((pred − y)²)` over a batch. `features` holds one row
    /// of `blocks · width` values per example.
    pub fn loss(&self, tape: &mut Tape<T>, features: &[&[f64]], targets: &[f64]) -> Result<Var> {
        let rows = features.len();
        let dim = self.blocks.len() * self.width;
        if rows == 0 || rows != targets.len() || features.iter().any(|f| f.len() != dim) {
            return Err(Error::Shape {
                op: "block_regression",
                detail: format!("{rows} feature rows of width {dim} vs {} targets", targets.len()),
            });
        }
        let mut pred: Option<Var> = None;
        for (k, id) in self.blocks.iter().enumerate() {
            let mut block = Vec::with_capacity(rows * self.width);
            for f in features {
                block.extend(f[k * self.width..(k + 1) * self.width].iter().map(|v| T::from_f64(*v)));
            }
            let x = tape.constant(Tensor::new(vec![rows, self.width], block)?);
            let w = tape.param(&self.params, *id);
            let y = tape.matmul(x, w)?;
            pred = Some(match pred {
                None => y,
                Some(acc) => tape.add(acc, y)?,
            });
        }
        let target = Tensor::from_f64(vec![rows, 1], targets)?;
        tape.mse(pred.expect("at least one block"), &target)
    }
}
