//! Siamese patch-similarity network. Both branches share one set of weights;
//! a single branch doubles as the 512-D patch embedding.

mod checkpoint;
pub mod layers;
mod model;
mod train;

pub use checkpoint::{Checkpoint, EpochRecord};
pub use model::{ConvSpec, ModelSpec, Params, SiameseNet, CONV_LAYERS, EMBEDDING_DIM};
pub use train::{accuracy, mean_loss, train, Optimizer, TrainConfig};

use ndarray::Array2;

use crate::error::Result;

pub fn build_model(spec: &ModelSpec, patch_size: (usize, usize)) -> Result<SiameseNet> {
    SiameseNet::new(spec, patch_size)
}

pub fn embed_patch(checkpoint: &Checkpoint, patch: &Array2<u8>) -> Result<Vec<f32>> {
    checkpoint.embed_patch(patch)
}

pub fn embed_batch(checkpoint: &Checkpoint, patches: &[&Array2<u8>]) -> Result<Vec<Vec<f32>>> {
    checkpoint.embed_batch(patches)
}
