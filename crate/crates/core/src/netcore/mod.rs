//! Dense ReLU networks: architecture, weights, forward pass, loss, SGD
//! training, the per-neuron particle view and checkpoints.

mod checkpoint;
mod model;
mod particles;
mod train;

pub(crate) use model::affine;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub(crate) use checkpoint::{read_json, write_json};
pub use model::{
    accuracy, cross_entropy, forward, forward_trace, per_sample_cross_entropy, relu, Dataset, ForwardTrace, MlpSpec,
    WeightVector,
};
pub use particles::{
    from_particle_matrix, from_particles, particle_dim, particle_matrix, permute_hidden, to_particles, Particle,
};
pub use train::{init_weights, loss_gradient, train_sgd, train_sgd_from, EpochStats, TrainConfig, TrainOutcome};
