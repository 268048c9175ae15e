//! Attention-gated fusion of two encoder layers, with exact reverse-mode
//! gradients and a desk-scale harness for cross-lingual transfer experiments.

pub mod aif;
pub mod analysis;
pub mod bankio;
pub mod dlfa;
pub mod error;
pub mod gradcheck;
pub mod harness;
mod numeric;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{finite_difference_check, finite_difference_check_piecewise, CheckOptions, GradCheckReport, Parameterized};
pub use tape::{GradientTape, Gradients, Value, Var};
pub use tensor::{BatchNormState, BnMode, FeatureTensor, Matrix, Shape};
pub use aif::{
    aif_forward, aif_global_branch, aif_global_only, aif_local_branch, aif_local_only, init_aif,
    AifParameters, AifVariant, BranchKind, GateMode, InitScheme,
};
pub use dlfa::{build_dlfa_system, dlfa_forward, DlfaSystem, LayerPair};
pub use bankio::{read_bank, write_bank, load_params, save_params, LayerBank, Split, TaskFlavor};
pub use harness::{
    generate_task, layer_sweep, train, evaluate, ClassifierHead, FeatureSystem, Model, SweepReport,
    SyntheticTaskSpec, TrainConfig,
};
pub use analysis::{avg_cross_lingual_similarity, cosine_similarity, SimilarityReport};
