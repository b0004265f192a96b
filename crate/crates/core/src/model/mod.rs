//! The full sequence model: encoder, RGRU, vector field, decoder and
//! classifier sharing one parameter store.

mod checkpoint;
pub mod cv;
mod eval;
mod forward;
mod loss;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use eval::{count_violations, evaluate, forecast, impute, ForecastPoint, ViolationCount};
pub use forward::{forward_sequence, ForwardTrace, TraceValues, VisitTrace};
pub use loss::{
    estimation_loss, focal_prediction_loss, monotonicity_penalty, monotonicity_value, total_loss, LossConfig,
    LossParts, MonotonicMode,
};
pub use train::{train, EpochStats, TrainConfig, TrainReport};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderParams, ShrinkageConfig};
use crate::error::{Error, Result};
use crate::imputation::{DecoderActivation, DecoderParams};
use crate::manifold::WfmNormalization;
use crate::ode::{SolverConfig, VectorFieldParams};
use crate::rgru::RgruParams;
use crate::tensor::{glorot_uniform, lower_len, Matrix, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_features: usize,
    pub n_classes: usize,
    /// Encoder output channels; the manifold dimension.
    pub channels: usize,
    pub encoder_hidden: usize,
    pub ode_hidden: usize,
    pub shrinkage: ShrinkageConfig,
    pub solver: SolverConfig,
    pub wfm_normalization: WfmNormalization,
    pub decoder_activation: DecoderActivation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_features: 9,
            n_classes: 3,
            channels: 32,
            encoder_hidden: 32,
            ode_hidden: 64,
            shrinkage: ShrinkageConfig::default(),
            solver: SolverConfig::default(),
            wfm_normalization: WfmNormalization::default(),
            decoder_activation: DecoderActivation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_features", self.n_features),
            ("n_classes", self.n_classes),
            ("channels", self.channels),
            ("encoder_hidden", self.encoder_hidden),
            ("ode_hidden", self.ode_hidden),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        self.shrinkage.validate()?;
        self.solver.validate()
    }
}

/// `softmax(W_y vec(Log_I H) + b_y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassifierParams {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub rgru: RgruParams,
    pub ode: VectorFieldParams,
    pub decoder: DecoderParams,
    pub classifier: ClassifierParams,
}

impl ModelParams {
    /// Fresh parameters; identical seeds give identical values.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.channels;
        let encoder = EncoderParams::init(&mut store, config.encoder_hidden, d, &mut rng);
        let rgru = RgruParams::init(&mut store, d, config.wfm_normalization, &mut rng);
        let ode = VectorFieldParams::init(&mut store, d, config.ode_hidden, &mut rng);
        let decoder = DecoderParams::init(&mut store, d, config.n_features, config.decoder_activation, &mut rng);
        let classifier = ClassifierParams {
            w: store.add("classifier.w", glorot_uniform(config.n_classes, lower_len(d), &mut rng)),
            b: store.add("classifier.b", Matrix::zeros(config.n_classes, 1)),
        };
        Ok(Self {
            config,
            store,
            encoder,
            rgru,
            ode,
            decoder,
            classifier,
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.store.num_scalars()
    }
}
