use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{op} at {shape} declares {required} bytes, over the budget of {budget} bytes")]
    ShapeTooLarge { op: String, shape: String, required: u64, budget: u64 },

    #[error("{path}: header `{found}` does not match the benchmark schema `{expected}`")]
    SchemaMismatch { path: String, found: String, expected: String },

    #[error("loss became non-finite at step {step} on the {path} path")]
    NonFiniteLoss { step: usize, path: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Kernel(#[from] fusekit::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;
