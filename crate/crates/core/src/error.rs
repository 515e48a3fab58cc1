use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // dataset
    #[error("instance `{instance}` has {found} train images, expected exactly {expected}")]
    MissingTrainImages {
        instance: String,
        found: usize,
        expected: usize,
    },
    #[error("instance `{instance}` has {found} test images, need at least {min}")]
    InsufficientTestImages {
        instance: String,
        found: usize,
        min: usize,
    },
    #[error("mask for `{image}` is {mask_h}x{mask_w}, image is {img_h}x{img_w}")]
    MaskShapeMismatch {
        image: String,
        mask_h: usize,
        mask_w: usize,
        img_h: usize,
        img_w: usize,
    },
    #[error("malformed annotation: {0}")]
    MalformedAnnotation(String),
    #[error("cannot hold out {requested} of {available} instances")]
    TooFewInstances { requested: usize, available: usize },
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("unknown instance `{0}`")]
    UnknownInstance(String),
    #[error("instance `{0}` has train images without masks")]
    MissingMasks(String),

    // generation
    #[error("template `{0}` does not contain the <new1> token exactly once")]
    MissingIdentifierToken(String),
    #[error("template `{0}` is empty once the identifier is removed")]
    MalformedTemplate(String),
    #[error("scaled foreground {fg_h}x{fg_w} does not fit in {bg_h}x{bg_w} background")]
    ForegroundTooLarge {
        fg_h: usize,
        fg_w: usize,
        bg_h: usize,
        bg_w: usize,
    },
    #[error("background backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("requested {requested} source images, only {available} available")]
    InsufficientSourceImages { requested: usize, available: usize },
    #[error("timestep {t} outside schedule of length {len}")]
    InvalidTimestep { t: usize, len: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mask prediction failed for `{image}`: {reason}")]
    MaskerFailure { image: String, reason: String },
    #[error("external generator: {0}")]
    ExternalGeneratorError(String),

    // encoder
    #[error("encoder `{0}` is not available")]
    EncoderUnavailable(String),
    #[error("encoder produced a non-finite value")]
    NonFiniteOutput,
    #[error("encoder has no linear map named `{0}`")]
    UnknownTargetMap(String),
    #[error("malformed adapter checkpoint: {0}")]
    BadCheckpoint(String),

    // training
    #[error("synthetic pool has no positives")]
    EmptyPool,
    #[error("need {needed} negatives per anchor, pool has {available}")]
    InsufficientNegatives { needed: usize, available: usize },
    #[error("feature dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("cross-entropy loss needs a classifier head")]
    MissingHead,
    #[error("loss needs at least one positive")]
    EmptyPositives,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize, trace: Vec<f64> },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    // evaluation
    #[error("no positive labels")]
    NoPositives,
    #[error("no negative examples for one-vs-all classification")]
    NoNegatives,
    #[error("retrieval set is empty")]
    EmptyRetrievalSet,
    #[error("retrieval set has no relevant item for the query")]
    EmptyRelevance,
    #[error("no patch cell is more than half covered by the mask")]
    EmptyMaskAfterDownscale,
    #[error("confidence map is constant")]
    ConstantMap,
    #[error("predictions and ground truth cover different images")]
    MismatchedImageSets,

    // analysis
    #[error("pool has {0} positives, need at least 2")]
    PoolTooSmall(usize),

    // orchestration
    #[error("runs are not comparable: {0}")]
    IncompatibleRuns(String),
    #[error("stage `{stage}` failed for `{instance}`: {source}")]
    Stage {
        stage: String,
        instance: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
