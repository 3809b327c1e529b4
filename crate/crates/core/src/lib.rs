pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod stream;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod wsi;

pub use checkpoint::{
    checkpoint_dtype, load_any_checkpoint, load_checkpoint, save_any_checkpoint, save_checkpoint, AnyModel,
};
pub use error::{Error, Result};
pub use model::{build_triresnet, Classifier, FreezeState, TriResNet, BENIGN, MALIGNANT, NUM_STREAMS};
pub use nn::{Mode, Param, Parameterized};
pub use stream::{Scale, StreamConfig, StreamWeights};
pub use tensor::{DType, Element, Tape, Tensor, Var};
