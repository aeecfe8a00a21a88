//! Post-hoc logit calibration for missingness bias.
//!
//! A frozen classifier evaluated on feature-ablated inputs tends to drift
//! toward some classes. This crate fits small affine maps `z -> Wz + b` on the
//! classifier's logits so that predictions on ablated inputs line up with the
//! classifier's own predictions on the corresponding clean inputs, and
//! provides everything needed to measure whether that worked:
//!
//! - [`calib`]: logits, probabilities, the affine calibrator map, cross-entropy and KL.
//! - [`fit`]: the calibration objective, its analytic gradient, Adam fitting and
//!   rate-conditioned ensembles.
//! - [`ablation`]: feature masks, imputation policies and paired clean/ablated datasets.
//! - [`models`]: desk-scale classifiers, datasets and the retrain-on-ablations baseline.
//! - [`metrics`]: missingness bias, accuracy curves, sufficiency and sensitivity.
//! - [`explain`]: LIME-style and KernelSHAP-style attributions plus an exact Shapley oracle.

pub mod ablation;
pub mod calib;
pub mod error;
pub mod explain;
pub mod fit;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod rng;

pub use error::{Error, Result};
