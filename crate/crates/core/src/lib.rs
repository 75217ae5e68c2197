#![cfg_attr(not(feature = "std"), no_std)]

//! Two-branch person re-identification network with part-level feature
//! resolution, built on an omni-scale residual trunk.
//!
//! The crate is `no_std` + `alloc`: it holds the tensor engine, the network,
//! every training objective, the identity-balanced sampler, augmentation on
//! in-memory images, the optimizer and schedule, and the retrieval metrics.
//! File formats, directory ingestion and the command line live in the
//! `plr-reid` companion crate.
//!
//! Layout of the network (feature maps for a 256×128 input):
//!
//! ```text
//! image ─ stem(7×7/2, maxpool/2) ─ conv2 ─ SAM ─ CAM ─ transition(/2)
//!       ─ conv3 ─ SAM ─ CAM ─ transition(/2)                 → 16×8 shared map
//!   ├─ global: conv4 ─ conv5 ─ global max pool               → f   (512)
//!   └─ local:  conv4 ─ conv5 ─ 4 stripe average pools ─ concat → g (4·512)
//! descriptor = [f ‖ g]                                        → 2560
//! ```

extern crate alloc;

pub mod attention;
pub mod autograd;
pub mod backbone;
pub mod branches;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod losses;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
