//! XSurv: joint tumor segmentation and survival prediction from PET-CT volumes.
//!
//! The network is an X-shape merging-diverging hybrid transformer: a dual-branch
//! encoder fuses PET and CT features through hybrid parallel cross-attention, and
//! a dual-branch decoder diverges skip features into primary-tumor and lymph-node
//! streams through region-specific attention gates. Training is multi-task
//! (Dice + Focal segmentation losses plus a discrete-time survival likelihood),
//! and the predicted survival score can be enhanced post hoc with radiomics
//! features through CoxPH + LASSO.
//!
//! Everything runs on the CPU on top of a small reverse-mode tensor engine
//! ([`tensor`]), so the whole pipeline is testable at desk scale against a
//! synthetic phantom benchmark with known survival ground truth ([`data`]).
//!
//! Entry points:
//! - [`model::XSurv`] — build/forward the network, all ablation variants
//! - [`train::train`] — the training loop with balanced batching
//! - [`survival`] / [`segmentation`] — losses and metrics
//! - [`stats`] — CoxPH, significance screening, LASSO selection, enhancement
//! - [`radiomics`] — feature extraction from predicted lesion masks
//! - [`cli`] — the `xsurv` binary's subcommands
//!
//! See the `examples/` directory for one runnable example per capability.

pub mod blocks;
pub mod cli;
pub mod data;
pub mod model;
pub mod radiomics;
pub mod segmentation;
pub mod stats;
pub mod survival;
pub mod tensor;
pub mod train;
pub mod verify;
