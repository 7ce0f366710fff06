//! Point-supervised temporal action localization.
//!
//! Two cascaded learning stages over pre-extracted snippet features:
//! snippet-level discrimination (class activation sequence + class-agnostic
//! attention, backed by a per-class prototype memory and attention blocks
//! that read it) and instance-level completeness learning over
//! point-anchored proposals (completeness score head + boundary regression
//! head). Detection assembly uses class-wise soft-NMS; evaluation reports
//! mAP over temporal-IoU thresholds. A seeded synthetic corpus generator
//! makes the whole pipeline runnable and checkable at desk scale.

pub mod autograd;
pub mod ckpt;
pub mod data;
pub mod error;
pub mod eval;
pub mod infer;
pub mod instance;
pub mod losses;
pub mod memory;
pub mod mining;
pub mod model;
pub mod pipeline;
pub mod proposals;
pub mod synth;
pub mod train_instance;
pub mod train_snippet;
pub mod viz;

pub use data::{Config, Corpus, Detection, GtInstance, PointAnnotation, Proposal, ProposalTag, VideoRecord};
pub use error::{Error, Result};
pub use memory::PrototypeMemory;
pub use mining::{generate_pseudo_snippets, PseudoSnippets};
pub use synth::{generate_corpus, sample_point, GenSpec, PointDistribution};
