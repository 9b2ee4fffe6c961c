//! Heterogeneous graph adapter for few-shot tuning of frozen vision-language
//! embeddings.
//!
//! A task is a set of class prompt embeddings (positive, and optionally
//! negative "a photo of no ..." prompts) plus a few labeled image embeddings
//! per class. [`graph::HeteroGraph`] links them through six cosine relations;
//! [`adapter`] refines every node with three small projections trained by
//! [`train`] against the text and cache classifiers in [`loss`].
//!
//! ```
//! use hegraph_core::{generate, train, SyntheticSpec, TrainConfig};
//!
//! let task = generate(&SyntheticSpec { classes: 3, shots: 2, dim: 8, ..SyntheticSpec::default() })?;
//! let graph = task.graph()?;
//! let test = task.test_set()?;
//! let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
//! let ck = train(&graph, &cfg, Some(&test))?;
//! assert_eq!(ck.epoch, 2);
//! # Ok::<(), hegraph_core::Error>(())
//! ```

pub mod adapter;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod loss;
pub mod optim;
pub mod par;
pub mod synth;
pub mod tensor;
pub mod train;

pub use adapter::{forward, forward_planned, AdapterOutput, AdapterWeights, MetaPathWeights, Mode, StagePlan};
pub use error::{Error, Result};
pub use graph::{build_relations, ClassManifest, HeteroGraph, RelationKind, RelationMatrix};
pub use io::{load_checkpoint, load_task, read_hgaf, save_checkpoint, write_hgaf, LoadedTask, TaskManifest};
pub use loss::{fused_inference, total_loss, LossBreakdown, LossConfig};
pub use optim::{AdamWConfig, OptimState, Schedule};
pub use synth::{generate, SyntheticSpec, SyntheticTask};
pub use tensor::{EmbeddingMatrix, Matrix};
pub use train::{evaluate, evaluate_zero_shot, train, Checkpoint, EvalReport, Profile, TestSet, TrainConfig, Trainer, Variant};
