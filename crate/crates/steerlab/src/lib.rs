//! Desk-scale activation steering over a frozen toy transformer.
//!
//! The crate builds, end to end, the machinery for routed activation
//! steering:
//!
//! 1. pretrain a small decoder-only transformer on synthetic multi-skill
//!    tasks (with deliberate headroom between its zero-shot accuracy and its
//!    careful-mode ceiling),
//! 2. elicit a library of near-orthogonal steering directions from
//!    contrastive activation pairs (PCA analysis, k-means clustering,
//!    normalized cluster centroids),
//! 3. train a lightweight router (supervised warm-up from grid-searched
//!    oracle labels, then group-relative policy optimization) that reads the
//!    intervention-layer hidden state and composes library vectors into an
//!    additive intervention,
//! 4. evaluate conditions and ablations, and emit CSV/SVG reports.
//!
//! Every phase is a library call (see `examples/`), and the thin `steerlab`
//! binary exposes them as subcommands over one TOML config.

pub mod elicit;
pub mod error;
pub mod model;
pub mod optim;
pub mod tasks;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
