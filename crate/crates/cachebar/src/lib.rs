//! Deterministic simulator and analysis toolkit for last-level-cache
//! side-channel defenses.
//!
//! The library models a defense that combines copy-on-access management of
//! cross-domain shared pages (against Flush-Reload) with probabilistic
//! per-domain cacheability budgets (against Prime-Probe), and provides the
//! tooling to analyze it:
//!
//! - [`cache`]: set-associative LLC model with per-set LRU and page colors.
//! - [`lifecycle`]: the copy-on-access page state machine, counter table,
//!   original/copy lists, periodic daemons, KSM-style merging and
//!   memory-footprint accounting.
//! - [`checker`]: exhaustive-state verification of the two-domain
//!   non-interference property, with counterexample traces.
//! - [`cacheability`]: per-(domain, color) cacheable queues enforcing line
//!   budgets.
//! - [`sim`]: the integrated machine (cache + lifecycle + queues) with the
//!   combined reserved-bit fault handler.
//! - [`optimizer`]: eviction distributions, security/performance objectives
//!   and the budget-distribution optimization.
//! - [`attack`]: simulated Flush-Reload and Prime-Probe adversaries plus a
//!   naive Bayes demand classifier.
//! - [`config`], [`report`], [`driver`]: experiment configs, reproducible
//!   reports and the named experiment pipelines behind the CLI verbs.
//!
//! Every experiment is a pure function of its configuration and seed; see
//! the `examples/` directory for one runnable program per capability.

pub mod attack;
pub mod cache;
pub mod config;
pub mod driver;
pub mod report;
pub mod checker;
pub mod cacheability;
pub mod lifecycle;
pub mod optimizer;
pub mod sim;
pub mod trace;

pub use cache::{AccessResult, BlockAddr, Cache, CacheGeometry, DomainId, GeometryError, PageId};
pub use lifecycle::{AccessKind, LifecycleConfig, PageState, PageTable, VPage};
