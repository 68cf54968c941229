//! Data machinery for long-document visual question answering.
//!
//! Modules map onto pipeline stages: [`corpus`] loads the page corpus,
//! [`genclient`] talks to generation services, [`cpt`] and [`sft`] build
//! training examples, [`longpo`] builds preference pairs and evaluates the
//! LongPO objective, [`schedule`] stages, orders and packs examples,
//! [`merge`] applies task vectors, [`evalagg`] scores and aggregates
//! benchmarks, and [`flagging`] drives the benchmark correction workflow.

pub mod corpus;
pub mod cpt;
pub mod evalagg;
pub mod example;
pub mod flagging;
pub mod genclient;
pub mod longpo;
pub mod merge;
pub mod schedule;
pub mod sft;
pub mod templates;
