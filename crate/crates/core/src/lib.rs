//! Weakly supervised prediction of Hierarchical and Identical relations from
//! text events in an article to video events (shots) in its paired video.

pub mod commonsense;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod eventgraph;
mod jsonl;
pub mod merp;
pub mod nn;
mod parallel;
pub mod pipeline;
pub mod pseudolabel;
pub mod seeding;
pub mod synthetic;

pub use error::{Error, Result};
