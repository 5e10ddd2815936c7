//! Speaker-corpus construction over pre-extracted embeddings.
//!
//! The pipeline filters crawled videos, turns diarizer segments into
//! utterances, clusters them into speakers per playlist, cleanses clusters
//! using audio and face cohesion, merges speakers across playlists, assigns
//! genres, and finally builds speaker-disjoint verification trials and
//! genre-resolved EER reports.

// `!(x > y)` comparisons are deliberate: they reject NaN along with the out-of-range case.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cleanse;
pub mod cluster;
pub mod combine;
pub mod config;
pub mod embedding;
pub mod evalkit;
pub mod genre;
pub mod manifest;
pub mod par;
pub mod pipeline;
pub mod synth;
