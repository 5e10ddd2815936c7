//! Writes the synthetic demo corpus and its config into a directory.
//!
//! cargo run --example make_fixture -- crates/core/fixtures/demo

use std::path::PathBuf;

use corpusforge::synth::{demo_corpus, DemoSpec};

fn main() -> std::io::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("fixtures/demo"));
    let corpus = demo_corpus(&DemoSpec::default());
    corpus.write_to(&dir)?;
    println!(
        "wrote {} videos, {} segments, {} audio and {} face embeddings to {}",
        corpus.videos.len(),
        corpus.segments.len(),
        corpus.audio.len(),
        corpus.face.len(),
        dir.display()
    );
    Ok(())
}
