//! On-disk inputs: manifests, binary containers and the synthetic dataset
//! generator.

pub mod formats;
pub mod manifest;
pub mod synth;

pub use formats::{read_checkpoint, read_embedding, read_features, write_checkpoint, write_embedding, write_features};
pub use manifest::{load_manifest, Manifest, ManifestEntry};
pub use synth::{generate_synthetic, synthesize, SynthConfig, SynthSubject};

#[cfg(test)]
mod tests;
