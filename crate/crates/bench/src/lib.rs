//! Fixtures shared by the benchmarks.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tinydeploy::frontend::Scenario;
use tinydeploy::ir::Graph;
use tinydeploy::pipeline::{compile, CompileOptions, Compiled};
use tinydeploy::target::TargetDescription;
use tinydeploy::zoo::{build_encoder_layer, sample_inputs};

/// Random allocation instance: `(spans, sizes)` of `n` buffers over
/// `steps` schedule steps.
pub fn random_instance(seed: u64, n: usize, steps: usize) -> (Vec<(usize, usize)>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spans = (0..n)
        .map(|_| {
            let a = rng.gen_range(0..steps);
            let b = rng.gen_range(0..steps);
            (a.min(b), a.max(b))
        })
        .collect();
    let sizes = (0..n).map(|_| rng.gen_range(1..=64)).collect();
    (spans, sizes)
}

pub fn siracusa() -> TargetDescription {
    TargetDescription::preset("siracusa-like").expect("built-in preset")
}

/// The encoder benchmark layer: hidden 64, 16 heads, feed-forward 256.
pub fn encoder(seq: usize) -> Graph {
    build_encoder_layer(64, 16, 256, seq).expect("valid encoder configuration")
}

pub fn compiled(g: &Graph, scenario: Scenario, double_buffer: bool) -> Compiled {
    let opts = CompileOptions {
        scenario,
        double_buffer,
        ..CompileOptions::default()
    };
    compile(g, &siracusa(), opts).expect("benchmark graph compiles")
}

/// Simulator inputs as raw bytes.
pub fn input_bytes(g: &Graph, seed: u64) -> BTreeMap<String, Vec<u8>> {
    sample_inputs(g, seed).into_iter().map(|(k, t)| (k, t.to_bytes())).collect()
}
