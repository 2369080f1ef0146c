//! Writes a runnable CLI demo: a config, a weights directory and an input
//! file for the small network. Pass a target directory (default `demo`).
//!
//! ```text
//! cargo run --example weights_io -- demo
//! cargo run --release -- verify --config demo/run.toml --weights demo/weights --inputs demo/inputs.csv
//! ```

use std::path::PathBuf;

use hebatch::model::io::{load_weights, save_inputs, save_weights, write_text, BatchSection, RunConfig};
use hebatch::model::{Architecture, NetworkDef};
use hebatch::{EngineParams, Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> hebatch::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "demo".into()));
    let arch = Architecture::tiny();
    let cfg = RunConfig {
        he: EngineParams::new(1024),
        model: arch.clone(),
        batch: BatchSection { target: 16, workers: 2 },
        activation: Default::default(),
        bootstrap: Default::default(),
        base_dir: dir.clone(),
    };
    write_text(&dir.join("run.toml"), &cfg.to_toml()?)?;

    let net = NetworkDef::random(&arch, 1)?;
    save_weights(&dir.join("weights"), &net)?;
    let reloaded = load_weights(&dir.join("weights"), &arch)?;
    assert_eq!(reloaded.head, net.head);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let [c, h, w] = arch.input;
    let images: Vec<Image> = (0..cfg.batch.target)
        .map(|_| Image::new(c, h, w, (0..c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect()))
        .collect::<hebatch::Result<_>>()?;
    save_inputs(&dir.join("inputs.csv"), &images)?;

    println!("wrote {}/run.toml, {}/weights/ ({} layers + fc), {}/inputs.csv", dir.display(), dir.display(), net.conv_layers().len(), dir.display());
    println!("{}", cfg.to_toml()?);
    Ok(())
}
