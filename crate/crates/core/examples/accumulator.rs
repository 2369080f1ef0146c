//! Merging the compacted outputs of several passes into one ciphertext.

use hebatch::conv::{compact_strided, compaction_offsets};
use hebatch::engine::{Engine, EngineParams};
use hebatch::packing::PackingLayout;
use hebatch::pipeline::{accumulate, accumulator_offsets, block_mask};

fn main() -> hebatch::Result<()> {
    let layout = PackingLayout::new(64, 4, 4, 4)?;
    let small = layout.downsampled(2)?;
    let g = 4;
    let sts_prime = small.occupied();
    println!("each pass fills {} slots; after stride 2 it fills {sts_prime}", layout.occupied());

    let mut engine = Engine::new(EngineParams::new(layout.n))?;
    engine.register_rotation_keys(compaction_offsets(&layout)?);
    engine.register_rotation_keys(accumulator_offsets(g, sts_prime));

    let mut passes = Vec::new();
    for pass in 0..g {
        let slots: Vec<f64> = (0..layout.occupied()).map(|i| (100 * pass + i) as f64).collect();
        passes.push(compact_strided(&engine, &engine.encrypt(&slots)?, &layout, 2)?);
    }
    let merged = accumulate(&engine, passes, sts_prime, &block_mask(sts_prime, layout.n)?)?;
    let out = engine.decrypt(&merged);
    for (i, block) in out.chunks(sts_prime).enumerate() {
        println!("block {i}: {:?}", block);
    }
    println!("live ciphertexts after merging: {}", engine.live_ciphertexts());
    Ok(())
}
