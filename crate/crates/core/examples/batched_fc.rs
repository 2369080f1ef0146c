//! One fully connected layer applied to several images packed in one
//! ciphertext, input block `j` at slots `[j*D, j*D + d_in)`.

use hebatch::engine::{Engine, EngineParams};
use hebatch::fc::{fc_forward, fc_offsets, max_head_batch, FcLayout, FcSpec};

fn main() -> hebatch::Result<()> {
    let (n, batch, d_in, d_out) = (256, 6, 12, 10);
    let weights: Vec<f64> = (0..d_out * d_in).map(|i| ((i * 7) % 11) as f64 / 10.0 - 0.5).collect();
    let spec = FcSpec::new(d_in, d_out, weights, (0..d_out).map(|o| o as f64 / 10.0).collect())?;
    let layout = FcLayout::new(n, batch, d_in, d_out)?;
    println!("block stride D = {}, max head batch here = {}", layout.block, max_head_batch(n, d_in, d_out));

    let xs: Vec<Vec<f64>> = (0..batch).map(|j| (0..d_in).map(|i| (j + i) as f64 / 8.0).collect()).collect();
    let mut slots = vec![0.0; n];
    for (j, x) in xs.iter().enumerate() {
        slots[j * layout.block..j * layout.block + d_in].copy_from_slice(x);
    }

    let mut engine = Engine::new(EngineParams::new(n))?;
    engine.register_rotation_keys(fc_offsets(&layout));
    let ct = engine.encrypt(&slots)?;
    let out = engine.decrypt(&fc_forward(&engine, &ct, &spec, &layout)?);

    for (j, x) in xs.iter().enumerate() {
        let want = spec.apply_plain(x);
        let got = &out[j * d_out..(j + 1) * d_out];
        let dev = want.iter().zip(got).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!("image {j}: scores at slots {}..{}, max deviation {dev:e}", j * d_out, (j + 1) * d_out);
    }
    let c = engine.snapshot_counters();
    println!("{} rotations, {} plain mults for {batch} images", c.rotations, c.plain_mults);
    Ok(())
}
