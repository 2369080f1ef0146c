//! A 3x3 convolution over a batch of packed images, stride 1 and stride 2,
//! checked against the plaintext reference.

use hebatch::conv::{compaction_offsets, conv_forward_with_layout, conv_keys, ConvSpec};
use hebatch::engine::{Engine, EngineParams};
use hebatch::model::reference::conv2d;
use hebatch::packing::{pack_inputs, unpack_outputs, PackingLayout};
use hebatch::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> hebatch::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (c_in, c_out, h, w, batch) = (3, 4, 8, 8, 4);
    let layout = PackingLayout::new(256, h, w, batch)?;
    let images: Vec<Image> = (0..batch)
        .map(|_| Image::new(c_in, h, w, (0..c_in * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect::<hebatch::Result<_>>()?;

    for stride in [1, 2] {
        let weights = (0..c_out * c_in * 9).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let spec = ConvSpec::new(c_in, c_out, 3, stride, weights, vec![0.1; c_out])?;

        let mut engine = Engine::new(EngineParams::new(layout.n))?;
        engine.register_rotation_keys(conv_keys(w, 3)?);
        if stride == 2 {
            engine.register_rotation_keys(compaction_offsets(&layout)?);
        }
        let inputs = pack_inputs(&engine, &images, &layout)?;
        let before = engine.snapshot_counters();
        let (outputs, out_layout) = conv_forward_with_layout(&engine, &inputs, &spec, &layout)?;
        let cost = engine.snapshot_counters().since(&before);

        let mut worst = 0.0f64;
        for (o, ct) in outputs.iter().enumerate() {
            let planes = unpack_outputs(&engine, ct, &out_layout);
            for (j, img) in images.iter().enumerate() {
                let want = conv2d(img, &spec);
                for (a, b) in planes[j].iter().zip(want.channel(o)) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
        println!(
            "stride {stride}: {}x{} -> {}x{}, {} rotations, {} plain mults for {batch} images, max deviation {worst:e}",
            h, w, out_layout.height, out_layout.width, cost.rotations, cost.plain_mults
        );
        println!("  rotation offsets used: {:?}", engine.used_offsets());
    }
    Ok(())
}
