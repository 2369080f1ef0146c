//! Channel-by-channel packing: slot `j*H*W + y*W + x` holds pixel (y, x) of
//! image j, one ciphertext per channel.

use hebatch::packing::{packed_slots, PackingLayout, TapOffset};
use hebatch::Image;

fn main() -> hebatch::Result<()> {
    let (h, w, batch) = (4, 4, 2);
    let layout = PackingLayout::new(64, h, w, batch)?;
    println!("n = {}, m = H*W = {}, {} images use {} slots", layout.n, layout.m(), batch, layout.occupied());
    println!("max batch for 32x32 at n = 16384: {}", PackingLayout::max_batch(16384, 32, 32));

    let images: Vec<Image> = (0..batch)
        .map(|j| Image::new(2, h, w, (0..2 * h * w).map(|i| (100 * j + i) as f64).collect()))
        .collect::<hebatch::Result<_>>()?;
    let rows = packed_slots(&images, &layout)?;
    for (c, row) in rows.iter().enumerate() {
        println!("channel {c}: {:?}", &row[..layout.occupied()]);
    }

    println!("3x3 tap rotations at W = {w}:");
    for tap in TapOffset::all(3) {
        println!("  ({:>2}, {:>2}) -> {:>3}", tap.dy, tap.dx, tap.rotation(w));
    }
    Ok(())
}
