//! Slot arithmetic, rotation keys, levels and the operation counters of the
//! simulated engine.

use hebatch::engine::{Engine, EngineParams, PlainVec};
use hebatch::Error;

fn main() -> hebatch::Result<()> {
    let mut engine = Engine::new(EngineParams::new(8))?;
    engine.register_rotation_keys([1, -2]);

    let a = engine.encrypt(&[1.0, 2.0, 3.0, 4.0])?;
    let b = engine.encrypt(&[10.0, 20.0, 30.0, 40.0])?;
    println!("a + b        = {:?}", engine.decrypt(&engine.add(&a, &b)?));
    println!("rot(a, 1)    = {:?}", engine.decrypt(&engine.rotate(&a, 1)?));
    println!("rot(a, -2)   = {:?}", engine.decrypt(&engine.rotate(&a, -2)?));

    let halves = PlainVec::constant(8, 0.5);
    let scaled = engine.mult_plain(&a, &halves)?;
    println!("a * 0.5      = {:?} at level {} (was {})", engine.decrypt(&scaled), scaled.level(), a.level());

    match engine.rotate(&a, 3) {
        Err(Error::MissingRotationKey(k)) => println!("rotation by {k} refused: no key"),
        other => println!("unexpected: {other:?}"),
    }

    let low = engine.encrypt_at(&[1.0], 0)?;
    if let Err(e) = engine.mult_plain(&low, &halves) {
        println!("level 0 product: {e}");
    }
    let fresh = engine.bootstrap(&low)?;
    println!("after bootstrap: level {}", fresh.level());

    let c = engine.snapshot_counters();
    println!(
        "counters: {} rotations, {} plain mults, {} adds, {} bootstraps, peak {} live",
        c.rotations, c.plain_mults, c.adds, c.bootstraps, c.peak_live_ciphertexts
    );
    Ok(())
}
