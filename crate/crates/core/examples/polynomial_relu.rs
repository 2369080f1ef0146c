//! Composite odd-polynomial ReLU: fit, measured error, level cost, and the
//! encrypted evaluation compared with the exact function.

use hebatch::engine::{Engine, EngineParams};
use hebatch::nonlinear::{relu_one, ActivationConfig, DEFAULT_DEGREES};

fn main() -> hebatch::Result<()> {
    for bound in [4.0, 16.0, 40.0] {
        let cfg = ActivationConfig::polynomial(bound, &DEFAULT_DEGREES)?;
        println!(
            "B = {bound:>4}: degrees {:?}, max |relu - approx| on [-B, B] = {:.3e}, {} levels",
            cfg.degrees,
            cfg.measured_error(1 << 14),
            cfg.level_cost()
        );
    }

    let cfg = ActivationConfig::polynomial(8.0, &DEFAULT_DEGREES)?;
    let engine = Engine::new(EngineParams::new(16))?;
    let xs: Vec<f64> = (0..16).map(|i| i as f64 - 7.5).collect();
    let ct = engine.encrypt(&xs)?;
    let out = engine.decrypt(&relu_one(&engine, &ct, &cfg)?);
    for (x, y) in xs.iter().zip(&out).step_by(3) {
        println!("relu({x:>5.1}) ~ {y:>9.5}");
    }
    println!("levels {} -> {}", ct.level(), ct.level() - cfg.level_cost());

    let outside = engine.encrypt(&[20.0])?;
    relu_one(&engine, &outside, &cfg)?;
    println!("inputs beyond B seen: {}", engine.bound_exceeded_count());
    Ok(())
}
