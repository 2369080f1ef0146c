//! Encrypted inference of a small residual network at three batch sizes,
//! with amortized costs and a check against the plaintext forward pass.
//!
//! `cargo run --release --example end_to_end -- polynomial` uses the
//! polynomial ReLU instead of the exact one.

use hebatch::engine::{Engine, EngineParams};
use hebatch::model::reference::{argmax, forward_plain, max_activation_input};
use hebatch::model::{Architecture, NetworkDef};
use hebatch::nonlinear::{ActivationConfig, DEFAULT_DEGREES};
use hebatch::pipeline::{infer, plan};
use hebatch::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> hebatch::Result<()> {
    let polynomial = std::env::args().nth(1).as_deref() == Some("polynomial");
    let arch = Architecture::tiny();
    let n = 1024;
    let mut net = NetworkDef::random(&arch, 2024)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let [c, h, w] = arch.input;
    let images: Vec<Image> = (0..64)
        .map(|_| Image::new(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect::<hebatch::Result<_>>()?;

    if polynomial {
        let bound = (1.25 * max_activation_input(&net, &images)).ceil();
        net = net.with_activation(ActivationConfig::polynomial(bound, &DEFAULT_DEGREES)?);
        println!("polynomial ReLU on [-{bound}, {bound}]");
    }

    for target in [4, 16, 64] {
        let p = plan(&arch, n, target)?;
        let batch = &images[..target];
        let mut engine = Engine::new(EngineParams::new(n))?;
        let out = infer(&mut engine, &net, &p, batch, 2)?;

        let mut worst = 0.0f64;
        let mut agree = 0;
        for (img, got) in batch.iter().zip(&out.scores) {
            let want = forward_plain(&net.clone().with_activation(ActivationConfig::exact()), img);
            worst = want.iter().zip(got).fold(worst, |m, (a, b)| m.max((a - b).abs()));
            agree += (argmax(&want) == argmax(got)) as usize;
        }
        println!("\n== batch {target} ==");
        print!("{}", out.report.table());
        println!("max deviation from plaintext {worst:e}, argmax agreement {agree}/{target}");
    }
    Ok(())
}
