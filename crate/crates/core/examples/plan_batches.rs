//! The batch planner: merge factors, per-stage layouts and rotation keys for
//! several targets, plus the ways a target gets rejected.

use hebatch::model::Architecture;
use hebatch::pipeline::plan;

fn main() {
    let resnet20 = Architecture::resnet20([16, 32, 64], 10);
    for (n, target) in [(16384, 16), (16384, 64), (16384, 256), (32768, 512)] {
        match plan(&resnet20, n, target) {
            Ok(p) => {
                println!("ResNet-20, n = {n}, target {target}:");
                print!("{}", p.describe());
                println!("  planned key loads {}, max resident {}\n", p.planned_key_loads(), p.max_resident_keys());
            }
            Err(e) => println!("n = {n}, target {target}: {e}"),
        }
    }

    let resnet34 = Architecture::resnet34_style([32, 64, 64, 64], 100);
    if let Ok(p) = plan(&resnet34, 16384, 128) {
        let g: Vec<usize> = p.stages.iter().skip(1).map(|s| s.g).collect();
        let runs: Vec<usize> = p.stages.iter().map(|s| s.runs).collect();
        println!("ResNet-34 style, target 128: merge factors {g:?}, stage runs {runs:?}");
    }
    for (arch, target) in [(&resnet34, 256), (&resnet20, 1000), (&resnet20, 80)] {
        if let Err(e) = plan(arch, 16384, target) {
            println!("rejected: {e}");
        }
    }
}
