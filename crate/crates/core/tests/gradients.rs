mod common;

use common::gradsuite::{run, PRIMITIVES};

#[test]
fn every_primitive_passes_finite_differences() {
    let results = run(7);
    assert!(results.len() >= 100);
    let mut worst: Vec<(&str, f64)> = PRIMITIVES.iter().map(|p| (*p, 0.0)).collect();
    for r in &results {
        let slot = worst.iter_mut().find(|w| w.0 == r.primitive).unwrap();
        slot.1 = slot.1.max(r.rel_err);
        assert!(r.rel_err < 1e-3, "{} seed {:#x}: rel err {:.3e}", r.primitive, r.seed, r.rel_err);
    }
    for (p, e) in worst {
        println!("{p:<20} worst rel err {e:.2e}");
    }
}
