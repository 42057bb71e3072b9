//! Fusion quality metrics for a few candidate fusions of one synthetic
//! pair, plus the edge-preservation score on the standard edge test pair.

use fusewright::data::{generate, Image, SceneSpec};
use fusewright::metrics::{edge_test_pair, fusion_scores};

fn main() -> fusewright::Result<()> {
    let s = &generate(&SceneSpec::default(), 1)?[0];
    let (ir, vis) = (&s.ir, &s.vis);
    let avg = Image::new(ir.h, ir.w, ir.data.iter().zip(&vis.data).map(|(a, b)| 0.5 * (a + b)).collect())?;
    let max = Image::pixelwise_max(ir, vis)?;
    let flat = Image::filled(ir.h, ir.w, 0.5);
    for (name, f) in [("average", &avg), ("max", &max), ("constant", &flat), ("visible", vis)] {
        let m = fusion_scores(f, ir, vis)?;
        println!("{name:9} q_ce {:.4} q_mi {:.4} q_abf {:.4}", m.q_ce, m.q_mi, m.q_abf);
    }
    let (a, b) = edge_test_pair();
    println!("edge pair self-fusion q_abf {:.4}", fusion_scores(&a, &a, &a)?.q_abf);
    println!("edge pair constant q_abf {:.4}", fusion_scores(&Image::filled(a.h, a.w, 0.5), &a, &b)?.q_abf);
    Ok(())
}
