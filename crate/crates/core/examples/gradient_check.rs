//! Tape gradients against central finite differences on random graphs that
//! mix matmul, inverse, layer norm, softmax and fake quantization.

use affinequant::autodiff::check_gradient_detailed;
use affinequant::autodiff::random::random_graph;

fn main() -> affinequant::Result<()> {
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let g = random_graph(seed);
        for leaf in &g.params {
            let c = check_gradient_detailed(&g.graph, &g.bindings, leaf, 1e-5)?;
            println!(
                "seed {seed:2} {leaf:8} rel err {:.2e} ({} checked, {} skipped at kinks)",
                c.max_rel_error, c.checked, c.skipped
            );
            worst = worst.max(c.max_rel_error);
        }
    }
    println!("worst {worst:.2e}");
    Ok(())
}
