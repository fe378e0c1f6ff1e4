//! Finite-difference check of every tape operation and of the full training
//! loss of a small model.

use gsrtr::loss::batch_loss;
use gsrtr::model::{Model, ModelConfig};
use gsrtr::ontology::{generate_synthetic, required_channels, synthetic_space, GridShape};
use gsrtr::tensor::{check_all_ops, grad_check_params};

fn main() -> gsrtr::Result<()> {
    for (name, r) in check_all_ops(1e-5, 1e-4)? {
        println!("{name:<16} rel {:.2e}  abs {:.2e}  {}", r.max_rel_err, r.max_abs_err, if r.passed { "ok" } else { "FAIL" });
    }

    let space = synthetic_space(4, 5, 6, (1, 3), 1)?;
    let grid = GridShape::new(required_channels(&space), 2, 3);
    let samples = generate_synthetic(&space, 3, grid, 1)?;
    let cfg = ModelConfig {
        d: 8,
        d_v: 4,
        d_r: 4,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ffn_dim: 16,
        ..ModelConfig::desk(grid.channels, grid.height, grid.width)
    };
    let model = Model::new(cfg, &space, 1)?;
    let batch: Vec<_> = samples.iter().map(|s| (&s.annotation, &s.features)).collect();
    let r = grad_check_params(&model.store, |g| Ok(batch_loss(g, &model, &space, &batch)?.0.total), 1e-5, 1e-4)?;
    println!("\ntotal loss: {} coordinates, worst {} rel {:.2e}, passed {}", r.checked, r.worst, r.max_rel_err, r.passed);
    Ok(())
}
