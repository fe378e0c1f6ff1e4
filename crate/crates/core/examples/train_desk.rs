//! Trains the desk configuration on a small synthetic set and reports
//! training-set metrics.
//!
//!     cargo run --release --example train_desk -- [steps] [seed]

use std::time::Instant;

use gsrtr::evaluate::evaluate;
use gsrtr::model::{Model, ModelConfig};
use gsrtr::ontology::{generate_synthetic, required_channels, synthetic_space, GridShape};
use gsrtr::optim::OptimizerConfig;
use gsrtr::train::{train, TrainConfig};

fn main() -> gsrtr::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map(|s| s.parse().expect("steps")).unwrap_or(500);
    let seed: u64 = args.next().map(|s| s.parse().expect("seed")).unwrap_or(7);

    let space = synthetic_space(8, 6, 12, (1, 4), seed)?;
    let grid = GridShape::new(required_channels(&space), 4, 4);
    let samples = generate_synthetic(&space, 64, grid, seed)?;
    let data: Vec<_> = samples.iter().map(|s| (&s.annotation, &s.features)).collect();

    let config = ModelConfig::desk(grid.channels, grid.height, grid.width);
    let mut model = Model::new(config, &space, seed)?;
    println!("parameters: {}", model.count_parameters());

    let tcfg = TrainConfig {
        epochs: usize::MAX,
        batch_size: 16,
        seed,
        max_steps: Some(steps),
        optimizer: OptimizerConfig { lr: 1e-3, backbone_lr: 1e-4, clip_norm: 1.0, ..Default::default() },
        ..Default::default()
    };
    let t = Instant::now();
    let report = train(&mut model, &space, &data, &tcfg)?;
    println!("{} steps in {:.1}s", report.steps, t.elapsed().as_secs_f64());
    for (e, b) in report.epochs.iter().enumerate().step_by(25) {
        println!("epoch {e:>3}  total {:.4}  verb {:.4}  noun {:.4}  giou {:.4}", b.total, b.verb, b.noun, b.giou);
    }

    let anns: Vec<_> = samples.iter().map(|s| s.annotation.clone()).collect();
    let records = model.predict_dataset(&space, &data, 5)?;
    let metrics = evaluate(&anns, &records, &space)?;
    print!("{}", metrics.to_table());
    Ok(())
}
