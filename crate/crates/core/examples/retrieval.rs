//! Trains a small model, predicts every image and ranks images by grounded
//! similarity to a query.

use gsrtr::model::{Model, ModelConfig};
use gsrtr::ontology::{generate_synthetic, required_channels, synthetic_space, GridShape};
use gsrtr::optim::OptimizerConfig;
use gsrtr::retrieval::build_index;
use gsrtr::train::{train, TrainConfig};

fn main() -> gsrtr::Result<()> {
    let space = synthetic_space(6, 5, 8, (1, 3), 3)?;
    let grid = GridShape::new(required_channels(&space), 4, 4);
    let samples = generate_synthetic(&space, 48, grid, 3)?;
    let data: Vec<_> = samples.iter().map(|s| (&s.annotation, &s.features)).collect();

    let mut cfg = ModelConfig::desk(grid.channels, grid.height, grid.width);
    cfg.d = 32;
    cfg.d_v = 16;
    cfg.d_r = 16;
    cfg.ffn_dim = 64;
    let mut model = Model::new(cfg, &space, 3)?;
    let tcfg = TrainConfig {
        epochs: 60,
        batch_size: 16,
        seed: 3,
        optimizer: OptimizerConfig { lr: 2e-3, clip_norm: 1.0, ..Default::default() },
        ..Default::default()
    };
    train(&mut model, &space, &data, &tcfg)?;

    let records = model.predict_dataset(&space, &data, 5)?;
    let index = build_index(records)?;
    let probe = index.records()[0].clone();
    let top = probe.top1();
    println!("query {}: {} {:?}", probe.image_id, top.verb, top.roles.iter().map(|r| &r.noun).collect::<Vec<_>>());
    for (rank, hit) in index.query(&probe, 8)?.iter().enumerate() {
        let r = index.get(&hit.image_id).expect("indexed").top1();
        let nouns: Vec<&str> = r.roles.iter().map(|x| x.noun.as_str()).collect();
        println!("{:>2}. {:<10} {:.3}  {} {:?}", rank + 1, hit.image_id, hit.score, r.verb, nouns);
    }
    Ok(())
}
