//! Prints the verb token's attention over the image grid and one role
//! query's cross-attention, then writes every map as CSV.

use gsrtr::model::{Model, ModelConfig};
use gsrtr::ontology::{generate_synthetic, required_channels, synthetic_space, GridShape};
use gsrtr::optim::OptimizerConfig;
use gsrtr::tensor::Tensor;
use gsrtr::train::{train, TrainConfig};

fn print_grid(title: &str, m: Option<Tensor>) {
    println!("{title}");
    let Some(m) = m else { return };
    for row in (0..m.rows()).map(|r| m.row(r)) {
        println!("  {}", row.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" "));
    }
}

fn main() -> gsrtr::Result<()> {
    let space = synthetic_space(4, 4, 6, (2, 3), 5)?;
    let grid = GridShape::new(required_channels(&space), 5, 5);
    let samples = generate_synthetic(&space, 32, grid, 5)?;
    let data: Vec<_> = samples.iter().map(|s| (&s.annotation, &s.features)).collect();
    let mut model = Model::new(ModelConfig::desk(grid.channels, grid.height, grid.width), &space, 5)?;
    let tcfg = TrainConfig {
        epochs: 40,
        batch_size: 8,
        seed: 5,
        optimizer: OptimizerConfig { lr: 1e-3, clip_norm: 1.0, ..Default::default() },
        ..Default::default()
    };
    train(&mut model, &space, &data, &tcfg)?;

    let s = &samples[0];
    let verb = space.verb_id(&s.annotation.verb).expect("known verb");
    let trace = model.extract_attention(&space, &s.features, verb, &s.annotation.image_id)?;
    println!("{} ({})", s.annotation.image_id, s.annotation.verb);
    for r in &s.annotation.roles {
        println!("  {:<6} box {:?}", r.role, r.bbox.map(|b| b.to_array()));
    }
    let last = model.config.encoder_layers - 1;
    print_grid(&format!("verb token, encoder layer {last}, head 0"), trace.verb_token_map(last, 0));
    let role = &s.annotation.roles[0].role;
    let last = model.config.decoder_layers - 1;
    print_grid(&format!("role {role}, decoder cross-attention layer {last}, head 0"), trace.role_map(last, 0, 0));

    let dir = std::env::temp_dir().join("gsrtr-attention");
    let files = trace.write_dir(&dir)?;
    println!("wrote {} files to {}", files.len(), dir.display());
    Ok(())
}
