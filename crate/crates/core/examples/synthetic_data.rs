//! Generates a synthetic frame space and dataset, writes them to disk in the
//! formats the CLI reads, and loads them back.
//!
//!     cargo run --example synthetic_data -- [out_dir]

use std::path::PathBuf;

use gsrtr::container::{self, DType};
use gsrtr::ontology::{
    generate_synthetic, load_dataset, required_channels, save_dataset, synthetic_space, FeatureStore, FrameSpace,
    GridShape, SituationAnnotation,
};

fn main() -> gsrtr::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("gsrtr-synthetic"));
    std::fs::create_dir_all(&out).map_err(|e| gsrtr::Error::InvalidArgument(e.to_string()))?;

    let space = synthetic_space(6, 5, 10, (1, 3), 42)?;
    let grid = GridShape::new(required_channels(&space), 4, 4);
    let samples = generate_synthetic(&space, 24, grid, 42)?;

    for v in 0..space.num_verbs() {
        println!("{:<8} {:?}", space.verb_name(v), space.frame_names(v));
    }
    let first = &samples[0].annotation;
    println!("\n{} is \"{}\" ({}x{} px)", first.image_id, first.verb, first.width, first.height);
    for r in &first.roles {
        println!("  {:<8} {:?} box {:?}", r.role, r.nouns, r.bbox.map(|b| b.to_array()));
    }

    space.save(&out.join("space.json"))?;
    let arrays: Vec<_> = samples.iter().map(|s| (s.annotation.image_id.clone(), s.features.to_tensor())).collect();
    container::write(&out.join("features.gsra"), &arrays, DType::F32)?;
    let anns: Vec<SituationAnnotation> = samples
        .iter()
        .map(|s| SituationAnnotation { features: Some("features.gsra".into()), ..s.annotation.clone() })
        .collect();
    save_dataset(&out.join("dataset.jsonl"), &anns)?;

    let space = FrameSpace::load(&out.join("space.json"))?;
    let back = load_dataset(&out.join("dataset.jsonl"), &space)?;
    let features = FeatureStore::load_for(&back, &out)?;
    let diff = samples
        .iter()
        .flat_map(|s| {
            let g = features.get(&s.annotation.image_id).expect("stored");
            s.features.values.iter().zip(&g.values).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>()
        })
        .fold(0.0, f64::max);
    println!("\nreloaded {} images from {}; max f32 round-off {diff:.1e}", back.len(), out.display());
    Ok(())
}
