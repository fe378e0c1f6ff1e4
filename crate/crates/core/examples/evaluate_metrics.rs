//! Scores hand-written predictions in the three evaluation settings.

use gsrtr::boxes::BoxXYXY;
use gsrtr::evaluate::{evaluate, score_sample};
use gsrtr::ontology::{FrameSpace, RoleEntry, SituationAnnotation};
use gsrtr::record::{PredictionRecord, RolePrediction, VerbEntry};

fn entry(verb: &str, roles: &[(&str, &str, Option<[f64; 4]>)]) -> VerbEntry {
    VerbEntry {
        verb: verb.into(),
        score: 0.0,
        roles: roles
            .iter()
            .map(|(r, n, b)| RolePrediction { role: r.to_string(), noun: n.to_string(), bbox: b.map(BoxXYXY::from_array) })
            .collect(),
    }
}

fn main() -> gsrtr::Result<()> {
    let space = FrameSpace::from_json(
        r#"{"verbs": {"chasing": {"roles": ["agent", "chasee", "place"]},
                      "eating":  {"roles": ["agent", "food"]}},
            "roles": ["agent", "chasee", "place", "food"],
            "nouns": ["lion", "zebra", "savanna", "grass", "cow"]}"#,
        "inline",
    )?;
    let ann = SituationAnnotation {
        image_id: "img1".into(),
        width: 200,
        height: 100,
        verb: "chasing".into(),
        roles: vec![
            RoleEntry { role: "agent".into(), nouns: ["lion", "lion", "cow"].map(String::from), bbox: Some(BoxXYXY::new(10.0, 20.0, 90.0, 80.0)) },
            RoleEntry { role: "chasee".into(), nouns: ["zebra"; 3].map(String::from), bbox: Some(BoxXYXY::new(110.0, 30.0, 190.0, 90.0)) },
            RoleEntry { role: "place".into(), nouns: ["savanna"; 3].map(String::from), bbox: None },
        ],
        features: None,
    };
    // Top-1 verb is wrong; the right verb is ranked second with a misplaced chasee box.
    let chasing = entry(
        "chasing",
        &[
            ("agent", "lion", Some([12.0, 18.0, 88.0, 82.0])),
            ("chasee", "zebra", Some([0.0, 0.0, 40.0, 40.0])),
            ("place", "savanna", None),
        ],
    );
    let record = PredictionRecord {
        image_id: "img1".into(),
        width: 200,
        height: 100,
        entries: vec![entry("eating", &[("agent", "lion", None), ("food", "zebra", None)]), chasing.clone()],
        gt_verb_entry: Some(chasing),
    };

    let scored = score_sample(&ann, &record)?;
    println!("verb top-1 ok: {}, top-5 ok: {}", scored.verb_top1_ok, scored.verb_top5_ok);
    for (role, s) in ann.roles.iter().zip(&scored.ground_truth) {
        println!("  {:<7} noun ok {:<5} box ok {}", role.role, s.noun_ok, s.box_ok);
    }
    let report = evaluate(&[ann], &[record], &space)?;
    println!("\n{}", report.to_table());
    Ok(())
}
