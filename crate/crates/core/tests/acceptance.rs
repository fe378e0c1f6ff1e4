//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//!     cargo test --release --test acceptance

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use gsrtr::boxes::{giou_loss_term, BoxCXCYWH, BoxXYXY};
use gsrtr::evaluate::{evaluate, MetricsReport};
use gsrtr::loss::{batch_loss, box_regression_losses, combine, existence_loss, giou_terms, noun_loss, total_loss};
use gsrtr::model::{parameter_formula, LossWeights, Model, ModelConfig};
use gsrtr::ontology::{
    generate_synthetic, required_channels, synthetic_space, FeatureGrid, FrameSpace, GridShape, Sample, UNKNOWN_NOUN,
};
use gsrtr::retrieval::{build_index, grsitsim};
use gsrtr::tensor::{check_all_ops, grad_check_params, Graph, Rng, Tape, Tensor};
use gsrtr::train::{train, TrainReport};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn tiny(seed: u64) -> (FrameSpace, Vec<Sample>, Model) {
    let space = synthetic_space(4, 5, 6, (1, 3), seed).unwrap();
    let grid = GridShape::new(required_channels(&space), 2, 3);
    let samples = generate_synthetic(&space, 12, grid, seed).unwrap();
    let cfg = ModelConfig {
        d: 8,
        d_v: 4,
        d_r: 4,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ffn_dim: 16,
        grid_h: 2,
        grid_w: 3,
        channels: grid.channels,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, &space, seed).unwrap();
    (space, samples, model)
}

fn c1_gradients() -> Outcome {
    let t = Instant::now();
    let ops = check_all_ops(1e-5, 1e-4).map_err(|e| e.to_string())?;
    let worst_op = ops.iter().map(|(_, r)| r.max_rel_err).fold(0.0, f64::max);
    for (name, r) in &ops {
        ensure!(r.passed, "{name}: rel err {:.2e} at {}", r.max_rel_err, r.worst);
    }
    let (space, samples, model) = tiny(6);
    let batch: Vec<_> = samples.iter().take(3).map(|s| (&s.annotation, &s.features)).collect();
    let r = grad_check_params(&model.store, |g| Ok(batch_loss(g, &model, &space, &batch)?.0.total), 1e-5, 1e-4)
        .map_err(|e| e.to_string())?;
    ensure!(r.passed, "L_total: rel err {:.2e} at {}", r.max_rel_err, r.worst);
    let secs = t.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!(
        "{} ops max rel err {worst_op:.1e}; L_total over {} params max rel err {:.1e}; {secs:.1}s",
        ops.len(),
        r.checked,
        r.max_rel_err
    ))
}

fn run_desk(cfg: ModelConfig, steps: usize) -> Result<(TrainReport, MetricsReport), String> {
    let (space, samples) = common::desk_data(common::DESK_SEED);
    let data: Vec<_> = samples.iter().map(|s| (&s.annotation, &s.features)).collect();
    let mut model = Model::new(cfg, &space, common::DESK_SEED).map_err(|e| e.to_string())?;
    let report = train(&mut model, &space, &data, &common::desk_train_config(common::DESK_SEED, steps)).map_err(|e| e.to_string())?;
    let recs = model.predict_dataset(&space, &data, 5).map_err(|e| e.to_string())?;
    let anns: Vec<_> = samples.iter().map(|s| s.annotation.clone()).collect();
    let metrics = evaluate(&anns, &recs, &space).map_err(|e| e.to_string())?;
    Ok((report, metrics))
}

fn c2_learnability() -> Outcome {
    let t = Instant::now();
    let (space, _) = common::desk_data(common::DESK_SEED);
    let (report, m) = run_desk(common::desk_model_config(&space), common::DESK_STEPS)?;
    let secs = t.elapsed().as_secs_f64();
    let verb = m.top1.verb.unwrap();
    let value = m.ground_truth.value;
    let grounded = m.ground_truth.grounded_value;
    let summary = format!(
        "{} steps: top-1 verb {verb:.2}, gt value {value:.2}, gt grounded value {grounded:.2}; {secs:.1}s",
        report.steps
    );
    ensure!(report.steps == common::DESK_STEPS, "{summary}");
    ensure!(verb >= 95.0 && value >= 90.0 && grounded >= 70.0, "{summary}");
    ensure!(secs < 600.0, "{summary}");
    Ok(summary)
}

fn scalar(t: &Tape, v: gsrtr::tensor::Var) -> f64 {
    t.value(v).item()
}

/// Smoothed cross-entropy of one row, from the definition.
fn manual_ce(z: &[f64], gold: usize, eps: f64) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    let k = z.len() as f64;
    z.iter().enumerate().map(|(j, v)| -(if j == gold { 1.0 - eps + eps / k } else { eps / k }) * (v - lse)).sum()
}

fn c3_loss_formulas() -> Outcome {
    let tol = 1e-9;
    let mut t = Tape::new();
    let mut checks = 0;
    let mut near = |name: &str, got: f64, want: f64| -> Result<(), String> {
        checks += 1;
        if (got - want).abs() < tol {
            Ok(())
        } else {
            Err(format!("{name}: {got} vs {want}"))
        }
    };

    // Noun: two roles, three annotators, smoothing 0.2.
    let rows = vec![vec![1.5, -0.5, 0.25, 2.0], vec![0.0, 3.0, -1.0, 0.5]];
    let z = t.constant(Tensor::from_rows(&rows).unwrap()).unwrap();
    let labels = [Some([3, 0, 3]), Some([1, 1, 2])];
    let l = noun_loss(&mut t, z, &labels, &[0.5, 0.5], 0.2).unwrap();
    let oracle: f64 = (0..3).map(|a| (manual_ce(&rows[0], labels[0].unwrap()[a], 0.2) + manual_ce(&rows[1], labels[1].unwrap()[a], 0.2)) / 2.0).sum();
    near("noun two roles", scalar(&t, l), oracle)?;
    let same = noun_loss(&mut t, z, &[Some([3; 3]), Some([1; 3])], &[0.5, 0.5], 0.2).unwrap();
    near("noun identical annotators", scalar(&t, same), 3.0 * (manual_ce(&rows[0], 3, 0.2) + manual_ce(&rows[1], 1, 0.2)) / 2.0)?;

    // Existence.
    let p = t.constant(Tensor::from_rows(&[vec![0.9], vec![0.2]]).unwrap()).unwrap();
    let l = existence_loss(&mut t, p, &[1.0, 0.0], &[0.5, 0.5]).unwrap();
    near("existence (0.9, 0.2)", scalar(&t, l), (-(0.9f64).ln() - (0.8f64).ln()) / 2.0)?;
    let half = t.constant(Tensor::full(&[4, 1], 0.5)).unwrap();
    let l = existence_loss(&mut t, half, &[1.0, 0.0, 0.0, 1.0], &[0.25; 4]).unwrap();
    near("existence all 0.5", scalar(&t, l), 2f64.ln())?;

    // Boxes.
    let pred = t.constant(Tensor::from_rows(&[vec![0.5, 0.5, 0.5, 0.5]]).unwrap()).unwrap();
    let (l1, gi) = box_regression_losses(&mut t, pred, &[Some(BoxXYXY::new(0.0, 0.0, 1.0, 1.0))], &[1.0]).unwrap();
    near("L1 example", scalar(&t, l1), 1.0)?;
    near("GIoU example", scalar(&t, gi), 0.75)?;
    let exact = t.constant(Tensor::from_rows(&[vec![0.3, 0.4, 0.2, 0.6]]).unwrap()).unwrap();
    let (l1, gi) = box_regression_losses(&mut t, exact, &[Some(BoxCXCYWH::new(0.3, 0.4, 0.2, 0.6).to_xyxy())], &[1.0]).unwrap();
    near("L1 perfect", scalar(&t, l1), 0.0)?;
    near("GIoU perfect", scalar(&t, gi), 0.0)?;
    let (l1, gi) = box_regression_losses(&mut t, pred, &[None], &[0.0]).unwrap();
    near("L1 no grounded roles", scalar(&t, l1), 0.0)?;
    near("GIoU no grounded roles", scalar(&t, gi), 0.0)?;
    near(
        "GIoU disjoint",
        giou_loss_term(&BoxXYXY::new(0.0, 0.0, 1.0, 1.0), &BoxXYXY::new(2.0, 2.0, 3.0, 3.0)),
        16.0 / 9.0,
    )?;

    // GIoU term range, on the tape and off it.
    let mut rng = Rng::new(3);
    let rand_box = |rng: &mut Rng| {
        let (cx, cy) = (rng.uniform(), rng.uniform());
        let (w, h) = (rng.uniform_range(0.01, 1.0), rng.uniform_range(0.01, 1.0));
        BoxCXCYWH::new(cx, cy, w, h)
    };
    for _ in 0..1000 {
        let (a, b) = (rand_box(&mut rng), rand_box(&mut rng));
        let plain = giou_loss_term(&a.to_xyxy(), &b.to_xyxy());
        let v = t.constant(Tensor::from_rows(&[a.to_array().to_vec()]).unwrap()).unwrap();
        let taped = giou_terms(&mut t, v, &[b.to_xyxy().to_array()]).unwrap();
        let taped = t.value(taped).data()[0];
        ensure!((0.0..=2.0).contains(&plain) && (0.0..=2.0).contains(&taped), "GIoU term out of range: {plain} / {taped}");
        ensure!((plain - taped).abs() < tol, "GIoU tape {taped} vs plain {plain}");
    }

    // λ-combination.
    let w = LossWeights::default();
    ensure!([w.verb, w.noun, w.exist, w.l1, w.giou] == [1.0, 1.0, 5.0, 5.0, 5.0], "default λ {w:?}");
    for _ in 0..200 {
        let parts = [0; 5].map(|_| rng.uniform_range(0.0, 5.0));
        let vars = parts.map(|p| t.constant(Tensor::scalar(p)).unwrap());
        let total = total_loss(&mut t, vars, &w).unwrap();
        let by_hand = 1.0 * parts[0] + 1.0 * parts[1] + 5.0 * parts[2] + 5.0 * parts[3] + 5.0 * parts[4];
        ensure!(scalar(&t, total) == by_hand && combine(parts, &w) == by_hand, "λ-combination of {parts:?}");
    }
    let (space, samples, model) = tiny(2);
    let batch: Vec<_> = samples.iter().take(4).map(|s| (&s.annotation, &s.features)).collect();
    let mut g = Graph::eval(&model.store);
    let (_, b) = batch_loss(&mut g, &model, &space, &batch).unwrap();
    let by_hand = 1.0 * b.verb + 1.0 * b.noun + 5.0 * b.exist + 5.0 * b.l1 + 5.0 * b.giou;
    ensure!(b.total == by_hand, "batch total {} vs {}", b.total, by_hand);
    Ok(format!("{checks} hand oracles at 1e-9, 1000 GIoU ranges, 201 exact λ-combinations"))
}

fn c4_padding() -> Outcome {
    let mut worst = 0.0f64;
    let mut mixed = 0;
    for trial in 0..1000u64 {
        let (space, samples, model) = tiny(trial % 8);
        let mut rng = Rng::new(10_000 + trial);
        let size = 2 + rng.below(5);
        let picks: Vec<&Sample> = (0..size).map(|_| &samples[rng.below(samples.len())]).collect();
        let batch: Vec<_> = picks.iter().map(|s| (&s.annotation, &s.features)).collect();
        let lens: std::collections::BTreeSet<usize> = picks.iter().map(|s| s.annotation.roles.len()).collect();
        mixed += (lens.len() > 1) as usize;
        let mut g = Graph::eval(&model.store);
        let (_, joint) = batch_loss(&mut g, &model, &space, &batch).map_err(|e| e.to_string())?;
        let mut mean = [0.0; 6];
        for item in &batch {
            let mut g = Graph::eval(&model.store);
            let (_, one) = batch_loss(&mut g, &model, &space, std::slice::from_ref(item)).map_err(|e| e.to_string())?;
            for (m, v) in mean.iter_mut().zip([one.verb, one.noun, one.exist, one.l1, one.giou, one.total]) {
                *m += v / size as f64;
            }
        }
        for (a, b) in [joint.verb, joint.noun, joint.exist, joint.l1, joint.giou, joint.total].iter().zip(mean) {
            worst = worst.max((a - b).abs());
        }
        ensure!(worst < 1e-6, "trial {trial}: deviation {worst:.2e}");
    }
    ensure!(mixed >= 500, "only {mixed} batches mixed frame sizes");
    Ok(format!("1000 batches ({mixed} with mixed frame sizes), max deviation {worst:.1e}"))
}

/// Head outputs `[noun logits | box | existence]` per role, with the role
/// queries fed in the order `perm`.
fn heads_with_order(model: &Model, space: &FrameSpace, grid: &FeatureGrid, verb: usize, perm: &[usize]) -> Tensor {
    let mut g = Graph::eval(&model.store);
    let f = model.project_features(&mut g, grid).unwrap();
    let pos = model.positions(&mut g).unwrap();
    let e = model.encode(&mut g, f, &pos).unwrap();
    let q = model.build_role_queries(&mut g, space, verb).unwrap();
    let q = g.tape.gather_rows(q, perm).unwrap();
    let (out, _) = model.decode(&mut g, q, e.e_img, &pos).unwrap();
    let h = model.predict_heads(&mut g, out).unwrap();
    let all = g.tape.concat(&[h.noun_logits, h.boxes, h.exist], 1).unwrap();
    g.value(all).clone()
}

fn c5_equivariance() -> Outcome {
    let mut worst = 0.0f64;
    for trial in 0..100u64 {
        let mut rng = Rng::new(500 + trial);
        let space = synthetic_space(5, 6, 7, (2, 6), trial).unwrap();
        let channels = required_channels(&space);
        let cfg = ModelConfig {
            d: 8,
            d_v: 4,
            d_r: 4,
            heads: 2,
            encoder_layers: 1 + rng.below(2),
            decoder_layers: 1 + rng.below(2),
            ffn_dim: 16,
            grid_h: 2,
            grid_w: 3,
            channels,
            pre_ln: rng.uniform() < 0.5,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, &space, trial).unwrap();
        let values: Vec<f64> = (0..channels * 6).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let grid = FeatureGrid::new(channels, 2, 3, values).unwrap();
        let verb = rng.below(space.num_verbs());
        let n = space.frame(verb).len();
        let ident: Vec<usize> = (0..n).collect();
        let mut perm = ident.clone();
        rng.shuffle(&mut perm);
        let base = heads_with_order(&model, &space, &grid, verb, &ident);
        let permuted = heads_with_order(&model, &space, &grid, verb, &perm);
        for (i, &src) in perm.iter().enumerate() {
            for (a, b) in permuted.row(i).iter().zip(base.row(src)) {
                worst = worst.max((a - b).abs());
            }
        }
        ensure!(worst <= 1e-6, "trial {trial}: deviation {worst:.2e}");
    }
    Ok(format!("100 trials, max deviation {worst:.1e}"))
}

fn c6_metric_oracle() -> Outcome {
    let mut partial = 0;
    for trial in 0..1000u64 {
        let (space, anns, recs) = common::random_eval_case(trial);
        let got = evaluate(&anns, &recs, &space).map_err(|e| e.to_string())?;
        ensure!(got == common::oracle_evaluate(&space, &anns, &recs), "trial {trial}: evaluator and oracle disagree");
        ensure!(common::requirement_chain_holds(&got), "trial {trial}: requirement chain broken");
        partial += (got.ground_truth.value > 0.0 && got.ground_truth.value < 100.0) as usize;
    }
    Ok(format!("1000 datasets equal to the brute-force scorer; chain held on all ({partial} with partial value)"))
}

fn c7_grsitsim() -> Outcome {
    let recs = common::random_records(20_000, 77);
    for r in recs.iter().take(500) {
        let mut full = r.clone();
        full.entries.truncate(1);
        for role in &mut full.entries[0].roles {
            role.bbox.get_or_insert(BoxXYXY::new(0.0, 0.0, 2.0, 2.0));
        }
        let s = grsitsim(&full, &full).map_err(|e| e.to_string())?;
        ensure!(s == 1.0, "{}: self-similarity {s}", r.image_id);
    }
    let mut nonzero = 0;
    for pair in recs.chunks(2) {
        let ab = grsitsim(&pair[0], &pair[1]).map_err(|e| e.to_string())?;
        let ba = grsitsim(&pair[1], &pair[0]).map_err(|e| e.to_string())?;
        ensure!(ab == ba, "{} / {}: {ab} vs {ba}", pair[0].image_id, pair[1].image_id);
        ensure!((0.0..=1.0).contains(&ab), "{} / {}: {ab} out of range", pair[0].image_id, pair[1].image_id);
        nonzero += (ab > 0.0) as usize;
    }
    let corpus = common::random_records(200, 78);
    let index = build_index(corpus.clone()).map_err(|e| e.to_string())?;
    for probe in &corpus {
        for k in [1, 10, 200] {
            let fast = index.query(probe, k).map_err(|e| e.to_string())?;
            let slow = index.query_exhaustive(probe, k).map_err(|e| e.to_string())?;
            ensure!(fast == slow, "{} k={k}: index and scan differ", probe.image_id);
        }
    }
    Ok(format!("self-similarity 1 on 500, symmetric and in range on 10000 pairs ({nonzero} nonzero), index = scan on 200 probes"))
}

fn c8_ablations() -> Outcome {
    let (space, _) = common::desk_data(common::DESK_SEED);
    let base = common::desk_model_config(&space);
    let variants = [
        ("no verb embedding", ModelConfig { d_v: 0, d_r: base.d, ..base.clone() }),
        ("4+4 layers", ModelConfig { encoder_layers: 4, decoder_layers: 4, ..base.clone() }),
        ("8+8 layers", ModelConfig { encoder_layers: 8, decoder_layers: 8, ..base.clone() }),
        ("post-ln", ModelConfig { pre_ln: false, ..base.clone() }),
    ];
    let mut parts = Vec::new();
    for (name, cfg) in variants {
        let (report, m) = run_desk(cfg, 100)?;
        ensure!(report.steps == 100, "{name}: {} steps", report.steps);
        ensure!(report.log.iter().all(|e| e.total.is_finite()), "{name}: non-finite loss");
        ensure!(m.images == 64 && common::requirement_chain_holds(&m), "{name}: requirement chain broken");
        parts.push(format!("{name} verb {:.1}/value {:.1}", m.top1.verb.unwrap(), m.ground_truth.value));
    }
    Ok(format!("100 steps each: {}", parts.join(", ")))
}

fn c9_determinism() -> Outcome {
    let (space, _) = common::desk_data(common::DESK_SEED);
    let (ra, ma) = run_desk(common::desk_model_config(&space), common::DESK_STEPS)?;
    let (rb, mb) = run_desk(common::desk_model_config(&space), common::DESK_STEPS)?;
    let log = |r: &TrainReport| r.log.iter().map(|e| serde_json::to_string(e).unwrap()).collect::<Vec<_>>().join("\n");
    let bits = |r: &TrainReport| r.log.iter().map(|e| [e.total.to_bits(), e.grad_norm.to_bits()]).collect::<Vec<_>>();
    ensure!(log(&ra) == log(&rb) && bits(&ra) == bits(&rb), "loss logs differ");
    ensure!(serde_json::to_string(&ma).unwrap() == serde_json::to_string(&mb).unwrap(), "metric reports differ");
    Ok(format!("two {}-step runs: identical logs and reports", ra.steps))
}

/// Parameter count summed component by component.
fn count_by_hand(cfg: &ModelConfig, verbs: usize, roles: usize, nouns: usize) -> usize {
    let (c, d, f) = (cfg.channels, cfg.d, cfg.ffn_dim);
    let layer_norm = 2 * d;
    let attention = 4 * d * d;
    let feed_forward = (d * f + f) + (f * d + d);
    let encoder_layer = attention + feed_forward + 2 * layer_norm;
    let decoder_layer = 2 * attention + feed_forward + 3 * layer_norm;
    let pos_one = if cfg.pos_full_table { cfg.grid_h * cfg.grid_w * d } else { cfg.grid_h * d / 2 + cfg.grid_w * d / 2 };
    let pos = pos_one * if cfg.per_layer_pos { cfg.encoder_layers + cfg.decoder_layers } else { 1 };
    let hid = 2 * d;
    let mlp = |dims: &[usize]| dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum::<usize>();
    let mixer = if cfg.backbone { c * c + c } else { 0 };
    mixer
        + (c * d + d)
        + d // verb token
        + pos
        + cfg.encoder_layers * encoder_layer
        + cfg.decoder_layers * decoder_layer
        + 2 * layer_norm // final norms
        + verbs * cfg.d_v
        + roles * cfg.d_r
        + mlp(&[d, hid, verbs])
        + mlp(&[d, hid, nouns])
        + mlp(&[d, hid, 1])
        + mlp(&[d, hid, hid, 4])
}

fn c10_parameters() -> Outcome {
    let mut rng = Rng::new(10);
    let mut seen = Vec::new();
    for trial in 0..5u64 {
        let n_roles = 2 + rng.below(5);
        let space = synthetic_space(2 + rng.below(8), n_roles, 2 + rng.below(10), (1, n_roles), trial).unwrap();
        let heads = 1 + rng.below(4);
        let d = 2 * heads * (1 + rng.below(4));
        let d_v = rng.below(d);
        let cfg = ModelConfig {
            d,
            d_v,
            d_r: d - d_v,
            heads,
            encoder_layers: rng.below(4),
            decoder_layers: rng.below(4),
            ffn_dim: 1 + rng.below(20),
            grid_h: 1 + rng.below(4),
            grid_w: 1 + rng.below(4),
            channels: 1 + rng.below(10),
            backbone: rng.uniform() < 0.5,
            pos_full_table: rng.uniform() < 0.5,
            per_layer_pos: rng.uniform() < 0.5,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg.clone(), &space, trial).map_err(|e| e.to_string())?;
        let (v, r, n) = (space.num_verbs(), space.num_roles(), space.num_nouns());
        ensure!(space.noun_id(UNKNOWN_NOUN).is_some(), "unknown noun missing");
        let counted = model.count_parameters();
        let hand = count_by_hand(&cfg, v, r, n);
        ensure!(counted == hand && counted == parameter_formula(&cfg, v, r, n), "trial {trial}: {counted} vs {hand}");
        seen.push(counted.to_string());
    }
    Ok(format!("5 configs exact: {}", seen.join(", ")))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", c1_gradients),
        ("desk-scale learnability", c2_learnability),
        ("loss formula fidelity", c3_loss_formulas),
        ("padding equivalence", c4_padding),
        ("role-permutation equivariance", c5_equivariance),
        ("metric oracle equivalence", c6_metric_oracle),
        ("grounded similarity properties", c7_grsitsim),
        ("ablation plumbing", c8_ablations),
        ("determinism", c9_determinism),
        ("parameter accounting", c10_parameters),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let start = Instant::now();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let dt = t.elapsed();
        match outcome {
            Ok(detail) => println!("PASS  {n:>2} {name}: {detail} [{}]", fmt(dt)),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {n:>2} {name}: {detail} [{}]", fmt(dt));
            }
        }
    }
    println!("acceptance: {failed} failed, total {}", fmt(start.elapsed()));
    if failed > 0 {
        std::process::exit(1);
    }
}

fn fmt(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}
