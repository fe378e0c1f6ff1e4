//! Deterministic synthetic situations with learnable feature grids.
//!
//! Every role of a sample occupies its own rectangle of grid cells. Inside
//! that rectangle the grid carries a one-hot signature of the verb, the role
//! and the noun, plus a "grounded" flag channel that is set only when the
//! role has a box. Grounded roles get the rectangle, scaled to pixels, as
//! their box; the others get no box.
//!
//! Channel layout: `[verbs | roles | nouns | grounded flag | padding]`.

use super::dataset::{FeatureGrid, RoleEntry, SituationAnnotation};
use super::space::FrameSpace;
use crate::boxes::BoxXYXY;
use crate::error::{Error, Result};
use crate::tensor::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl GridShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        GridShape { channels, height, width }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticOptions {
    /// Probability that a role is left ungrounded.
    pub ungrounded_fraction: f64,
    /// Half-width of the uniform background noise on every channel.
    pub noise: f64,
    /// Pixel size of one grid cell is drawn from this inclusive range.
    pub cell_pixels: (u32, u32),
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        SyntheticOptions { ungrounded_fraction: 0.25, noise: 0.05, cell_pixels: (8, 32) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub annotation: SituationAnnotation,
    pub features: FeatureGrid,
}

/// Channels needed to encode a space's signatures.
pub fn required_channels(space: &FrameSpace) -> usize {
    space.num_verbs() + space.num_roles() + space.num_nouns() + 1
}

/// Random space whose frame sizes cycle through `min_roles..=max_roles`.
pub fn synthetic_space(
    n_verbs: usize,
    n_roles: usize,
    n_nouns: usize,
    (min_roles, max_roles): (usize, usize),
    seed: u64,
) -> Result<FrameSpace> {
    if min_roles == 0 || min_roles > max_roles || max_roles > n_roles {
        return Err(Error::InvalidArgument(format!(
            "frame sizes {min_roles}..={max_roles} impossible with {n_roles} roles"
        )));
    }
    let mut rng = Rng::new(seed);
    let roles: Vec<String> = (0..n_roles).map(|i| format!("role{i}")).collect();
    let nouns: Vec<String> = (0..n_nouns).map(|i| format!("noun{i}")).collect();
    let span = max_roles - min_roles + 1;
    let verbs = (0..n_verbs)
        .map(|v| {
            let k = min_roles + v % span;
            let mut pool: Vec<usize> = (0..n_roles).collect();
            rng.shuffle(&mut pool);
            let mut frame: Vec<usize> = pool[..k].to_vec();
            frame.sort_unstable();
            (format!("verb{v}"), frame.into_iter().map(|r| roles[r].clone()).collect())
        })
        .collect();
    FrameSpace::new(verbs, roles, nouns, max_roles.max(super::space::DEFAULT_MAX_ROLES))
}

pub fn generate_synthetic(space: &FrameSpace, n_images: usize, grid: GridShape, seed: u64) -> Result<Vec<Sample>> {
    generate_synthetic_with(space, n_images, grid, seed, &SyntheticOptions::default())
}

#[derive(Clone, Copy, Debug)]
struct Rect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl Rect {
    fn overlaps(&self, o: &Rect) -> bool {
        self.x0 < o.x1 && o.x0 < self.x1 && self.y0 < o.y1 && o.y0 < self.y1
    }
}

fn place_rects(k: usize, h: usize, w: usize, rng: &mut Rng) -> Vec<Rect> {
    let max_w = w.div_ceil(2).max(1);
    let max_h = h.div_ceil(2).max(1);
    'attempt: for _ in 0..64 {
        let mut placed: Vec<Rect> = Vec::with_capacity(k);
        for _ in 0..k {
            let mut ok = false;
            for _ in 0..64 {
                let rw = 1 + rng.below(max_w);
                let rh = 1 + rng.below(max_h);
                let x0 = rng.below(w - rw + 1);
                let y0 = rng.below(h - rh + 1);
                let r = Rect { x0, y0, x1: x0 + rw, y1: y0 + rh };
                if placed.iter().all(|p| !p.overlaps(&r)) {
                    placed.push(r);
                    ok = true;
                    break;
                }
            }
            if !ok {
                continue 'attempt;
            }
        }
        return placed;
    }
    // Single cells at distinct random positions always fit when k ≤ h·w.
    let mut cells: Vec<usize> = (0..h * w).collect();
    rng.shuffle(&mut cells);
    cells[..k]
        .iter()
        .map(|c| Rect { x0: c % w, y0: c / w, x1: c % w + 1, y1: c / w + 1 })
        .collect()
}

pub fn generate_synthetic_with(
    space: &FrameSpace,
    n_images: usize,
    grid: GridShape,
    seed: u64,
    opts: &SyntheticOptions,
) -> Result<Vec<Sample>> {
    if n_images == 0 {
        return Err(Error::InvalidArgument("n_images must be at least 1".into()));
    }
    if space.num_nouns() < 2 {
        return Err(Error::InvalidArgument("space needs at least one noun besides the unknown noun".into()));
    }
    let need = required_channels(space);
    if grid.channels < need {
        return Err(Error::InvalidArgument(format!("grid needs at least {need} channels, got {}", grid.channels)));
    }
    let largest = (0..space.num_verbs()).map(|v| space.frame(v).len()).max().unwrap_or(0);
    let cells = grid.height * grid.width;
    if cells < largest {
        return Err(Error::InvalidArgument(format!(
            "{}x{} grid cannot hold {largest} disjoint role patterns",
            grid.height, grid.width
        )));
    }
    let (nv, nr) = (space.num_verbs(), space.num_roles());
    let flag = nv + nr + space.num_nouns();
    let mut rng = Rng::new(seed);

    // Balanced verb assignment: every verb appears once per |V| images.
    let mut verbs: Vec<usize> = (0..n_images).map(|i| i % nv).collect();
    rng.shuffle(&mut verbs);

    let mut out = Vec::with_capacity(n_images);
    for (i, &verb) in verbs.iter().enumerate() {
        let frame = space.frame(verb);
        let cell_w = opts.cell_pixels.0 + rng.below((opts.cell_pixels.1 - opts.cell_pixels.0 + 1) as usize) as u32;
        let cell_h = opts.cell_pixels.0 + rng.below((opts.cell_pixels.1 - opts.cell_pixels.0 + 1) as usize) as u32;
        let width = cell_w * grid.width as u32;
        let height = cell_h * grid.height as u32;

        let mut values: Vec<f64> = (0..grid.channels * cells).map(|_| rng.uniform_range(-opts.noise, opts.noise)).collect();
        let rects = place_rects(frame.len(), grid.height, grid.width, &mut rng);
        let mut roles = Vec::with_capacity(frame.len());
        for (&role, rect) in frame.iter().zip(&rects) {
            let noun = 1 + rng.below(space.num_nouns() - 1);
            let grounded = rng.uniform() >= opts.ungrounded_fraction;
            for y in rect.y0..rect.y1 {
                for x in rect.x0..rect.x1 {
                    let cell = y * grid.width + x;
                    let mut set = |c: usize| values[c * cells + cell] += 1.0;
                    set(verb);
                    set(nv + role);
                    set(nv + nr + noun);
                    if grounded {
                        set(flag);
                    }
                }
            }
            let bbox = grounded.then(|| {
                BoxXYXY::new(
                    (rect.x0 as u32 * cell_w) as f64,
                    (rect.y0 as u32 * cell_h) as f64,
                    (rect.x1 as u32 * cell_w) as f64,
                    (rect.y1 as u32 * cell_h) as f64,
                )
            });
            let name = space.noun_name(noun).to_string();
            roles.push(RoleEntry {
                role: space.role_name(role).to_string(),
                nouns: [name.clone(), name.clone(), name],
                bbox,
            });
        }
        let annotation = SituationAnnotation {
            image_id: format!("syn{seed}_{i:05}"),
            width,
            height,
            verb: space.verb_name(verb).to_string(),
            roles,
            features: None,
        };
        let features = FeatureGrid::new(grid.channels, grid.height, grid.width, values)?;
        out.push(Sample { annotation, features });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::parse_dataset;
    use crate::ontology::dataset_to_jsonl;

    fn space() -> FrameSpace {
        synthetic_space(8, 6, 12, (1, 4), 3).unwrap()
    }

    fn grid(s: &FrameSpace) -> GridShape {
        GridShape::new(required_channels(s) + 2, 4, 4)
    }

    #[test]
    fn deterministic_in_seed() {
        let s = space();
        let a = generate_synthetic(&s, 10, grid(&s), 42).unwrap();
        let b = generate_synthetic(&s, 10, grid(&s), 42).unwrap();
        assert_eq!(a, b);
        let bits = |v: &[Sample]| v.iter().flat_map(|x| x.features.values.iter().map(|f| f.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(a, generate_synthetic(&s, 10, grid(&s), 43).unwrap());
    }

    #[test]
    fn zero_images_rejected() {
        let s = space();
        assert!(generate_synthetic(&s, 0, grid(&s), 1).is_err());
    }

    #[test]
    fn too_small_grid_rejected() {
        let s = space();
        assert!(generate_synthetic(&s, 1, GridShape::new(required_channels(&s), 1, 3), 1).is_err());
        assert!(generate_synthetic(&s, 1, GridShape::new(3, 4, 4), 1).is_err());
    }

    #[test]
    fn every_verb_covered_when_enough_images() {
        let s = synthetic_space(8, 6, 12, (1, 4), 7).unwrap();
        let samples = generate_synthetic(&s, 32, grid(&s), 7).unwrap();
        // Enumerate the label distribution.
        let mut counts = vec![0usize; s.num_verbs()];
        for x in &samples {
            counts[s.verb_id(&x.annotation.verb).unwrap()] += 1;
        }
        assert!(counts.iter().all(|c| *c >= 1), "{counts:?}");
        assert_eq!(counts.iter().sum::<usize>(), 32);
    }

    #[test]
    fn output_passes_load_validation_and_boxes_cover_cells() {
        let s = space();
        for seed in 0..5 {
            let samples = generate_synthetic(&s, 40, grid(&s), seed).unwrap();
            let anns: Vec<_> = samples.iter().map(|x| x.annotation.clone()).collect();
            let back = parse_dataset(&dataset_to_jsonl(&anns), &s, "synthetic").unwrap();
            assert_eq!(back, anns);
            for x in &samples {
                let a = &x.annotation;
                let cell_area = (a.width as f64 / 4.0) * (a.height as f64 / 4.0);
                for r in &a.roles {
                    assert_eq!(r.nouns[0], r.nouns[1]);
                    assert_eq!(r.nouns[1], r.nouns[2]);
                    if let Some(b) = r.bbox {
                        assert!(b.area() >= cell_area - 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn frame_sizes_cycle() {
        let s = space();
        let sizes: Vec<usize> = (0..8).map(|v| s.frame(v).len()).collect();
        assert_eq!(sizes, vec![1, 2, 3, 4, 1, 2, 3, 4]);
    }
}
