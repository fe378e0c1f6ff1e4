//! Importers for the public SWiG / imSitu JSON files.
//!
//! `imsitu_space.json` supplies verbs and their role order; a split file such
//! as `train.json` maps image names to `{verb, width, height, bb, frames}`.
//! The noun vocabulary is the set of nouns used in the given training split.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::Deserialize;

use super::dataset::{RoleEntry, SituationAnnotation};
use super::space::{FrameSpace, OrderedEntries, DEFAULT_MAX_ROLES, UNKNOWN_NOUN};
use crate::boxes::BoxXYXY;
use crate::error::{Error, Result};

#[derive(Deserialize)]
struct SwigVerb {
    order: Vec<String>,
}

#[derive(Deserialize)]
struct SwigSpace {
    verbs: OrderedEntries<SwigVerb>,
}

#[derive(Deserialize)]
struct SwigImage {
    verb: String,
    width: u32,
    height: u32,
    #[serde(default)]
    bb: HashMap<String, Vec<f64>>,
    frames: Vec<HashMap<String, String>>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { location: path.display().to_string(), source })
}

/// Builds a space from the imSitu verb file and the nouns used in a training split.
pub fn import_swig_space(space_path: &Path, train_path: &Path) -> Result<FrameSpace> {
    let raw: SwigSpace = read_json(space_path)?;
    let train: OrderedEntries<SwigImage> = read_json(train_path)?;
    let mut roles: Vec<String> = Vec::new();
    for (_, v) in &raw.verbs.0 {
        for r in &v.order {
            if !roles.contains(r) {
                roles.push(r.clone());
            }
        }
    }
    let nouns: BTreeSet<String> = train
        .0
        .iter()
        .flat_map(|(_, img)| img.frames.iter().flat_map(|f| f.values().cloned()))
        .filter(|n| !n.is_empty())
        .collect();
    let verbs = raw.verbs.0.into_iter().map(|(name, v)| (name, v.order)).collect();
    FrameSpace::new(verbs, roles, nouns.into_iter().collect(), DEFAULT_MAX_ROLES)
}

/// Converts a SWiG split file. Empty nouns and nouns outside the space map to
/// the unknown noun; negative boxes mean "not grounded"; boxes are clamped to
/// the image and dropped if they become empty.
pub fn import_swig_annotations(path: &Path, space: &FrameSpace) -> Result<Vec<SituationAnnotation>> {
    let images: OrderedEntries<SwigImage> = read_json(path)?;
    let mut out = Vec::with_capacity(images.0.len());
    for (image_id, img) in images.0 {
        let loc = format!("{}: {image_id}", path.display());
        let verb = space
            .verb_id(&img.verb)
            .ok_or_else(|| Error::validation(&loc, format!("verb \"{}\" not in space", img.verb)))?;
        if img.frames.len() != 3 {
            return Err(Error::validation(&loc, format!("expected 3 noun labels, got {}", img.frames.len())));
        }
        let roles = space
            .frame_names(verb)
            .into_iter()
            .map(|role| {
                let nouns: [String; 3] = std::array::from_fn(|k| {
                    img.frames[k]
                        .get(role)
                        .filter(|n| space.noun_id(n).is_some())
                        .cloned()
                        .unwrap_or_else(|| UNKNOWN_NOUN.to_string())
                });
                let bbox = img.bb.get(role).and_then(|b| {
                    if b.len() != 4 || b.iter().any(|c| *c < 0.0) {
                        return None;
                    }
                    let (w, h) = (img.width as f64, img.height as f64);
                    let bx = BoxXYXY::new(b[0].min(w), b[1].min(h), b[2].min(w), b[3].min(h));
                    (bx.x1 < bx.x2 && bx.y1 < bx.y2).then_some(bx)
                });
                RoleEntry { role: role.to_string(), nouns, bbox }
            })
            .collect();
        let ann = SituationAnnotation {
            image_id,
            width: img.width,
            height: img.height,
            verb: img.verb,
            roles,
            features: None,
        };
        ann.validate(space)?;
        out.push(ann);
    }
    Ok(out)
}
