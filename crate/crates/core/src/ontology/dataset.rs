use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::space::FrameSpace;
use crate::boxes::BoxXYXY;
use crate::container;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ground truth for one role of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct RoleEntry {
    pub role: String,
    /// One label per annotator; duplicates allowed.
    pub nouns: [String; 3],
    /// Absolute pixel box, `None` when the role is not grounded.
    pub bbox: Option<BoxXYXY>,
}

/// Ground truth for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct SituationAnnotation {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub verb: String,
    pub roles: Vec<RoleEntry>,
    /// Feature container path, relative to the dataset file.
    pub features: Option<String>,
}

impl SituationAnnotation {
    pub fn validate(&self, space: &FrameSpace) -> Result<()> {
        let loc = format!("image {}", self.image_id);
        let verb = space
            .verb_id(&self.verb)
            .ok_or_else(|| Error::validation(&loc, format!("verb \"{}\" not in space", self.verb)))?;
        let expected = space.frame_names(verb);
        let got: Vec<&str> = self.roles.iter().map(|r| r.role.as_str()).collect();
        if got != expected {
            return Err(Error::validation(
                &loc,
                format!("roles {:?} do not match frame {:?} of \"{}\"", got, expected, self.verb),
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::validation(&loc, "image size must be positive"));
        }
        for r in &self.roles {
            for n in &r.nouns {
                if space.noun_id(n).is_none() {
                    return Err(Error::validation(&loc, format!("role {}: unknown noun \"{n}\"", r.role)));
                }
            }
            if let Some(b) = &r.bbox {
                let inside = b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= self.width as f64 && b.y2 <= self.height as f64;
                if !(b.x1 < b.x2 && b.y1 < b.y2 && inside) {
                    return Err(Error::validation(
                        &loc,
                        format!("role {}: malformed box {:?} for {}x{} image", r.role, b.to_array(), self.width, self.height),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn verb_id(&self, space: &FrameSpace) -> usize {
        space.verb_id(&self.verb).expect("validated annotation")
    }

    /// Indices of the first-annotator nouns, one per role.
    pub fn noun_ids(&self, space: &FrameSpace, annotator: usize) -> Vec<usize> {
        self.roles.iter().map(|r| space.noun_id(&r.nouns[annotator]).expect("validated annotation")).collect()
    }
}

/// Backbone output `c × h × w`, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height * width == 0 || channels == 0 {
            return Err(Error::InvalidArgument(format!("empty feature grid {channels}x{height}x{width}")));
        }
        if values.len() != channels * height * width {
            return Err(Error::shape("feature_grid", format!("{} values for {channels}x{height}x{width}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "feature_grid" });
        }
        Ok(FeatureGrid { channels, height, width, values })
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }

    /// One row per grid cell (row-major over `(y, x)`), one column per channel.
    pub fn cell_matrix(&self) -> Tensor {
        let hw = self.cells();
        let mut out = vec![0.0; hw * self.channels];
        for c in 0..self.channels {
            for j in 0..hw {
                out[j * self.channels + c] = self.values[c * hw + j];
            }
        }
        Tensor::new(&[hw, self.channels], out).expect("sized")
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.channels, self.height, self.width], self.values.clone()).expect("sized")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [c, h, w] => FeatureGrid::new(*c, *h, *w, t.data().to_vec()),
            s => Err(Error::shape("feature_grid", format!("expected c×h×w, got {:?}", s))),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    role: String,
    nouns: Vec<String>,
    bbox: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    image_id: String,
    width: u32,
    height: u32,
    verb: String,
    frames: Vec<FrameRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<String>,
}

/// Decodes a box field. Four negative coordinates are the legacy marker for
/// "not grounded".
fn decode_box(raw: Option<Vec<f64>>, loc: &str) -> Result<Option<BoxXYXY>> {
    match raw {
        None => Ok(None),
        Some(v) if v.len() == 4 && v.iter().all(|c| *c < 0.0) => Ok(None),
        Some(v) if v.len() == 4 => Ok(Some(BoxXYXY::new(v[0], v[1], v[2], v[3]))),
        Some(v) => Err(Error::validation(loc, format!("malformed box: expected 4 coordinates, got {}", v.len()))),
    }
}

fn from_record(rec: Record, loc: &str) -> Result<SituationAnnotation> {
    let mut roles = Vec::with_capacity(rec.frames.len());
    for f in rec.frames {
        let floc = format!("{loc}: role {}", f.role);
        let nouns: [String; 3] = f
            .nouns
            .try_into()
            .map_err(|v: Vec<String>| Error::validation(&floc, format!("expected 3 noun labels, got {}", v.len())))?;
        roles.push(RoleEntry { role: f.role, nouns, bbox: decode_box(f.bbox, &floc)? });
    }
    Ok(SituationAnnotation {
        image_id: rec.image_id,
        width: rec.width,
        height: rec.height,
        verb: rec.verb,
        roles,
        features: rec.features,
    })
}

fn to_record(a: &SituationAnnotation) -> Record {
    Record {
        image_id: a.image_id.clone(),
        width: a.width,
        height: a.height,
        verb: a.verb.clone(),
        frames: a
            .roles
            .iter()
            .map(|r| FrameRecord {
                role: r.role.clone(),
                nouns: r.nouns.to_vec(),
                bbox: r.bbox.map(|b| b.to_array().to_vec()),
            })
            .collect(),
        features: a.features.clone(),
    }
}

/// Parses JSON-lines annotations and validates each against `space`.
pub fn parse_dataset(text: &str, space: &FrameSpace, location: &str) -> Result<Vec<SituationAnnotation>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let loc = format!("{location}:{}", i + 1);
        let rec: Record = serde_json::from_str(line).map_err(|source| Error::Json { location: loc.clone(), source })?;
        let ann = from_record(rec, &loc)?;
        ann.validate(space).map_err(|e| match e {
            Error::Validation { location: inner, message } => Error::validation(format!("{loc} ({inner})"), message),
            other => other,
        })?;
        out.push(ann);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path, space: &FrameSpace) -> Result<Vec<SituationAnnotation>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line.map_err(|e| Error::io(path, e))?);
        text.push('\n');
    }
    parse_dataset(&text, space, &path.display().to_string())
}

pub fn dataset_to_jsonl(annotations: &[SituationAnnotation]) -> String {
    let mut out = String::new();
    for a in annotations {
        out.push_str(&serde_json::to_string(&to_record(a)).expect("serializable"));
        out.push('\n');
    }
    out
}

pub fn save_dataset(path: &Path, annotations: &[SituationAnnotation]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(dataset_to_jsonl(annotations).as_bytes()).map_err(|e| Error::io(path, e))
}

/// Feature grids keyed by image id, loaded from the containers a dataset references.
#[derive(Debug, Default)]
pub struct FeatureStore {
    grids: HashMap<String, FeatureGrid>,
}

impl FeatureStore {
    pub fn new() -> Self {
        FeatureStore::default()
    }

    pub fn insert(&mut self, image_id: impl Into<String>, grid: FeatureGrid) {
        self.grids.insert(image_id.into(), grid);
    }

    pub fn get(&self, image_id: &str) -> Option<&FeatureGrid> {
        self.grids.get(image_id)
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    /// Reads every container referenced by `annotations`, resolving paths
    /// relative to `base_dir`. Each array is named by its image id.
    pub fn load_for(annotations: &[SituationAnnotation], base_dir: &Path) -> Result<Self> {
        let mut containers: HashMap<PathBuf, HashMap<String, Tensor>> = HashMap::new();
        let mut store = FeatureStore::new();
        for a in annotations {
            let rel = a.features.as_ref().ok_or_else(|| {
                Error::validation(format!("image {}", a.image_id), "record has no \"features\" path")
            })?;
            let path = base_dir.join(rel);
            if !containers.contains_key(&path) {
                let arrays = container::read(&path)?.into_iter().collect();
                containers.insert(path.clone(), arrays);
            }
            let t = containers[&path].get(&a.image_id).ok_or_else(|| {
                Error::validation(format!("image {}", a.image_id), format!("no array in {}", path.display()))
            })?;
            store.insert(a.image_id.clone(), FeatureGrid::from_tensor(t)?);
        }
        Ok(store)
    }
}
