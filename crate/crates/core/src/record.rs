//! Per-image prediction records, stored one JSON object per line.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::boxes::BoxXYXY;
use crate::error::{Error, Result};
use crate::ontology::FrameSpace;

/// Gated grounded noun for one role. `bbox` is absolute pixels, `None` for ∅_b.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolePrediction {
    pub role: String,
    pub noun: String,
    #[serde(with = "opt_box")]
    pub bbox: Option<BoxXYXY>,
}

/// Prediction conditioned on one verb.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerbEntry {
    pub verb: String,
    /// Verb logit.
    pub score: f64,
    pub roles: Vec<RolePrediction>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    /// Top-k verbs, best first.
    pub entries: Vec<VerbEntry>,
    /// Prediction conditioned on the ground-truth verb, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_verb_entry: Option<VerbEntry>,
}

impl PredictionRecord {
    /// Checks verb distinctness and that every entry's roles follow its frame.
    pub fn validate(&self, space: &FrameSpace) -> Result<()> {
        let loc = format!("prediction {}", self.image_id);
        if self.entries.is_empty() {
            return Err(Error::validation(&loc, "no verb entries"));
        }
        let mut seen = Vec::new();
        for e in self.entries.iter().chain(&self.gt_verb_entry) {
            let v = space
                .verb_id(&e.verb)
                .ok_or_else(|| Error::validation(&loc, format!("verb \"{}\" not in space", e.verb)))?;
            let frame = space.frame_names(v);
            let got: Vec<&str> = e.roles.iter().map(|r| r.role.as_str()).collect();
            if got != frame {
                return Err(Error::validation(&loc, format!("roles {got:?} do not match frame {frame:?} of \"{}\"", e.verb)));
            }
            for r in &e.roles {
                if space.noun_id(&r.noun).is_none() {
                    return Err(Error::validation(&loc, format!("unknown noun \"{}\"", r.noun)));
                }
            }
        }
        for e in &self.entries {
            if seen.contains(&&e.verb) {
                return Err(Error::validation(&loc, format!("verb \"{}\" ranked twice", e.verb)));
            }
            seen.push(&e.verb);
        }
        Ok(())
    }

    pub fn top1(&self) -> &VerbEntry {
        &self.entries[0]
    }
}

pub fn records_to_jsonl(records: &[PredictionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("serializable record"));
        out.push('\n');
    }
    out
}

pub fn save_records(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(records_to_jsonl(records).as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn parse_records(text: &str, location: &str) -> Result<Vec<PredictionRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| Error::Json { location: format!("{location}:{}", i + 1), source })
        })
        .collect()
}

pub fn load_records(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_records(&text, &path.display().to_string())
}

mod opt_box {
    use super::*;

    pub fn serialize<S: Serializer>(b: &Option<BoxXYXY>, s: S) -> std::result::Result<S::Ok, S::Error> {
        b.map(|b| b.to_array()).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<BoxXYXY>, D::Error> {
        Ok(Option::<[f64; 4]>::deserialize(d)?.map(BoxXYXY::from_array))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let rec = PredictionRecord {
            image_id: "a".into(),
            width: 10,
            height: 20,
            entries: vec![VerbEntry {
                verb: "v".into(),
                score: 1.5,
                roles: vec![
                    RolePrediction { role: "r".into(), noun: "n".into(), bbox: Some(BoxXYXY::new(0.0, 1.0, 2.0, 3.0)) },
                    RolePrediction { role: "s".into(), noun: "∅".into(), bbox: None },
                ],
            }],
            gt_verb_entry: None,
        };
        let text = records_to_jsonl(std::slice::from_ref(&rec));
        assert!(text.contains("[0.0,1.0,2.0,3.0]"));
        assert!(text.contains("\"bbox\":null"));
        assert_eq!(parse_records(&text, "t").unwrap(), vec![rec]);
    }
}
