use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

/// Name of the reserved "unknown" noun, always at index 0.
pub const UNKNOWN_NOUN: &str = "∅";

/// Largest frame size accepted by default (SWiG frames have 1–6 roles).
pub const DEFAULT_MAX_ROLES: usize = 6;

/// Verb, role and noun vocabularies plus the ordered role frame of each verb.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSpace {
    verbs: Vec<String>,
    roles: Vec<String>,
    nouns: Vec<String>,
    frames: Vec<Vec<usize>>,
    max_roles: usize,
    verb_index: HashMap<String, usize>,
    role_index: HashMap<String, usize>,
    noun_index: HashMap<String, usize>,
}

fn index_unique(names: &[String], kind: &str, location: &str) -> Result<HashMap<String, usize>> {
    let mut map = HashMap::with_capacity(names.len());
    for (i, n) in names.iter().enumerate() {
        if map.insert(n.clone(), i).is_some() {
            return Err(Error::validation(location, format!("duplicate {kind} name \"{n}\"")));
        }
    }
    Ok(map)
}

impl FrameSpace {
    /// Builds and validates a space. `nouns` gets the unknown noun prepended
    /// when it is not already first.
    pub fn new(
        verbs: Vec<(String, Vec<String>)>,
        roles: Vec<String>,
        nouns: Vec<String>,
        max_roles: usize,
    ) -> Result<Self> {
        Self::build(verbs, roles, nouns, max_roles, "space")
    }

    fn build(
        verbs: Vec<(String, Vec<String>)>,
        roles: Vec<String>,
        mut nouns: Vec<String>,
        max_roles: usize,
        location: &str,
    ) -> Result<Self> {
        match nouns.iter().position(|n| n == UNKNOWN_NOUN) {
            None => nouns.insert(0, UNKNOWN_NOUN.to_string()),
            Some(0) => {}
            Some(i) => {
                return Err(Error::validation(
                    format!("{location}: nouns[{i}]"),
                    format!("\"{UNKNOWN_NOUN}\" is reserved for index 0"),
                ))
            }
        }
        let role_index = index_unique(&roles, "role", &format!("{location}: roles"))?;
        let noun_index = index_unique(&nouns, "noun", &format!("{location}: nouns"))?;
        let verb_names: Vec<String> = verbs.iter().map(|(v, _)| v.clone()).collect();
        let verb_index = index_unique(&verb_names, "verb", &format!("{location}: verbs"))?;
        let mut frames = Vec::with_capacity(verbs.len());
        for (verb, frame) in &verbs {
            let loc = format!("{location}: verbs.{verb}");
            if frame.is_empty() || frame.len() > max_roles {
                return Err(Error::validation(
                    loc,
                    format!("frame has {} roles, expected 1..={max_roles}", frame.len()),
                ));
            }
            let mut ids = Vec::with_capacity(frame.len());
            for r in frame {
                let id = *role_index
                    .get(r)
                    .ok_or_else(|| Error::validation(&loc, format!("unknown role \"{r}\"")))?;
                if ids.contains(&id) {
                    return Err(Error::validation(&loc, format!("role \"{r}\" repeated in frame")));
                }
                ids.push(id);
            }
            frames.push(ids);
        }
        Ok(FrameSpace { verbs: verb_names, roles, nouns, frames, max_roles, verb_index, role_index, noun_index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn from_json(text: &str, location: &str) -> Result<Self> {
        let file: SpaceFile =
            serde_json::from_str(text).map_err(|source| Error::Json { location: location.to_string(), source })?;
        let verbs = file.verbs.0.into_iter().map(|(v, e)| (v, e.roles)).collect();
        Self::build(verbs, file.roles, file.nouns, DEFAULT_MAX_ROLES, location)
    }

    pub fn to_json(&self) -> String {
        let mut out = String::from("{\n  \"verbs\": {\n");
        for (i, v) in self.verbs.iter().enumerate() {
            let roles: Vec<&str> = self.frames[i].iter().map(|r| self.roles[*r].as_str()).collect();
            out.push_str(&format!(
                "    {}: {{\"roles\": {}}}{}\n",
                serde_json::to_string(v).expect("string"),
                serde_json::to_string(&roles).expect("strings"),
                if i + 1 < self.verbs.len() { "," } else { "" }
            ));
        }
        out.push_str("  },\n");
        out.push_str(&format!("  \"roles\": {},\n", serde_json::to_string(&self.roles).expect("strings")));
        out.push_str(&format!("  \"nouns\": {}\n}}\n", serde_json::to_string(&self.nouns).expect("strings")));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn verbs(&self) -> &[String] {
        &self.verbs
    }

    pub fn roles(&self) -> &[String] {
        &self.roles
    }

    pub fn nouns(&self) -> &[String] {
        &self.nouns
    }

    pub fn num_verbs(&self) -> usize {
        self.verbs.len()
    }

    pub fn num_roles(&self) -> usize {
        self.roles.len()
    }

    /// Noun classes including the unknown noun.
    pub fn num_nouns(&self) -> usize {
        self.nouns.len()
    }

    pub fn max_roles(&self) -> usize {
        self.max_roles
    }

    pub fn verb_id(&self, name: &str) -> Option<usize> {
        self.verb_index.get(name).copied()
    }

    pub fn role_id(&self, name: &str) -> Option<usize> {
        self.role_index.get(name).copied()
    }

    pub fn noun_id(&self, name: &str) -> Option<usize> {
        self.noun_index.get(name).copied()
    }

    /// Role ids of a verb's frame, in canonical order.
    pub fn frame(&self, verb: usize) -> &[usize] {
        &self.frames[verb]
    }

    pub fn frame_names(&self, verb: usize) -> Vec<&str> {
        self.frames[verb].iter().map(|r| self.roles[*r].as_str()).collect()
    }

    pub fn verb_name(&self, verb: usize) -> &str {
        &self.verbs[verb]
    }

    pub fn role_name(&self, role: usize) -> &str {
        &self.roles[role]
    }

    pub fn noun_name(&self, noun: usize) -> &str {
        &self.nouns[noun]
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpaceFile {
    verbs: OrderedEntries<VerbEntry>,
    roles: Vec<String>,
    nouns: Vec<String>,
}

#[derive(Deserialize)]
struct VerbEntry {
    roles: Vec<String>,
}

/// JSON object kept in document order, with duplicate keys preserved so they
/// can be reported.
pub(crate) struct OrderedEntries<T>(pub Vec<(String, T)>);

impl<'de, T: Deserialize<'de>> Deserialize<'de> for OrderedEntries<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V<T>(std::marker::PhantomData<T>);
        impl<'de, T: Deserialize<'de>> Visitor<'de> for V<T> {
            type Value = OrderedEntries<T>;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, T>()? {
                    out.push((k, v));
                }
                Ok(OrderedEntries(out))
            }
        }
        d.deserialize_map(V(std::marker::PhantomData))
    }
}

/// Serializable summary used in reports and checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct SpaceSummary {
    pub verbs: usize,
    pub roles: usize,
    pub nouns: usize,
}

impl From<&FrameSpace> for SpaceSummary {
    fn from(s: &FrameSpace) -> Self {
        SpaceSummary { verbs: s.num_verbs(), roles: s.num_roles(), nouns: s.num_nouns() }
    }
}
