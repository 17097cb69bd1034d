//! Dataset manifests: ordered clip chains with audio, style and optional
//! reference vectors. Paths are relative to the manifest's directory.
//!
//! ```toml
//! fps = 25
//! styles = ["speaking", "singing"]
//!
//! [[chain]]
//! name = "talk"
//! [[chain.clip]]
//! key = "talk_0"
//! motion = "talk_0.mclip"
//! audio = "talk_0.feat"
//! style = "speaking"
//! reference = "face.feat"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{FeatMatrix, MotionClip};
use crate::conditioning::reference_context;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub fps: u16,
    pub styles: Vec<String>,
    #[serde(default)]
    pub chain: Vec<ChainEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainEntry {
    pub name: String,
    #[serde(default)]
    pub clip: Vec<ClipEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipEntry {
    pub key: String,
    pub motion: PathBuf,
    pub audio: PathBuf,
    pub style: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: Manifest = toml::from_str(text).map_err(|e| Error::config(format!("manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn style_id(&self, name: &str) -> Result<usize> {
        self.styles
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| Error::config(format!("unknown style {name:?}; known: {:?}", self.styles)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.fps == 0 {
            return Err(Error::config("manifest fps must be positive"));
        }
        if self.styles.is_empty() {
            return Err(Error::config("manifest needs at least one style"));
        }
        let mut keys = std::collections::BTreeSet::new();
        for chain in &self.chain {
            for c in &chain.clip {
                self.style_id(&c.style)?;
                if !keys.insert(c.key.as_str()) {
                    return Err(Error::config(format!("duplicate clip key {:?}", c.key)));
                }
            }
        }
        Ok(())
    }

    pub fn clip_count(&self) -> usize {
        self.chain.iter().map(|c| c.clip.len()).sum()
    }
}

/// One loaded clip with its audio, reference vector and chain predecessor.
#[derive(Clone, Debug)]
pub struct Sample {
    pub key: String,
    pub chain: usize,
    pub clip: MotionClip,
    pub audio: FeatMatrix,
    pub reference: Option<Vec<f64>>,
    /// Index of the previous clip in the same chain.
    pub previous: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub fps: u16,
    pub styles: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Loads every clip listed in the manifest, in chain order.
    pub fn load(manifest_path: &Path, capacity: usize) -> Result<Self> {
        let manifest = Manifest::load(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let mut samples = Vec::with_capacity(manifest.clip_count());
        for (ci, chain) in manifest.chain.iter().enumerate() {
            for (k, entry) in chain.clip.iter().enumerate() {
                let clip = MotionClip::load(&root.join(&entry.motion), capacity)
                    .map_err(|e| annotate(e, &entry.motion))?;
                let style = manifest.style_id(&entry.style)?;
                if clip.style as usize != style {
                    return Err(Error::contract(format!(
                        "clip {:?} stores style {} but the manifest says {:?}",
                        entry.key, clip.style, entry.style
                    )));
                }
                if clip.fps != manifest.fps {
                    return Err(Error::contract(format!(
                        "clip {:?} runs at {} fps, manifest at {}",
                        entry.key, clip.fps, manifest.fps
                    )));
                }
                clip.validate(capacity)?;
                let audio = FeatMatrix::load(&root.join(&entry.audio)).map_err(|e| annotate(e, &entry.audio))?;
                let reference = entry.reference.as_ref().map(|p| root.join(p));
                let reference = reference_context(reference.as_deref())?;
                let previous = (k > 0).then(|| samples.len() - 1);
                samples.push(Sample {
                    key: entry.key.clone(),
                    chain: ci,
                    clip,
                    audio,
                    reference,
                    previous,
                });
            }
        }
        Ok(Self {
            fps: manifest.fps,
            styles: manifest.styles,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn annotate(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { offset, msg } => Error::Format {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = r#"
fps = 25
styles = ["speaking", "singing"]

[[chain]]
name = "a"
[[chain.clip]]
key = "a0"
motion = "a0.mclip"
audio = "a0.feat"
style = "singing"
"#;

    #[test]
    fn parses_and_round_trips() {
        let m = Manifest::parse(TEXT).unwrap();
        assert_eq!(m.clip_count(), 1);
        assert_eq!(m.style_id("singing").unwrap(), 1);
        assert_eq!(Manifest::parse(&m.to_toml()).unwrap(), m);
    }

    #[test]
    fn rejects_unknown_style_and_keys() {
        let bad = TEXT.replace("style = \"singing\"", "style = \"opera\"");
        assert!(matches!(Manifest::parse(&bad), Err(Error::Config(_))));
        let bad = TEXT.replace("fps = 25", "fps = 25\nspeed = 3");
        assert!(matches!(Manifest::parse(&bad), Err(Error::Config(_))));
    }
}
