//! Sectioned key/value text documents used for all solver inputs and
//! outputs.
//!
//! The format is line-oriented and diff-friendly: `[section]` headers,
//! `key = value` entries (repeated keys allowed, order preserved) and
//! `#` comments. Floats are written in shortest-roundtrip form, so
//! writing and re-reading a document is lossless.

use crate::geom::{Real, RigidTransform};

use super::PipelineError;

#[derive(Debug, Clone, Default)]
pub struct Document {
    sections: Vec<(String, Vec<(String, String)>)>,
}

impl Document {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn section(&mut self, name: &str) -> &mut Self {
        self.sections.push((name.to_string(), Vec::new()));
        self
    }

    fn current(&mut self) -> &mut Vec<(String, String)> {
        if self.sections.is_empty() {
            self.sections.push(("".to_string(), Vec::new()));
        }
        &mut self.sections.last_mut().unwrap().1
    }

    pub fn entry(&mut self, key: &str, value: impl Into<String>) -> &mut Self {
        let value = value.into();
        self.current().push((key.to_string(), value));
        self
    }

    pub fn entry_real(&mut self, key: &str, value: Real) -> &mut Self {
        self.entry(key, format!("{value:?}"))
    }

    pub fn entry_reals(&mut self, key: &str, values: &[Real]) -> &mut Self {
        let joined =
            values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ");
        self.entry(key, joined)
    }

    pub fn entry_usize(&mut self, key: &str, value: usize) -> &mut Self {
        self.entry(key, value.to_string())
    }

    pub fn entry_bool(&mut self, key: &str, value: bool) -> &mut Self {
        self.entry(key, if value { "true" } else { "false" })
    }

    pub fn entry_pose(&mut self, key: &str, pose: &RigidTransform) -> &mut Self {
        self.entry_reals(key, &pose.to_matrix_row_major())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, entries) in &self.sections {
            if !name.is_empty() {
                out.push_str(&format!("[{name}]\n"));
            }
            for (key, value) in entries {
                out.push_str(&format!("{key} = {value}\n"));
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut doc = Document::new();
        let mut has_section = false;
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                doc.section(name.trim());
                has_section = true;
            } else if let Some((key, value)) = line.split_once('=') {
                if !has_section {
                    doc.section("");
                    has_section = true;
                }
                doc.entry(key.trim(), value.trim().to_string());
            } else {
                return Err(PipelineError::Parse(format!(
                    "line {}: expected `[section]` or `key = value`, got `{line}`",
                    line_no + 1
                )));
            }
        }
        Ok(doc)
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.sections.iter().any(|(n, _)| n == section)
    }

    /// First value of `key` in `section`.
    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .iter()
            .find(|(n, _)| n == section)?
            .1
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// All values of `key` in `section`, in document order.
    pub fn get_all(&self, section: &str, key: &str) -> Vec<&str> {
        self.sections
            .iter()
            .filter(|(n, _)| n == section)
            .flat_map(|(_, entries)| entries.iter())
            .filter(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .collect()
    }

    pub fn require(&self, section: &str, key: &str) -> Result<&str, PipelineError> {
        self.get(section, key).ok_or_else(|| {
            PipelineError::Parse(format!("missing `{key}` in section [{section}]"))
        })
    }

    pub fn require_real(&self, section: &str, key: &str) -> Result<Real, PipelineError> {
        parse_real(self.require(section, key)?)
    }

    pub fn require_usize(&self, section: &str, key: &str) -> Result<usize, PipelineError> {
        self.require(section, key)?
            .parse()
            .map_err(|_| PipelineError::Parse(format!("bad integer for `{key}`")))
    }

    pub fn require_bool(&self, section: &str, key: &str) -> Result<bool, PipelineError> {
        match self.require(section, key)? {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            other => Err(PipelineError::Parse(format!("bad boolean `{other}` for `{key}`"))),
        }
    }

    pub fn require_reals(&self, section: &str, key: &str) -> Result<Vec<Real>, PipelineError> {
        parse_reals(self.require(section, key)?)
    }

    pub fn require_pose(&self, section: &str, key: &str) -> Result<RigidTransform, PipelineError> {
        parse_pose(self.require(section, key)?)
    }
}

pub fn parse_real(text: &str) -> Result<Real, PipelineError> {
    text.trim()
        .parse()
        .map_err(|_| PipelineError::Parse(format!("bad number `{text}`")))
}

pub fn parse_reals(text: &str) -> Result<Vec<Real>, PipelineError> {
    text.split_whitespace().map(parse_real).collect()
}

pub fn parse_pose(text: &str) -> Result<RigidTransform, PipelineError> {
    let values = parse_reals(text)?;
    let arr: [Real; 16] = values
        .try_into()
        .map_err(|v: Vec<Real>| PipelineError::Parse(format!("pose needs 16 numbers, got {}", v.len())))?;
    RigidTransform::from_matrix_row_major(&arr)
        .map_err(|e| PipelineError::Parse(format!("bad pose matrix: {e}")))
}

/// Standalone pose document (used for object poses and adjustments).
pub fn pose_document(pose: &RigidTransform, rms: Option<Real>, converged: Option<bool>) -> String {
    let mut doc = Document::new();
    doc.section("pose").entry_pose("matrix", pose);
    if let Some(rms) = rms {
        doc.entry_real("rms", rms);
    }
    if let Some(converged) = converged {
        doc.entry_bool("converged", converged);
    }
    doc.to_text()
}

pub fn read_pose_document(text: &str) -> Result<RigidTransform, PipelineError> {
    Document::parse(text)?.require_pose("pose", "matrix")
}
