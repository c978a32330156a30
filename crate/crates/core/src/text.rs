//! Class-prompt rendering and frozen text embeddings.
//!
//! The text encoder itself is never trained here: embeddings come either
//! from a file-backed table produced offline (prompt string → D floats) or
//! from a deterministic seeded stub. Both providers are pure — the same
//! prompt always yields the same row, before and after any training.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng;
use crate::volume::LabelScheme;

pub const PLACEHOLDER: &str = "{category}";

/// The four fixed prompt patterns, each with one `{category}` placeholder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateId {
    V1,
    V2,
    V3,
    V4,
}

impl TemplateId {
    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::V1 => "v1",
            TemplateId::V2 => "v2",
            TemplateId::V3 => "v3",
            TemplateId::V4 => "v4",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub template: String,
}

impl PromptTemplate {
    pub fn from_id(id: TemplateId) -> PromptTemplate {
        let template = match id {
            TemplateId::V1 => "A photo of a {category}",
            TemplateId::V2 => "A computerized tomography of a {category}",
            TemplateId::V3 => "There is a {category} in this computerized tomography",
            TemplateId::V4 => "A computerized tomography of a {category} with small branches",
        };
        PromptTemplate {
            id,
            template: template.to_string(),
        }
    }

    pub fn parse(s: &str) -> Result<PromptTemplate> {
        let id = match s.trim() {
            "v1" => TemplateId::V1,
            "v2" => TemplateId::V2,
            "v3" => TemplateId::V3,
            "v4" => TemplateId::V4,
            other => {
                return Err(Error::invalid(format!(
                    "unknown prompt template '{other}' (expected v1..v4)"
                )))
            }
        };
        Ok(PromptTemplate::from_id(id))
    }

    pub fn render(&self, class_name: &str) -> String {
        self.template.replace(PLACEHOLDER, class_name)
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.id.as_str())
    }
}

/// Substitutes each class name into the template, preserving order.
pub fn render_prompts(t: &PromptTemplate, class_names: &[String]) -> Result<Vec<String>> {
    if class_names.is_empty() {
        return Err(Error::invalid("render_prompts needs at least one class"));
    }
    if t.template.matches(PLACEHOLDER).count() != 1 {
        return Err(Error::invalid(format!(
            "template '{}' must contain exactly one {PLACEHOLDER}",
            t.template
        )));
    }
    Ok(class_names.iter().map(|c| t.render(c)).collect())
}

/// Foreground class names in label order for a scheme.
pub fn default_class_names(scheme: LabelScheme) -> Vec<String> {
    let names: &[&str] = match scheme {
        LabelScheme::ThreeClass => &["pulmonary artery", "pulmonary vein"],
        LabelScheme::FiveClass => &[
            "left pulmonary artery",
            "left pulmonary vein",
            "right pulmonary artery",
            "right pulmonary vein",
        ],
    };
    names.iter().map(|s| s.to_string()).collect()
}

/// Prompt-keyed table of precomputed embedding rows.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    rows: BTreeMap<String, Vec<f64>>,
    dim: usize,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> EmbeddingTable {
        EmbeddingTable {
            rows: BTreeMap::new(),
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn insert(&mut self, prompt: &str, values: Vec<f64>) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::invalid(format!(
                "embedding row for '{prompt}' has {} values, table dim is {}",
                values.len(),
                self.dim
            )));
        }
        self.rows.insert(prompt.to_string(), values);
        Ok(())
    }

    pub fn lookup(&self, prompt: &str) -> Option<&[f64]> {
        self.rows.get(prompt).map(|v| v.as_slice())
    }

    /// Reads tab-separated rows: `prompt<TAB>f1 f2 … fD`. Blank lines and
    /// `#` comments are skipped; all rows must share one width.
    pub fn load(path: &Path) -> Result<EmbeddingTable> {
        let textual = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rows = BTreeMap::new();
        let mut dim = None;
        for (lineno, line) in textual.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (prompt, rest) = line.split_once('\t').ok_or_else(|| {
                Error::bad_file(path, format!("line {}: missing tab separator", lineno + 1))
            })?;
            let values: Vec<f64> = rest
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>().map_err(|_| {
                        Error::bad_file(path, format!("line {}: bad float '{tok}'", lineno + 1))
                    })
                })
                .collect::<Result<_>>()?;
            if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
                return Err(Error::bad_file(
                    path,
                    format!("line {}: empty or non-finite row", lineno + 1),
                ));
            }
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(Error::bad_file(
                        path,
                        format!(
                            "line {}: row width {} != table width {d}",
                            lineno + 1,
                            values.len()
                        ),
                    ))
                }
                _ => {}
            }
            rows.insert(prompt.to_string(), values);
        }
        let dim = dim.ok_or_else(|| Error::bad_file(path, "no embedding rows"))?;
        Ok(EmbeddingTable { rows, dim })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (prompt, values) in &self.rows {
            out.push_str(prompt);
            out.push('\t');
            for (i, v) in values.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                out.push_str(&format!("{v}"));
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Source of frozen prompt embeddings.
#[derive(Debug, Clone)]
pub enum EmbedProvider {
    /// Precomputed table loaded from disk.
    File { path: PathBuf, table: EmbeddingTable },
    /// Seeded hash-derived unit vectors; no file needed.
    Stub { seed: u64, dim: usize },
}

impl EmbedProvider {
    /// Parses `file:<path>` or `stub:<seed>`. `dim` is the embedding width
    /// the run expects; a file-backed table must match it.
    pub fn parse(spec: &str, dim: usize) -> Result<EmbedProvider> {
        if dim == 0 {
            return Err(Error::invalid("embedding dim must be positive"));
        }
        if let Some(path) = spec.strip_prefix("file:") {
            let path = PathBuf::from(path);
            let table = EmbeddingTable::load(&path)?;
            if table.dim() != dim {
                return Err(Error::invalid(format!(
                    "embedding table {} has dim {}, run expects {dim}",
                    path.display(),
                    table.dim()
                )));
            }
            Ok(EmbedProvider::File { path, table })
        } else if let Some(seed) = spec.strip_prefix("stub:") {
            let seed: u64 = seed
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad stub seed in '{spec}'")))?;
            Ok(EmbedProvider::Stub { seed, dim })
        } else {
            Err(Error::invalid(format!(
                "embed provider '{spec}' must be file:<path> or stub:<seed>"
            )))
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            EmbedProvider::File { table, .. } => table.dim(),
            EmbedProvider::Stub { dim, .. } => *dim,
        }
    }

    /// Embeds one prompt. Pure: identical inputs give identical rows.
    pub fn embed_one(&self, prompt: &str) -> Result<Vec<f64>> {
        match self {
            EmbedProvider::File { path, table } => table
                .lookup(prompt)
                .map(|row| row.to_vec())
                .ok_or_else(|| {
                    Error::MissingPrompt(format!(
                        "embedding table {} has no row for prompt '{prompt}'",
                        path.display()
                    ))
                }),
            EmbedProvider::Stub { seed, dim } => {
                let mut r = rng::stream_keyed(*seed, "text.embed", prompt.as_bytes());
                let mut row: Vec<f64> = (0..*dim).map(|_| r.gen_range(-1.0..=1.0)).collect();
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(Error::invalid("degenerate zero stub embedding"));
                }
                row.iter_mut().for_each(|v| *v /= norm);
                Ok(row)
            }
        }
    }

    /// Embeds all prompts into a [K, D] matrix.
    pub fn embed(&self, prompts: &[String]) -> Result<Tensor> {
        let d = self.dim();
        let mut data = Vec::with_capacity(prompts.len() * d);
        for p in prompts {
            data.extend(self.embed_one(p)?);
        }
        Tensor::from_vec(&[prompts.len(), d], data)
    }
}
