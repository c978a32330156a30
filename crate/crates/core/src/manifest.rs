//! Dataset manifests: tab-separated case lists and deterministic splits.
//!
//! Each non-comment line names one case:
//!
//! ```text
//! volumes/case_0007.nii.gz	labels/case_0007.nii.gz	half_left
//! ```
//!
//! Lines starting with `#` are comments; a `# seed: N` comment records the
//! generator seed of a synthetic dataset. Splitting shuffles the case list
//! with a seeded stream and sizes the parts by largest-remainder rounding,
//! so the same (manifest, ratios, seed) always yields the same partition.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

/// How much of a case is annotated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Labeling {
    /// Both sides annotated with all foreground classes.
    Full,
    /// Only the left half is annotated; the right half is unlabeled.
    HalfLeft,
    /// Only the right half is annotated.
    HalfRight,
}

impl Labeling {
    pub fn as_str(self) -> &'static str {
        match self {
            Labeling::Full => "full",
            Labeling::HalfLeft => "half_left",
            Labeling::HalfRight => "half_right",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Labeling::Full),
            "half_left" => Some(Labeling::HalfLeft),
            "half_right" => Some(Labeling::HalfRight),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub volume: PathBuf,
    pub labels: PathBuf,
    pub labeling: Labeling,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Seed recorded by the dataset generator, if any.
    pub seed: Option<u64>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seed = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(comment) = trimmed.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("seed:") {
                    seed = Some(v.trim().parse::<u64>().map_err(|_| {
                        Error::invalid(format!("line {}: bad seed comment {trimmed:?}", lineno + 1))
                    })?);
                }
                continue;
            }
            let mut fields = line.split('\t');
            let volume = fields.next().unwrap_or("");
            let labels = fields.next().unwrap_or("");
            let labeling = fields.next().unwrap_or("");
            if volume.is_empty() || labels.is_empty() || fields.next().is_some() {
                return Err(Error::invalid(format!(
                    "line {}: expected 3 tab-separated fields",
                    lineno + 1
                )));
            }
            let labeling = Labeling::parse(labeling).ok_or_else(|| {
                Error::invalid(format!(
                    "line {}: unknown labeling {labeling:?} (expected full, half_left or half_right)",
                    lineno + 1
                ))
            })?;
            entries.push(ManifestEntry {
                volume: PathBuf::from(volume),
                labels: PathBuf::from(labels),
                labeling,
            });
        }
        Ok(Manifest { entries, seed })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Copy with relative case paths joined onto `root` (absolute paths are
    /// kept as-is). Lets a manifest travel with its dataset directory.
    pub fn resolve_against(&self, root: &Path) -> Manifest {
        let join = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { root.join(p) };
        Manifest {
            entries: self
                .entries
                .iter()
                .map(|e| ManifestEntry {
                    volume: join(&e.volume),
                    labels: join(&e.labels),
                    labeling: e.labeling,
                })
                .collect(),
            seed: self.seed,
        }
    }

    /// Deterministic train/val/test partition.
    ///
    /// Cases are shuffled once with a stream derived from `seed`, then cut
    /// into parts sized by largest-remainder rounding of `ratios`. Every case
    /// lands in exactly one part.
    pub fn split(&self, ratios: [u64; 3], seed: u64) -> Result<[Manifest; 3]> {
        if ratios.iter().sum::<u64>() == 0 {
            return Err(Error::invalid("split ratios sum to zero"));
        }
        let mut shuffled = self.entries.clone();
        shuffled.shuffle(&mut rng::stream(seed, "manifest.split", 0));
        let counts = largest_remainder(shuffled.len(), &ratios);
        let mut parts = Vec::with_capacity(3);
        let mut rest = shuffled.as_slice();
        for &c in &counts {
            let (head, tail) = rest.split_at(c);
            parts.push(Manifest {
                entries: head.to_vec(),
                seed: self.seed,
            });
            rest = tail;
        }
        debug_assert!(rest.is_empty());
        let mut it = parts.into_iter();
        Ok([it.next().unwrap(), it.next().unwrap(), it.next().unwrap()])
    }
}

impl fmt::Display for Manifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(seed) = self.seed {
            writeln!(f, "# seed: {seed}")?;
        }
        for e in &self.entries {
            writeln!(
                f,
                "{}\t{}\t{}",
                e.volume.display(),
                e.labels.display(),
                e.labeling.as_str()
            )?;
        }
        Ok(())
    }
}

/// Apportion `n` items across weights: exact quotas floored, then leftovers
/// go to the largest fractional parts (ties to the earlier part). All integer
/// arithmetic, so the result is exact and platform-independent.
fn largest_remainder(n: usize, weights: &[u64; 3]) -> [usize; 3] {
    let total: u64 = weights.iter().sum();
    let n64 = n as u64;
    let mut counts = [0usize; 3];
    let mut rems = [0u64; 3];
    let mut assigned = 0usize;
    for i in 0..3 {
        counts[i] = (n64 * weights[i] / total) as usize;
        rems[i] = n64 * weights[i] % total;
        assigned += counts[i];
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| rems[b].cmp(&rems[a]).then(a.cmp(&b)));
    for k in 0..(n - assigned) {
        counts[order[k]] += 1;
    }
    counts
}
