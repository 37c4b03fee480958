//! Plain-text checkpoints.
//!
//! ```text
//! turbo-checkpoint v1
//! step 400
//! group gen 6
//! tensor 2 2 64
//! 0.013 -0.2 ...
//! ...
//! end
//! ```
//!
//! A group is a named list of tensors; each tensor is a header line with
//! its rank and shape followed by one line of values. Values use Rust's
//! shortest round-trip formatting, so save and load are exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::autodiff::Tensor;

pub const MAGIC: &str = "turbo-checkpoint v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("checkpoint is missing group '{0}'")]
    Missing(String),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub step: usize,
    pub groups: BTreeMap<String, Vec<Tensor>>,
}

impl Checkpoint {
    pub fn new(step: usize) -> Self {
        Self {
            step,
            groups: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensors: Vec<Tensor>) {
        self.groups.insert(name.to_string(), tensors);
    }

    pub fn take(&mut self, name: &str) -> Result<Vec<Tensor>, CheckpointError> {
        self.groups.remove(name).ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{MAGIC}\nstep {}\n", self.step);
        for (name, ts) in &self.groups {
            writeln!(s, "group {name} {}", ts.len()).unwrap();
            for t in ts {
                s.push_str("tensor ");
                s.push_str(&t.shape().len().to_string());
                for d in t.shape() {
                    write!(s, " {d}").unwrap();
                }
                s.push('\n');
                let vals: Vec<String> = t.data().iter().map(|v| format!("{v:?}")).collect();
                s.push_str(&vals.join(" "));
                s.push('\n');
            }
        }
        s.push_str("end\n");
        s
    }

    pub fn parse(text: &str) -> Result<Self, CheckpointError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| CheckpointError::Format {
                line: 0,
                message: format!("unexpected end of file, expected {what}"),
            })
        };
        let bad = |line: usize, message: String| CheckpointError::Format { line, message };

        let (n, head) = next("header")?;
        if head != MAGIC {
            return Err(bad(n, format!("expected '{MAGIC}'")));
        }
        let (n, step) = next("step")?;
        let step = step
            .strip_prefix("step ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(n, "expected 'step <n>'".into()))?;
        let mut ck = Checkpoint::new(step);
        loop {
            let (n, line) = next("group or end")?;
            if line == "end" {
                break;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let (name, count) = match parts.as_slice() {
                ["group", name, count] => (
                    name.to_string(),
                    count.parse::<usize>().map_err(|_| bad(n, "bad tensor count".into()))?,
                ),
                _ => return Err(bad(n, "expected 'group <name> <count>'".into())),
            };
            let mut ts = Vec::with_capacity(count);
            for _ in 0..count {
                let (n, header) = next("tensor header")?;
                let dims: Vec<usize> = header
                    .strip_prefix("tensor ")
                    .ok_or_else(|| bad(n, "expected 'tensor <rank> <dims..>'".into()))?
                    .split_whitespace()
                    .map(|v| v.parse().map_err(|_| bad(n, format!("bad dimension '{v}'"))))
                    .collect::<Result<_, _>>()?;
                if dims.is_empty() || dims[0] != dims.len() - 1 {
                    return Err(bad(n, "rank does not match the number of dimensions".into()));
                }
                let shape = dims[1..].to_vec();
                let (n, body) = next("tensor values")?;
                let data: Vec<f64> = body
                    .split_whitespace()
                    .map(|v| v.parse().map_err(|_| bad(n, format!("bad value '{v}'"))))
                    .collect::<Result<_, _>>()?;
                ts.push(Tensor::new(shape, data).map_err(|e| bad(n, e.to_string()))?);
            }
            ck.groups.insert(name, ts);
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        std::fs::write(&tmp, self.to_text()).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step_{step:08}.ckpt"))
}

/// The highest-step checkpoint in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Option<(usize, PathBuf)> {
    std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let step = name.strip_prefix("step_")?.strip_suffix(".ckpt")?.parse().ok()?;
            Some((step, e.path()))
        })
        .max_by_key(|(s, _)| *s)
}
