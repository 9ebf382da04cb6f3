//! Plain-text parameter container.
//!
//! ```text
//! eauc-checkpoint 1
//! kind <model kind>
//! meta <key> <value to end of line>
//! array <name> <rows> <cols>
//! <rows*cols values, space separated, row-major>
//! end
//! ```
//!
//! `meta` and `array` entries may repeat and keep their order. Values are
//! written in shortest round-trip form, so save/load is bit exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::{Shape, Tensor};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "eauc-checkpoint";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>) -> Self {
        Checkpoint {
            kind: kind.into(),
            meta: Vec::new(),
            arrays: Vec::new(),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn array(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MAGIC} {FORMAT_VERSION}\nkind {}\n", self.kind);
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {k} {v}");
        }
        for (name, t) in &self.arrays {
            let s = t.shape();
            let _ = writeln!(out, "array {name} {} {}", s.rows, s.cols);
            let values: Vec<String> = t.data().iter().map(f64::to_string).collect();
            let _ = writeln!(out, "{}", values.join(" "));
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: line as u64 + 1,
            msg,
        };
        let mut lines = text.lines().enumerate();
        let (_, first) = lines.next().ok_or_else(|| bad(0, "empty checkpoint".into()))?;
        let version = first
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| bad(0, format!("not a checkpoint (expected '{MAGIC} <version>')")))?;
        if version != FORMAT_VERSION.to_string() {
            return Err(bad(0, format!("unsupported format version '{version}'")));
        }
        let (n, kind_line) = lines.next().ok_or_else(|| bad(1, "missing kind".into()))?;
        let kind = kind_line.strip_prefix("kind ").ok_or_else(|| bad(n, "expected 'kind <name>'".into()))?;
        let mut ckpt = Checkpoint::new(kind.trim());
        while let Some((n, line)) = lines.next() {
            if line == "end" {
                return Ok(ckpt);
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                ckpt.meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("array ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                let [name, rows, cols] = parts[..] else {
                    return Err(bad(n, "expected 'array <name> <rows> <cols>'".into()));
                };
                let dims = rows.parse::<usize>().ok().zip(cols.parse::<usize>().ok());
                let (rows, cols) = dims.ok_or_else(|| bad(n, "bad array dimensions".into()))?;
                let (m, data_line) = lines.next().ok_or_else(|| bad(n + 1, "missing array data".into()))?;
                let data = data_line
                    .split_whitespace()
                    .map(|v| v.parse::<f64>().map_err(|_| bad(m, format!("bad value '{v}'"))))
                    .collect::<Result<Vec<f64>>>()?;
                if data.len() != rows * cols {
                    return Err(bad(m, format!("array {name}: expected {} values, found {}", rows * cols, data.len())));
                }
                ckpt.arrays.push((name.to_string(), Tensor::new(Shape::new(rows, cols), data)));
            } else {
                return Err(bad(n, format!("unexpected line '{line}'")));
            }
        }
        Err(bad(text.lines().count(), "missing 'end'".into()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::parse(path, &text)
    }
}
