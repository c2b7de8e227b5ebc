//! Plain-text checkpoint files.
//!
//! ```text
//! mbcd-checkpoint <format version>
//! epoch <selected epoch>
//! [student]
//! <name> <dim>x<dim>... <value> <value> ...
//! [teacher]
//! ...
//! ```
//!
//! Values use Rust's shortest round-trip formatting, so a save/load cycle is
//! bitwise exact. Loading checks every name and shape against a model built
//! from the experiment's `ModelConfig`; the file is the only source of
//! parameter values.

use std::fmt::Write as _;
use std::path::Path;

use mbcd_core::model::{init_params, ModelConfig};
use mbcd_core::Tensor;

use crate::error::{io_err, LabError, Result};
use crate::run::Checkpoint;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "mbcd-checkpoint";

fn write_section(out: &mut String, title: &str, named: Vec<(String, &Tensor)>) {
    let _ = writeln!(out, "[{title}]");
    for (name, t) in named {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let _ = write!(out, "{name} {}", shape.join("x"));
        for v in t.data() {
            let _ = write!(out, " {v:?}");
        }
        out.push('\n');
    }
}

pub fn to_text(ckpt: &Checkpoint) -> String {
    let mut out = format!("{MAGIC} {CHECKPOINT_VERSION}\nepoch {}\n", ckpt.epoch);
    write_section(&mut out, "student", ckpt.student.named());
    write_section(&mut out, "teacher", ckpt.teacher.named());
    out
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, to_text(ckpt)).map_err(io_err(path))
}

struct Reader<'a> {
    path: &'a Path,
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Reader<'a> {
    fn err(&self, line: usize, message: impl Into<String>) -> LabError {
        LabError::Parse {
            path: self.path.to_path_buf(),
            message: format!("line {}: {}", line + 1, message.into()),
        }
    }

    fn next(&mut self) -> Result<(usize, &'a str)> {
        let n = self.lines.clone().next().map_or(0, |(i, _)| i);
        self.lines.next().ok_or_else(|| self.err(n, "unexpected end of file"))
    }

    fn header(&mut self, key: &str) -> Result<&'a str> {
        let (i, line) = self.next()?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| self.err(i, format!("expected `{key} ...`")))
    }

    fn section(&mut self, title: &str, targets: Vec<(String, &mut Tensor)>) -> Result<()> {
        let (i, line) = self.next()?;
        if line != format!("[{title}]") {
            return Err(self.err(i, format!("expected section [{title}]")));
        }
        for (name, tensor) in targets {
            let (i, line) = self.next()?;
            let mut fields = line.split(' ');
            let got = fields.next().unwrap_or_default();
            if got != name {
                return Err(self.err(i, format!("expected tensor `{name}`, found `{got}`")));
            }
            let shape: Vec<String> = tensor.shape().iter().map(usize::to_string).collect();
            let shape = shape.join("x");
            let got = fields.next().unwrap_or_default();
            if got != shape {
                return Err(self.err(i, format!("`{name}` has shape {got}, model expects {shape}")));
            }
            let values = fields
                .map(|f| f.parse::<f64>().map_err(|_| self.err(i, format!("bad number `{f}`"))))
                .collect::<Result<Vec<f64>>>()?;
            if values.len() != tensor.len() {
                return Err(self.err(i, format!("`{name}` has {} values, expected {}", values.len(), tensor.len())));
            }
            tensor.data_mut().copy_from_slice(&values);
        }
        Ok(())
    }
}

pub fn from_text(text: &str, model: &ModelConfig, origin: &Path) -> Result<Checkpoint> {
    let mut r = Reader {
        path: origin,
        lines: text.lines().enumerate(),
    };
    let version = r.header(MAGIC)?;
    if version != CHECKPOINT_VERSION.to_string() {
        return Err(r.err(0, format!("checkpoint version {version} is not supported")));
    }
    let epoch = r.header("epoch")?;
    let epoch: usize = epoch.parse().map_err(|_| r.err(1, format!("bad epoch `{epoch}`")))?;
    let mut student = init_params(model)?;
    let mut teacher = student.fused();
    r.section("student", student.named_mut())?;
    r.section("teacher", teacher.named_mut())?;
    if let Some((i, _)) = r.lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(r.err(i, "trailing content"));
    }
    Ok(Checkpoint { epoch, student, teacher })
}

pub fn load(path: &Path, model: &ModelConfig) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    from_text(&text, model, path)
}
