//! Versioned text checkpoint: the run configuration echo, the extractor parameters and
//! every classifier's weights and temperature.
//!
//! ```text
//! msfan-checkpoint 1
//! config <key> = <value>          one line per configuration key
//! tensor w1 <rows> <cols>         followed by <rows> lines of <cols> values
//! tensor b1 1 <h>
//! tensor w2 <rows> <cols>
//! tensor b2 1 <d>
//! classifiers <M>
//! classifier <i> <temperature>    followed by `tensor weights <d> <n_c>`
//! end
//! ```
//!
//! Values are written with 17 significant digits so a load restores them bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use crate::classifier::CosineClassifier;
use crate::config::RunConfig;
use crate::error::{MsfanError, Result};
use crate::numerics::{FeatureExtractor, Matrix};
use crate::trainer::Model;

pub const MAGIC: &str = "msfan-checkpoint";
pub const VERSION: u32 = 1;

fn write_tensor(out: &mut String, name: &str, m: &Matrix) {
    let (rows, cols) = m.shape();
    writeln!(out, "tensor {name} {rows} {cols}").expect("writing to a String");
    for row in m.iter_rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(out, "{}", line.join(" ")).expect("writing to a String");
    }
}

pub fn to_text(config: &RunConfig, model: &Model) -> String {
    let mut out = format!("{MAGIC} {VERSION}\n");
    for line in config.to_text().lines() {
        writeln!(out, "config {line}").expect("writing to a String");
    }
    let e = &model.extractor;
    write_tensor(&mut out, "w1", &e.w1.value);
    write_tensor(&mut out, "b1", &e.b1.value);
    write_tensor(&mut out, "w2", &e.w2.value);
    write_tensor(&mut out, "b2", &e.b2.value);
    writeln!(out, "classifiers {}", model.classifiers.len()).expect("writing to a String");
    for (i, c) in model.classifiers.iter().enumerate() {
        writeln!(out, "classifier {i} {:.16e}", c.temperature).expect("writing to a String");
        write_tensor(&mut out, "weights", &c.weights.value);
    }
    out.push_str("end\n");
    out
}

pub fn save(path: &Path, config: &RunConfig, model: &Model) -> Result<()> {
    std::fs::write(path, to_text(config, model)).map_err(|e| MsfanError::io(path, e))
}

pub fn load(path: &Path) -> Result<(RunConfig, Model)> {
    let text = std::fs::read_to_string(path).map_err(|e| MsfanError::io(path, e))?;
    from_text(&text).map_err(|e| match e {
        MsfanError::Parse { line, message, .. } => MsfanError::Parse {
            path: path.to_path_buf(),
            line,
            message,
        },
        other => other,
    })
}

struct Reader<'a> {
    lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    line_no: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> MsfanError {
        MsfanError::Parse {
            path: Default::default(),
            line: self.line_no,
            message: message.into(),
        }
    }

    fn next(&mut self) -> Result<&'a str> {
        match self.lines.next() {
            Some((i, l)) => {
                self.line_no = i + 1;
                Ok(l)
            }
            None => Err(self.err("unexpected end of checkpoint")),
        }
    }

    fn peek_starts_with(&mut self, prefix: &str) -> bool {
        self.lines.peek().is_some_and(|(_, l)| l.starts_with(prefix))
    }

    fn parse<T: std::str::FromStr>(&self, token: Option<&str>, what: &str) -> Result<T> {
        token
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| self.err(format!("expected {what}")))
    }

    fn tensor(&mut self, name: &str) -> Result<Matrix> {
        let header = self.next()?;
        let mut tok = header.split_whitespace();
        if tok.next() != Some("tensor") || tok.next() != Some(name) {
            return Err(self.err(format!("expected `tensor {name}`, got `{header}`")));
        }
        let rows: usize = self.parse(tok.next(), "row count")?;
        let cols: usize = self.parse(tok.next(), "column count")?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let line = self.next()?;
            let before = data.len();
            for t in line.split_whitespace() {
                data.push(self.parse::<f64>(Some(t), "a number")?);
            }
            if data.len() - before != cols {
                return Err(self.err(format!("tensor {name}: expected {cols} values")));
            }
        }
        Matrix::from_vec(rows, cols, data).map_err(|e| self.err(e.to_string()))
    }
}

pub fn from_text(text: &str) -> Result<(RunConfig, Model)> {
    let mut r = Reader {
        lines: text.lines().enumerate().peekable(),
        line_no: 0,
    };
    let header = r.next()?;
    let mut tok = header.split_whitespace();
    if tok.next() != Some(MAGIC) {
        return Err(r.err("not a checkpoint"));
    }
    let version: u32 = r.parse(tok.next(), "a version number")?;
    if version != VERSION {
        return Err(r.err(format!("unsupported checkpoint version {version}")));
    }

    let mut config = RunConfig::default();
    while r.peek_starts_with("config ") {
        let line = r.next()?;
        let (key, value) = line["config ".len()..]
            .split_once('=')
            .ok_or_else(|| r.err("expected `config key = value`"))?;
        config.set(key.trim(), value.trim())?;
    }
    config.validate()?;

    let w1 = r.tensor("w1")?;
    let b1 = r.tensor("b1")?;
    let w2 = r.tensor("w2")?;
    let b2 = r.tensor("b2")?;
    let extractor = FeatureExtractor::from_parameters(w1, b1.into_vec(), w2, b2.into_vec())?;

    let line = r.next()?;
    let count: usize = r.parse(line.strip_prefix("classifiers "), "`classifiers <count>`")?;
    let mut classifiers = Vec::with_capacity(count);
    for i in 0..count {
        let line = r.next()?;
        let mut tok = line.split_whitespace();
        if tok.next() != Some("classifier") || r.parse::<usize>(tok.next(), "classifier index")? != i {
            return Err(r.err(format!("expected `classifier {i} <temperature>`")));
        }
        let temperature: f64 = r.parse(tok.next(), "a temperature")?;
        let weights = r.tensor("weights")?;
        if weights.rows() != extractor.feature_dim() {
            return Err(MsfanError::Dimension(format!(
                "classifier {i} expects {}-dimensional features, extractor emits {}",
                weights.rows(),
                extractor.feature_dim()
            )));
        }
        classifiers.push(CosineClassifier::from_weights(weights, temperature)?);
    }
    if r.next()? != "end" {
        return Err(r.err("expected `end`"));
    }
    Ok((config, Model { extractor, classifiers }))
}
