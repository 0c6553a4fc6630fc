//! Plain-text matrix documents.
//!
//! Model files and QP dumps share one line-oriented format. The first line is
//! a magic header `<kind> <version>`; every following non-blank line that does
//! not start with `#` opens an entry:
//!
//! ```text
//! elm-model 1
//! # comment
//! text activation sigmoid
//! int seed 42
//! scalar lambda 0.001
//! vector bias 3
//! 0.1 -0.25 0.5
//! matrix input_weights 2 3
//! 0.1 0.2 0.3
//! -0.4 0.5 -0.6
//! ```
//!
//! Vectors are written on one line, matrices one row per line (row-major).
//! Floats use Rust's shortest round-trip representation, so parsing a written
//! document reproduces every value bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Text(String),
    Int(u64),
    Scalar(f64),
    Vector(DVector<f64>),
    Matrix(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixDoc {
    kind: String,
    version: u32,
    comments: Vec<String>,
    entries: Vec<(String, Entry)>,
}

impl MatrixDoc {
    pub fn new(kind: &str, version: u32) -> Self {
        MatrixDoc {
            kind: kind.to_string(),
            version,
            comments: Vec::new(),
            entries: Vec::new(),
        }
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn comment(&mut self, line: impl Into<String>) -> &mut Self {
        self.comments.push(line.into());
        self
    }

    pub fn push(&mut self, name: &str, entry: Entry) -> &mut Self {
        assert!(
            !name.is_empty() && !name.contains(char::is_whitespace),
            "entry names must be single tokens"
        );
        self.entries.push((name.to_string(), entry));
        self
    }

    pub fn text(&mut self, name: &str, value: &str) -> &mut Self {
        self.push(name, Entry::Text(value.to_string()))
    }

    pub fn int(&mut self, name: &str, value: u64) -> &mut Self {
        self.push(name, Entry::Int(value))
    }

    pub fn scalar(&mut self, name: &str, value: f64) -> &mut Self {
        self.push(name, Entry::Scalar(value))
    }

    pub fn vector(&mut self, name: &str, value: &DVector<f64>) -> &mut Self {
        self.push(name, Entry::Vector(value.clone()))
    }

    pub fn matrix(&mut self, name: &str, value: &DMatrix<f64>) -> &mut Self {
        self.push(name, Entry::Matrix(value.clone()))
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    fn missing(name: &str) -> Error {
        Error::Data(format!("missing entry `{name}`"))
    }

    pub fn get_text(&self, name: &str) -> Result<&str> {
        match self.get(name) {
            Some(Entry::Text(s)) => Ok(s),
            Some(_) => Err(Error::Data(format!("entry `{name}` is not text"))),
            None => Err(Self::missing(name)),
        }
    }

    pub fn get_int(&self, name: &str) -> Result<u64> {
        match self.get(name) {
            Some(Entry::Int(v)) => Ok(*v),
            Some(_) => Err(Error::Data(format!("entry `{name}` is not an integer"))),
            None => Err(Self::missing(name)),
        }
    }

    pub fn get_scalar(&self, name: &str) -> Result<f64> {
        match self.get(name) {
            Some(Entry::Scalar(v)) => Ok(*v),
            Some(_) => Err(Error::Data(format!("entry `{name}` is not a scalar"))),
            None => Err(Self::missing(name)),
        }
    }

    pub fn get_vector(&self, name: &str) -> Result<&DVector<f64>> {
        match self.get(name) {
            Some(Entry::Vector(v)) => Ok(v),
            Some(_) => Err(Error::Data(format!("entry `{name}` is not a vector"))),
            None => Err(Self::missing(name)),
        }
    }

    pub fn get_matrix(&self, name: &str) -> Result<&DMatrix<f64>> {
        match self.get(name) {
            Some(Entry::Matrix(m)) => Ok(m),
            Some(_) => Err(Error::Data(format!("entry `{name}` is not a matrix"))),
            None => Err(Self::missing(name)),
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {}", self.kind, self.version);
        for c in &self.comments {
            let _ = writeln!(out, "# {c}");
        }
        for (name, entry) in &self.entries {
            match entry {
                Entry::Text(s) => {
                    let _ = writeln!(out, "text {name} {s}");
                }
                Entry::Int(v) => {
                    let _ = writeln!(out, "int {name} {v}");
                }
                Entry::Scalar(v) => {
                    let _ = writeln!(out, "scalar {name} {v:?}");
                }
                Entry::Vector(v) => {
                    let _ = writeln!(out, "vector {name} {}", v.len());
                    write_row(&mut out, v.iter());
                }
                Entry::Matrix(m) => {
                    let _ = writeln!(out, "matrix {name} {} {}", m.nrows(), m.ncols());
                    for r in 0..m.nrows() {
                        write_row(&mut out, m.row(r).iter());
                    }
                }
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());

        let (line_no, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty document".into(),
        })?;
        let mut head = header.split_whitespace();
        let kind = head.next().unwrap_or_default().to_string();
        let version = head
            .next()
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| parse_err(line_no, "header must be `<kind> <version>`"))?;

        let mut doc = MatrixDoc::new(&kind, version);
        let mut data_line = |what: &str| -> Result<(usize, &str)> {
            loop {
                match lines.next() {
                    Some((_, l)) if l.starts_with('#') => continue,
                    Some(pair) => return Ok(pair),
                    None => return Err(parse_err(0, &format!("unexpected end of file in {what}"))),
                }
            }
        };

        loop {
            let (line_no, line) = match data_line("entry") {
                Ok(pair) => pair,
                Err(_) => break,
            };
            let mut tok = line.split_whitespace();
            let tag = tok.next().unwrap_or_default();
            let name = tok
                .next()
                .ok_or_else(|| parse_err(line_no, "entry without a name"))?
                .to_string();
            let entry = match tag {
                "text" => {
                    let rest: Vec<&str> = tok.collect();
                    Entry::Text(rest.join(" "))
                }
                "int" => Entry::Int(parse_next(&mut tok, line_no)?),
                "scalar" => Entry::Scalar(parse_next(&mut tok, line_no)?),
                "vector" => {
                    let len: usize = parse_next(&mut tok, line_no)?;
                    let values = if len == 0 {
                        Vec::new()
                    } else {
                        let (ln, row) = data_line(&name)?;
                        parse_row(row, len, ln)?
                    };
                    Entry::Vector(DVector::from_vec(values))
                }
                "matrix" => {
                    let rows: usize = parse_next(&mut tok, line_no)?;
                    let cols: usize = parse_next(&mut tok, line_no)?;
                    let mut values = Vec::with_capacity(rows * cols);
                    if cols > 0 {
                        for _ in 0..rows {
                            let (ln, row) = data_line(&name)?;
                            values.extend(parse_row(row, cols, ln)?);
                        }
                    }
                    Entry::Matrix(DMatrix::from_row_slice(rows, cols, &values))
                }
                other => return Err(parse_err(line_no, &format!("unknown entry type `{other}`"))),
            };
            doc.entries.push((name, entry));
        }
        Ok(doc)
    }
}

fn write_row<'a>(out: &mut String, values: impl Iterator<Item = &'a f64>) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(' ');
        }
        let _ = write!(out, "{v:?}");
        first = false;
    }
    out.push('\n');
}

fn parse_err(line: usize, msg: &str) -> Error {
    Error::Parse {
        line,
        msg: msg.to_string(),
    }
}

fn parse_next<'a, T: std::str::FromStr>(
    tok: &mut impl Iterator<Item = &'a str>,
    line: usize,
) -> Result<T> {
    tok.next()
        .and_then(|t| t.parse::<T>().ok())
        .ok_or_else(|| parse_err(line, "malformed number"))
}

fn parse_row(row: &str, expected: usize, line: usize) -> Result<Vec<f64>> {
    let values = row
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| parse_err(line, &e.to_string()))?;
    if values.len() != expected {
        return Err(parse_err(
            line,
            &format!("expected {expected} values, found {}", values.len()),
        ));
    }
    Ok(values)
}
