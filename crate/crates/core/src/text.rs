//! Line-oriented ASCII helpers shared by every dump format.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{Rotation3, Vec3};

/// Tokens of one non-empty, non-comment line.
pub struct Line<'a> {
    pub file: &'a Path,
    pub number: usize,
    tokens: Vec<&'a str>,
    pos: usize,
}

impl<'a> Line<'a> {
    pub fn tag(&self) -> &'a str {
        self.tokens[0]
    }

    pub fn remaining(&self) -> usize {
        self.tokens.len() - self.pos
    }

    pub fn err(&self, msg: impl Into<String>) -> Error {
        Error::parse(self.file, self.number, msg)
    }

    pub fn next<T: FromStr>(&mut self, what: &str) -> Result<T> {
        let tok = self.tokens.get(self.pos).ok_or_else(|| self.err(format!("missing {what}")))?;
        self.pos += 1;
        tok.parse().map_err(|_| self.err(format!("bad {what}: {tok:?}")))
    }

    pub fn vec3(&mut self, what: &str) -> Result<Vec3> {
        Ok(Vec3::new(self.next(what)?, self.next(what)?, self.next(what)?))
    }

    pub fn quaternion(&mut self) -> Result<Rotation3> {
        let q: [f64; 4] = [self.next("qw")?, self.next("qx")?, self.next("qy")?, self.next("qz")?];
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n.is_finite() && n > 0.0) {
            return Err(self.err("zero quaternion"));
        }
        Ok(Rotation3::from_quaternion(q))
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.tokens.len() {
            return Err(self.err(format!("{} trailing tokens", self.tokens.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Splits `text` into tokenized lines, skipping blanks and `#` comments.
/// The first token of each line is its tag.
pub fn lines<'a>(file: &'a Path, text: &'a str) -> impl Iterator<Item = Line<'a>> + 'a {
    text.lines().enumerate().filter_map(move |(i, raw)| {
        let content = raw.split('#').next().unwrap_or("");
        let tokens: Vec<&str> = content.split_whitespace().collect();
        if tokens.is_empty() {
            None
        } else {
            Some(Line { file, number: i + 1, tokens, pos: 1 })
        }
    })
}

pub fn push_vec3(out: &mut String, v: &Vec3) {
    let _ = write!(out, " {} {} {}", v.x, v.y, v.z);
}

pub fn push_quaternion(out: &mut String, r: &Rotation3) {
    let q = r.to_quaternion();
    let _ = write!(out, " {} {} {} {}", q[0], q[1], q[2], q[3]);
}
