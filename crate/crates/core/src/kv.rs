//! Plain-text key-value format shared by model files and experiment configs.
//!
//! One entry per line: a key followed by whitespace-separated values.
//! `#` starts a comment; blank lines are ignored. Keys may repeat.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub values: Vec<String>,
}

impl Entry {
    pub fn floats(&self) -> Result<Vec<f64>> {
        self.values
            .iter()
            .map(|v| {
                v.parse::<f64>().map_err(|_| Error::Parse {
                    line: self.line,
                    msg: format!("`{v}` is not a number (key `{}`)", self.key),
                })
            })
            .collect()
    }

    pub fn single(&self) -> Result<&str> {
        match self.values.as_slice() {
            [v] => Ok(v),
            _ => Err(Error::Parse {
                line: self.line,
                msg: format!("key `{}` takes exactly one value", self.key),
            }),
        }
    }

    pub fn float(&self) -> Result<f64> {
        let v = self.single()?;
        v.parse().map_err(|_| Error::Parse {
            line: self.line,
            msg: format!("`{v}` is not a number (key `{}`)", self.key),
        })
    }

    pub fn integer(&self) -> Result<u64> {
        let v = self.single()?;
        v.parse().map_err(|_| Error::Parse {
            line: self.line,
            msg: format!("`{v}` is not a non-negative integer (key `{}`)", self.key),
        })
    }
}

pub fn parse(text: &str) -> Vec<Entry> {
    text.lines()
        .enumerate()
        .filter_map(|(i, raw)| {
            let content = raw.split('#').next().unwrap_or("");
            let mut parts = content.split_whitespace();
            let key = parts.next()?;
            Some(Entry {
                line: i + 1,
                key: key.to_string(),
                values: parts.map(str::to_string).collect(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blank_lines() {
        let e = parse("# header\n\natom 1 0.5 0.5  # binary\n  seed 3\n");
        assert_eq!(e.len(), 2);
        assert_eq!(e[0].line, 3);
        assert_eq!(e[0].floats().unwrap(), vec![1.0, 0.5, 0.5]);
        assert_eq!(e[1].integer().unwrap(), 3);
    }

    #[test]
    fn bad_number_reports_line() {
        let e = parse("\nhorizon x\n");
        match e[0].float() {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
