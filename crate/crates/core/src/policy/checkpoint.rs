//! Versioned policy checkpoints.
//!
//! A checkpoint is a line-oriented text header followed by the logit table
//! in row-major order, either as little-endian `f64` bytes or as text (one
//! context row per line). Extra sections, such as optimizer moments, may
//! follow the table.
//!
//! ```text
//! disco-policy 1
//! vocab_size 4
//! max_len 4
//! history_order 1
//! num_questions 32
//! encoding binary
//! logits 2560
//! <2560 x f64 LE>
//! ```

use std::io::{self, Write};
use std::str::FromStr;

use super::PolicyParams;
use crate::error::{DiscoError, Result};

pub const MAGIC: &str = "disco-policy";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Encoding {
    Binary,
    Text,
}

impl Encoding {
    pub fn name(self) -> &'static str {
        match self {
            Encoding::Binary => "binary",
            Encoding::Text => "text",
        }
    }
}

impl FromStr for Encoding {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "binary" => Ok(Encoding::Binary),
            "text" => Ok(Encoding::Text),
            other => Err(format!(
                "unknown encoding `{other}` (expected binary or text)"
            )),
        }
    }
}

pub fn write_policy<W: Write>(w: &mut W, params: &PolicyParams, enc: Encoding) -> io::Result<()> {
    writeln!(w, "{MAGIC} {VERSION}")?;
    writeln!(w, "vocab_size {}", params.vocab_size())?;
    writeln!(w, "max_len {}", params.max_len())?;
    writeln!(w, "history_order {}", params.history_order())?;
    writeln!(w, "num_questions {}", params.num_questions())?;
    writeln!(w, "encoding {}", enc.name())?;
    writeln!(w, "logits {}", params.num_params())?;
    write_f64_block(w, params.logits(), enc, params.vocab_size())
}

/// Writes `values` in the given encoding; text rows hold `width` values.
pub fn write_f64_block<W: Write>(
    w: &mut W,
    values: &[f64],
    enc: Encoding,
    width: usize,
) -> io::Result<()> {
    match enc {
        Encoding::Binary => {
            for x in values {
                w.write_all(&x.to_le_bytes())?;
            }
            Ok(())
        }
        Encoding::Text => {
            for row in values.chunks(width.max(1)) {
                let line: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
                writeln!(w, "{}", line.join(" "))?;
            }
            Ok(())
        }
    }
}

pub fn encode_policy(params: &PolicyParams, enc: Encoding) -> Vec<u8> {
    let mut buf = Vec::new();
    write_policy(&mut buf, params, enc).expect("writing to a Vec cannot fail");
    buf
}

pub fn decode_policy(bytes: &[u8]) -> Result<PolicyParams> {
    CheckpointReader::new(bytes).read_policy()
}

/// Sequential reader over a checkpoint buffer.
pub struct CheckpointReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    line: usize,
    encoding: Option<Encoding>,
}

impl<'a> CheckpointReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self {
            bytes,
            pos: 0,
            line: 0,
            encoding: None,
        }
    }

    /// Encoding of the last policy read.
    pub fn encoding(&self) -> Option<Encoding> {
        self.encoding
    }

    pub fn at_end(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    fn error<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(DiscoError::Format {
            line: self.line,
            message: message.into(),
        })
    }

    pub fn next_line(&mut self) -> Result<&'a str> {
        if self.at_end() {
            self.line += 1;
            return self.error("unexpected end of checkpoint");
        }
        let rest = &self.bytes[self.pos..];
        let end = rest.iter().position(|&b| b == b'\n').unwrap_or(rest.len());
        self.pos += (end + 1).min(rest.len());
        self.line += 1;
        match std::str::from_utf8(&rest[..end]) {
            Ok(s) => Ok(s.trim_end_matches('\r')),
            Err(_) => self.error("header line is not UTF-8"),
        }
    }

    /// Reads a `key value` line and parses the value.
    pub fn keyed<T: FromStr>(&mut self, key: &str) -> Result<T> {
        let line = self.next_line()?;
        let mut parts = line.splitn(2, ' ');
        if parts.next() != Some(key) {
            return self.error(format!("expected `{key}`, found `{line}`"));
        }
        let value = parts.next().unwrap_or("").trim();
        match value.parse() {
            Ok(v) => Ok(v),
            Err(_) => self.error(format!("invalid value `{value}` for `{key}`")),
        }
    }

    pub fn read_f64_block(&mut self, count: usize, enc: Encoding) -> Result<Vec<f64>> {
        match enc {
            Encoding::Binary => {
                let need = count * 8;
                if self.bytes.len() - self.pos < need {
                    return self.error(format!("truncated block: expected {count} f64 values"));
                }
                let out = self.bytes[self.pos..self.pos + need]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect();
                self.pos += need;
                Ok(out)
            }
            Encoding::Text => {
                let mut out = Vec::with_capacity(count);
                while out.len() < count {
                    let line = self.next_line()?;
                    for tok in line.split_whitespace() {
                        match tok.parse::<f64>() {
                            Ok(x) => out.push(x),
                            Err(_) => return self.error(format!("invalid number `{tok}`")),
                        }
                    }
                }
                if out.len() != count {
                    return self.error(format!("expected {count} values, found {}", out.len()));
                }
                Ok(out)
            }
        }
    }

    pub fn read_policy(&mut self) -> Result<PolicyParams> {
        let magic = self.next_line()?;
        let expected = format!("{MAGIC} {VERSION}");
        if magic != expected {
            return self.error(format!("expected `{expected}`, found `{magic}`"));
        }
        let vocab_size: usize = self.keyed("vocab_size")?;
        let max_len: usize = self.keyed("max_len")?;
        let history_order: u8 = self.keyed("history_order")?;
        let num_questions: usize = self.keyed("num_questions")?;
        let enc: Encoding = {
            let name: String = self.keyed("encoding")?;
            match name.parse() {
                Ok(e) => e,
                Err(msg) => return self.error(msg),
            }
        };
        self.encoding = Some(enc);
        let count: usize = self.keyed("logits")?;
        let logits = self.read_f64_block(count, enc)?;
        PolicyParams::from_logits(num_questions, vocab_size, max_len, history_order, logits)
    }
}
