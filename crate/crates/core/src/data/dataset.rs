//! Plain-text dataset file.
//!
//! ```text
//! maskdiff-dataset v1 vocab=4 len=16 rows=2 seed=7 source=markov-default
//! 0 0 1 2 2 3 0 0 0 1 2 1 2 2 1 2
//! 3 3 0 0 0 0 0 2 1 2 1 0 0 0 3 0
//! ```
//!
//! The header is one line of space-separated fields in exactly this order.
//! Every following line holds `len` space-separated token ids in `0..vocab`,
//! and there are exactly `rows` such lines. Lines end with `\n`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::diffusion::{TokenSeq, Vocab};
use crate::error::{Error, Result};

const MAGIC: &str = "maskdiff-dataset";
const VERSION: &str = "v1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub vocab: usize,
    pub len: usize,
    pub seed: u64,
    /// Free-form name of the generating source; no whitespace.
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub rows: Vec<TokenSeq>,
}

impl Dataset {
    pub fn new(header: DatasetHeader, rows: Vec<TokenSeq>) -> Result<Self> {
        let vocab = Vocab::new(header.vocab)?;
        if header.source.is_empty() || header.source.chars().any(char::is_whitespace) {
            return Err(Error::Config("source descriptor must be one non-empty word".into()));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != header.len {
                return Err(Error::Config(format!(
                    "row {i} has length {}, header says {}",
                    row.len(),
                    header.len
                )));
            }
            TokenSeq::new(row.tokens().to_vec(), vocab)?;
        }
        Ok(Self { header, rows })
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.header.vocab).expect("validated at construction")
    }
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    write_to(&mut out, data)?;
    out.flush()?;
    Ok(())
}

pub(crate) fn write_to<W: Write>(out: &mut W, data: &Dataset) -> Result<()> {
    let h = &data.header;
    writeln!(
        out,
        "{MAGIC} {VERSION} vocab={} len={} rows={} seed={} source={}",
        h.vocab,
        h.len,
        data.rows.len(),
        h.seed,
        h.source
    )?;
    let mut line = String::new();
    for row in &data.rows {
        line.clear();
        for (i, tok) in row.tokens().iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            line.push_str(&tok.to_string());
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    read_from(BufReader::new(fs::File::open(path)?))
}

fn field<'a>(part: Option<&'a str>, key: &str) -> Result<&'a str> {
    let part = part.ok_or_else(|| Error::parse(1, format!("header is missing `{key}=`")))?;
    part.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix('='))
        .ok_or_else(|| Error::parse(1, format!("expected `{key}=…`, found `{part}`")))
}

fn number<T: std::str::FromStr>(text: &str, key: &str) -> Result<T> {
    text.parse()
        .map_err(|_| Error::parse(1, format!("`{key}` is not a valid number: `{text}`")))
}

pub(crate) fn read_from<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::parse(1, "empty file"))??;
    let mut parts = header_line.split(' ');
    if parts.next() != Some(MAGIC) || parts.next() != Some(VERSION) {
        return Err(Error::parse(1, format!("expected `{MAGIC} {VERSION}` header")));
    }
    let vocab: usize = number(field(parts.next(), "vocab")?, "vocab")?;
    let len: usize = number(field(parts.next(), "len")?, "len")?;
    let rows: usize = number(field(parts.next(), "rows")?, "rows")?;
    let seed: u64 = number(field(parts.next(), "seed")?, "seed")?;
    let source = field(parts.next(), "source")?.to_string();
    if let Some(extra) = parts.next() {
        return Err(Error::parse(1, format!("unexpected header field `{extra}`")));
    }
    let vocab_t = Vocab::new(vocab).map_err(|e| Error::parse(1, e.to_string()))?;
    if source.is_empty() {
        return Err(Error::parse(1, "empty source descriptor"));
    }

    let mut data = Vec::with_capacity(rows);
    for r in 0..rows {
        let line_no = r + 2;
        let line = lines
            .next()
            .ok_or_else(|| Error::parse(line_no, format!("file ends after {r} of {rows} rows")))??;
        let tokens = line
            .split(' ')
            .map(|t| {
                let tok: usize = t
                    .parse()
                    .map_err(|_| Error::parse(line_no, format!("bad token `{t}`")))?;
                if tok >= vocab {
                    return Err(Error::parse(
                        line_no,
                        format!("token {tok} out of range for vocab {vocab}"),
                    ));
                }
                Ok(tok)
            })
            .collect::<Result<Vec<_>>>()?;
        if tokens.len() != len {
            return Err(Error::parse(
                line_no,
                format!("row has {} tokens, expected {len}", tokens.len()),
            ));
        }
        data.push(TokenSeq::new(tokens, vocab_t)?);
    }
    if let Some(extra) = lines.next() {
        let extra = extra?;
        return Err(Error::parse(
            rows + 2,
            format!("trailing content after {rows} rows: `{extra}`"),
        ));
    }
    Ok(Dataset {
        header: DatasetHeader {
            vocab,
            len,
            seed,
            source,
        },
        rows: data,
    })
}
