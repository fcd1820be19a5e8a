//! Shared container layout for binary artifacts: a line-oriented text header
//! (`<MAGIC> v<version>`, `key=value` lines, `end`) followed by little-endian
//! `f64` payload.

use std::io::{self, BufRead, Read, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error("unsupported {kind} format version: expected v{expected}, found {found}")]
    Version {
        kind: &'static str,
        expected: u32,
        found: String,
    },
    #[error("truncated file: expected {expected} more values, got {got}")]
    Truncated { expected: usize, got: usize },
}

pub(crate) struct Header {
    fields: Vec<(String, String)>,
}

impl Header {
    pub(crate) fn get(&self, key: &str) -> Result<&str, FormatError> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| FormatError::Malformed(format!("missing header field `{key}`")))
    }

    pub(crate) fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, FormatError> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| FormatError::Malformed(format!("bad value for `{key}`: {raw}")))
    }

    pub(crate) fn parse_list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>, FormatError> {
        let raw = self.get(key)?;
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| FormatError::Malformed(format!("bad value for `{key}`: {raw}")))
            })
            .collect()
    }
}

pub(crate) fn write_header<W: Write>(
    w: &mut W,
    magic: &str,
    version: u32,
    fields: &[(&str, String)],
) -> io::Result<()> {
    writeln!(w, "{magic} v{version}")?;
    for (k, v) in fields {
        writeln!(w, "{k}={v}")?;
    }
    writeln!(w, "end")
}

pub(crate) fn read_header<R: BufRead>(
    r: &mut R,
    magic: &str,
    kind: &'static str,
    version: u32,
) -> Result<Header, FormatError> {
    let mut line = String::new();
    read_line(r, &mut line)?;
    let found = line
        .strip_prefix(magic)
        .map(str::trim)
        .ok_or_else(|| FormatError::Malformed(format!("not a {kind} file")))?;
    if found != format!("v{version}") {
        return Err(FormatError::Version {
            kind,
            expected: version,
            found: found.to_string(),
        });
    }
    let mut fields = Vec::new();
    loop {
        read_line(r, &mut line)?;
        if line == "end" {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| FormatError::Malformed(format!("bad header line `{line}`")))?;
        fields.push((k.to_string(), v.to_string()));
    }
    Ok(Header { fields })
}

fn read_line<R: BufRead>(r: &mut R, buf: &mut String) -> Result<(), FormatError> {
    buf.clear();
    // Header lines are short; cap the read so binary garbage cannot balloon.
    let n = r.by_ref().take(4096).read_line(buf).map_err(|e| match e.kind() {
        io::ErrorKind::InvalidData => FormatError::Malformed("header is not valid text".into()),
        _ => FormatError::Io(e),
    })?;
    if n == 0 {
        return Err(FormatError::Malformed("unexpected end of header".into()));
    }
    let trimmed = buf.trim_end_matches(['\n', '\r']).len();
    buf.truncate(trimmed);
    Ok(())
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> io::Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, n: usize, out: &mut Vec<f64>) -> Result<(), FormatError> {
    let mut bytes = vec![0u8; n * 8];
    let mut filled = 0;
    while filled < bytes.len() {
        match r.read(&mut bytes[filled..]) {
            Ok(0) => {
                return Err(FormatError::Truncated {
                    expected: n,
                    got: filled / 8,
                })
            }
            Ok(k) => filled += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    out.extend(
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))),
    );
    Ok(())
}

/// Errors if any bytes remain after the payload.
pub(crate) fn expect_eof<R: Read>(r: &mut R) -> Result<(), FormatError> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(FormatError::Malformed("trailing bytes after payload".into())),
    }
}

/// Formats a float so that parsing it back yields the same bits.
pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}
