//! Flat parameter store and versioned weight-file persistence.
//!
//! File layout: a text header (magic + format version, config echo,
//! entry table) followed by every entry's values as little-endian f64 in
//! declaration order. Loading verifies the config echo and the entry
//! table against the expected layout.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

const MAGIC: &str = "SDFNWTS";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub trainable: bool,
}

/// Parameters in declaration order with name lookup.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>, trainable: bool) -> usize {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "parameter {name}: shape/data mismatch"
        );
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = self.entries.len();
        self.index.insert(name.to_string(), id);
        self.entries.push(ParamEntry { name: name.to_string(), shape, data, trainable });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn entry(&self, id: usize) -> &ParamEntry {
        &self.entries[id]
    }

    pub fn entry_mut(&mut self, id: usize) -> &mut ParamEntry {
        &mut self.entries[id]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> &ParamEntry {
        &self.entries[self.index[name]]
    }

    /// Sizes of trainable entries, in declaration order.
    pub fn trainable_sizes(&self) -> Vec<usize> {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.data.len()).collect()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// FNV-1a over the little-endian bytes of every value in order; detects
    /// any parameter mutation.
    pub fn checksum(&self) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        for entry in &self.entries {
            for v in &entry.data {
                for b in v.to_le_bytes() {
                    hash ^= b as u64;
                    hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        hash
    }

    /// He-style fan-in normal initialization for a weight tensor.
    pub fn he_init(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Vec<f64> {
        let std = (2.0 / fan_in as f64).sqrt();
        (0..shape.iter().product()).map(|_| rng.normal() * std).collect()
    }
}

/// Persist the store with a config echo.
pub fn save_params(path: &Path, config_echo: &[(String, String)], store: &ParamStore) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "{MAGIC} {FORMAT_VERSION}")?;
    for (k, v) in config_echo {
        writeln!(buf, "config {k}={v}")?;
    }
    writeln!(buf, "entries {}", store.len())?;
    for entry in store.entries() {
        let dims: Vec<String> = entry.shape.iter().map(ToString::to_string).collect();
        writeln!(
            buf,
            "param {} {} {}",
            entry.name,
            dims.join("x"),
            if entry.trainable { 1 } else { 0 }
        )?;
    }
    writeln!(buf, "data {}", store.total_values())?;
    for entry in store.entries() {
        for v in &entry.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Load values into a layout-compatible store. The config echo and the
/// entry table must match exactly.
pub fn load_params(
    path: &Path,
    expected_echo: &[(String, String)],
    mut layout: ParamStore,
) -> Result<ParamStore> {
    let bytes = fs::read(path)?;
    let path_str = path.display().to_string();
    let parse_err = |offset: usize, message: String| Error::Parse {
        path: path_str.clone(),
        offset: offset as u64,
        message,
    };

    let mut pos = 0usize;
    let next_line = |pos: &mut usize| -> Result<(String, usize)> {
        let start = *pos;
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| start + i)
            .ok_or_else(|| parse_err(start, "unterminated header line".into()))?;
        let line = std::str::from_utf8(&bytes[start..end])
            .map_err(|_| parse_err(start, "non-UTF8 header line".into()))?;
        *pos = end + 1;
        Ok((line.to_string(), start))
    };

    let (magic_line, _) = next_line(&mut pos)?;
    if magic_line != format!("{MAGIC} {FORMAT_VERSION}") {
        return Err(parse_err(0, format!("bad magic/version line `{magic_line}`")));
    }

    let mut echo_seen = Vec::new();
    let entries_count;
    loop {
        let (line, off) = next_line(&mut pos)?;
        if let Some(rest) = line.strip_prefix("config ") {
            let (k, v) = rest
                .split_once('=')
                .ok_or_else(|| parse_err(off, format!("malformed config line `{line}`")))?;
            echo_seen.push((k.to_string(), v.to_string()));
        } else if let Some(rest) = line.strip_prefix("entries ") {
            entries_count = rest
                .parse::<usize>()
                .map_err(|_| parse_err(off, format!("bad entry count `{rest}`")))?;
            break;
        } else {
            return Err(parse_err(off, format!("unexpected header line `{line}`")));
        }
    }

    if echo_seen != expected_echo {
        let expected: Vec<String> =
            expected_echo.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let seen: Vec<String> = echo_seen.iter().map(|(k, v)| format!("{k}={v}")).collect();
        return Err(Error::ConfigMismatch(format!(
            "checkpoint was written with [{}], expected [{}]",
            seen.join(", "),
            expected.join(", ")
        )));
    }
    if entries_count != layout.len() {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint has {entries_count} parameter entries, expected {}",
            layout.len()
        )));
    }

    for i in 0..entries_count {
        let (line, off) = next_line(&mut pos)?;
        let rest = line
            .strip_prefix("param ")
            .ok_or_else(|| parse_err(off, format!("expected param line, got `{line}`")))?;
        let parts: Vec<&str> = rest.split(' ').collect();
        if parts.len() != 3 {
            return Err(parse_err(off, format!("malformed param line `{line}`")));
        }
        let expected = layout.entry(i);
        let dims: Vec<String> = expected.shape.iter().map(ToString::to_string).collect();
        let expected_desc =
            format!("{} {} {}", expected.name, dims.join("x"), if expected.trainable { 1 } else { 0 });
        if rest != expected_desc {
            return Err(Error::ConfigMismatch(format!(
                "parameter {i}: checkpoint has `{rest}`, expected `{expected_desc}`"
            )));
        }
    }

    let (data_line, off) = next_line(&mut pos)?;
    let count = data_line
        .strip_prefix("data ")
        .and_then(|r| r.parse::<usize>().ok())
        .ok_or_else(|| parse_err(off, format!("expected data line, got `{data_line}`")))?;
    if count != layout.total_values() {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint holds {count} values, layout needs {}",
            layout.total_values()
        )));
    }
    if bytes.len() - pos < count * 8 {
        return Err(parse_err(
            bytes.len(),
            format!("truncated data: need {} bytes, have {}", count * 8, bytes.len() - pos),
        ));
    }
    for i in 0..layout.len() {
        let n = layout.entry(i).data.len();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            let mut le = [0u8; 8];
            le.copy_from_slice(&bytes[pos..pos + 8]);
            values.push(f64::from_le_bytes(le));
            pos += 8;
        }
        layout.entry_mut(i).data = values;
    }
    Ok(layout)
}
