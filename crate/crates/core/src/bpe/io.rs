//! Text vocabulary format:
//!
//! ```text
//! bbpe v1 <size>
//! <left hex> <right hex>      one line per merge, in rank order
//! specials
//! CLS <id>
//! ...
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Special, Vocab};
use crate::error::{Error, Result};

const HEADER: &str = "bbpe v1";

impl Vocab {
    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER} {}\n", self.size());
        for &(l, r) in self.merges() {
            let left = hex::encode(self.piece(l).expect("merge side is a text token"));
            let right = hex::encode(self.piece(r).expect("merge side is a text token"));
            let _ = writeln!(out, "{left} {right}");
        }
        out.push_str("specials\n");
        let ids = self.specials();
        for s in Special::ALL {
            let _ = writeln!(out, "{} {}", s.name(), ids.id(s));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "empty file"))?;
        let declared: usize = header
            .strip_prefix(HEADER)
            .and_then(|rest| rest.trim().parse().ok())
            .ok_or_else(|| Error::parse(1, format!("expected `{HEADER} <size>`")))?;

        let mut by_bytes: HashMap<Vec<u8>, u32> =
            (0..=255u8).map(|b| (vec![b], b as u32)).collect();
        let mut merges = Vec::new();
        let mut seen = HashMap::new();
        let mut last_line = 1;
        let mut saw_specials = false;
        for (n, line) in lines.by_ref() {
            last_line = n;
            if line == "specials" {
                saw_specials = true;
                break;
            }
            let mut parts = line.split(' ');
            let (Some(l), Some(r), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::parse(n, "expected two hex byte strings"));
            };
            let side = |h: &str| -> Result<u32> {
                let bytes = hex::decode(h).map_err(|e| Error::parse(n, format!("bad hex {h:?}: {e}")))?;
                by_bytes
                    .get(&bytes)
                    .copied()
                    .ok_or_else(|| Error::parse(n, format!("{h} is not a known token")))
            };
            let pair = (side(l)?, side(r)?);
            if let Some(first) = seen.insert(pair, n) {
                return Err(Error::parse(n, format!("duplicate merge (first seen on line {first})")));
            }
            let mut joined = hex::decode(l).expect("validated above");
            joined.extend(hex::decode(r).expect("validated above"));
            let id = 256 + merges.len() as u32;
            if by_bytes.insert(joined, id).is_some() {
                return Err(Error::parse(n, "merge result duplicates an existing token"));
            }
            merges.push(pair);
        }
        if !saw_specials {
            return Err(Error::parse(last_line + 1, "missing `specials` section"));
        }

        let vocab = Vocab::from_merges(merges).map_err(|e| Error::parse(last_line, e.to_string()))?;
        let expected = vocab.specials();
        let mut found: HashMap<&str, u32> = HashMap::new();
        for (n, line) in lines {
            last_line = n;
            if line.is_empty() {
                continue;
            }
            let (name, id) = line
                .split_once(' ')
                .ok_or_else(|| Error::parse(n, "expected `<NAME> <id>`"))?;
            let special = Special::ALL
                .into_iter()
                .find(|s| s.name() == name)
                .ok_or_else(|| Error::parse(n, format!("unknown special {name:?}")))?;
            let id: u32 = id.parse().map_err(|_| Error::parse(n, format!("bad id {id:?}")))?;
            if id != expected.id(special) {
                return Err(Error::parse(
                    n,
                    format!("{name} must have id {}, found {id}", expected.id(special)),
                ));
            }
            if found.insert(special.name(), id).is_some() {
                return Err(Error::parse(n, format!("duplicate special {name}")));
            }
        }
        if let Some(missing) = Special::ALL.into_iter().find(|s| !found.contains_key(s.name())) {
            return Err(Error::parse(
                last_line + 1,
                format!("special {} not declared", missing.name()),
            ));
        }
        if declared != vocab.size() {
            return Err(Error::parse(
                1,
                format!("header declares size {declared}, file defines {}", vocab.size()),
            ));
        }
        Ok(vocab)
    }
}

pub fn save_vocab(vocab: &Vocab, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, vocab.to_text()).map_err(|e| Error::io(path, e))
}

pub fn load_vocab(path: impl AsRef<Path>) -> Result<Vocab> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Vocab::from_text(&text)
}
