//! Little-endian instance file.
//!
//! Header: magic `MLMI`, version u32, max length u32, format u8.
//! Then per instance: length u32, token ids u32 x length, segment ids
//! u8 x length, NSP label u8 (0 = false, 1 = true, 0xFF = absent).

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::{PackingFormat, TrainingInstance};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MLMI";
const VERSION: u32 = 1;
const NO_LABEL: u8 = 0xFF;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceFileHeader {
    pub max_len: u32,
    pub format: PackingFormat,
}

pub fn write_instances_to<W: Write>(
    mut w: W,
    header: InstanceFileHeader,
    instances: &[TrainingInstance],
) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&header.max_len.to_le_bytes())?;
    w.write_all(&[header.format.code()])?;
    for inst in instances {
        w.write_all(&(inst.len() as u32).to_le_bytes())?;
        for &t in &inst.tokens {
            w.write_all(&t.to_le_bytes())?;
        }
        w.write_all(&inst.segment_ids)?;
        let label = match inst.nsp_label {
            Some(true) => 1,
            Some(false) => 0,
            None => NO_LABEL,
        };
        w.write_all(&[label])?;
    }
    w.flush()
}

pub fn write_instances(
    path: impl AsRef<Path>,
    header: InstanceFileHeader,
    instances: &[TrainingInstance],
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_instances_to(BufWriter::new(file), header, instances).map_err(|e| Error::io(path, e))
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> std::io::Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(ErrorKind::UnexpectedEof.into()),
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(true)
}

pub fn read_instances_from<R: Read>(mut r: R) -> Result<(InstanceFileHeader, Vec<TrainingInstance>)> {
    let bad = |msg: &str| Error::Data(format!("instance file: {msg}"));
    let io = |e: std::io::Error| Error::Data(format!("instance file: {e}"));
    let mut head = [0u8; 13];
    r.read_exact(&mut head).map_err(io)?;
    if &head[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let max_len = u32::from_le_bytes(head[8..12].try_into().unwrap());
    let format = PackingFormat::from_code(head[12]).ok_or_else(|| bad("unknown format code"))?;

    let mut instances = Vec::new();
    let mut len_buf = [0u8; 4];
    while read_exact_or_eof(&mut r, &mut len_buf).map_err(io)? {
        let len = u32::from_le_bytes(len_buf) as usize;
        if len > max_len as usize {
            return Err(bad(&format!("instance of length {len} exceeds {max_len}")));
        }
        let mut raw = vec![0u8; len * 4];
        r.read_exact(&mut raw).map_err(io)?;
        let tokens = raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut segment_ids = vec![0u8; len];
        r.read_exact(&mut segment_ids).map_err(io)?;
        let mut label = [0u8];
        r.read_exact(&mut label).map_err(io)?;
        let nsp_label = match label[0] {
            0 => Some(false),
            1 => Some(true),
            NO_LABEL => None,
            other => return Err(bad(&format!("bad nsp label byte {other:#x}"))),
        };
        instances.push(TrainingInstance {
            tokens,
            segment_ids,
            nsp_label,
            provenance: Vec::new(),
        });
    }
    Ok((InstanceFileHeader { max_len, format }, instances))
}

pub fn read_instances(path: impl AsRef<Path>) -> Result<(InstanceFileHeader, Vec<TrainingInstance>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_instances_from(BufReader::new(file))
}
