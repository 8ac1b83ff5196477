//! Checkpoint archive: named records in three count-prefixed sections
//! (parameters, optimizer state, normalization constants) framed by an
//! "EV2D" magic, a version word, and a trailing CRC32. Every payload is raw
//! little-endian, so round-trips are bitwise exact.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, ScalarKind, Shape, Tensor};

const MAGIC: &[u8; 4] = b"EV2D";
const VERSION: u32 = 1;

const TAG_F32: u8 = 0;
const TAG_F64: u8 = 1;
const TAG_U8: u8 = 2;
const TAG_U32: u8 = 3;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U32(Vec<u32>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U8(v) => v.len(),
            Payload::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn tag(&self) -> u8 {
        match self {
            Payload::F32(_) => TAG_F32,
            Payload::F64(_) => TAG_F64,
            Payload::U8(_) => TAG_U8,
            Payload::U32(_) => TAG_U32,
        }
    }
}

/// One named tensor-like entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<u32>,
    pub payload: Payload,
}

impl Record {
    pub fn new(name: impl Into<String>, dims: Vec<u32>, payload: Payload) -> Result<Record> {
        let name = name.into();
        let expect: u64 = dims.iter().map(|&d| d as u64).product();
        if expect != payload.len() as u64 {
            return Err(Error::Format(format!(
                "record '{name}': dims {dims:?} imply {expect} elements, payload has {}",
                payload.len()
            )));
        }
        if dims.is_empty() || dims.len() > u8::MAX as usize {
            return Err(Error::Format(format!(
                "record '{name}': need 1..=255 dims, got {}",
                dims.len()
            )));
        }
        Ok(Record {
            name,
            dims,
            payload,
        })
    }

    pub fn scalar_u32(name: impl Into<String>, v: u32) -> Record {
        Record::new(name, vec![1], Payload::U32(vec![v])).expect("scalar")
    }

    pub fn scalar_f64(name: impl Into<String>, v: f64) -> Record {
        Record::new(name, vec![1], Payload::F64(vec![v])).expect("scalar")
    }

    pub fn bytes(name: impl Into<String>, v: Vec<u8>) -> Record {
        let n = v.len() as u32;
        Record::new(name, vec![n], Payload::U8(v)).expect("bytes")
    }

    pub fn from_tensor<T: Element>(name: impl Into<String>, t: &Tensor<T>) -> Record {
        let s = t.shape();
        let dims = vec![s.n as u32, s.c as u32, s.h as u32, s.w as u32];
        let payload = match T::KIND {
            ScalarKind::F32 => Payload::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            ScalarKind::F64 => Payload::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        Record::new(name, dims, payload).expect("tensor dims match data")
    }

    pub fn to_tensor<T: Element>(&self) -> Result<Tensor<T>> {
        if self.dims.len() != 4 {
            return Err(Error::Format(format!(
                "record '{}' has {} dims, expected 4 for a tensor",
                self.name,
                self.dims.len()
            )));
        }
        let shape = Shape::new(
            self.dims[0] as usize,
            self.dims[1] as usize,
            self.dims[2] as usize,
            self.dims[3] as usize,
        );
        let data: Vec<T> = match (&self.payload, T::KIND) {
            (Payload::F32(v), ScalarKind::F32) => v.iter().map(|&x| T::from_f64(x as f64)).collect(),
            (Payload::F64(v), ScalarKind::F64) => v.iter().map(|&x| T::from_f64(x)).collect(),
            (p, kind) => {
                return Err(Error::Format(format!(
                    "record '{}' has dtype tag {}, expected {kind:?}",
                    self.name,
                    p.tag()
                )))
            }
        };
        Tensor::new(shape, data)
    }

    pub fn as_u32_slice(&self) -> Result<&[u32]> {
        match &self.payload {
            Payload::U32(v) => Ok(v),
            _ => Err(Error::Format(format!("record '{}' is not u32", self.name))),
        }
    }

    pub fn as_f64_slice(&self) -> Result<&[f64]> {
        match &self.payload {
            Payload::F64(v) => Ok(v),
            _ => Err(Error::Format(format!("record '{}' is not f64", self.name))),
        }
    }

    pub fn as_bytes(&self) -> Result<&[u8]> {
        match &self.payload {
            Payload::U8(v) => Ok(v),
            _ => Err(Error::Format(format!("record '{}' is not bytes", self.name))),
        }
    }
}

/// The three sections of a checkpoint file. Empty optimizer/norm sections
/// encode their absence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub params: Vec<Record>,
    pub optimizer: Vec<Record>,
    pub norm: Vec<Record>,
}

impl Archive {
    pub fn find<'a>(records: &'a [Record], name: &str) -> Result<&'a Record> {
        records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Format(format!("archive is missing record '{name}'")))
    }
}

fn put_record(buf: &mut Vec<u8>, r: &Record) {
    buf.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
    buf.extend_from_slice(r.name.as_bytes());
    buf.push(r.payload.tag());
    buf.push(r.dims.len() as u8);
    for d in &r.dims {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    match &r.payload {
        Payload::F32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        Payload::F64(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        Payload::U8(v) => buf.extend_from_slice(v),
        Payload::U32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
    }
}

fn put_section(buf: &mut Vec<u8>, records: &[Record]) {
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        put_record(buf, r);
    }
}

pub fn write_archive(path: &Path, archive: &Archive) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_section(&mut buf, &archive.params);
    put_section(&mut buf, &archive.optimizer);
    put_section(&mut buf, &archive.norm);
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    File::create(path)?.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "archive truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

fn get_record(c: &mut Cursor<'_>) -> Result<Record> {
    let name_len = c.u32()? as usize;
    let name = String::from_utf8(c.take(name_len)?.to_vec())
        .map_err(|_| Error::Format("record name is not UTF-8".into()))?;
    let tag = c.u8()?;
    let ndim = c.u8()? as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(c.u32()?);
    }
    let count: u64 = dims.iter().map(|&d| d as u64).product();
    let count = count as usize;
    let payload = match tag {
        TAG_F32 => Payload::F32(
            c.take(count * 4)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        ),
        TAG_F64 => Payload::F64(
            c.take(count * 8)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
                .collect(),
        ),
        TAG_U8 => Payload::U8(c.take(count)?.to_vec()),
        TAG_U32 => Payload::U32(
            c.take(count * 4)?
                .chunks_exact(4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        ),
        other => return Err(Error::Format(format!("unknown dtype tag {other}"))),
    };
    Record::new(name, dims, payload)
}

fn get_section(c: &mut Cursor<'_>) -> Result<Vec<Record>> {
    let count = c.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        records.push(get_record(c)?);
    }
    Ok(records)
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 {
        return Err(Error::Format("archive too short".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Format(format!(
            "archive checksum mismatch: stored {stored:08x}, computed {computed:08x}"
        )));
    }

    let mut c = Cursor { buf: body, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("bad archive magic, expected EV2D".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported archive version {version}")));
    }
    let params = get_section(&mut c)?;
    let optimizer = get_section(&mut c)?;
    let norm = get_section(&mut c)?;
    if c.pos != body.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last section",
            body.len() - c.pos
        )));
    }
    Ok(Archive {
        params,
        optimizer,
        norm,
    })
}
