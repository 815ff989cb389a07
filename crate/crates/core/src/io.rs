//! On-disk formats: binary volumes/masks and text branch listings.
//!
//! Volume layout: `FABRVOL1` magic, then little-endian `u32` version, `u32`
//! C, H, W, D, a `u8` dtype (0 = f32, 1 = u8) and the channel-major payload.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::phantom::Branch;
use crate::volume::{Mask, Volume};

pub const VOLUME_MAGIC: &[u8; 8] = b"FABRVOL1";
pub const VOLUME_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_U8: u8 = 1;
const HEADER_LEN: usize = 8 + 4 * 5 + 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

/// A decoded volume file: `channels` grids of extent `dims`.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeFile {
    pub channels: usize,
    pub dims: [usize; 3],
    pub payload: Payload,
}

impl VolumeFile {
    pub fn dtype(&self) -> u8 {
        match self.payload {
            Payload::F32(_) => DTYPE_F32,
            Payload::U8(_) => DTYPE_U8,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.channels * self.dims.iter().product::<usize>() * 4);
        out.extend_from_slice(VOLUME_MAGIC);
        out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
        for v in [self.channels, self.dims[0], self.dims[1], self.dims[2]] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(self.dtype());
        match &self.payload {
            Payload::F32(d) => d.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Payload::U8(d) => out.extend_from_slice(d),
        }
        out
    }

    /// `name` only labels errors.
    pub fn decode(bytes: &[u8], name: &str) -> Result<Self> {
        let truncated = |position| Error::Truncated {
            path: name.to_string(),
            position,
        };
        if bytes.len() < 8 {
            return Err(truncated(bytes.len()));
        }
        if &bytes[..8] != VOLUME_MAGIC {
            return Err(Error::BadMagic {
                path: name.to_string(),
                expected: "FABRVOL1".into(),
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(truncated(bytes.len()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != VOLUME_VERSION {
            return Err(Error::Format {
                what: "volume header",
                detail: format!("{name}: unsupported version {version}"),
            });
        }
        let channels = word(1) as usize;
        let dims = [word(2) as usize, word(3) as usize, word(4) as usize];
        let dtype = bytes[HEADER_LEN - 1];
        let count = channels * dims.iter().product::<usize>();
        let body = &bytes[HEADER_LEN..];
        let payload = match dtype {
            DTYPE_F32 => {
                if body.len() < count * 4 {
                    return Err(truncated(bytes.len()));
                }
                Payload::F32(
                    body[..count * 4]
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            DTYPE_U8 => {
                if body.len() < count {
                    return Err(truncated(bytes.len()));
                }
                Payload::U8(body[..count].to_vec())
            }
            other => {
                return Err(Error::Format {
                    what: "volume header",
                    detail: format!("{name}: unknown dtype {other}"),
                })
            }
        };
        let expected = HEADER_LEN + count * if dtype == DTYPE_F32 { 4 } else { 1 };
        if bytes.len() != expected {
            return Err(Error::Format {
                what: "volume payload",
                detail: format!("{name}: {} trailing bytes", bytes.len() - expected),
            });
        }
        Ok(VolumeFile {
            channels,
            dims,
            payload,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

fn single_channel(f: &VolumeFile, path: &Path) -> Result<()> {
    if f.channels != 1 {
        return Err(Error::Format {
            what: "volume",
            detail: format!("{}: expected 1 channel, found {}", path.display(), f.channels),
        });
    }
    Ok(())
}

pub fn write_volume(path: &Path, v: &Volume<f32>) -> Result<()> {
    VolumeFile {
        channels: 1,
        dims: v.dims(),
        payload: Payload::F32(v.data().to_vec()),
    }
    .write(path)
}

pub fn read_volume(path: &Path) -> Result<Volume<f32>> {
    let f = VolumeFile::read(path)?;
    single_channel(&f, path)?;
    match f.payload {
        Payload::F32(d) => Volume::new(f.dims, d),
        Payload::U8(_) => Err(Error::DtypeMismatch {
            path: path.display().to_string(),
            expected: DTYPE_F32,
            found: DTYPE_U8,
        }),
    }
}

pub fn write_mask(path: &Path, m: &Mask) -> Result<()> {
    VolumeFile {
        channels: 1,
        dims: m.dims(),
        payload: Payload::U8(m.data().to_vec()),
    }
    .write(path)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let f = VolumeFile::read(path)?;
    single_channel(&f, path)?;
    match f.payload {
        Payload::U8(d) => {
            let m = Volume::new(f.dims, d)?;
            if !m.is_binary() {
                return Err(Error::Format {
                    what: "mask",
                    detail: format!("{}: values other than 0 and 1", path.display()),
                });
            }
            Ok(m)
        }
        Payload::F32(_) => Err(Error::DtypeMismatch {
            path: path.display().to_string(),
            expected: DTYPE_U8,
            found: DTYPE_F32,
        }),
    }
}

/// One line per centerline voxel: `branch_id parent_id x y z radius`, root parent `-1`.
pub fn format_branches(branches: &[Branch]) -> String {
    let mut out = String::new();
    for b in branches {
        let parent = b.parent.map_or(-1, |p| p as i64);
        for p in &b.centerline {
            let _ = writeln!(out, "{} {} {} {} {} {}", b.id, parent, p[0], p[1], p[2], b.radius);
        }
    }
    out
}

pub fn parse_branches(text: &str) -> Result<Vec<Branch>> {
    let bad = |line: usize, detail: String| Error::Format {
        what: "branch file",
        detail: format!("line {line}: {detail}"),
    };
    let mut branches: Vec<Branch> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(bad(line_no, format!("expected 6 fields, found {}", f.len())));
        }
        let int = |s: &str| s.parse::<i64>().map_err(|e| bad(line_no, format!("{s:?}: {e}")));
        let id = int(f[0])?;
        let parent = int(f[1])?;
        let coord = [int(f[2])?, int(f[3])?, int(f[4])?];
        let radius: f64 = f[5].parse().map_err(|e| bad(line_no, format!("{:?}: {e}", f[5])))?;
        if id < 0 || parent < -1 || coord.iter().any(|&c| c < 0) {
            return Err(bad(line_no, "negative id or coordinate".into()));
        }
        let parent = (parent >= 0).then_some(parent as usize);
        let p = coord.map(|c| c as usize);
        match branches.last_mut() {
            Some(b) if b.id == id as usize => {
                if b.parent != parent {
                    return Err(bad(line_no, format!("branch {id} changes parent")));
                }
                b.centerline.push(p);
            }
            _ => {
                if branches.iter().any(|b| b.id == id as usize) {
                    return Err(bad(line_no, format!("branch {id} is not contiguous")));
                }
                branches.push(Branch {
                    id: id as usize,
                    parent,
                    generation: 0,
                    radius,
                    centerline: vec![p],
                });
            }
        }
    }
    for i in 0..branches.len() {
        let mut generation = 0;
        let mut cur = branches[i].parent;
        while let Some(pid) = cur {
            generation += 1;
            if generation > branches.len() {
                return Err(bad(0, "parent links form a cycle".into()));
            }
            cur = branches
                .iter()
                .find(|b| b.id == pid)
                .ok_or_else(|| bad(0, format!("unknown parent {pid}")))?
                .parent;
        }
        branches[i].generation = generation;
    }
    Ok(branches)
}

pub fn write_branches(path: &Path, branches: &[Branch]) -> Result<()> {
    std::fs::write(path, format_branches(branches)).map_err(|e| Error::io(path, e))
}

pub fn read_branches(path: &Path) -> Result<Vec<Branch>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_branches(&text)
}
