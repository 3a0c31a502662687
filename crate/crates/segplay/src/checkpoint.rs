//! Versioned binary checkpoints for detectors and policies.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "SEGPLAY\0"
//! version  u32
//! kind     u8       0 = detector, 1 = policy
//! arch     kind-specific u32 sizes followed by u8 codes
//! count    u64      number of parameters
//! params   count x f64
//! ```
//!
//! Parameters are stored as raw IEEE-754 bits, so a load after a save is
//! bit-exact.

use std::fs;
use std::path::Path;

use segplay_core::detector::Head;
use segplay_core::nn::Pool;
use segplay_core::{Detector, DetectorArch, Policy, PolicyArch};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SEGPLAY\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    Detector = 0,
    Policy = 1,
}

struct Writer(Vec<u8>);

impl Writer {
    fn header(kind: Kind) -> Self {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION as usize);
        w.0.push(kind as u8);
        w
    }

    fn u32(&mut self, v: usize) -> &mut Self {
        let v = u32::try_from(v).expect("architecture sizes fit in u32");
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }

    fn u8(&mut self, v: u8) -> &mut Self {
        self.0.push(v);
        self
    }

    fn params(mut self, params: &[f64]) -> Vec<u8> {
        self.0.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for p in params {
            self.0.extend_from_slice(&p.to_le_bytes());
        }
        self.0
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn header(&mut self, want: Kind) -> Result<()> {
        if self.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let found = self.u32()? as u32;
        if found != VERSION {
            return Err(Error::CheckpointVersion {
                found,
                supported: VERSION,
            });
        }
        let kind = self.u8()?;
        if kind != want as u8 {
            return Err(Error::Checkpoint(format!(
                "expected a {want:?} checkpoint, found kind {kind}"
            )));
        }
        Ok(())
    }

    fn params(&mut self) -> Result<Vec<f64>> {
        let b = self.take(8)?;
        let n = u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize;
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("bad count".into()))?)?;
        if self.pos != self.buf.len() {
            return Err(Error::Checkpoint("trailing bytes after parameters".into()));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn pool(code: u8) -> Result<Pool> {
    Pool::from_code(code).ok_or_else(|| Error::Checkpoint(format!("unknown pool code {code}")))
}

pub fn encode_detector(d: &Detector) -> Vec<u8> {
    let a = d.arch();
    let mut w = Writer::header(Kind::Detector);
    w.u32(a.input_size)
        .u32(a.channels)
        .u32(a.conv1)
        .u32(a.conv2)
        .u32(a.hidden)
        .u8(a.pool.code())
        .u8(a.head.code());
    w.params(d.params())
}

pub fn decode_detector(buf: &[u8]) -> Result<Detector> {
    let mut r = Reader { buf, pos: 0 };
    r.header(Kind::Detector)?;
    let arch = DetectorArch {
        input_size: r.u32()?,
        channels: r.u32()?,
        conv1: r.u32()?,
        conv2: r.u32()?,
        hidden: r.u32()?,
        pool: pool(r.u8()?)?,
        head: {
            let code = r.u8()?;
            Head::from_code(code).ok_or_else(|| Error::Checkpoint(format!("unknown head code {code}")))?
        },
    };
    Ok(Detector::from_params(arch, r.params()?)?)
}

pub fn encode_policy(p: &Policy) -> Vec<u8> {
    let a = p.arch();
    let mut w = Writer::header(Kind::Policy);
    w.u32(a.input_size)
        .u32(a.channels)
        .u32(a.conv1)
        .u32(a.conv2)
        .u32(a.patch_hidden)
        .u32(a.term_hidden)
        .u8(a.pool.code());
    w.params(p.params())
}

pub fn decode_policy(buf: &[u8]) -> Result<Policy> {
    let mut r = Reader { buf, pos: 0 };
    r.header(Kind::Policy)?;
    let arch = PolicyArch {
        input_size: r.u32()?,
        channels: r.u32()?,
        conv1: r.u32()?,
        conv2: r.u32()?,
        patch_hidden: r.u32()?,
        term_hidden: r.u32()?,
        pool: pool(r.u8()?)?,
    };
    Ok(Policy::from_params(arch, r.params()?)?)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_detector(path: &Path, d: &Detector) -> Result<()> {
    write(path, &encode_detector(d))
}

pub fn load_detector(path: &Path) -> Result<Detector> {
    decode_detector(&read(path)?)
}

pub fn save_policy(path: &Path, p: &Policy) -> Result<()> {
    write(path, &encode_policy(p))
}

pub fn load_policy(path: &Path) -> Result<Policy> {
    decode_policy(&read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use segplay_core::PatchScorer;

    fn bits(xs: &[f64]) -> Vec<u64> {
        xs.iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn detector_round_trip_is_bit_exact() {
        for head in [Head::GlobalAvg, Head::Flatten] {
            let arch = DetectorArch {
                head,
                pool: Pool::Avg,
                ..Default::default()
            };
            let d = Detector::init(arch, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
            let back = decode_detector(&encode_detector(&d)).unwrap();
            assert_eq!(back.arch(), d.arch());
            assert_eq!(bits(back.params()), bits(d.params()));
            assert_eq!(back.blank_score().to_bits(), d.blank_score().to_bits());
        }
    }

    #[test]
    fn policy_round_trip_is_bit_exact() {
        let p = Policy::init(PolicyArch::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let back = decode_policy(&encode_policy(&p)).unwrap();
        assert_eq!(back.arch(), p.arch());
        assert_eq!(bits(back.params()), bits(p.params()));
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = Policy::init(PolicyArch::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let good = encode_policy(&p);
        assert!(matches!(decode_detector(&good), Err(Error::Checkpoint(_))));
        let mut v2 = good.clone();
        v2[8] = 2;
        assert!(matches!(
            decode_policy(&v2),
            Err(Error::CheckpointVersion { found: 2, .. })
        ));
        assert!(decode_policy(&good[..good.len() - 3]).is_err());
        let mut long = good.clone();
        long.push(0);
        assert!(decode_policy(&long).is_err());
        let mut magic = good;
        magic[0] = b'X';
        assert!(decode_policy(&magic).is_err());
    }
}
