//! Self-describing binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "DOMACCK1"
//! length   u64      payload byte count
//! payload  length bytes
//! crc      u32      CRC-32 (IEEE) of the payload
//! ```
//!
//! The payload holds, in order: the config snapshot (TOML text), the
//! variant name, the episode and update counters, every named parameter
//! block, every named Adam state, every named random stream, and the
//! mid-episode environment snapshots used by step-window training. Strings
//! are a `u32` byte length plus UTF-8, sequences a `u64` count, reals their
//! IEEE-754 bit pattern. Encoding is deterministic, so save, load and save
//! again gives the same bytes.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::diffcore::{AdamState, ParamBlock};
use crate::env::{GridState, Pos};
use crate::error::{Error, Result};
use crate::rng::RngState;

pub const MAGIC: &[u8; 8] = b"DOMACCK1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedAdam {
    pub name: String,
    pub state: AdamState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedRng {
    pub name: String,
    pub state: RngState,
}

/// A rollout worker paused between updates.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSnapshot {
    pub state: GridState,
    pub rng: RngState,
    pub done: bool,
    /// Episodes this worker has started.
    pub episodes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_toml: String,
    pub variant: String,
    /// Training episodes completed.
    pub episode: u64,
    pub update_step: u64,
    pub blocks: Vec<ParamBlock>,
    pub optimizers: Vec<NamedAdam>,
    pub rngs: Vec<NamedRng>,
    pub envs: Vec<EnvSnapshot>,
}

impl Checkpoint {
    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn optimizer(&self, name: &str) -> Option<&AdamState> {
        self.optimizers.iter().find(|o| o.name == name).map(|o| &o.state)
    }

    pub fn rng(&self, name: &str) -> Option<&RngState> {
        self.rngs.iter().find(|r| r.name == name).map(|r| &r.state)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut p = Vec::new();
        self.encode(&mut p).expect("writing to memory cannot fail");
        let mut out = Vec::with_capacity(p.len() + 20);
        out.extend_from_slice(MAGIC);
        out.write_u64::<LE>(p.len() as u64).unwrap();
        out.extend_from_slice(&p);
        out.write_u32::<LE>(crc32fast::hash(&p)).unwrap();
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            let tag = String::from_utf8_lossy(&bytes[..bytes.len().min(8)]).into_owned();
            return Err(Error::Checkpoint(format!("unsupported format tag {tag:?}, expected \"DOMACCK1\"")));
        }
        if bytes.len() < 16 {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let expected = len.checked_add(20).ok_or_else(|| Error::Checkpoint("corrupt length".into()))?;
        if (bytes.len() as u64) != expected {
            return Err(Error::Checkpoint(format!("length mismatch: header says {expected} bytes, file has {}", bytes.len())));
        }
        let payload = &bytes[16..16 + len as usize];
        let crc = u32::from_le_bytes(bytes[16 + len as usize..].try_into().unwrap());
        if crc32fast::hash(payload) != crc {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut c = Cursor::new(payload);
        let ck = Self::decode(&mut c).map_err(|e| Error::Checkpoint(format!("corrupt payload: {e}")))?;
        if c.position() != len {
            return Err(Error::Checkpoint("trailing bytes in payload".into()));
        }
        Ok(ck)
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    fn encode(&self, w: &mut Vec<u8>) -> std::io::Result<()> {
        put_str(w, &self.config_toml)?;
        put_str(w, &self.variant)?;
        w.write_u64::<LE>(self.episode)?;
        w.write_u64::<LE>(self.update_step)?;
        w.write_u64::<LE>(self.blocks.len() as u64)?;
        for b in &self.blocks {
            put_str(w, &b.name)?;
            w.write_u32::<LE>(b.shape.len() as u32)?;
            for &d in &b.shape {
                w.write_u64::<LE>(d as u64)?;
            }
            put_reals(w, &b.values)?;
        }
        w.write_u64::<LE>(self.optimizers.len() as u64)?;
        for o in &self.optimizers {
            put_str(w, &o.name)?;
            let s = &o.state;
            for x in [s.lr, s.beta1, s.beta2, s.eps] {
                w.write_u64::<LE>(x.to_bits())?;
            }
            w.write_u64::<LE>(s.t)?;
            w.write_u64::<LE>(s.m.len() as u64)?;
            for (m, v) in s.m.iter().zip(&s.v) {
                put_reals(w, m)?;
                put_reals(w, v)?;
            }
        }
        w.write_u64::<LE>(self.rngs.len() as u64)?;
        for r in &self.rngs {
            put_str(w, &r.name)?;
            put_rng(w, &r.state)?;
        }
        w.write_u64::<LE>(self.envs.len() as u64)?;
        for e in &self.envs {
            put_positions(w, &e.state.predators)?;
            put_positions(w, &e.state.preys)?;
            w.write_u64::<LE>(e.state.prey_alive.len() as u64)?;
            for &a in &e.state.prey_alive {
                w.write_u8(a as u8)?;
            }
            w.write_u64::<LE>(e.state.step_count as u64)?;
            put_rng(w, &e.rng)?;
            w.write_u8(e.done as u8)?;
            w.write_u64::<LE>(e.episodes)?;
        }
        Ok(())
    }

    fn decode(r: &mut Cursor<&[u8]>) -> std::io::Result<Self> {
        let config_toml = get_str(r)?;
        let variant = get_str(r)?;
        let episode = r.read_u64::<LE>()?;
        let update_step = r.read_u64::<LE>()?;
        let n = get_count(r)?;
        let mut blocks = Vec::with_capacity(n);
        for _ in 0..n {
            let name = get_str(r)?;
            let ndim = r.read_u32::<LE>()? as usize;
            let shape = (0..ndim).map(|_| Ok(r.read_u64::<LE>()? as usize)).collect::<std::io::Result<Vec<_>>>()?;
            let values = get_reals(r)?;
            let mut b = ParamBlock::zeros(name, shape);
            if b.values.len() != values.len() {
                return Err(invalid("block length does not match its shape"));
            }
            b.values = values;
            blocks.push(b);
        }
        let n = get_count(r)?;
        let mut optimizers = Vec::with_capacity(n);
        for _ in 0..n {
            let name = get_str(r)?;
            let mut hp = [0.0; 4];
            for x in &mut hp {
                *x = f64::from_bits(r.read_u64::<LE>()?);
            }
            let t = r.read_u64::<LE>()?;
            let k = get_count(r)?;
            let (mut m, mut v) = (Vec::with_capacity(k), Vec::with_capacity(k));
            for _ in 0..k {
                m.push(get_reals(r)?);
                v.push(get_reals(r)?);
            }
            optimizers.push(NamedAdam { name, state: AdamState { lr: hp[0], beta1: hp[1], beta2: hp[2], eps: hp[3], t, m, v } });
        }
        let n = get_count(r)?;
        let mut rngs = Vec::with_capacity(n);
        for _ in 0..n {
            rngs.push(NamedRng { name: get_str(r)?, state: get_rng(r)? });
        }
        let n = get_count(r)?;
        let mut envs = Vec::with_capacity(n);
        for _ in 0..n {
            let predators = get_positions(r)?;
            let preys = get_positions(r)?;
            let k = get_count(r)?;
            let prey_alive = (0..k).map(|_| Ok(r.read_u8()? != 0)).collect::<std::io::Result<Vec<_>>>()?;
            let step_count = r.read_u64::<LE>()? as usize;
            let rng = get_rng(r)?;
            let done = r.read_u8()? != 0;
            let episodes = r.read_u64::<LE>()?;
            envs.push(EnvSnapshot { state: GridState { predators, preys, prey_alive, step_count }, rng, done, episodes });
        }
        Ok(Checkpoint { config_toml, variant, episode, update_step, blocks, optimizers, rngs, envs })
    }
}

/// SHA-256 over block names, shapes and value bits, as lowercase hex.
pub fn param_hash<'a>(blocks: impl IntoIterator<Item = &'a ParamBlock>) -> String {
    let mut h = Sha256::new();
    for b in blocks {
        h.update((b.name.len() as u64).to_le_bytes());
        h.update(b.name.as_bytes());
        for &d in &b.shape {
            h.update((d as u64).to_le_bytes());
        }
        for v in &b.values {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn invalid(msg: &str) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, msg.to_string())
}

fn put_str(w: &mut Vec<u8>, s: &str) -> std::io::Result<()> {
    w.write_u32::<LE>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn get_str(r: &mut Cursor<&[u8]>) -> std::io::Result<String> {
    let n = r.read_u32::<LE>()? as usize;
    if n as u64 > remaining(r) {
        return Err(invalid("string runs past the payload"));
    }
    let mut buf = vec![0; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| invalid("string is not UTF-8"))
}

fn remaining(r: &Cursor<&[u8]>) -> u64 {
    r.get_ref().len() as u64 - r.position()
}

/// Reads a sequence length, rejecting counts that cannot fit in the rest of the payload.
fn get_count(r: &mut Cursor<&[u8]>) -> std::io::Result<usize> {
    let n = r.read_u64::<LE>()?;
    if n > remaining(r) {
        return Err(invalid("sequence runs past the payload"));
    }
    Ok(n as usize)
}

fn put_reals(w: &mut Vec<u8>, xs: &[f64]) -> std::io::Result<()> {
    w.write_u64::<LE>(xs.len() as u64)?;
    for x in xs {
        w.write_u64::<LE>(x.to_bits())?;
    }
    Ok(())
}

fn get_reals(r: &mut Cursor<&[u8]>) -> std::io::Result<Vec<f64>> {
    let n = get_count(r)?;
    (0..n).map(|_| Ok(f64::from_bits(r.read_u64::<LE>()?))).collect()
}

fn put_rng(w: &mut Vec<u8>, s: &RngState) -> std::io::Result<()> {
    w.write_all(&s.key)?;
    w.write_u64::<LE>(s.stream)?;
    w.write_u128::<LE>(s.word_pos)
}

fn get_rng(r: &mut Cursor<&[u8]>) -> std::io::Result<RngState> {
    let mut key = [0u8; 32];
    r.read_exact(&mut key)?;
    Ok(RngState { key, stream: r.read_u64::<LE>()?, word_pos: r.read_u128::<LE>()? })
}

fn put_positions(w: &mut Vec<u8>, ps: &[Pos]) -> std::io::Result<()> {
    w.write_u64::<LE>(ps.len() as u64)?;
    for p in ps {
        w.write_u64::<LE>(p.row as u64)?;
        w.write_u64::<LE>(p.col as u64)?;
    }
    Ok(())
}

fn get_positions(r: &mut Cursor<&[u8]>) -> std::io::Result<Vec<Pos>> {
    let n = get_count(r)?;
    (0..n).map(|_| Ok(Pos::new(r.read_u64::<LE>()? as usize, r.read_u64::<LE>()? as usize))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use rand::RngCore;

    fn sample() -> Checkpoint {
        let mut b = ParamBlock::zeros("agent0/pi/w0", vec![2, 3]);
        b.values = vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -7.25, 1.0 / 3.0];
        let mut adam = AdamState::new(std::slice::from_ref(&b), 2.5e-4);
        adam.t = 17;
        adam.m[0][1] = 0.5;
        adam.v[0][2] = 1e-9;
        let mut rng = stream(9, Purpose::Actions, 2);
        rng.next_u64();
        Checkpoint {
            config_toml: "seed = 9\n".into(),
            variant: "domac".into(),
            episode: 1000,
            update_step: 100,
            blocks: vec![b, ParamBlock::zeros("agent0/pi/b0", vec![3])],
            optimizers: vec![NamedAdam { name: "agent0/pi".into(), state: adam }],
            rngs: vec![NamedRng { name: "actions/0".into(), state: RngState::capture(&rng) }],
            envs: vec![EnvSnapshot {
                state: GridState { predators: vec![Pos::new(0, 1), Pos::new(4, 4)], preys: vec![Pos::new(2, 2)], prey_alive: vec![true], step_count: 12 },
                rng: RngState::capture(&stream(1, Purpose::EnvEpisodes, 0)),
                done: false,
                episodes: 3,
            }],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.blocks[0].values[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ck");
        sample().save(&path).unwrap();
        let first = std::fs::read(&path).unwrap();
        Checkpoint::load(&path).unwrap().save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn truncation_and_corruption_detected() {
        let bytes = sample().to_bytes();
        for cut in [0, 5, 12, 16, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[40] ^= 0x10;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checkpoint(m)) if m.contains("checksum")));
        let mut version = bytes;
        version[7] = b'2';
        assert!(matches!(Checkpoint::from_bytes(&version), Err(Error::Checkpoint(m)) if m.contains("DOMACCK1")));
    }

    #[test]
    fn hash_tracks_values() {
        let ck = sample();
        let h = param_hash(&ck.blocks);
        assert_eq!(h.len(), 64);
        assert_eq!(h, param_hash(&ck.blocks));
        let mut changed = ck.blocks.clone();
        changed[1].values[0] = 1e-300;
        assert_ne!(h, param_hash(&changed));
    }
}
