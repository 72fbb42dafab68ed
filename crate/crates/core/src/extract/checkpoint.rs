//! Binary checkpoint of an assembly with a JSON sidecar for inspection.
//!
//! Layout (little-endian): magic, `u32` version, `u32 P`, `u32 C`, `u8` mode,
//! `u8` completed phase (0 = none), `u64` seed, then `P·7` params, `P·C`
//! selection, `C` weights and `C·3` colors as `f64`, then the config hash as a
//! `u32` length followed by its bytes.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::assembly::{PrimitiveBank, SelectionMode, PARAM_COLS};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::optim::Phase;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"QCSGASM\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct AssemblyCheckpoint {
    pub bank: PrimitiveBank,
    /// One RGB color per convex.
    pub colors: Vec<[f64; 3]>,
    pub completed_phase: Option<Phase>,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    format_version: u32,
    primitives: usize,
    convexes: usize,
    mode: SelectionMode,
    completed_phase: Option<u8>,
    seed: u64,
    config_hash: &'a str,
    active_primitives: usize,
    active_convexes: usize,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            format: "checkpoint",
            reason: format!("truncated at byte {}", self.pos),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| bad("section too large"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect())
    }
}

fn bad(reason: &str) -> Error {
    Error::Format {
        format: "checkpoint",
        reason: reason.to_string(),
    }
}

impl AssemblyCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let p = self.bank.primitive_count();
        let c = self.bank.convex_count();
        let mut out = Vec::with_capacity(32 + 8 * (p * (PARAM_COLS + c) + 4 * c));
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(p as u32).to_le_bytes());
        out.extend_from_slice(&(c as u32).to_le_bytes());
        out.push(match self.bank.mode() {
            SelectionMode::Float => 0,
            SelectionMode::Binary => 1,
        });
        out.push(self.completed_phase.map_or(0, Phase::number));
        out.extend_from_slice(&self.seed.to_le_bytes());
        let floats = self
            .bank
            .params()
            .as_slice()
            .iter()
            .chain(self.bank.selection().as_slice())
            .chain(self.bank.weights())
            .chain(self.colors.iter().flatten());
        for v in floats {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.config_hash.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_hash.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let p = r.u32()? as usize;
        let c = r.u32()? as usize;
        let mode = match r.u8()? {
            0 => SelectionMode::Float,
            1 => SelectionMode::Binary,
            m => return Err(bad(&format!("unknown selection mode {m}"))),
        };
        let completed_phase = match r.u8()? {
            0 => None,
            n => Some(Phase::from_number(n).ok_or_else(|| bad(&format!("unknown phase {n}")))?),
        };
        let seed = r.u64()?;
        let params = Matrix::from_vec(p, PARAM_COLS, r.f64s(p * PARAM_COLS)?)?;
        let selection = Matrix::from_vec(p, c, r.f64s(p * c)?)?;
        let weights = r.f64s(c)?;
        let colors = r
            .f64s(c * 3)?
            .chunks_exact(3)
            .map(|k| [k[0], k[1], k[2]])
            .collect();
        let len = r.u32()? as usize;
        let config_hash = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| bad("config hash is not UTF-8"))?;
        if r.pos != bytes.len() {
            return Err(bad(&format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            bank: PrimitiveBank::new(params, selection, weights, mode)?,
            colors,
            completed_phase,
            config_hash,
            seed,
        })
    }

    /// Sidecar path next to a checkpoint: `<path>.json`.
    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    pub fn sidecar_json(&self) -> String {
        let sidecar = Sidecar {
            format_version: CHECKPOINT_VERSION,
            primitives: self.bank.primitive_count(),
            convexes: self.bank.convex_count(),
            mode: self.bank.mode(),
            completed_phase: self.completed_phase.map(Phase::number),
            seed: self.seed,
            config_hash: &self.config_hash,
            active_primitives: self.bank.active_primitive_count(),
            active_convexes: self.bank.active_convex_count(),
        };
        serde_json::to_string_pretty(&sidecar).expect("sidecar serializes")
    }

    /// Write the binary checkpoint and its JSON sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))?;
        let side = Self::sidecar_path(path);
        std::fs::write(&side, self.sidecar_json()).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::InitParams;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn sample(seed: u64, binary: bool) -> AssemblyCheckpoint {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut bank = PrimitiveBank::random(9, 4, &InitParams::default(), &mut rng).unwrap();
        if binary {
            crate::optim::binarize_selection(&mut bank, 0.01).unwrap();
        }
        AssemblyCheckpoint {
            bank,
            colors: (0..4).map(|c| [0.1 * c as f64, 1.0 / 3.0, 0.7]).collect(),
            completed_phase: binary.then_some(Phase::Three),
            config_hash: "abc123".into(),
            seed,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.qcsg");
        let ck = sample(3, true);
        ck.save(&path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let back = AssemblyCheckpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        back.save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
        let side: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(AssemblyCheckpoint::sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(side["mode"], "binary");
        assert_eq!(side["completed_phase"], 3);
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let mut bytes = sample(1, false).to_bytes();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let err = AssemblyCheckpoint::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Version { found: 7, expected: 1 }));
        let msg = err.to_string();
        assert!(msg.contains('7') && msg.contains('1'));
    }

    #[test]
    fn truncation_and_bad_magic_are_format_errors() {
        let bytes = sample(1, false).to_bytes();
        assert!(matches!(AssemblyCheckpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(AssemblyCheckpoint::from_bytes(&wrong), Err(Error::Format { .. })));
        let mut longer = bytes;
        longer.push(0);
        assert!(matches!(AssemblyCheckpoint::from_bytes(&longer), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn bytes_round_trip_bit_exactly(seed in 0u64..1000, binary in any::<bool>()) {
            let ck = sample(seed, binary);
            let bytes = ck.to_bytes();
            let back = AssemblyCheckpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            let bits = |c: &AssemblyCheckpoint| c.bank.params().as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back), bits(&ck));
        }
    }
}
