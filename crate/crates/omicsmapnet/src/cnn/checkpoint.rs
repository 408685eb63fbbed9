//! Checkpoint framing: magic + version, architecture header, parameter
//! groups as little-endian f64 blobs, optional Adam state, and a trailing
//! CRC32 over everything before it.

use super::train::AdamState;
use super::{Architecture, CnnError, CnnModel};
use crate::util::{atomic_write, crc32};
use std::path::Path;

const MAGIC: &[u8; 4] = b"OMCK";
const VERSION: u32 = 1;

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    push_u32(out, values.len() as u32);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn checkpoint_save(
    model: &CnnModel,
    adam: Option<&AdamState>,
    path: &Path,
) -> Result<(), CnnError> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    push_u32(&mut bytes, VERSION);
    let a = &model.arch;
    for v in [
        a.input_side,
        a.in_channels,
        a.n_classes,
        a.conv_channels[0],
        a.conv_channels[1],
        a.conv_channels[2],
        a.fc1_width,
    ] {
        push_u32(&mut bytes, v as u32);
    }
    push_u32(&mut bytes, u32::from(adam.is_some()));
    for group in model.params.groups() {
        push_f64s(&mut bytes, group);
    }
    if let Some(state) = adam {
        bytes.extend_from_slice(&state.t.to_le_bytes());
        for group in state.m.iter().chain(&state.v) {
            push_f64s(&mut bytes, group);
        }
    }
    let checksum = crc32(&bytes);
    push_u32(&mut bytes, checksum);
    atomic_write(path, &bytes)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CnnError> {
        if self.pos + n > self.bytes.len() {
            return Err(CnnError::ChecksumMismatch);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CnnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CnnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>, CnnError> {
        let n = self.u32()? as usize;
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn checkpoint_load(path: &Path) -> Result<(CnnModel, Option<AdamState>), CnnError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 12 {
        return Err(CnnError::ChecksumMismatch);
    }
    let (payload, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    if crc32(payload) != stored {
        return Err(CnnError::ChecksumMismatch);
    }
    let mut r = Reader { bytes: payload, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CnnError::VersionMismatch("not an OMCK checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CnnError::VersionMismatch(format!("version {version}, expected {VERSION}")));
    }
    let arch = Architecture {
        input_side: r.u32()? as usize,
        in_channels: r.u32()? as usize,
        n_classes: r.u32()? as usize,
        conv_channels: [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize],
        fc1_width: r.u32()? as usize,
    };
    let has_adam = r.u32()? != 0;

    // Build a correctly shaped model, then overwrite the groups.
    let mut model = CnnModel::new(arch, 0)?;
    for group in model.params.groups_mut() {
        let loaded = r.f64s()?;
        if loaded.len() != group.len() {
            return Err(CnnError::VersionMismatch(format!(
                "group of {} values does not fit expected {}",
                loaded.len(),
                group.len()
            )));
        }
        *group = loaded;
    }
    let adam = if has_adam {
        let t = r.u64()?;
        let mut m = Vec::with_capacity(10);
        for _ in 0..10 {
            m.push(r.f64s()?);
        }
        let mut v = Vec::with_capacity(10);
        for _ in 0..10 {
            v.push(r.f64s()?);
        }
        Some(AdamState { m, v, t })
    } else {
        None
    };
    Ok((model, adam))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::ops::Tensor;
    use crate::cnn::{predict, Architecture};
    use rand::{Rng, SeedableRng};

    fn arch() -> Architecture {
        Architecture {
            input_side: 22,
            in_channels: 1,
            n_classes: 3,
            conv_channels: [2, 2, 3],
            fc1_width: 5,
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.omck");
        let model = CnnModel::new(arch(), 33).unwrap();
        let mut state = AdamState::new(&model.params);
        state.t = 17;
        state.m[0][0] = 0.25;
        state.v[9][1] = 1e-9;
        checkpoint_save(&model, Some(&state), &path).unwrap();
        let (loaded, loaded_state) = checkpoint_load(&path).unwrap();
        assert_eq!(loaded, model);
        assert_eq!(loaded_state, Some(state));
        // Save-load-save produces identical bytes.
        let path2 = dir.path().join("model2.omck");
        checkpoint_save(&loaded, loaded_state.as_ref(), &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_file_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.omck");
        let model = CnnModel::new(arch(), 1).unwrap();
        checkpoint_save(&model, None, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(checkpoint_load(&path).unwrap_err(), CnnError::ChecksumMismatch));
        // A flipped payload byte is also caught.
        let mut corrupt = bytes.clone();
        corrupt[40] ^= 0xFF;
        std::fs::write(&path, &corrupt).unwrap();
        assert!(matches!(checkpoint_load(&path).unwrap_err(), CnnError::ChecksumMismatch));
    }

    #[test]
    fn foreign_magic_is_a_version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("other.bin");
        let mut bytes = b"NOPE".to_vec();
        bytes.extend_from_slice(&[0u8; 16]);
        let crc = crate::util::crc32(&bytes);
        bytes.extend_from_slice(&crc.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(checkpoint_load(&path).unwrap_err(), CnnError::VersionMismatch(_)));
    }

    // Oracle: prediction diff across a save/load cycle.
    #[test]
    fn loaded_model_reproduces_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.omck");
        let model = CnnModel::new(arch(), 55).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let images: Vec<Tensor> = (0..3)
            .map(|_| Tensor {
                h: 22,
                w: 22,
                c: 1,
                data: (0..22 * 22).map(|_| rng.gen_range(0.0..1.0)).collect(),
            })
            .collect();
        let before = predict(&model, &images).unwrap();
        checkpoint_save(&model, None, &path).unwrap();
        let (loaded, _) = checkpoint_load(&path).unwrap();
        let after = predict(&loaded, &images).unwrap();
        assert_eq!(before, after);
    }
}
