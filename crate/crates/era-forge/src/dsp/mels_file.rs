//! Feature cache format: magic `MELS`, u32 version, u32 n_mels, u32 n_frames,
//! then row-major float32 little-endian values.

use std::io::{Read, Write};
use std::path::Path;

use super::{DspConfig, MelSpectrogram};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MELS";
const VERSION: u32 = 1;

pub fn write_mels(path: &Path, m: &MelSpectrogram) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(m.n_mels as u32).to_le_bytes())?;
    f.write_all(&(m.n_frames as u32).to_le_bytes())?;
    for &v in &m.values {
        f.write_all(&(v as f32).to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

/// Read a feature file. The file stores only the matrix; analysis metadata
/// (win/hop/rate) is taken from `cfg`.
pub fn read_mels(path: &Path, cfg: &DspConfig) -> Result<MelSpectrogram> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad MELS magic {magic:?}")));
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported MELS version {version}")));
    }
    f.read_exact(&mut u32buf)?;
    let n_mels = u32::from_le_bytes(u32buf) as usize;
    f.read_exact(&mut u32buf)?;
    let n_frames = u32::from_le_bytes(u32buf) as usize;
    if n_mels == 0 || n_frames == 0 {
        return Err(Error::Format(format!("degenerate MELS dims {n_mels}x{n_frames}")));
    }
    let mut buf = vec![0u8; n_mels * n_frames * 4];
    f.read_exact(&mut buf)?;
    let values: Vec<f64> = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(MelSpectrogram {
        values,
        n_mels,
        n_frames,
        win: cfg.win,
        hop: cfg.hop,
        sample_rate: cfg.sample_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_matrix_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.mels");
        let m = MelSpectrogram {
            values: vec![0.5, 1.5, 2.5, 3.5, 4.5, 5.5],
            n_mels: 2,
            n_frames: 3,
            win: 2048,
            hop: 512,
            sample_rate: 22050,
        };
        write_mels(&path, &m).unwrap();
        let back = read_mels(&path, &DspConfig::default()).unwrap();
        assert_eq!(back.n_mels, 2);
        assert_eq!(back.n_frames, 3);
        assert_eq!(back.values, m.values);
    }

    #[test]
    fn header_layout_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.mels");
        let m = MelSpectrogram {
            values: vec![1.0],
            n_mels: 1,
            n_frames: 1,
            win: 2048,
            hop: 512,
            sample_rate: 22050,
        };
        write_mels(&path, &m).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"MELS");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
        assert_eq!(f32::from_le_bytes(bytes[16..20].try_into().unwrap()), 1.0);
        assert_eq!(bytes.len(), 20);
    }
}
