//! On-disk formats: binary latent fields, trajectory sequences and 8-bit PGM maps.
//!
//! Latent file (`.lfld`): `b"LFLD"`, then `u32` C, H, W (little-endian),
//! then `C·H·W` little-endian `f64` values in channel-major order.
//!
//! Trajectory file (`.ltrj`): `b"LTRJ"`, `u32` state count, then for each
//! state a `u32` step index followed by one latent record.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{LatentField, SpatialMap};

const LATENT_MAGIC: &[u8; 4] = b"LFLD";
const TRAJECTORY_MAGIC: &[u8; 4] = b"LTRJ";

fn dim_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("dimension {v} exceeds u32")))
}

pub fn write_latent<W: Write>(out: &mut W, f: &LatentField) -> Result<()> {
    out.write_all(LATENT_MAGIC)?;
    for d in [f.channels(), f.height(), f.width()] {
        out.write_all(&dim_u32(d)?.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(f.data().len() * 8);
    for v in f.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_latent<R: Read>(input: &mut R) -> Result<LatentField> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != LATENT_MAGIC {
        return Err(Error::Format(format!("bad latent magic {magic:?}")));
    }
    let c = read_u32(input)? as usize;
    let h = read_u32(input)? as usize;
    let w = read_u32(input)? as usize;
    let n = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::Format("latent dimensions overflow".into()))?;
    let mut bytes = vec![0u8; n * 8];
    input.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    LatentField::new(c, h, w, data)
}

pub fn save_latent(path: &Path, f: &LatentField) -> Result<()> {
    let mut buf = Vec::new();
    write_latent(&mut buf, f)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_latent(path: &Path) -> Result<LatentField> {
    let bytes = std::fs::read(path)?;
    read_latent(&mut bytes.as_slice())
}

pub fn write_trajectory<W: Write>(out: &mut W, states: &[(usize, &LatentField)]) -> Result<()> {
    out.write_all(TRAJECTORY_MAGIC)?;
    out.write_all(&dim_u32(states.len())?.to_le_bytes())?;
    for (step, f) in states {
        out.write_all(&dim_u32(*step)?.to_le_bytes())?;
        write_latent(out, f)?;
    }
    Ok(())
}

pub fn read_trajectory<R: Read>(input: &mut R) -> Result<Vec<(usize, LatentField)>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != TRAJECTORY_MAGIC {
        return Err(Error::Format(format!("bad trajectory magic {magic:?}")));
    }
    let n = read_u32(input)? as usize;
    (0..n)
        .map(|_| {
            let step = read_u32(input)? as usize;
            Ok((step, read_latent(input)?))
        })
        .collect()
}

/// Encodes a map as binary PGM (P5) after rescaling its own min/max to
/// `[0, 255]`. Constant maps encode as all zeros.
pub fn encode_pgm<M: SpatialMap>(m: &M) -> Vec<u8> {
    let lo = m.min_value();
    let hi = m.max_value();
    let range = hi - lo;
    let mut out = format!("P5\n{} {}\n255\n", m.width(), m.height()).into_bytes();
    out.extend(m.values().iter().map(|v| {
        if range > 0.0 {
            ((v - lo) / range * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

pub fn save_pgm<M: SpatialMap>(path: &Path, m: &M) -> Result<()> {
    std::fs::write(path, encode_pgm(m))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::EnergyMap;
    use proptest::prelude::*;

    #[test]
    fn latent_header_layout() {
        let f = LatentField::new(2, 1, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5]).unwrap();
        let mut buf = Vec::new();
        write_latent(&mut buf, &f).unwrap();
        assert_eq!(buf.len(), 16 + 6 * 8);
        assert_eq!(&buf[..4], b"LFLD");
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &3u32.to_le_bytes());
        assert_eq!(&buf[16..24], &1.0f64.to_le_bytes());
        assert_eq!(&buf[56..64], &6.5f64.to_le_bytes());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let f = LatentField::zeros(1, 2, 2);
        let mut buf = Vec::new();
        write_latent(&mut buf, &f).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_latent(&mut bad.as_slice()).is_err());
        buf.truncate(buf.len() - 1);
        assert!(read_latent(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn trajectory_sequence() {
        let a = LatentField::filled(1, 2, 2, 1.0);
        let b = LatentField::filled(1, 2, 2, -3.0);
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &[(50, &a), (49, &b)]).unwrap();
        let back = read_trajectory(&mut buf.as_slice()).unwrap();
        assert_eq!(back, vec![(50, a), (49, b)]);
    }

    #[test]
    fn pgm_encoding() {
        let m = EnergyMap::new(2, 2, vec![0.0, 1.0, 2.0, 4.0]).unwrap();
        let bytes = encode_pgm(&m);
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 64, 128, 255]);

        let c = EnergyMap::new(1, 3, vec![7.0; 3]).unwrap();
        let bytes = encode_pgm(&c);
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 0, 0]);
    }

    proptest! {
        #[test]
        fn latent_roundtrip(c in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
            let n = c * h * w;
            let data: Vec<f64> = (0..n).map(|i| ((seed.wrapping_mul(i as u64 + 1) % 10007) as f64) * 1e-3 - 5.0).collect();
            let f = LatentField::new(c, h, w, data).unwrap();
            let mut buf = Vec::new();
            write_latent(&mut buf, &f).unwrap();
            prop_assert_eq!(read_latent(&mut buf.as_slice()).unwrap(), f);
        }
    }
}
