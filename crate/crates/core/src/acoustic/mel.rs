use std::io::{Read, Write};

use super::AcousticError;
use crate::tensor::Tensor;

pub const MEL_MAGIC: &[u8; 4] = b"MEL0";

/// Mel frames `[T × n_mels]` and the audio samples each frame covers.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Tensor<f32>,
    pub frame_hop: usize,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.outer()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.cols()
    }

    pub fn n_samples(&self) -> usize {
        self.n_frames() * self.frame_hop
    }
}

/// Writes `MEL0`, `T: u32`, `n_mels: u32`, then row-major little-endian `f32`.
pub fn write_mel(w: &mut impl Write, frames: &Tensor<f32>) -> Result<(), AcousticError> {
    if frames.ndim() != 2 {
        return Err(AcousticError::Format(format!("frames must be 2-D, got {:?}", frames.shape())));
    }
    w.write_all(MEL_MAGIC)?;
    w.write_all(&(frames.outer() as u32).to_le_bytes())?;
    w.write_all(&(frames.cols() as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(frames.len() * 4);
    for v in frames.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_mel(r: &mut impl Read) -> Result<Tensor<f32>, AcousticError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 12 {
        return Err(AcousticError::Format(format!("{} bytes is shorter than the 12-byte header", bytes.len())));
    }
    if &bytes[..4] != MEL_MAGIC {
        return Err(AcousticError::Format("bad magic at offset 0".into()));
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let n = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let want = 12 + t * n * 4;
    if bytes.len() != want {
        return Err(AcousticError::Format(format!("expected {want} bytes for {t}x{n} frames, found {}", bytes.len())));
    }
    let data = bytes[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok(Tensor::new(vec![t, n], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let t = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, f32::MIN_POSITIVE, 3.25, -0.0]).unwrap();
        let mut buf = Vec::new();
        write_mel(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"MEL0");
        assert_eq!(buf.len(), 12 + 24);
        let back = read_mel(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        let bits = |x: &Tensor<f32>| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&t));
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::<f32>::zeros(vec![1, 2]);
        let mut buf = Vec::new();
        write_mel(&mut buf, &t).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_mel(&mut bad.as_slice()), Err(AcousticError::Format(_))));
        assert!(matches!(read_mel(&mut &buf[..buf.len() - 1]), Err(AcousticError::Format(_))));
    }
}
