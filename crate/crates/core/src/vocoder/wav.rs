use std::io::Write;

pub const WAV_HEADER_BYTES: usize = 44;

/// RIFF/WAVE header for mono 16-bit PCM with `n_samples` samples.
pub fn wav_header(n_samples: usize, sample_rate: u32) -> [u8; WAV_HEADER_BYTES] {
    let data_len = (n_samples * 2) as u32;
    let mut h = [0u8; WAV_HEADER_BYTES];
    let mut put = |at: usize, bytes: &[u8]| h[at..at + bytes.len()].copy_from_slice(bytes);
    put(0, b"RIFF");
    put(4, &(36 + data_len).to_le_bytes());
    put(8, b"WAVE");
    put(12, b"fmt ");
    put(16, &16u32.to_le_bytes());
    put(20, &1u16.to_le_bytes()); // PCM
    put(22, &1u16.to_le_bytes()); // mono
    put(24, &sample_rate.to_le_bytes());
    put(28, &(sample_rate * 2).to_le_bytes());
    put(32, &2u16.to_le_bytes());
    put(34, &16u16.to_le_bytes());
    put(36, b"data");
    put(40, &data_len.to_le_bytes());
    h
}

pub fn pcm_bytes(samples: &[i16]) -> Vec<u8> {
    samples.iter().flat_map(|s| s.to_le_bytes()).collect()
}

pub fn write_wav(w: &mut impl Write, samples: &[i16], sample_rate: u32) -> std::io::Result<()> {
    w.write_all(&wav_header(samples.len(), sample_rate))?;
    w.write_all(&pcm_bytes(samples))
}

/// Parses a file written by [`write_wav`]: `(sample_rate, samples)`.
pub fn read_wav(bytes: &[u8]) -> Option<(u32, Vec<i16>)> {
    if bytes.len() < WAV_HEADER_BYTES
        || &bytes[0..4] != b"RIFF"
        || &bytes[8..12] != b"WAVE"
        || &bytes[36..40] != b"data"
    {
        return None;
    }
    let rate = u32::from_le_bytes(bytes[24..28].try_into().ok()?);
    let len = u32::from_le_bytes(bytes[40..44].try_into().ok()?) as usize;
    let data = bytes.get(WAV_HEADER_BYTES..WAV_HEADER_BYTES + len)?;
    Some((rate, data.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect()))
}
