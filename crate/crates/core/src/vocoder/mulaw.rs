use super::VocoderError;

pub const MU: f64 = 255.0;
pub const N_CLASSES: usize = 256;
/// Class of silence.
pub const CENTER: u8 = 128;

/// µ-law class of `x` (clamped to `[−1, 1]`): `round(128·F(x) + 128)`,
/// clamped to `[0, 255]`, with `F(x) = sign(x)·ln(1 + µ|x|)/ln(1 + µ)`.
pub fn mu_law_encode(x: f32) -> u8 {
    let x = if x.is_nan() { 0.0 } else { (x as f64).clamp(-1.0, 1.0) };
    let f = x.signum() * (MU * x.abs()).ln_1p() / MU.ln_1p();
    (128.0 * f + 128.0).round().clamp(0.0, 255.0) as u8
}

/// Inverse companding of class `c`; class 128 decodes to exactly 0.
pub fn mu_law_decode(c: u32) -> Result<f32, VocoderError> {
    if c as usize >= N_CLASSES {
        return Err(VocoderError::Argument(format!("µ-law class {c} outside [0, 256)")));
    }
    Ok(decode_class(c as u8))
}

pub(crate) fn decode_class(c: u8) -> f32 {
    let y = (c as f64 - 128.0) / 128.0;
    (y.signum() * ((1.0 + MU).powf(y.abs()) - 1.0) / MU) as f32
}

/// 16-bit PCM value of a class.
pub fn class_to_pcm(c: u8) -> i16 {
    (decode_class(c) as f64 * 32767.0).round() as i16
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_points() {
        assert_eq!(mu_law_encode(0.0), 128);
        assert_eq!(mu_law_encode(1.0), 255);
        assert_eq!(mu_law_encode(-1.0), 0);
        assert_eq!(mu_law_decode(128).unwrap(), 0.0);
        assert!(mu_law_decode(256).is_err());
    }

    #[test]
    fn decode_is_strictly_increasing_and_inverted_by_encode() {
        for c in 0..256u32 {
            if c < 255 {
                assert!(mu_law_decode(c + 1).unwrap() > mu_law_decode(c).unwrap());
            }
            assert_eq!(mu_law_encode(mu_law_decode(c).unwrap()) as u32, c);
        }
    }

    #[test]
    fn encode_is_monotonic() {
        let mut last = 0u8;
        for i in 0..=20_000 {
            let c = mu_law_encode(-1.0 + i as f32 / 10_000.0);
            assert!(c >= last);
            last = c;
        }
    }

    #[test]
    fn round_trip_within_cell_width() {
        // cell c spans companded values [(c - 128.5)/128, (c - 127.5)/128];
        // the top cell also absorbs everything clamped to 255
        let inv = |f: f64| f.signum() * (256f64.powf(f.abs()) - 1.0) / 255.0;
        let edge = |f: f64| inv(f.clamp(-1.0, 1.0));
        for i in 0..10_000 {
            let x = -1.0 + 2.0 * i as f64 / 9_999.0;
            let c = mu_law_encode(x as f32) as f64;
            let top = if c == 255.0 { 1.0 } else { (c - 127.5) / 128.0 };
            let width = edge(top) - edge((c - 128.5) / 128.0);
            let err = (mu_law_decode(c as u32).unwrap() as f64 - x).abs();
            assert!(err <= width + 1e-6, "x={x} c={c} err={err} width={width}");
        }
    }

    #[test]
    fn pcm_range() {
        assert_eq!(class_to_pcm(128), 0);
        assert_eq!(class_to_pcm(255), (mu_law_decode(255).unwrap() as f64 * 32767.0).round() as i16);
        assert_eq!(class_to_pcm(0), -32767);
    }
}
