//! Small shared helpers: seed derivation, float formatting, f32 quantization.

/// Derive an independent child seed from a base seed and an index.
///
/// Uses a splitmix64 finisher so nearby indices give uncorrelated streams.
/// Every piece of randomness in the crate flows from one config seed through
/// this function, which keeps parallel work order-independent.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Format a float with `sig` significant digits in plain decimal notation,
/// like printf's `%g` without the exponent form for the magnitudes we emit.
pub fn fmt_sig(x: f64, sig: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_finite() { "0".to_string() } else { x.to_string() };
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = (sig as i32 - 1 - mag).clamp(0, 17) as usize;
    let s = format!("{x:.decimals$}");
    // Trim trailing zeros after a decimal point, then a dangling point.
    if s.contains('.') {
        let t = s.trim_end_matches('0').trim_end_matches('.');
        t.to_string()
    } else {
        s
    }
}

/// Round an f64 through f32 and back.
///
/// Training state is passed through this after every optimizer step so the
/// f32 checkpoint format loses nothing and resumed runs are bit-identical.
#[inline]
pub fn quantize_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Quantize a whole slice in place through f32.
pub fn quantize_f32_slice(xs: &mut [f64]) {
    for x in xs.iter_mut() {
        *x = *x as f32 as f64;
    }
}
