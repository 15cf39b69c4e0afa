/// Width of the sinusoidal timestep encoding.
pub const EMBED_DIM: usize = 128;
const FREQ_BASE: f64 = 10_000.0;

/// Sine–cosine encoding of step `t` before the learned projection: entries
/// `0..64` are `sin(t ω_k)`, entries `64..128` are `cos(t ω_k)`, with
/// `ω_k = 10000^(-k/64)`.
pub fn embed_timestep(t: usize) -> [f64; EMBED_DIM] {
    let half = EMBED_DIM / 2;
    let mut e = [0.0; EMBED_DIM];
    for k in 0..half {
        let w = FREQ_BASE.powf(-(k as f64) / half as f64);
        let (s, c) = (t as f64 * w).sin_cos();
        e[k] = s;
        e[half + k] = c;
    }
    e
}
