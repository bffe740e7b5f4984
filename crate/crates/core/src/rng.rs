//! Counter-based random numbers.
//!
//! Every random decision in the simulator is a pure function of the run seed
//! and a structured counter that names the decision (which cell, which
//! activation, which map row). Results therefore do not depend on the order in
//! which the engine happens to evaluate things, and a run can be replayed from
//! its seed alone.
//!
//! The block function is Philox4x32-10 (Salmon et al., SC'11).

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

#[inline(always)]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = u64::from(a) * u64::from(b);
    ((p >> 32) as u32, p as u32)
}

/// Philox4x32 with ten rounds.
#[inline]
pub fn philox4x32_10(mut ctr: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let (mut k0, mut k1) = (key[0], key[1]);
    for round in 0..10 {
        if round > 0 {
            k0 = k0.wrapping_add(PHILOX_W0);
            k1 = k1.wrapping_add(PHILOX_W1);
        }
        let (hi0, lo0) = mulhilo(PHILOX_M0, ctr[0]);
        let (hi1, lo1) = mulhilo(PHILOX_M1, ctr[2]);
        ctr = [hi1 ^ ctr[1] ^ k0, lo1, hi0 ^ ctr[3] ^ k1, lo0];
    }
    ctr
}

/// Domain tags keep the counter spaces of unrelated consumers disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Stream {
    CellClock = 1,
    TrrSampler = 2,
    Traffic = 3,
    MapField = 4,
    MapCells = 5,
    Harness = 6,
}

/// A keyed counter-based generator: `draw(counter)` is a pure function.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    key: [u32; 2],
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self {
            key: [seed as u32, (seed >> 32) as u32],
        }
    }

    /// 64 random bits for the counter `(stream, a, b, c, d)`.
    ///
    /// `a` is limited to 24 bits; the top byte carries the stream tag.
    #[inline]
    pub fn bits(&self, stream: Stream, a: u32, b: u32, c: u32, d: u32) -> u64 {
        debug_assert!(a < (1 << 24));
        let tagged = ((stream as u32) << 24) | (a & 0x00FF_FFFF);
        let out = philox4x32_10([tagged, b, c, d], self.key);
        (u64::from(out[0]) << 32) | u64::from(out[1])
    }

    /// Uniform on the half-open interval `[0, 1)` with 53 bits of resolution.
    #[inline]
    pub fn uniform(&self, stream: Stream, a: u32, b: u32, c: u32, d: u32) -> f64 {
        to_unit(self.bits(stream, a, b, c, d))
    }

    /// Standard exponential variate, `-ln(U)` with `U` in `(0, 1]`.
    #[inline]
    pub fn exponential(&self, stream: Stream, a: u32, b: u32, c: u32, d: u32) -> f64 {
        let u = 1.0 - self.uniform(stream, a, b, c, d);
        -u.ln()
    }

    /// Standard normal variate through the inverse CDF.
    #[inline]
    pub fn normal(&self, stream: Stream, a: u32, b: u32, c: u32, d: u32) -> f64 {
        // Map into the open interval (0, 1) so the quantile stays finite.
        let u = ((self.bits(stream, a, b, c, d) >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
        inverse_normal_cdf(u)
    }

    /// Uniform integer in `[0, n)`; `n` must be non-zero.
    #[inline]
    pub fn below(&self, n: u64, stream: Stream, a: u32, b: u32, c: u32, d: u32) -> u64 {
        debug_assert!(n > 0);
        // Lemire's multiply-shift; bias is below 2^-64 * n and irrelevant here.
        ((u128::from(self.bits(stream, a, b, c, d)) * u128::from(n)) >> 64) as u64
    }
}

#[inline]
fn to_unit(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Split a 64-bit ordinal into two counter words.
#[inline]
pub fn split(v: u64) -> (u32, u32) {
    (v as u32, (v >> 32) as u32)
}

/// Quantile of the standard normal distribution.
///
/// Wichura's AS 241 (PPND16), accurate to about 1e-16. Returns ±infinity at
/// the endpoints.
pub fn inverse_normal_cdf(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = ((((((r * 2509.0809287301227 + 33430.57558358813) * r
            + 67265.7709270087)
            * r
            + 45921.95393154987)
            * r
            + 13731.69376550946)
            * r
            + 1971.5909503065513)
            * r
            + 133.14166789178438)
            * r
            + 3.3871328727963665;
        let den = ((((((r * 5226.495278852545 + 28729.085735721943) * r
            + 39307.89580009271)
            * r
            + 21213.794301586597)
            * r
            + 5394.196021424751)
            * r
            + 687.1870074920579)
            * r
            + 42.31333070160091)
            * r
            + 1.0;
        return q * num / den;
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((r * 7.745450142783414e-4 + 0.022723844989269184) * r
            + 0.2417807251774506)
            * r
            + 1.2704582524523684)
            * r
            + 3.6478483247632045)
            * r
            + 5.769497221460691)
            * r
            + 4.630337846156546)
            * r
            + 1.4234371107496835;
        let den = ((((((r * 1.0507500716444169e-9 + 5.475938084995345e-4) * r
            + 0.015198666563616457)
            * r
            + 0.14810397642748008)
            * r
            + 0.6897673349851)
            * r
            + 1.6763848301838038)
            * r
            + 2.053191626637759)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((r * 2.0103343992922881e-7 + 2.7115555687434876e-5) * r
            + 0.0012426609473880784)
            * r
            + 0.026532189526576124)
            * r
            + 0.29656057182850487)
            * r
            + 1.7848265399172913)
            * r
            + 5.463784911164114)
            * r
            + 6.657904643501103;
        let den = ((((((r * 2.0442631033899397e-15 + 1.421511758316446e-7) * r
            + 1.8463183175100548e-5)
            * r
            + 7.868691311456133e-4)
            * r
            + 0.014875361290850615)
            * r
            + 0.1369298809227358)
            * r
            + 0.599832206555888)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Known-answer vectors published with the Random123 reference code.
    #[test]
    fn philox_known_answers() {
        assert_eq!(
            philox4x32_10([0; 4], [0; 2]),
            [0x6627_e8d5, 0xe169_c58d, 0xbc57_ac4c, 0x9b00_dbd8]
        );
        assert_eq!(
            philox4x32_10([u32::MAX; 4], [u32::MAX; 2]),
            [0x408f_276d, 0x41c8_3b0e, 0xa20b_c7c6, 0x6d54_51fd]
        );
        assert_eq!(
            philox4x32_10(
                [0x243f_6a88, 0x85a3_08d3, 0x1319_8a2e, 0x0370_7344],
                [0xa409_3822, 0x299f_31d0]
            ),
            [0xd16c_fe09, 0x94fd_cceb, 0x5001_e420, 0x2412_6ea1]
        );
    }

    #[test]
    fn draws_are_pure_and_stream_separated() {
        let rng = CounterRng::new(42);
        let a = rng.bits(Stream::CellClock, 1, 2, 3, 4);
        assert_eq!(a, rng.bits(Stream::CellClock, 1, 2, 3, 4));
        assert_ne!(a, rng.bits(Stream::TrrSampler, 1, 2, 3, 4));
        assert_ne!(a, CounterRng::new(43).bits(Stream::CellClock, 1, 2, 3, 4));
    }

    #[test]
    fn uniform_mean_is_one_half() {
        let rng = CounterRng::new(7);
        let n = 200_000;
        let mean: f64 = (0..n)
            .map(|i| rng.uniform(Stream::Harness, 0, i, 0, 0))
            .sum::<f64>()
            / n as f64;
        // sd of the mean is sqrt(1/12/n) ~ 6.5e-4
        assert!((mean - 0.5).abs() < 4e-3, "{mean}");
    }

    #[test]
    fn inverse_normal_matches_reference_quantiles() {
        assert_eq!(inverse_normal_cdf(0.5), 0.0);
        assert!((inverse_normal_cdf(0.975) - 1.959_963_984_540_054).abs() < 1e-14);
        assert!((inverse_normal_cdf(0.025) + 1.959_963_984_540_054).abs() < 1e-14);
        assert!((inverse_normal_cdf(1e-10) + 6.361_340_902_404_056).abs() < 1e-12);
    }

    #[test]
    fn inverse_normal_inverts_statrs_cdf() {
        use statrs::distribution::{ContinuousCDF, Normal};
        let n = Normal::new(0.0, 1.0).unwrap();
        for i in 1..1000 {
            let p = i as f64 / 1000.0;
            let x = inverse_normal_cdf(p);
            // statrs evaluates the CDF to roughly 1e-12
            assert!((n.cdf(x) - p).abs() < 1e-10, "p={p}");
        }
    }
}
