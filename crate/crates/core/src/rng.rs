//! Counter-based random streams.
//!
//! Every base draw is addressed by `(seed, path, coordinate)`: the seed is the
//! Philox key, the path index and coordinate index fill the counter, and the
//! low counter word enumerates the words consumed within that coordinate.
//! Draws therefore never depend on how paths are split across workers.

use rand_core::{impls, RngCore};

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

/// Philox4x32 with 10 rounds.
#[inline]
pub fn philox4x32(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut c = counter;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(PHILOX_W0);
            k[1] = k[1].wrapping_add(PHILOX_W1);
        }
        let p0 = (PHILOX_M0 as u64) * (c[0] as u64);
        let p1 = (PHILOX_M1 as u64) * (c[2] as u64);
        c = [
            ((p1 >> 32) as u32) ^ c[1] ^ k[0],
            p1 as u32,
            ((p0 >> 32) as u32) ^ c[3] ^ k[1],
            p0 as u32,
        ];
    }
    c
}

/// Philox4x32-10 on `N` independent counters under one key. The rounds of
/// the lanes are interleaved so their multiply latencies overlap.
#[inline]
pub fn philox4x32_lanes<const N: usize>(counters: [[u32; 4]; N], key: [u32; 2]) -> [[u32; 4]; N] {
    let mut c = counters;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(PHILOX_W0);
            k[1] = k[1].wrapping_add(PHILOX_W1);
        }
        for lane in c.iter_mut() {
            let p0 = (PHILOX_M0 as u64) * (lane[0] as u64);
            let p1 = (PHILOX_M1 as u64) * (lane[2] as u64);
            *lane = [
                ((p1 >> 32) as u32) ^ lane[1] ^ k[0],
                p1 as u32,
                ((p0 >> 32) as u32) ^ lane[3] ^ k[1],
                p0 as u32,
            ];
        }
    }
    c
}

/// Reserved coordinate slot for per-path auxiliary draws (the tilted
/// coordinate selector).
pub const AUX_COORDINATE: u32 = u32::MAX;

/// Random stream of one `(seed, path, coordinate)` cell.
#[derive(Debug, Clone)]
pub struct CellRng {
    key: [u32; 2],
    counter: [u32; 4],
    buffer: [u32; 4],
    index: usize,
}

impl CellRng {
    #[inline]
    pub fn new(seed: u64, path: u64, coordinate: u32) -> Self {
        Self {
            key: [seed as u32, (seed >> 32) as u32],
            counter: [0, coordinate, path as u32, (path >> 32) as u32],
            buffer: [0; 4],
            index: 4,
        }
    }

    /// Cells `coordinate..coordinate + N` of one path, with their first
    /// blocks computed together.
    #[inline]
    pub fn lanes<const N: usize>(seed: u64, path: u64, coordinate: u32) -> [Self; N] {
        let key = [seed as u32, (seed >> 32) as u32];
        let counters: [[u32; 4]; N] = std::array::from_fn(|i| {
            [0, coordinate + i as u32, path as u32, (path >> 32) as u32]
        });
        let blocks = philox4x32_lanes(counters, key);
        std::array::from_fn(|i| {
            let mut counter = counters[i];
            counter[0] = 1;
            Self {
                key,
                counter,
                buffer: blocks[i],
                index: 0,
            }
        })
    }

    #[inline]
    fn refill(&mut self) {
        self.buffer = philox4x32(self.counter, self.key);
        self.counter[0] = self.counter[0].wrapping_add(1);
        self.index = 0;
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for CellRng {
    #[inline]
    fn next_u32(&mut self) -> u32 {
        if self.index >= 4 {
            self.refill();
        }
        let v = self.buffer[self.index];
        self.index += 1;
        v
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        if self.index >= 3 {
            if self.index == 3 {
                // discard the odd word so u64s stay aligned to blocks
                self.index = 4;
            }
            self.refill();
        }
        let lo = self.buffer[self.index] as u64;
        let hi = self.buffer[self.index + 1] as u64;
        self.index += 2;
        (hi << 32) | lo
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        impls::fill_bytes_via_next(self, dest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Known-answer vectors of the Random123 distribution (kat_vectors, philox4x32_10).
    #[test]
    fn philox_known_answers() {
        assert_eq!(
            philox4x32([0, 0, 0, 0], [0, 0]),
            [0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8]
        );
        assert_eq!(
            philox4x32([u32::MAX; 4], [u32::MAX; 2]),
            [0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd]
        );
        assert_eq!(
            philox4x32(
                [0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344],
                [0xa4093822, 0x299f31d0]
            ),
            [0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1]
        );
    }

    #[test]
    fn lanes_match_single_cells() {
        let lanes = CellRng::lanes::<4>(99, 1 << 40, 17);
        for (i, mut lane) in lanes.into_iter().enumerate() {
            let mut single = CellRng::new(99, 1 << 40, 17 + i as u32);
            for _ in 0..7 {
                assert_eq!(lane.next_u64(), single.next_u64());
            }
        }
    }

    #[test]
    fn cells_are_reproducible_and_distinct() {
        let a: Vec<u64> = {
            let mut r = CellRng::new(7, 3, 11);
            (0..5).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = CellRng::new(7, 3, 11);
            (0..5).map(|_| r.next_u64()).collect()
        };
        assert_eq!(a, b);
        let mut other = CellRng::new(7, 3, 12);
        assert_ne!(a[0], other.next_u64());
        let mut other_seed = CellRng::new(8, 3, 11);
        assert_ne!(a[0], other_seed.next_u64());
    }

    #[test]
    fn uniform_moments() {
        let n = 200_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for p in 0..n {
            let u = CellRng::new(1, p, 0).uniform();
            assert!((0.0..1.0).contains(&u));
            sum += u;
            sum_sq += u * u;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!((mean - 0.5).abs() < 4.0 * (1.0 / 12.0 / n as f64).sqrt());
        assert!((var - 1.0 / 12.0).abs() < 2e-3);
    }
}
