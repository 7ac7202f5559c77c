//! Read-once random tapes and the [`Coins`] interface parties draw from.
//!
//! A tape is addressed by `(region, bit index)`. Region 0 is the party's
//! whole tape; composed controllers carve out sub-regions through [`Region`].
//! With no overrides, every bit is a pure function of `(seed, region, index)`.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::noise::TruncatedGeometric;

/// Sub-regions per level of nesting.
const REGION_FANOUT: u32 = 8;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DrawKind {
    /// `n` raw bits read as an unsigned big-endian integer.
    Bits(u32),
    /// One inverse-CDF noise sample.
    Noise(TruncatedGeometric),
}

impl DrawKind {
    /// Tape bits one draw of this kind consumes.
    pub fn width(&self) -> u32 {
        match self {
            DrawKind::Bits(n) => *n,
            DrawKind::Noise(spec) => spec.width,
        }
    }

    /// Every value a draw can take, with its exact probability.
    pub fn support(&self) -> Vec<(i64, f64)> {
        match self {
            DrawKind::Bits(n) => {
                let count = 1u64 << n;
                let p = 1.0 / count as f64;
                (0..count).map(|v| (v as i64, p)).collect()
            }
            DrawKind::Noise(spec) => spec.quantized_pmf(),
        }
    }

    /// Maps the `width()`-bit uniform `u` to a draw value.
    pub fn decode(&self, u: u64) -> i64 {
        match self {
            DrawKind::Bits(_) => u as i64,
            DrawKind::Noise(spec) => spec.from_uniform(u),
        }
    }

    /// The half-open range of uniforms that decode to `value`.
    pub fn preimage(&self, value: i64) -> Option<(u64, u64)> {
        match self {
            DrawKind::Bits(n) => {
                if value >= 0 && (value as u64) < (1u64 << n) {
                    Some((value as u64, value as u64 + 1))
                } else {
                    None
                }
            }
            DrawKind::Noise(spec) => spec.preimage(value),
        }
    }
}

/// Which party's tape a draw came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stream {
    Controller,
    Environment,
    Subject,
    /// Simulator or game-level coins.
    Aux,
}

/// One realized draw.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Choice {
    pub stream: Stream,
    pub region: u32,
    pub kind: DrawKind,
    pub value: i64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TapeError {
    #[error("tape budget of {budget} bits exhausted")]
    Budget { budget: u64 },
    /// Raised by enumerating coins when a run asks for a draw past its script.
    #[error("enumeration branch point")]
    Branch {
        stream: Stream,
        region: u32,
        kind: DrawKind,
    },
    /// A replay asked for a different draw than the recording holds.
    #[error("replayed draw in region {region} does not match the recording")]
    Misaligned { region: u32 },
}

/// A source of random draws.
pub trait Coins {
    fn draw_in(&mut self, region: u32, kind: &DrawKind) -> Result<i64, TapeError>;

    /// Tape bits consumed so far.
    fn consumed_bits(&self) -> u64 {
        0
    }

    fn bits(&mut self, n: u32) -> Result<u64, TapeError> {
        self.draw_in(0, &DrawKind::Bits(n)).map(|v| v as u64)
    }

    fn noise(&mut self, spec: &TruncatedGeometric) -> Result<i64, TapeError> {
        self.draw_in(0, &DrawKind::Noise(spec.clone()))
    }
}

/// Per-party tapes for one execution.
pub trait TapeSet {
    fn coins(&mut self, stream: Stream) -> &mut dyn Coins;
}

/// A view of sub-region `index` of an underlying coin source.
pub struct Region<'a> {
    inner: &'a mut dyn Coins,
    index: u32,
}

impl<'a> Region<'a> {
    pub fn new(inner: &'a mut dyn Coins, index: u32) -> Self {
        assert!(index < REGION_FANOUT, "region index out of range");
        Region { inner, index }
    }
}

/// Address of sub-region `index` nested under `parent`.
pub fn sub_region(parent: u32, index: u32) -> u32 {
    parent * REGION_FANOUT + index + 1
}

impl Coins for Region<'_> {
    fn draw_in(&mut self, region: u32, kind: &DrawKind) -> Result<i64, TapeError> {
        self.inner.draw_in(nest(self.index, region), kind)
    }

    fn consumed_bits(&self) -> u64 {
        self.inner.consumed_bits()
    }
}

/// Inverse of nesting: the top-level sub-region holding `region` and the
/// address relative to it. `None` for the root region.
pub fn split_region(region: u32) -> Option<(u32, u32)> {
    let mut digits = Vec::new();
    let mut r = region;
    while r > 0 {
        digits.push((r - 1) % REGION_FANOUT);
        r = (r - 1) / REGION_FANOUT;
    }
    let top = digits.pop()?;
    let mut inner = 0;
    for d in digits.into_iter().rev() {
        inner = sub_region(inner, d);
    }
    Some((top, inner))
}

/// Address of `region` re-rooted under top-level sub-region `index`.
pub fn nest_region(index: u32, region: u32) -> u32 {
    nest(index, region)
}

/// Re-roots the address `region` under sub-region `index` of the root.
fn nest(index: u32, region: u32) -> u32 {
    let mut digits = Vec::new();
    let mut r = region;
    while r > 0 {
        let d = (r - 1) % REGION_FANOUT;
        digits.push(d);
        r = (r - 1) / REGION_FANOUT;
    }
    let mut out = index + 1;
    for d in digits.into_iter().rev() {
        out = sub_region(out, d);
    }
    out
}

#[derive(Debug, Clone)]
struct StreamCursor {
    rng: ChaCha8Rng,
    /// Index of the next unread bit.
    next_bit: u64,
    word: u32,
    word_index: Option<u64>,
}

/// A finite-budget, read-once bit stream.
#[derive(Debug, Clone)]
pub struct RandomTape {
    seed: u64,
    budget: u64,
    strict: bool,
    consumed: u64,
    overrides: BTreeMap<(u32, u64), bool>,
    cursors: BTreeMap<u32, StreamCursor>,
    log: Vec<(u32, DrawKind, i64)>,
}

impl RandomTape {
    /// Tape that errors when read past `budget` bits.
    pub fn new(seed: u64, budget: u64) -> Self {
        RandomTape {
            seed,
            budget,
            strict: true,
            consumed: 0,
            overrides: BTreeMap::new(),
            cursors: BTreeMap::new(),
            log: Vec::new(),
        }
    }

    /// Tape that keeps reading the seeded stream past its budget.
    pub fn lenient(seed: u64, budget: u64) -> Self {
        RandomTape {
            strict: false,
            ..RandomTape::new(seed, budget)
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }

    pub fn consumed(&self) -> u64 {
        self.consumed
    }

    pub fn overrides(&self) -> &BTreeMap<(u32, u64), bool> {
        &self.overrides
    }

    /// Draws made so far, in order.
    pub fn draws(&self) -> &[(u32, DrawKind, i64)] {
        &self.log
    }

    /// Overwrites one bit. Panics if the bit was already read.
    pub fn set_override(&mut self, region: u32, index: u64, bit: bool) {
        let read = self.cursors.get(&region).map_or(0, |c| c.next_bit);
        assert!(index >= read, "cannot override a bit that was already read");
        self.overrides.insert((region, index), bit);
    }

    /// Writes `choices` onto a fresh copy of this tape's seed so that replaying
    /// the same draw schedule reproduces them. `pick` selects a uniform inside
    /// each noise preimage.
    pub fn with_choices<'a>(
        seed: u64,
        budget: u64,
        choices: impl IntoIterator<Item = (u32, &'a DrawKind, i64)>,
        mut pick: impl FnMut(u64, u64) -> u64,
    ) -> Option<Self> {
        let mut tape = RandomTape::new(seed, budget);
        let mut next: BTreeMap<u32, u64> = BTreeMap::new();
        for (region, kind, value) in choices {
            let (lo, hi) = kind.preimage(value)?;
            let u = pick(lo, hi);
            let w = kind.width();
            let start = next.entry(region).or_insert(0);
            for j in 0..w {
                let bit = (u >> (w - 1 - j)) & 1 == 1;
                tape.overrides.insert((region, *start + j as u64), bit);
            }
            *start += w as u64;
        }
        Some(tape)
    }

    /// Bit `index` of `region` ignoring overrides.
    pub fn seeded_bit(seed: u64, region: u32, index: u64) -> bool {
        let mut rng = stream_rng(seed, region);
        rng.set_word_pos((index / 32) as u128);
        (rng.next_u32() >> (index % 32)) & 1 == 1
    }

    /// Bit `index` of `region`, honoring overrides. Does not advance the cursor.
    pub fn peek_bit(&self, region: u32, index: u64) -> bool {
        match self.overrides.get(&(region, index)) {
            Some(b) => *b,
            None => Self::seeded_bit(self.seed, region, index),
        }
    }

    fn read_bit(&mut self, region: u32) -> bool {
        let seed = self.seed;
        let cursor = self.cursors.entry(region).or_insert_with(|| StreamCursor {
            rng: stream_rng(seed, region),
            next_bit: 0,
            word: 0,
            word_index: None,
        });
        let index = cursor.next_bit;
        cursor.next_bit += 1;
        if let Some(b) = self.overrides.get(&(region, index)) {
            return *b;
        }
        let wi = index / 32;
        if cursor.word_index != Some(wi) {
            if cursor.word_index.map_or(true, |w| w + 1 != wi) {
                cursor.rng.set_word_pos(wi as u128);
            }
            cursor.word = cursor.rng.next_u32();
            cursor.word_index = Some(wi);
        }
        (cursor.word >> (index % 32)) & 1 == 1
    }

    /// Reads `n` bits of `region` as a big-endian integer.
    pub fn read_bits(&mut self, region: u32, n: u32) -> Result<u64, TapeError> {
        assert!(n <= 63, "draws wider than 63 bits are not supported");
        if self.strict && self.consumed + n as u64 > self.budget {
            return Err(TapeError::Budget {
                budget: self.budget,
            });
        }
        self.consumed += n as u64;
        let mut u = 0u64;
        for _ in 0..n {
            u = (u << 1) | self.read_bit(region) as u64;
        }
        Ok(u)
    }
}

fn stream_rng(seed: u64, region: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(region as u64);
    rng
}

impl Coins for RandomTape {
    fn draw_in(&mut self, region: u32, kind: &DrawKind) -> Result<i64, TapeError> {
        let u = self.read_bits(region, kind.width())?;
        let v = kind.decode(u);
        self.log.push((region, kind.clone(), v));
        Ok(v)
    }

    fn consumed_bits(&self) -> u64 {
        self.consumed
    }
}

/// Draws made through a [`Recorder`], in order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Recording {
    pub draws: Vec<(u32, DrawKind, i64)>,
}

/// Passes draws through and logs them.
pub struct Recorder<'a> {
    pub inner: &'a mut dyn Coins,
    pub recording: &'a mut Recording,
}

impl Coins for Recorder<'_> {
    fn draw_in(&mut self, region: u32, kind: &DrawKind) -> Result<i64, TapeError> {
        let v = self.inner.draw_in(region, kind)?;
        self.recording.draws.push((region, kind.clone(), v));
        Ok(v)
    }

    fn consumed_bits(&self) -> u64 {
        self.inner.consumed_bits()
    }
}

/// Reads a tape a second time: recorded draws come back in per-region
/// order and anything past the recording is read from `inner`, which must
/// sit where the recorded run left it.
pub struct Replayer<'a> {
    pub inner: &'a mut dyn Coins,
    pub recording: &'a Recording,
    /// Per-region count of recorded draws already replayed.
    pub cursor: &'a mut BTreeMap<u32, usize>,
}

impl Coins for Replayer<'_> {
    fn draw_in(&mut self, region: u32, kind: &DrawKind) -> Result<i64, TapeError> {
        let k = self.cursor.entry(region).or_insert(0);
        let hit = self
            .recording
            .draws
            .iter()
            .filter(|(r, _, _)| *r == region)
            .nth(*k);
        match hit {
            Some((_, recorded, v)) => {
                if recorded != kind {
                    return Err(TapeError::Misaligned { region });
                }
                *k += 1;
                Ok(*v)
            }
            None => {
                *k += 1;
                self.inner.draw_in(region, kind)
            }
        }
    }
}

/// Independent tapes for the controller, environment and subject.
#[derive(Debug, Clone)]
pub struct PartyTapes {
    pub controller: RandomTape,
    pub environment: RandomTape,
    pub subject: RandomTape,
    pub aux: RandomTape,
}

impl PartyTapes {
    pub fn new(controller: RandomTape, environment: RandomTape, subject: RandomTape) -> Self {
        PartyTapes {
            controller,
            environment,
            subject,
            aux: RandomTape::new(0, 0),
        }
    }
}

impl TapeSet for PartyTapes {
    fn coins(&mut self, stream: Stream) -> &mut dyn Coins {
        match stream {
            Stream::Controller => &mut self.controller,
            Stream::Environment => &mut self.environment,
            Stream::Subject => &mut self.subject,
            Stream::Aux => &mut self.aux,
        }
    }
}

/// A single tape used for one party; the others are empty.
pub struct SoloTapes<'a> {
    pub stream: Stream,
    pub coins: &'a mut dyn Coins,
    empty: RandomTape,
}

impl<'a> SoloTapes<'a> {
    pub fn new(stream: Stream, coins: &'a mut dyn Coins) -> Self {
        SoloTapes {
            stream,
            coins,
            empty: RandomTape::new(0, 0),
        }
    }
}

impl TapeSet for SoloTapes<'_> {
    fn coins(&mut self, stream: Stream) -> &mut dyn Coins {
        if stream == self.stream {
            &mut *self.coins
        } else {
            &mut self.empty
        }
    }
}

/// Derives the `index`-th child seed of `master` with a counter-mode stream.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(u64::MAX - 1);
    rng.set_word_pos((index as u128) * 2);
    rng.next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unread_bits_are_a_function_of_seed_and_index() {
        let mut a = RandomTape::new(7, 256);
        let mut b = RandomTape::new(7, 256);
        let xa = a.read_bits(0, 40).unwrap();
        let xb = b.read_bits(0, 40).unwrap();
        assert_eq!(xa, xb);
        for i in 0..40 {
            let expect = (xa >> (39 - i)) & 1 == 1;
            assert_eq!(RandomTape::seeded_bit(7, 0, i), expect);
        }
    }

    #[test]
    fn cursor_only_advances() {
        let mut t = RandomTape::new(3, 64);
        let first = t.read_bits(0, 8).unwrap();
        let second = t.read_bits(0, 8).unwrap();
        let mut fresh = RandomTape::new(3, 64);
        let both = fresh.read_bits(0, 16).unwrap();
        assert_eq!(both, (first << 8) | second);
        assert_eq!(t.consumed(), 16);
    }

    #[test]
    fn strict_budget_is_enforced() {
        let mut t = RandomTape::new(1, 10);
        t.read_bits(0, 8).unwrap();
        assert_eq!(t.read_bits(0, 3), Err(TapeError::Budget { budget: 10 }));
        let mut l = RandomTape::lenient(1, 10);
        l.read_bits(0, 8).unwrap();
        assert!(l.read_bits(0, 3).is_ok());
    }

    #[test]
    fn overrides_replace_only_their_bits() {
        let mut t = RandomTape::new(11, 64);
        for i in 0..4 {
            t.set_override(0, i, true);
        }
        let v = t.read_bits(0, 8).unwrap();
        assert_eq!(v >> 4, 0b1111);
        for i in 4..8 {
            assert_eq!((v >> (7 - i)) & 1 == 1, RandomTape::seeded_bit(11, 0, i));
        }
    }

    #[test]
    fn regions_are_independent_streams() {
        let mut t = RandomTape::new(5, 128);
        let a = t.read_bits(0, 32).unwrap();
        let b = t.read_bits(1, 32).unwrap();
        assert_ne!(a, b);
        let mut only_b = RandomTape::new(5, 128);
        assert_eq!(only_b.read_bits(1, 32).unwrap(), b);
    }

    #[test]
    fn split_inverts_nesting() {
        for index in 0..3 {
            for region in [0, 1, 5, 9, 70, 600] {
                assert_eq!(split_region(nest_region(index, region)), Some((index, region)));
            }
        }
        assert_eq!(split_region(0), None);
    }

    #[test]
    fn nested_regions_do_not_collide() {
        let mut seen = std::collections::BTreeSet::new();
        for outer in 0..3 {
            for inner in 0..3 {
                assert!(seen.insert(nest(outer, if inner == 0 { 0 } else { sub_region(0, inner - 1) })));
            }
        }
        assert_eq!(nest(0, 0), 1);
        assert_eq!(nest(1, 0), 2);
        assert_eq!(nest(0, sub_region(0, 0)), sub_region(1, 0));
    }

    #[test]
    fn choices_round_trip_through_overrides() {
        let kind = DrawKind::Bits(5);
        let tape = RandomTape::with_choices(9, 64, [(0, &kind, 19), (0, &kind, 3)], |lo, _| lo).unwrap();
        let mut t = tape.clone();
        assert_eq!(t.bits(5).unwrap(), 19);
        assert_eq!(t.bits(5).unwrap(), 3);
        // The suffix is untouched.
        let rest = t.read_bits(0, 6).unwrap();
        for i in 0..6 {
            assert_eq!((rest >> (5 - i)) & 1 == 1, RandomTape::seeded_bit(9, 0, 10 + i));
        }
    }

    #[test]
    fn derived_seeds_are_distinct_and_stable() {
        let a: Vec<u64> = (0..16).map(|i| derive_seed(42, i)).collect();
        let b: Vec<u64> = (0..16).map(|i| derive_seed(42, i)).collect();
        assert_eq!(a, b);
        let set: std::collections::BTreeSet<_> = a.iter().collect();
        assert_eq!(set.len(), 16);
    }
}
