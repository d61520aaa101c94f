//! Counter-based seed architecture.
//!
//! One master seed fans out into named substreams. Every random draw in the
//! pipeline comes from a ChaCha stream addressed by `(substream, round, user)`,
//! so the draws of one stage never shift when another stage changes how much
//! randomness it consumes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Named substreams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Substream {
    Data,
    Partition,
    Init,
    Batch,
    Selection,
    Dither,
    Mask,
    Privacy,
    ChannelNoise,
    Attack,
    Geometry,
}

impl Substream {
    pub const ALL: [Substream; 11] = [
        Substream::Data,
        Substream::Partition,
        Substream::Init,
        Substream::Batch,
        Substream::Selection,
        Substream::Dither,
        Substream::Mask,
        Substream::Privacy,
        Substream::ChannelNoise,
        Substream::Attack,
        Substream::Geometry,
    ];

    fn tag(self) -> u64 {
        self as u64 + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            Substream::Data => "data",
            Substream::Partition => "partition",
            Substream::Init => "init",
            Substream::Batch => "batch",
            Substream::Selection => "selection",
            Substream::Dither => "dither",
            Substream::Mask => "mask",
            Substream::Privacy => "privacy",
            Substream::ChannelNoise => "channel-noise",
            Substream::Attack => "attack",
            Substream::Geometry => "geometry",
        }
    }
}

const ROUND_BITS: u32 = 28;
const USER_BITS: u32 = 28;

/// Master seed plus optional per-substream overrides.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SeedTree {
    master: u64,
    overrides: [Option<u64>; 11],
}

impl SeedTree {
    pub fn new(master: u64) -> Self {
        Self {
            master,
            overrides: [None; 11],
        }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// Pins one substream to its own seed, leaving every other stream untouched.
    pub fn with_override(mut self, stream: Substream, seed: u64) -> Self {
        self.overrides[stream as usize] = Some(seed);
        self
    }

    pub fn seed_of(&self, stream: Substream) -> u64 {
        self.overrides[stream as usize].unwrap_or(self.master)
    }

    /// Stream identifier; also used as the dither seed id carried in lattice payloads.
    pub fn stream_id(&self, stream: Substream, round: usize, user: usize) -> u64 {
        let round = (round as u64) & ((1 << ROUND_BITS) - 1);
        let user = (user as u64) & ((1 << USER_BITS) - 1);
        (stream.tag() << (ROUND_BITS + USER_BITS)) | (round << USER_BITS) | user
    }

    pub fn stream(&self, stream: Substream, round: usize, user: usize) -> StreamRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed_of(stream));
        rng.set_stream(self.stream_id(stream, round, user));
        rng
    }

    /// A generator for an experiment-level draw that is not tied to a round or user.
    pub fn global(&self, stream: Substream) -> StreamRng {
        self.stream(stream, 0, (1 << USER_BITS) - 1)
    }

    /// Shared-randomness seed used by both ends of a subtractive-dither link.
    pub fn dither_seed(&self, round: usize, user: usize) -> u64 {
        splitmix(self.seed_of(Substream::Dither) ^ self.stream_id(Substream::Dither, round, user))
    }
}

/// Generator for a shared dither seed.
pub fn dither_rng(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
