//! Single-channel photon time-tag streams.
//!
//! Tags are integer picoseconds since the start of the record. A stream
//! owns its record duration so that singles rates stay well defined when
//! the first or last photons sit far from the record edges.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PS_PER_S: f64 = 1e12;

/// Seconds to integer picoseconds, rounded to nearest.
pub fn seconds_to_ps(seconds: f64) -> u64 {
    (seconds * PS_PER_S).round() as u64
}

pub fn ps_to_seconds(ps: u64) -> f64 {
    ps as f64 / PS_PER_S
}

/// Seeded generator for a given purpose. Distinct `stream` ids give
/// independent sequences from the same seed.
pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Upper bound on the number of events a generator may allocate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Budget {
    pub max_events: u64,
}

impl Default for Budget {
    fn default() -> Self {
        // 8 bytes per tag, about 1.6 GB
        Budget {
            max_events: 200_000_000,
        }
    }
}

impl Budget {
    pub(crate) fn check(&self, expected: f64) -> Result<()> {
        if expected > self.max_events as f64 {
            Err(Error::Capacity {
                expected,
                budget: self.max_events,
            })
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TimeTagStream {
    channel: u8,
    tags: Vec<u64>,
    duration_ps: u64,
}

impl TimeTagStream {
    /// Builds a stream, checking that tags are strictly ascending and lie
    /// within `[0, duration_ps]`.
    pub fn new(channel: u8, tags: Vec<u64>, duration_ps: u64) -> Result<Self> {
        for (i, w) in tags.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(Error::Unsorted {
                    index: i + 1,
                    previous: w[0],
                    current: w[1],
                });
            }
        }
        if let Some(&last) = tags.last() {
            if last > duration_ps {
                return Err(Error::TagOutOfRange {
                    tag: last,
                    duration: duration_ps,
                });
            }
        }
        Ok(TimeTagStream {
            channel,
            tags,
            duration_ps,
        })
    }

    /// Caller guarantees the invariants.
    pub(crate) fn from_sorted(channel: u8, tags: Vec<u64>, duration_ps: u64) -> Self {
        debug_assert!(tags.windows(2).all(|w| w[0] < w[1]));
        debug_assert!(tags.last().is_none_or(|&t| t <= duration_ps));
        TimeTagStream {
            channel,
            tags,
            duration_ps,
        }
    }

    pub fn empty(channel: u8, duration_ps: u64) -> Self {
        Self::from_sorted(channel, Vec::new(), duration_ps)
    }

    pub fn channel(&self) -> u8 {
        self.channel
    }

    /// Replaces the record duration; fails if a tag would fall outside it.
    pub fn with_duration(mut self, duration_ps: u64) -> Result<Self> {
        if let Some(&last) = self.tags.last() {
            if last > duration_ps {
                return Err(Error::TagOutOfRange {
                    tag: last,
                    duration: duration_ps,
                });
            }
        }
        self.duration_ps = duration_ps;
        Ok(self)
    }

    pub fn with_channel(mut self, channel: u8) -> Self {
        self.channel = channel;
        self
    }

    pub fn tags(&self) -> &[u64] {
        &self.tags
    }

    pub fn into_tags(self) -> Vec<u64> {
        self.tags
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn duration_ps(&self) -> u64 {
        self.duration_ps
    }

    pub fn duration_s(&self) -> f64 {
        ps_to_seconds(self.duration_ps)
    }

    /// Mean event rate over the record, events per second.
    pub fn rate(&self) -> f64 {
        if self.duration_ps == 0 {
            return 0.0;
        }
        self.tags.len() as f64 / self.duration_s()
    }

    /// Joins streams covering consecutive windows. Each segment's tags are
    /// offset by the summed durations of the segments before it; a tag that
    /// would collide with the previous one is dropped.
    pub fn concat(channel: u8, segments: Vec<TimeTagStream>) -> Self {
        let total: usize = segments.iter().map(|s| s.len()).sum();
        let mut tags = Vec::with_capacity(total);
        let mut offset = 0u64;
        for seg in segments {
            for &t in &seg.tags {
                let t = t + offset;
                if tags.last().is_none_or(|&last| t > last) {
                    tags.push(t);
                }
            }
            offset += seg.duration_ps;
        }
        Self::from_sorted(channel, tags, offset)
    }

    /// Tags falling in `[start_ps, end_ps)`, re-based to start at zero.
    pub fn window(&self, start_ps: u64, end_ps: u64) -> Self {
        let lo = self.tags.partition_point(|&t| t < start_ps);
        let hi = self.tags.partition_point(|&t| t < end_ps);
        let tags = self.tags[lo..hi].iter().map(|&t| t - start_ps).collect();
        Self::from_sorted(self.channel, tags, end_ps.saturating_sub(start_ps))
    }
}
