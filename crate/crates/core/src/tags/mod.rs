//! Time-tag records, streams, and their on-disk formats.

mod binary;
mod csv;
mod report;

pub use self::binary::{read_tags, write_tags, TagFileHeader, TagReader, HEADER_FIXED_LEN, MAGIC, RECORD_LEN};
pub use self::csv::{read_tags_csv, write_tags_csv, ColumnMap, ColumnRef};
pub use self::report::{to_json_string, write_report};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TagError {
    #[error("bad magic bytes {found:02x?}")]
    BadMagic { found: Vec<u8> },
    #[error("invalid header at byte {offset}: {reason}")]
    BadHeader { offset: u64, reason: String },
    #[error("truncated record {index} at byte {offset}")]
    Truncated { index: u64, offset: u64 },
    #[error("record {index} at byte {offset}: timestamp {t_ps} precedes {prev_ps}")]
    NonMonotonic { index: u64, offset: u64, t_ps: u64, prev_ps: u64 },
    #[error("line {line}: timestamp {t_ps} precedes {prev_ps}")]
    NonMonotonicLine { line: u64, t_ps: u64, prev_ps: u64 },
    #[error("line {line}: {reason}")]
    Parse { line: u64, reason: String },
    #[error("stream is not sorted at index {index}")]
    Unsorted { index: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// One detection event: channel 0 is the transmit-port detector, 1 the reflect port.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeTag {
    pub t_ps: u64,
    pub channel: u8,
}

impl TimeTag {
    pub fn new(channel: u8, t_ps: u64) -> Self {
        Self { t_ps, channel }
    }
}

/// A station's sorted tag record with the metadata written to file headers.
#[derive(Debug, Clone, PartialEq)]
pub struct TagStream {
    pub station: String,
    pub resolution_ps: u64,
    pub channel_count: u8,
    /// SHA-256 of the producing configuration, zero for external data.
    pub config_digest: [u8; 32],
    tags: Vec<TimeTag>,
}

impl TagStream {
    /// Fails unless `tags` is sorted by timestamp.
    pub fn new(station: impl Into<String>, tags: Vec<TimeTag>) -> Result<Self, TagError> {
        if let Some(i) = tags.windows(2).position(|w| w[1].t_ps < w[0].t_ps) {
            return Err(TagError::Unsorted { index: i + 1 });
        }
        let channel_count = tags.iter().map(|t| t.channel).max().map_or(0, |c| c.saturating_add(1));
        Ok(Self { station: station.into(), resolution_ps: 1, channel_count, config_digest: [0; 32], tags })
    }

    pub(crate) fn from_sorted(station: impl Into<String>, tags: Vec<TimeTag>, channel_count: u8) -> Self {
        debug_assert!(tags.windows(2).all(|w| w[0].t_ps <= w[1].t_ps));
        Self { station: station.into(), resolution_ps: 1, channel_count, config_digest: [0; 32], tags }
    }

    pub fn with_resolution(mut self, resolution_ps: u64) -> Self {
        self.resolution_ps = resolution_ps.max(1);
        self
    }

    pub fn with_digest(mut self, digest: [u8; 32]) -> Self {
        self.config_digest = digest;
        self
    }

    pub fn with_channel_count(mut self, n: u8) -> Self {
        self.channel_count = self.channel_count.max(n);
        self
    }

    pub fn tags(&self) -> &[TimeTag] {
        &self.tags
    }

    pub fn into_tags(self) -> Vec<TimeTag> {
        self.tags
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn singles(&self, channel: u8) -> u64 {
        self.tags.iter().filter(|t| t.channel == channel).count() as u64
    }

    /// Tags with `start_ps <= t < end_ps`.
    pub fn window(&self, start_ps: u64, end_ps: u64) -> &[TimeTag] {
        slice_window(&self.tags, start_ps, end_ps)
    }

    /// Time span covered, `last - first`.
    pub fn span_ps(&self) -> u64 {
        match (self.tags.first(), self.tags.last()) {
            (Some(a), Some(b)) => b.t_ps - a.t_ps,
            _ => 0,
        }
    }
}

pub fn slice_window(tags: &[TimeTag], start_ps: u64, end_ps: u64) -> &[TimeTag] {
    let lo = tags.partition_point(|t| t.t_ps < start_ps);
    let hi = tags.partition_point(|t| t.t_ps < end_ps);
    &tags[lo..hi.max(lo)]
}
