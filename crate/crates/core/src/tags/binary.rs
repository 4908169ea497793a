//! `.qtags` binary format.
//!
//! ```text
//! magic            8 bytes  "QTAGS\0\0\x01"
//! resolution_ps    u64 LE
//! channel_count    u8
//! label_len        u16 LE, followed by label_len bytes of UTF-8
//! config_digest    32 bytes
//! records          9 bytes each: channel u8, t_ps u64 LE
//! ```

use std::io::{self, BufReader, Read, Write};

use super::{TagError, TagStream, TimeTag};

pub const MAGIC: [u8; 8] = *b"QTAGS\0\0\x01";
pub const RECORD_LEN: usize = 9;
/// Header length excluding the station label bytes.
pub const HEADER_FIXED_LEN: usize = 8 + 8 + 1 + 2 + 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagFileHeader {
    pub resolution_ps: u64,
    pub channel_count: u8,
    pub station_label: String,
    pub config_digest: [u8; 32],
}

impl TagFileHeader {
    pub fn encoded_len(&self) -> usize {
        HEADER_FIXED_LEN + self.station_label.len()
    }

    fn write_to<W: Write>(&self, w: &mut W) -> Result<(), TagError> {
        let label = self.station_label.as_bytes();
        let label_len = u16::try_from(label.len())
            .map_err(|_| TagError::BadHeader { offset: 17, reason: "station label longer than 65535 bytes".into() })?;
        w.write_all(&MAGIC)?;
        w.write_all(&self.resolution_ps.to_le_bytes())?;
        w.write_all(&[self.channel_count])?;
        w.write_all(&label_len.to_le_bytes())?;
        w.write_all(label)?;
        w.write_all(&self.config_digest)?;
        Ok(())
    }

    fn read_from<R: Read>(r: &mut R) -> Result<Self, TagError> {
        let mut magic = [0u8; 8];
        let n = read_full(r, &mut magic)?;
        if n < 8 || magic != MAGIC {
            return Err(TagError::BadMagic { found: magic[..n].to_vec() });
        }
        let mut fixed = [0u8; 11];
        if read_full(r, &mut fixed)? < fixed.len() {
            return Err(TagError::BadHeader { offset: 8, reason: "truncated header".into() });
        }
        let resolution_ps = u64::from_le_bytes(fixed[0..8].try_into().unwrap());
        if resolution_ps < 1 {
            return Err(TagError::BadHeader { offset: 8, reason: "resolution_ps must be >= 1".into() });
        }
        let channel_count = fixed[8];
        let label_len = u16::from_le_bytes([fixed[9], fixed[10]]) as usize;
        let mut label = vec![0u8; label_len];
        if read_full(r, &mut label)? < label_len {
            return Err(TagError::BadHeader { offset: 19, reason: "truncated station label".into() });
        }
        let station_label = String::from_utf8(label)
            .map_err(|_| TagError::BadHeader { offset: 19, reason: "station label is not UTF-8".into() })?;
        let mut config_digest = [0u8; 32];
        if read_full(r, &mut config_digest)? < 32 {
            return Err(TagError::BadHeader { offset: 19 + label_len as u64, reason: "truncated digest".into() });
        }
        Ok(Self { resolution_ps, channel_count, station_label, config_digest })
    }
}

/// Writes header and records; returns the number of bytes written.
pub fn write_tags<W: Write>(stream: &TagStream, destination: W) -> Result<u64, TagError> {
    if let Some(i) = stream.tags().windows(2).position(|w| w[1].t_ps < w[0].t_ps) {
        return Err(TagError::Unsorted { index: i + 1 });
    }
    let mut w = io::BufWriter::with_capacity(1 << 16, destination);
    let header = TagFileHeader {
        resolution_ps: stream.resolution_ps,
        channel_count: stream.channel_count,
        station_label: stream.station.clone(),
        config_digest: stream.config_digest,
    };
    header.write_to(&mut w)?;
    let mut rec = [0u8; RECORD_LEN];
    for t in stream.tags() {
        rec[0] = t.channel;
        rec[1..].copy_from_slice(&t.t_ps.to_le_bytes());
        w.write_all(&rec)?;
    }
    w.flush()?;
    Ok((header.encoded_len() + RECORD_LEN * stream.len()) as u64)
}

/// Reads a whole `.qtags` stream into memory.
pub fn read_tags<R: Read>(source: R) -> Result<TagStream, TagError> {
    let mut reader = TagReader::new(source)?;
    let mut tags = Vec::new();
    for t in &mut reader {
        tags.push(t?);
    }
    let h = reader.header;
    Ok(TagStream::from_sorted(h.station_label, tags, h.channel_count)
        .with_resolution(h.resolution_ps)
        .with_digest(h.config_digest))
}

/// Streaming record reader with a fixed-size buffer; validates ordering as it goes.
pub struct TagReader<R: Read> {
    inner: BufReader<R>,
    pub header: TagFileHeader,
    index: u64,
    offset: u64,
    prev: Option<u64>,
    failed: bool,
}

impl<R: Read> TagReader<R> {
    pub fn new(source: R) -> Result<Self, TagError> {
        let mut inner = BufReader::with_capacity(1 << 16, source);
        let header = TagFileHeader::read_from(&mut inner)?;
        let offset = header.encoded_len() as u64;
        Ok(Self { inner, header, index: 0, offset, prev: None, failed: false })
    }
}

impl<R: Read> Iterator for TagReader<R> {
    type Item = Result<TimeTag, TagError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let mut rec = [0u8; RECORD_LEN];
        let n = match read_full(&mut self.inner, &mut rec) {
            Ok(n) => n,
            Err(e) => {
                self.failed = true;
                return Some(Err(e.into()));
            }
        };
        if n == 0 {
            return None;
        }
        if n < RECORD_LEN {
            self.failed = true;
            return Some(Err(TagError::Truncated { index: self.index, offset: self.offset }));
        }
        let t_ps = u64::from_le_bytes(rec[1..].try_into().unwrap());
        if let Some(prev_ps) = self.prev {
            if t_ps < prev_ps {
                self.failed = true;
                return Some(Err(TagError::NonMonotonic { index: self.index, offset: self.offset, t_ps, prev_ps }));
            }
        }
        self.prev = Some(t_ps);
        self.index += 1;
        self.offset += RECORD_LEN as u64;
        Some(Ok(TimeTag { t_ps, channel: rec[0] }))
    }
}

/// Like `read_exact` but reports how many bytes were available before EOF.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(n: u64) -> TagStream {
        TagStream::new("Sicily", (0..n).map(|i| TimeTag::new((i % 2) as u8, 1000 + 7 * i)).collect())
            .unwrap()
            .with_resolution(4)
            .with_digest([7; 32])
    }

    #[test]
    fn empty_stream_is_header_only() {
        let s = TagStream::new("Malta", vec![]).unwrap();
        let mut buf = Vec::new();
        let n = write_tags(&s, &mut buf).unwrap();
        assert_eq!(n as usize, buf.len());
        assert_eq!(buf.len(), HEADER_FIXED_LEN + "Malta".len());
        assert_eq!(&buf[..8], b"QTAGS\0\0\x01");
        let back = read_tags(buf.as_slice()).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.station, "Malta");
    }

    #[test]
    fn three_tags_add_27_bytes() {
        let s = stream(3);
        let mut buf = Vec::new();
        write_tags(&s, &mut buf).unwrap();
        assert_eq!(buf.len(), HEADER_FIXED_LEN + 6 + 27);
        // bit-exact layout of the first record
        let rec = &buf[HEADER_FIXED_LEN + 6..HEADER_FIXED_LEN + 6 + 9];
        assert_eq!(rec[0], 0);
        assert_eq!(u64::from_le_bytes(rec[1..].try_into().unwrap()), 1000);
        let back = read_tags(buf.as_slice()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn corrupt_inputs_report_offsets() {
        let s = stream(4);
        let mut buf = Vec::new();
        write_tags(&s, &mut buf).unwrap();
        let body = HEADER_FIXED_LEN + 6;

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_tags(bad.as_slice()), Err(TagError::BadMagic { .. })));

        let truncated = &buf[..buf.len() - 4];
        match read_tags(truncated) {
            Err(TagError::Truncated { index, offset }) => {
                assert_eq!(index, 3);
                assert_eq!(offset as usize, body + 27);
            }
            other => panic!("{other:?}"),
        }

        let mut swapped = buf.clone();
        swapped[body + 9 + 1..body + 18].copy_from_slice(&1u64.to_le_bytes());
        match read_tags(swapped.as_slice()) {
            Err(TagError::NonMonotonic { index, offset, .. }) => {
                assert_eq!(index, 1);
                assert_eq!(offset as usize, body + 9);
            }
            other => panic!("{other:?}"),
        }

        assert!(matches!(read_tags(&buf[..20]), Err(TagError::BadHeader { .. })));
        let mut zero_res = buf.clone();
        zero_res[8..16].copy_from_slice(&0u64.to_le_bytes());
        assert!(matches!(read_tags(zero_res.as_slice()), Err(TagError::BadHeader { .. })));
    }
}
