//! `channel,t_ps` CSV ingest for external or hardware data.

use std::io::{Read, Write};

use super::{TagError, TagStream, TimeTag};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ColumnRef {
    Index(usize),
    /// Header name; requires a header row.
    Name(String),
}

/// Which columns hold the channel and the timestamp.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnMap {
    pub channel: ColumnRef,
    pub t_ps: ColumnRef,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self { channel: ColumnRef::Index(0), t_ps: ColumnRef::Index(1) }
    }
}

/// Parses a CSV of tags. The first row is treated as a header when its
/// mapped fields are not integers.
pub fn read_tags_csv<R: Read>(source: R, columns: &ColumnMap, station: &str) -> Result<TagStream, TagError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(source);
    let mut tags = Vec::new();
    let mut idx: Option<(usize, usize)> = match (&columns.channel, &columns.t_ps) {
        (ColumnRef::Index(c), ColumnRef::Index(t)) => Some((*c, *t)),
        _ => None,
    };
    let mut prev: Option<u64> = None;
    let mut record = csv::StringRecord::new();
    let mut first = true;
    loop {
        let more = rdr.read_record(&mut record).map_err(|e| TagError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        if !more {
            break;
        }
        let line = record.position().map_or(0, |p| p.line());
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if first {
            first = false;
            let looks_numeric = match idx {
                Some((c, t)) => record.get(c).is_some_and(|v| v.parse::<u64>().is_ok())
                    && record.get(t).is_some_and(|v| v.parse::<u64>().is_ok()),
                None => false,
            };
            if !looks_numeric {
                idx = Some(resolve_header(&record, columns, line)?);
                continue;
            }
        }
        let (c, t) = idx.expect("resolved before the first data row");
        let field = |i: usize, what: &str| {
            record.get(i).ok_or_else(|| TagError::Parse { line, reason: format!("missing {what} column {i}") })
        };
        let channel: u8 = field(c, "channel")?
            .parse()
            .map_err(|_| TagError::Parse { line, reason: format!("bad channel `{}`", &record[c]) })?;
        let t_ps: u64 = field(t, "t_ps")?
            .parse()
            .map_err(|_| TagError::Parse { line, reason: format!("bad timestamp `{}`", &record[t]) })?;
        if let Some(prev_ps) = prev {
            if t_ps < prev_ps {
                return Err(TagError::NonMonotonicLine { line, t_ps, prev_ps });
            }
        }
        prev = Some(t_ps);
        tags.push(TimeTag { t_ps, channel });
    }
    let channel_count = tags.iter().map(|t| t.channel).max().map_or(0, |c| c.saturating_add(1));
    Ok(TagStream::from_sorted(station, tags, channel_count))
}

fn resolve_header(header: &csv::StringRecord, columns: &ColumnMap, line: u64) -> Result<(usize, usize), TagError> {
    let find = |r: &ColumnRef| match r {
        ColumnRef::Index(i) => Ok(*i),
        ColumnRef::Name(n) => header
            .iter()
            .position(|h| h == n)
            .ok_or_else(|| TagError::Parse { line, reason: format!("no column named `{n}` in header") }),
    };
    Ok((find(&columns.channel)?, find(&columns.t_ps)?))
}

/// Writes `channel,t_ps` rows with a header line.
pub fn write_tags_csv<W: Write>(stream: &TagStream, destination: W) -> Result<(), TagError> {
    let mut w = std::io::BufWriter::new(destination);
    writeln!(w, "channel,t_ps")?;
    for t in stream.tags() {
        writeln!(w, "{},{}", t.channel, t.t_ps)?;
    }
    w.flush()?;
    Ok(())
}
