//! Time-tag file formats.
//!
//! CSV: header `channel,t_ps`, one row per event, rows sorted by `t_ps`.
//!
//! Binary: the 4-byte magic `PTT1` followed by 9-byte little-endian records,
//! one `u8` channel then one `u64` timestamp in picoseconds, sorted by time.
//!
//! Neither format stores the record duration. Readers set it to the latest
//! tag in the file; callers holding the true duration should override it
//! with [`TimeTagStream::with_duration`].

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};

use crate::error::{Error, Result};
use crate::stream::TimeTagStream;

pub const BINARY_MAGIC: &[u8; 4] = b"PTT1";
pub const CSV_HEADER: &str = "channel,t_ps";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TagFormat {
    Csv,
    Binary,
}

impl TagFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TagFormat::Csv => "csv",
            TagFormat::Binary => "ptt",
        }
    }
}

/// Interleaves the streams by timestamp. Equal timestamps on different
/// channels are ordered by input position.
fn merged_events(streams: &[&TimeTagStream]) -> Vec<(u8, u64)> {
    let mut events: Vec<(u64, usize, u8)> = Vec::with_capacity(streams.iter().map(|s| s.len()).sum());
    for (i, s) in streams.iter().enumerate() {
        events.extend(s.tags().iter().map(|&t| (t, i, s.channel())));
    }
    events.sort_unstable();
    events.into_iter().map(|(t, _, c)| (c, t)).collect()
}

pub fn write_csv<W: Write>(mut out: W, streams: &[&TimeTagStream]) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    if let [single] = streams {
        let c = single.channel();
        for &t in single.tags() {
            writeln!(out, "{c},{t}")?;
        }
    } else {
        for (c, t) in merged_events(streams) {
            writeln!(out, "{c},{t}")?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_binary<W: Write>(mut out: W, streams: &[&TimeTagStream]) -> Result<()> {
    out.write_all(BINARY_MAGIC)?;
    let mut record = [0u8; 9];
    let mut put = |out: &mut W, c: u8, t: u64| -> std::io::Result<()> {
        record[0] = c;
        record[1..].copy_from_slice(&t.to_le_bytes());
        out.write_all(&record)
    };
    if let [single] = streams {
        for &t in single.tags() {
            put(&mut out, single.channel(), t)?;
        }
    } else {
        for (c, t) in merged_events(streams) {
            put(&mut out, c, t)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_tags<W: Write>(out: W, format: TagFormat, streams: &[&TimeTagStream]) -> Result<()> {
    match format {
        TagFormat::Csv => write_csv(out, streams),
        TagFormat::Binary => write_binary(out, streams),
    }
}

/// Accumulates events per channel while enforcing the file ordering rules.
#[derive(Default)]
struct Collector {
    channels: BTreeMap<u8, Vec<u64>>,
    last_time: Option<u64>,
}

impl Collector {
    fn push(&mut self, line: usize, channel: u8, t: u64) -> Result<()> {
        if let Some(prev) = self.last_time {
            if t < prev {
                return Err(Error::Parse {
                    line,
                    message: format!("t_ps {t} is earlier than the preceding {prev}"),
                });
            }
        }
        let tags = self.channels.entry(channel).or_default();
        if tags.last() == Some(&t) {
            return Err(Error::Parse {
                line,
                message: format!("duplicate t_ps {t} on channel {channel}"),
            });
        }
        tags.push(t);
        self.last_time = Some(t);
        Ok(())
    }

    fn finish(self) -> Vec<TimeTagStream> {
        let duration = self.last_time.unwrap_or(0);
        self.channels
            .into_iter()
            .map(|(c, tags)| TimeTagStream::from_sorted(c, tags, duration))
            .collect()
    }
}

/// Reads a CSV tag file. Errors name the 1-based line number.
pub fn read_csv<R: BufRead>(input: R) -> Result<Vec<TimeTagStream>> {
    let mut lines = input.lines();
    match lines.next() {
        Some(header) => {
            let header = header?;
            if header.trim() != CSV_HEADER {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected header `{CSV_HEADER}`, found `{}`", header.trim()),
                });
            }
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "empty file".into(),
            })
        }
    }
    let mut collector = Collector::default();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (c, t) = line.split_once(',').ok_or_else(|| Error::Parse {
            line: line_no,
            message: format!("expected `channel,t_ps`, found `{line}`"),
        })?;
        let channel: u8 = c.trim().parse().map_err(|e| Error::Parse {
            line: line_no,
            message: format!("bad channel `{}`: {e}", c.trim()),
        })?;
        let t: u64 = t.trim().parse().map_err(|e| Error::Parse {
            line: line_no,
            message: format!("bad t_ps `{}`: {e}", t.trim()),
        })?;
        collector.push(line_no, channel, t)?;
    }
    Ok(collector.finish())
}

/// Reads a binary tag file. Errors report the 1-based record index as the
/// line number.
pub fn read_binary<R: Read>(mut input: R) -> Result<Vec<TimeTagStream>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(|_| Error::Parse {
        line: 0,
        message: "missing PTT1 magic".into(),
    })?;
    if &magic != BINARY_MAGIC {
        return Err(Error::Parse {
            line: 0,
            message: "missing PTT1 magic".into(),
        });
    }
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() % 9 != 0 {
        return Err(Error::Parse {
            line: bytes.len() / 9 + 1,
            message: format!("truncated record ({} trailing bytes)", bytes.len() % 9),
        });
    }
    let mut collector = Collector::default();
    for (i, rec) in bytes.chunks_exact(9).enumerate() {
        let t = u64::from_le_bytes(rec[1..9].try_into().expect("9-byte record"));
        collector.push(i + 1, rec[0], t)?;
    }
    Ok(collector.finish())
}

/// Reads either format, recognising binary files by their magic prefix.
pub fn read_tags<R: BufRead>(mut input: R) -> Result<Vec<TimeTagStream>> {
    let head = input.fill_buf()?;
    if head.starts_with(BINARY_MAGIC) {
        read_binary(input)
    } else {
        read_csv(input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stream(channel: u8, tags: &[u64]) -> TimeTagStream {
        TimeTagStream::new(channel, tags.to_vec(), 1000).unwrap()
    }

    #[test]
    fn csv_layout_is_exact() {
        let a = stream(0, &[5, 20]);
        let b = stream(1, &[5, 7]);
        let mut buf = Vec::new();
        write_csv(&mut buf, &[&a, &b]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "channel,t_ps\n0,5\n1,5\n1,7\n0,20\n");
    }

    #[test]
    fn binary_layout_is_exact() {
        let a = stream(3, &[0x0102]);
        let mut buf = Vec::new();
        write_binary(&mut buf, &[&a]).unwrap();
        assert_eq!(&buf[..4], b"PTT1");
        assert_eq!(buf.len(), 13);
        assert_eq!(buf[4], 3);
        assert_eq!(&buf[5..13], &[0x02, 0x01, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn malformed_csv_names_the_line() {
        let text = "channel,t_ps\n0,10\n0,abc\n";
        match read_csv(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let unsorted = "channel,t_ps\n0,10\n1,4\n";
        assert!(matches!(read_csv(unsorted.as_bytes()), Err(Error::Parse { line: 3, .. })));
        assert!(matches!(read_csv("t,c\n".as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn binary_rejects_truncation_and_bad_magic() {
        assert!(read_binary(&b"XXXX"[..]).is_err());
        let mut buf = b"PTT1".to_vec();
        buf.extend_from_slice(&[0u8; 10]);
        assert!(matches!(read_binary(&buf[..]), Err(Error::Parse { .. })));
    }

    proptest! {
        #[test]
        fn round_trip_both_formats(
            raw_a in proptest::collection::btree_set(0u64..1_000_000, 0..50),
            raw_b in proptest::collection::btree_set(0u64..1_000_000, 1..50),
            binary in any::<bool>(),
        ) {
            let a = TimeTagStream::new(0, raw_a.into_iter().collect(), 1_000_000).unwrap();
            let b = TimeTagStream::new(4, raw_b.into_iter().collect(), 1_000_000).unwrap();
            let format = if binary { TagFormat::Binary } else { TagFormat::Csv };
            let mut buf = Vec::new();
            write_tags(&mut buf, format, &[&a, &b]).unwrap();
            let back = read_tags(&buf[..]).unwrap();
            let end = a.tags().last().copied().unwrap_or(0).max(*b.tags().last().unwrap());
            let mut expected = vec![b.clone().with_duration(end).unwrap()];
            if !a.is_empty() {
                expected.insert(0, a.clone().with_duration(end).unwrap());
            }
            prop_assert_eq!(back, expected);
        }
    }
}
