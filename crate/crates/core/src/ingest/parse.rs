use std::collections::HashMap;
use std::io::{Read, Write};

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geom::{Equirectangular, Point};

/// One smart-card tap pair: a boarding and the matching alighting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transaction {
    pub card_id: String,
    pub service_date: NaiveDate,
    /// Seconds since local midnight.
    pub board_time: u32,
    pub alight_time: u32,
    pub board_stop: String,
    pub alight_stop: String,
    pub route: String,
}

/// How the second and third columns of a stop file are to be read.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopCoordinates {
    /// `stop_id,x_m,y_m` already in projected metres.
    Planar,
    /// `stop_id,lon,lat`, projected on load.
    LonLat(Equirectangular),
}

#[derive(Debug, Clone, Default)]
pub struct StopRegistry {
    stops: HashMap<String, Point>,
}

impl StopRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, at: Point) -> Result<()> {
        let id = id.into();
        if !at.is_finite() {
            return Err(Error::UndefinedInput(format!("stop {id} has non-finite coordinates")));
        }
        if self.stops.insert(id.clone(), at).is_some() {
            return Err(Error::UndefinedInput(format!("duplicate stop id {id}")));
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<Point> {
        self.stops.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.stops.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.stops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stops.is_empty()
    }

    /// Stops in id order.
    pub fn iter_sorted(&self) -> Vec<(&str, Point)> {
        let mut all: Vec<_> = self.stops.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        all.sort_unstable_by(|a, b| a.0.cmp(b.0));
        all
    }

    pub fn from_csv<R: Read>(reader: R, coords: StopCoordinates) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut registry = StopRegistry::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() < 3 {
                return Err(Error::UndefinedInput(format!("stop row {} has {} columns", line + 2, rec.len())));
            }
            let parse = |i: usize| -> Result<f64> {
                rec[i].parse::<f64>().map_err(|_| {
                    Error::UndefinedInput(format!("stop row {}: bad number {:?}", line + 2, &rec[i]))
                })
            };
            let (a, b) = (parse(1)?, parse(2)?);
            let at = match coords {
                StopCoordinates::Planar => Point::new(a, b),
                StopCoordinates::LonLat(proj) => proj.project(a, b),
            };
            registry.insert(&rec[0], at)?;
        }
        Ok(registry)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SkipCounts {
    /// Wrong column count, unparsable date or time.
    pub malformed: usize,
    /// Boarding at or after alighting.
    pub time_order: usize,
    pub unknown_stop: usize,
}

impl SkipCounts {
    pub fn total(&self) -> usize {
        self.malformed + self.time_order + self.unknown_stop
    }

    fn add(mut self, other: SkipCounts) -> SkipCounts {
        self.malformed += other.malformed;
        self.time_order += other.time_order;
        self.unknown_stop += other.unknown_stop;
        self
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParsedTransactions {
    pub transactions: Vec<Transaction>,
    pub skipped: SkipCounts,
}

impl ParsedTransactions {
    pub fn rows_read(&self) -> usize {
        self.transactions.len() + self.skipped.total()
    }
}

pub const TRANSACTION_COLUMNS: [&str; 7] = [
    "card_id",
    "date",
    "board_time",
    "alight_time",
    "board_stop",
    "alight_stop",
    "route",
];

/// Parses `HH:MM:SS` into seconds since midnight. Hours up to 47 are
/// accepted for services running past midnight.
pub fn parse_clock(s: &str) -> Option<u32> {
    let mut it = s.trim().splitn(3, ':');
    let h: u32 = it.next()?.parse().ok()?;
    let m: u32 = it.next()?.parse().ok()?;
    let sec: u32 = it.next()?.parse().ok()?;
    if h > 47 || m > 59 || sec > 59 {
        return None;
    }
    Some(h * 3600 + m * 60 + sec)
}

pub fn format_clock(secs: u32) -> String {
    format!("{:02}:{:02}:{:02}", secs / 3600, (secs / 60) % 60, secs % 60)
}

/// Writes transactions in the column order of [`TRANSACTION_COLUMNS`],
/// header included.
pub fn write_transactions<W: Write>(rows: &[Transaction], out: W) -> Result<()> {
    let mut w = std::io::BufWriter::new(out);
    let io = |e| Error::io("<transactions>", e);
    writeln!(w, "{}", TRANSACTION_COLUMNS.join(",")).map_err(io)?;
    for t in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            t.card_id,
            t.service_date,
            format_clock(t.board_time),
            format_clock(t.alight_time),
            t.board_stop,
            t.alight_stop,
            t.route
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads the whole transaction stream and parses it in parallel line chunks.
///
/// Rows failing validation are skipped and counted; surviving rows keep input
/// order.
pub fn parse_transactions<R: Read>(mut reader: R, registry: &StopRegistry) -> Result<ParsedTransactions> {
    let mut buf = Vec::new();
    reader
        .read_to_end(&mut buf)
        .map_err(|e| Error::io("<transactions>", e))?;
    parse_transaction_bytes(&buf, registry)
}

pub fn parse_transaction_bytes(buf: &[u8], registry: &StopRegistry) -> Result<ParsedTransactions> {
    let header_end = buf.iter().position(|&b| b == b'\n').unwrap_or(buf.len());
    let columns = column_map(&buf[..header_end])?;
    let body = if header_end < buf.len() { &buf[header_end + 1..] } else { &[][..] };

    let parts = chunk_at_newlines(body, rayon::current_num_threads() * 4);
    let parsed: Vec<ParsedTransactions> = parts
        .par_iter()
        .map(|chunk| parse_chunk(chunk, &columns, registry))
        .collect::<Result<_>>()?;

    let total: usize = parsed.iter().map(|p| p.transactions.len()).sum();
    let mut out = ParsedTransactions {
        transactions: Vec::with_capacity(total),
        skipped: SkipCounts::default(),
    };
    for p in parsed {
        out.transactions.extend(p.transactions);
        out.skipped = out.skipped.add(p.skipped);
    }
    Ok(out)
}

fn column_map(header: &[u8]) -> Result<[usize; 7]> {
    let header = std::str::from_utf8(header)
        .map_err(|_| Error::UndefinedInput("transaction header is not UTF-8".into()))?;
    let names: Vec<&str> = header.trim_end_matches('\r').split(',').map(str::trim).collect();
    let mut map = [0usize; 7];
    for (slot, want) in map.iter_mut().zip(TRANSACTION_COLUMNS) {
        *slot = names.iter().position(|n| *n == want).ok_or_else(|| {
            Error::UndefinedInput(format!("transaction header lacks column `{want}`"))
        })?;
    }
    Ok(map)
}

fn chunk_at_newlines(body: &[u8], pieces: usize) -> Vec<&[u8]> {
    let target = (body.len() / pieces.max(1)).max(1 << 16);
    let mut parts = Vec::new();
    let mut start = 0;
    while start < body.len() {
        let mut end = (start + target).min(body.len());
        while end < body.len() && body[end - 1] != b'\n' {
            end += 1;
        }
        parts.push(&body[start..end]);
        start = end;
    }
    parts
}

fn parse_chunk(chunk: &[u8], columns: &[usize; 7], registry: &StopRegistry) -> Result<ParsedTransactions> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(chunk);
    let mut out = ParsedTransactions::default();
    let width = columns.iter().max().copied().unwrap_or(0) + 1;
    let mut rec = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut rec) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) if e.is_io_error() => return Err(e.into()),
            Err(_) => {
                out.skipped.malformed += 1;
                continue;
            }
        }
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        if rec.len() < width {
            out.skipped.malformed += 1;
            continue;
        }
        let field = |i: usize| rec[columns[i]].trim();
        let date = NaiveDate::parse_from_str(field(1), "%Y-%m-%d");
        let (board, alight) = (parse_clock(field(2)), parse_clock(field(3)));
        let (Ok(service_date), Some(board_time), Some(alight_time)) = (date, board, alight) else {
            out.skipped.malformed += 1;
            continue;
        };
        if field(0).is_empty() {
            out.skipped.malformed += 1;
            continue;
        }
        if board_time >= alight_time {
            out.skipped.time_order += 1;
            continue;
        }
        if !registry.contains(field(4)) || !registry.contains(field(5)) {
            out.skipped.unknown_stop += 1;
            continue;
        }
        out.transactions.push(Transaction {
            card_id: field(0).to_owned(),
            service_date,
            board_time,
            alight_time,
            board_stop: field(4).to_owned(),
            alight_stop: field(5).to_owned(),
            route: field(6).to_owned(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry() -> StopRegistry {
        let mut r = StopRegistry::new();
        r.insert("s1", Point::new(0.0, 0.0)).unwrap();
        r.insert("s2", Point::new(1000.0, 0.0)).unwrap();
        r
    }

    const HEADER: &str = "card_id,date,board_time,alight_time,board_stop,alight_stop,route\n";

    #[test]
    fn well_formed_row_parses() {
        let text = format!("{HEADER}c1,2016-06-01,07:10:00,07:40:00,s1,s2,r9\n");
        let parsed = parse_transactions(text.as_bytes(), &registry()).unwrap();
        assert_eq!(parsed.skipped, SkipCounts::default());
        assert_eq!(
            parsed.transactions,
            vec![Transaction {
                card_id: "c1".into(),
                service_date: NaiveDate::from_ymd_opt(2016, 6, 1).unwrap(),
                board_time: 7 * 3600 + 600,
                alight_time: 7 * 3600 + 2400,
                board_stop: "s1".into(),
                alight_stop: "s2".into(),
                route: "r9".into(),
            }]
        );
    }

    #[test]
    fn board_not_before_alight_is_skipped() {
        let text = format!(
            "{HEADER}c1,2016-06-01,07:40:00,07:40:00,s1,s2,r9\nc1,2016-06-01,08:00:00,07:50:00,s1,s2,r9\n"
        );
        let parsed = parse_transactions(text.as_bytes(), &registry()).unwrap();
        assert!(parsed.transactions.is_empty());
        assert_eq!(parsed.skipped.time_order, 2);
    }

    #[test]
    fn unregistered_stop_is_skipped() {
        let text = format!(
            "{HEADER}c1,2016-06-01,07:10:00,07:40:00,s1,s3,r9\nc2,2016-06-01,07:10:00,07:40:00,s1,s2,r9\n"
        );
        let parsed = parse_transactions(text.as_bytes(), &registry()).unwrap();
        assert_eq!(parsed.transactions.len(), 1);
        assert_eq!(parsed.transactions[0].card_id, "c2");
        assert_eq!(parsed.skipped.unknown_stop, 1);
    }

    #[test]
    fn malformed_rows_are_counted() {
        let text = format!(
            "{HEADER}c1,2016-06-01,07:10,07:40:00,s1,s2,r9\nc1,2016-13-01,07:10:00,07:40:00,s1,s2,r9\nc1,2016-06-01\n\nc1,2016-06-01,07:10:00,07:40:00,s1,s2,r9\n"
        );
        let parsed = parse_transactions(text.as_bytes(), &registry()).unwrap();
        assert_eq!(parsed.transactions.len(), 1);
        assert_eq!(parsed.skipped.malformed, 3);
    }

    #[test]
    fn header_columns_may_be_reordered() {
        let text = "route,card_id,date,board_stop,alight_stop,board_time,alight_time\nr1,c1,2016-06-01,s1,s2,07:00:00,07:30:00\n";
        let parsed = parse_transactions(text.as_bytes(), &registry()).unwrap();
        assert_eq!(parsed.transactions[0].route, "r1");
        assert_eq!(parsed.transactions[0].board_time, 7 * 3600);
    }

    #[test]
    fn missing_header_column_is_fatal() {
        let text = "card_id,date,board_time\n";
        assert!(parse_transactions(text.as_bytes(), &registry()).is_err());
    }

    #[test]
    fn duplicate_stop_ids_are_rejected() {
        let text = "stop_id,x_m,y_m\na,0,0\na,1,1\n";
        assert!(StopRegistry::from_csv(text.as_bytes(), StopCoordinates::Planar).is_err());
    }

    #[test]
    fn clock_round_trip() {
        assert_eq!(parse_clock("07:05:09"), Some(7 * 3600 + 5 * 60 + 9));
        assert_eq!(format_clock(7 * 3600 + 5 * 60 + 9), "07:05:09");
        assert_eq!(parse_clock("07:60:00"), None);
    }

    #[test]
    fn chunked_parse_keeps_input_order() {
        let mut text = String::from(HEADER);
        for i in 0..20_000 {
            text.push_str(&format!("c{i},2016-06-01,07:10:00,07:40:00,s1,s2,r9\n"));
        }
        let parsed = parse_transactions(text.as_bytes(), &registry()).unwrap();
        assert_eq!(parsed.transactions.len(), 20_000);
        for (i, t) in parsed.transactions.iter().enumerate() {
            assert_eq!(t.card_id, format!("c{i}"));
        }
    }
}
