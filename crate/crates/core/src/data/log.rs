//! Interaction log file.
//!
//! ```text
//! #htcn-log 1
//! user_id,item_id,timestamp,kind,impression_group
//! 7,1042,1500000000,interaction,1
//! 7,1042,1500000000,impression,1
//! 7,88,1500000000,impression,1
//! ```
//!
//! `kind` is `interaction` or `impression`; `impression_group` may be empty.

use std::io::{BufRead, BufReader, Read, Write};

use super::{Interaction, RecordKind};
use crate::error::{Error, Result};

pub const LOG_MAGIC: &str = "#htcn-log";
pub const LOG_VERSION: u32 = 1;
const COLUMNS: [&str; 5] = ["user_id", "item_id", "timestamp", "kind", "impression_group"];

pub fn write_log<W: Write>(out: W, records: &[Interaction]) -> Result<()> {
    let mut out = out;
    writeln!(out, "{LOG_MAGIC} {LOG_VERSION}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COLUMNS)?;
    for r in records {
        let kind = match r.kind {
            RecordKind::Interaction => "interaction",
            RecordKind::Impression => "impression",
        };
        let group = r.impression_group.map(|g| g.to_string()).unwrap_or_default();
        w.write_record([r.user_id.to_string(), r.item_id.to_string(), r.timestamp.to_string(), kind.to_string(), group])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log<R: Read>(input: R) -> Result<Vec<Interaction>> {
    let mut reader = BufReader::new(input);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let mut parts = first.split_whitespace();
    if parts.next() != Some(LOG_MAGIC) {
        return Err(Error::Format("interaction log must start with '#htcn-log <version>'".into()));
    }
    match parts.next().map(str::parse::<u32>) {
        Some(Ok(LOG_VERSION)) => {}
        other => return Err(Error::Format(format!("unsupported interaction log version {other:?}"))),
    }
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rd.headers()?.clone();
    if headers.iter().ne(COLUMNS) {
        return Err(Error::Format(format!("unexpected log columns {headers:?}")));
    }
    let mut out = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::data(format!("log record {}: invalid {what}", line + 1));
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let kind = match field(3) {
            "interaction" => RecordKind::Interaction,
            "impression" => RecordKind::Impression,
            _ => return Err(bad("kind")),
        };
        let group = match field(4) {
            "" => None,
            g => Some(g.parse().map_err(|_| bad("impression_group"))?),
        };
        out.push(Interaction {
            user_id: field(0).parse().map_err(|_| bad("user_id"))?,
            item_id: field(1).parse().map_err(|_| bad("item_id"))?,
            timestamp: field(2).parse().map_err(|_| bad("timestamp"))?,
            kind,
            impression_group: group,
        });
    }
    Ok(out)
}
