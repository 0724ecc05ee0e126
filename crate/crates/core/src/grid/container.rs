//! Binary containers for demand and factor series.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "STEFGRID"
//! header_len   u32
//! header       header_len bytes of UTF-8 JSON (see `Header`)
//! payload      demand:  T*W*H   u32 counts, row-major (t, w, h)
//!              factors: T*W*H*M u8 values in {0, 1}, row-major (t, w, h, m)
//! ```

use std::io::Write;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{DemandSeries, FactorSeries, GridSpec};
use crate::error::{Error, Result};

pub const CONTAINER_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"STEFGRID";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    grid: GridSpec,
    start_time: DateTime<Utc>,
    steps: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    num_factors: Option<usize>,
}

fn encode(header: &Header, payload: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    Ok(out)
}

fn decode<'a>(bytes: &'a [u8], kind: &str) -> Result<(Header, &'a [u8])> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Corrupt("missing STEFGRID magic".into()));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() < len {
        return Err(Error::Corrupt("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..len])?;
    if header.format_version != CONTAINER_VERSION {
        return Err(Error::Version { found: header.format_version, expected: CONTAINER_VERSION });
    }
    if header.kind != kind {
        return Err(Error::Corrupt(format!("expected a {kind} container, found {}", header.kind)));
    }
    header.grid.validate()?;
    Ok((header, &body[len..]))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn demand_to_bytes(series: &DemandSeries) -> Result<Vec<u8>> {
    let header = Header {
        format_version: CONTAINER_VERSION,
        kind: "demand".into(),
        grid: series.grid().clone(),
        start_time: series.start_time(),
        steps: series.steps(),
        num_factors: None,
    };
    let payload: Vec<u8> = series.counts().iter().flat_map(|c| c.to_le_bytes()).collect();
    encode(&header, &payload)
}

pub fn demand_from_bytes(bytes: &[u8]) -> Result<DemandSeries> {
    let (h, payload) = decode(bytes, "demand")?;
    let expected = h.steps * h.grid.cells() * 4;
    if payload.len() != expected {
        return Err(Error::Corrupt(format!("demand payload is {} bytes, expected {expected}", payload.len())));
    }
    let counts = payload.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
    DemandSeries::new(h.grid, h.start_time, h.steps, counts)
}

pub fn factors_to_bytes(series: &FactorSeries) -> Result<Vec<u8>> {
    let header = Header {
        format_version: CONTAINER_VERSION,
        kind: "factors".into(),
        grid: series.grid().clone(),
        start_time: series.start_time(),
        steps: series.steps(),
        num_factors: Some(series.num_factors()),
    };
    encode(&header, series.values())
}

pub fn factors_from_bytes(bytes: &[u8]) -> Result<FactorSeries> {
    let (h, payload) = decode(bytes, "factors")?;
    let m = h.num_factors.ok_or_else(|| Error::Corrupt("factor header lacks num_factors".into()))?;
    let expected = h.steps * h.grid.cells() * m;
    if payload.len() != expected {
        return Err(Error::Corrupt(format!("factor payload is {} bytes, expected {expected}", payload.len())));
    }
    FactorSeries::new(h.grid, h.start_time, h.steps, m, payload.to_vec())
}

pub fn write_demand(path: &Path, series: &DemandSeries) -> Result<()> {
    write_bytes(path, &demand_to_bytes(series)?)
}

pub fn read_demand(path: &Path) -> Result<DemandSeries> {
    demand_from_bytes(&read_bytes(path)?)
}

pub fn write_factors(path: &Path, series: &FactorSeries) -> Result<()> {
    write_bytes(path, &factors_to_bytes(series)?)
}

pub fn read_factors(path: &Path) -> Result<FactorSeries> {
    factors_from_bytes(&read_bytes(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::parse_timestamp;
    use proptest::prelude::*;

    fn grid(w: usize, h: usize) -> GridSpec {
        GridSpec::new(10.0, 11.0, 20.0, 22.0, w, h).unwrap()
    }

    proptest! {
        #[test]
        fn demand_round_trip(w in 1usize..4, h in 1usize..4, steps in 1usize..6, seed in any::<u64>()) {
            let start = parse_timestamp("2023-06-01T05:00:00Z").unwrap();
            let counts = (0..steps * w * h).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 40) as u32).collect();
            let series = DemandSeries::new(grid(w, h), start, steps, counts).unwrap();
            let back = demand_from_bytes(&demand_to_bytes(&series).unwrap()).unwrap();
            prop_assert_eq!(back, series);
        }

        #[test]
        fn factor_round_trip(m in 0usize..4, steps in 1usize..6, bits in prop::collection::vec(0u8..2, 200)) {
            let start = parse_timestamp("2023-06-01T05:00:00Z").unwrap();
            let n = steps * 6 * m;
            let series = FactorSeries::new(grid(3, 2), start, steps, m, bits[..n].to_vec()).unwrap();
            let back = factors_from_bytes(&factors_to_bytes(&series).unwrap()).unwrap();
            prop_assert_eq!(back, series);
        }
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demand.bin");
        let start = parse_timestamp("2023-06-01T00:00:00Z").unwrap();
        let series = DemandSeries::new(grid(2, 2), start, 3, (0..12).collect()).unwrap();
        write_demand(&path, &series).unwrap();
        assert_eq!(read_demand(&path).unwrap(), series);

        let bytes = std::fs::read(&path).unwrap();
        assert!(matches!(demand_from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Corrupt(_))));
        assert!(matches!(demand_from_bytes(&bytes[..10]), Err(Error::Corrupt(_))));
        assert!(matches!(factors_from_bytes(&bytes), Err(Error::Corrupt(_))));

        let mut bumped = bytes.clone();
        let key = b"\"format_version\":1";
        let pos = bumped.windows(key.len()).position(|w| w == key).unwrap();
        bumped[pos + key.len() - 1] = b'9';
        assert!(matches!(demand_from_bytes(&bumped), Err(Error::Version { found: 9, expected: 1 })));
    }
}
