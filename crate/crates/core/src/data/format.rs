//! Binary region container.
//!
//! ```text
//! magic        4 bytes  "GTRG"
//! version      u32
//! payload_len  u64
//! payload      payload_len bytes
//! crc32        u32      over every preceding byte
//! ```
//!
//! All integers and floats are little-endian. The payload is
//!
//! ```text
//! center lon, lat, size_km                       3 x f64
//! grid h, w, c                                   3 x u64
//! grid origin lon, lat, cell_km, scale_lat       4 x f64
//! grid data                                      h*w*c x f64
//! n_tracts, n_features                           2 x u64
//! per tract: id u64, rep lon/lat 2 x f64, features n_features x f64,
//!            n_vertices u64, vertices n_vertices x (lon f64, lat f64)
//! ```

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geo::GeoPoint;
use crate::geometry::TractPolygon;
use crate::vision::VisionGrid;

use super::region::{Region, TractRecord, TractTable};

pub const REGION_MAGIC: &[u8; 4] = b"GTRG";
pub const REGION_VERSION: u32 = 1;
const HEADER: usize = 16;

struct Writer(Vec<u8>);

impl Writer {
    fn f(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.at < n {
            return Err(Error::Truncated(format!("payload ends at byte {}", self.buf.len())));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn f(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn u(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn count(&mut self, elem: usize) -> Result<usize> {
        let n = self.u()? as usize;
        if n.checked_mul(elem).is_none_or(|b| b > self.buf.len() - self.at) {
            return Err(Error::Truncated(format!("count {n} exceeds payload")));
        }
        Ok(n)
    }
    fn point(&mut self) -> Result<GeoPoint> {
        let lon = self.f()?;
        let lat = self.f()?;
        GeoPoint::new(lon, lat)
    }
}

pub fn encode_region(region: &Region) -> Result<Vec<u8>> {
    region.tracts.validate()?;
    let mut w = Writer(Vec::new());
    w.f(region.center.lon);
    w.f(region.center.lat);
    w.f(region.size_km);
    let g = &region.vision;
    w.u(g.h as u64);
    w.u(g.w as u64);
    w.u(g.c as u64);
    w.f(g.origin.lon);
    w.f(g.origin.lat);
    w.f(g.cell_km);
    w.f(g.scale_lat);
    g.data.iter().for_each(|&v| w.f(v));
    let recs = &region.tracts.records;
    w.u(recs.len() as u64);
    w.u(recs[0].features.len() as u64);
    for r in recs {
        w.u(r.id);
        w.f(r.rep_point.lon);
        w.f(r.rep_point.lat);
        r.features.iter().for_each(|&v| w.f(v));
        let vs = r.polygon.vertices();
        w.u(vs.len() as u64);
        for p in vs {
            w.f(p.lon);
            w.f(p.lat);
        }
    }
    let payload = w.0;
    let mut out = Vec::with_capacity(HEADER + payload.len() + 4);
    out.extend_from_slice(REGION_MAGIC);
    out.extend_from_slice(&REGION_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_region(bytes: &[u8]) -> Result<Region> {
    if bytes.len() < 4 {
        return Err(Error::Truncated(format!("{} bytes", bytes.len())));
    }
    if &bytes[..4] != REGION_MAGIC {
        return Err(Error::Magic("region file".into()));
    }
    if bytes.len() < HEADER {
        return Err(Error::Truncated(format!("header of {} bytes", bytes.len())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != REGION_VERSION {
        return Err(Error::Version {
            found: version,
            expected: REGION_VERSION,
        });
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let end = (HEADER as u64).checked_add(len).and_then(|e| e.checked_add(4));
    match end {
        Some(e) if e <= bytes.len() as u64 => {}
        _ => {
            return Err(Error::Truncated(format!(
                "payload of {len} bytes, file of {}",
                bytes.len()
            )))
        }
    }
    let body = HEADER + len as usize;
    let stored = u32::from_le_bytes(bytes[body..body + 4].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..body]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader {
        buf: &bytes[HEADER..body],
        at: 0,
    };
    let center = r.point()?;
    let size_km = r.f()?;
    let (h, w, c) = (r.u()? as usize, r.u()? as usize, r.u()? as usize);
    let origin = r.point()?;
    let cell_km = r.f()?;
    let scale_lat = r.f()?;
    let cells = h
        .checked_mul(w)
        .and_then(|x| x.checked_mul(c))
        .filter(|&x| x.checked_mul(8).is_some_and(|b| b <= r.buf.len() - r.at))
        .ok_or_else(|| Error::Truncated("grid larger than payload".into()))?;
    let data = (0..cells).map(|_| r.f()).collect::<Result<Vec<_>>>()?;
    let vision = VisionGrid::new(h, w, c, data, origin, cell_km, scale_lat)?;
    let n = r.count(8)?;
    let f = r.u()? as usize;
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let id = r.u()?;
        let rep_point = r.point()?;
        let features = (0..f).map(|_| r.f()).collect::<Result<Vec<_>>>()?;
        let nv = r.count(16)?;
        let ring = (0..nv).map(|_| r.point()).collect::<Result<Vec<_>>>()?;
        records.push(TractRecord {
            id,
            features,
            rep_point,
            polygon: TractPolygon::new(ring)?,
        });
    }
    if r.at != r.buf.len() {
        return Err(Error::Parse(format!("{} trailing payload bytes", r.buf.len() - r.at)));
    }
    let tracts = TractTable { records };
    tracts.validate()?;
    Ok(Region {
        center,
        size_km,
        vision,
        tracts,
    })
}

pub fn write_region(path: &Path, region: &Region) -> Result<()> {
    let bytes = encode_region(region)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn read_region(path: &Path) -> Result<Region> {
    decode_region(&std::fs::read(path)?)
}
