//! Event data model and on-disk formats.
//!
//! Electron events come from a pixel detector (column, row, time of arrival,
//! time over threshold); photon events are bare timestamps from a time
//! tagger. Both are stored in small little-endian binary formats:
//!
//! ```text
//! electron file: "EPEV" u16 version u16 grid u64 count | count x (u16 x, u16 y, i64 toa_ns, u16 tot)
//! photon file:   "PHEV" u16 version u64 count          | count x (i64 t_ns)
//! ```
//!
//! A CSV import path (`x,y,toa_ns,tot` and `t_ns`) exists for interop.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ELECTRON_MAGIC: [u8; 4] = *b"EPEV";
pub const PHOTON_MAGIC: [u8; 4] = *b"PHEV";
pub const FORMAT_VERSION: u16 = 1;
pub const ELECTRON_HEADER_LEN: usize = 16;
pub const ELECTRON_RECORD_LEN: usize = 14;
pub const PHOTON_HEADER_LEN: usize = 14;
pub const PHOTON_RECORD_LEN: usize = 8;

/// Detector edge length in pixels.
pub const DEFAULT_GRID: u16 = 256;
/// Nominal number of electron events per detector data package.
pub const DEFAULT_PACKAGE_SIZE: usize = 650_000;
pub const DEFAULT_EXPECTED_DELAY_NS: i64 = -40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ElectronEvent {
    pub x: u16,
    pub y: u16,
    pub toa_ns: i64,
    pub tot: u16,
}

impl ElectronEvent {
    pub fn new(x: u16, y: u16, toa_ns: i64, tot: u16) -> Self {
        Self { x, y, toa_ns, tot }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PhotonEvent {
    pub t_ns: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventPackage {
    pub index: usize,
    pub events: Vec<ElectronEvent>,
}

/// Offset between the photon and electron clocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClockSync {
    /// Added to every photon timestamp.
    pub offset_ns: i64,
    pub expected_delay_ns: i64,
}

impl Default for ClockSync {
    fn default() -> Self {
        Self { offset_ns: 0, expected_delay_ns: DEFAULT_EXPECTED_DELAY_NS }
    }
}

fn check_on_grid(events: &[ElectronEvent], grid: u16) -> Result<()> {
    for e in events {
        if e.x >= grid || e.y >= grid {
            return Err(Error::OffGrid { x: e.x.into(), y: e.y.into(), grid: grid.into() });
        }
    }
    Ok(())
}

pub fn encode_electrons(events: &[ElectronEvent], grid: u16) -> Vec<u8> {
    let mut buf = Vec::with_capacity(ELECTRON_HEADER_LEN + events.len() * ELECTRON_RECORD_LEN);
    buf.extend_from_slice(&ELECTRON_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&grid.to_le_bytes());
    buf.extend_from_slice(&(events.len() as u64).to_le_bytes());
    for e in events {
        buf.extend_from_slice(&e.x.to_le_bytes());
        buf.extend_from_slice(&e.y.to_le_bytes());
        buf.extend_from_slice(&e.toa_ns.to_le_bytes());
        buf.extend_from_slice(&e.tot.to_le_bytes());
    }
    buf
}

/// Decodes an electron file image, returning the events in file order and the
/// grid size recorded in the header.
pub fn decode_electrons(bytes: &[u8]) -> Result<(Vec<ElectronEvent>, u16)> {
    if bytes.len() < ELECTRON_HEADER_LEN {
        let mut found = [0u8; 4];
        let n = bytes.len().min(4);
        found[..n].copy_from_slice(&bytes[..n]);
        if found != ELECTRON_MAGIC {
            return Err(Error::BadMagic { expected: ELECTRON_MAGIC, found });
        }
        return Err(Error::Parse("electron header shorter than 16 bytes".into()));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != ELECTRON_MAGIC {
        return Err(Error::BadMagic { expected: ELECTRON_MAGIC, found: magic });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let grid = u16::from_le_bytes([bytes[6], bytes[7]]);
    let declared = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let body = &bytes[ELECTRON_HEADER_LEN..];
    let found = (body.len() / ELECTRON_RECORD_LEN) as u64;
    if found < declared {
        return Err(Error::Truncated { declared, found });
    }
    if body.len() as u64 != declared * ELECTRON_RECORD_LEN as u64 {
        return Err(Error::Parse(format!(
            "{} trailing bytes after {declared} records",
            body.len() as u64 - declared * ELECTRON_RECORD_LEN as u64
        )));
    }
    let events: Vec<ElectronEvent> = body
        .chunks_exact(ELECTRON_RECORD_LEN)
        .map(|r| ElectronEvent {
            x: u16::from_le_bytes([r[0], r[1]]),
            y: u16::from_le_bytes([r[2], r[3]]),
            toa_ns: i64::from_le_bytes(r[4..12].try_into().unwrap()),
            tot: u16::from_le_bytes([r[12], r[13]]),
        })
        .collect();
    check_on_grid(&events, grid)?;
    Ok((events, grid))
}

pub fn encode_photons(photons: &[PhotonEvent]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(PHOTON_HEADER_LEN + photons.len() * PHOTON_RECORD_LEN);
    buf.extend_from_slice(&PHOTON_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(photons.len() as u64).to_le_bytes());
    for p in photons {
        buf.extend_from_slice(&p.t_ns.to_le_bytes());
    }
    buf
}

pub fn decode_photons(bytes: &[u8]) -> Result<Vec<PhotonEvent>> {
    let mut found = [0u8; 4];
    let n = bytes.len().min(4);
    found[..n].copy_from_slice(&bytes[..n]);
    if found != PHOTON_MAGIC {
        return Err(Error::BadMagic { expected: PHOTON_MAGIC, found });
    }
    if bytes.len() < PHOTON_HEADER_LEN {
        return Err(Error::Parse("photon header shorter than 14 bytes".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let declared = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
    let body = &bytes[PHOTON_HEADER_LEN..];
    let found = (body.len() / PHOTON_RECORD_LEN) as u64;
    if found < declared {
        return Err(Error::Truncated { declared, found });
    }
    if body.len() as u64 != declared * PHOTON_RECORD_LEN as u64 {
        return Err(Error::Parse("trailing bytes after photon records".into()));
    }
    Ok(body
        .chunks_exact(PHOTON_RECORD_LEN)
        .map(|r| PhotonEvent { t_ns: i64::from_le_bytes(r.try_into().unwrap()) })
        .collect())
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    Ok(buf)
}

/// Reads an electron file. Events are returned in file order.
pub fn read_electron_file(path: impl AsRef<Path>) -> Result<Vec<ElectronEvent>> {
    decode_electrons(&read_all(path.as_ref())?).map(|(events, _)| events)
}

pub fn write_electron_file(path: impl AsRef<Path>, events: &[ElectronEvent]) -> Result<()> {
    write_electron_file_with_grid(path, events, DEFAULT_GRID)
}

pub fn write_electron_file_with_grid(
    path: impl AsRef<Path>,
    events: &[ElectronEvent],
    grid: u16,
) -> Result<()> {
    check_on_grid(events, grid)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_electrons(events, grid))?;
    w.flush()?;
    Ok(())
}

pub fn read_photon_file(path: impl AsRef<Path>) -> Result<Vec<PhotonEvent>> {
    decode_photons(&read_all(path.as_ref())?)
}

pub fn write_photon_file(path: impl AsRef<Path>, photons: &[PhotonEvent]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_photons(photons))?;
    w.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct ElectronRow {
    x: u16,
    y: u16,
    toa_ns: i64,
    tot: u16,
}

#[derive(Deserialize)]
struct PhotonRow {
    t_ns: i64,
}

/// Imports electrons from CSV with header `x,y,toa_ns,tot`.
pub fn read_electron_csv(reader: impl Read, grid: u16) -> Result<Vec<ElectronEvent>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut events = Vec::new();
    for row in rdr.deserialize::<ElectronRow>() {
        let r = row?;
        events.push(ElectronEvent::new(r.x, r.y, r.toa_ns, r.tot));
    }
    check_on_grid(&events, grid)?;
    Ok(events)
}

/// Imports photons from CSV with header `t_ns`.
pub fn read_photon_csv(reader: impl Read) -> Result<Vec<PhotonEvent>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut photons = Vec::new();
    for row in rdr.deserialize::<PhotonRow>() {
        photons.push(PhotonEvent { t_ns: row?.t_ns });
    }
    Ok(photons)
}

/// Sorts electrons by time of arrival. The sort is stable so that events
/// sharing a timestamp keep their packet order.
pub fn sort_electrons(events: &mut [ElectronEvent]) {
    events.sort_by_key(|e| e.toa_ns);
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Reads an electron file, binary or `.csv`, and sorts it on ingest unless
/// `presorted` is set, in which case the order is verified instead.
pub fn load_electrons(path: impl AsRef<Path>, presorted: bool) -> Result<Vec<ElectronEvent>> {
    let path = path.as_ref();
    let mut events = if is_csv(path) {
        read_electron_csv(File::open(path)?, DEFAULT_GRID)?
    } else {
        read_electron_file(path)?
    };
    if presorted {
        check_sorted_electrons(&events)?;
    } else {
        sort_electrons(&mut events);
    }
    Ok(events)
}

pub fn load_photons(path: impl AsRef<Path>, presorted: bool) -> Result<Vec<PhotonEvent>> {
    let path = path.as_ref();
    let mut photons = if is_csv(path) { read_photon_csv(File::open(path)?)? } else { read_photon_file(path)? };
    if presorted {
        check_sorted_photons(&photons)?;
    } else {
        photons.sort();
    }
    Ok(photons)
}

pub fn check_sorted_electrons(events: &[ElectronEvent]) -> Result<()> {
    match events.windows(2).position(|w| w[1].toa_ns < w[0].toa_ns) {
        Some(i) => Err(Error::Unsorted(i + 1)),
        None => Ok(()),
    }
}

pub fn check_sorted_photons(photons: &[PhotonEvent]) -> Result<()> {
    match photons.windows(2).position(|w| w[1].t_ns < w[0].t_ns) {
        Some(i) => Err(Error::Unsorted(i + 1)),
        None => Ok(()),
    }
}

/// Cuts a time-sorted electron stream into consecutive packages of
/// `package_size` events; only the last package may be shorter.
pub fn split_packages(events: &[ElectronEvent], package_size: usize) -> Result<Vec<EventPackage>> {
    if package_size == 0 {
        return Err(Error::InvalidArgument("package size must be at least 1".into()));
    }
    check_sorted_electrons(events)?;
    Ok(events
        .chunks(package_size)
        .enumerate()
        .map(|(index, chunk)| EventPackage { index, events: chunk.to_vec() })
        .collect())
}

pub fn apply_clock_sync(photons: &[PhotonEvent], sync: &ClockSync) -> Result<Vec<PhotonEvent>> {
    photons
        .iter()
        .map(|p| {
            p.t_ns
                .checked_add(sync.offset_ns)
                .map(|t_ns| PhotonEvent { t_ns })
                .ok_or(Error::Overflow(sync.offset_ns))
        })
        .collect()
}
