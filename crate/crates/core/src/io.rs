//! Snapshot files, the rollout manifest and CSV writers.
//!
//! Binary snapshot layout (all little-endian):
//!
//! ```text
//! magic      8 bytes  "DCVSNAP\0"
//! version    u32
//! nx, ny     u32, u32
//! lx, ly     f64, f64
//! obstacle   u8 flag, then x0 x1 y0 y1 as f64 when set
//! sides      4 x u8   left right bottom top (inlet=0 outlet=1 wall=2 obstacle=3)
//! step       u64
//! time       f64
//! u_scale    f64      velocity normalization scale
//! p_ref      f64      pressure reference
//! n_quant    u32, then one u8 code per quantity (ux=0 uy=1 p=2 k=3 omega=4)
//! n_cells    u64
//! values     n_quant blocks of n_cells f64, active cells in row-major order
//! ```
//!
//! The ASCII mode carries the same header as `key value` lines followed by one
//! line per quantity; floats are printed in shortest round-trip form, so both
//! modes reproduce the stored values exactly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{CellField, Quantity, State};
use crate::grid::{BoundaryTag, MeshSpec, Rect, SideTags};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"DCVSNAP\0";
pub const SNAPSHOT_VERSION: u32 = 1;
const ASCII_MAGIC: &str = "DCVSNAP-ASCII";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotMode {
    Binary,
    Ascii,
}

impl SnapshotMode {
    pub fn extension(self) -> &'static str {
        match self {
            SnapshotMode::Binary => "bin",
            SnapshotMode::Ascii => "txt",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotHeader {
    pub version: u32,
    pub mesh: MeshSpec,
    pub quantities: Vec<Quantity>,
    pub step: u64,
    pub time: f64,
    pub velocity_scale: f64,
    pub pressure_ref: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotFile {
    pub header: SnapshotHeader,
    pub state: State,
}

impl SnapshotFile {
    pub fn new(mesh: &MeshSpec, state: State, step: u64, time: f64, velocity_scale: f64) -> Self {
        SnapshotFile {
            header: SnapshotHeader {
                version: SNAPSHOT_VERSION,
                mesh: mesh.clone(),
                quantities: Quantity::ALL.to_vec(),
                step,
                time,
                velocity_scale,
                pressure_ref: 0.0,
            },
            state,
        }
    }
}

fn tag_code(t: BoundaryTag) -> u8 {
    BoundaryTag::ALL.iter().position(|x| *x == t).unwrap() as u8
}

fn tag_from(c: u8) -> Result<BoundaryTag> {
    BoundaryTag::ALL
        .get(c as usize)
        .copied()
        .ok_or_else(|| Error::Format(format!("unknown boundary tag code {c}")))
}

fn quantity_from(c: u8) -> Result<Quantity> {
    Quantity::ALL
        .get(c as usize)
        .copied()
        .ok_or_else(|| Error::Format(format!("unknown quantity code {c}")))
}

pub fn encode_snapshot(s: &SnapshotFile) -> Vec<u8> {
    let h = &s.header;
    let n = s.state.n_cells();
    let mut b = Vec::with_capacity(128 + h.quantities.len() * n * 8);
    b.extend_from_slice(SNAPSHOT_MAGIC);
    b.extend_from_slice(&h.version.to_le_bytes());
    b.extend_from_slice(&(h.mesh.nx as u32).to_le_bytes());
    b.extend_from_slice(&(h.mesh.ny as u32).to_le_bytes());
    b.extend_from_slice(&h.mesh.lx.to_le_bytes());
    b.extend_from_slice(&h.mesh.ly.to_le_bytes());
    match h.mesh.obstacle {
        Some(r) => {
            b.push(1);
            for v in [r.x0, r.x1, r.y0, r.y1] {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        None => b.push(0),
    }
    let sd = h.mesh.sides;
    for t in [sd.left, sd.right, sd.bottom, sd.top] {
        b.push(tag_code(t));
    }
    b.extend_from_slice(&h.step.to_le_bytes());
    b.extend_from_slice(&h.time.to_le_bytes());
    b.extend_from_slice(&h.velocity_scale.to_le_bytes());
    b.extend_from_slice(&h.pressure_ref.to_le_bytes());
    b.extend_from_slice(&(h.quantities.len() as u32).to_le_bytes());
    for q in &h.quantities {
        b.push(*q as u8);
    }
    b.extend_from_slice(&(n as u64).to_le_bytes());
    for q in &h.quantities {
        for v in &s.state.field(*q).values {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    b
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("snapshot file truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Fills absent quantities so the result is a full state; missing k and omega
/// read as the laminar placeholders 0 and 1.
fn assemble_state(n: usize, fields: Vec<(Quantity, Vec<f64>)>) -> State {
    let mut st = State::uniform(n, 0.0, 0.0, 0.0, 0.0, 1.0);
    for (q, v) in fields {
        *st.field_mut(q) = CellField::new(q, v);
    }
    st
}

pub fn decode_snapshot(buf: &[u8]) -> Result<SnapshotFile> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != SNAPSHOT_MAGIC {
        return Err(Error::Format("not a binary snapshot file".into()));
    }
    let version = r.u32()?;
    if version != SNAPSHOT_VERSION {
        return Err(Error::Format(format!(
            "snapshot version {version}, expected {SNAPSHOT_VERSION}"
        )));
    }
    let nx = r.u32()? as usize;
    let ny = r.u32()? as usize;
    let lx = r.f64()?;
    let ly = r.f64()?;
    let obstacle = match r.u8()? {
        0 => None,
        1 => Some(Rect {
            x0: r.f64()?,
            x1: r.f64()?,
            y0: r.f64()?,
            y1: r.f64()?,
        }),
        f => return Err(Error::Format(format!("bad obstacle flag {f}"))),
    };
    let sides = SideTags {
        left: tag_from(r.u8()?)?,
        right: tag_from(r.u8()?)?,
        bottom: tag_from(r.u8()?)?,
        top: tag_from(r.u8()?)?,
    };
    let step = r.u64()?;
    let time = r.f64()?;
    let velocity_scale = r.f64()?;
    let pressure_ref = r.f64()?;
    let nq = r.u32()? as usize;
    let quantities = (0..nq)
        .map(|_| quantity_from(r.u8()?))
        .collect::<Result<Vec<_>>>()?;
    let n = r.u64()? as usize;
    if buf.len() - r.pos != nq * n * 8 {
        return Err(Error::Format(format!(
            "expected {} value bytes, found {}",
            nq * n * 8,
            buf.len() - r.pos
        )));
    }
    let mut fields = Vec::with_capacity(nq);
    for q in &quantities {
        let v = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        fields.push((*q, v));
    }
    Ok(SnapshotFile {
        header: SnapshotHeader {
            version,
            mesh: MeshSpec {
                nx,
                ny,
                lx,
                ly,
                obstacle,
                sides,
            },
            quantities,
            step,
            time,
            velocity_scale,
            pressure_ref,
        },
        state: assemble_state(n, fields),
    })
}

fn tag_name(t: BoundaryTag) -> &'static str {
    match t {
        BoundaryTag::Inlet => "inlet",
        BoundaryTag::Outlet => "outlet",
        BoundaryTag::Wall => "wall",
        BoundaryTag::Obstacle => "obstacle",
    }
}

pub fn encode_snapshot_ascii(s: &SnapshotFile) -> String {
    use std::fmt::Write as _;
    let h = &s.header;
    let mut o = String::new();
    let _ = writeln!(o, "{ASCII_MAGIC} {}", h.version);
    let _ = writeln!(
        o,
        "mesh {} {} {:?} {:?}",
        h.mesh.nx, h.mesh.ny, h.mesh.lx, h.mesh.ly
    );
    match h.mesh.obstacle {
        Some(r) => {
            let _ = writeln!(o, "obstacle {:?} {:?} {:?} {:?}", r.x0, r.x1, r.y0, r.y1);
        }
        None => o.push_str("obstacle none\n"),
    }
    let sd = h.mesh.sides;
    let _ = writeln!(
        o,
        "sides {} {} {} {}",
        tag_name(sd.left),
        tag_name(sd.right),
        tag_name(sd.bottom),
        tag_name(sd.top)
    );
    let _ = writeln!(o, "step {}", h.step);
    let _ = writeln!(o, "time {:?}", h.time);
    let _ = writeln!(o, "velocity_scale {:?}", h.velocity_scale);
    let _ = writeln!(o, "pressure_ref {:?}", h.pressure_ref);
    let _ = writeln!(o, "cells {}", s.state.n_cells());
    for q in &h.quantities {
        o.push_str(q.name());
        for v in &s.state.field(*q).values {
            let _ = write!(o, " {v:?}");
        }
        o.push('\n');
    }
    o
}

pub fn decode_snapshot_ascii(text: &str) -> Result<SnapshotFile> {
    let bad = |m: &str| Error::Format(format!("ASCII snapshot: {m}"));
    let num = |s: Option<&str>| -> Result<f64> {
        s.ok_or_else(|| bad("missing number"))?
            .parse::<f64>()
            .map_err(|e| bad(&e.to_string()))
    };
    let int = |s: Option<&str>| -> Result<u64> {
        s.ok_or_else(|| bad("missing integer"))?
            .parse::<u64>()
            .map_err(|e| bad(&e.to_string()))
    };
    let mut lines = text.lines();
    let mut next = |key: &str| -> Result<Vec<&str>> {
        let l = lines.next().ok_or_else(|| bad("truncated"))?;
        let mut it = l.split_whitespace();
        if it.next() != Some(key) {
            return Err(bad(&format!("expected `{key}`")));
        }
        Ok(it.collect())
    };
    let v = next(ASCII_MAGIC)?;
    let version = int(v.first().copied())? as u32;
    if version != SNAPSHOT_VERSION {
        return Err(bad(&format!("version {version}")));
    }
    let m = next("mesh")?;
    let (nx, ny) = (
        int(m.first().copied())? as usize,
        int(m.get(1).copied())? as usize,
    );
    let (lx, ly) = (num(m.get(2).copied())?, num(m.get(3).copied())?);
    let ob = next("obstacle")?;
    let obstacle = if ob.first() == Some(&"none") {
        None
    } else {
        Some(Rect {
            x0: num(ob.first().copied())?,
            x1: num(ob.get(1).copied())?,
            y0: num(ob.get(2).copied())?,
            y1: num(ob.get(3).copied())?,
        })
    };
    let sd = next("sides")?;
    let tag = |s: Option<&&str>| -> Result<BoundaryTag> {
        let s = s.ok_or_else(|| bad("missing side tag"))?;
        BoundaryTag::ALL
            .into_iter()
            .find(|t| tag_name(*t) == *s)
            .ok_or_else(|| bad(&format!("unknown tag {s}")))
    };
    let sides = SideTags {
        left: tag(sd.first())?,
        right: tag(sd.get(1))?,
        bottom: tag(sd.get(2))?,
        top: tag(sd.get(3))?,
    };
    let step = int(next("step")?.first().copied())?;
    let time = num(next("time")?.first().copied())?;
    let velocity_scale = num(next("velocity_scale")?.first().copied())?;
    let pressure_ref = num(next("pressure_ref")?.first().copied())?;
    let n = int(next("cells")?.first().copied())? as usize;
    let mut quantities = Vec::new();
    let mut fields = Vec::new();
    for l in lines {
        if l.trim().is_empty() {
            continue;
        }
        let mut it = l.split_whitespace();
        let name = it.next().unwrap();
        let q =
            Quantity::from_name(name).ok_or_else(|| bad(&format!("unknown quantity {name}")))?;
        let vals = it.map(|s| num(Some(s))).collect::<Result<Vec<_>>>()?;
        if vals.len() != n {
            return Err(bad(&format!(
                "{name} has {} values, expected {n}",
                vals.len()
            )));
        }
        quantities.push(q);
        fields.push((q, vals));
    }
    Ok(SnapshotFile {
        header: SnapshotHeader {
            version,
            mesh: MeshSpec {
                nx,
                ny,
                lx,
                ly,
                obstacle,
                sides,
            },
            quantities,
            step,
            time,
            velocity_scale,
            pressure_ref,
        },
        state: assemble_state(n, fields),
    })
}

pub fn write_snapshot(path: &Path, s: &SnapshotFile, mode: SnapshotMode) -> Result<()> {
    let bytes = match mode {
        SnapshotMode::Binary => encode_snapshot(s),
        SnapshotMode::Ascii => encode_snapshot_ascii(s).into_bytes(),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads either mode, telling them apart by the leading bytes.
pub fn read_snapshot(path: &Path) -> Result<SnapshotFile> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.starts_with(SNAPSHOT_MAGIC) {
        decode_snapshot(&buf)
    } else if buf.starts_with(ASCII_MAGIC.as_bytes()) {
        let text = std::str::from_utf8(&buf).map_err(|e| Error::Format(e.to_string()))?;
        decode_snapshot_ascii(text)
    } else {
        Err(Error::Format(format!(
            "{}: not a snapshot file",
            path.display()
        )))
    }
}

pub fn snapshot_name(step: usize, mode: SnapshotMode) -> String {
    format!("snap_{step:06}.{}", mode.extension())
}

/// Index of a generated rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub case_id: String,
    pub mesh: MeshSpec,
    pub dt: f64,
    pub scheme: String,
    pub seed: u64,
    /// Steps run before snapshot 0 and not written.
    pub spinup: usize,
    /// Leading snapshots to drop when building datasets.
    pub discard: usize,
    pub mode: SnapshotMode,
    pub files: Vec<String>,
    /// Set when the rollout stopped early.
    #[serde(default)]
    pub failure: Option<String>,
}

pub const MANIFEST_NAME: &str = "manifest.toml";

impl Manifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_NAME);
        let text = toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_NAME);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn paths(&self, dir: &Path) -> Vec<PathBuf> {
        self.files.iter().map(|f| dir.join(f)).collect()
    }
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// CSV file with a fixed header; rows are flushed as they arrive so partial
/// runs keep their output.
pub struct CsvOut {
    path: PathBuf,
    w: csv::Writer<fs::File>,
}

impl CsvOut {
    pub fn create(path: &Path, header: &[&str]) -> Result<CsvOut> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                create_dir(dir)?;
            }
        }
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(header).map_err(|e| csv_err(path, e))?;
        Ok(CsvOut {
            path: path.to_path_buf(),
            w,
        })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        self.w
            .write_record(fields)
            .map_err(|e| csv_err(&self.path, e))?;
        self.w.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            create_dir(dir)?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
