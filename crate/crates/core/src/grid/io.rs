//! Two-file CSV grid format:
//! `buses.csv` (`id,generation,load`) and `lines.csv`
//! (`id,from_bus,to_bus,susceptance,capacity`), header rows required,
//! `#` comment lines allowed.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use super::{Bus, Line, PowerGrid};
use crate::error::{Error, Result};

pub const BUSES_FILE: &str = "buses.csv";
pub const LINES_FILE: &str = "lines.csv";

const BUS_HEADER: [&str; 3] = ["id", "generation", "load"];
const LINE_HEADER: [&str; 5] = ["id", "from_bus", "to_bus", "susceptance", "capacity"];

fn read_rows(path: &Path, header: &[&str]) -> Result<Vec<(usize, csv::StringRecord)>> {
    let file = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .has_headers(true)
        .from_reader(data.as_slice());
    let found = reader
        .headers()
        .map_err(|e| Error::Parse { file: file.clone(), row: 1, msg: e.to_string() })?
        .clone();
    if found.iter().collect::<Vec<_>>() != header {
        return Err(Error::Parse {
            file,
            row: 1,
            msg: format!("expected header `{}`", header.join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let row = e.position().map(|p| p.line() as usize).unwrap_or(0);
            Error::Parse { file: file.clone(), row, msg: e.to_string() }
        })?;
        let row = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != header.len() {
            return Err(Error::Parse { file, row, msg: format!("expected {} fields, got {}", header.len(), rec.len()) });
        }
        rows.push((row, rec));
    }
    Ok(rows)
}

fn field<T: std::str::FromStr>(file: &str, row: usize, rec: &csv::StringRecord, i: usize, name: &str) -> Result<T> {
    rec[i].parse().map_err(|_| Error::Parse {
        file: file.into(),
        row,
        msg: format!("invalid {name} `{}`", &rec[i]),
    })
}

/// Reads `buses.csv` and `lines.csv` from `dir`. The grid is named after
/// the directory.
pub fn load_grid(dir: impl AsRef<Path>) -> Result<PowerGrid> {
    let dir = dir.as_ref();
    let name = dir
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_else(|| "grid".into());

    let mut buses = Vec::new();
    let mut bus_ids = HashSet::new();
    for (row, rec) in read_rows(&dir.join(BUSES_FILE), &BUS_HEADER)? {
        let bus = Bus::new(
            field(BUSES_FILE, row, &rec, 0, "id")?,
            field(BUSES_FILE, row, &rec, 1, "generation")?,
            field(BUSES_FILE, row, &rec, 2, "load")?,
        );
        if !bus_ids.insert(bus.id) {
            return Err(Error::Parse { file: BUSES_FILE.into(), row, msg: format!("duplicate bus id {}", bus.id) });
        }
        buses.push(bus);
    }

    let mut lines = Vec::new();
    let mut line_ids = HashSet::new();
    let mut pairs: HashMap<(u32, u32), u32> = HashMap::new();
    for (row, rec) in read_rows(&dir.join(LINES_FILE), &LINE_HEADER)? {
        let line = Line::new(
            field(LINES_FILE, row, &rec, 0, "id")?,
            field(LINES_FILE, row, &rec, 1, "from_bus")?,
            field(LINES_FILE, row, &rec, 2, "to_bus")?,
            field(LINES_FILE, row, &rec, 3, "susceptance")?,
            field(LINES_FILE, row, &rec, 4, "capacity")?,
        );
        let err = |msg: String| Error::Parse { file: LINES_FILE.into(), row, msg };
        if !line_ids.insert(line.id) {
            return Err(err(format!("duplicate line id {}", line.id)));
        }
        for b in [line.from_bus, line.to_bus] {
            if !bus_ids.contains(&b) {
                return Err(err(format!("unknown bus {b}")));
            }
        }
        let key = (line.from_bus.min(line.to_bus), line.from_bus.max(line.to_bus));
        if let Some(other) = pairs.insert(key, line.id) {
            return Err(err(format!("line {} is parallel to line {other}", line.id)));
        }
        lines.push(line);
    }
    if lines.is_empty() {
        return Err(Error::Parse { file: LINES_FILE.into(), row: 1, msg: "grid has no lines".into() });
    }
    PowerGrid::new(name, buses, lines)
}

pub fn save_grid(grid: &PowerGrid, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = String::from("id,generation,load\n");
    for b in grid.buses() {
        out.push_str(&format!("{},{},{}\n", b.id, b.generation, b.load));
    }
    let path = dir.join(BUSES_FILE);
    fs::write(&path, out).map_err(|e| Error::io(&path, e))?;

    let mut out = String::from("id,from_bus,to_bus,susceptance,capacity\n");
    for l in grid.lines() {
        out.push_str(&format!("{},{},{},{},{}\n", l.id, l.from_bus, l.to_bus, l.susceptance, l.capacity));
    }
    let path = dir.join(LINES_FILE);
    fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
    Ok(())
}
