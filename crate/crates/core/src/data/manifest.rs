//! Dataset manifests: one CSV row per record.
//!
//! Header: `id,path,place_id,gt_kind,gt_a,gt_b,role`. `gt_kind` is one of
//! `latlon` (degrees), `planar` (meters) or `frame` (with `gt_b` empty).
//! Paths are relative to the manifest's directory unless absolute.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::retrieval::Location;

pub const HEADER: [&str; 7] = ["id", "path", "place_id", "gt_kind", "gt_a", "gt_b", "role"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Train,
    Query,
    Reference,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Train => "train",
            Role::Query => "query",
            Role::Reference => "reference",
        })
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Role::Train),
            "query" => Ok(Role::Query),
            "reference" => Ok(Role::Reference),
            other => Err(format!("unknown role `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    /// As written in the manifest.
    pub path: PathBuf,
    pub place_id: u64,
    pub location: Location,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory that relative paths are resolved against.
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    /// Ground-truth kind shared by every record, if any.
    pub fn gt_kind(&self) -> Option<&'static str> {
        self.records.first().map(|r| r.location.kind())
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.role == role)
    }

    pub fn get(&self, id: &str) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Fails on the first record whose payload is missing.
    pub fn check_paths(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            let p = self.resolve(r);
            if !p.is_file() {
                return Err(Error::manifest(
                    Some(i + 2),
                    format!("record `{}`: cannot find {}", r.id, p.display()),
                ));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::manifest(None, e.to_string());
        w.write_record(HEADER).map_err(io)?;
        for r in &self.records {
            let (a, b) = match r.location {
                Location::Geodetic { lat, lon } => (lat.to_string(), lon.to_string()),
                Location::Planar { x, y } => (x.to_string(), y.to_string()),
                Location::Frame(f) => (f.to_string(), String::new()),
            };
            let path = r.path.to_str().ok_or_else(|| Error::manifest(None, format!("non-UTF-8 path for `{}`", r.id)))?;
            w.write_record([
                r.id.as_str(),
                path,
                &r.place_id.to_string(),
                r.location.kind(),
                &a,
                &b,
                &r.role.to_string(),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::manifest(None, e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output of UTF-8 fields"))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, self.to_csv()?.as_bytes())
    }
}

fn parse_num<T: FromStr>(field: &str, what: &str, line: usize) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::manifest(Some(line), format!("invalid {what} `{field}`")))
}

fn parse_location(kind: &str, a: &str, b: &str, line: usize) -> Result<Location> {
    let finite = |v: f64, what: &str| {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::manifest(Some(line), format!("{what} must be finite")))
        }
    };
    match kind {
        "latlon" => {
            let lat = finite(parse_num(a, "latitude", line)?, "latitude")?;
            let lon = finite(parse_num(b, "longitude", line)?, "longitude")?;
            if lat.abs() > 90.0 || lon.abs() > 180.0 {
                return Err(Error::manifest(Some(line), format!("coordinates ({lat}, {lon}) out of range")));
            }
            Ok(Location::Geodetic { lat, lon })
        }
        "planar" => Ok(Location::Planar {
            x: finite(parse_num(a, "x", line)?, "x")?,
            y: finite(parse_num(b, "y", line)?, "y")?,
        }),
        "frame" => {
            if !b.trim().is_empty() {
                return Err(Error::manifest(Some(line), "gt_b must be empty for frame records"));
            }
            Ok(Location::Frame(parse_num(a, "frame index", line)?))
        }
        other => Err(Error::manifest(Some(line), format!("unknown gt_kind `{other}`"))),
    }
}

/// Parses manifest text. Paths are not checked.
pub fn parse_manifest(text: &str, root: &Path) -> Result<Manifest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut rows = reader.records();
    let header = rows
        .next()
        .ok_or_else(|| Error::manifest(Some(1), "empty manifest"))?
        .map_err(|e| Error::manifest(Some(1), e.to_string()))?;
    if header.iter().map(str::trim).ne(HEADER) {
        return Err(Error::manifest(
            Some(1),
            format!("header must be `{}`", HEADER.join(",")),
        ));
    }
    let mut records: Vec<ManifestRecord> = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for row in rows {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize);
            Error::manifest(line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        if row.len() != HEADER.len() {
            return Err(Error::manifest(
                Some(line),
                format!("expected {} fields, found {}", HEADER.len(), row.len()),
            ));
        }
        let id = row[0].trim().to_string();
        if id.is_empty() {
            return Err(Error::manifest(Some(line), "empty id"));
        }
        if let Some(first) = seen.insert(id.clone(), line) {
            return Err(Error::manifest(
                Some(line),
                format!("duplicate id `{id}` on lines {first} and {line}"),
            ));
        }
        let path = row[1].trim();
        if path.is_empty() {
            return Err(Error::manifest(Some(line), format!("record `{id}` has an empty path")));
        }
        let location = parse_location(row[3].trim(), &row[4], &row[5], line)?;
        if let Some(first) = records.first() {
            if first.location.kind() != location.kind() {
                return Err(Error::manifest(
                    Some(line),
                    format!(
                        "mixed ground-truth kinds: `{}` after `{}`",
                        location.kind(),
                        first.location.kind()
                    ),
                ));
            }
        }
        records.push(ManifestRecord {
            id,
            path: PathBuf::from(path),
            place_id: parse_num(&row[2], "place_id", line)?,
            location,
            role: row[6].trim().parse().map_err(|e: String| Error::manifest(Some(line), e))?,
        });
    }
    Ok(Manifest {
        root: root.to_path_buf(),
        records,
    })
}

/// Reads, validates and checks that every payload exists.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = parse_manifest(&text, &root)?;
    manifest.check_paths()?;
    Ok(manifest)
}
