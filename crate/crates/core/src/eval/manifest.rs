//! Dataset manifests: one CSV row per face image with its protocol role and
//! eye annotations.

use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{align_and_crop, FaceSample, GeometryConfig, RawImage};

pub const MANIFEST_HEADER: [&str; 8] = [
    "path",
    "subject_id",
    "session",
    "role",
    "lx",
    "ly",
    "rx",
    "ry",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    ClientTrain,
    ClientEval,
    ClientTest,
    ImpostorEval,
    ImpostorTest,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::ClientTrain,
        Role::ClientEval,
        Role::ClientTest,
        Role::ImpostorEval,
        Role::ImpostorTest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::ClientTrain => "client_train",
            Role::ClientEval => "client_eval",
            Role::ClientTest => "client_test",
            Role::ImpostorEval => "impostor_eval",
            Role::ImpostorTest => "impostor_test",
        }
    }

    pub fn is_client(self) -> bool {
        matches!(
            self,
            Role::ClientTrain | Role::ClientEval | Role::ClientTest
        )
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Manifest(format!("unknown role label {s:?}")))
    }
}

/// One manifest row. Eye coordinates are `(x, y)` = `(column, row)` in
/// source-image pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub subject_id: String,
    pub session: u32,
    pub role: Role,
    pub lx: f64,
    pub ly: f64,
    pub rx: f64,
    pub ry: f64,
}

impl ManifestRecord {
    /// Eye positions as `(row, col)`.
    pub fn eyes(&self) -> ((f64, f64), (f64, f64)) {
        ((self.ly, self.lx), (self.ry, self.rx))
    }
}

/// Parsed manifest. Relative image paths resolve against `root`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

#[derive(Deserialize)]
struct RawRecord {
    path: String,
    subject_id: String,
    session: u32,
    role: String,
    lx: f64,
    ly: f64,
    rx: f64,
    ry: f64,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<ManifestRecord>) -> Self {
        Self {
            root: root.into(),
            records,
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_reader(file, root).map_err(|e| match e {
            Error::Manifest(msg) => Error::Manifest(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    pub fn from_reader(reader: impl Read, root: impl Into<PathBuf>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| Error::Manifest(e.to_string()))?
            .clone();
        if header.iter().ne(MANIFEST_HEADER) {
            return Err(Error::Manifest(format!(
                "header must be `{}`, found `{}`",
                MANIFEST_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut records = vec![];
        for (i, row) in rdr.deserialize::<RawRecord>().enumerate() {
            let line = i + 2;
            let raw = row.map_err(|e| Error::Manifest(format!("line {line}: {e}")))?;
            let role = raw
                .role
                .parse::<Role>()
                .map_err(|e| Error::Manifest(format!("line {line}: {e}")))?;
            if raw.subject_id.is_empty() {
                return Err(Error::Manifest(format!("line {line}: empty subject_id")));
            }
            if [raw.lx, raw.ly, raw.rx, raw.ry]
                .iter()
                .any(|v| !v.is_finite())
            {
                return Err(Error::Manifest(format!(
                    "line {line}: non-finite eye coordinate"
                )));
            }
            records.push(ManifestRecord {
                path: PathBuf::from(raw.path),
                subject_id: raw.subject_id,
                session: raw.session,
                role,
                lx: raw.lx,
                ly: raw.ly,
                rx: raw.rx,
                ry: raw.ry,
            });
        }
        Ok(Self {
            root: root.into(),
            records,
        })
    }

    pub fn to_writer(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let err = |e: csv::Error| Error::Manifest(e.to_string());
        w.write_record(MANIFEST_HEADER).map_err(err)?;
        for r in &self.records {
            w.write_record([
                r.path.to_string_lossy().as_ref(),
                &r.subject_id,
                &r.session.to_string(),
                r.role.as_str(),
                &r.lx.to_string(),
                &r.ly.to_string(),
                &r.rx.to_string(),
                &r.ry.to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::Manifest(e.to_string()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = vec![];
        self.to_writer(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    /// Copy without the rows of the given roles.
    pub fn without_roles(&self, roles: &[Role]) -> Self {
        Self {
            root: self.root.clone(),
            records: self
                .records
                .iter()
                .filter(|r| !roles.contains(&r.role))
                .cloned()
                .collect(),
        }
    }

    /// Loads, aligns and crops one row.
    pub fn load_sample(
        &self,
        record: &ManifestRecord,
        geometry: &GeometryConfig,
    ) -> Result<FaceSample> {
        let img = RawImage::load(self.resolve(record))?;
        let (left, right) = record.eyes();
        let aligned = align_and_crop(&img, left, right, geometry)?;
        if aligned.out_of_bounds > 0 {
            log::debug!(
                "{}: {} crop pixels outside the source image",
                record.path.display(),
                aligned.out_of_bounds
            );
        }
        Ok(aligned
            .sample
            .with_identity(record.subject_id.clone(), record.session))
    }

    /// Loads the rows at `indices`, in that order.
    pub fn load_samples(
        &self,
        indices: &[usize],
        geometry: &GeometryConfig,
    ) -> Result<Vec<FaceSample>> {
        indices
            .par_iter()
            .map(|&i| self.load_sample(&self.records[i], geometry))
            .collect()
    }
}
