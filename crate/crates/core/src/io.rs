//! On-disk formats: VOL1 volumes, the versioned cohort CSV and canonical JSON.
//!
//! VOL1 layout (little-endian): magic `VOL1`; u8 ndim; ndim × u32 extents;
//! ndim × f64 spacing in mm; u8 scalar code (0 = f32, 1 = f64, 2 = u16);
//! row-major payload.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::{ArrayD, IxDyn};
use serde::Serialize;

use crate::cohort::{Sex, SubjectRecord, VISITS};
use crate::error::{contract, Error, Result};
use crate::imaging::{Protocol, Volume};

const VOL_MAGIC: &[u8; 4] = b"VOL1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarType {
    F32,
    F64,
    U16,
}

impl ScalarType {
    fn code(self) -> u8 {
        match self {
            ScalarType::F32 => 0,
            ScalarType::F64 => 1,
            ScalarType::U16 => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(ScalarType::F32),
            1 => Ok(ScalarType::F64),
            2 => Ok(ScalarType::U16),
            _ => Err(Error::Format(format!("unknown VOL1 scalar code {c}"))),
        }
    }
}

/// Raw VOL1 contents; `ndim` is unrestricted (4D multi-echo stacks included).
#[derive(Debug, Clone, PartialEq)]
pub struct RawVolume {
    pub data: ArrayD<f64>,
    pub spacing: Vec<f64>,
    pub scalar: ScalarType,
}

pub fn write_vol1<W: Write>(mut w: W, data: &ArrayD<f64>, spacing: &[f64], scalar: ScalarType) -> Result<()> {
    if spacing.len() != data.ndim() || data.ndim() > u8::MAX as usize {
        return Err(contract(format!(
            "{} spacing values for a {}-D array",
            spacing.len(),
            data.ndim()
        )));
    }
    if scalar == ScalarType::U16 && data.iter().any(|&v| v.fract() != 0.0 || !(0.0..=65535.0).contains(&v)) {
        return Err(contract("u16 payload needs integers in 0..=65535"));
    }
    w.write_all(VOL_MAGIC)?;
    w.write_all(&[data.ndim() as u8])?;
    for &e in data.shape() {
        let e = u32::try_from(e).map_err(|_| contract("extent exceeds u32"))?;
        w.write_all(&e.to_le_bytes())?;
    }
    for s in spacing {
        w.write_all(&s.to_le_bytes())?;
    }
    w.write_all(&[scalar.code()])?;
    let mut buf = Vec::with_capacity(data.len() * 8);
    for &v in data.as_standard_layout().iter() {
        match scalar {
            ScalarType::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
            ScalarType::F64 => buf.extend_from_slice(&v.to_le_bytes()),
            ScalarType::U16 => buf.extend_from_slice(&(v as u16).to_le_bytes()),
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_vol1<R: Read>(mut r: R) -> Result<RawVolume> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != VOL_MAGIC {
        return Err(Error::Format("not a VOL1 file".into()));
    }
    let mut b1 = [0u8; 1];
    r.read_exact(&mut b1)?;
    let nd = b1[0] as usize;
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    let mut shape = Vec::with_capacity(nd);
    for _ in 0..nd {
        r.read_exact(&mut b4)?;
        shape.push(u32::from_le_bytes(b4) as usize);
    }
    let mut spacing = Vec::with_capacity(nd);
    for _ in 0..nd {
        r.read_exact(&mut b8)?;
        spacing.push(f64::from_le_bytes(b8));
    }
    r.read_exact(&mut b1)?;
    let scalar = ScalarType::from_code(b1[0])?;
    let n: usize = shape.iter().product();
    let width = match scalar {
        ScalarType::F32 => 4,
        ScalarType::F64 => 8,
        ScalarType::U16 => 2,
    };
    let mut payload = vec![0u8; n * width];
    r.read_exact(&mut payload)?;
    let values: Vec<f64> = payload
        .chunks_exact(width)
        .map(|c| match scalar {
            ScalarType::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
            ScalarType::F64 => f64::from_le_bytes(c.try_into().unwrap()),
            ScalarType::U16 => u16::from_le_bytes(c.try_into().unwrap()) as f64,
        })
        .collect();
    let data = ArrayD::from_shape_vec(IxDyn(&shape), values).map_err(|e| Error::Format(e.to_string()))?;
    Ok(RawVolume { data, spacing, scalar })
}

/// Writes a 2D/3D volume; integer-valued volumes of at most 16 bits go out
/// as u16, everything else as f64.
pub fn write_volume<W: Write>(w: W, v: &Volume) -> Result<()> {
    let integral = v.data().iter().all(|x| x.fract() == 0.0 && (0.0..=65535.0).contains(x));
    let scalar = if v.dtype_bits() <= 16 && integral { ScalarType::U16 } else { ScalarType::F64 };
    write_vol1(w, v.data(), v.spacing(), scalar)
}

/// Reads a 2D/3D volume; `dtype_bits` overrides the bit depth implied by
/// the scalar code (u16 → 16, float → 64).
pub fn read_volume<R: Read>(r: R, dtype_bits: Option<u32>) -> Result<Volume> {
    let raw = read_vol1(r)?;
    let bits = dtype_bits.unwrap_or(match raw.scalar {
        ScalarType::U16 => 16,
        _ => 64,
    });
    Volume::new(raw.data, raw.spacing, bits)
}

pub fn save_volume(path: &std::path::Path, v: &Volume) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_volume(std::io::BufWriter::new(f), v)
}

pub fn load_volume(path: &std::path::Path, dtype_bits: Option<u32>) -> Result<Volume> {
    read_volume(std::io::BufReader::new(std::fs::File::open(path)?), dtype_bits)
}

pub const COHORT_VERSION_LINE: &str = "#cohort-v1";

fn cohort_header() -> Vec<String> {
    let mut h: Vec<String> = ["id", "site", "age", "sex", "bmi", "womac_total", "prior_injury", "prior_surgery"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend(VISITS.iter().map(|m| format!("klg_m{m}")));
    h.extend(Protocol::ALL.iter().map(|p| format!("img_{}", p.tag())));
    h
}

/// Cohort CSV: a `#cohort-v1` line, a fixed header, one row per subject.
/// Missing visits and image references are empty cells.
pub fn write_cohort_csv<W: Write>(mut w: W, records: &[SubjectRecord]) -> Result<()> {
    writeln!(w, "{COHORT_VERSION_LINE}")?;
    let mut cw = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    cw.write_record(cohort_header())?;
    for r in records {
        let mut row = vec![
            r.id.clone(),
            r.site.clone(),
            format!("{}", r.age),
            r.sex.to_string(),
            format!("{}", r.bmi),
            format!("{}", r.womac_total),
            u8::from(r.prior_injury).to_string(),
            u8::from(r.prior_surgery).to_string(),
        ];
        row.extend(VISITS.iter().map(|m| r.klg_by_visit.get(m).map(|g| g.to_string()).unwrap_or_default()));
        row.extend(Protocol::ALL.iter().map(|p| r.image_refs.get(p).cloned().unwrap_or_default()));
        cw.write_record(&row)?;
    }
    cw.flush()?;
    Ok(())
}

pub fn read_cohort_csv<R: Read>(r: R) -> Result<Vec<SubjectRecord>> {
    let mut text = String::new();
    std::io::BufReader::new(r).read_to_string(&mut text)?;
    let body = text
        .strip_prefix(COHORT_VERSION_LINE)
        .and_then(|rest| rest.strip_prefix('\n'))
        .ok_or_else(|| Error::Format(format!("cohort CSV must start with {COHORT_VERSION_LINE}")))?;
    let mut cr = csv::Reader::from_reader(body.as_bytes());
    let header: Vec<String> = cr.headers()?.iter().map(str::to_string).collect();
    if header != cohort_header() {
        return Err(Error::Format("unexpected cohort CSV header".into()));
    }
    let flag = |s: &str, what: &str, id: &str| -> Result<bool> {
        match s {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(Error::Format(format!("{id}: {what} must be 0 or 1"))),
        }
    };
    let num = |s: &str, what: &str, id: &str| -> Result<f64> {
        s.parse::<f64>().map_err(|_| Error::Format(format!("{id}: bad {what} {s:?}")))
    };
    let mut out = Vec::new();
    for row in cr.records() {
        let row = row?;
        let id = row[0].to_string();
        let mut klg = BTreeMap::new();
        for (k, m) in VISITS.iter().enumerate() {
            let cell = &row[8 + k];
            if !cell.is_empty() {
                let g = cell
                    .parse::<u8>()
                    .map_err(|_| Error::Format(format!("{id}: bad KLG {cell:?} at month {m}")))?;
                klg.insert(*m, g);
            }
        }
        let mut refs = BTreeMap::new();
        for (k, p) in Protocol::ALL.iter().enumerate() {
            let cell = &row[8 + VISITS.len() + k];
            if !cell.is_empty() {
                refs.insert(*p, cell.to_string());
            }
        }
        let rec = SubjectRecord {
            site: row[1].to_string(),
            age: num(&row[2], "age", &id)?,
            sex: row[3].parse::<Sex>()?,
            bmi: num(&row[4], "bmi", &id)?,
            womac_total: num(&row[5], "womac_total", &id)?,
            prior_injury: flag(&row[6], "prior_injury", &id)?,
            prior_surgery: flag(&row[7], "prior_surgery", &id)?,
            klg_by_visit: klg,
            image_refs: refs,
            id,
        };
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

/// Pretty JSON with object keys sorted at every level, newline-terminated.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json::Value keeps maps in a BTreeMap unless preserve_order is on.
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}
