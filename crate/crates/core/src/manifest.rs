//! Cohort manifests and the subgroup filter language.
//!
//! A filter is a conjunction of clauses joined by `and`. Each clause is a comparison
//! (`bmi>=18.5`, `copd==true`, `sex!=F`) or a set test (`cac in (moderate,severe)`).
//! A clause on a field that is empty for a row is false.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 6] = ["scan_id", "path", "sex", "bmi", "copd", "cac"];

/// Coronary artery calcification grade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Cac {
    None,
    Mild,
    Moderate,
    Severe,
}

impl FromStr for Cac {
    type Err = Error;
    fn from_str(s: &str) -> Result<Cac> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Cac::None),
            "mild" => Ok(Cac::Mild),
            "moderate" => Ok(Cac::Moderate),
            "severe" => Ok(Cac::Severe),
            _ => Err(Error::Parse(format!("unknown CAC grade {s:?}"))),
        }
    }
}

impl fmt::Display for Cac {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Cac::None => "none",
            Cac::Mild => "mild",
            Cac::Moderate => "moderate",
            Cac::Severe => "severe",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub scan_id: String,
    pub path: PathBuf,
    pub sex: Option<String>,
    pub bmi: Option<f64>,
    pub copd: Option<bool>,
    pub cac: Option<Cac>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

fn parse_bool(s: &str) -> Result<bool> {
    match s.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Parse(format!("expected a boolean, got {s:?}"))),
    }
}

fn optional<T>(s: &str, f: impl FnOnce(&str) -> Result<T>) -> Result<Option<T>> {
    let s = s.trim();
    if s.is_empty() {
        Ok(None)
    } else {
        f(s).map(Some)
    }
}

impl Manifest {
    /// Parses manifest CSV text. Relative scan paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Manifest> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| Error::Parse(format!("manifest header: {e}")))?;
        if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(Error::Parse(format!(
                "manifest header must be exactly {:?}, got {:?}",
                MANIFEST_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut rows = Vec::new();
        let mut seen = HashSet::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Parse(format!("manifest row {}: {e}", line + 1)))?;
            let at = |e: Error| Error::Parse(format!("manifest row {}: {e}", line + 1));
            let scan_id = rec[0].trim().to_string();
            if scan_id.is_empty() {
                return Err(at(Error::Parse("empty scan_id".into())));
            }
            if !seen.insert(scan_id.clone()) {
                return Err(at(Error::Parse(format!("duplicate scan_id {scan_id:?}"))));
            }
            let path = PathBuf::from(rec[1].trim());
            rows.push(ManifestRow {
                scan_id,
                path: if path.is_absolute() { path } else { base.join(path) },
                sex: optional(&rec[2], |s| Ok(s.to_string())).map_err(at)?,
                bmi: optional(&rec[3], |s| {
                    s.parse::<f64>().map_err(|e| Error::Parse(format!("bmi {s:?}: {e}")))
                })
                .map_err(at)?,
                copd: optional(&rec[4], parse_bool).map_err(at)?,
                cac: optional(&rec[5], Cac::from_str).map_err(at)?,
            });
        }
        Ok(Manifest { rows })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Manifest::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Rows passing `filter`, in manifest order.
    pub fn select(&self, filter: &Filter) -> Vec<&ManifestRow> {
        self.rows.iter().filter(|r| filter.matches(r)).collect()
    }

    /// CSV text with the canonical header.
    pub fn to_csv(&self) -> String {
        let mut out = MANIFEST_HEADER.join(",");
        out.push('\n');
        for r in &self.rows {
            let opt = |v: Option<String>| v.unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.scan_id,
                r.path.display(),
                opt(r.sex.clone()),
                opt(r.bmi.map(|b| b.to_string())),
                opt(r.copd.map(|b| b.to_string())),
                opt(r.cac.map(|c| c.to_string())),
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Field {
    ScanId,
    Sex,
    Bmi,
    Copd,
    Cac,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

#[derive(Debug, Clone, PartialEq)]
enum Value {
    Text(String),
    Number(f64),
    Bool(bool),
    Cac(Cac),
}

#[derive(Debug, Clone, PartialEq)]
enum Clause {
    Compare(Field, Op, Value),
    In(Field, Vec<Value>),
}

/// A parsed subgroup filter. The empty filter selects every row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Filter {
    source: String,
    clauses: Vec<Clause>,
}

impl fmt::Display for Filter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

fn field(name: &str) -> Result<Field> {
    match name {
        "scan_id" => Ok(Field::ScanId),
        "sex" => Ok(Field::Sex),
        "bmi" => Ok(Field::Bmi),
        "copd" => Ok(Field::Copd),
        "cac" => Ok(Field::Cac),
        _ => Err(Error::Parse(format!("unknown filter field {name:?}"))),
    }
}

fn value(f: Field, raw: &str) -> Result<Value> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Err(Error::Parse("missing value in filter".into()));
    }
    match f {
        Field::ScanId | Field::Sex => Ok(Value::Text(raw.to_string())),
        Field::Bmi => raw
            .parse()
            .map(Value::Number)
            .map_err(|_| Error::Parse(format!("bmi value {raw:?} is not a number"))),
        Field::Copd => parse_bool(raw).map(Value::Bool),
        Field::Cac => raw.parse().map(Value::Cac),
    }
}

fn split_and(s: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut rest = s;
    loop {
        let lower = rest.to_ascii_lowercase();
        let hit = lower
            .match_indices("and")
            .find(|&(i, _)| {
                let before = lower[..i].chars().next_back();
                let after = lower[i + 3..].chars().next();
                before.is_some_and(char::is_whitespace) && after.is_some_and(char::is_whitespace)
            })
            .map(|(i, _)| i);
        match hit {
            Some(i) => {
                parts.push(&rest[..i]);
                rest = &rest[i + 3..];
            }
            None => {
                parts.push(rest);
                return parts;
            }
        }
    }
}

impl Filter {
    pub fn parse(src: &str) -> Result<Filter> {
        let source = src.trim().to_string();
        if source.is_empty() {
            return Ok(Filter::default());
        }
        let mut clauses = Vec::new();
        for part in split_and(&source) {
            let part = part.trim();
            let bad = || Error::Parse(format!("cannot parse filter clause {part:?}"));
            if let Some((name, rest)) = part.split_once(|c: char| c.is_whitespace()) {
                let rest = rest.trim_start();
                if let Some(list) = rest.strip_prefix("in").or_else(|| rest.strip_prefix("IN")) {
                    let f = field(name.trim())?;
                    let list = list.trim();
                    let inner = list
                        .strip_prefix('(')
                        .and_then(|l| l.strip_suffix(')'))
                        .ok_or_else(bad)?;
                    let values = inner.split(',').map(|v| value(f, v)).collect::<Result<Vec<_>>>()?;
                    clauses.push(Clause::In(f, values));
                    continue;
                }
            }
            let ops = [("<=", Op::Le), (">=", Op::Ge), ("==", Op::Eq), ("!=", Op::Ne), ("<", Op::Lt), (">", Op::Gt), ("=", Op::Eq)];
            let (i, tok, op) = ops
                .iter()
                .filter_map(|&(t, op)| part.find(t).map(|i| (i, t, op)))
                .min_by_key(|&(i, t, _)| (i, std::cmp::Reverse(t.len())))
                .ok_or_else(bad)?;
            let f = field(part[..i].trim())?;
            let v = value(f, &part[i + tok.len()..])?;
            if matches!((&v, op), (Value::Text(_) | Value::Bool(_), Op::Lt | Op::Le | Op::Gt | Op::Ge)) {
                return Err(Error::Parse(format!("ordering comparison on a non-ordered field in {part:?}")));
            }
            clauses.push(Clause::Compare(f, op, v));
        }
        Ok(Filter { source, clauses })
    }

    pub fn matches(&self, row: &ManifestRow) -> bool {
        self.clauses.iter().all(|c| match c {
            Clause::Compare(f, op, v) => compare(row, *f, v).is_some_and(|o| match op {
                Op::Eq => o == Ordering::Equal,
                Op::Ne => o != Ordering::Equal,
                Op::Lt => o == Ordering::Less,
                Op::Le => o != Ordering::Greater,
                Op::Gt => o == Ordering::Greater,
                Op::Ge => o != Ordering::Less,
            }),
            Clause::In(f, vs) => vs.iter().any(|v| compare(row, *f, v) == Some(Ordering::Equal)),
        })
    }
}

/// Ordering of the row's field against `v`; `None` when the field is empty.
fn compare(row: &ManifestRow, f: Field, v: &Value) -> Option<Ordering> {
    match (f, v) {
        (Field::ScanId, Value::Text(t)) => Some(row.scan_id.as_str().cmp(t.as_str())),
        (Field::Sex, Value::Text(t)) => row.sex.as_ref().map(|s| s.to_ascii_lowercase().cmp(&t.to_ascii_lowercase())),
        (Field::Bmi, Value::Number(x)) => row.bmi.and_then(|b| b.partial_cmp(x)),
        (Field::Copd, Value::Bool(x)) => row.copd.map(|b| b.cmp(x)),
        (Field::Cac, Value::Cac(x)) => row.cac.map(|c| c.cmp(x)),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = "scan_id,path,sex,bmi,copd,cac\n\
        a,a.nii,F,22.0,false,none\n\
        b,/data/b.nii,M,31.5,true,severe\n\
        c,c.nii,,,,\n\
        d,d.nii,M,18.5,false,moderate\n";

    fn manifest() -> Manifest {
        Manifest::parse(TEXT, Path::new("/cohort")).unwrap()
    }

    fn ids(f: &str) -> Vec<String> {
        manifest()
            .select(&Filter::parse(f).unwrap())
            .iter()
            .map(|r| r.scan_id.clone())
            .collect()
    }

    #[test]
    fn parses_rows() {
        let m = manifest();
        assert_eq!(m.rows.len(), 4);
        assert_eq!(m.rows[0].path, PathBuf::from("/cohort/a.nii"));
        assert_eq!(m.rows[1].path, PathBuf::from("/data/b.nii"));
        assert_eq!(m.rows[2].bmi, None);
        assert_eq!(m.rows[3].cac, Some(Cac::Moderate));
        assert_eq!(Manifest::parse(&m.to_csv(), Path::new("/")).unwrap(), m);
    }

    #[test]
    fn rejects_bad_manifests() {
        for text in [
            "scan_id,path,sex,bmi,copd\na,a,F,1,true\n",
            "scan_id,path,sex,bmi,copd,cac\na,a,F,x,true,none\n",
            "scan_id,path,sex,bmi,copd,cac\na,a,F,1,maybe,none\n",
            "scan_id,path,sex,bmi,copd,cac\na,a,F,1,true,huge\n",
            "scan_id,path,sex,bmi,copd,cac\na,a,F,1,true,none\na,b,F,1,true,none\n",
        ] {
            assert!(matches!(Manifest::parse(text, Path::new(".")), Err(Error::Parse(_))), "{text}");
        }
    }

    #[test]
    fn filter_examples() {
        assert_eq!(ids(""), ["a", "b", "c", "d"]);
        assert_eq!(ids("bmi>=18.5 and bmi<=24.9"), ["a", "d"]);
        assert_eq!(ids("copd==true"), ["b"]);
        assert_eq!(ids("cac in (moderate,severe)"), ["b", "d"]);
        assert_eq!(ids("cac >= moderate and sex == m"), ["b", "d"]);
        assert_eq!(ids("copd != true"), ["a", "d"]);
        assert_eq!(ids("scan_id in (c, a)"), ["a", "c"]);
        assert!(ids("bmi > 40").is_empty());
    }

    #[test]
    fn filter_errors() {
        for f in ["weight>3", "bmi>>3", "bmi>=abc", "cac in moderate", "copd<true", "bmi"] {
            assert!(matches!(Filter::parse(f), Err(Error::Parse(_))), "{f}");
        }
    }
}
