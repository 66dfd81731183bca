//! File formats owned by the command line: config overrides, point lists and
//! interval tables.

use std::collections::BTreeMap;
use std::path::Path;

use pns_core::bounds::{Method, PnsInterval};
use pns_core::harness::experiment::PointOutput;
use pns_core::{Error, Result};

/// Sets dotted `key = value` pairs in TOML text. Values parse as TOML and
/// fall back to plain strings.
pub fn apply_overrides(text: &str, sets: &[(String, String)]) -> Result<String> {
    if sets.is_empty() {
        return Ok(text.to_string());
    }
    let mut root: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
        path: String::new(),
        message: e.message().to_string(),
    })?;
    for (key, raw) in sets {
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.clone()));
        let parts: Vec<&str> = key.split('.').collect();
        let (last, parents) = parts.split_last().expect("split yields at least one part");
        let mut table = &mut root;
        for (i, p) in parents.iter().enumerate() {
            let entry = table
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table = entry.as_table_mut().ok_or_else(|| Error::Config {
                path: parts[..=i].join("."),
                message: "not a table".into(),
            })?;
        }
        table.insert(last.to_string(), value);
    }
    toml::to_string(&root).map_err(|e| Error::Config {
        path: String::new(),
        message: e.to_string(),
    })
}

fn format_float(v: f64) -> String {
    format!("{v}")
}

/// Writes a row-major point block with header `z0..`.
pub fn write_points(path: &Path, rows: &[f64], d: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((0..d).map(|j| format!("z{j}")))?;
    for row in rows.chunks_exact(d) {
        w.write_record(row.iter().map(|v| format_float(*v)))?;
    }
    w.flush()?;
    Ok(())
}

fn parse_cell(s: &str, line: usize) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::InvalidInput(format!("row {line}: `{s}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::InvalidInput(format!("row {line}: non-finite value")));
    }
    Ok(v)
}

fn z_columns(header: &csv::StringRecord) -> Vec<usize> {
    header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.len() > 1 && h.starts_with('z') && h[1..].chars().all(|c| c.is_ascii_digit()))
        .map(|(i, _)| i)
        .collect()
}

/// Reads the `z0..` columns of a CSV file as a row-major block.
pub fn read_points(path: &Path) -> Result<(Vec<f64>, usize)> {
    let mut r = csv::Reader::from_path(path)?;
    let cols = z_columns(r.headers()?);
    if cols.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{}: no `z0..` columns",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        for &c in &cols {
            rows.push(parse_cell(&rec[c], line + 1)?);
        }
    }
    Ok((rows, cols.len()))
}

const INTERVAL_COLUMNS: [&str; 9] = [
    "method",
    "lower",
    "upper",
    "crossed",
    "kappa_lower",
    "kappa_upper",
    "base_lower",
    "base_upper",
    "atoms_valid",
];

/// One row per point: `z0..`, then the interval columns.
pub fn intervals_csv(rows: &[f64], d: usize, method: Method, outs: &[PointOutput]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (0..d).map(|j| format!("z{j}")).collect();
    header.extend(INTERVAL_COLUMNS.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for (z, o) in rows.chunks_exact(d).zip(outs) {
        let mut rec: Vec<String> = z.iter().map(|v| format_float(*v)).collect();
        let iv = &o.interval;
        rec.extend([
            method.name().to_string(),
            format_float(iv.lower),
            format_float(iv.upper),
            iv.crossed.to_string(),
            format_float(iv.kappa_lower),
            format_float(iv.kappa_upper),
            format_float(o.base.lower),
            format_float(o.base.upper),
            o.atoms_valid.to_string(),
        ]);
        w.write_record(&rec)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Intervals of one method read back from an interval table.
pub struct IntervalGroup {
    pub method: Method,
    pub rows: Vec<f64>,
    pub intervals: Vec<PnsInterval>,
    pub valid: Vec<bool>,
}

/// Reads an interval table, grouped by method in name order.
pub fn read_intervals(path: &Path, d: usize) -> Result<Vec<IntervalGroup>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let zc = z_columns(&header);
    if zc.len() != d {
        return Err(Error::DimensionMismatch {
            what: "covariate columns",
            expected: d,
            found: zc.len(),
        });
    }
    let col = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| {
            Error::InvalidInput(format!("{}: missing column `{name}`", path.display()))
        })
    };
    let [cm, cl, cu, cc, ckl, cku, _, _, cv] = INTERVAL_COLUMNS.map(col);
    let (cm, cl, cu, cc, ckl, cku, cv) = (cm?, cl?, cu?, cc?, ckl?, cku?, cv?);
    let parse_bool = |s: &str, line: usize| -> Result<bool> {
        s.trim()
            .parse()
            .map_err(|_| Error::InvalidInput(format!("row {line}: `{s}` is not true/false")))
    };
    let mut groups: BTreeMap<Method, IntervalGroup> = BTreeMap::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 1;
        let method = Method::from_name(rec[cm].trim())
            .ok_or_else(|| Error::InvalidInput(format!("row {line}: unknown method `{}`", &rec[cm])))?;
        let g = groups.entry(method).or_insert_with(|| IntervalGroup {
            method,
            rows: Vec::new(),
            intervals: Vec::new(),
            valid: Vec::new(),
        });
        for &c in &zc {
            g.rows.push(parse_cell(&rec[c], line)?);
        }
        g.intervals.push(PnsInterval {
            lower: parse_cell(&rec[cl], line)?,
            upper: parse_cell(&rec[cu], line)?,
            crossed: parse_bool(&rec[cc], line)?,
            method,
            kappa_lower: parse_cell(&rec[ckl], line)?,
            kappa_upper: parse_cell(&rec[cku], line)?,
        });
        g.valid.push(parse_bool(&rec[cv], line)?);
    }
    Ok(groups.into_values().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_set_nested_keys() {
        let text = "a = 1\n[train]\nepochs = 3\n";
        let out = apply_overrides(
            text,
            &[
                ("train.epochs".into(), "7".into()),
                ("name".into(), "hello world".into()),
                ("enn.quantile_level".into(), "0.9".into()),
            ],
        )
        .unwrap();
        let t: toml::Table = out.parse().unwrap();
        assert_eq!(t["train"]["epochs"].as_integer(), Some(7));
        assert_eq!(t["name"].as_str(), Some("hello world"));
        assert_eq!(t["enn"]["quantile_level"].as_float(), Some(0.9));
    }

    #[test]
    fn override_through_scalar_fails() {
        assert!(apply_overrides("a = 1\n", &[("a.b".into(), "2".into())]).is_err());
    }
}
