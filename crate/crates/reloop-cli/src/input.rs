//! CSV ingestion: contrast datasets, remnant predictions, and weights files.
//!
//! Input schema: a header row with required columns `contrast_id`, `z`, `y`;
//! optional `p` (default 0.5, constant per contrast), `yhat_r`, `group`; every
//! other column is a covariate, in header order. Rows missing `z` or `y` are
//! dropped and counted; a missing covariate cell is mean-imputed within its
//! contrast and flagged through an appended `<name>__missing` indicator
//! column. Malformed tokens are hard errors naming the line and column.

use std::collections::HashMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use reloop::domain::{ContrastDataset, UnitRecord};

#[derive(Debug)]
pub struct LoadedContrast {
    pub dataset: ContrastDataset,
    pub dropped_rows: usize,
    /// Covariate layout of `dataset`: base columns first, then one
    /// `<name>__missing` indicator per base column that had gaps.
    pub covariate_names: Vec<String>,
}

const RESERVED: [&str; 6] = ["contrast_id", "z", "y", "p", "yhat_r", "group"];

fn is_missing(field: &str) -> bool {
    let t = field.trim();
    t.is_empty() || t == "NA"
}

fn parse_number(field: &str, line: u64, column: &str) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| anyhow!("line {line}, column {column}: cannot parse {field:?} as a number"))?;
    if !v.is_finite() {
        bail!("line {line}, column {column}: non-finite value {field:?}");
    }
    Ok(v)
}

struct Layout {
    contrast_id: usize,
    z: usize,
    y: usize,
    p: Option<usize>,
    yhat_r: Option<usize>,
    group: Option<usize>,
    covariates: Vec<(usize, String)>,
}

fn resolve_layout(headers: &csv::StringRecord) -> Result<Layout> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (i, name) in headers.iter().enumerate() {
        let name = name.trim();
        if index.insert(name, i).is_some() {
            bail!("duplicate column {name:?} in header");
        }
    }
    let required = |name: &str| {
        index
            .get(name)
            .copied()
            .ok_or_else(|| anyhow!("missing required column {name:?}"))
    };
    let covariates = headers
        .iter()
        .enumerate()
        .map(|(i, name)| (i, name.trim().to_string()))
        .filter(|(_, name)| !RESERVED.contains(&name.as_str()))
        .collect();
    Ok(Layout {
        contrast_id: required("contrast_id")?,
        z: required("z")?,
        y: required("y")?,
        p: index.get("p").copied(),
        yhat_r: index.get("yhat_r").copied(),
        group: index.get("group").copied(),
        covariates,
    })
}

struct RawRow {
    line: u64,
    treated: bool,
    y: f64,
    p: Option<f64>,
    yhat_r: Option<f64>,
    group: Option<String>,
    x: Vec<Option<f64>>,
}

/// Loads and groups the input CSV; `predictions` optionally supplies `yhat_r`
/// for every data row (same order and count as the input file).
pub fn load_contrasts(
    path: &Path,
    predictions: Option<&[Option<f64>]>,
) -> Result<Vec<LoadedContrast>> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("cannot open input {}", path.display()))?;
    let layout = resolve_layout(reader.headers()?)?;
    if predictions.is_some() && layout.yhat_r.is_some() {
        bail!("input already has a yhat_r column; drop it or omit --remnant-predictions");
    }

    // Contrasts in first-appearance order; each collects rows and drop counts.
    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, (Vec<RawRow>, usize)> = HashMap::new();
    for (row_index, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| record.get(i).unwrap_or("");

        let contrast_id = field(layout.contrast_id).trim().to_string();
        if contrast_id.is_empty() {
            bail!("line {line}, column contrast_id: empty identifier");
        }
        let entry = by_id.entry(contrast_id.clone()).or_insert_with(|| {
            order.push(contrast_id.clone());
            (Vec::new(), 0)
        });

        // A row without an assignment or outcome carries no usable signal:
        // drop it (counted) rather than fail the whole batch.
        if is_missing(field(layout.z)) || is_missing(field(layout.y)) {
            entry.1 += 1;
            continue;
        }
        let treated = match field(layout.z).trim() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => bail!("line {line}, column z: expected 0/1/true/false, got {other:?}"),
        };
        let y = parse_number(field(layout.y), line, "y")?;
        let p = match layout.p {
            Some(i) if !is_missing(field(i)) => Some(parse_number(field(i), line, "p")?),
            _ => None,
        };
        let yhat_r = match (predictions, layout.yhat_r) {
            (Some(preds), _) => *preds
                .get(row_index)
                .ok_or_else(|| anyhow!("prediction file has fewer rows than the input"))?,
            (None, Some(i)) if !is_missing(field(i)) => {
                Some(parse_number(field(i), line, "yhat_r")?)
            }
            _ => None,
        };
        let group = layout
            .group
            .map(|i| field(i).trim())
            .filter(|g| !g.is_empty())
            .map(str::to_string);
        let x = layout
            .covariates
            .iter()
            .map(|(i, name)| {
                if is_missing(field(*i)) {
                    Ok(None)
                } else {
                    parse_number(field(*i), line, name).map(Some)
                }
            })
            .collect::<Result<Vec<Option<f64>>>>()?;
        entry.0.push(RawRow {
            line,
            treated,
            y,
            p,
            yhat_r,
            group,
            x,
        });
    }
    if let Some(preds) = predictions {
        let rows: usize = by_id.values().map(|(r, d)| r.len() + d).sum();
        if preds.len() != rows {
            bail!(
                "prediction file has {} rows but the input has {rows}",
                preds.len()
            );
        }
    }

    order
        .into_iter()
        .map(|id| {
            let (rows, dropped_rows) = by_id.remove(&id).expect("grouped above");
            build_contrast(&id, rows, dropped_rows, &layout.covariates)
        })
        .collect()
}

fn build_contrast(
    id: &str,
    rows: Vec<RawRow>,
    dropped_rows: usize,
    covariates: &[(usize, String)],
) -> Result<LoadedContrast> {
    if rows.is_empty() {
        bail!("contrast {id:?} has no usable rows");
    }
    let p = match rows
        .iter()
        .filter_map(|r| r.p)
        .fold(None, |acc, v| match acc {
            None => Some(Ok(v)),
            Some(Ok(prev)) if prev == v => Some(Ok(v)),
            Some(Ok(prev)) => Some(Err((prev, v))),
            err => err,
        }) {
        None => 0.5,
        Some(Ok(v)) => v,
        Some(Err((a, b))) => bail!("contrast {id:?}: column p must be constant, found {a} and {b}"),
    };

    // Mean-impute covariate gaps within the contrast and record which columns
    // needed it; the indicator columns keep imputed rows distinguishable.
    let mut filled: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.x.iter().map(|v| v.unwrap_or(f64::NAN)).collect())
        .collect();
    let mut covariate_names: Vec<String> = covariates.iter().map(|(_, n)| n.clone()).collect();
    for j in 0..covariates.len() {
        let present: Vec<f64> = rows.iter().filter_map(|r| r.x[j]).collect();
        if present.len() == rows.len() {
            continue;
        }
        let mean = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        for (row, values) in rows.iter().zip(&mut filled) {
            if row.x[j].is_none() {
                values[j] = mean;
            }
        }
        for (row, values) in rows.iter().zip(&mut filled) {
            values.push(if row.x[j].is_none() { 1.0 } else { 0.0 });
        }
        covariate_names.push(format!("{}__missing", covariates[j].1));
    }

    let units: Vec<UnitRecord> = rows
        .iter()
        .zip(filled)
        .map(|(row, x)| UnitRecord {
            id: format!("r{}", row.line),
            treated: row.treated,
            y: row.y,
            x,
            yhat_r: row.yhat_r,
            group: row.group.clone(),
        })
        .collect();
    let dataset =
        ContrastDataset::new(id, units, p).map_err(|e| anyhow!("contrast {id:?}: {e}"))?;
    Ok(LoadedContrast {
        dataset,
        dropped_rows,
        covariate_names,
    })
}

/// Reads a remnant-prediction file: one `yhat_r` column, one row per input
/// data row, blanks meaning "no prediction".
pub fn load_predictions(path: &Path) -> Result<Vec<Option<f64>>> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("cannot open predictions {}", path.display()))?;
    let column = reader
        .headers()?
        .iter()
        .position(|h| h.trim() == "yhat_r")
        .ok_or_else(|| anyhow!("prediction file needs a yhat_r column"))?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = record.get(column).unwrap_or("");
        out.push(if is_missing(field) {
            None
        } else {
            Some(parse_number(field, line, "yhat_r")?)
        });
    }
    Ok(out)
}

/// Reads a weights file: columns `group` and `pi`.
pub fn load_weights(path: &Path) -> Result<Vec<(String, f64)>> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("cannot open weights {}", path.display()))?;
    let headers = reader.headers()?;
    let group = headers
        .iter()
        .position(|h| h.trim() == "group")
        .ok_or_else(|| anyhow!("weights file needs a group column"))?;
    let pi = headers
        .iter()
        .position(|h| h.trim() == "pi")
        .ok_or_else(|| anyhow!("weights file needs a pi column"))?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let label = record.get(group).unwrap_or("").trim().to_string();
        if label.is_empty() {
            bail!("line {line}, column group: empty label");
        }
        out.push((
            label,
            parse_number(record.get(pi).unwrap_or(""), line, "pi")?,
        ));
    }
    Ok(out)
}

/// Numeric columns of an arbitrary CSV, selected and ordered by name.
pub fn load_named_columns(path: &Path, names: &[String]) -> Result<Vec<Vec<f64>>> {
    let mut reader =
        csv::Reader::from_path(path).with_context(|| format!("cannot open {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let indices: Vec<usize> = names
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| anyhow!("missing column {name:?}"))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row = indices
            .iter()
            .zip(names)
            .map(|(&i, name)| parse_number(record.get(i).unwrap_or(""), line, name))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Header names of a CSV, in file order.
pub fn column_names(path: &Path) -> Result<Vec<String>> {
    let mut reader =
        csv::Reader::from_path(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect())
}
