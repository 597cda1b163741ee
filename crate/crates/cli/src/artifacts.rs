//! Readers and writers for the exchange files the subcommands share:
//! prediction matrices, backtest ledgers, metric summaries, and wealth
//! curves. Floats are printed in shortest round-trip form so identical runs
//! produce identical bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use gapnet::backtest::Ledger;
use gapnet::data::DataError;
use gapnet::Error;

/// A parsed predictions matrix: `rows[d][s]` scores ticker `s` on date `d`.
pub struct PredsFile {
    pub tickers: Vec<String>,
    pub dates: Vec<NaiveDate>,
    pub rows: Vec<Vec<f64>>,
}

pub fn write_preds(
    path: &Path,
    tickers: &[String],
    dates: &[NaiveDate],
    rows: &[Vec<f64>],
) -> Result<(), Error> {
    let mut out = String::new();
    out.push_str("date");
    for t in tickers {
        out.push(',');
        out.push_str(t);
    }
    out.push('\n');
    for (date, row) in dates.iter().zip(rows) {
        out.push_str(&date.to_string());
        for v in row {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_preds(path: &Path) -> Result<PredsFile, Error> {
    let bad = || {
        Error::Data(DataError::BadColumns {
            path: path.display().to_string(),
        })
    };
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(bad)?;
    let mut cols = header.split(',');
    if cols.next() != Some("date") {
        return Err(bad());
    }
    let tickers: Vec<String> = cols.map(String::from).collect();
    if tickers.is_empty() {
        return Err(bad());
    }

    let mut dates = Vec::new();
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let date_str = fields.next().ok_or_else(bad)?;
        let date = NaiveDate::parse_from_str(date_str, "%Y-%m-%d")
            .map_err(|_| Error::Data(DataError::BadDate(date_str.to_string())))?;
        let row: Vec<f64> = fields
            .map(|f| f.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad())?;
        if row.len() != tickers.len() {
            return Err(bad());
        }
        dates.push(date);
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(bad());
    }
    Ok(PredsFile {
        tickers,
        dates,
        rows,
    })
}

/// `date,picks,R_t,wealth`; picks are ticker names joined by `;`.
pub fn write_ledger(
    path: &Path,
    dates: &[NaiveDate],
    tickers: &[String],
    ledger: &Ledger,
) -> Result<(), Error> {
    let mut out = String::from("date,picks,R_t,wealth\n");
    for row in &ledger.rows {
        let picks: Vec<&str> = row.picks.iter().map(|&s| tickers[s].as_str()).collect();
        out.push_str(&format!(
            "{},{},{},{}\n",
            dates[row.day],
            picks.join(";"),
            row.ret,
            row.wealth
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_summary(
    path: &Path,
    irr: f64,
    sharpe: f64,
    ic: f64,
    icir: Option<f64>,
    k: usize,
    days: usize,
) -> Result<(), Error> {
    let doc = serde_json::json!({
        "irr": irr,
        "sharpe": sharpe,
        "ic": ic,
        "icir": icir,
        "k": k,
        "days": days,
    });
    let mut text = serde_json::to_string_pretty(&doc).expect("json value");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn write_curve(
    path: &Path,
    dates: &[NaiveDate],
    ledger: &Ledger,
    benchmark: Option<&[f64]>,
) -> Result<(), Error> {
    let mut out = String::from(if benchmark.is_some() {
        "date,wealth,benchmark\n"
    } else {
        "date,wealth\n"
    });
    for (i, row) in ledger.rows.iter().enumerate() {
        match benchmark {
            Some(b) => out.push_str(&format!("{},{},{}\n", dates[row.day], row.wealth, b[i])),
            None => out.push_str(&format!("{},{}\n", dates[row.day], row.wealth)),
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a `date,value` series such as a benchmark index (header optional).
pub fn read_series(path: &Path) -> Result<Vec<(NaiveDate, f64)>, Error> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (a, b) = line.split_once(',').ok_or_else(|| {
            Error::Data(DataError::BadColumns {
                path: path.display().to_string(),
            })
        })?;
        let date = match NaiveDate::parse_from_str(a.trim(), "%Y-%m-%d") {
            Ok(d) => d,
            Err(_) if i == 0 => continue, // header row
            Err(_) => return Err(Error::Data(DataError::BadDate(a.trim().to_string()))),
        };
        let value: f64 = b.trim().parse().map_err(|_| {
            Error::Data(DataError::BadColumns {
                path: path.display().to_string(),
            })
        })?;
        out.push((date, value));
    }
    Ok(out)
}

/// Sibling provenance path: `preds.csv` -> `preds.resolved.json`.
pub fn resolved_sibling(out: &Path) -> std::path::PathBuf {
    out.with_extension("resolved.json")
}

/// Writes `text` only if the parent directory exists, creating `dir` runs do
/// explicitly; kept here so every command reports missing directories the
/// same way.
pub fn ensure_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Plain text file write used for small sidecar artifacts.
pub fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
