use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;

use super::{Bar, DataError, MarketFrame};

const REQUIRED: [&str; 6] = ["date", "open", "high", "low", "close", "adj_close"];

/// Loads OHLC bars from a CSV file or a directory of CSV files.
///
/// Accepted layouts: one file per stock (the stock id is the file stem) or a
/// long file with a `symbol` column. Header names are case-insensitive and
/// `Adj Close` is accepted for `adj_close`. Out-of-order rows are sorted and
/// reported through `log::warn!`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<MarketFrame, DataError> {
    let (frame, warnings) = load_csv_with_warnings(path)?;
    for w in warnings {
        log::warn!("{w}");
    }
    Ok(frame)
}

/// As [`load_csv`], returning warnings instead of logging them.
pub fn load_csv_with_warnings(path: impl AsRef<Path>) -> Result<(MarketFrame, Vec<String>), DataError> {
    let path = path.as_ref();
    let files = if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|source| DataError::Io {
                path: path.to_path_buf(),
                source,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(DataError::Invalid(format!(
                "no .csv files found in {}",
                path.display()
            )));
        }
        files
    } else {
        vec![path.to_path_buf()]
    };

    let mut rows: BTreeMap<String, Vec<(u64, Bar, PathBuf)>> = BTreeMap::new();
    for file in &files {
        read_file(file, &mut rows)?;
    }

    let mut warnings = Vec::new();
    let mut series = BTreeMap::new();
    for (id, mut bars) in rows {
        if bars.windows(2).any(|w| w[1].1.date < w[0].1.date) {
            warnings.push(format!("stock {id}: rows were out of date order and have been sorted"));
            bars.sort_by_key(|(_, b, _)| b.date);
        }
        for w in bars.windows(2) {
            if w[1].1.date == w[0].1.date {
                return Err(DataError::Validation {
                    file: w[1].2.clone(),
                    line: w[1].0,
                    message: format!("duplicate date {} for stock {id}", w[1].1.date),
                });
            }
        }
        series.insert(id, bars.into_iter().map(|(_, b, _)| b).collect());
    }
    Ok((MarketFrame::from_series(series)?, warnings))
}

/// Writes one `<stock>.csv` per series into `dir`; missing days are omitted.
/// Prices use shortest round-trip formatting so [`load_csv`] restores them exactly.
pub fn write_csv(frame: &MarketFrame, dir: impl AsRef<Path>) -> Result<(), DataError> {
    let dir = dir.as_ref();
    let io = |path: &Path, source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    for (id, series) in frame.iter() {
        let mut body = String::from("date,open,high,low,close,adj_close,volume\n");
        for bar in series.iter().flatten() {
            let volume = bar.volume.map(|v| v.to_string()).unwrap_or_default();
            body.push_str(&format!(
                "{},{},{},{},{},{},{volume}\n",
                bar.date, bar.open, bar.high, bar.low, bar.close, bar.adj_close
            ));
        }
        let path = dir.join(format!("{id}.csv"));
        std::fs::write(&path, body).map_err(|e| io(&path, e))?;
    }
    Ok(())
}

fn normalize_header(h: &str) -> String {
    h.trim().to_ascii_lowercase().replace([' ', '-'], "_")
}

fn read_file(file: &Path, out: &mut BTreeMap<String, Vec<(u64, Bar, PathBuf)>>) -> Result<(), DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(file)
        .map_err(|e| DataError::Parse {
            file: file.to_path_buf(),
            line: 1,
            field: "header".to_string(),
            message: e.to_string(),
        })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| DataError::Parse {
            file: file.to_path_buf(),
            line: 1,
            field: "header".to_string(),
            message: e.to_string(),
        })?
        .iter()
        .map(normalize_header)
        .collect();
    let find = |name: &str| headers.iter().position(|h| h == name || (name == "adj_close" && h == "adjclose"));
    let mut cols = [0usize; 6];
    for (slot, name) in cols.iter_mut().zip(REQUIRED) {
        *slot = find(name).ok_or_else(|| DataError::Parse {
            file: file.to_path_buf(),
            line: 1,
            field: name.to_string(),
            message: "missing column".to_string(),
        })?;
    }
    let volume_col = find("volume");
    let symbol_col = find("symbol");
    let stem = file
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "stock".to_string());

    for record in reader.records() {
        let record = record.map_err(|e| DataError::Parse {
            file: file.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            field: "record".to_string(),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |idx: usize, name: &str| -> Result<&str, DataError> {
            record.get(idx).ok_or_else(|| DataError::Parse {
                file: file.to_path_buf(),
                line,
                field: name.to_string(),
                message: "missing value".to_string(),
            })
        };
        let price = |idx: usize, name: &str| -> Result<f64, DataError> {
            field(idx, name)?.parse::<f64>().map_err(|e| DataError::Parse {
                file: file.to_path_buf(),
                line,
                field: name.to_string(),
                message: e.to_string(),
            })
        };
        let date_text = field(cols[0], "date")?;
        let date = NaiveDate::parse_from_str(date_text, "%Y-%m-%d").map_err(|e| DataError::Parse {
            file: file.to_path_buf(),
            line,
            field: "date".to_string(),
            message: format!("`{date_text}`: {e}"),
        })?;
        let volume = match volume_col {
            Some(idx) => match record.get(idx) {
                Some("") | None => None,
                Some(_) => Some(price(idx, "volume")?),
            },
            None => None,
        };
        let bar = Bar {
            date,
            open: price(cols[1], "open")?,
            high: price(cols[2], "high")?,
            low: price(cols[3], "low")?,
            close: price(cols[4], "close")?,
            adj_close: price(cols[5], "adj_close")?,
            volume,
        };
        bar.validate().map_err(|message| DataError::Validation {
            file: file.to_path_buf(),
            line,
            message,
        })?;
        let id = match symbol_col {
            Some(idx) => field(idx, "symbol")?.to_string(),
            None => stem.clone(),
        };
        out.entry(id).or_default().push((line, bar, file.to_path_buf()));
    }
    Ok(())
}
