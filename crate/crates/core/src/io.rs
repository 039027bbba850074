//! Price files, content hashes and run manifests.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ssm::{MonthGap, PriceSeries, YearMonth};

/// A loaded series with the month gaps found in it.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedPrices {
    pub series: PriceSeries,
    pub gaps: Vec<MonthGap>,
}

/// Reads a `date,price` CSV with `YYYY-MM` dates and positive prices and
/// takes logs. Errors name the file line (the header is line 1).
pub fn load_price_csv(path: &Path) -> Result<LoadedPrices> {
    let file = fs::File::open(path)?;
    let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    read_price_csv(file, label)
}

pub fn read_price_csv<R: Read>(input: R, label: impl Into<String>) -> Result<LoadedPrices> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header = rdr.headers()?.clone();
    if header.len() != 2 || &header[0] != "date" || &header[1] != "price" {
        return Err(Error::Data {
            line: 1,
            message: format!("expected header `date,price`, got `{}`", header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut dates: Vec<YearMonth> = Vec::new();
    let mut log_prices = Vec::new();
    let mut last_line = 1;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Data {
            line: e.position().map_or(last_line + 1, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(last_line + 1, |p| p.line() as usize);
        last_line = line;
        let bad = |message: String| Error::Data { line, message };
        let date: YearMonth = rec[0].parse().map_err(bad)?;
        let price: f64 = rec[1]
            .parse()
            .map_err(|_| bad(format!("price {:?} is not a number", &rec[1])))?;
        if !(price > 0.0 && price.is_finite()) {
            return Err(bad(format!("price must be positive, got {price}")));
        }
        if let Some(&prev) = dates.last() {
            if date == prev {
                return Err(bad(format!("duplicate month {date}")));
            }
            if date < prev {
                return Err(bad(format!("month {date} follows {prev}")));
            }
        }
        dates.push(date);
        log_prices.push(price.ln());
    }
    let series = PriceSeries::new(dates, log_prices, label)?;
    let gaps = series.gaps();
    for g in &gaps {
        log::warn!("price series has no observations between {} and {}", g.before, g.after);
    }
    Ok(LoadedPrices { series, gaps })
}

/// Writes `date,price` with prices `exp(log price)`.
pub fn write_price_csv<W: Write>(out: W, series: &PriceSeries) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["date", "price"])?;
    for (d, p) in series.dates.iter().zip(&series.log_prices) {
        w.write_record([d.to_string(), p.exp().to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// SHA-256 of `"blob <len>\0" ++ content`, hex encoded.
pub fn content_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex::encode(h.finalize())
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(content_hash(&fs::read(path)?))
}

/// A file and its content hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashedFile {
    pub path: String,
    pub sha256: String,
}
