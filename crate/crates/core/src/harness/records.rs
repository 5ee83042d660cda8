use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 8] = [
    "ny",
    "seed",
    "method",
    "layer",
    "half_iter",
    "nmse_db",
    "wall_ms",
    "converged",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Mlvamp,
    Baseline,
    Se,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Mlvamp => "mlvamp",
            Method::Baseline => "baseline",
            Method::Se => "se",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlvamp" => Ok(Method::Mlvamp),
            "baseline" => Ok(Method::Baseline),
            "se" => Ok(Method::Se),
            other => Err(Error::InvalidArgument(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub ny: usize,
    pub seed: u64,
    pub method: Method,
    pub layer: usize,
    pub half_iter: usize,
    pub nmse_db: f64,
    pub wall_ms: f64,
    pub converged: bool,
}

fn format_float(v: f64) -> String {
    if v == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

pub fn write_csv<W: Write>(records: &[RunRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.ny.to_string(),
            r.seed.to_string(),
            r.method.name().to_string(),
            r.layer.to_string(),
            r.half_iter.to_string(),
            format_float(r.nmse_db),
            format_float(r.wall_ms),
            r.converged.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(records: &[RunRecord], path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(records, std::io::BufWriter::new(file))
}

fn field<T: FromStr>(rec: &csv::StringRecord, i: usize, line: u64) -> Result<T> {
    let raw = rec.get(i).unwrap_or("");
    raw.parse().map_err(|_| Error::Parse {
        path: format!("line {line}"),
        message: format!("bad {} value {raw:?}", CSV_HEADER[i]),
    })
}

pub fn read_csv<R: Read>(reader: R) -> Result<Vec<RunRecord>> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Parse {
            path: "header".into(),
            message: format!("expected {}", CSV_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 2;
        out.push(RunRecord {
            ny: field(&rec, 0, line)?,
            seed: field(&rec, 1, line)?,
            method: rec.get(2).unwrap_or("").parse()?,
            layer: field(&rec, 3, line)?,
            half_iter: field(&rec, 4, line)?,
            nmse_db: field(&rec, 5, line)?,
            wall_ms: field(&rec, 6, line)?,
            converged: field(&rec, 7, line)?,
        });
    }
    Ok(out)
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    read_csv(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<RunRecord> {
        vec![
            RunRecord {
                ny: 300,
                seed: 17,
                method: Method::Mlvamp,
                layer: 0,
                half_iter: 5,
                nmse_db: -21.125,
                wall_ms: 12.5,
                converged: true,
            },
            RunRecord {
                ny: 300,
                seed: 17,
                method: Method::Se,
                layer: 2,
                half_iter: 0,
                nmse_db: f64::NEG_INFINITY,
                wall_ms: 0.0,
                converged: false,
            },
        ]
    }

    #[test]
    fn header_and_format() {
        let mut buf = Vec::new();
        write_csv(&sample(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "ny,seed,method,layer,half_iter,nmse_db,wall_ms,converged"
        );
        assert_eq!(lines[1], "300,17,mlvamp,0,5,-21.125000,12.500000,true");
        assert_eq!(lines[2], "300,17,se,2,0,-inf,0.000000,false");
    }

    #[test]
    fn round_trip() {
        let mut buf = Vec::new();
        write_csv(&sample(), &mut buf).unwrap();
        assert_eq!(read_csv(buf.as_slice()).unwrap(), sample());
    }

    #[test]
    fn rejects_bad_rows() {
        let text =
            "ny,seed,method,layer,half_iter,nmse_db,wall_ms,converged\n1,2,adam,0,0,1.0,1.0,true\n";
        assert!(read_csv(text.as_bytes()).is_err());
        assert!(read_csv("a,b\n1,2\n".as_bytes()).is_err());
    }
}
