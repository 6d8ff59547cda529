//! File formats: 16-bit binary PGM frames and CSV tables.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::imager::{CameraModel, SyntheticImage};
use crate::{Error, Result};

/// Writes a P5 frame with maxval 65535 (big-endian samples). Counts above
/// 65535 are clipped.
pub fn write_pgm<W: Write>(img: &SyntheticImage, mut out: W) -> Result<()> {
    write!(out, "P5\n{} {}\n65535\n", img.width, img.height)?;
    let mut buf = Vec::with_capacity(2 * img.pixels.len());
    for &p in &img.pixels {
        buf.extend_from_slice(&(p.min(65535) as u16).to_be_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

fn header_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(Error::format("PGM", "unexpected end of header"));
        }
        let c = byte[0] as char;
        if c == '#' && tok.is_empty() {
            let mut comment = Vec::new();
            r.read_until(b'\n', &mut comment)?;
        } else if c.is_ascii_whitespace() {
            if !tok.is_empty() {
                return Ok(tok);
            }
        } else {
            tok.push(c);
        }
    }
}

/// Reads a P5 frame (8- or 16-bit). Camera metadata is not stored in the
/// file; the caller supplies it.
pub fn read_pgm<R: Read>(input: R, camera: CameraModel) -> Result<SyntheticImage> {
    let mut r = BufReader::new(input);
    if header_token(&mut r)? != "P5" {
        return Err(Error::format("PGM", "missing P5 magic"));
    }
    let mut num = |what: &str| -> Result<usize> {
        header_token(&mut r)?.parse().map_err(|_| Error::format("PGM", format!("bad {what}")))
    };
    let (width, height, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::format("PGM", format!("unsupported header {width}x{height} max {maxval}")));
    }
    let bytes = if maxval > 255 { 2 } else { 1 };
    let mut raw = vec![0u8; width * height * bytes];
    r.read_exact(&mut raw).map_err(|_| Error::format("PGM", "truncated pixel data"))?;
    let pixels = if bytes == 2 {
        raw.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as u32).collect()
    } else {
        raw.into_iter().map(u32::from).collect()
    };
    Ok(SyntheticImage { width, height, pixels, camera: CameraModel { width, height, ..camera }, truth_sites: None })
}

pub fn save_pgm(img: &SyntheticImage, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_pgm(img, std::io::BufWriter::new(f))
}

pub fn load_pgm(path: &Path, camera: CameraModel) -> Result<SyntheticImage> {
    read_pgm(std::fs::File::open(path)?, camera)
}

/// In-memory CSV table. Floats go through [`fmt_f64`], so identical values
/// always give identical bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::format("CSV", "empty file"))?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        let mut rows = Vec::new();
        for (k, l) in lines.enumerate() {
            let row: Vec<String> = l.split(',').map(|s| s.trim().to_string()).collect();
            if row.len() != header.len() {
                return Err(Error::format("CSV", format!("row {} has {} fields, expected {}", k + 1, row.len(), header.len())));
            }
            rows.push(row);
        }
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::format("CSV", format!("missing column '{name}'")))
    }

    pub fn f64_at(&self, row: usize, col: usize) -> Result<f64> {
        self.rows[row][col]
            .parse()
            .map_err(|_| Error::format("CSV", format!("row {}: '{}' is not a number", row + 1, self.rows[row][col])))
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    let mut s = String::new();
    write!(s, "{x:?}").expect("writing to a String cannot fail");
    s
}

pub fn fmt_opt<T: ToString>(x: Option<T>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Square matrix as CSV without header: one row per line.
pub fn matrix_to_csv(n: usize, entries: &[f64]) -> String {
    let mut s = String::new();
    for r in 0..n {
        let row: Vec<String> = entries[r * n..(r + 1) * n].iter().map(|v| fmt_f64(*v)).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn matrix_from_csv(text: &str) -> Result<(usize, Vec<f64>)> {
    let mut entries = Vec::new();
    let mut n = None;
    let mut rows = 0;
    for (k, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let row: Vec<f64> = line
            .split(',')
            .map(|s| {
                let s = s.trim();
                match s {
                    "-inf" | "-Inf" => Ok(f64::NEG_INFINITY),
                    _ => s.parse::<f64>(),
                }
            })
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format("matrix", format!("row {}: {e}", k + 1)))?;
        if *n.get_or_insert(row.len()) != row.len() {
            return Err(Error::format("matrix", format!("row {} has {} entries", k + 1, row.len())));
        }
        entries.extend(row);
        rows += 1;
    }
    match n {
        Some(n) if n == rows => Ok((n, entries)),
        Some(n) => Err(Error::format("matrix", format!("{rows} rows but {n} columns"))),
        None => Err(Error::format("matrix", "empty")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_round_trips() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02e23, 0.0] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn pgm_round_trip() {
        let camera = CameraModel { width: 3, height: 2, ..CameraModel::default() };
        let img = SyntheticImage {
            width: 3,
            height: 2,
            pixels: vec![0, 1, 255, 256, 65535, 7],
            camera,
            truth_sites: None,
        };
        let mut buf = Vec::new();
        write_pgm(&img, &mut buf).unwrap();
        let back = read_pgm(buf.as_slice(), camera).unwrap();
        assert_eq!(back.pixels, img.pixels);
        assert!(read_pgm(&buf[..buf.len() - 1], camera).is_err());
    }

    #[test]
    fn matrix_round_trip() {
        let e = vec![1.0, f64::NEG_INFINITY, -0.5, 2.0];
        let (n, back) = matrix_from_csv(&matrix_to_csv(2, &e)).unwrap();
        assert_eq!(n, 2);
        assert_eq!(back, e);
        assert!(matrix_from_csv("1,2\n3\n").is_err());
    }
}
