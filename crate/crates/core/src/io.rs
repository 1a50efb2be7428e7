//! Plain-text formats for series, lattice grids and kernels.
//!
//! Floats are written with 17 significant digits, which reads back to the
//! same `f64`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kernel::{Kernel1D, KernelShape};
use crate::lattice::LatticeGeometry;
use crate::signal::TimeSeries;
use crate::taper::TaperFamily;

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.parse::<f64>().map_err(|_| Error::Parse {
        line,
        reason: format!("`{tok}` is not a number"),
    })
}

fn parse_usize(tok: &str, line: usize) -> Result<usize> {
    tok.parse::<usize>().map_err(|_| Error::Parse {
        line,
        reason: format!("`{tok}` is not a non-negative integer"),
    })
}

/// Hex SHA-256 of a config's text.
pub fn provenance_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// `# key=value` pairs from comment lines.
fn header_pairs(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.strip_prefix('#'))
        .flat_map(|l| l.split_whitespace())
        .filter_map(|tok| tok.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesFile {
    pub series: TimeSeries<f64>,
    pub seed: Option<u64>,
    /// Remaining `key=value` header pairs.
    pub meta: Vec<(String, String)>,
}

pub fn format_series(series: &TimeSeries<f64>, seed: Option<u64>, meta: &[(String, String)]) -> String {
    let mut out = format!("# n_samples={}", series.len());
    if let Some(s) = seed {
        let _ = write!(out, " seed={s}");
    }
    for (k, v) in meta {
        let _ = write!(out, " {k}={v}");
    }
    out.push('\n');
    for &v in series.samples() {
        out.push_str(&fmt_f64(v));
        out.push('\n');
    }
    out
}

pub fn parse_series(text: &str) -> Result<SeriesFile> {
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        samples.push(parse_f64(t, i + 1)?);
    }
    let mut seed = None;
    let mut n_declared = None;
    let mut meta = Vec::new();
    for (k, v) in header_pairs(text) {
        match k.as_str() {
            "seed" => seed = Some(v.parse().map_err(|_| Error::Parse { line: 1, reason: format!("bad seed `{v}`") })?),
            "n_samples" => n_declared = Some(parse_usize(&v, 1)?),
            _ => meta.push((k, v)),
        }
    }
    if let Some(n) = n_declared {
        if n != samples.len() {
            return Err(Error::Parse {
                line: 1,
                reason: format!("header declares {n} samples, found {}", samples.len()),
            });
        }
    }
    Ok(SeriesFile {
        series: TimeSeries::new(samples)?,
        seed,
        meta,
    })
}

pub fn read_series(path: &Path) -> Result<SeriesFile> {
    parse_series(&read_text(path)?)
}

#[derive(Debug, Clone, PartialEq)]
pub enum GridData {
    Real(Array2<f64>),
    Complex(Array2<Complex64>),
}

impl GridData {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            GridData::Real(a) => a.dim(),
            GridData::Complex(a) => a.dim(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridHeader {
    pub df: f64,
    pub dt: f64,
    pub p_f: f64,
    pub p_t: f64,
    pub taper_family: TaperFamily,
    pub taper_len: usize,
    /// Length of the series the lattice came from.
    pub n_data: Option<usize>,
    pub provenance: Option<String>,
    /// Field name, e.g. `theta_hat`.
    pub name: Option<String>,
}

impl GridHeader {
    pub fn from_geometry(g: &LatticeGeometry, n_data: usize) -> Self {
        GridHeader {
            df: g.df,
            dt: g.dt,
            p_f: g.p_f,
            p_t: g.p_t,
            taper_family: g.taper_family,
            taper_len: g.taper_len,
            n_data: Some(n_data),
            provenance: None,
            name: None,
        }
    }

    pub fn with_provenance(mut self, hash: impl Into<String>) -> Self {
        self.provenance = Some(hash.into());
        self
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn geometry(&self) -> Result<LatticeGeometry> {
        let n = self
            .n_data
            .ok_or_else(|| Error::invalid("n_data", "grid header lacks n_data"))?;
        LatticeGeometry::new(n, self.taper_family, self.taper_len, self.p_t, self.p_f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub header: GridHeader,
    pub data: GridData,
}

impl Grid {
    pub fn real(header: GridHeader, a: Array2<f64>) -> Self {
        Grid {
            header,
            data: GridData::Real(a),
        }
    }

    pub fn as_real(&self) -> Result<&Array2<f64>> {
        match &self.data {
            GridData::Real(a) => Ok(a),
            GridData::Complex(_) => Err(Error::invalid("grid", "expected a real grid, found complex")),
        }
    }
}

/// Header `# nf nt df dt p_f p_t taper_family taper_N`, `key=value`
/// comment lines, then one lattice row per line.
pub fn format_grid(grid: &Grid) -> String {
    let h = &grid.header;
    let (nf, nt) = grid.data.dims();
    let mut out = format!(
        "# {nf} {nt} {} {} {} {} {} {}\n",
        fmt_f64(h.df),
        fmt_f64(h.dt),
        fmt_f64(h.p_f),
        fmt_f64(h.p_t),
        h.taper_family,
        h.taper_len
    );
    let kind = match grid.data {
        GridData::Real(_) => "real",
        GridData::Complex(_) => "complex",
    };
    let _ = writeln!(out, "# kind={kind} window=symmetric");
    if let Some(n) = h.n_data {
        let _ = writeln!(out, "# n_data={n}");
    }
    if let Some(p) = &h.provenance {
        let _ = writeln!(out, "# provenance={p}");
    }
    if let Some(n) = &h.name {
        let _ = writeln!(out, "# name={n}");
    }
    match &grid.data {
        GridData::Real(a) => {
            for row in a.rows() {
                let line: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        }
        GridData::Complex(a) => {
            for row in a.rows() {
                let line: Vec<String> = row.iter().map(|z| format!("{} {}", fmt_f64(z.re), fmt_f64(z.im))).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        }
    }
    out
}

pub fn parse_grid(text: &str) -> Result<Grid> {
    let mut lines = text.lines().enumerate();
    let (_, first) = lines.next().ok_or(Error::Parse {
        line: 1,
        reason: "empty grid file".to_string(),
    })?;
    let toks: Vec<&str> = first
        .strip_prefix('#')
        .ok_or(Error::Parse {
            line: 1,
            reason: "missing `#` header".to_string(),
        })?
        .split_whitespace()
        .collect();
    if toks.len() != 8 {
        return Err(Error::Parse {
            line: 1,
            reason: format!("header needs 8 fields (nf nt df dt p_f p_t taper_family taper_N), got {}", toks.len()),
        });
    }
    let nf = parse_usize(toks[0], 1)?;
    let nt = parse_usize(toks[1], 1)?;
    let taper_family = toks[6].parse::<TaperFamily>().map_err(|e| Error::Parse {
        line: 1,
        reason: e.to_string(),
    })?;
    let mut header = GridHeader {
        df: parse_f64(toks[2], 1)?,
        dt: parse_f64(toks[3], 1)?,
        p_f: parse_f64(toks[4], 1)?,
        p_t: parse_f64(toks[5], 1)?,
        taper_family,
        taper_len: parse_usize(toks[7], 1)?,
        n_data: None,
        provenance: None,
        name: None,
    };
    let mut complex = false;
    let mut values = Vec::with_capacity(nf * nt);
    let mut rows = 0;
    for (i, line) in lines {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if let Some(c) = t.strip_prefix('#') {
            for (k, v) in c.split_whitespace().filter_map(|tok| tok.split_once('=')) {
                match k {
                    "kind" => complex = v == "complex",
                    "n_data" => header.n_data = Some(parse_usize(v, i + 1)?),
                    "provenance" => header.provenance = Some(v.to_string()),
                    "name" => header.name = Some(v.to_string()),
                    _ => {}
                }
            }
            continue;
        }
        let row: Vec<f64> = t.split_whitespace().map(|tok| parse_f64(tok, i + 1)).collect::<Result<_>>()?;
        let want = if complex { 2 * nt } else { nt };
        if row.len() != want {
            return Err(Error::Parse {
                line: i + 1,
                reason: format!("expected {want} values, found {}", row.len()),
            });
        }
        values.extend(row);
        rows += 1;
    }
    if rows != nf {
        return Err(Error::Parse {
            line: text.lines().count(),
            reason: format!("expected {nf} rows, found {rows}"),
        });
    }
    let data = if complex {
        let z: Vec<Complex64> = values.chunks(2).map(|c| Complex64::new(c[0], c[1])).collect();
        GridData::Complex(Array2::from_shape_vec((nf, nt), z).expect("sizes checked"))
    } else {
        GridData::Real(Array2::from_shape_vec((nf, nt), values).expect("sizes checked"))
    };
    Ok(Grid { header, data })
}

pub fn read_grid(path: &Path) -> Result<Grid> {
    parse_grid(&read_text(path)?)
}

/// Write `grid` and confirm it reads back unchanged.
pub fn write_grid(path: &Path, grid: &Grid) -> Result<()> {
    let text = format_grid(grid);
    write_text(path, &text)?;
    let back = read_grid(path)?;
    if !grids_identical(&back, grid) {
        return Err(Error::Io(format!("{}: grid did not round-trip", path.display())));
    }
    Ok(())
}

/// Bitwise equality, treating NaN payloads as equal.
pub fn grids_identical(a: &Grid, b: &Grid) -> bool {
    let same = |x: f64, y: f64| x.to_bits() == y.to_bits() || (x.is_nan() && y.is_nan());
    a.header == b.header
        && match (&a.data, &b.data) {
            (GridData::Real(x), GridData::Real(y)) => x.dim() == y.dim() && x.iter().zip(y.iter()).all(|(u, v)| same(*u, *v)),
            (GridData::Complex(x), GridData::Complex(y)) => {
                x.dim() == y.dim() && x.iter().zip(y.iter()).all(|(u, v)| same(u.re, v.re) && same(u.im, v.im))
            }
            _ => false,
        }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelDump {
    pub q: usize,
    pub p: usize,
    pub halfwidth: f64,
    pub index_bound: usize,
    pub shape: KernelShape,
    /// Index of the first coefficient.
    pub lo: isize,
    pub coeffs: Vec<f64>,
}

impl KernelDump {
    pub fn from_kernel(k: &Kernel1D<f64>) -> Self {
        KernelDump {
            q: k.q,
            p: k.p,
            halfwidth: k.halfwidth,
            index_bound: k.index_bound,
            shape: k.shape,
            lo: k.lo(),
            coeffs: k.coeffs().to_vec(),
        }
    }

    /// `Σ (j/H)^m μ_j`.
    pub fn normalized_moment(&self, m: usize) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| ((self.lo + i as isize) as f64 / self.halfwidth).powi(m as i32) * c)
            .sum()
    }
}

/// `# q p H M shape` header, `# lo=…`, then one coefficient per line.
pub fn format_kernel(k: &KernelDump) -> String {
    let mut out = format!("# {} {} {} {} {}\n# lo={}\n", k.q, k.p, fmt_f64(k.halfwidth), k.index_bound, k.shape, k.lo);
    for &c in &k.coeffs {
        out.push_str(&fmt_f64(c));
        out.push('\n');
    }
    out
}

pub fn parse_kernel(text: &str) -> Result<KernelDump> {
    let first = text.lines().next().unwrap_or("");
    let toks: Vec<&str> = first.strip_prefix('#').unwrap_or("").split_whitespace().collect();
    if toks.len() != 5 {
        return Err(Error::Parse {
            line: 1,
            reason: "kernel header needs `# q p H M shape`".to_string(),
        });
    }
    let shape = toks[4].parse::<KernelShape>().map_err(|e| Error::Parse {
        line: 1,
        reason: e.to_string(),
    })?;
    let m = parse_usize(toks[3], 1)?;
    let mut lo = -(m as isize);
    for (k, v) in header_pairs(text) {
        if k == "lo" {
            lo = v.parse().map_err(|_| Error::Parse {
                line: 2,
                reason: format!("bad lo `{v}`"),
            })?;
        }
    }
    let coeffs = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| parse_f64(l.trim(), i + 1))
        .collect::<Result<Vec<_>>>()?;
    Ok(KernelDump {
        q: parse_usize(toks[0], 1)?,
        p: parse_usize(toks[1], 1)?,
        halfwidth: parse_f64(toks[2], 1)?,
        index_bound: m,
        shape,
        lo,
        coeffs,
    })
}

/// Ordered `key = value` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn format(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let (k, v) = t.split_once('=').ok_or(Error::Parse {
                line: i + 1,
                reason: format!("expected `key = value`, got `{t}`"),
            })?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(Manifest { entries })
    }
}
