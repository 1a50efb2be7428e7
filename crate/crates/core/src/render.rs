//! Grayscale heatmaps in the plain PGM (`P2`) format.
//!
//! Image row `k` is lattice row `k` (frequency `k·δf`, zero at the top);
//! image column `j` is lattice column `j`.

use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::io::GridHeader;

pub const MAXVAL: u16 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scaling {
    #[default]
    Linear,
    /// Natural log; non-positive values take the smallest positive value.
    Log,
}

impl FromStr for Scaling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Scaling::Linear),
            "log" => Ok(Scaling::Log),
            other => Err(Error::invalid("scaling", format!("unknown scaling `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Row-major.
    pub pixels: Vec<u16>,
}

impl Image {
    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.pixels[row * self.width + col]
    }
}

fn scaled_values(a: &Array2<f64>, scaling: Scaling) -> Result<Vec<f64>> {
    match scaling {
        Scaling::Linear => Ok(a.iter().copied().collect()),
        Scaling::Log => {
            let floor = a
                .iter()
                .copied()
                .filter(|v| *v > 0.0 && v.is_finite())
                .fold(f64::INFINITY, f64::min);
            if !floor.is_finite() {
                return Err(Error::invalid("grid", "log scaling needs at least one positive value"));
            }
            Ok(a.iter().map(|&v| if v > 0.0 { v.ln() } else { floor.ln() }).collect())
        }
    }
}

/// Finite range of the scaled values.
pub fn value_range(a: &Array2<f64>, scaling: Scaling) -> Result<(f64, f64)> {
    let v = scaled_values(a, scaling)?;
    let (lo, hi) = v
        .iter()
        .filter(|x| x.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if lo > hi {
        return Err(Error::invalid("grid", "no finite values to render"));
    }
    Ok((lo, hi))
}

/// Map `[min, max]` of the (scaled) grid linearly onto `0..=MAXVAL`.
/// A constant grid renders as all zeros; non-finite cells render as 0.
pub fn render(a: &Array2<f64>, scaling: Scaling) -> Result<Image> {
    let (height, width) = a.dim();
    if width == 0 || height == 0 {
        return Err(Error::invalid("grid", "empty grid"));
    }
    let v = scaled_values(a, scaling)?;
    let (lo, hi) = value_range(a, scaling)?;
    let span = hi - lo;
    let pixels = v
        .iter()
        .map(|&x| {
            if !x.is_finite() || span == 0.0 {
                0
            } else {
                ((x - lo) / span * MAXVAL as f64).round() as u16
            }
        })
        .collect();
    Ok(Image {
        width,
        height,
        maxval: MAXVAL,
        pixels,
    })
}

pub fn format_pgm(img: &Image) -> String {
    let mut out = format!("P2\n{} {}\n{}\n", img.width, img.height, img.maxval);
    for row in img.pixels.chunks(img.width) {
        let line: Vec<String> = row.iter().map(u16::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_pgm(text: &str) -> Result<Image> {
    let mut toks = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    let bad = |reason: &str| Error::Parse {
        line: 0,
        reason: reason.to_string(),
    };
    if toks.next() != Some("P2") {
        return Err(bad("not a plain PGM (P2) file"));
    }
    let mut num = || -> Result<usize> {
        toks.next()
            .ok_or_else(|| bad("truncated PGM"))?
            .parse::<usize>()
            .map_err(|_| bad("bad PGM number"))
    };
    let width = num()?;
    let height = num()?;
    let maxval = num()?;
    let pixels = (0..width * height).map(|_| num().map(|v| v as u16)).collect::<Result<Vec<_>>>()?;
    Ok(Image {
        width,
        height,
        maxval: maxval as u16,
        pixels,
    })
}

/// Axis annotations for a rendered grid.
pub fn sidecar(header: &GridHeader, a: &Array2<f64>, scaling: Scaling) -> Result<String> {
    let (nf, nt) = a.dim();
    let (lo, hi) = value_range(a, scaling)?;
    let mut out = String::new();
    let _ = writeln!(out, "width = {nt}");
    let _ = writeln!(out, "height = {nf}");
    let _ = writeln!(out, "rows = frequency, top row f = 0, step df = {}", header.df);
    let _ = writeln!(out, "columns = time, step dt = {} samples", header.dt);
    if let Some(n) = &header.name {
        let _ = writeln!(out, "field = {n}");
    }
    let scale = match scaling {
        Scaling::Linear => "linear",
        Scaling::Log => "log",
    };
    let _ = writeln!(out, "scaling = {scale}");
    let _ = writeln!(out, "black = {lo}");
    let _ = writeln!(out, "white = {hi}");
    Ok(out)
}
