//! File outputs: CSV tables, 8-bit PGM rasters of 2D fields, image strips.
//!
//! Floats are written with Rust's shortest round-trip formatting, so CSV
//! values parse back to the identical `f64`. No locale is involved: '.' is
//! always the decimal mark and ',' the separator.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{ArrayView1, ArrayView2};

use crate::{Error, Result};

pub const DEFAULT_RASTER: usize = 256;

/// Shortest representation that parses back to `v`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// A CSV table built in memory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Csv {
    text: String,
    columns: usize,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Self {
            text: header.join(",") + "\n",
            columns: header.len(),
        }
    }

    pub fn row<S: AsRef<str>>(&mut self, cells: &[S]) {
        assert_eq!(cells.len(), self.columns, "csv row width");
        let line: Vec<&str> = cells.iter().map(AsRef::as_ref).collect();
        self.text.push_str(&line.join(","));
        self.text.push('\n');
    }

    pub fn float_row(&mut self, values: &[f64]) {
        let cells: Vec<String> = values.iter().map(|&v| fmt_f64(v)).collect();
        self.row(&cells);
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, self.text.as_bytes())
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// `points` (n x d) followed by one column per named series.
pub fn points_csv(points: ArrayView2<f64>, series: &[(&str, &[f64])]) -> Csv {
    let coords: Vec<String> = (0..points.ncols()).map(|k| format!("z{k}")).collect();
    let mut header: Vec<&str> = vec!["index"];
    header.extend(coords.iter().map(String::as_str));
    header.extend(series.iter().map(|s| s.0));
    let mut csv = Csv::new(&header);
    for (i, p) in points.rows().into_iter().enumerate() {
        let mut cells = vec![i.to_string()];
        cells.extend(p.iter().map(|&v| fmt_f64(v)));
        cells.extend(series.iter().map(|s| fmt_f64(s.1[i])));
        csv.row(&cells);
    }
    csv
}

/// Bucketed nearest-neighbor lookup for 2D points on the unit torus.
struct Buckets {
    side: usize,
    cells: Vec<Vec<usize>>,
}

impl Buckets {
    fn new(points: ArrayView2<f64>) -> Self {
        let side = ((points.nrows() as f64).sqrt().ceil() as usize).max(1);
        let mut cells = vec![Vec::new(); side * side];
        for (j, p) in points.rows().into_iter().enumerate() {
            let (cx, cy) = (Self::cell(p[0], side), Self::cell(p[1], side));
            cells[cy * side + cx].push(j);
        }
        Self { side, cells }
    }

    fn cell(v: f64, side: usize) -> usize {
        ((v.rem_euclid(1.0) * side as f64) as usize).min(side - 1)
    }

    /// Nearest point index (lowest index on ties) by expanding rings of cells.
    fn nearest(&self, points: ArrayView2<f64>, x: f64, y: f64) -> usize {
        let side = self.side as isize;
        let (cx, cy) = (Self::cell(x, self.side) as isize, Self::cell(y, self.side) as isize);
        let cell_width = 1.0 / self.side as f64;
        let mut best = (f64::INFINITY, usize::MAX);
        for ring in 0..=side / 2 + 1 {
            for dy in -ring..=ring {
                for dx in -ring..=ring {
                    if dx.abs() != ring && dy.abs() != ring {
                        continue;
                    }
                    let gx = (cx + dx).rem_euclid(side) as usize;
                    let gy = (cy + dy).rem_euclid(side) as usize;
                    for &j in &self.cells[gy * self.side + gx] {
                        let d = torus_sq(points[[j, 0]] - x) + torus_sq(points[[j, 1]] - y);
                        if d < best.0 || (d == best.0 && j < best.1) {
                            best = (d, j);
                        }
                    }
                }
            }
            // Every unvisited cell is at least `ring` cell widths away.
            let reach = ring as f64 * cell_width;
            if best.1 != usize::MAX && best.0 <= reach * reach {
                break;
            }
        }
        best.1
    }
}

fn torus_sq(d: f64) -> f64 {
    let a = d.abs().rem_euclid(1.0);
    let a = a.min(1.0 - a);
    a * a
}

/// Nearest-neighbor resampling of a 2D point field onto a `size x size`
/// grid; row `r` covers `z1` in `[r / size, (r + 1) / size)`, column `c` covers `z0`.
pub fn rasterize(points: ArrayView2<f64>, values: &[f64], size: usize) -> Result<Vec<f64>> {
    if points.ncols() != 2 {
        return Err(Error::invalid("rasters need a 2D latent space"));
    }
    if values.len() != points.nrows() || values.is_empty() {
        return Err(Error::DimensionMismatch {
            context: "raster values",
            expected: points.nrows(),
            got: values.len(),
        });
    }
    if size == 0 {
        return Err(Error::invalid("raster size must be positive"));
    }
    let buckets = Buckets::new(points);
    let mut out = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let (x, y) = ((c as f64 + 0.5) / size as f64, (r as f64 + 0.5) / size as f64);
            out.push(values[buckets.nearest(points, x, y)]);
        }
    }
    Ok(out)
}

/// Binary PGM bytes with min-max scaling; also returns the sidecar text.
pub fn pgm(grid: &[f64], width: usize, height: usize) -> Result<(Vec<u8>, String)> {
    if grid.len() != width * height {
        return Err(Error::DimensionMismatch {
            context: "pgm grid",
            expected: width * height,
            got: grid.len(),
        });
    }
    let lo = grid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(grid.iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    let mut side = String::new();
    for (k, v) in [("min", fmt_f64(lo)), ("max", fmt_f64(hi))] {
        writeln!(side, "{k} = {v}").expect("string write");
    }
    writeln!(side, "width = {width}\nheight = {height}").expect("string write");
    Ok((bytes, side))
}

/// Writes `<path>` as a PGM and `<path>.txt` with its scale.
pub fn write_field_pgm(path: &Path, points: ArrayView2<f64>, values: &[f64], size: usize) -> Result<()> {
    let grid = rasterize(points, values, size)?;
    let (bytes, side) = pgm(&grid, size, size)?;
    write_file(path, &bytes)?;
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".txt");
    write_file(Path::new(&sidecar), side.as_bytes())
}

/// Side-by-side strip of `images` (one per row, values in `[0, 1]`) as PGM bytes.
pub fn image_strip(images: ArrayView2<f64>, shape: (usize, usize)) -> Result<Vec<u8>> {
    let (h, w) = shape;
    if images.ncols() != h * w {
        return Err(Error::DimensionMismatch {
            context: "image strip pixels",
            expected: h * w,
            got: images.ncols(),
        });
    }
    let n = images.nrows();
    let mut bytes = format!("P5\n{} {h}\n255\n", n * w).into_bytes();
    for r in 0..h {
        for img in images.rows() {
            let row: ArrayView1<f64> = img.slice(ndarray::s![r * w..(r + 1) * w]);
            bytes.extend(row.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
    }
    Ok(bytes)
}
