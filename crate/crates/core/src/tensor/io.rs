//! Plain-text formats.
//!
//! Tensor: a `dims I J K` header, then one `i j k value` line per stored
//! entry (0-based). Mask: `dims I J K`, then either `slices t0 t1 ...` or
//! `entries` followed by `i j k` lines. Factors: `rank R dims I J K`, then
//! the rows of A, B and C. Values use Rust's shortest round-trip decimal
//! form, so a write/read cycle is bit-exact. Blank lines and lines starting
//! with `#` are ignored.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use super::{DenseTensor, Dims, KruskalModel, MaskPattern, MaskTensor, SparseTensor};
use crate::error::{Error, Result};

struct Lines {
    path: PathBuf,
    inner: std::iter::Enumerate<std::io::Lines<BufReader<File>>>,
}

impl Lines {
    fn open(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            inner: BufReader::new(file).lines().enumerate(),
        })
    }

    fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line,
            msg: msg.into(),
        }
    }

    /// Next non-blank, non-comment line with its 1-based number.
    fn next_content(&mut self) -> Result<Option<(usize, String)>> {
        for (n, line) in self.inner.by_ref() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            return Ok(Some((n + 1, trimmed.to_string())));
        }
        Ok(None)
    }

    fn expect_content(&mut self, what: &str) -> Result<(usize, String)> {
        self.next_content()?
            .ok_or_else(|| self.err(0, format!("unexpected end of file, expected {what}")))
    }

    fn parse_fields<T: std::str::FromStr>(&self, line: usize, fields: &[&str]) -> Result<Vec<T>> {
        fields
            .iter()
            .map(|f| {
                f.parse::<T>()
                    .map_err(|_| self.err(line, format!("cannot parse `{f}`")))
            })
            .collect()
    }

    fn parse_dims(&self, line: usize, fields: &[&str]) -> Result<Dims> {
        let d: Vec<usize> = self.parse_fields(line, fields)?;
        match d.as_slice() {
            &[i, j, k] => Ok([i, j, k]),
            _ => Err(self.err(line, "expected three dimensions")),
        }
    }
}

fn read_header_dims(lines: &mut Lines) -> Result<Dims> {
    let (n, header) = lines.expect_content("`dims I J K` header")?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.first() != Some(&"dims") || fields.len() != 4 {
        return Err(lines.err(n, "expected `dims I J K`"));
    }
    lines.parse_dims(n, &fields[1..])
}

fn read_entries(path: &Path) -> Result<(Dims, Vec<(usize, usize, usize, f64)>)> {
    let mut lines = Lines::open(path)?;
    let dims = read_header_dims(&mut lines)?;
    let mut entries = Vec::new();
    while let Some((n, line)) = lines.next_content()? {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(lines.err(n, "expected `i j k value`"));
        }
        let idx: Vec<usize> = lines.parse_fields(n, &fields[..3])?;
        let value: f64 = fields[3]
            .parse()
            .map_err(|_| lines.err(n, format!("cannot parse value `{}`", fields[3])))?;
        entries.push((idx[0], idx[1], idx[2], value));
    }
    Ok((dims, entries))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<SparseTensor> {
    let (dims, entries) = read_entries(path.as_ref())?;
    SparseTensor::new(dims, entries)
}

/// Reads the sparse format into a dense tensor; absent entries are zero.
pub fn read_tensor_dense(path: impl AsRef<Path>) -> Result<DenseTensor> {
    Ok(read_tensor(path)?.to_dense())
}

pub fn write_tensor(path: impl AsRef<Path>, t: &SparseTensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let [i, j, k] = t.dims();
    writeln!(w, "dims {i} {j} {k}")?;
    for (a, b, c, v) in t.iter() {
        writeln!(w, "{a} {b} {c} {v}")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes every entry, zeros included, in `(i, j, k)` order.
pub fn write_tensor_dense(path: impl AsRef<Path>, t: &DenseTensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let [ni, nj, nk] = t.dims();
    writeln!(w, "dims {ni} {nj} {nk}")?;
    for i in 0..ni {
        for j in 0..nj {
            for k in 0..nk {
                writeln!(w, "{i} {j} {k} {}", t.get(i, j, k))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<MaskTensor> {
    let mut lines = Lines::open(path.as_ref())?;
    let dims = read_header_dims(&mut lines)?;
    let (n, kind) = lines.expect_content("`slices ...` or `entries`")?;
    let mut fields = kind.split_whitespace();
    match fields.next() {
        Some("slices") => {
            let rest: Vec<&str> = fields.collect();
            let slices: Vec<usize> = lines.parse_fields(n, &rest)?;
            MaskTensor::from_slices(dims, slices)
        }
        Some("entries") => {
            let mut entries = Vec::new();
            while let Some((n, line)) = lines.next_content()? {
                let fields: Vec<&str> = line.split_whitespace().collect();
                entries.push(lines.parse_dims(n, &fields)?);
            }
            MaskTensor::from_entries(dims, entries)
        }
        _ => Err(lines.err(n, "expected `slices` or `entries`")),
    }
}

pub fn write_mask(path: impl AsRef<Path>, mask: &MaskTensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let [i, j, k] = mask.dims();
    writeln!(w, "dims {i} {j} {k}")?;
    match mask.pattern() {
        MaskPattern::Slices(s) => {
            write!(w, "slices")?;
            for t in s {
                write!(w, " {t}")?;
            }
            writeln!(w)?;
        }
        MaskPattern::Entries(e) => {
            writeln!(w, "entries")?;
            for c in e {
                writeln!(w, "{} {} {}", c[0], c[1], c[2])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `model` with its weights folded into A.
pub fn write_factors(path: impl AsRef<Path>, model: &KruskalModel) -> Result<()> {
    let model = model.absorb_lambda();
    let mut w = BufWriter::new(File::create(path)?);
    let [i, j, k] = model.dims();
    writeln!(w, "rank {} dims {i} {j} {k}", model.rank())?;
    for factor in [model.a(), model.b(), model.c()] {
        for row in factor.row_iter() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_factors(path: impl AsRef<Path>) -> Result<KruskalModel> {
    let mut lines = Lines::open(path.as_ref())?;
    let (n, header) = lines.expect_content("`rank R dims I J K` header")?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 6 || fields[0] != "rank" || fields[2] != "dims" {
        return Err(lines.err(n, "expected `rank R dims I J K`"));
    }
    let rank: usize = lines.parse_fields(n, &fields[1..2])?[0];
    let dims = lines.parse_dims(n, &fields[3..])?;
    let mut factors = Vec::with_capacity(3);
    for &rows in &dims {
        let mut data = Vec::with_capacity(rows * rank);
        for _ in 0..rows {
            let (n, line) = lines.expect_content("factor row")?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != rank {
                return Err(lines.err(n, format!("expected {rank} values")));
            }
            data.extend(lines.parse_fields::<f64>(n, &fields)?);
        }
        factors.push(DMatrix::from_row_slice(rows, rank, &data));
    }
    if let Some((n, _)) = lines.next_content()? {
        return Err(lines.err(n, "trailing content after factor blocks"));
    }
    let c = factors.pop().expect("three factors");
    let b = factors.pop().expect("three factors");
    let a = factors.pop().expect("three factors");
    KruskalModel::new(a, b, c)
}
