//! Matrix Market reader and writer.
//!
//! Sparse coefficient matrices use the `coordinate` layout (real, integer or
//! pattern fields; general or symmetric storage). Dense factors use the
//! `array` layout.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sparse::SparseSymMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Field {
    Real,
    Integer,
    Pattern,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Symmetry {
    General,
    Symmetric,
}

struct Header {
    coordinate: bool,
    field: Field,
    symmetry: Symmetry,
}

fn parse_header(line: &str, path: &Path) -> Result<Header> {
    let tokens: Vec<String> = line.split_whitespace().map(|t| t.to_ascii_lowercase()).collect();
    if tokens.len() != 5 || tokens[0] != "%%matrixmarket" || tokens[1] != "matrix" {
        return Err(Error::parse(path, format!("line 1: invalid Matrix Market banner `{line}`")));
    }
    let coordinate = match tokens[2].as_str() {
        "coordinate" => true,
        "array" => false,
        other => return Err(Error::parse(path, format!("line 1: unsupported format `{other}`"))),
    };
    let field = match tokens[3].as_str() {
        "real" | "double" => Field::Real,
        "integer" => Field::Integer,
        "pattern" => Field::Pattern,
        other => return Err(Error::parse(path, format!("line 1: unsupported field `{other}`"))),
    };
    let symmetry = match tokens[4].as_str() {
        "general" => Symmetry::General,
        "symmetric" => Symmetry::Symmetric,
        other => return Err(Error::parse(path, format!("line 1: unsupported symmetry `{other}`"))),
    };
    Ok(Header { coordinate, field, symmetry })
}

/// Non-comment lines with their 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .skip(1)
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('%'))
}

fn parse_num<T: Scalar>(tok: Option<&str>, line: usize, path: &Path) -> Result<T> {
    let tok = tok.ok_or_else(|| Error::parse(path, format!("line {line}: missing value")))?;
    let v: f64 = tok
        .parse()
        .map_err(|_| Error::parse(path, format!("line {line}: invalid number `{tok}`")))?;
    Ok(T::lit(v))
}

fn parse_index(tok: Option<&str>, bound: usize, line: usize, path: &Path) -> Result<usize> {
    let tok = tok.ok_or_else(|| Error::parse(path, format!("line {line}: missing index")))?;
    let i: usize = tok
        .parse()
        .map_err(|_| Error::parse(path, format!("line {line}: invalid index `{tok}`")))?;
    if i == 0 || i > bound {
        return Err(Error::parse(path, format!("line {line}: index {i} outside 1..={bound}")));
    }
    Ok(i - 1)
}

pub fn parse_sparse<T: Scalar>(text: &str, path: &Path) -> Result<SparseSymMatrix<T>> {
    let first = text.lines().next().ok_or_else(|| Error::parse(path, "empty file"))?;
    let header = parse_header(first, path)?;
    if !header.coordinate {
        let dense = parse_dense::<T>(text, path)?;
        return SparseSymMatrix::from_dense(&dense);
    }
    let mut lines = data_lines(text);
    let (size_line, size) = lines.next().ok_or_else(|| Error::parse(path, "missing size line"))?;
    let dims: Vec<usize> = size
        .split_whitespace()
        .map(|t| t.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::parse(path, format!("line {size_line}: invalid size line")))?;
    if dims.len() != 3 {
        return Err(Error::parse(path, format!("line {size_line}: expected `rows cols nnz`")));
    }
    let (nr, nc, nnz) = (dims[0], dims[1], dims[2]);
    if nr != nc {
        return Err(Error::parse(path, format!("line {size_line}: matrix is {nr}x{nc}, not square")));
    }
    let mut triplets = Vec::with_capacity(2 * nnz);
    let mut count = 0;
    for (ln, l) in lines {
        let mut tok = l.split_whitespace();
        let i = parse_index(tok.next(), nr, ln, path)?;
        let j = parse_index(tok.next(), nc, ln, path)?;
        let v = match header.field {
            Field::Pattern => T::one(),
            Field::Real | Field::Integer => parse_num(tok.next(), ln, path)?,
        };
        triplets.push((i, j, v));
        if header.symmetry == Symmetry::Symmetric && i != j {
            triplets.push((j, i, v));
        }
        count += 1;
    }
    if count != nnz {
        return Err(Error::parse(path, format!("expected {nnz} entries, found {count}")));
    }
    SparseSymMatrix::from_triplets(nr, &triplets)
}

pub fn parse_dense<T: Scalar>(text: &str, path: &Path) -> Result<DMatrix<T>> {
    let first = text.lines().next().ok_or_else(|| Error::parse(path, "empty file"))?;
    let header = parse_header(first, path)?;
    if header.coordinate {
        return Err(Error::parse(path, "line 1: expected `array` layout for a dense matrix"));
    }
    if header.field == Field::Pattern {
        return Err(Error::parse(path, "line 1: pattern field is not valid for arrays"));
    }
    let mut lines = data_lines(text);
    let (size_line, size) = lines.next().ok_or_else(|| Error::parse(path, "missing size line"))?;
    let dims: Vec<usize> = size
        .split_whitespace()
        .map(|t| t.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::parse(path, format!("line {size_line}: invalid size line")))?;
    if dims.len() != 2 {
        return Err(Error::parse(path, format!("line {size_line}: expected `rows cols`")));
    }
    let (nr, nc) = (dims[0], dims[1]);
    let mut m = DMatrix::zeros(nr, nc);
    let positions: Vec<(usize, usize)> = match header.symmetry {
        Symmetry::General => (0..nc).flat_map(|j| (0..nr).map(move |i| (i, j))).collect(),
        Symmetry::Symmetric => (0..nc).flat_map(|j| (j..nr).map(move |i| (i, j))).collect(),
    };
    let mut it = positions.iter();
    for (ln, l) in lines {
        for tok in l.split_whitespace() {
            let &(i, j) = it
                .next()
                .ok_or_else(|| Error::parse(path, format!("line {ln}: too many values")))?;
            let v: T = parse_num(Some(tok), ln, path)?;
            m[(i, j)] = v;
            if header.symmetry == Symmetry::Symmetric {
                m[(j, i)] = v;
            }
        }
    }
    if it.next().is_some() {
        return Err(Error::parse(path, "too few values for declared array size"));
    }
    Ok(m)
}

pub fn read_sparse<T: Scalar>(path: &Path) -> Result<SparseSymMatrix<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_sparse(&text, path)
}

pub fn read_dense<T: Scalar>(path: &Path) -> Result<DMatrix<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dense(&text, path)
}

pub fn format_sparse<T: Scalar>(m: &SparseSymMatrix<T>) -> String {
    let lower = m.lower_triplets();
    let mut s = String::with_capacity(32 * lower.len() + 64);
    s.push_str("%%MatrixMarket matrix coordinate real symmetric\n");
    s.push_str(&format!("{} {} {}\n", m.dim(), m.dim(), lower.len()));
    for (i, j, v) in lower {
        s.push_str(&format!("{} {} {:e}\n", i + 1, j + 1, v));
    }
    s
}

pub fn format_dense<T: Scalar>(m: &DMatrix<T>) -> String {
    let mut s = String::with_capacity(24 * m.len() + 64);
    s.push_str("%%MatrixMarket matrix array real general\n");
    s.push_str(&format!("{} {}\n", m.nrows(), m.ncols()));
    for v in m.iter() {
        s.push_str(&format!("{v:e}\n"));
    }
    s
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn write_sparse<T: Scalar>(path: &Path, m: &SparseSymMatrix<T>) -> Result<()> {
    write_text(path, &format_sparse(m))
}

pub fn write_dense<T: Scalar>(path: &Path, m: &DMatrix<T>) -> Result<()> {
    write_text(path, &format_dense(m))
}
