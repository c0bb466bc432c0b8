//! Dense row-major matrices and the layout guards every kernel relies on.
//!
//! Activations of shape `(B, T, H)` are flattened to `(B·T, H)` matrices and
//! processed one row at a time. The only non-contiguous layout this crate
//! produces is a transposed view; kernels reject it up front.

use std::fmt;
use std::io::{Read, Write};

use num_traits::Float;

use crate::error::{shape_err, Error, Result};

// Offsets are computed in `usize`; the overflow class of 32-bit indexing is
// removed by requiring a 64-bit target.
const _: () = assert!(usize::BITS >= 64);

/// Largest flat offset addressable with signed 32-bit arithmetic.
pub const I32_MAX_OFFSET: u64 = i32::MAX as u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub const fn byte_width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::Parse(format!("unknown dtype `{other}`"))),
        }
    }
}

/// Scalar element type a kernel can run in.
pub trait Element:
    Float + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const DTYPE: DType;

    fn cast_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::cast_f64(n as f64)
    }

    fn parse(s: &str) -> Option<Self>;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn cast_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn parse(s: &str) -> Option<Self> {
        s.trim().parse().ok()
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn cast_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn parse(s: &str) -> Option<Self> {
        s.trim().parse().ok()
    }
}

/// A `rows × cols` matrix stored in a flat buffer.
///
/// When `contiguous` is false the matrix is a transposed view: the buffer is
/// laid out row-major for the `cols × rows` original.
#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
    contiguous: bool,
}

impl<T: Element> Matrix<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(shape_err(format!("matrix dimensions must be positive, got {rows}x{cols}")));
        }
        let expected = rows * cols;
        if data.len() != expected {
            return Err(Error::SizeMismatch { expected, got: data.len() });
        }
        Ok(Self { rows, cols, data, contiguous: true })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self { rows, cols, data: vec![T::zero(); rows * cols], contiguous: true }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn byte_size(&self) -> u64 {
        (self.data.len() * T::DTYPE.byte_width()) as u64
    }

    #[inline]
    pub fn is_contiguous(&self) -> bool {
        self.contiguous
    }

    /// Raw storage in physical order. For a transposed view this is NOT the
    /// row-major order of `self.shape()`.
    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Element `(i, j)` honouring the layout flag.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        debug_assert!(i < self.rows && j < self.cols);
        if self.contiguous {
            self.data[flat_offset(i, j, self.cols)]
        } else {
            self.data[flat_offset(j, i, self.rows)]
        }
    }

    /// Row `i` of a contiguous matrix.
    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        debug_assert!(self.contiguous);
        let start = i * self.cols;
        &self.data[start..start + self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        debug_assert!(self.contiguous);
        let start = i * self.cols;
        &mut self.data[start..start + self.cols]
    }

    /// Transposed view sharing the same storage; flagged non-contiguous.
    pub fn transpose_view(self) -> Self {
        assert!(self.contiguous, "transpose_view of a view is not supported");
        Self { rows: self.cols, cols: self.rows, data: self.data, contiguous: false }
    }

    /// Materialize a row-major copy (no-op for contiguous input).
    pub fn to_contiguous(&self) -> Self {
        if self.contiguous {
            return self.clone();
        }
        Self::from_fn(self.rows, self.cols, |i, j| self.get(i, j))
    }

    /// Reinterpret the raw storage as row-major, discarding the layout flag.
    /// This is what an unguarded kernel effectively does with a strided view.
    pub fn reinterpret_as_contiguous(self) -> Self {
        Self { contiguous: true, ..self }
    }

    pub fn cast<U: Element>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| U::cast_f64(v.as_f64())).collect(),
            contiguous: self.contiguous,
        }
    }

    /// Copy of rows `start..end` of a contiguous matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        debug_assert!(self.contiguous && start < end && end <= self.rows);
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
            contiguous: true,
        }
    }

    pub fn vstack(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(shape_err(format!("vstack of {} and {} columns", self.cols, other.cols)));
        }
        let (a, b) = (self.to_contiguous(), other.to_contiguous());
        let mut data = a.data;
        data.extend_from_slice(&b.data);
        Self::from_vec(self.rows + other.rows, self.cols, data)
    }

    /// Write the CSV fixture form: a header row `rows,cols,dtype` carrying the
    /// values, then one line per matrix row.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::WriterBuilder::new().flexible(true).has_headers(false).from_writer(w);
        let io = |e: csv::Error| Error::Parse(e.to_string());
        out.write_record([self.rows.to_string(), self.cols.to_string(), T::DTYPE.to_string()])
            .map_err(io)?;
        for i in 0..self.rows {
            out.write_record((0..self.cols).map(|j| self.get(i, j).to_string())).map_err(io)?;
        }
        out.flush().map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().flexible(true).has_headers(false).from_reader(r);
        let mut records = rdr.records();
        let header = records
            .next()
            .ok_or_else(|| Error::Parse("empty fixture".into()))?
            .map_err(|e| Error::Parse(e.to_string()))?;
        if header.len() != 3 {
            return Err(Error::Parse(format!("header must be rows,cols,dtype; got {} fields", header.len())));
        }
        let dim = |s: &str| s.trim().parse::<usize>().map_err(|e| Error::Parse(format!("`{s}`: {e}")));
        let (rows, cols) = (dim(&header[0])?, dim(&header[1])?);
        let dtype: DType = header[2].parse()?;
        if dtype != T::DTYPE {
            return Err(Error::Parse(format!("fixture dtype {dtype} does not match {}", T::DTYPE)));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for (i, rec) in records.enumerate() {
            let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
            if rec.len() != cols {
                return Err(Error::Parse(format!("row {i} has {} fields, expected {cols}", rec.len())));
            }
            for field in rec.iter() {
                data.push(T::parse(field).ok_or_else(|| Error::Parse(format!("bad number `{field}`")))?);
            }
        }
        Self::from_vec(rows, cols, data)
    }
}

impl<T> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Matrix")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("dtype", &std::any::type_name::<T>())
            .field("contiguous", &self.contiguous)
            .finish()
    }
}

/// A dense vector (γ, β, per-row targets are kept as plain slices).
#[derive(Debug, Clone, PartialEq)]
pub struct Vector<T> {
    data: Vec<T>,
}

impl<T: Element> Vector<T> {
    pub fn from_vec(data: Vec<T>) -> Result<Self> {
        if data.is_empty() {
            return Err(shape_err("vector must have at least one element"));
        }
        Ok(Self { data })
    }

    pub fn filled(len: usize, value: T) -> Self {
        assert!(len > 0, "vector must have at least one element");
        Self { data: vec![value; len] }
    }

    pub fn zeros(len: usize) -> Self {
        Self::filled(len, T::zero())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn cast<U: Element>(&self) -> Vector<U> {
        Vector { data: self.data.iter().map(|&v| U::cast_f64(v.as_f64())).collect() }
    }
}

/// View a `(batch, seq, hidden)` buffer as a `(batch·seq, hidden)` matrix.
pub fn flatten<T: Element>(batch: usize, seq: usize, hidden: usize, buffer: Vec<T>) -> Result<Matrix<T>> {
    let expected = batch * seq * hidden;
    if buffer.len() != expected {
        return Err(Error::SizeMismatch { expected, got: buffer.len() });
    }
    Matrix::from_vec(batch * seq, hidden, buffer)
}

/// Reject strided views. Every kernel entry point calls this first.
pub fn assert_contiguous<T: Element>(m: &Matrix<T>, name: &'static str) -> Result<()> {
    if m.is_contiguous() || m.len() == 1 {
        Ok(())
    } else {
        Err(Error::NonContiguousInput(name))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexWidth {
    Narrow32,
    Wide64,
}

/// Whether the largest flat offset of a `rows × cols` buffer fits a signed
/// 32-bit integer.
pub fn check_index_width(rows: u64, cols: u64) -> IndexWidth {
    let elems = rows as u128 * cols as u128;
    if elems > 0 && elems - 1 > I32_MAX_OFFSET as u128 {
        IndexWidth::Wide64
    } else {
        IndexWidth::Narrow32
    }
}

/// Flat row-major offset, always computed in 64-bit arithmetic.
#[inline]
pub fn flat_offset(row: usize, col: usize, cols: usize) -> usize {
    row * cols + col
}

/// The same offset computed the way an `int32` program id would, wrapping on
/// overflow. Used only to demonstrate the failure mode.
#[inline]
pub fn flat_offset_i32_wrapping(row: usize, col: usize, cols: usize) -> i32 {
    (row as i32).wrapping_mul(cols as i32).wrapping_add(col as i32)
}
