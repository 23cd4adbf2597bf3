use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"VECAPEMB";
/// magic + u32 count + u32 dim
pub const HEADER_LEN: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic: expected \"VECAPEMB\"")]
    BadMagic,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },
    #[error("{0} unexpected bytes after payload")]
    TrailingBytes(u64),
}

/// Dense row-major `count x dim` matrix of f32 embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    data: Array2<f32>,
}

impl EmbeddingMatrix {
    pub fn new(count: usize, dim: usize, data: Vec<f32>) -> Result<Self, EmbeddingError> {
        if dim == 0 {
            return Err(EmbeddingError::DimMismatch("dim must be positive".into()));
        }
        if u32::try_from(count).is_err() || u32::try_from(dim).is_err() {
            return Err(EmbeddingError::DimMismatch(format!(
                "{count}x{dim} does not fit the u32 header"
            )));
        }
        let data = Array2::from_shape_vec((count, dim), data).map_err(|_| {
            EmbeddingError::DimMismatch(format!("payload length does not match {count}x{dim}"))
        })?;
        Ok(Self { data })
    }

    pub fn from_array(data: Array2<f32>) -> Result<Self, EmbeddingError> {
        let (count, dim) = data.dim();
        Self::new(count, dim, data.into_iter().collect())
    }

    /// Narrows an f64 matrix to f32.
    pub fn from_f64(data: ArrayView2<'_, f64>) -> Result<Self, EmbeddingError> {
        Self::from_array(data.mapv(|v| v as f32))
    }

    pub fn count(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        self.data.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f32> {
        self.data.row(i)
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.data.mapv(f64::from)
    }

    /// True when every row has unit L2 norm within `tol`.
    pub fn is_normalized(&self, tol: f64) -> bool {
        self.data.rows().into_iter().all(|r| {
            let n = r
                .iter()
                .map(|&v| f64::from(v) * f64::from(v))
                .sum::<f64>()
                .sqrt();
            (n - 1.0).abs() <= tol
        })
    }

    /// Scales every non-zero row to unit norm.
    pub fn normalize_rows(&mut self) {
        for mut r in self.data.rows_mut() {
            let n = r
                .iter()
                .map(|&v| f64::from(v) * f64::from(v))
                .sum::<f64>()
                .sqrt();
            if n > 0.0 {
                r.mapv_inplace(|v| (f64::from(v) / n) as f32);
            }
        }
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), EmbeddingError> {
        out.write_all(EMBEDDING_MAGIC)?;
        out.write_all(&(self.count() as u32).to_le_bytes())?;
        out.write_all(&(self.dim() as u32).to_le_bytes())?;
        for v in self.data.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self, EmbeddingError> {
        let mut header = [0u8; HEADER_LEN];
        let got = read_up_to(&mut input, &mut header)?;
        if got < EMBEDDING_MAGIC.len() || &header[..8] != EMBEDDING_MAGIC {
            return Err(EmbeddingError::BadMagic);
        }
        if got < HEADER_LEN {
            return Err(EmbeddingError::TruncatedPayload {
                expected: HEADER_LEN as u64,
                found: got as u64,
            });
        }
        let count = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        if dim == 0 {
            return Err(EmbeddingError::DimMismatch("header dim is 0".into()));
        }
        let expected = count as u64 * dim as u64 * 4;
        // Read incrementally so a lying header cannot force a huge allocation.
        let mut payload = Vec::new();
        let found = input.by_ref().take(expected).read_to_end(&mut payload)? as u64;
        if found < expected {
            return Err(EmbeddingError::TruncatedPayload { expected, found });
        }
        let mut extra = Vec::new();
        let trailing = input.read_to_end(&mut extra)? as u64;
        if trailing > 0 {
            return Err(EmbeddingError::TrailingBytes(trailing));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(count, dim, data)
    }
}

fn read_up_to<R: Read>(input: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match input.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix, EmbeddingError> {
    EmbeddingMatrix::read_from(BufReader::new(File::open(path)?))
}

pub fn write_embeddings(
    matrix: &EmbeddingMatrix,
    path: impl AsRef<Path>,
) -> Result<(), EmbeddingError> {
    matrix.write_to(BufWriter::new(File::create(path)?))
}
