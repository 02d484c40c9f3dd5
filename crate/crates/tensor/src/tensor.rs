use std::io::{Read, Write};

use crate::error::{Result, TensorError};

const DUMP_MAGIC: &[u8; 4] = b"DHTN";

/// Dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Shape(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::Shape(format!(
                "zip of {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                assert!(i < n, "index {index:?} out of bounds for {:?}", self.shape);
                acc * n + i
            })
    }

    /// Serialize as a little-endian dump: magic, u32 rank, u64 extents, f64 data.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_dump_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.shape.len() + 8 * self.data.len());
        self.write_dump(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Inverse of [`Tensor::write_dump`]. A short read is a format error.
    pub fn read_dump<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != DUMP_MAGIC {
            return Err(TensorError::Format(format!("bad tensor magic {magic:?}")));
        }
        let mut b4 = [0u8; 4];
        read_exact(&mut r, &mut b4, "rank")?;
        let rank = u32::from_le_bytes(b4) as usize;
        if rank > 16 {
            return Err(TensorError::Format(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut b8 = [0u8; 8];
        for _ in 0..rank {
            read_exact(&mut r, &mut b8, "extent")?;
            shape.push(u64::from_le_bytes(b8) as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= (1 << 32))
            .ok_or_else(|| TensorError::Format(format!("implausible extents {shape:?}")))?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            read_exact(&mut r, &mut b8, "data")?;
            data.push(f64::from_le_bytes(b8));
        }
        Ok(Self { shape, data })
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => TensorError::Format(format!("truncated tensor dump ({what})")),
        _ => TensorError::Io(e),
    })
}

/// Numpy-style broadcast of two shapes, aligned from the trailing axis.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::Shape(format!(
                    "shapes {a:?} and {b:?} are not broadcastable"
                )))
            }
        };
    }
    Ok(out)
}

/// Strides that read `shape` as if it had been broadcast to `out` (0 on broadcast axes).
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let lead = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[lead + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visit every output index in row-major order, yielding the flat offsets into
/// two broadcast operands.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..n {
        f(o, oa, ob);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}
