use super::OpError;
use std::fmt;

/// Dense row-major extents. Every extent is at least 1 and the element count
/// must fit in 63 bits, so index arithmetic cannot overflow.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape {
    dims: Vec<usize>,
}

impl Shape {
    pub fn new(dims: Vec<usize>) -> Result<Self, OpError> {
        let mut count: u128 = 1;
        for &d in &dims {
            if d == 0 {
                return Err(OpError::InvalidShape("zero extent".into()));
            }
            count *= d as u128;
            if count >= (1u128 << 63) {
                return Err(OpError::InvalidShape("element count exceeds 2^63-1".into()));
            }
        }
        Ok(Shape { dims })
    }

    /// Rank-0 shape holding exactly one element.
    pub fn scalar() -> Self {
        Shape { dims: Vec::new() }
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Total element count.
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false // extents are >= 1, a tensor always holds at least one element
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.dims.is_empty() {
            return write!(f, "scalar");
        }
        let parts: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("x"))
    }
}

/// Dense f32 tensor, row-major. Equality is bitwise on the value buffer
/// (NaN == NaN, +0.0 != -0.0), matching how tensors are hashed.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Shape,
    values: Vec<f32>,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Eq for Tensor {}

// Canonical serialization tags. These bytes are normative: they feed every
// hash and every on-disk artifact.
pub(crate) const TENSOR_TAG: u8 = 0x54;

impl Tensor {
    pub fn new(shape: Shape, values: Vec<f32>) -> Result<Self, OpError> {
        if shape.len() != values.len() {
            return Err(OpError::InvalidShape(format!(
                "shape {} wants {} values, got {}",
                shape,
                shape.len(),
                values.len()
            )));
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.len();
        Tensor { shape, values: vec![0.0; n] }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { shape: Shape::scalar(), values: vec![v] }
    }

    pub fn from_rows(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self, OpError> {
        Tensor::new(Shape::new(vec![rows, cols])?, values)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Canonical byte encoding: tag 0x54, rank as u64 LE, each extent as
    /// u64 LE, then raw f32 bit patterns LE in row-major order. Injective:
    /// rank is explicit, so `[1]` and a scalar encode differently.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(1 + 8 + 8 * self.shape.rank() + 4 * self.values.len());
        out.push(TENSOR_TAG);
        out.extend_from_slice(&(self.shape.rank() as u64).to_le_bytes());
        for &d in self.shape.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.values {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        out
    }

    /// Decodes one canonical tensor from the front of `bytes`, returning it
    /// with the number of bytes consumed.
    pub fn from_canonical_bytes(bytes: &[u8]) -> Result<(Tensor, usize), OpError> {
        let bad = |m: &str| OpError::InvalidShape(format!("tensor decode: {m}"));
        if bytes.first() != Some(&TENSOR_TAG) {
            return Err(bad("missing tag"));
        }
        let mut off = 1usize;
        let take_u64 = |off: &mut usize| -> Result<u64, OpError> {
            let end = *off + 8;
            let s = bytes.get(*off..end).ok_or_else(|| bad("truncated header"))?;
            *off = end;
            Ok(u64::from_le_bytes(s.try_into().unwrap()))
        };
        let rank = take_u64(&mut off)? as usize;
        if rank > 8 {
            return Err(bad("rank too large"));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(take_u64(&mut off)? as usize);
        }
        let shape = Shape::new(dims)?;
        let n = shape.len();
        let end = off
            .checked_add(4 * n)
            .filter(|e| *e <= bytes.len())
            .ok_or_else(|| bad("truncated values"))?;
        let mut values = Vec::with_capacity(n);
        for chunk in bytes[off..end].chunks_exact(4) {
            values.push(f32::from_bits(u32::from_le_bytes(chunk.try_into().unwrap())));
        }
        Ok((Tensor { shape, values }, end))
    }
}

/// Materializes the transpose of a rank-2 tensor as a contiguous row-major
/// copy. Pure data movement, no arithmetic.
pub fn transpose2d(t: &Tensor) -> Result<Tensor, OpError> {
    let dims = t.shape().dims();
    if dims.len() != 2 {
        return Err(OpError::ShapeMismatch {
            op: "transpose2d",
            detail: format!("expected rank 2, got {}", t.shape()),
        });
    }
    let (r, c) = (dims[0], dims[1]);
    let src = t.values();
    let mut out = vec![0.0f32; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Tensor::new(Shape::new(vec![c, r]).unwrap(), out)
}
