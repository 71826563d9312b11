use crate::ir::DataType;

/// Dense row-major integer tensor. Elements are stored widened to `i32`
/// whatever the logical type.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tensor {
    pub dtype: DataType,
    pub shape: Vec<usize>,
    pub data: Vec<i32>,
}

impl Tensor {
    pub fn new(dtype: DataType, shape: Vec<usize>, data: Vec<i32>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor data does not match shape {shape:?}");
        Tensor { dtype, shape, data }
    }

    pub fn zeros(dtype: DataType, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(dtype, shape, vec![0; n])
    }

    pub fn i8(shape: Vec<usize>, data: &[i8]) -> Tensor {
        Tensor::new(DataType::I8, shape, data.iter().map(|&v| v as i32).collect())
    }

    pub fn i32(shape: Vec<usize>, data: &[i32]) -> Tensor {
        Tensor::new(DataType::I32, shape, data.to_vec())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn size_bytes(&self) -> usize {
        self.numel() * self.dtype.bytes()
    }

    pub fn strides(&self) -> Vec<usize> {
        strides(&self.shape)
    }

    /// Little-endian encoding in the tensor's element type.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.size_bytes());
        for &v in &self.data {
            match self.dtype.bits {
                8 => out.push(v as u8),
                16 => out.extend_from_slice(&(v as i16).to_le_bytes()),
                _ => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
        out
    }

    pub fn from_bytes(dtype: DataType, shape: Vec<usize>, bytes: &[u8]) -> Option<Tensor> {
        let n: usize = shape.iter().product();
        if bytes.len() != n * dtype.bytes() {
            return None;
        }
        let data = match (dtype.bits, dtype.signed) {
            (8, true) => bytes.iter().map(|&b| b as i8 as i32).collect(),
            (8, false) => bytes.iter().map(|&b| b as i32).collect(),
            (16, true) => bytes.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as i32).collect(),
            (16, false) => bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as i32).collect(),
            _ => bytes.chunks_exact(4).map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
        };
        Some(Tensor { dtype, shape, data })
    }

    /// Copies out the box `[origin, origin + extent)`.
    pub fn region(&self, origin: &[usize], extent: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(extent.iter().product());
        for_each_index(extent, |idx| {
            data.push(self.data[flat(&self.shape, origin, idx)]);
        });
        Tensor::new(self.dtype, extent.to_vec(), data)
    }

    /// Writes `tile` into the box starting at `origin`.
    pub fn write_region(&mut self, origin: &[usize], tile: &Tensor) {
        let shape = self.shape.clone();
        let mut i = 0;
        for_each_index(&tile.shape, |idx| {
            self.data[flat(&shape, origin, idx)] = tile.data[i];
            i += 1;
        });
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

fn flat(shape: &[usize], origin: &[usize], idx: &[usize]) -> usize {
    let mut off = 0;
    for d in 0..shape.len() {
        off = off * shape[d] + origin[d] + idx[d];
    }
    off
}

/// Calls `f` on every multi-index of `extent` in row-major order.
pub(crate) fn for_each_index(extent: &[usize], mut f: impl FnMut(&[usize])) {
    if extent.contains(&0) {
        return;
    }
    let mut idx = vec![0; extent.len()];
    loop {
        f(&idx);
        let mut d = extent.len();
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < extent[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_roundtrip() {
        let t = Tensor::new(DataType::I16, vec![3], vec![-2, 300, 7]);
        assert_eq!(Tensor::from_bytes(DataType::I16, vec![3], &t.to_bytes()).unwrap(), t);
        let t = Tensor::i8(vec![2], &[-128, 127]);
        assert_eq!(t.to_bytes(), vec![0x80, 0x7f]);
    }

    #[test]
    fn region_write_back() {
        let t = Tensor::i32(vec![3, 4], &(0..12).collect::<Vec<_>>());
        let r = t.region(&[1, 2], &[2, 2]);
        assert_eq!(r.data, vec![6, 7, 10, 11]);
        let mut z = Tensor::zeros(DataType::I32, vec![3, 4]);
        z.write_region(&[1, 2], &r);
        assert_eq!(z.data[6], 6);
        assert_eq!(z.data[11], 11);
        assert_eq!(z.data.iter().filter(|&&v| v != 0).count(), 4);
    }
}
