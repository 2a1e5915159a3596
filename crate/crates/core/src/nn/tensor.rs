use crate::{Error, Result};

/// Row-major dense tensor of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        DenseTensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data mismatch"
        );
        DenseTensor { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        DenseTensor::from_vec(vec![1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Rows/cols of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "expected rank-2 tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = *self.shape.last().expect("rank >= 1");
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = *self.shape.last().expect("rank >= 1");
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.shape[1] + c] = v;
    }

    pub fn add_assign(&mut self, other: &DenseTensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// `self[N x I] * w[I x O] -> [N x O]`.
    pub fn matmul(&self, w: &DenseTensor) -> Result<DenseTensor> {
        let (n, i) = self.dims2()?;
        let (wi, o) = w.dims2()?;
        if i != wi {
            return Err(Error::ShapeMismatch(format!(
                "matmul inner dims {i} vs {wi}"
            )));
        }
        let mut out = DenseTensor::zeros(vec![n, o]);
        for r in 0..n {
            let x_row = self.row(r);
            let out_row = out.row_mut(r);
            for (k, &xv) in x_row.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let w_row = w.row(k);
                for (c, &wv) in w_row.iter().enumerate() {
                    out_row[c] += xv * wv;
                }
            }
        }
        Ok(out)
    }
}
