use crate::error::{Error, Result};
use crate::volgrid::Volume;

/// Dense row-major array of `f64` values.
///
/// Volumetric data uses the 5-rank layout `[batch, channels, depth, height,
/// width]`; a [`Volume`] with dims `(nx, ny, nz)` maps to `[1, 1, nz, ny, nx]`
/// with identical memory order. Scalars have an empty shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "tensor dims must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("zeros with zero-sized dim")
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("full with zero-sized dim")
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn dims5(&self) -> Result<[usize; 5]> {
        <[usize; 5]>::try_from(self.shape.as_slice())
            .map_err(|_| Error::Shape(format!("expected a 5-rank tensor, got {:?}", self.shape)))
    }

    /// `[1, 1, nz, ny, nx]` view of a volume.
    pub fn from_volume(v: &Volume) -> Self {
        Self::from_volumes(&[v]).expect("single volume batch")
    }

    /// Stacks equally shaped volumes into `[n, 1, nz, ny, nx]`.
    pub fn from_volumes(vs: &[&Volume]) -> Result<Self> {
        let first = vs
            .first()
            .ok_or_else(|| Error::Shape("empty volume batch".into()))?;
        let [nx, ny, nz] = first.dims();
        let mut data = Vec::with_capacity(vs.len() * first.len());
        for v in vs {
            if v.dims() != first.dims() {
                return Err(Error::Shape(format!(
                    "batch mixes dims {:?} and {:?}",
                    first.dims(),
                    v.dims()
                )));
            }
            data.extend(v.data().iter().map(|&x| x as f64));
        }
        Self::new(vec![vs.len(), 1, nz, ny, nx], data)
    }

    /// Channel `c` of batch item `n` as a volume.
    pub fn to_volume(&self, n: usize, c: usize, spacing: [f64; 3]) -> Result<Volume> {
        let [bn, bc, d, h, w] = self.dims5()?;
        if n >= bn || c >= bc {
            return Err(Error::Shape(format!(
                "item ({n}, {c}) out of range for shape {:?}",
                self.shape
            )));
        }
        let plane = d * h * w;
        let start = (n * bc + c) * plane;
        Volume::from_f64([w, h, d], spacing, &self.data[start..start + plane])
    }
}
