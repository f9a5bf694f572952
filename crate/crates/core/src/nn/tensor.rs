use ndarray::{Array2, ArrayView1, ArrayViewMut1};

use crate::error::{Error, Result};
use crate::real::Real;

/// Rank-3 activation laid out as `(scale * time) x channel`, scale-major.
///
/// Plain temporal sequences are the `scales == 1` case.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleTimeTensor<F> {
    scales: usize,
    time: usize,
    data: Array2<F>,
}

impl<F: Real> ScaleTimeTensor<F> {
    pub fn new(scales: usize, time: usize, data: Array2<F>) -> Result<Self> {
        if scales == 0 || time == 0 || data.nrows() != scales * time {
            return Err(Error::shape(
                "scale-time tensor",
                format!("{} rows cannot form {scales} x {time}", data.nrows()),
            ));
        }
        Ok(Self { scales, time, data })
    }

    pub fn zeros(scales: usize, time: usize, channels: usize) -> Self {
        Self {
            scales,
            time,
            data: Array2::zeros((scales * time, channels)),
        }
    }

    /// A single-scale sequence from a time-major row buffer.
    pub fn from_sequence(time: usize, channels: usize, values: &[f32]) -> Result<Self> {
        let data = Array2::from_shape_vec((time, channels), values.iter().map(|&v| F::c(v as f64)).collect())
            .map_err(|e| Error::shape("sequence", e.to_string()))?;
        Self::new(1, time, data)
    }

    pub fn scales(&self) -> usize {
        self.scales
    }

    pub fn time(&self) -> usize {
        self.time
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.scales, self.time, self.channels())
    }

    pub fn data(&self) -> &Array2<F> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<F> {
        &mut self.data
    }

    pub fn into_data(self) -> Array2<F> {
        self.data
    }

    pub fn index(&self, s: usize, t: usize) -> usize {
        s * self.time + t
    }

    pub fn at(&self, s: usize, t: usize, c: usize) -> F {
        self.data[[self.index(s, t), c]]
    }

    pub fn cell(&self, s: usize, t: usize) -> ArrayView1<'_, F> {
        self.data.row(self.index(s, t))
    }

    pub fn cell_mut(&mut self, s: usize, t: usize) -> ArrayViewMut1<'_, F> {
        let i = self.index(s, t);
        self.data.row_mut(i)
    }

    /// Same layout, new payload.
    pub fn with_data(&self, data: Array2<F>) -> Self {
        debug_assert_eq!(data.nrows(), self.data.nrows());
        Self {
            scales: self.scales,
            time: self.time,
            data,
        }
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.scales == other.scales && self.time == other.time && self.channels() == other.channels()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<G: Real>(&self) -> ScaleTimeTensor<G> {
        ScaleTimeTensor {
            scales: self.scales,
            time: self.time,
            data: self.data.mapv(|v| G::c(v.f64())),
        }
    }
}
