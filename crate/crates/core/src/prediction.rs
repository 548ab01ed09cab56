use crate::error::{dim_err, Error, Result};
use crate::tensor::DenseTensor;

/// Extent, boundary and distance maps, each `H x W` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultitaskPrediction {
    pub extent: DenseTensor,
    pub boundary: DenseTensor,
    pub distance: DenseTensor,
}

impl MultitaskPrediction {
    pub fn new(extent: DenseTensor, boundary: DenseTensor, distance: DenseTensor) -> Result<Self> {
        let p = Self {
            extent,
            boundary,
            distance,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.extent.shape();
        if s.len() != 2 || self.boundary.shape() != s || self.distance.shape() != s {
            return dim_err(format!(
                "prediction layers must share one H x W shape: {:?}, {:?}, {:?}",
                s,
                self.boundary.shape(),
                self.distance.shape()
            ));
        }
        for (name, layer) in self.layers() {
            if let Some(bad) = layer.data().iter().find(|x| !(0.0..=1.0).contains(*x)) {
                return Err(Error::Range(format!("{name} layer holds {bad} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.extent.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.extent.shape()[1]
    }

    pub fn layers(&self) -> [(&'static str, &DenseTensor); 3] {
        [
            ("extent", &self.extent),
            ("boundary", &self.boundary),
            ("distance", &self.distance),
        ]
    }

    /// Stacks the layers into a `3 x H x W` tensor (extent, boundary, distance).
    pub fn to_stack(&self) -> DenseTensor {
        let mut data = Vec::with_capacity(3 * self.extent.len());
        for (_, l) in self.layers() {
            data.extend_from_slice(l.data());
        }
        DenseTensor::new(vec![3, self.height(), self.width()], data).expect("validated layers")
    }

    pub fn from_stack(stack: &DenseTensor) -> Result<Self> {
        let s = stack.shape();
        if s.len() != 3 || s[0] != 3 {
            return dim_err(format!("expected a 3 x H x W stack, got {s:?}"));
        }
        let n = s[1] * s[2];
        let layer = |i: usize| DenseTensor::new(vec![s[1], s[2]], stack.data()[i * n..(i + 1) * n].to_vec());
        Self::new(layer(0)?, layer(1)?, layer(2)?)
    }
}
