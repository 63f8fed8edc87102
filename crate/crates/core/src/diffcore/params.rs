use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name and shape of one named block of parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl SegmentSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        SegmentSpec {
            name: name.into(),
            shape,
        }
    }

    pub fn size(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Flat view of every trainable weight: the space gradients, Hessian-vector
/// products and landscape directions live in.
///
/// Values are stored contiguously in segment order, so flattening is free and
/// `with_values(flatten())` is the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    segments: Vec<SegmentSpec>,
    offsets: Vec<usize>,
    values: Vec<f64>,
}

impl ParameterVector {
    pub fn zeros(segments: Vec<SegmentSpec>) -> Result<Self> {
        let total = segments.iter().map(SegmentSpec::size).sum();
        Self::from_flat(segments, vec![0.0; total])
    }

    pub fn from_flat(segments: Vec<SegmentSpec>, values: Vec<f64>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::contract(
                "parameter vector needs at least one segment",
            ));
        }
        let mut offsets = Vec::with_capacity(segments.len());
        let mut total = 0;
        for s in &segments {
            if s.shape.is_empty() || s.shape.contains(&0) {
                return Err(Error::shape(format!(
                    "segment `{}` has non-positive shape {:?}",
                    s.name, s.shape
                )));
            }
            offsets.push(total);
            total += s.size();
        }
        if total != values.len() {
            return Err(Error::Dimension {
                expected: total,
                got: values.len(),
            });
        }
        Ok(ParameterVector {
            segments,
            offsets,
            values,
        })
    }

    /// Same layout as `self`, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::Dimension {
                expected: self.values.len(),
                got: values.len(),
            });
        }
        Ok(ParameterVector {
            segments: self.segments.clone(),
            offsets: self.offsets.clone(),
            values,
        })
    }

    pub fn zeros_like(&self) -> Self {
        ParameterVector {
            segments: self.segments.clone(),
            offsets: self.offsets.clone(),
            values: vec![0.0; self.values.len()],
        }
    }

    pub fn total_dim(&self) -> usize {
        self.values.len()
    }

    pub fn segments(&self) -> &[SegmentSpec] {
        &self.segments
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn segment(&self, i: usize) -> &[f64] {
        let start = self.offsets[i];
        &self.values[start..start + self.segments[i].size()]
    }

    pub fn segment_mut(&mut self, i: usize) -> &mut [f64] {
        let start = self.offsets[i];
        let len = self.segments[i].size();
        &mut self.values[start..start + len]
    }

    pub fn segment_index(&self, name: &str) -> Option<usize> {
        self.segments.iter().position(|s| s.name == name)
    }

    pub fn flatten(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.values
    }

    pub fn same_layout(&self, other: &ParameterVector) -> bool {
        self.segments == other.segments
    }

    pub(crate) fn check_layout(&self, other: &ParameterVector) -> Result<()> {
        if self.total_dim() != other.total_dim() {
            return Err(Error::Dimension {
                expected: self.total_dim(),
                got: other.total_dim(),
            });
        }
        Ok(())
    }

    pub fn dot(&self, other: &ParameterVector) -> f64 {
        dot(&self.values, &other.values)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: f64, x: &ParameterVector) {
        for (s, xi) in self.values.iter_mut().zip(&x.values) {
            *s += a * xi;
        }
    }

    pub fn scaled(&self, a: f64) -> ParameterVector {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= a);
        out
    }

    /// Name of the first segment holding a NaN or infinity.
    pub fn first_non_finite_segment(&self) -> Option<&str> {
        (0..self.segments.len())
            .find(|&i| self.segment(i).iter().any(|v| !v.is_finite()))
            .map(|i| self.segments[i].name.as_str())
    }

    /// Cheap order-sensitive checksum over the raw bit patterns (FNV-1a).
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.values {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layout() -> Vec<SegmentSpec> {
        vec![
            SegmentSpec::new("w", vec![2, 3]),
            SegmentSpec::new("b", vec![2]),
        ]
    }

    #[test]
    fn total_dim_is_sum_of_segments() {
        let p = ParameterVector::zeros(layout()).unwrap();
        assert_eq!(p.total_dim(), 8);
        assert_eq!(p.segment(1).len(), 2);
        assert!(ParameterVector::from_flat(layout(), vec![0.0; 7]).is_err());
    }

    #[test]
    fn non_finite_segment_is_named() {
        let mut p = ParameterVector::zeros(layout()).unwrap();
        p.segment_mut(1)[0] = f64::INFINITY;
        assert_eq!(p.first_non_finite_segment(), Some("b"));
    }

    proptest! {
        #[test]
        fn flatten_unflatten_identity(vals in proptest::collection::vec(-1e6f64..1e6, 8)) {
            let p = ParameterVector::from_flat(layout(), vals.clone()).unwrap();
            let q = p.with_values(p.flatten().to_vec()).unwrap();
            prop_assert_eq!(&p, &q);
            prop_assert_eq!(q.into_flat(), vals);
        }
    }
}
