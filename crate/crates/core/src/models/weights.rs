use std::ops::{Deref, DerefMut};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

/// Flat parameter vector of one mode; the unit exchanged between server and clients.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.0.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(&self.0).sqrt()
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &[f64]) {
        self.0.iter_mut().zip(other).for_each(|(a, b)| *a += alpha * b);
    }

    pub fn distance(&self, other: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Little-endian `u64` length header followed by the values as little-endian `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.0.len());
        out.extend_from_slice(&(self.0.len() as u64).to_le_bytes());
        for v in &self.0 {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header: [u8; 8] = bytes
            .get(..8)
            .and_then(|h| h.try_into().ok())
            .ok_or_else(|| SimError::Contract("weight blob shorter than its header".into()))?;
        let len = u64::from_le_bytes(header) as usize;
        let body = &bytes[8..];
        if body.len() != len * 8 {
            return Err(SimError::Contract(format!(
                "weight blob declares {len} values but carries {} bytes",
                body.len()
            )));
        }
        Ok(Self(
            body.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect(),
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| SimError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| SimError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl From<Vec<f64>> for WeightVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl Deref for WeightVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for WeightVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn binary_round_trip(values in proptest::collection::vec(proptest::num::f64::ANY, 0..64)) {
            let w = WeightVector::from(values);
            let back = WeightVector::from_bytes(&w.to_bytes()).unwrap();
            prop_assert_eq!(w.to_bytes(), back.to_bytes());
        }
    }

    #[test]
    fn header_layout() {
        let bytes = WeightVector::from(vec![1.0, -2.5]).to_bytes();
        assert_eq!(&bytes[..8], &2u64.to_le_bytes());
        assert_eq!(&bytes[8..16], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 24);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let bytes = WeightVector::from(vec![1.0, 2.0]).to_bytes();
        assert!(WeightVector::from_bytes(&bytes[..20]).is_err());
        assert!(WeightVector::from_bytes(&bytes[..4]).is_err());
    }
}
