//! Serde helpers mapping nalgebra types onto the row-major nested-array
//! representation used by the problem and result files.

use nalgebra::{DMatrix, DVector};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::linalg::{mat_from_rows, mat_to_rows};

pub mod mat {
    use super::*;

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, serializer: S) -> Result<S::Ok, S::Error> {
        mat_to_rows(m).serialize(serializer)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        deserializer: D,
    ) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(deserializer)?;
        mat_from_rows(&rows).map_err(D::Error::custom)
    }
}

pub mod mat_list {
    use super::*;

    pub fn serialize<S: Serializer>(ms: &[DMatrix<f64>], serializer: S) -> Result<S::Ok, S::Error> {
        ms.iter()
            .map(mat_to_rows)
            .collect::<Vec<_>>()
            .serialize(serializer)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        deserializer: D,
    ) -> Result<Vec<DMatrix<f64>>, D::Error> {
        let all = Vec::<Vec<Vec<f64>>>::deserialize(deserializer)?;
        all.iter()
            .map(|rows| mat_from_rows(rows).map_err(D::Error::custom))
            .collect()
    }
}

pub mod vec {
    use super::*;

    pub fn serialize<S: Serializer>(v: &DVector<f64>, serializer: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(serializer)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        deserializer: D,
    ) -> Result<DVector<f64>, D::Error> {
        let vals = Vec::<f64>::deserialize(deserializer)?;
        if vals.is_empty() {
            return Err(D::Error::custom("vector must be non-empty"));
        }
        Ok(DVector::from_vec(vals))
    }
}

pub mod vec_list {
    use super::*;

    pub fn serialize<S: Serializer>(vs: &[DVector<f64>], serializer: S) -> Result<S::Ok, S::Error> {
        vs.iter()
            .map(|v| v.as_slice().to_vec())
            .collect::<Vec<_>>()
            .serialize(serializer)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        deserializer: D,
    ) -> Result<Vec<DVector<f64>>, D::Error> {
        let all = Vec::<Vec<f64>>::deserialize(deserializer)?;
        Ok(all.into_iter().map(DVector::from_vec).collect())
    }
}
