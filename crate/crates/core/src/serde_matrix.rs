//! Serialize `DMatrix<f64>` as `{ "rows": r, "cols": c, "data": [...] }` with
//! row-major data. `serde_json` with `float_roundtrip` reproduces every value
//! bit for bit.

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Serialize, Deserialize)]
struct Doc {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
    let data = m.transpose().as_slice().to_vec();
    Doc { rows: m.nrows(), cols: m.ncols(), data }.serialize(s)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
    let doc = Doc::deserialize(d)?;
    if doc.rows * doc.cols != doc.data.len() {
        return Err(serde::de::Error::custom(format!(
            "matrix {}x{} with {} entries",
            doc.rows,
            doc.cols,
            doc.data.len()
        )));
    }
    Ok(DMatrix::from_row_slice(doc.rows, doc.cols, &doc.data))
}

pub mod vec {
    use super::*;

    pub fn serialize<S: Serializer>(ms: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
        struct W<'a>(&'a DMatrix<f64>);
        impl Serialize for W<'_> {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                super::serialize(self.0, s)
            }
        }
        s.collect_seq(ms.iter().map(W))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
        #[derive(Deserialize)]
        struct W(#[serde(with = "super")] DMatrix<f64>);
        Ok(Vec::<W>::deserialize(d)?.into_iter().map(|w| w.0).collect())
    }
}
