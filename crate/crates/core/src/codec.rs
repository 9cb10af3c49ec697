//! Matrix payload encoding for model files: base64 of little-endian `f64`
//! values in row-major order, wrapped with explicit dimensions.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use nalgebra::DMatrix;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncodedMatrix {
    rows: usize,
    cols: usize,
    data: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncodedVector {
    len: usize,
    data: String,
}

fn encode_values(values: impl Iterator<Item = f64>) -> String {
    let bytes: Vec<u8> = values.flat_map(f64::to_le_bytes).collect();
    STANDARD.encode(bytes)
}

fn decode_values(data: &str, expected: usize, what: &str) -> Result<Vec<f64>, String> {
    let bytes = STANDARD
        .decode(data)
        .map_err(|e| format!("{what}: bad base64 payload: {e}"))?;
    if bytes.len() != expected * 8 {
        return Err(format!(
            "{what}: header declares {expected} values but payload holds {} bytes",
            bytes.len()
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(format!("{what}: payload contains non-finite values"));
    }
    Ok(values)
}

pub mod matrix {
    use super::*;

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let (rows, cols) = m.shape();
        let data = encode_values((0..rows).flat_map(|r| (0..cols).map(move |c| m[(r, c)])));
        EncodedMatrix { rows, cols, data }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let enc = EncodedMatrix::deserialize(d)?;
        let what = format!("{}x{} matrix", enc.rows, enc.cols);
        let values =
            decode_values(&enc.data, enc.rows * enc.cols, &what).map_err(D::Error::custom)?;
        Ok(DMatrix::from_row_slice(enc.rows, enc.cols, &values))
    }
}

pub mod vector {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        EncodedVector {
            len: v.len(),
            data: encode_values(v.iter().copied()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let enc = EncodedVector::deserialize(d)?;
        let what = format!("vector of {}", enc.len);
        decode_values(&enc.data, enc.len, &what).map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Holder {
        #[serde(with = "matrix")]
        m: DMatrix<f64>,
        #[serde(with = "vector")]
        v: Vec<f64>,
    }

    #[test]
    fn bit_exact_roundtrip() {
        let h = Holder {
            m: DMatrix::from_row_slice(2, 3, &[1.0, -0.1, 3.5e-300, 7.0, 1.0 / 3.0, -0.0]),
            v: vec![0.1, 0.2, f64::MAX],
        };
        let text = serde_json::to_string(&h).unwrap();
        let back: Holder = serde_json::from_str(&text).unwrap();
        for (a, b) in h.m.iter().zip(back.m.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(h.v, back.v);
    }

    #[test]
    fn row_major_layout() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let h = Holder { m, v: vec![] };
        let value = serde_json::to_value(&h).unwrap();
        let data = value["m"]["data"].as_str().unwrap();
        let bytes = STANDARD.decode(data).unwrap();
        assert_eq!(f64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2.0);
    }

    #[test]
    fn dimension_disagreement_is_rejected() {
        let text = r#"{"m":{"rows":3,"cols":3,"data":"AAAAAAAA8D8="},"v":{"len":0,"data":""}}"#;
        let err = serde_json::from_str::<Holder>(text)
            .unwrap_err()
            .to_string();
        assert!(err.contains("3x3 matrix"), "{err}");
    }
}
