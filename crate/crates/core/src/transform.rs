//! Affine transforms between world spaces (mm), stored as 4x4 homogeneous matrices.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use crate::error::{Error, Result};

/// Maps reference-space world points to moving-space world points (pull-back), so
/// warping a moving image onto the reference grid is a single gather.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    matrix: Matrix4<f64>,
}

impl AffineTransform {
    pub fn identity() -> Self {
        AffineTransform {
            matrix: Matrix4::identity(),
        }
    }

    /// Builds from a 4x4 matrix; the last row must be `(0, 0, 0, 1)` and the linear part
    /// invertible.
    pub fn from_matrix(matrix: Matrix4<f64>) -> Result<Self> {
        let last = matrix.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(Error::Parse(format!(
                "last row of an affine must be (0, 0, 0, 1), got {last}"
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse("non-finite affine entry".into()));
        }
        let t = AffineTransform { matrix };
        let det = t.linear().determinant();
        if det.abs() < 1e-12 {
            return Err(Error::Singular(det));
        }
        Ok(t)
    }

    pub fn from_linear_translation(linear: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&linear);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        AffineTransform::from_matrix(m)
    }

    pub fn translation(t: [f64; 3]) -> Self {
        let mut m = Matrix4::identity();
        m[(0, 3)] = t[0];
        m[(1, 3)] = t[1];
        m[(2, 3)] = t[2];
        AffineTransform { matrix: m }
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn linear(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation_part(&self) -> [f64; 3] {
        [self.matrix[(0, 3)], self.matrix[(1, 3)], self.matrix[(2, 3)]]
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.matrix;
        [
            m[(0, 0)] * p[0] + m[(0, 1)] * p[1] + m[(0, 2)] * p[2] + m[(0, 3)],
            m[(1, 0)] * p[0] + m[(1, 1)] * p[1] + m[(1, 2)] * p[2] + m[(1, 3)],
            m[(2, 0)] * p[0] + m[(2, 1)] * p[1] + m[(2, 2)] * p[2] + m[(2, 3)],
        ]
    }

    /// `self` after `first`: `x -> self(first(x))`.
    pub fn then_after(&self, first: &AffineTransform) -> AffineTransform {
        AffineTransform {
            matrix: self.matrix * first.matrix,
        }
    }

    pub fn inverse(&self) -> Result<AffineTransform> {
        let inv = self
            .matrix
            .try_inverse()
            .ok_or_else(|| Error::Singular(self.linear().determinant()))?;
        let mut m = inv;
        m.set_row(3, &Vector4::new(0.0, 0.0, 0.0, 1.0).transpose());
        Ok(AffineTransform { matrix: m })
    }

    /// Whether the linear part is safely invertible.
    pub fn check_invertible(&self) -> Result<()> {
        let det = self.linear().determinant();
        if det.abs() < 1e-12 || !det.is_finite() {
            Err(Error::Singular(det))
        } else {
            Ok(())
        }
    }

    /// Plain-text form: 16 numbers, row-major, four per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in 0..4 {
            let row: Vec<String> = (0..4).map(|c| format!("{}", self.matrix[(r, c)])).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let vals: Vec<f64> = text
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("matrix entry {t:?}: {e}"))))
            .collect::<Result<_>>()?;
        if vals.len() != 16 {
            return Err(Error::Parse(format!("expected 16 matrix entries, found {}", vals.len())));
        }
        AffineTransform::from_matrix(Matrix4::from_row_slice(&vals))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        AffineTransform::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_is_exact() {
        let lin = Matrix3::new(1.05, 0.01, -0.02, 0.003, 0.97, 0.1, 1e-9, 0.0, 1.0 / 3.0);
        let t = AffineTransform::from_linear_translation(lin, Vector3::new(10.0, -6.0, 4.123456789)).unwrap();
        let text = t.to_text();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().all(|l| l.split_whitespace().count() == 4));
        assert_eq!(AffineTransform::from_text(&text).unwrap(), t);
    }

    #[test]
    fn rejects_singular_and_bad_last_row() {
        let mut m = Matrix4::identity();
        m[(2, 2)] = 0.0;
        assert!(matches!(AffineTransform::from_matrix(m), Err(Error::Singular(_))));
        let mut m = Matrix4::identity();
        m[(3, 0)] = 1.0;
        assert!(AffineTransform::from_matrix(m).is_err());
        assert!(AffineTransform::from_text("1 2 3").is_err());
    }

    #[test]
    fn composition_order() {
        let a = AffineTransform::translation([1.0, 0.0, 0.0]);
        let s = AffineTransform::from_linear_translation(Matrix3::identity() * 2.0, Vector3::zeros()).unwrap();
        assert_eq!(s.then_after(&a).apply([1.0, 1.0, 1.0]), [4.0, 2.0, 2.0]);
        let inv = s.then_after(&a).inverse().unwrap();
        let p = inv.apply(s.then_after(&a).apply([0.3, -2.0, 5.0]));
        assert!((p[0] - 0.3).abs() < 1e-12 && (p[1] + 2.0).abs() < 1e-12);
    }
}
