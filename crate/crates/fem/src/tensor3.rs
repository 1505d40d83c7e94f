//! Small fixed-size 3x3 helpers.

pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn det(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Inverse via the adjugate; `None` when the determinant vanishes.
pub fn inverse(a: &Mat3) -> Option<Mat3> {
    let d = det(a);
    if d == 0.0 || !d.is_finite() {
        return None;
    }
    let inv_d = 1.0 / d;
    let mut out = [[0.0; 3]; 3];
    out[0][0] = (a[1][1] * a[2][2] - a[1][2] * a[2][1]) * inv_d;
    out[0][1] = (a[0][2] * a[2][1] - a[0][1] * a[2][2]) * inv_d;
    out[0][2] = (a[0][1] * a[1][2] - a[0][2] * a[1][1]) * inv_d;
    out[1][0] = (a[1][2] * a[2][0] - a[1][0] * a[2][2]) * inv_d;
    out[1][1] = (a[0][0] * a[2][2] - a[0][2] * a[2][0]) * inv_d;
    out[1][2] = (a[0][2] * a[1][0] - a[0][0] * a[1][2]) * inv_d;
    out[2][0] = (a[1][0] * a[2][1] - a[1][1] * a[2][0]) * inv_d;
    out[2][1] = (a[0][1] * a[2][0] - a[0][0] * a[2][1]) * inv_d;
    out[2][2] = (a[0][0] * a[1][1] - a[0][1] * a[1][0]) * inv_d;
    Some(out)
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// tr(AᵀA), the squared Frobenius norm.
pub fn frobenius_sq(a: &Mat3) -> f64 {
    a.iter().flatten().map(|v| v * v).sum()
}
