//! Axis-angle rotations and their analytic derivatives.

pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Below this squared angle the Rodrigues coefficients use their Taylor series.
const SERIES_THRESHOLD: f64 = 1e-2;

pub fn skew(w: [f64; 3]) -> Mat3 {
    [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
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

pub fn apply(r: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
        r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
        r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
    ]
}

pub fn apply_transposed(r: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        r[0][0] * v[0] + r[1][0] * v[1] + r[2][0] * v[2],
        r[0][1] * v[0] + r[1][1] * v[1] + r[2][1] * v[2],
        r[0][2] * v[0] + r[1][2] * v[1] + r[2][2] * v[2],
    ]
}

pub fn determinant(r: &Mat3) -> f64 {
    r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
}

/// `(A, B, dA/ds, dB/ds)` for `R = I + A·K + B·K²` with `s = |w|²`.
fn coefficients(s: f64) -> (f64, f64, f64, f64) {
    if s < SERIES_THRESHOLD {
        let s2 = s * s;
        let s3 = s2 * s;
        let s4 = s3 * s;
        let a = 1.0 - s / 6.0 + s2 / 120.0 - s3 / 5040.0 + s4 / 362_880.0;
        let b = 0.5 - s / 24.0 + s2 / 720.0 - s3 / 40_320.0 + s4 / 3_628_800.0;
        let da = -1.0 / 6.0 + s / 60.0 - s2 / 1680.0 + s3 / 90_720.0 - s4 / 7_983_360.0;
        let db = -1.0 / 24.0 + s / 360.0 - s2 / 13_440.0 + s3 / 907_200.0 - s4 / 95_800_320.0;
        (a, b, da, db)
    } else {
        let t = s.sqrt();
        let (sin, cos) = t.sin_cos();
        let a = sin / t;
        let b = (1.0 - cos) / s;
        let da = (t * cos - sin) / (2.0 * t * s);
        let db = (t * sin - 2.0 * (1.0 - cos)) / (2.0 * s * s);
        (a, b, da, db)
    }
}

fn combine(k: &Mat3, k2: &Mat3, a: f64, b: f64) -> Mat3 {
    let mut r = IDENTITY;
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] += a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

/// Rotation matrix of an axis-angle vector (angle = norm, axis = direction).
pub fn rodrigues(w: [f64; 3]) -> Mat3 {
    let s = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let (a, b, _, _) = coefficients(s);
    let k = skew(w);
    let k2 = mat_mul(&k, &k);
    combine(&k, &k2, a, b)
}

/// Rotation plus its partial derivatives `dR/dw_i`.
pub fn rodrigues_jacobian(w: [f64; 3]) -> (Mat3, [Mat3; 3]) {
    let s = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let (a, b, da, db) = coefficients(s);
    let k = skew(w);
    let k2 = mat_mul(&k, &k);
    let r = combine(&k, &k2, a, b);
    let mut d = [[[0.0; 3]; 3]; 3];
    for (i, di) in d.iter_mut().enumerate() {
        let mut e = [0.0; 3];
        e[i] = 1.0;
        let ki = skew(e);
        let ki_k = mat_mul(&ki, &k);
        let k_ki = mat_mul(&k, &ki);
        for r_ in 0..3 {
            for c in 0..3 {
                di[r_][c] = a * ki[r_][c]
                    + b * (ki_k[r_][c] + k_ki[r_][c])
                    + 2.0 * w[i] * (da * k[r_][c] + db * k2[r_][c]);
            }
        }
    }
    (r, d)
}

/// Conjugates `r` into `frame`: `F · r · Fᵀ`.
pub fn conjugate(frame: &Mat3, r: &Mat3) -> Mat3 {
    mat_mul(&mat_mul(frame, r), &transpose(frame))
}
