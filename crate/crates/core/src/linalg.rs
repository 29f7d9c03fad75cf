//! Small fixed-size linear algebra for the phase-space charts and the
//! kicked-top sphere. Hand-rolled: every consumer needs only low-dimensional
//! operations on stack arrays.

pub type Vec3 = [f64; 3];
pub type Vec4 = [f64; 4];
pub type Mat3 = [[f64; 3]; 3];
pub type Mat4 = [[f64; 4]; 4];

pub fn dot<const N: usize>(a: &[f64; N], b: &[f64; N]) -> f64 {
    let mut acc = 0.0;
    for k in 0..N {
        acc += a[k] * b[k];
    }
    acc
}

pub fn norm<const N: usize>(a: &[f64; N]) -> f64 {
    dot(a, a).sqrt()
}

pub fn scaled<const N: usize>(a: &[f64; N], s: f64) -> [f64; N] {
    let mut out = *a;
    for x in &mut out {
        *x *= s;
    }
    out
}

pub fn normalized<const N: usize>(a: &[f64; N]) -> [f64; N] {
    scaled(a, 1.0 / norm(a))
}

pub fn mat_vec<const N: usize>(m: &[[f64; N]; N], v: &[f64; N]) -> [f64; N] {
    let mut out = [0.0; N];
    for k in 0..N {
        out[k] = dot(&m[k], v);
    }
    out
}

/// a^T M b.
pub fn quad_form(a: &Vec4, m: &Mat4, b: &Vec4) -> f64 {
    dot(a, &mat_vec(m, b))
}

/// Solve M x = rhs by Gaussian elimination with partial pivoting.
/// Returns None when M is singular to working precision.
pub fn solve<const N: usize>(m: &[[f64; N]; N], rhs: &[f64; N]) -> Option<[f64; N]> {
    let mut a = *m;
    let mut b = *rhs;
    for col in 0..N {
        let pivot = (col..N).max_by(|&i, &k| a[i][col].abs().total_cmp(&a[k][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..N {
            let f = a[row][col] / a[col][col];
            for k in col..N {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; N];
    for col in (0..N).rev() {
        let mut acc = b[col];
        for k in (col + 1)..N {
            acc -= a[col][k] * x[k];
        }
        x[col] = acc / a[col][col];
    }
    Some(x)
}

/// Modified Gram-Schmidt on `vs` in place; writes the pre-normalization
/// norms into `norms`. Returns false on rank loss.
pub fn gram_schmidt<const N: usize>(vs: &mut [[f64; N]], norms: &mut [f64]) -> bool {
    assert_eq!(vs.len(), norms.len());
    for k in 0..vs.len() {
        for l in 0..k {
            let proj = dot(&vs[k], &vs[l]);
            for i in 0..N {
                vs[k][i] -= proj * vs[l][i];
            }
        }
        let r = norm(&vs[k]);
        if r < 1e-300 {
            return false;
        }
        norms[k] = r;
        vs[k] = scaled(&vs[k], 1.0 / r);
    }
    true
}

/// Eigendecomposition of a symmetric 4x4 matrix by cyclic Jacobi rotations.
/// Returns eigenvalues ascending and the matching unit eigenvectors as rows.
pub fn sym_eigen(m: &Mat4) -> (Vec4, Mat4) {
    let mut a = *m;
    let mut v: Mat4 = [[0.0; 4]; 4];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let scale: f64 = a
        .iter()
        .flatten()
        .fold(0.0, |acc, x| acc + x * x)
        .sqrt()
        .max(f64::MIN_POSITIVE);

    for _sweep in 0..64 {
        let off: f64 = (0..4)
            .flat_map(|p| ((p + 1)..4).map(move |q| (p, q)))
            .map(|(p, q)| a[p][q] * a[p][q])
            .sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..3 {
            for q in (p + 1)..4 {
                if a[p][q].abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..4 {
                    let (aip, aiq) = (a[i][p], a[i][q]);
                    a[i][p] = c * aip - s * aiq;
                    a[i][q] = s * aip + c * aiq;
                }
                for i in 0..4 {
                    let (api, aqi) = (a[p][i], a[q][i]);
                    a[p][i] = c * api - s * aqi;
                    a[q][i] = s * api + c * aqi;
                    let (vpi, vqi) = (v[p][i], v[q][i]);
                    v[p][i] = c * vpi - s * vqi;
                    v[q][i] = s * vpi + c * vqi;
                }
            }
        }
    }

    let mut order = [0usize, 1, 2, 3];
    order.sort_by(|&i, &k| a[i][i].total_cmp(&a[k][k]));
    let mut values = [0.0; 4];
    let mut vectors = [[0.0; 4]; 4];
    for (rank, &i) in order.iter().enumerate() {
        values[rank] = a[i][i];
        vectors[rank] = v[i];
    }
    (values, vectors)
}

pub fn dot3(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm3(a: &Vec3) -> f64 {
    dot3(a, a).sqrt()
}

pub fn normalized3(a: &Vec3) -> Vec3 {
    let r = norm3(a);
    [a[0] / r, a[1] / r, a[2] / r]
}

pub fn mat3_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [dot3(&m[0], v), dot3(&m[1], v), dot3(&m[2], v)]
}

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (k, cell) in row.iter_mut().enumerate() {
            *cell = a[i][0] * b[0][k] + a[i][1] * b[1][k] + a[i][2] * b[2][k];
        }
    }
    out
}

pub fn mat3_det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}
