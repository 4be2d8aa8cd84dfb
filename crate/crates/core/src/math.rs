//! Minimal 3D linear algebra over plain `[f64; 3]` arrays.

pub type Vec3 = [f64; 3];

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm2(a: Vec3) -> f64 {
    dot(a, a)
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    norm2(a).sqrt()
}

#[inline]
pub fn dist2(a: Vec3, b: Vec3) -> f64 {
    norm2(sub(a, b))
}

#[inline]
pub fn dist(a: Vec3, b: Vec3) -> f64 {
    dist2(a, b).sqrt()
}

/// Returns `None` when the vector is too short to normalize reliably.
#[inline]
pub fn try_normalize(a: Vec3) -> Option<Vec3> {
    let n = norm(a);
    if n < 1e-12 {
        None
    } else {
        Some(scale(a, 1.0 / n))
    }
}

#[inline]
pub fn normalize(a: Vec3) -> Vec3 {
    try_normalize(a).expect("cannot normalize near-zero vector")
}

#[inline]
pub fn lerp(a: Vec3, b: Vec3, t: f64) -> Vec3 {
    add(scale(a, 1.0 - t), scale(b, t))
}

#[inline]
pub fn min_elem(a: Vec3, b: Vec3) -> Vec3 {
    [a[0].min(b[0]), a[1].min(b[1]), a[2].min(b[2])]
}

#[inline]
pub fn max_elem(a: Vec3, b: Vec3) -> Vec3 {
    [a[0].max(b[0]), a[1].max(b[1]), a[2].max(b[2])]
}

/// Row-major 3x3 matrix.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Mat3 {
    pub m: [[f64; 3]; 3],
}

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3 {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    pub fn from_cols(a: Vec3, b: Vec3, c: Vec3) -> Mat3 {
        Mat3 {
            m: [
                [a[0], b[0], c[0]],
                [a[1], b[1], c[1]],
                [a[2], b[2], c[2]],
            ],
        }
    }

    pub fn col(&self, i: usize) -> Vec3 {
        [self.m[0][i], self.m[1][i], self.m[2][i]]
    }

    pub fn row(&self, i: usize) -> Vec3 {
        self.m[i]
    }

    #[inline]
    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        [
            dot(self.m[0], v),
            dot(self.m[1], v),
            dot(self.m[2], v),
        ]
    }

    /// `self^T * v` without forming the transpose.
    #[inline]
    pub fn tr_mul_vec(&self, v: Vec3) -> Vec3 {
        [
            self.m[0][0] * v[0] + self.m[1][0] * v[1] + self.m[2][0] * v[2],
            self.m[0][1] * v[0] + self.m[1][1] * v[1] + self.m[2][1] * v[2],
            self.m[0][2] * v[0] + self.m[1][2] * v[1] + self.m[2][2] * v[2],
        ]
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = self.m[i][0] * o.m[0][j] + self.m[i][1] * o.m[1][j] + self.m[i][2] * o.m[2][j];
            }
        }
        Mat3 { m: r }
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.m;
        Mat3 {
            m: [
                [m[0][0], m[1][0], m[2][0]],
                [m[0][1], m[1][1], m[2][1]],
                [m[0][2], m[1][2], m[2][2]],
            ],
        }
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn scale_by(&self, s: f64) -> Mat3 {
        let mut r = self.m;
        for row in &mut r {
            for v in row {
                *v *= s;
            }
        }
        Mat3 { m: r }
    }

    pub fn add_mat(&self, o: &Mat3) -> Mat3 {
        let mut r = self.m;
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] += o.m[i][j];
            }
        }
        Mat3 { m: r }
    }

    /// Skew-symmetric cross-product matrix `[v]x`.
    pub fn skew(v: Vec3) -> Mat3 {
        Mat3 {
            m: [
                [0.0, -v[2], v[1]],
                [v[2], 0.0, -v[0]],
                [-v[1], v[0], 0.0],
            ],
        }
    }

    /// Rodrigues rotation from an axis-angle vector (angle = |w|).
    pub fn from_axis_angle(w: Vec3) -> Mat3 {
        let theta = norm(w);
        if theta < 1e-12 {
            // second-order series keeps derivatives smooth near zero
            let k = Mat3::skew(w);
            return Mat3::IDENTITY.add_mat(&k).add_mat(&k.mul_mat(&k).scale_by(0.5));
        }
        let k = Mat3::skew(scale(w, 1.0 / theta));
        let k2 = k.mul_mat(&k);
        Mat3::IDENTITY
            .add_mat(&k.scale_by(theta.sin()))
            .add_mat(&k2.scale_by(1.0 - theta.cos()))
    }

    /// Logarithm of a rotation matrix as an axis-angle vector.
    pub fn rotation_log(&self) -> Vec3 {
        let m = &self.m;
        let tr = m[0][0] + m[1][1] + m[2][2];
        let cos_t = ((tr - 1.0) * 0.5).clamp(-1.0, 1.0);
        let theta = cos_t.acos();
        if theta < 1e-9 {
            return [
                0.5 * (m[2][1] - m[1][2]),
                0.5 * (m[0][2] - m[2][0]),
                0.5 * (m[1][0] - m[0][1]),
            ];
        }
        if (std::f64::consts::PI - theta).abs() < 1e-6 {
            // near pi the skew part degenerates; R + I ~ 2*axis*axis^T,
            // so the largest column of R + I is parallel to the axis
            let b = self.add_mat(&Mat3::IDENTITY);
            let cols = [b.col(0), b.col(1), b.col(2)];
            let mut best = 0;
            for i in 1..3 {
                if norm2(cols[i]) > norm2(cols[best]) {
                    best = i;
                }
            }
            let mut axis = normalize(cols[best]);
            // pick the sign consistent with the (small) skew part
            let skew = [m[2][1] - m[1][2], m[0][2] - m[2][0], m[1][0] - m[0][1]];
            if dot(axis, skew) < 0.0 {
                axis = scale(axis, -1.0);
            }
            return scale(axis, theta);
        }
        let s = theta / (2.0 * theta.sin());
        [
            s * (m[2][1] - m[1][2]),
            s * (m[0][2] - m[2][0]),
            s * (m[1][0] - m[0][1]),
        ]
    }

    /// Spherical interpolation between two rotations.
    pub fn slerp(a: &Mat3, b: &Mat3, t: f64) -> Mat3 {
        let rel = a.transpose().mul_mat(b);
        let w = rel.rotation_log();
        a.mul_mat(&Mat3::from_axis_angle(scale(w, t)))
    }

    pub fn max_abs_diff(&self, o: &Mat3) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                d = d.max((self.m[i][j] - o.m[i][j]).abs());
            }
        }
        d
    }
}

/// Rigid or general affine map `x -> lin * x + t`.
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub lin: Mat3,
    pub t: Vec3,
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        lin: Mat3::IDENTITY,
        t: [0.0; 3],
    };

    pub fn new(lin: Mat3, t: Vec3) -> Affine {
        Affine { lin, t }
    }

    pub fn translation(t: Vec3) -> Affine {
        Affine { lin: Mat3::IDENTITY, t }
    }

    #[inline]
    pub fn apply(&self, p: Vec3) -> Vec3 {
        add(self.lin.mul_vec(p), self.t)
    }

    /// Composition: `(self ∘ o)(x) = self(o(x))`.
    pub fn compose(&self, o: &Affine) -> Affine {
        Affine {
            lin: self.lin.mul_mat(&o.lin),
            t: add(self.lin.mul_vec(o.t), self.t),
        }
    }

    /// Inverse of a rigid map (linear part must be a rotation).
    pub fn rigid_inverse(&self) -> Affine {
        let rt = self.lin.transpose();
        Affine {
            lin: rt,
            t: scale(rt.mul_vec(self.t), -1.0),
        }
    }
}
