//! Forward-mode tangents recorded on the reverse tape.
//!
//! A [`Jet`] pairs an `N x C` value with the stacked `3N x C` directional
//! derivatives along the x, y and z axes (axis-major blocks of `N` rows).
//! Both halves are ordinary tape nodes, so a spatial gradient computed here
//! can itself be differentiated by [`Tape::grad`].

use ndarray::Array2;

use super::tape::{Tape, Var};

pub const AXES: usize = 3;

#[derive(Clone, Copy, Debug)]
pub struct Jet {
    pub val: Var,
    pub tan: Var,
}

fn tile_index(n: usize) -> Vec<usize> {
    (0..AXES).flat_map(|_| 0..n).collect()
}

/// Repeats the rows of `v` once per axis block.
pub fn tile(tape: &mut Tape, v: Var) -> Var {
    let n = tape.shape(v).0;
    tape.gather_rows(v, &tile_index(n))
}

fn tile_constant(tape: &Tape, v: Var, f: impl Fn(f64) -> f64) -> Array2<f64> {
    let x = tape.value(v);
    let (n, c) = x.dim();
    let mut out = Array2::zeros((AXES * n, c));
    for k in 0..AXES {
        out.slice_mut(ndarray::s![k * n..(k + 1) * n, ..])
            .assign(&x.mapv(&f));
    }
    out
}

impl Jet {
    /// Seeds `x` (`N x 3`) with the identity along each axis block.
    pub fn seed(tape: &mut Tape, x: Var) -> Jet {
        let (n, c) = tape.shape(x);
        assert_eq!(c, AXES, "spatial seed expects N x 3 positions");
        let mut tan = Array2::zeros((AXES * n, AXES));
        for k in 0..AXES {
            tan.slice_mut(ndarray::s![k * n..(k + 1) * n, k]).fill(1.0);
        }
        let tan = tape.constant(tan);
        Jet { val: x, tan }
    }

    /// Lifts a value that does not depend on position.
    pub fn constant(tape: &mut Tape, val: Var) -> Jet {
        let (n, c) = tape.shape(val);
        let tan = tape.constant(Array2::zeros((AXES * n, c)));
        Jet { val, tan }
    }

    pub fn rows(self, tape: &Tape) -> usize {
        tape.shape(self.val).0
    }

    pub fn add(self, tape: &mut Tape, other: Jet) -> Jet {
        Jet {
            val: tape.add(self.val, other.val),
            tan: tape.add(self.tan, other.tan),
        }
    }

    pub fn sub(self, tape: &mut Tape, other: Jet) -> Jet {
        Jet {
            val: tape.sub(self.val, other.val),
            tan: tape.sub(self.tan, other.tan),
        }
    }

    pub fn mul(self, tape: &mut Tape, other: Jet) -> Jet {
        let val = tape.mul(self.val, other.val);
        let a = tile(tape, self.val);
        let b = tile(tape, other.val);
        let t1 = tape.mul(a, other.tan);
        let t2 = tape.mul(b, self.tan);
        Jet {
            val,
            tan: tape.add(t1, t2),
        }
    }

    pub fn scale(self, tape: &mut Tape, c: f64) -> Jet {
        Jet {
            val: tape.scale(self.val, c),
            tan: tape.scale(self.tan, c),
        }
    }

    /// Right-multiplication by a position-independent matrix.
    pub fn matmul(self, tape: &mut Tape, w: Var) -> Jet {
        Jet {
            val: tape.matmul(self.val, w),
            tan: tape.matmul(self.tan, w),
        }
    }

    /// Adds a position-independent row (bias); the tangent is unchanged.
    pub fn add_bias(self, tape: &mut Tape, b: Var) -> Jet {
        Jet {
            val: tape.add(self.val, b),
            tan: self.tan,
        }
    }

    pub fn sin(self, tape: &mut Tape) -> Jet {
        let val = tape.sin(self.val);
        let d = tape.cos(self.val);
        let d = tile(tape, d);
        Jet {
            val,
            tan: tape.mul(d, self.tan),
        }
    }

    pub fn cos(self, tape: &mut Tape) -> Jet {
        let val = tape.cos(self.val);
        let s = tape.sin(self.val);
        let d = tape.neg(s);
        let d = tile(tape, d);
        Jet {
            val,
            tan: tape.mul(d, self.tan),
        }
    }

    pub fn exp(self, tape: &mut Tape) -> Jet {
        let val = tape.exp(self.val);
        let d = tile(tape, val);
        Jet {
            val,
            tan: tape.mul(d, self.tan),
        }
    }

    pub fn softplus(self, tape: &mut Tape) -> Jet {
        let val = tape.softplus(self.val);
        let d = tape.sigmoid(self.val);
        let d = tile(tape, d);
        Jet {
            val,
            tan: tape.mul(d, self.tan),
        }
    }

    /// The activation mask is piecewise constant, so it enters as a constant.
    pub fn relu(self, tape: &mut Tape) -> Jet {
        let val = tape.relu(self.val);
        let mask = tile_constant(tape, self.val, |x| if x > 0.0 { 1.0 } else { 0.0 });
        let mask = tape.constant(mask);
        Jet {
            val,
            tan: tape.mul(self.tan, mask),
        }
    }

    pub fn sum_cols(self, tape: &mut Tape) -> Jet {
        Jet {
            val: tape.sum_cols(self.val),
            tan: tape.sum_cols(self.tan),
        }
    }

    pub fn slice_cols(self, tape: &mut Tape, start: usize, end: usize) -> Jet {
        Jet {
            val: tape.slice_cols(self.val, start, end),
            tan: tape.slice_cols(self.tan, start, end),
        }
    }

    pub fn concat_cols(tape: &mut Tape, parts: &[Jet]) -> Jet {
        let vals: Vec<Var> = parts.iter().map(|j| j.val).collect();
        let tans: Vec<Var> = parts.iter().map(|j| j.tan).collect();
        Jet {
            val: tape.concat_cols(&vals),
            tan: tape.concat_cols(&tans),
        }
    }

    /// Reorders an `N x 1` jet's tangent into an `N x 3` gradient.
    pub fn gradient(self, tape: &mut Tape) -> Var {
        let n = self.rows(tape);
        assert_eq!(tape.shape(self.val).1, 1, "gradient of a scalar field");
        let blocks = tape.reshape(self.tan, AXES, n);
        tape.transpose(blocks)
    }
}

/// `grad f(x)` for every row of `x` (`N x 3`), recorded on `tape`.
///
/// Returns the field value (`N x 1`) and its spatial gradient (`N x 3`).
pub fn spatial_grad(
    tape: &mut Tape,
    x: Var,
    density: impl FnOnce(&mut Tape, Jet) -> Jet,
) -> (Var, Var) {
    let seed = Jet::seed(tape, x);
    let out = density(tape, seed);
    let grad = out.gradient(tape);
    (out.val, grad)
}
