//! Dense rank-4 tensor of f64 in (batch, channel, height, width) layout.
//!
//! The data buffer is row-major over (b, c, h, w) and is not mutated in
//! place by public operations; every op returns a fresh tensor. All public
//! constructors and operations reject NaN/Inf outputs so numerical failures
//! surface at the op that produced them.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape4 {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(b: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { b, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.b * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(b < self.b && c < self.c && h < self.h && w < self.w);
        ((b * self.c + c) * self.h + h) * self.w + w
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.b, self.c, self.h, self.w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    B,
    C,
    H,
    W,
}

/// Subset of the four axes, used to name reduction dimensions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AxisSet {
    pub b: bool,
    pub c: bool,
    pub h: bool,
    pub w: bool,
}

impl AxisSet {
    pub fn of(axes: &[Axis]) -> Self {
        let mut s = AxisSet::default();
        for a in axes {
            match a {
                Axis::B => s.b = true,
                Axis::C => s.c = true,
                Axis::H => s.h = true,
                Axis::W => s.w = true,
            }
        }
        s
    }

    pub fn all() -> Self {
        AxisSet {
            b: true,
            c: true,
            h: true,
            w: true,
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.b || self.c || self.h || self.w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: Shape4) -> Self {
        Tensor4 {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: Shape4, value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::non_finite("Tensor4::filled"));
        }
        Ok(Tensor4 {
            shape,
            data: vec![value; shape.len()],
        })
    }

    pub fn from_vec(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor4::from_vec",
                expected: format!("{} elements for shape {shape}", shape.len()),
                got: format!("{} elements", data.len()),
            });
        }
        let t = Tensor4 { shape, data };
        t.ensure_finite("Tensor4::from_vec")?;
        Ok(t)
    }

    /// Construction that skips the finiteness scan. For internal use where
    /// the caller checks the result itself (or the values are known finite).
    pub(crate) fn from_vec_unchecked(shape: Shape4, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.len());
        Tensor4 { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.index(b, c, h, w)]
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                let s = self.shape;
                let w = i % s.w;
                let h = (i / s.w) % s.h;
                let c = (i / (s.w * s.h)) % s.c;
                let b = i / (s.w * s.h * s.c);
                return Err(Error::non_finite_at(
                    op,
                    format!("entry ({b},{c},{h},{w}) = {v}"),
                ));
            }
        }
        Ok(())
    }

    fn same_shape(&self, other: &Tensor4, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                expected: self.shape.to_string(),
                got: other.shape.to_string(),
            });
        }
        Ok(())
    }

    fn zip(&self, other: &Tensor4, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor4> {
        self.same_shape(other, op)?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        let out = Tensor4 {
            shape: self.shape,
            data,
        };
        out.ensure_finite(op)?;
        Ok(out)
    }

    fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Tensor4> {
        let data = self.data.iter().map(|&a| f(a)).collect();
        let out = Tensor4 {
            shape: self.shape,
            data,
        };
        out.ensure_finite(op)?;
        Ok(out)
    }

    pub fn add(&self, other: &Tensor4) -> Result<Tensor4> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor4) -> Result<Tensor4> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor4) -> Result<Tensor4> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor4) -> Result<Tensor4> {
        self.same_shape(other, "div")?;
        if other.data.iter().any(|&b| b == 0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".to_string(),
            });
        }
        self.zip(other, "div", |a, b| a / b)
    }

    pub fn add_scalar(&self, s: f64) -> Result<Tensor4> {
        self.map("add_scalar", |a| a + s)
    }

    pub fn mul_scalar(&self, s: f64) -> Result<Tensor4> {
        self.map("mul_scalar", |a| a * s)
    }

    pub fn exp(&self) -> Result<Tensor4> {
        self.map("exp", |a| a.exp())
    }

    pub fn ln(&self) -> Result<Tensor4> {
        if self.data.iter().any(|&a| a <= 0.0) {
            return Err(Error::Domain {
                op: "ln",
                detail: "ln requires strictly positive entries".to_string(),
            });
        }
        self.map("ln", |a| a.ln())
    }

    pub fn square(&self) -> Result<Tensor4> {
        self.map("square", |a| a * a)
    }

    /// Reduce over the axes in `axes`; reduced dimensions become 1 in the
    /// output shape. Accumulation order is fixed (row-major scan), so results
    /// are reproducible bit for bit.
    pub fn reduce(&self, axes: AxisSet, kind: Reduction) -> Result<Tensor4> {
        if axes.is_empty() {
            return Err(Error::EmptyInput { op: "reduce" });
        }
        if self.shape.is_empty() {
            return Err(Error::EmptyInput { op: "reduce" });
        }
        let s = self.shape;
        let out_shape = Shape4::new(
            if axes.b { 1 } else { s.b },
            if axes.c { 1 } else { s.c },
            if axes.h { 1 } else { s.h },
            if axes.w { 1 } else { s.w },
        );
        let init = match kind {
            Reduction::Max => f64::NEG_INFINITY,
            _ => 0.0,
        };
        let mut out = vec![init; out_shape.len()];
        let mut idx = 0usize;
        for b in 0..s.b {
            let ob = if axes.b { 0 } else { b };
            for c in 0..s.c {
                let oc = if axes.c { 0 } else { c };
                for h in 0..s.h {
                    let oh = if axes.h { 0 } else { h };
                    for w in 0..s.w {
                        let ow = if axes.w { 0 } else { w };
                        let o = out_shape.index(ob, oc, oh, ow);
                        let v = self.data[idx];
                        match kind {
                            Reduction::Sum | Reduction::Mean => out[o] += v,
                            Reduction::Max => {
                                if v > out[o] {
                                    out[o] = v;
                                }
                            }
                        }
                        idx += 1;
                    }
                }
            }
        }
        if kind == Reduction::Mean {
            let count = (s.len() / out_shape.len()) as f64;
            for v in &mut out {
                *v /= count;
            }
        }
        let t = Tensor4 {
            shape: out_shape,
            data: out,
        };
        t.ensure_finite("reduce")?;
        Ok(t)
    }

    /// Concatenate along the batch axis. Shapes must agree on (c, h, w).
    pub fn concat_batch(parts: &[&Tensor4]) -> Result<Tensor4> {
        if parts.is_empty() {
            return Err(Error::EmptyInput { op: "concat_batch" });
        }
        let first = parts[0].shape;
        let mut total_b = 0usize;
        for p in parts {
            let s = p.shape;
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(Error::ShapeMismatch {
                    op: "concat_batch",
                    expected: first.to_string(),
                    got: s.to_string(),
                });
            }
            total_b += s.b;
        }
        let mut data = Vec::with_capacity(total_b * first.c * first.h * first.w);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor4 {
            shape: Shape4::new(total_b, first.c, first.h, first.w),
            data,
        })
    }

    /// Copy of the rows selected by `indices` (batch axis), in the given order.
    pub fn select_batch(&self, indices: &[usize]) -> Result<Tensor4> {
        let s = self.shape;
        let row = s.c * s.h * s.w;
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            if i >= s.b {
                return Err(Error::Domain {
                    op: "select_batch",
                    detail: format!("index {i} out of range for batch {}", s.b),
                });
            }
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        Ok(Tensor4 {
            shape: Shape4::new(indices.len(), s.c, s.h, s.w),
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOL: f64 = 1e-12;

    fn t(shape: Shape4, v: &[f64]) -> Tensor4 {
        Tensor4::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn add_and_mul_elementwise() {
        let s = Shape4::new(1, 2, 1, 2);
        let a = t(s, &[1.0, 2.0, 3.0, 4.0]);
        let b = t(s, &[10.0, 20.0, 30.0, 40.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[11.0, 22.0, 33.0, 44.0]);
        assert_eq!(a.mul(&b).unwrap().data(), &[10.0, 40.0, 90.0, 160.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Tensor4::zeros(Shape4::new(1, 2, 1, 2));
        let b = Tensor4::zeros(Shape4::new(1, 2, 2, 1));
        assert!(matches!(a.add(&b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn from_vec_rejects_nan_and_bad_length() {
        let s = Shape4::new(1, 1, 1, 2);
        assert!(matches!(
            Tensor4::from_vec(s, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
        assert!(matches!(
            Tensor4::from_vec(s, vec![1.0]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn div_by_zero_is_domain_error() {
        let s = Shape4::new(1, 1, 1, 2);
        let a = t(s, &[1.0, 2.0]);
        let b = t(s, &[1.0, 0.0]);
        assert!(matches!(a.div(&b), Err(Error::Domain { .. })));
    }

    #[test]
    fn ln_of_nonpositive_is_domain_error() {
        let s = Shape4::new(1, 1, 1, 2);
        let a = t(s, &[1.0, -1.0]);
        assert!(matches!(a.ln(), Err(Error::Domain { .. })));
        let z = t(s, &[1.0, 0.0]);
        assert!(matches!(z.ln(), Err(Error::Domain { .. })));
    }

    #[test]
    fn exp_overflow_reports_producing_op() {
        let s = Shape4::new(1, 1, 1, 1);
        let a = t(s, &[1000.0]);
        match a.exp() {
            Err(Error::NonFinite { op, .. }) => assert_eq!(op, "exp"),
            other => panic!("expected NonFinite from exp, got {other:?}"),
        }
    }

    #[test]
    fn reduce_sum_matches_naive_loop() {
        let s = Shape4::new(2, 3, 2, 2);
        let data: Vec<f64> = (0..s.len()).map(|i| (i as f64) * 0.37 - 2.0).collect();
        let a = t(s, &data);
        let total = a.reduce(AxisSet::all(), Reduction::Sum).unwrap();
        let naive: f64 = data.iter().sum();
        assert!((total.data()[0] - naive).abs() < TOL);

        // per-channel sum over (b, h, w)
        let per_c = a
            .reduce(AxisSet::of(&[Axis::B, Axis::H, Axis::W]), Reduction::Sum)
            .unwrap();
        assert_eq!(per_c.shape(), Shape4::new(1, 3, 1, 1));
        for c in 0..3 {
            let mut acc = 0.0;
            for b in 0..2 {
                for h in 0..2 {
                    for w in 0..2 {
                        acc += a.get(b, c, h, w);
                    }
                }
            }
            assert!((per_c.get(0, c, 0, 0) - acc).abs() < TOL);
        }
    }

    #[test]
    fn reduce_max_matches_naive_loop() {
        let s = Shape4::new(2, 2, 3, 3);
        let data: Vec<f64> = (0..s.len())
            .map(|i| ((i * 2654435761) % 97) as f64 - 48.0)
            .collect();
        let a = t(s, &data);
        let m = a
            .reduce(AxisSet::of(&[Axis::H, Axis::W]), Reduction::Max)
            .unwrap();
        for b in 0..2 {
            for c in 0..2 {
                let mut best = f64::NEG_INFINITY;
                for h in 0..3 {
                    for w in 0..3 {
                        best = best.max(a.get(b, c, h, w));
                    }
                }
                assert_eq!(m.get(b, c, 0, 0), best);
            }
        }
    }

    #[test]
    fn reduce_mean_of_constant_is_constant() {
        let a = Tensor4::filled(Shape4::new(3, 2, 4, 4), 1.25).unwrap();
        let m = a.reduce(AxisSet::all(), Reduction::Mean).unwrap();
        assert_eq!(m.data()[0], 1.25);
    }

    #[test]
    fn reduce_with_empty_axis_set_is_error() {
        let a = Tensor4::zeros(Shape4::new(1, 1, 1, 1));
        assert!(matches!(
            a.reduce(AxisSet::default(), Reduction::Sum),
            Err(Error::EmptyInput { .. })
        ));
    }

    #[test]
    fn select_and_concat_batch_round_trip() {
        let s = Shape4::new(3, 1, 1, 2);
        let a = t(s, &[0.0, 1.0, 10.0, 11.0, 20.0, 21.0]);
        let picked = a.select_batch(&[2, 0]).unwrap();
        assert_eq!(picked.data(), &[20.0, 21.0, 0.0, 1.0]);
        let back = Tensor4::concat_batch(&[&picked, &a]).unwrap();
        assert_eq!(back.shape().b, 5);
        assert_eq!(back.get(0, 0, 0, 0), 20.0);
        assert_eq!(back.get(2, 0, 0, 1), 1.0);
    }
}
