//! Non-recording evaluator, generic over the float width.

use std::borrow::Cow;

use super::kernels;
use super::tape::kernel_scatter;
use super::{bad_broadcast, bad_matmul, broadcast_ok, Graph, Scalar, Var};
use crate::error::{DoeError, Result};

struct Value<'a, F: Scalar> {
    data: Cow<'a, [F]>,
    rows: usize,
    cols: usize,
}

/// Arena of plain values; operations are computed immediately and nothing
/// is kept for a backward pass. Taps are ignored.
pub struct Eager<'a, F: Scalar> {
    values: Vec<Value<'a, F>>,
}

impl<F: Scalar> Default for Eager<'_, F> {
    fn default() -> Self {
        Eager { values: Vec::new() }
    }
}

impl<'a, F: Scalar> Eager<'a, F> {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, data: Vec<F>, rows: usize, cols: usize) -> Var {
        self.values.push(Value {
            data: Cow::Owned(data),
            rows,
            cols,
        });
        Var(self.values.len() - 1)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        (self.values[v.0].rows, self.values[v.0].cols)
    }

    fn val(&self, v: Var) -> &[F] {
        &self.values[v.0].data
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(F, F) -> F) -> Result<Var> {
        let (sa, sb) = (self.dims(a), self.dims(b));
        if !broadcast_ok(sa, sb) {
            return Err(bad_broadcast(name, sa, sb));
        }
        let (av, bv) = (self.val(a), self.val(b));
        let mut out = Vec::with_capacity(av.len());
        if sa == sb {
            out.extend(av.iter().zip(bv.iter()).map(|(&x, &y)| f(x, y)));
        } else {
            for row in av.chunks(sa.1.max(1)) {
                out.extend(row.iter().zip(bv.iter()).map(|(&x, &y)| f(x, y)));
            }
        }
        Ok(self.push(out, sa.0, sa.1))
    }

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F) -> Var {
        let out = self.val(a).iter().map(|&x| f(x)).collect();
        let (r, c) = self.dims(a);
        self.push(out, r, c)
    }
}

impl<'a, F: Scalar> Graph<'a> for Eager<'a, F> {
    type F = F;

    fn constant(&mut self, data: Cow<'a, [F]>, rows: usize, cols: usize) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(DoeError::dim(format!(
                "constant of {} values cannot be {rows}x{cols}",
                data.len()
            )));
        }
        self.values.push(Value { data, rows, cols });
        Ok(Var(self.values.len() - 1))
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.dims(v)
    }

    fn value(&self, v: Var) -> &[F] {
        self.val(v)
    }

    fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(bad_matmul((m, k), (k2, n), false));
        }
        let mut out = vec![F::ZERO; m * n];
        kernels::matmul_nn(self.val(a), self.val(b), m, k, n, &mut out);
        Ok(self.push(out, m, n))
    }

    fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (n, k2)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(bad_matmul((m, k), (n, k2), true));
        }
        let mut out = vec![F::ZERO; m * n];
        kernels::matmul_nt(self.val(a), self.val(b), m, k, n, &mut out);
        Ok(self.push(out, m, n))
    }

    fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y)
    }

    fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y)
    }

    fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = F::from_f64(s);
        self.unary(a, |x| x * s)
    }

    fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, kernels::gelu)
    }

    fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh())
    }

    fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let mut out = vec![F::ZERO; r * c];
        if !kernels::softmax_rows(self.val(a), r, c, &mut out) {
            return Err(DoeError::Numeric("NaN input to softmax".into()));
        }
        Ok(self.push(out, r, c))
    }

    fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        if c < 2 {
            return Err(DoeError::dim(format!("layernorm needs width >= 2, got {c}")));
        }
        if self.val(gain).len() != c || self.val(bias).len() != c {
            return Err(DoeError::dim(format!(
                "layernorm gain/bias must have {c} entries"
            )));
        }
        let mut out = vec![F::ZERO; r * c];
        kernels::layernorm(
            self.val(x),
            self.val(gain),
            self.val(bias),
            r,
            c,
            eps,
            &mut out,
            None,
            None,
        );
        Ok(self.push(out, r, c))
    }

    fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (tr, tc) = self.dims(table);
        let t = self.val(table);
        let mut out = Vec::with_capacity(ids.len() * tc);
        for &id in ids {
            if id >= tr {
                return Err(DoeError::dim(format!("row {id} outside table of {tr} rows")));
            }
            out.extend_from_slice(&t[id * tc..(id + 1) * tc]);
        }
        Ok(self.push(out, ids.len(), tc))
    }

    fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|&p| self.dims(p).1).unwrap_or(0);
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != cols {
                return Err(DoeError::dim(format!(
                    "concat_rows: width {c} differs from {cols}"
                )));
            }
            out.extend_from_slice(self.val(p));
            rows += r;
        }
        Ok(self.push(out, rows, cols))
    }

    fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + len > r {
            return Err(DoeError::dim(format!("slice_rows {start}+{len} beyond {r}")));
        }
        let out = self.val(a)[start * c..(start + len) * c].to_vec();
        Ok(self.push(out, len, c))
    }

    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.dims(p).0).unwrap_or(0);
        if parts.iter().any(|&p| self.dims(p).0 != rows) {
            return Err(DoeError::dim("concat_cols: row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let pc = self.dims(p).1;
                out.extend_from_slice(&self.val(p)[r * pc..(r + 1) * pc]);
            }
        }
        Ok(self.push(out, rows, cols))
    }

    fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + len > c {
            return Err(DoeError::dim(format!("slice_cols {start}+{len} beyond {c}")));
        }
        let v = self.val(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        Ok(self.push(out, r, len))
    }

    fn select_cols(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if let Some(bad) = index.iter().find(|&&i| i >= c) {
            return Err(DoeError::dim(format!("select_cols index {bad} beyond {c}")));
        }
        let v = self.val(a);
        let out = (0..r)
            .flat_map(|i| index.iter().map(move |&j| v[i * c + j]))
            .collect();
        Ok(self.push(out, r, index.len()))
    }

    fn scatter_cols(&mut self, a: Var, index: &[usize], width: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        let out = kernel_scatter(self.val(a), r, c, index, width)?;
        Ok(self.push(out, r, width))
    }

    fn tap(&mut self, _v: Var) {}
}
