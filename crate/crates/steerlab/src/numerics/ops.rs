//! Shared numeric kernels. The autodiff tape and the plain (no-gradient)
//! forward paths both call these, so taped and untaped passes are
//! bitwise identical.

use crate::error::{Result, SteerError};

use super::tensor::Tensor;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// y = x Wᵀ + b with x: [n, in], w: [out, in], b: [out].
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, d_in) = match x.shape() {
        [n, d] => (*n, *d),
        other => {
            return Err(SteerError::shape("linear", "[n, in]", format!("{other:?}")));
        }
    };
    let (d_out, w_in) = match w.shape() {
        [o, i] => (*o, *i),
        other => {
            return Err(SteerError::shape("linear", "[out, in]", format!("{other:?}")));
        }
    };
    if w_in != d_in || b.shape() != [d_out] {
        return Err(SteerError::shape(
            "linear",
            format!("x [n, {w_in}] and b [{d_out}]"),
            format!("x {:?}, b {:?}", x.shape(), b.shape()),
        ));
    }
    let xs = x.data();
    let ws = w.data();
    let bs = b.data();
    let mut out = vec![0.0; n * d_out];
    for r in 0..n {
        let xrow = &xs[r * d_in..(r + 1) * d_in];
        let orow = &mut out[r * d_out..(r + 1) * d_out];
        for o in 0..d_out {
            let wrow = &ws[o * d_in..(o + 1) * d_in];
            let mut acc = 0.0;
            for j in 0..d_in {
                acc += xrow[j] * wrow[j];
            }
            orow[o] = acc + bs[o];
        }
    }
    Tensor::new(vec![n, d_out], out)
}

/// Gradients of `linear` given upstream dy: returns (dx, dw, db).
pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let n = x.rows();
    let d_in = x.cols();
    let d_out = w.rows();
    let xs = x.data();
    let ws = w.data();
    let dys = dy.data();

    let mut dx = vec![0.0; n * d_in];
    let mut dw = vec![0.0; d_out * d_in];
    let mut db = vec![0.0; d_out];
    for r in 0..n {
        let xrow = &xs[r * d_in..(r + 1) * d_in];
        let dyrow = &dys[r * d_out..(r + 1) * d_out];
        let dxrow = &mut dx[r * d_in..(r + 1) * d_in];
        for o in 0..d_out {
            let g = dyrow[o];
            db[o] += g;
            let wrow = &ws[o * d_in..(o + 1) * d_in];
            let dwrow = &mut dw[o * d_in..(o + 1) * d_in];
            for j in 0..d_in {
                dxrow[j] += g * wrow[j];
                dwrow[j] += g * xrow[j];
            }
        }
    }
    (
        Tensor::new(vec![n, d_in], dx).expect("shape fixed"),
        Tensor::new(vec![d_out, d_in], dw).expect("shape fixed"),
        Tensor::new(vec![d_out], db).expect("shape fixed"),
    )
}

/// SiLU activation x·σ(x), elementwise.
pub fn silu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v * sigmoid(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

/// dy/dx for SiLU: σ(x)·(1 + x·(1 − σ(x))).
pub fn silu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (1.0 + v * (1.0 - s))
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.add(b)
}

/// Concatenate matrices along columns: [n, c₀] ⊕ [n, c₁] ⊕ … → [n, Σc].
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let n = parts
        .first()
        .ok_or_else(|| SteerError::shape("concat_cols", "at least one part", "none"))?
        .rows();
    let mut total = 0;
    for p in parts {
        if p.rows() != n || p.rank() != 2 {
            return Err(SteerError::shape(
                "concat_cols",
                format!("[{n}, _]"),
                format!("{:?}", p.shape()),
            ));
        }
        total += p.cols();
    }
    let mut out = vec![0.0; n * total];
    for r in 0..n {
        let mut offset = 0;
        for p in parts {
            let c = p.cols();
            out[r * total + offset..r * total + offset + c].copy_from_slice(p.row_slice(r));
            offset += c;
        }
    }
    Tensor::new(vec![n, total], out)
}

/// Gather rows of `table` ([v, e]) at `ids` → [n, e].
pub fn select_rows(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (v, e) = match table.shape() {
        [v, e] => (*v, *e),
        other => {
            return Err(SteerError::shape("select_rows", "[v, e]", format!("{other:?}")));
        }
    };
    let mut out = Vec::with_capacity(ids.len() * e);
    for &id in ids {
        if id >= v {
            return Err(SteerError::shape(
                "select_rows",
                format!("row id < {v}"),
                format!("{id}"),
            ));
        }
        out.extend_from_slice(table.row_slice(id));
    }
    Tensor::new(vec![ids.len(), e], out)
}

/// Tile a vector [e] (or [1, e]) into [n, e] rows.
pub fn broadcast_rows(v: &Tensor, n: usize) -> Result<Tensor> {
    let e = match v.shape() {
        [e] => *e,
        [1, e] => *e,
        other => {
            return Err(SteerError::shape("broadcast_rows", "[e] or [1, e]", format!("{other:?}")));
        }
    };
    let mut out = Vec::with_capacity(n * e);
    for _ in 0..n {
        out.extend_from_slice(&v.data()[..e]);
    }
    Tensor::new(vec![n, e], out)
}

/// Mean over all entries of (a − b)².
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(a.squared_distance(b)? / a.numel() as f64)
}

/// Sum over all entries of (a − b)², i.e. the squared L2 norm of a − b.
pub fn squared_error_sum(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.squared_distance(b)
}
