use std::rc::Rc;

use super::tape::{Node, Op};
use super::tensor::{Bind, TapeRc, Tensor};
use super::{shape_err, NdError, Result};

/// Tape context shared by an op's bound operands: all bound inputs must come
/// from the same tape at its current generation.
fn merge_binds(op: &'static str, inputs: &[&Tensor]) -> Result<Option<(TapeRc, u64)>> {
    let mut ctx: Option<(TapeRc, u64)> = None;
    for t in inputs {
        let Some(bind) = &t.bind else { continue };
        let current = bind.tape.borrow().gen;
        if bind.gen != current {
            return Err(NdError::StaleTape {
                bound: bind.gen,
                current,
            });
        }
        match &ctx {
            None => ctx = Some((Rc::clone(&bind.tape), bind.gen)),
            Some((tape, _)) => {
                if !Rc::ptr_eq(tape, &bind.tape) {
                    return Err(NdError::Contract(format!(
                        "{op}: operands bound to different tapes"
                    )));
                }
            }
        }
    }
    Ok(ctx)
}

fn parent(t: &Tensor) -> Option<usize> {
    t.bind.as_ref().map(|b| b.idx)
}

/// Record `out` on the operands' tape (if any) and return it bound.
fn record(op_name: &'static str, op: Op, inputs: &[&Tensor], out: Tensor) -> Result<Tensor> {
    match merge_binds(op_name, inputs)? {
        None => Ok(out),
        Some((tape, gen)) => {
            let mut parents = [None, None];
            for (slot, t) in inputs.iter().enumerate().take(2) {
                parents[slot] = parent(t);
            }
            let mut inner = tape.borrow_mut();
            let idx = inner.nodes.len();
            inner.nodes.push(Node {
                op,
                parents,
                param: false,
            });
            drop(inner);
            Ok(out.with_bind(Bind { tape, gen, idx }))
        }
    }
}

/// Standard matrix product `a[mxk] * b[kxn]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [m, k] = a.shape();
    let [k2, n] = b.shape();
    if k != k2 {
        return Err(shape_err("matmul", format!("{m}x{k} * {k2}x{n}")));
    }
    let mut out = Tensor::zeros(m, n);
    {
        let (ad, bd) = (a.data(), b.data());
        let od = out.data_mut();
        for i in 0..m {
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                let orow = &mut od[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
    }
    record(
        "matmul",
        Op::Matmul {
            a: a.detach(),
            b: b.detach(),
        },
        &[a, b],
        out,
    )
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let [m, n] = a.shape();
    let mut out = Tensor::zeros(n, m);
    {
        let ad = a.data();
        let od = out.data_mut();
        for i in 0..m {
            for j in 0..n {
                od[j * m + i] = ad[i * n + j];
            }
        }
    }
    record("transpose", Op::Transpose, &[a], out)
}

fn zip_elementwise(
    name: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            name,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| f(*x, *y))
        .collect();
    Tensor::new(a.shape()[0], a.shape()[1], data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let out = zip_elementwise("add", a, b, |x, y| x + y)?;
    record("add", Op::Add, &[a, b], out)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let out = zip_elementwise("sub", a, b, |x, y| x - y)?;
    record("sub", Op::Sub, &[a, b], out)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let out = zip_elementwise("mul", a, b, |x, y| x * y)?;
    record(
        "mul",
        Op::Mul {
            a: a.detach(),
            b: b.detach(),
        },
        &[a, b],
        out,
    )
}

pub fn neg(a: &Tensor) -> Result<Tensor> {
    let data = a.data().iter().map(|x| -x).collect();
    let out = Tensor::new(a.shape()[0], a.shape()[1], data)?;
    record("neg", Op::Neg, &[a], out)
}

pub fn scale(a: &Tensor, c: f64) -> Result<Tensor> {
    let data = a.data().iter().map(|x| c * x).collect();
    let out = Tensor::new(a.shape()[0], a.shape()[1], data)?;
    record("scale", Op::Scale(c), &[a], out)
}

/// Broadcast add of a `1xn` row onto every row of `x[mxn]` (bias add).
pub fn add_row(x: &Tensor, row: &Tensor) -> Result<Tensor> {
    let [m, n] = x.shape();
    if row.shape() != [1, n] {
        return Err(shape_err(
            "add_row",
            format!("{:?} + {:?}", x.shape(), row.shape()),
        ));
    }
    let mut out = x.detach();
    {
        let rd: Vec<f64> = row.data().to_vec();
        let od = out.data_mut();
        for i in 0..m {
            for j in 0..n {
                od[i * n + j] += rd[j];
            }
        }
    }
    record("add_row", Op::AddRow, &[x, row], out)
}

/// Sum over rows: `[mxn] -> [1xn]`.
pub fn sum_rows(x: &Tensor) -> Result<Tensor> {
    let [m, n] = x.shape();
    let mut out = Tensor::zeros(1, n);
    {
        let xd = x.data();
        let od = out.data_mut();
        for i in 0..m {
            for j in 0..n {
                od[j] += xd[i * n + j];
            }
        }
    }
    record("sum_rows", Op::SumRows { rows: m }, &[x], out)
}

/// Sum over columns: `[mxn] -> [mx1]`.
pub fn sum_cols(x: &Tensor) -> Result<Tensor> {
    let [m, n] = x.shape();
    let mut out = Tensor::zeros(m, 1);
    {
        let xd = x.data();
        let od = out.data_mut();
        for i in 0..m {
            od[i] = xd[i * n..(i + 1) * n].iter().sum();
        }
    }
    record("sum_cols", Op::SumCols { cols: n }, &[x], out)
}

/// Tile a `1xn` row `m` times.
pub fn repeat_rows(row: &Tensor, m: usize) -> Result<Tensor> {
    let [r, n] = row.shape();
    if r != 1 {
        return Err(shape_err(
            "repeat_rows",
            format!("expected 1xn, got {r}x{n}"),
        ));
    }
    let mut data = Vec::with_capacity(m * n);
    for _ in 0..m {
        data.extend_from_slice(row.data());
    }
    let out = Tensor::new(m, n, data)?;
    record("repeat_rows", Op::RepeatRows, &[row], out)
}

/// Tile an `mx1` column `n` times.
pub fn repeat_cols(col: &Tensor, n: usize) -> Result<Tensor> {
    let [m, c] = col.shape();
    if c != 1 {
        return Err(shape_err(
            "repeat_cols",
            format!("expected mx1, got {m}x{c}"),
        ));
    }
    let mut data = Vec::with_capacity(m * n);
    for i in 0..m {
        let v = col.data()[i];
        data.extend(std::iter::repeat(v).take(n));
    }
    let out = Tensor::new(m, n, data)?;
    record("repeat_cols", Op::RepeatCols, &[col], out)
}

pub fn sum_all(x: &Tensor) -> Result<Tensor> {
    let [m, n] = x.shape();
    let out = Tensor::scalar(x.data().iter().sum());
    record("sum_all", Op::SumAll { rows: m, cols: n }, &[x], out)
}

/// Broadcast a scalar to `rows x cols`.
pub fn spread(s: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    let v = s
        .item()
        .map_err(|_| shape_err("spread", format!("expected 1x1, got {:?}", s.shape())))?;
    let out = Tensor::new(rows, cols, vec![v; rows * cols])?;
    record("spread", Op::Spread, &[s], out)
}

pub fn mean_all(x: &Tensor) -> Result<Tensor> {
    let n = x.numel() as f64;
    scale(&sum_all(x)?, 1.0 / n)
}

/// Multiply every element of `x` by a `1x1` scalar tensor.
pub fn mul_scalar(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    let [m, n] = x.shape();
    mul(x, &spread(s, m, n)?)
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    let mask_data: Vec<f64> = x
        .data()
        .iter()
        .map(|v| if *v > 0.0 { 1.0 } else { 0.0 })
        .collect();
    let data = x.data().iter().map(|v| v.max(0.0)).collect();
    let [m, n] = x.shape();
    let mask = Tensor::new(m, n, mask_data)?;
    let out = Tensor::new(m, n, data)?;
    record("relu", Op::Relu { mask }, &[x], out)
}

pub fn tanh(x: &Tensor) -> Result<Tensor> {
    let data: Vec<f64> = x.data().iter().map(|v| v.tanh()).collect();
    let [m, n] = x.shape();
    let out = Tensor::new(m, n, data)?;
    let y = out.clone();
    record("tanh", Op::Tanh { y }, &[x], out)
}

pub fn exp(x: &Tensor) -> Result<Tensor> {
    let data: Vec<f64> = x.data().iter().map(|v| v.exp()).collect();
    let [m, n] = x.shape();
    let out = Tensor::new(m, n, data)?;
    let y = out.clone();
    record("exp", Op::Exp { y }, &[x], out)
}

/// Row-wise softmax, max-stabilized.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let [m, n] = x.shape();
    let mut data = vec![0.0; m * n];
    let xd = x.data();
    for i in 0..m {
        let row = &xd[i * n..(i + 1) * n];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..n {
            let e = (row[j] - mx).exp();
            data[i * n + j] = e;
            z += e;
        }
        for j in 0..n {
            data[i * n + j] /= z;
        }
    }
    let out = Tensor::new(m, n, data)?;
    let y = out.clone();
    record("softmax_rows", Op::SoftmaxRows { y }, &[x], out)
}

/// Row-wise log-sum-exp: `[mxn] -> [mx1]`, max-stabilized.
pub fn logsumexp_cols(x: &Tensor) -> Result<Tensor> {
    let [m, n] = x.shape();
    let mut data = vec![0.0; m];
    let xd = x.data();
    for i in 0..m {
        let row = &xd[i * n..(i + 1) * n];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        data[i] = mx + z.ln();
    }
    let out = Tensor::new(m, 1, data)?;
    record(
        "logsumexp_cols",
        Op::LogsumexpCols { x: x.detach() },
        &[x],
        out,
    )
}

/// Pick `x[b, labels[b]]` per row: `[mxn] -> [mx1]`.
pub fn gather_cols(x: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let [m, n] = x.shape();
    if labels.len() != m {
        return Err(shape_err(
            "gather_cols",
            format!("{} labels for {} rows", labels.len(), m),
        ));
    }
    let mut onehot = Tensor::zeros(m, n);
    let mut data = vec![0.0; m];
    for (i, &lab) in labels.iter().enumerate() {
        if lab >= n {
            return Err(NdError::LabelRange {
                label: lab,
                classes: n,
            });
        }
        onehot.data_mut()[i * n + lab] = 1.0;
        data[i] = x.data()[i * n + lab];
    }
    let out = Tensor::new(m, 1, data)?;
    record("gather_cols", Op::GatherCols { onehot }, &[x], out)
}

/// Mean over the batch of `-log softmax(logits)[label]`.
///
/// Computed as `mean_b(logsumexp(logits_b) - logits_b[y_b])`, which is exact
/// and stays differentiable to any order.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let b = logits.shape()[0] as f64;
    let lse = logsumexp_cols(logits)?;
    let picked = gather_cols(logits, labels)?;
    let loss = scale(&sum_all(&sub(&lse, &picked)?)?, 1.0 / b)?;
    if !loss.all_finite() {
        return Err(NdError::NonFinite("softmax_cross_entropy".into()));
    }
    Ok(loss)
}

/// Mean squared error over all elements.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let d = sub(pred, target)?;
    let loss = mean_all(&mul(&d, &d)?)?;
    if !loss.all_finite() {
        return Err(NdError::NonFinite("mse".into()));
    }
    Ok(loss)
}

/// Row-wise argmax (plain value helper, never taped).
pub fn argmax_rows(x: &Tensor) -> Vec<usize> {
    let [m, n] = x.shape();
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let row = &x.data()[i * n..(i + 1) * n];
        let mut best = 0;
        for j in 1..n {
            if row[j] > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    out
}
