//! Dense f64 tensors and the fixed set of forward/backward primitives the
//! recurrent models are built from.
//!
//! This is deliberately not a general autodiff graph: every primitive is a
//! `*_fwd` function paired with a `*_bwd` function, and the model code chains
//! the backward passes by hand. Everything is row-major, 64-bit, and
//! shape-checked; a NaN or infinity coming out of a forward op is a hard
//! error (panic), since nothing downstream can recover from it.

/// Dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        assert!(shape.iter().all(|&e| e > 0), "zero extent in shape {shape:?}");
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape {shape:?} does not match data length {}", data.len());
        assert!(shape.iter().all(|&e| e > 0), "zero extent in shape {shape:?}");
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Hard error on NaN/Inf; `what` names the producing op in the panic.
    pub fn assert_finite(&self, what: &str) {
        assert!(self.is_finite(), "non-finite value produced by {what}");
    }

    /// `self += alpha * other`, elementwise. Shapes must agree.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += alpha * b;
        }
    }
}

// ── matrix product ──────────────────────────────────────────────────────

/// `[m,k] x [k,n] -> [m,n]`. Panics with a dimension error on mismatch.
pub fn matmul_fwd(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rank(), 2, "matmul lhs must be rank 2, got {:?}", a.shape());
    assert_eq!(b.rank(), 2, "matmul rhs must be rank 2, got {:?}", b.shape());
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    assert_eq!(k, k2, "matmul inner dimension mismatch: {:?} x {:?}", a.shape(), b.shape());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    let t = Tensor::from_vec(&[m, n], out);
    t.assert_finite("matmul_fwd");
    t
}

/// Gradients of `matmul_fwd`: given `dL/dout`, returns `(dL/da, dL/db)`.
pub fn matmul_bwd(a: &Tensor, b: &Tensor, dout: &Tensor) -> (Tensor, Tensor) {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    assert_eq!(dout.shape(), &[m, n], "matmul_bwd upstream shape mismatch");
    // da = dout . b^T
    let mut da = vec![0.0; m * k];
    for i in 0..m {
        for p in 0..k {
            let mut s = 0.0;
            for j in 0..n {
                s += dout.data[i * n + j] * b.data[p * n + j];
            }
            da[i * k + p] = s;
        }
    }
    // db = a^T . dout
    let mut db = vec![0.0; k * n];
    for p in 0..k {
        for i in 0..m {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                db[p * n + j] += av * dout.data[i * n + j];
            }
        }
    }
    (Tensor::from_vec(&[m, k], da), Tensor::from_vec(&[k, n], db))
}

/// `W[m,k] . x[k] -> y[m]`. The workhorse of every model step.
pub fn matvec_fwd(w: &Tensor, x: &Tensor) -> Tensor {
    assert_eq!(w.rank(), 2, "matvec lhs must be rank 2, got {:?}", w.shape());
    assert_eq!(x.rank(), 1, "matvec rhs must be rank 1, got {:?}", x.shape());
    let (m, k) = (w.shape[0], w.shape[1]);
    assert_eq!(k, x.shape[0], "matvec dimension mismatch: {:?} x {:?}", w.shape(), x.shape());
    let mut out = vec![0.0; m];
    for i in 0..m {
        let row = &w.data[i * k..(i + 1) * k];
        let mut s = 0.0;
        for p in 0..k {
            s += row[p] * x.data[p];
        }
        out[i] = s;
    }
    let t = Tensor::from_vec(&[m], out);
    t.assert_finite("matvec_fwd");
    t
}

/// Accumulating backward of `matvec_fwd`: `dw += dy (x) x`, `dx += W^T dy`.
pub fn matvec_bwd_acc(w: &Tensor, x: &Tensor, dy: &Tensor, dw: &mut Tensor, dx: &mut Tensor) {
    let (m, k) = (w.shape[0], w.shape[1]);
    assert_eq!(dy.shape(), &[m], "matvec_bwd upstream shape mismatch");
    assert_eq!(dw.shape(), w.shape(), "matvec_bwd dw shape mismatch");
    assert_eq!(dx.shape(), x.shape(), "matvec_bwd dx shape mismatch");
    for i in 0..m {
        let g = dy.data[i];
        if g == 0.0 {
            continue;
        }
        let wrow = &w.data[i * k..(i + 1) * k];
        let dwrow = &mut dw.data[i * k..(i + 1) * k];
        for p in 0..k {
            dwrow[p] += g * x.data[p];
            dx.data[p] += g * wrow[p];
        }
    }
}

// ── elementwise suite ───────────────────────────────────────────────────

pub fn sigmoid_fwd(x: &Tensor) -> Tensor {
    let data = x.data.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
    let t = Tensor { shape: x.shape.clone(), data };
    t.assert_finite("sigmoid_fwd");
    t
}

/// Backward from the forward *output* `y`: `dx = dy * y * (1 - y)`.
pub fn sigmoid_bwd(y: &Tensor, dy: &Tensor) -> Tensor {
    assert_eq!(y.shape, dy.shape, "sigmoid_bwd shape mismatch");
    let data = y.data.iter().zip(dy.data.iter()).map(|(&y, &g)| g * y * (1.0 - y)).collect();
    Tensor { shape: y.shape.clone(), data }
}

pub fn tanh_fwd(x: &Tensor) -> Tensor {
    let data = x.data.iter().map(|&v| v.tanh()).collect();
    let t = Tensor { shape: x.shape.clone(), data };
    t.assert_finite("tanh_fwd");
    t
}

/// Backward from the forward output: `dx = dy * (1 - y^2)`.
pub fn tanh_bwd(y: &Tensor, dy: &Tensor) -> Tensor {
    assert_eq!(y.shape, dy.shape, "tanh_bwd shape mismatch");
    let data = y.data.iter().zip(dy.data.iter()).map(|(&y, &g)| g * (1.0 - y * y)).collect();
    Tensor { shape: y.shape.clone(), data }
}

/// Softmax over the last axis, max-shifted for stability.
/// Every row of the output sums to 1.
pub fn softmax_fwd(x: &Tensor) -> Tensor {
    let last = *x.shape.last().expect("softmax on empty shape");
    let rows = x.numel() / last;
    let mut data = vec![0.0; x.numel()];
    for r in 0..rows {
        let row = &x.data[r * last..(r + 1) * last];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in data[r * last..(r + 1) * last].iter_mut().zip(row.iter()) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in data[r * last..(r + 1) * last].iter_mut() {
            *o /= sum;
        }
    }
    let t = Tensor { shape: x.shape.clone(), data };
    t.assert_finite("softmax_fwd");
    t
}

/// Backward from the forward output: `dx = y * (dy - sum(y * dy))` per row.
pub fn softmax_bwd(y: &Tensor, dy: &Tensor) -> Tensor {
    assert_eq!(y.shape, dy.shape, "softmax_bwd shape mismatch");
    let last = *y.shape.last().unwrap();
    let rows = y.numel() / last;
    let mut data = vec![0.0; y.numel()];
    for r in 0..rows {
        let yr = &y.data[r * last..(r + 1) * last];
        let gr = &dy.data[r * last..(r + 1) * last];
        let dot: f64 = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &gv) in data[r * last..(r + 1) * last].iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
    Tensor { shape: y.shape.clone(), data }
}

/// Maxout with 2 units over the last axis: adjacent pairs are reduced to
/// their max, halving the last extent. Returns the output and the winning
/// offset (0 or 1) per pair, which the backward pass needs.
pub fn maxout2_fwd(x: &Tensor) -> (Tensor, Vec<u8>) {
    let last = *x.shape.last().expect("maxout2 on empty shape");
    assert!(last % 2 == 0, "maxout2 needs an even last extent, got {last}");
    let rows = x.numel() / last;
    let half = last / 2;
    let mut out = vec![0.0; rows * half];
    let mut winners = vec![0u8; rows * half];
    for r in 0..rows {
        for j in 0..half {
            let a = x.data[r * last + 2 * j];
            let b = x.data[r * last + 2 * j + 1];
            // ties go to the first unit
            if b > a {
                out[r * half + j] = b;
                winners[r * half + j] = 1;
            } else {
                out[r * half + j] = a;
            }
        }
    }
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = half;
    (Tensor { shape, data: out }, winners)
}

/// Backward of `maxout2_fwd`: routes each gradient to the winning unit.
pub fn maxout2_bwd(winners: &[u8], dy: &Tensor, in_shape: &[usize]) -> Tensor {
    let last = *in_shape.last().unwrap();
    let half = last / 2;
    let rows: usize = in_shape.iter().product::<usize>() / last;
    assert_eq!(dy.numel(), rows * half, "maxout2_bwd upstream shape mismatch");
    let mut dx = Tensor::zeros(in_shape);
    for r in 0..rows {
        for j in 0..half {
            let w = winners[r * half + j] as usize;
            dx.data[r * last + 2 * j + w] = dy.data[r * half + j];
        }
    }
    dx
}

/// Elementwise product.
pub fn hadamard_fwd(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape, b.shape, "hadamard shape mismatch");
    let data = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| x * y).collect();
    let t = Tensor { shape: a.shape.clone(), data };
    t.assert_finite("hadamard_fwd");
    t
}

/// Gradients of `hadamard_fwd`: `(dout * b, dout * a)`.
pub fn hadamard_bwd(a: &Tensor, b: &Tensor, dout: &Tensor) -> (Tensor, Tensor) {
    (hadamard_mul(dout, b), hadamard_mul(dout, a))
}

fn hadamard_mul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape, b.shape, "hadamard shape mismatch");
    let data = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| x * y).collect();
    Tensor { shape: a.shape.clone(), data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn randt(shape: &[usize], rng: &mut ChaCha12Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let v = Tensor::from_vec(&[2, 1], vec![2.0, 3.0]);
        assert_eq!(matmul_fwd(&eye, &v).data(), &[2.0, 3.0]);
    }

    #[test]
    fn matmul_zero() {
        let z = Tensor::zeros(&[3, 4]);
        let b = Tensor::from_vec(&[4, 2], (0..8).map(|i| i as f64).collect());
        assert!(matmul_fwd(&z, &b).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    #[should_panic(expected = "inner dimension mismatch")]
    fn matmul_dim_error() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        matmul_fwd(&a, &b);
    }

    #[test]
    fn matmul_grad_of_sum_is_broadcast_of_rhs_rows() {
        // L = sum(a x b) with a 2x3, b 3x1: dL/da[i,p] = b[p].
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let a = randt(&[2, 3], &mut rng);
        let b = randt(&[3, 1], &mut rng);
        let ones = Tensor::from_vec(&[2, 1], vec![1.0, 1.0]);
        let (da, _) = matmul_bwd(&a, &b, &ones);
        for i in 0..2 {
            for p in 0..3 {
                assert!((da.data()[i * 3 + p] - b.data()[p]).abs() < 1e-12);
            }
        }
        // And against the finite-difference oracle on the same loss.
        let fd = central_diff(a.data(), 1e-5, |ad| {
            let av = Tensor::from_vec(&[2, 3], ad.to_vec());
            matmul_fwd(&av, &b).data().iter().sum()
        });
        assert!(max_rel_err(da.data(), &fd) < 1e-6);
    }

    #[test]
    fn matmul_bwd_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..5 {
            let a = randt(&[3, 4], &mut rng);
            let b = randt(&[4, 2], &mut rng);
            // weighted sum so the upstream gradient is non-trivial
            let w = randt(&[3, 2], &mut rng);
            let (da, db) = matmul_bwd(&a, &b, &w);
            let loss = |av: &Tensor, bv: &Tensor| -> f64 {
                matmul_fwd(av, bv).data().iter().zip(w.data()).map(|(&o, &wi)| o * wi).sum()
            };
            let fda = central_diff(a.data(), 1e-5, |ad| {
                loss(&Tensor::from_vec(&[3, 4], ad.to_vec()), &b)
            });
            let fdb = central_diff(b.data(), 1e-5, |bd| {
                loss(&a, &Tensor::from_vec(&[4, 2], bd.to_vec()))
            });
            assert!(max_rel_err(da.data(), &fda) < 1e-6);
            assert!(max_rel_err(db.data(), &fdb) < 1e-6);
        }
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let y = softmax_fwd(&Tensor::from_vec(&[3], vec![0.0, 0.0, 0.0]));
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = randt(&[4, 7], &mut rng);
            let y = softmax_fwd(&x);
            for r in 0..4 {
                let s: f64 = y.data()[r * 7..(r + 1) * 7].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(y.data()[r * 7..(r + 1) * 7].iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn maxout2_pairwise_max() {
        let (y, w) = maxout2_fwd(&Tensor::from_vec(&[4], vec![1.0, 5.0, 2.0, -2.0]));
        assert_eq!(y.data(), &[5.0, 2.0]);
        assert_eq!(w, vec![1, 0]);
    }

    #[test]
    #[should_panic(expected = "even last extent")]
    fn maxout2_odd_extent_is_dimension_error() {
        maxout2_fwd(&Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]));
    }

    #[test]
    fn sigmoid_bwd_at_zero_is_quarter_upstream() {
        let y = sigmoid_fwd(&Tensor::from_vec(&[1], vec![0.0]));
        let dx = sigmoid_bwd(&y, &Tensor::from_vec(&[1], vec![2.0]));
        assert!((dx.data()[0] - 0.5).abs() < 1e-15); // 0.25 * 2.0
    }

    #[test]
    fn elementwise_bwd_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x = randt(&[2, 6], &mut rng);
        let up = randt(&[2, 6], &mut rng);
        let up_half = randt(&[2, 3], &mut rng);

        let weighted = |y: &Tensor, w: &Tensor| -> f64 {
            y.data().iter().zip(w.data()).map(|(&a, &b)| a * b).sum()
        };

        // sigmoid
        let y = sigmoid_fwd(&x);
        let dx = sigmoid_bwd(&y, &up);
        let fd = central_diff(x.data(), 1e-5, |d| {
            weighted(&sigmoid_fwd(&Tensor::from_vec(&[2, 6], d.to_vec())), &up)
        });
        assert!(max_rel_err(dx.data(), &fd) < 1e-6, "sigmoid");

        // tanh
        let y = tanh_fwd(&x);
        let dx = tanh_bwd(&y, &up);
        let fd = central_diff(x.data(), 1e-5, |d| {
            weighted(&tanh_fwd(&Tensor::from_vec(&[2, 6], d.to_vec())), &up)
        });
        assert!(max_rel_err(dx.data(), &fd) < 1e-6, "tanh");

        // softmax
        let y = softmax_fwd(&x);
        let dx = softmax_bwd(&y, &up);
        let fd = central_diff(x.data(), 1e-5, |d| {
            weighted(&softmax_fwd(&Tensor::from_vec(&[2, 6], d.to_vec())), &up)
        });
        assert!(max_rel_err(dx.data(), &fd) < 1e-6, "softmax");

        // maxout2 (x has no exact pair ties with this seed)
        let (y, winners) = maxout2_fwd(&x);
        let _ = y;
        let dx = maxout2_bwd(&winners, &up_half, x.shape());
        let fd = central_diff(x.data(), 1e-5, |d| {
            let (y, _) = maxout2_fwd(&Tensor::from_vec(&[2, 6], d.to_vec()));
            weighted(&y, &up_half)
        });
        assert!(max_rel_err(dx.data(), &fd) < 1e-6, "maxout2");

        // hadamard
        let b = randt(&[2, 6], &mut rng);
        let (da, db) = hadamard_bwd(&x, &b, &up);
        let fd_a = central_diff(x.data(), 1e-5, |d| {
            weighted(&hadamard_fwd(&Tensor::from_vec(&[2, 6], d.to_vec()), &b), &up)
        });
        let fd_b = central_diff(b.data(), 1e-5, |d| {
            weighted(&hadamard_fwd(&x, &Tensor::from_vec(&[2, 6], d.to_vec())), &up)
        });
        assert!(max_rel_err(da.data(), &fd_a) < 1e-6, "hadamard lhs");
        assert!(max_rel_err(db.data(), &fd_b) < 1e-6, "hadamard rhs");
    }

    #[test]
    fn matvec_bwd_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let w = randt(&[5, 4], &mut rng);
        let x = randt(&[4], &mut rng);
        let up = randt(&[5], &mut rng);
        let mut dw = Tensor::zeros(&[5, 4]);
        let mut dx = Tensor::zeros(&[4]);
        matvec_bwd_acc(&w, &x, &up, &mut dw, &mut dx);
        let loss = |wv: &Tensor, xv: &Tensor| -> f64 {
            matvec_fwd(wv, xv).data().iter().zip(up.data()).map(|(&a, &b)| a * b).sum()
        };
        let fdw = central_diff(w.data(), 1e-5, |d| loss(&Tensor::from_vec(&[5, 4], d.to_vec()), &x));
        let fdx = central_diff(x.data(), 1e-5, |d| loss(&w, &Tensor::from_vec(&[4], d.to_vec())));
        assert!(max_rel_err(dw.data(), &fdw) < 1e-6);
        assert!(max_rel_err(dx.data(), &fdx) < 1e-6);
    }
}
