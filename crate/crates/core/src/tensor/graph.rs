use std::collections::HashMap;

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::{shape_err, Grads, ParamStore, Result, Tensor, TensorError};

/// Normalization floor added to every variance.
pub const NORM_EPS: f64 = 1e-6;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    GatedTanh(Var, Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv1d {
        x: Var,
        k: Var,
        dilation: usize,
    },
    Conv2d {
        x: Var,
        k: Var,
    },
    SpaceToDepth2(Var),
    Upsample2(Var),
    ConcatLast(Var, Var),
    SliceLast {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    PadCrop2d(Var),
    Reshape(Var),
    Mse(Var, Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A tape of tensor operations supporting one reverse pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    nonfinite: Option<&'static str>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Fails if any recorded op produced NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.nonfinite {
            Some(op) => Err(TensorError::NonFinite { op }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        if self.nonfinite.is_none() && !value.all_finite() {
            self.nonfinite = Some(op_name(&op));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Loads a parameter into the graph; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.value(name)?.clone();
        let v = self.push(t, Op::Param(name.to_string()), true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// `a · b`, where `a` is `[.., k]` (leading dims flattened) and `b` is `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.val(a).len() / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, self.val(a).data(), self.val(b).data(), &mut out, 0.0);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` for 2-D `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("matmul_nt", format!("{sa:?} x {sb:?}ᵀ")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        gemm_nt(m, k, n, self.val(a).data(), self.val(b).data(), &mut out, 0.0);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor { shape, data }, op, ng)
    }

    fn map_unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.val(a).map(f);
        let ng = self.needs(a);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map_unary(a, Op::Scale(a, c), |x| x * c)
    }

    /// Adds `b: [n]` to every row of `x: [.., n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.val(b).len();
        if self.shape(b).len() != 1 || self.val(x).cols() != n || self.shape(x).is_empty() {
            return Err(shape_err(
                "add_bias",
                format!("{:?} + {:?}", self.shape(x), self.shape(b)),
            ));
        }
        let mut t = self.val(x).clone();
        let bias = self.val(b).data();
        for row in t.data_mut().chunks_mut(n) {
            row.iter_mut().zip(bias).for_each(|(v, &bb)| *v += bb);
        }
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(t, Op::AddBias(x, b), ng))
    }

    /// `x · w + b` with `x: [.., in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Gelu(a), gelu)
    }

    /// `tanh(a) ⊙ sigmoid(b)`.
    pub fn gated_tanh(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("gated_tanh", a, b)?;
        Ok(self.zip_with(a, b, Op::GatedTanh(a, b), |x, y| x.tanh() * sigmoid(y)))
    }

    /// Softmax over the last dimension with row-max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut t = self.val(a).clone();
        let n = t.cols();
        for row in t.data_mut().chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let ng = self.needs(a);
        self.push(t, Op::SoftmaxRows(a), ng)
    }

    /// Layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = self.val(x).cols();
        if self.val(gamma).len() != n || self.val(beta).len() != n {
            return Err(shape_err(
                "layer_norm",
                format!("{:?} with gamma {:?}", self.shape(x), self.shape(gamma)),
            ));
        }
        let xs = self.val(x);
        let rows = xs.len() / n.max(1);
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        let (g, b) = (self.val(gamma).data(), self.val(beta).data());
        for r in 0..rows {
            let row = &xs.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::new(xs.shape().to_vec(), out)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Group normalization of `x: [H, W, C]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || groups == 0 || !s[2].is_multiple_of(groups) {
            return Err(shape_err("group_norm", format!("{s:?} with {groups} groups")));
        }
        let c = s[2];
        if self.val(gamma).len() != c || self.val(beta).len() != c {
            return Err(shape_err("group_norm", "affine size"));
        }
        let cg = c / groups;
        let positions = s[0] * s[1];
        let count = (positions * cg) as f64;
        let xs = self.val(x).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; groups];
        let mut out = vec![0.0; xs.len()];
        let (gm, bt) = (self.val(gamma).data(), self.val(beta).data());
        for g in 0..groups {
            let mut sum = 0.0;
            for p in 0..positions {
                sum += xs[p * c + g * cg..p * c + (g + 1) * cg].iter().sum::<f64>();
            }
            let mean = sum / count;
            let mut ss = 0.0;
            for p in 0..positions {
                ss += xs[p * c + g * cg..p * c + (g + 1) * cg]
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>();
            }
            let rs = 1.0 / (ss / count + NORM_EPS).sqrt();
            rstd[g] = rs;
            for p in 0..positions {
                for ch in g * cg..(g + 1) * cg {
                    let i = p * c + ch;
                    let h = (xs[i] - mean) * rs;
                    xhat[i] = h;
                    out[i] = h * gm[ch] + bt[ch];
                }
            }
        }
        let t = Tensor::new(s, out)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            t,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Centered ("same") dilated convolution along time.
    /// `x: [T, C_in]`, `k: [width, C_in, C_out]`, `width` odd.
    pub fn conv1d(&mut self, x: Var, k: Var, dilation: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 2 || sk.len() != 3 || sk[1] != sx[1] || sk[0] % 2 == 0 || dilation == 0 {
            return Err(shape_err(
                "conv1d",
                format!("x {sx:?}, kernel {sk:?}, dilation {dilation}"),
            ));
        }
        let (t, cin) = (sx[0], sx[1]);
        let (kw, cout) = (sk[0], sk[2]);
        let pad = (kw - 1) / 2 * dilation;
        let xp = pad_time(self.val(x).data(), t, cin, pad);
        let kd = self.val(k).data();
        let mut out = vec![0.0; t * cout];
        for j in 0..kw {
            let off = j * dilation * cin;
            gemm_nn(
                t,
                cin,
                cout,
                &xp[off..off + t * cin],
                &kd[j * cin * cout..(j + 1) * cin * cout],
                &mut out,
                1.0,
            );
        }
        let ng = self.needs(x) || self.needs(k);
        Ok(self.push(
            Tensor::new(vec![t, cout], out)?,
            Op::Conv1d { x, k, dilation },
            ng,
        ))
    }

    /// Same-padded stride-1 2-D convolution.
    /// `x: [H, W, C_in]`, `k: [kh, kw, C_in, C_out]`, both kernel sides odd.
    pub fn conv2d(&mut self, x: Var, k: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 3 || sk.len() != 4 || sk[2] != sx[2] || sk[0] % 2 == 0 || sk[1] % 2 == 0 {
            return Err(shape_err("conv2d", format!("x {sx:?}, kernel {sk:?}")));
        }
        let geo = Conv2dGeometry::new(&sx, &sk);
        let xp = geo.pad(self.val(x).data());
        let kd = self.val(k).data();
        let mut yp = vec![0.0; geo.h * geo.wp * geo.cout];
        let m = geo.h * geo.wp;
        let ksz = geo.cin * geo.cout;
        for dy in 0..geo.kh {
            for dx in 0..geo.kw {
                let tap = dy * geo.kw + dx;
                let off = (dy * geo.wp + dx) * geo.cin;
                gemm_nn(
                    m,
                    geo.cin,
                    geo.cout,
                    &xp[off..off + m * geo.cin],
                    &kd[tap * ksz..(tap + 1) * ksz],
                    &mut yp,
                    1.0,
                );
            }
        }
        let out = geo.crop_out(&yp);
        let ng = self.needs(x) || self.needs(k);
        Ok(self.push(
            Tensor::new(vec![geo.h, geo.w, geo.cout], out)?,
            Op::Conv2d { x, k },
            ng,
        ))
    }

    /// Folds each 2×2 spatial block into channels:
    /// `[H, W, C] -> [H/2, W/2, 4C]`, channel index `(dy·2 + dx)·C + c`.
    pub fn space_to_depth2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || !s[0].is_multiple_of(2) || !s[1].is_multiple_of(2) {
            return Err(shape_err("space_to_depth2", format!("{s:?}")));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let src = self.val(x).data();
        let mut out = vec![0.0; src.len()];
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let si = ((2 * i + dy) * w + 2 * j + dx) * c;
                        let di = ((i * (w / 2) + j) * 4 + dy * 2 + dx) * c;
                        out[di..di + c].copy_from_slice(&src[si..si + c]);
                    }
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![h / 2, w / 2, 4 * c], out)?,
            Op::SpaceToDepth2(x),
            ng,
        ))
    }

    /// Nearest-neighbour 2× upsampling of `[H, W, C]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(shape_err("upsample2", format!("{s:?}")));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let src = self.val(x).data();
        let mut out = vec![0.0; 4 * src.len()];
        for i in 0..2 * h {
            for j in 0..2 * w {
                let si = ((i / 2) * w + j / 2) * c;
                let di = (i * 2 * w + j) * c;
                out[di..di + c].copy_from_slice(&src[si..si + c]);
            }
        }
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![2 * h, 2 * w, c], out)?,
            Op::Upsample2(x),
            ng,
        ))
    }

    /// Concatenation along the last dimension.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(shape_err("concat_last", format!("{sa:?} ++ {sb:?}")));
        }
        let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = self.val(a).len() / ca.max(1);
        let (da, db) = (self.val(a).data(), self.val(b).data());
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&da[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&db[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = ca + cb;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::ConcatLast(a, b), ng))
    }

    /// Columns `start..start+len` of the last dimension.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = *s.last().ok_or_else(|| shape_err("slice_last", "scalar"))?;
        if start + len > c {
            return Err(shape_err("slice_last", format!("{start}+{len} > {c}")));
        }
        let rows = self.val(x).len() / c.max(1);
        let src = self.val(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * c + start..r * c + start + len]);
        }
        let mut shape = s.clone();
        *shape.last_mut().unwrap() = len;
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::SliceLast { x, start }, ng))
    }

    /// Rows `start..start+len` of the first dimension.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let r = *s.first().ok_or_else(|| shape_err("slice_rows", "scalar"))?;
        if start + len > r {
            return Err(shape_err("slice_rows", format!("{start}+{len} > {r}")));
        }
        let stride = self.val(x).len() / r.max(1);
        let out = self.val(x).data()[start * stride..(start + len) * stride].to_vec();
        let mut shape = s.clone();
        shape[0] = len;
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::SliceRows { x, start }, ng))
    }

    /// Zero-pads or crops `[H, W, C]` at the bottom/right to `[h, w, C]`.
    pub fn pad_crop2d(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(shape_err("pad_crop2d", format!("{s:?}")));
        }
        let out = copy_window(self.val(x).data(), s[0], s[1], s[2], h, w);
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(vec![h, w, s[2]], out)?, Op::PadCrop2d(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.val(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Mean squared difference, reduced to a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.val(a).len().max(1) as f64;
        let s: f64 = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), ng))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.val(a).mean();
        let ng = self.needs(a);
        self.push(Tensor::scalar(m), Op::Mean(a), ng)
    }

    /// Softmax attention `softmax(Q Kᵀ / √D) V`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let d = self.val(q).cols();
        if d == 0 {
            return Err(shape_err("attention", "zero key width"));
        }
        if self.shape(k)[0] != self.shape(v)[0] {
            return Err(shape_err(
                "attention",
                format!("keys {:?} vs values {:?}", self.shape(k), self.shape(v)),
            ));
        }
        let s = self.matmul_nt(q, k)?;
        let s = self.scale(s, 1.0 / (d as f64).sqrt());
        let p = self.softmax_rows(s);
        self.matmul(p, v)
    }

    /// Reverse pass from a scalar `loss`. Every parameter loaded into the
    /// graph gets an entry, zero when unreachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        self.check_finite()?;
        if self.val(loss).len() != 1 {
            return Err(shape_err("backward", format!("{:?}", self.shape(loss))));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Grads::new();
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &gy, &mut grads);
            if let Op::Param(name) = &node.op {
                out.add(name, &gy);
            }
        }
        for (name, &v) in &self.params {
            if out.get(name).is_none() {
                out.add(name, &vec![0.0; self.val(v).len()]);
            }
        }
        for (_, g) in out.iter() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
        }
        Ok(out)
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.needs(v) {
            return None;
        }
        let len = self.val(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let k = self.val(*b).rows();
                let nn = self.val(*b).cols();
                let m = self.val(*a).len() / k.max(1);
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    gemm_nt(m, nn, k, gy, bv, ga, 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm_tn(k, m, nn, av, gy, gb, 1.0);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.val(*a).rows(), self.val(*a).cols());
                let nn = self.val(*b).rows();
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    gemm_nn(m, nn, k, gy, bv, ga, 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm_tn(nn, m, k, gy, av, gb, 1.0);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, gy, 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    axpy(gb, gy, 1.0);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, gy, 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    axpy(gb, gy, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] += gy[i] * bv[i];
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..gb.len() {
                        gb[i] += gy[i] * av[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, gy, *c);
                }
            }
            Op::AddBias(x, b) => {
                if let Some(gx) = self.slot(grads, *x) {
                    axpy(gx, gy, 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let n = gb.len();
                    for row in gy.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(g, r)| *g += r);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] += gy[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] += gy[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Gelu(a) => {
                let av = self.val(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] += gy[i] * gelu_grad(av[i]);
                    }
                }
            }
            Op::GatedTanh(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..ga.len() {
                        let t = av[i].tanh();
                        ga[i] += gy[i] * (1.0 - t * t) * sigmoid(bv[i]);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..gb.len() {
                        let s = sigmoid(bv[i]);
                        gb[i] += gy[i] * av[i].tanh() * s * (1.0 - s);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let n = node.value.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((gr, yr), gar) in gy.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, p)| g * p).sum();
                        for c in 0..n {
                            gar[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = node.value.cols();
                let g = self.val(*gamma).data();
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (gr, hr) in gy.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for gr in gy.chunks(n) {
                        gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let nf = n as f64;
                    for r in 0..rstd.len() {
                        let gr = &gy[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..n {
                            let d = gr[c] * g[c];
                            s1 += d;
                            s2 += d * hr[c];
                        }
                        for c in 0..n {
                            let d = gr[c] * g[c];
                            gx[r * n + c] += rstd[r] / nf * (nf * d - s1 - hr[c] * s2);
                        }
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let c = node.value.cols();
                let positions = node.value.len() / c.max(1);
                let cg = c / groups;
                let g = self.val(*gamma).data();
                if let Some(gg) = self.slot(grads, *gamma) {
                    for p in 0..positions {
                        for ch in 0..c {
                            gg[ch] += gy[p * c + ch] * xhat[p * c + ch];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for p in 0..positions {
                        for ch in 0..c {
                            gb[ch] += gy[p * c + ch];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let nf = (positions * cg) as f64;
                    for grp in 0..*groups {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for p in 0..positions {
                            for ch in grp * cg..(grp + 1) * cg {
                                let i = p * c + ch;
                                let d = gy[i] * g[ch];
                                s1 += d;
                                s2 += d * xhat[i];
                            }
                        }
                        let rs = rstd[grp];
                        for p in 0..positions {
                            for ch in grp * cg..(grp + 1) * cg {
                                let i = p * c + ch;
                                let d = gy[i] * g[ch];
                                gx[i] += rs / nf * (nf * d - s1 - xhat[i] * s2);
                            }
                        }
                    }
                }
            }
            Op::Conv1d { x, k, dilation } => {
                let (t, cin) = (self.val(*x).rows(), self.val(*x).cols());
                let sk = self.shape(*k);
                let (kw, cout) = (sk[0], sk[2]);
                let pad = (kw - 1) / 2 * dilation;
                if let Some(gk) = self.slot(grads, *k) {
                    let xp = pad_time(self.val(*x).data(), t, cin, pad);
                    for j in 0..kw {
                        let off = j * dilation * cin;
                        gemm_tn(
                            cin,
                            t,
                            cout,
                            &xp[off..off + t * cin],
                            gy,
                            &mut gk[j * cin * cout..(j + 1) * cin * cout],
                            1.0,
                        );
                    }
                }
                let kd = self.val(*k).data();
                if let Some(gx) = self.slot(grads, *x) {
                    let mut gxp = vec![0.0; (t + 2 * pad) * cin];
                    for j in 0..kw {
                        let off = j * dilation * cin;
                        gemm_nt(
                            t,
                            cout,
                            cin,
                            gy,
                            &kd[j * cin * cout..(j + 1) * cin * cout],
                            &mut gxp[off..off + t * cin],
                            1.0,
                        );
                    }
                    axpy(gx, &gxp[pad * cin..(pad + t) * cin], 1.0);
                }
            }
            Op::Conv2d { x, k } => {
                let geo = Conv2dGeometry::new(self.shape(*x), self.shape(*k));
                let m = geo.h * geo.wp;
                let ksz = geo.cin * geo.cout;
                let gyp = geo.pad_out(gy);
                if let Some(gk) = self.slot(grads, *k) {
                    let xp = geo.pad(self.val(*x).data());
                    for dy in 0..geo.kh {
                        for dx in 0..geo.kw {
                            let tap = dy * geo.kw + dx;
                            let off = (dy * geo.wp + dx) * geo.cin;
                            gemm_tn(
                                geo.cin,
                                m,
                                geo.cout,
                                &xp[off..off + m * geo.cin],
                                &gyp,
                                &mut gk[tap * ksz..(tap + 1) * ksz],
                                1.0,
                            );
                        }
                    }
                }
                let kd = self.val(*k).data();
                if let Some(gx) = self.slot(grads, *x) {
                    let mut gxp = vec![0.0; geo.padded_len()];
                    for dy in 0..geo.kh {
                        for dx in 0..geo.kw {
                            let tap = dy * geo.kw + dx;
                            let off = (dy * geo.wp + dx) * geo.cin;
                            gemm_nt(
                                m,
                                geo.cout,
                                geo.cin,
                                &gyp,
                                &kd[tap * ksz..(tap + 1) * ksz],
                                &mut gxp[off..off + m * geo.cin],
                                1.0,
                            );
                        }
                    }
                    geo.unpad_add(&gxp, gx);
                }
            }
            Op::SpaceToDepth2(x) => {
                let s = self.shape(*x);
                let (w, c) = (s[1], s[2]);
                let h = s[0];
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..h / 2 {
                        for j in 0..w / 2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let si = ((2 * i + dy) * w + 2 * j + dx) * c;
                                    let di = ((i * (w / 2) + j) * 4 + dy * 2 + dx) * c;
                                    axpy(&mut gx[si..si + c], &gy[di..di + c], 1.0);
                                }
                            }
                        }
                    }
                }
            }
            Op::Upsample2(x) => {
                let s = self.shape(*x);
                let (h, w, c) = (s[0], s[1], s[2]);
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            let si = ((i / 2) * w + j / 2) * c;
                            let di = (i * 2 * w + j) * c;
                            axpy(&mut gx[si..si + c], &gy[di..di + c], 1.0);
                        }
                    }
                }
            }
            Op::ConcatLast(a, b) => {
                let ca = self.val(*a).cols();
                let cb = self.val(*b).cols();
                let rows = self.val(*a).len() / ca.max(1);
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..rows {
                        axpy(
                            &mut ga[r * ca..(r + 1) * ca],
                            &gy[r * (ca + cb)..r * (ca + cb) + ca],
                            1.0,
                        );
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for r in 0..rows {
                        axpy(
                            &mut gb[r * cb..(r + 1) * cb],
                            &gy[r * (ca + cb) + ca..(r + 1) * (ca + cb)],
                            1.0,
                        );
                    }
                }
            }
            Op::SliceLast { x, start } => {
                let c = self.val(*x).cols();
                let len = node.value.cols();
                let rows = self.val(*x).len() / c.max(1);
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..rows {
                        axpy(
                            &mut gx[r * c + start..r * c + start + len],
                            &gy[r * len..(r + 1) * len],
                            1.0,
                        );
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let stride = self.val(*x).len() / self.val(*x).rows().max(1);
                if let Some(gx) = self.slot(grads, *x) {
                    let off = start * stride;
                    axpy(&mut gx[off..off + gy.len()], gy, 1.0);
                }
            }
            Op::PadCrop2d(x) => {
                let s = self.shape(*x);
                let so = node.value.shape();
                if let Some(gx) = self.slot(grads, *x) {
                    let back = copy_window(gy, so[0], so[1], so[2], s[0], s[1]);
                    axpy(gx, &back, 1.0);
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    axpy(gx, gy, 1.0);
                }
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                let scale = 2.0 * gy[0] / av.len().max(1) as f64;
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] += scale * (av[i] - bv[i]);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..gb.len() {
                        gb[i] -= scale * (av[i] - bv[i]);
                    }
                }
            }
            Op::Mean(a) => {
                let n = self.val(*a).len().max(1) as f64;
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|g| *g += gy[0] / n);
                }
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Constant => "constant",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::MatMulNT(..) => "matmul_nt",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddBias(..) => "add_bias",
        Op::Tanh(_) => "tanh",
        Op::Sigmoid(_) => "sigmoid",
        Op::Gelu(_) => "gelu",
        Op::GatedTanh(..) => "gated_tanh",
        Op::SoftmaxRows(_) => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::GroupNorm { .. } => "group_norm",
        Op::Conv1d { .. } => "conv1d",
        Op::Conv2d { .. } => "conv2d",
        Op::SpaceToDepth2(_) => "space_to_depth2",
        Op::Upsample2(_) => "upsample2",
        Op::ConcatLast(..) => "concat_last",
        Op::SliceLast { .. } => "slice_last",
        Op::SliceRows { .. } => "slice_rows",
        Op::PadCrop2d(_) => "pad_crop2d",
        Op::Reshape(_) => "reshape",
        Op::Mse(..) => "mse",
        Op::Mean(_) => "mean",
    }
}

#[inline]
fn axpy(acc: &mut [f64], x: &[f64], a: f64) {
    acc.iter_mut().zip(x).for_each(|(y, v)| *y += a * v);
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

fn pad_time(x: &[f64], t: usize, c: usize, pad: usize) -> Vec<f64> {
    let mut xp = vec![0.0; (t + 2 * pad) * c];
    xp[pad * c..(pad + t) * c].copy_from_slice(&x[..t * c]);
    xp
}

/// Copies the overlapping top-left window of an `[h, w, c]` grid into a
/// zeroed `[nh, nw, c]` grid.
fn copy_window(src: &[f64], h: usize, w: usize, c: usize, nh: usize, nw: usize) -> Vec<f64> {
    let mut out = vec![0.0; nh * nw * c];
    let (ch, cw) = (h.min(nh), w.min(nw));
    for i in 0..ch {
        out[i * nw * c..(i * nw + cw) * c].copy_from_slice(&src[i * w * c..(i * w + cw) * c]);
    }
    out
}

/// Layout for the padded-width convolution: the input is zero-padded to
/// `[H + 2ph + 1, W + 2pw, C_in]` so each kernel tap is a single GEMM over a
/// contiguous row range; outputs are computed on the padded width and the
/// `2pw` junk columns per row are dropped.
struct Conv2dGeometry {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    wp: usize,
    hp: usize,
}

impl Conv2dGeometry {
    fn new(sx: &[usize], sk: &[usize]) -> Self {
        let (kh, kw) = (sk[0], sk[1]);
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        Self {
            h: sx[0],
            w: sx[1],
            cin: sx[2],
            cout: sk[3],
            kh,
            kw,
            ph,
            pw,
            wp: sx[1] + 2 * pw,
            hp: sx[0] + 2 * ph + 1,
        }
    }

    fn padded_len(&self) -> usize {
        self.hp * self.wp * self.cin
    }

    fn pad(&self, x: &[f64]) -> Vec<f64> {
        let mut xp = vec![0.0; self.padded_len()];
        let c = self.cin;
        for i in 0..self.h {
            let d = ((i + self.ph) * self.wp + self.pw) * c;
            xp[d..d + self.w * c].copy_from_slice(&x[i * self.w * c..(i + 1) * self.w * c]);
        }
        xp
    }

    fn unpad_add(&self, xp: &[f64], gx: &mut [f64]) {
        let c = self.cin;
        for i in 0..self.h {
            let s = ((i + self.ph) * self.wp + self.pw) * c;
            axpy(
                &mut gx[i * self.w * c..(i + 1) * self.w * c],
                &xp[s..s + self.w * c],
                1.0,
            );
        }
    }

    fn crop_out(&self, yp: &[f64]) -> Vec<f64> {
        let c = self.cout;
        let mut y = Vec::with_capacity(self.h * self.w * c);
        for i in 0..self.h {
            y.extend_from_slice(&yp[i * self.wp * c..(i * self.wp + self.w) * c]);
        }
        y
    }

    fn pad_out(&self, gy: &[f64]) -> Vec<f64> {
        let c = self.cout;
        let mut gyp = vec![0.0; self.h * self.wp * c];
        for i in 0..self.h {
            gyp[i * self.wp * c..(i * self.wp + self.w) * c]
                .copy_from_slice(&gy[i * self.w * c..(i + 1) * self.w * c]);
        }
        gyp
    }
}
