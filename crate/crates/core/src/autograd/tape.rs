use std::sync::Arc;

use super::array::{NdArray, Scalar};
use super::conv::{
    conv3d_backward, conv3d_forward, conv3d_out_extent, conv_transpose3d_backward,
    conv_transpose3d_forward, conv_transpose3d_out_extent, ConvGeom,
};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

// GELU tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op<F: Scalar> {
    Leaf,
    Matmul { a: Var, b: Var },
    /// a · bᵀ
    MatmulNT { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Scale { a: Var, c: F },
    AddConst { a: Var },
    AddBiasRow { a: Var, b: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<F>, inv_std: Vec<F> },
    SoftmaxRows { x: Var },
    Gelu { x: Var },
    Ln { x: Var },
    Sum { x: Var },
    /// out[i] = x[idx[i]]; idx need not be a bijection (gather/scatter-add).
    Gather { x: Var, idx: Arc<Vec<usize>> },
    Reshape { x: Var },
    ConcatRows { parts: Vec<Var> },
    SliceRows { x: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    SliceCols { x: Var, start: usize },
    Conv3d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    ConvT3d { x: Var, w: Var, b: Var, stride: usize },
}

struct Node<F: Scalar> {
    value: NdArray<F>,
    op: Op<F>,
    requires_grad: bool,
    grad: Option<Vec<F>>,
}

/// Record of one forward computation: an implicitly topologically ordered
/// list of operations. Single-threaded; one training step owns one tape.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &NdArray<F> {
        &self.nodes[v.0].value
    }

    /// Gradient buffer for `v`, populated by [`Tape::backward`]. `None` for
    /// nodes with `requires_grad == false` or nodes unreachable from the root.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: NdArray<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: NdArray<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: NdArray<F>, op: Op<F>, requires_grad: bool) -> Var {
        debug_assert!(
            value.is_finite(),
            "non-finite value produced at node {}",
            self.nodes.len()
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(Error::Dimension(format!(
                "matmul inner extents differ: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for k in 0..ka {
                let aik = av[i * ka + k];
                for j in 0..n {
                    out[i * n + j] += aik * bv[k * n + j];
                }
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(NdArray::new(vec![m, n], out)?, Op::Matmul { a, b }, rg))
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]` → `[m,n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).dims2()?;
        let (n, kb) = self.value(b).dims2()?;
        if ka != kb {
            return Err(Error::Dimension(format!(
                "matmul_nt inner extents differ: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = F::zero();
                for k in 0..ka {
                    acc += av[i * ka + k] * bv[j * kb + k];
                }
                out[i * n + j] = acc;
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(NdArray::new(vec![m, n], out)?, Op::MatmulNT { a, b }, rg))
    }

    fn elementwise(&mut self, a: Var, b: Var, op: fn(F, F) -> F, node: Op<F>) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "elementwise op on mismatched shapes {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let shape = self.value(a).shape().to_vec();
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| op(x, y))
            .collect();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(NdArray::new(shape, out)?, node, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, |x, y| x / y, Op::Div { a, b })
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let shape = self.value(a).shape().to_vec();
        let out: Vec<F> = self.value(a).data().iter().map(|&x| x * c).collect();
        let rg = self.any_grad(&[a]);
        self.push(NdArray::new(shape, out).unwrap(), Op::Scale { a, c }, rg)
    }

    pub fn add_const(&mut self, a: Var, c: F) -> Var {
        let shape = self.value(a).shape().to_vec();
        let out: Vec<F> = self.value(a).data().iter().map(|&x| x + c).collect();
        let rg = self.any_grad(&[a]);
        self.push(NdArray::new(shape, out).unwrap(), Op::AddConst { a }, rg)
    }

    /// `[m,n] + [n]` row-broadcast bias add.
    pub fn add_bias_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if self.value(b).shape() != [n] {
            return Err(Error::Dimension(format!(
                "bias shape {:?} does not match row width {}",
                self.value(b).shape(),
                n
            )));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(av[i * n + j] + bv[j]);
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(NdArray::new(vec![m, n], out)?, Op::AddBiasRow { a, b }, rg))
    }

    /// Per-row standardization followed by affine scale/shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        if eps <= F::zero() {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let (m, n) = self.value(x).dims2()?;
        if self.value(gamma).shape() != [n] || self.value(beta).shape() != [n] {
            return Err(Error::Dimension(format!(
                "layer_norm affine shapes {:?}/{:?} do not match width {}",
                self.value(gamma).shape(),
                self.value(beta).shape(),
                n
            )));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let nf = F::of_f64(n as f64);
        let mut out = Vec::with_capacity(m * n);
        let mut means = Vec::with_capacity(m);
        let mut inv_stds = Vec::with_capacity(m);
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mut mean = F::zero();
            for &v in row {
                mean += v;
            }
            mean /= nf;
            let mut var = F::zero();
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var /= nf;
            let inv_std = F::one() / (var + eps).sqrt();
            means.push(mean);
            inv_stds.push(inv_std);
            for j in 0..n {
                out.push((row[j] - mean) * inv_std * gv[j] + bv[j]);
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            NdArray::new(vec![m, n], out)?,
            Op::LayerNorm { x, gamma, beta, mean: means, inv_std: inv_stds },
            rg,
        ))
    }

    /// Numerically stabilized row-wise softmax (max subtraction).
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mut mx = row[0];
            for &v in &row[1..] {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = F::zero();
            let start = out.len();
            for &v in row {
                let e = (v - mx).exp();
                out.push(e);
                sum += e;
            }
            for v in &mut out[start..] {
                *v /= sum;
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(NdArray::new(vec![m, n], out)?, Op::SoftmaxRows { x }, rg))
    }

    /// Elementwise GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let shape = self.value(x).shape().to_vec();
        let c = F::of_f64(GELU_C);
        let a3 = F::of_f64(GELU_A);
        let half = F::of_f64(0.5);
        let out: Vec<F> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| {
                let u = c * (v + a3 * v * v * v);
                half * v * (F::one() + u.tanh())
            })
            .collect();
        let rg = self.any_grad(&[x]);
        self.push(NdArray::new(shape, out).unwrap(), Op::Gelu { x }, rg)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let shape = self.value(x).shape().to_vec();
        let out: Vec<F> = self.value(x).data().iter().map(|&v| v.ln()).collect();
        let rg = self.any_grad(&[x]);
        self.push(NdArray::new(shape, out).unwrap(), Op::Ln { x }, rg)
    }

    /// Sum of all elements → scalar `[1]`. Sequential left-to-right.
    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = F::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        let rg = self.any_grad(&[x]);
        self.push(NdArray::scalar(acc), Op::Sum { x }, rg)
    }

    /// `out[i] = x[idx[i]]`. Backward scatter-adds, so a non-bijective index
    /// set is valid (e.g. nearest-neighbour upsampling).
    pub fn gather(&mut self, x: Var, idx: Arc<Vec<usize>>, out_shape: Vec<usize>) -> Result<Var> {
        let numel: usize = out_shape.iter().product();
        if numel != idx.len() {
            return Err(Error::Dimension(format!(
                "gather index count {} does not match output shape {:?}",
                idx.len(),
                out_shape
            )));
        }
        let xv = self.value(x).data();
        let out: Vec<F> = idx.iter().map(|&i| xv[i]).collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(NdArray::new(out_shape, out)?, Op::Gather { x, idx }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Concatenate 2D arrays along rows (axis 0).
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero parts".into()));
        }
        let (_, n) = self.value(parts[0]).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (m, np) = self.value(p).dims2()?;
            if np != n {
                return Err(Error::Dimension(format!(
                    "concat_rows column mismatch: {} vs {}",
                    np, n
                )));
            }
            rows += m;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            NdArray::new(vec![rows, n], data)?,
            Op::ConcatRows { parts: parts.to_vec() },
            rg,
        ))
    }

    /// Rows `[start, start+len)` of a 2D array.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if start + len > m {
            return Err(Error::Dimension(format!(
                "slice_rows [{start}, {}) out of bounds for {m} rows",
                start + len
            )));
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(NdArray::new(vec![len, n], data)?, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        let (m, _) = self.value(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = self.value(p).dims2()?;
            if mp != m {
                return Err(Error::Dimension(format!(
                    "concat_cols row mismatch: {} vs {}",
                    mp, m
                )));
            }
            widths.push(np);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                let pv = self.value(p).data();
                data.extend_from_slice(&pv[i * w..(i + 1) * w]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            NdArray::new(vec![m, n], data)?,
            Op::ConcatCols { parts: parts.to_vec() },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if start + len > n {
            return Err(Error::Dimension(format!(
                "slice_cols [{start}, {}) out of bounds for {n} cols",
                start + len
            )));
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(NdArray::new(vec![m, len], data)?, Op::SliceCols { x, start }, rg))
    }

    fn conv_geom(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize, transposed: bool) -> Result<ConvGeom> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        if xs.len() != 4 || ws.len() != 5 {
            return Err(Error::Dimension(format!(
                "conv expects x [C,D,H,W] and w [A,B,k,k,k], got {:?} / {:?}",
                xs, ws
            )));
        }
        if stride < 1 {
            return Err(Error::Contract("conv stride must be >= 1".into()));
        }
        let k = ws[2];
        if ws[3] != k || ws[4] != k {
            return Err(Error::Dimension(format!("non-cubic kernel {:?}", &ws[2..])));
        }
        let (cin, cout) = if transposed { (ws[0], ws[1]) } else { (ws[1], ws[0]) };
        if xs[0] != cin {
            return Err(Error::Dimension(format!(
                "input channels {} do not match kernel channels {}",
                xs[0], cin
            )));
        }
        if self.value(b).shape() != [cout] {
            return Err(Error::Dimension(format!(
                "bias shape {:?} does not match {} output channels",
                self.value(b).shape(),
                cout
            )));
        }
        let in_sp = [xs[1], xs[2], xs[3]];
        let out_sp = if transposed {
            [
                conv_transpose3d_out_extent(in_sp[0], k, stride),
                conv_transpose3d_out_extent(in_sp[1], k, stride),
                conv_transpose3d_out_extent(in_sp[2], k, stride),
            ]
        } else {
            for &e in &in_sp {
                if e + 2 * pad < k {
                    return Err(Error::Dimension(format!(
                        "kernel {k} larger than padded input extent {}",
                        e + 2 * pad
                    )));
                }
            }
            [
                conv3d_out_extent(in_sp[0], k, stride, pad),
                conv3d_out_extent(in_sp[1], k, stride, pad),
                conv3d_out_extent(in_sp[2], k, stride, pad),
            ]
        };
        Ok(ConvGeom { cin, cout, k, stride, pad, in_sp, out_sp })
    }

    /// 3D convolution: `x [Cin,D,H,W]`, `w [Cout,Cin,k,k,k]`, `b [Cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let g = self.conv_geom(x, w, b, stride, pad, false)?;
        let out = conv3d_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), &g);
        let shape = vec![g.cout, g.out_sp[0], g.out_sp[1], g.out_sp[2]];
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(NdArray::new(shape, out)?, Op::Conv3d { x, w, b, stride, pad }, rg))
    }

    /// Transposed 3D convolution: `x [Cin,D,H,W]`, `w [Cin,Cout,k,k,k]`.
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let g = self.conv_geom(x, w, b, stride, 0, true)?;
        let out =
            conv_transpose3d_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), &g);
        let shape = vec![g.cout, g.out_sp[0], g.out_sp[1], g.out_sp[2]];
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(NdArray::new(shape, out)?, Op::ConvT3d { x, w, b, stride }, rg))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse-mode sweep from a scalar root. Populates `grad` for every
    /// reachable node with `requires_grad`; frozen leaves never get a buffer.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Err(Error::Contract(
                "backward root does not depend on any gradient-tracked leaf".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![F::one()]);

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_parents(i, &g, &mut grads)?;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn add_into(&self, grads: &mut Vec<Option<Vec<F>>>, v: Var, contrib: &[F]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); self.nodes[v.0].value.numel()]);
        for (s, &c) in slot.iter_mut().zip(contrib) {
            *s += c;
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate_parents(&self, i: usize, g: &[F], grads: &mut Vec<Option<Vec<F>>>) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = self.value(a).dims2()?;
                let (_, n) = self.value(b).dims2()?;
                if self.needs(a) {
                    // da = g · bᵀ
                    let bv = self.value(b).data();
                    let mut da = vec![F::zero(); m * k];
                    for i2 in 0..m {
                        for j in 0..n {
                            let gij = g[i2 * n + j];
                            for kk in 0..k {
                                da[i2 * k + kk] += gij * bv[kk * n + j];
                            }
                        }
                    }
                    self.add_into(grads, a, &da);
                }
                if self.needs(b) {
                    // db = aᵀ · g
                    let av = self.value(a).data();
                    let mut db = vec![F::zero(); k * n];
                    for i2 in 0..m {
                        for kk in 0..k {
                            let aik = av[i2 * k + kk];
                            for j in 0..n {
                                db[kk * n + j] += aik * g[i2 * n + j];
                            }
                        }
                    }
                    self.add_into(grads, b, &db);
                }
            }
            Op::MatmulNT { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = self.value(a).dims2()?;
                let (n, _) = self.value(b).dims2()?;
                if self.needs(a) {
                    // da = g · b
                    let bv = self.value(b).data();
                    let mut da = vec![F::zero(); m * k];
                    for i2 in 0..m {
                        for j in 0..n {
                            let gij = g[i2 * n + j];
                            for kk in 0..k {
                                da[i2 * k + kk] += gij * bv[j * k + kk];
                            }
                        }
                    }
                    self.add_into(grads, a, &da);
                }
                if self.needs(b) {
                    // db = gᵀ · a
                    let av = self.value(a).data();
                    let mut db = vec![F::zero(); n * k];
                    for i2 in 0..m {
                        for j in 0..n {
                            let gij = g[i2 * n + j];
                            for kk in 0..k {
                                db[j * k + kk] += gij * av[i2 * k + kk];
                            }
                        }
                    }
                    self.add_into(grads, b, &db);
                }
            }
            Op::Add { a, b } => {
                self.add_into(grads, *a, g);
                self.add_into(grads, *b, g);
            }
            Op::Sub { a, b } => {
                self.add_into(grads, *a, g);
                if self.needs(*b) {
                    let neg: Vec<F> = g.iter().map(|&v| -v).collect();
                    self.add_into(grads, *b, &neg);
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let da: Vec<F> = g.iter().zip(self.value(b).data()).map(|(&gv, &bv)| gv * bv).collect();
                    self.add_into(grads, a, &da);
                }
                if self.needs(b) {
                    let db: Vec<F> = g.iter().zip(self.value(a).data()).map(|(&gv, &av)| gv * av).collect();
                    self.add_into(grads, b, &db);
                }
            }
            Op::Div { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let da: Vec<F> = g.iter().zip(self.value(b).data()).map(|(&gv, &bv)| gv / bv).collect();
                    self.add_into(grads, a, &da);
                }
                if self.needs(b) {
                    let db: Vec<F> = g
                        .iter()
                        .zip(self.value(a).data().iter().zip(self.value(b).data()))
                        .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                        .collect();
                    self.add_into(grads, b, &db);
                }
            }
            Op::Scale { a, c } => {
                if self.needs(*a) {
                    let da: Vec<F> = g.iter().map(|&v| v * *c).collect();
                    self.add_into(grads, *a, &da);
                }
            }
            Op::AddConst { a } => self.add_into(grads, *a, g),
            Op::AddBiasRow { a, b } => {
                let (a, b) = (*a, *b);
                self.add_into(grads, a, g);
                if self.needs(b) {
                    let (m, n) = self.value(a).dims2()?;
                    let mut db = vec![F::zero(); n];
                    for i2 in 0..m {
                        for j in 0..n {
                            db[j] += g[i2 * n + j];
                        }
                    }
                    self.add_into(grads, b, &db);
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, inv_std } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (m, n) = self.value(x).dims2()?;
                let xv = self.value(x).data();
                let gv = self.value(gamma).data();
                let nf = F::of_f64(n as f64);
                let mut dx = vec![F::zero(); m * n];
                let mut dgamma = vec![F::zero(); n];
                let mut dbeta = vec![F::zero(); n];
                for i2 in 0..m {
                    let r = inv_std[i2];
                    let mu = mean[i2];
                    let row_x = &xv[i2 * n..(i2 + 1) * n];
                    let row_g = &g[i2 * n..(i2 + 1) * n];
                    let mut sum_gg = F::zero();
                    let mut sum_ggx = F::zero();
                    for j in 0..n {
                        let xhat = (row_x[j] - mu) * r;
                        let gg = row_g[j] * gv[j];
                        sum_gg += gg;
                        sum_ggx += gg * xhat;
                        dgamma[j] += row_g[j] * xhat;
                        dbeta[j] += row_g[j];
                    }
                    let mean_gg = sum_gg / nf;
                    let mean_ggx = sum_ggx / nf;
                    for j in 0..n {
                        let xhat = (row_x[j] - mu) * r;
                        dx[i2 * n + j] = r * (row_g[j] * gv[j] - mean_gg - xhat * mean_ggx);
                    }
                }
                self.add_into(grads, x, &dx);
                self.add_into(grads, gamma, &dgamma);
                self.add_into(grads, beta, &dbeta);
            }
            Op::SoftmaxRows { x } => {
                let x = *x;
                if self.needs(x) {
                    let (m, n) = self.nodes[i].value.dims2()?;
                    let y = self.nodes[i].value.data();
                    let mut dx = vec![F::zero(); m * n];
                    for i2 in 0..m {
                        let row_y = &y[i2 * n..(i2 + 1) * n];
                        let row_g = &g[i2 * n..(i2 + 1) * n];
                        let mut dot = F::zero();
                        for j in 0..n {
                            dot += row_g[j] * row_y[j];
                        }
                        for j in 0..n {
                            dx[i2 * n + j] = row_y[j] * (row_g[j] - dot);
                        }
                    }
                    self.add_into(grads, x, &dx);
                }
            }
            Op::Gelu { x } => {
                let x = *x;
                if self.needs(x) {
                    let c = F::of_f64(GELU_C);
                    let a3 = F::of_f64(GELU_A);
                    let half = F::of_f64(0.5);
                    let three = F::of_f64(3.0);
                    let dx: Vec<F> = self
                        .value(x)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| {
                            let u = c * (v + a3 * v * v * v);
                            let t = u.tanh();
                            let du = c * (F::one() + three * a3 * v * v);
                            gv * (half * (F::one() + t) + half * v * (F::one() - t * t) * du)
                        })
                        .collect();
                    self.add_into(grads, x, &dx);
                }
            }
            Op::Ln { x } => {
                let x = *x;
                if self.needs(x) {
                    let dx: Vec<F> = self.value(x).data().iter().zip(g).map(|(&v, &gv)| gv / v).collect();
                    self.add_into(grads, x, &dx);
                }
            }
            Op::Sum { x } => {
                let x = *x;
                if self.needs(x) {
                    let dx = vec![g[0]; self.value(x).numel()];
                    self.add_into(grads, x, &dx);
                }
            }
            Op::Gather { x, idx } => {
                let x = *x;
                if self.needs(x) {
                    let mut dx = vec![F::zero(); self.value(x).numel()];
                    for (o, &src) in idx.iter().enumerate() {
                        dx[src] += g[o];
                    }
                    self.add_into(grads, x, &dx);
                }
            }
            Op::Reshape { x } => self.add_into(grads, *x, g),
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts.clone().iter() {
                    let numel = self.value(p).numel();
                    self.add_into(grads, p, &g[offset..offset + numel]);
                    offset += numel;
                }
            }
            Op::SliceRows { x, start } => {
                let (x, start) = (*x, *start);
                if self.needs(x) {
                    let (_, n) = self.value(x).dims2()?;
                    let mut dx = vec![F::zero(); self.value(x).numel()];
                    dx[start * n..start * n + g.len()].copy_from_slice(g);
                    self.add_into(grads, x, &dx);
                }
            }
            Op::ConcatCols { parts } => {
                let (m, n) = self.nodes[i].value.dims2()?;
                let mut col = 0;
                for &p in parts.clone().iter() {
                    let (_, w) = self.value(p).dims2()?;
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for i2 in 0..m {
                            dp.extend_from_slice(&g[i2 * n + col..i2 * n + col + w]);
                        }
                        self.add_into(grads, p, &dp);
                    }
                    col += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (x, start) = (*x, *start);
                if self.needs(x) {
                    let (m, n) = self.value(x).dims2()?;
                    let len = g.len() / m;
                    let mut dx = vec![F::zero(); m * n];
                    for i2 in 0..m {
                        dx[i2 * n + start..i2 * n + start + len]
                            .copy_from_slice(&g[i2 * len..(i2 + 1) * len]);
                    }
                    self.add_into(grads, x, &dx);
                }
            }
            Op::Conv3d { x, w, b, stride, pad } => {
                let (x, w, b) = (*x, *w, *b);
                let geom = self.conv_geom(x, w, b, *stride, *pad, false)?;
                let mut dx = if self.needs(x) { vec![F::zero(); self.value(x).numel()] } else { vec![] };
                let mut dw = if self.needs(w) { vec![F::zero(); self.value(w).numel()] } else { vec![] };
                let mut db = if self.needs(b) { vec![F::zero(); self.value(b).numel()] } else { vec![] };
                conv3d_backward(
                    self.value(x).data(),
                    self.value(w).data(),
                    g,
                    &geom,
                    &mut dx,
                    &mut dw,
                    &mut db,
                );
                if !dx.is_empty() {
                    self.add_into(grads, x, &dx);
                }
                if !dw.is_empty() {
                    self.add_into(grads, w, &dw);
                }
                if !db.is_empty() {
                    self.add_into(grads, b, &db);
                }
            }
            Op::ConvT3d { x, w, b, stride } => {
                let (x, w, b) = (*x, *w, *b);
                let geom = self.conv_geom(x, w, b, *stride, 0, true)?;
                let mut dx = if self.needs(x) { vec![F::zero(); self.value(x).numel()] } else { vec![] };
                let mut dw = if self.needs(w) { vec![F::zero(); self.value(w).numel()] } else { vec![] };
                let mut db = if self.needs(b) { vec![F::zero(); self.value(b).numel()] } else { vec![] };
                conv_transpose3d_backward(
                    self.value(x).data(),
                    self.value(w).data(),
                    g,
                    &geom,
                    &mut dx,
                    &mut dw,
                    &mut db,
                );
                if !dx.is_empty() {
                    self.add_into(grads, x, &dx);
                }
                if !dw.is_empty() {
                    self.add_into(grads, w, &dw);
                }
                if !db.is_empty() {
                    self.add_into(grads, b, &db);
                }
            }
        }
        Ok(())
    }
}
