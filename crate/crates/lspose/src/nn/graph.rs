//! Define-by-run computation graph for one sample.
//!
//! Builder methods compute the forward value eagerly and record a node;
//! [`Graph::backward`] sweeps the tape in reverse creation order,
//! returning gradients for every node and accumulating parameter
//! gradients into a [`ParamGrads`]. The graph holds no parameter data
//! itself, so one [`ParamStore`] serves any number of per-sample graphs.
//!
//! Non-finite values are not trapped here: they propagate to the loss
//! scalar, where the training loop checks and aborts before backward.

use ndarray::{Array1, Array2, Array3, Axis};

use crate::geometry::{normalize_backward, Quaternion};
use crate::heatmap::{
    dsnt_backward, gaussian_target, gaussian_target_backward_center, grid_x, grid_y,
    js_backward_p, js_backward_q, js_divergence, softmax_backward, Heatmap,
};
use crate::losses::{rotation_loss_backward, ROTATION_DOT_CLAMP};
use crate::nn::kernels;
use crate::nn::{ParamGrads, ParamId, ParamShape, ParamStore};

/// Handle to a node in a [`Graph`].
pub type NodeId = usize;

/// Forward value held by a node.
#[derive(Debug, Clone)]
pub enum Value {
    /// Feature map (channels, rows, cols).
    Chw(Array3<f64>),
    /// Flat vector (activations, raw quaternions).
    Vec1(Array1<f64>),
    /// Normalized image coordinates (x, y) in [-1, 1].
    Coord(f64, f64),
    /// Scalar (loss terms).
    Scalar(f64),
}

impl Value {
    fn add_assign(&mut self, other: &Value) {
        match (self, other) {
            (Value::Chw(a), Value::Chw(b)) => *a += b,
            (Value::Vec1(a), Value::Vec1(b)) => *a += b,
            (Value::Coord(x, y), Value::Coord(dx, dy)) => {
                *x += dx;
                *y += dy;
            }
            (Value::Scalar(a), Value::Scalar(b)) => *a += b,
            _ => panic!("gradient variant mismatch"),
        }
    }
}

/// Cached forward context a node keeps for its backward rule.
#[derive(Debug, Clone)]
enum Aux {
    None,
    /// im2col matrix of a convolution input.
    Col(Array2<f64>),
    /// Per-group (mean, inv_std) of a group norm.
    GnStats(Vec<(f64, f64)>),
    /// Materialized Gaussian comparison target.
    Target(Array2<f64>),
}

#[derive(Debug, Clone)]
enum Op {
    InputChw,
    InputVec,
    Conv2d {
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        groups: usize,
    },
    Relu {
        x: NodeId,
    },
    Upsample2x {
        x: NodeId,
    },
    ConcatChw {
        a: NodeId,
        b: NodeId,
    },
    SliceSpatial {
        x: NodeId,
        rows: usize,
        cols: usize,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Flatten {
        x: NodeId,
    },
    Linear {
        v: NodeId,
        w: ParamId,
        b: ParamId,
    },
    Softmax2d {
        x: NodeId,
    },
    Dsnt {
        h: NodeId,
    },
    /// JS divergence between a normalized single-channel map and a
    /// Gaussian target centred at a predicted coordinate.
    GaussianJs {
        h: NodeId,
        c: NodeId,
        sigma2: f64,
    },
    EucLoss {
        c: NodeId,
        target: (f64, f64),
    },
    Mse3 {
        v: NodeId,
        target: [f64; 3],
    },
    QuatNormalize {
        v: NodeId,
    },
    RotLoss {
        q: NodeId,
        target: Quaternion,
    },
    CropResample {
        x: NodeId,
        center: (f64, f64),
        side: (f64, f64),
    },
    ScalarAdd {
        a: NodeId,
        b: NodeId,
    },
    ScalarScale {
        a: NodeId,
        k: f64,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Value,
    aux: Aux,
}

/// Per-sample tape. Nodes are appended in execution order, which is also
/// a valid topological order for the backward sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    fn push(&mut self, op: Op, value: Value, aux: Aux) -> NodeId {
        self.nodes.push(Node { op, value, aux });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Value {
        &self.nodes[id].value
    }

    pub fn chw(&self, id: NodeId) -> &Array3<f64> {
        match &self.nodes[id].value {
            Value::Chw(a) => a,
            _ => panic!("node {id} is not a feature map"),
        }
    }

    pub fn vec1(&self, id: NodeId) -> &Array1<f64> {
        match &self.nodes[id].value {
            Value::Vec1(v) => v,
            _ => panic!("node {id} is not a vector"),
        }
    }

    pub fn coord(&self, id: NodeId) -> (f64, f64) {
        match self.nodes[id].value {
            Value::Coord(x, y) => (x, y),
            _ => panic!("node {id} is not a coordinate"),
        }
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        match self.nodes[id].value {
            Value::Scalar(s) => s,
            _ => panic!("node {id} is not a scalar"),
        }
    }

    pub fn input_chw(&mut self, x: Array3<f64>) -> NodeId {
        self.push(Op::InputChw, Value::Chw(x), Aux::None)
    }

    pub fn input_vec(&mut self, v: Array1<f64>) -> NodeId {
        self.push(Op::InputVec, Value::Vec1(v), Aux::None)
    }

    /// Convolution with a [`ParamShape::Conv`] weight, stride and
    /// symmetric zero pad. Bias is optional (the heatmap combiner omits
    /// it).
    pub fn conv2d(
        &mut self,
        ps: &ParamStore,
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let wp = ps.get(w);
        let ParamShape::Conv { out_c, in_c, kh, kw } = wp.shape else {
            panic!("conv2d weight {} has non-conv shape", wp.name);
        };
        let xv = self.chw(x);
        assert_eq!(xv.dim().0, in_c, "conv2d {}: input channels", wp.name);
        let bias = b.map(|bid| ps.get(bid).data.as_slice());
        let (y, col) = kernels::conv2d_forward(&xv.view(), &wp.data, bias, out_c, kh, kw, stride, pad);
        self.push(
            Op::Conv2d { x, w, b, stride, pad },
            Value::Chw(y),
            Aux::Col(col),
        )
    }

    pub fn group_norm(
        &mut self,
        ps: &ParamStore,
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        groups: usize,
    ) -> NodeId {
        let xv = self.chw(x);
        let (y, stats) =
            kernels::group_norm_forward(&xv.view(), &ps.get(gamma).data, &ps.get(beta).data, groups);
        self.push(
            Op::GroupNorm { x, gamma, beta, groups },
            Value::Chw(y),
            Aux::GnStats(stats),
        )
    }

    /// Elementwise max(0, x) on feature maps or vectors.
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = match &self.nodes[x].value {
            Value::Chw(a) => Value::Chw(a.mapv(|v| v.max(0.0))),
            Value::Vec1(v) => Value::Vec1(v.mapv(|v| v.max(0.0))),
            _ => panic!("relu expects a feature map or vector"),
        };
        self.push(Op::Relu { x }, value, Aux::None)
    }

    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let y = kernels::upsample2x_forward(&self.chw(x).view());
        self.push(Op::Upsample2x { x }, Value::Chw(y), Aux::None)
    }

    /// Channel concatenation, `a` first.
    pub fn concat_chw(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.chw(a);
        let bv = self.chw(b);
        assert_eq!(av.dim().1, bv.dim().1, "concat rows");
        assert_eq!(av.dim().2, bv.dim().2, "concat cols");
        let y = ndarray::concatenate(Axis(0), &[av.view(), bv.view()]).expect("concat");
        self.push(Op::ConcatChw { a, b }, Value::Chw(y), Aux::None)
    }

    /// Keeps the top-left (rows, cols) window of a feature map. Used to
    /// align upsampled maps with odd-sized skip connections. Returns the
    /// input unchanged when the shape already matches.
    pub fn slice_spatial(&mut self, x: NodeId, rows: usize, cols: usize) -> NodeId {
        let xv = self.chw(x);
        let (_, h, w) = xv.dim();
        assert!(rows <= h && cols <= w, "slice_spatial cannot grow the map");
        if rows == h && cols == w {
            return x;
        }
        let y = xv.slice(ndarray::s![.., ..rows, ..cols]).to_owned();
        self.push(Op::SliceSpatial { x, rows, cols }, Value::Chw(y), Aux::None)
    }

    /// Elementwise sum of two same-shape feature maps.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.chw(a);
        let bv = self.chw(b);
        assert_eq!(av.dim(), bv.dim(), "add shapes");
        let y = av + bv;
        self.push(Op::Add { a, b }, Value::Chw(y), Aux::None)
    }

    /// Row-major flatten of (C, H, W) to a vector of length C*H*W.
    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        let v = Array1::from_iter(self.chw(x).iter().copied());
        self.push(Op::Flatten { x }, Value::Vec1(v), Aux::None)
    }

    pub fn linear(&mut self, ps: &ParamStore, v: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let wp = ps.get(w);
        let ParamShape::Linear { out_n, in_n } = wp.shape else {
            panic!("linear weight {} has non-linear shape", wp.name);
        };
        let vv = self.vec1(v);
        assert_eq!(vv.len(), in_n, "linear {}: input width", wp.name);
        let y = kernels::linear_forward(vv, &wp.data, &ps.get(b).data, out_n);
        self.push(Op::Linear { v, w, b }, Value::Vec1(y), Aux::None)
    }

    /// Spatial softmax over a single-channel map, yielding a normalized
    /// distribution. The max is subtracted before exponentiation.
    pub fn softmax2d(&mut self, x: NodeId) -> NodeId {
        let xv = self.chw(x);
        assert_eq!(xv.dim().0, 1, "softmax2d expects a single channel");
        let plane = xv.index_axis(Axis(0), 0);
        let max = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut exp = plane.mapv(|v| (v - max).exp());
        let sum: f64 = exp.iter().sum();
        exp.mapv_inplace(|v| v / sum);
        let y = exp.insert_axis(Axis(0));
        self.push(Op::Softmax2d { x }, Value::Chw(y), Aux::None)
    }

    /// Coordinate expectation of a normalized single-channel map under
    /// the signed unit grid.
    pub fn dsnt(&mut self, h: NodeId) -> NodeId {
        let hv = self.chw(h);
        assert_eq!(hv.dim().0, 1, "dsnt expects a single channel");
        let (_, rows, cols) = hv.dim();
        let mut x = 0.0;
        let mut y = 0.0;
        for ((_, i, j), &p) in hv.indexed_iter() {
            x += p * grid_x(j, cols);
            y += p * grid_y(i, rows);
        }
        self.push(Op::Dsnt { h }, Value::Coord(x, y), Aux::None)
    }

    /// JS divergence between the normalized map `h` and a Gaussian of
    /// variance `sigma2` (heatmap-pixel units) centred at the predicted
    /// coordinate `c`. Gradients flow into both the map and the centre.
    pub fn gaussian_js(&mut self, h: NodeId, c: NodeId, sigma2: f64) -> NodeId {
        let hv = self.chw(h);
        assert_eq!(hv.dim().0, 1, "gaussian_js expects a single channel");
        let (_, rows, cols) = hv.dim();
        let center = self.coord(c);
        let (value, aux) = match gaussian_target(center, sigma2, (rows, cols)) {
            Ok(target) => {
                let p = Heatmap {
                    values: self.chw(h).index_axis(Axis(0), 0).to_owned(),
                    normalized: true,
                };
                let js = js_divergence(&p, &target).expect("same-shape normalized maps");
                (js, Aux::Target(target.values))
            }
            // A non-finite centre poisons the loss instead of erroring;
            // the training loop aborts before backward runs.
            Err(_) => (f64::NAN, Aux::None),
        };
        self.push(Op::GaussianJs { h, c, sigma2 }, Value::Scalar(value), aux)
    }

    /// Euclidean distance between a predicted coordinate and a fixed
    /// target, both in normalized units.
    pub fn euc_loss(&mut self, c: NodeId, target: (f64, f64)) -> NodeId {
        let (x, y) = self.coord(c);
        let d = ((x - target.0).powi(2) + (y - target.1).powi(2)).sqrt();
        self.push(Op::EucLoss { c, target }, Value::Scalar(d), Aux::None)
    }

    /// Squared Euclidean distance between a length-3 vector and a fixed
    /// target.
    pub fn mse3(&mut self, v: NodeId, target: [f64; 3]) -> NodeId {
        let vv = self.vec1(v);
        assert_eq!(vv.len(), 3, "mse3 expects length 3");
        let s = (0..3).map(|i| (vv[i] - target[i]).powi(2)).sum();
        self.push(Op::Mse3 { v, target }, Value::Scalar(s), Aux::None)
    }

    /// Projects a length-4 vector onto the unit sphere. A vanishing norm
    /// yields non-finite output rather than an error.
    pub fn quat_normalize(&mut self, v: NodeId) -> NodeId {
        let vv = self.vec1(v);
        assert_eq!(vv.len(), 4, "quat_normalize expects length 4");
        let n = vv.iter().map(|x| x * x).sum::<f64>().sqrt();
        let y = vv.mapv(|x| x / n);
        self.push(Op::QuatNormalize { v }, Value::Vec1(y), Aux::None)
    }

    /// Geodesic rotation distance between a unit quaternion node (scalar
    /// first) and a fixed target, with the sign-invariant clamped kernel.
    pub fn rot_loss(&mut self, q: NodeId, target: Quaternion) -> NodeId {
        let qv = self.vec1(q);
        assert_eq!(qv.len(), 4, "rot_loss expects length 4");
        let dot: f64 = target.dot(Quaternion::from_wxyz([qv[0], qv[1], qv[2], qv[3]]));
        let d = dot.abs().min(ROTATION_DOT_CLAMP);
        let value = if dot.is_nan() { f64::NAN } else { 2.0 * d.acos() };
        self.push(Op::RotLoss { q, target }, Value::Scalar(value), Aux::None)
    }

    /// Bilinear crop of an axis-aligned window (pixel-centre coordinates
    /// of the input map) to a square output. The window is a constant of
    /// the graph; gradients flow into the map only.
    pub fn crop_resample(
        &mut self,
        x: NodeId,
        center: (f64, f64),
        side: (f64, f64),
        out_size: usize,
    ) -> NodeId {
        let y = kernels::crop_resample_forward(&self.chw(x).view(), center, side, out_size);
        self.push(Op::CropResample { x, center, side }, Value::Chw(y), Aux::None)
    }

    pub fn scalar_add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = self.scalar(a) + self.scalar(b);
        self.push(Op::ScalarAdd { a, b }, Value::Scalar(s), Aux::None)
    }

    pub fn scalar_scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let s = self.scalar(a) * k;
        self.push(Op::ScalarScale { a, k }, Value::Scalar(s), Aux::None)
    }

    /// Reverse sweep from `loss` (a scalar node) with upstream seed
    /// `seed`, typically 1/batch_size. Parameter gradients accumulate
    /// into `grads`; the returned table holds the gradient of every node
    /// (None where no gradient flowed), indexed by node id.
    pub fn backward(
        &self,
        loss: NodeId,
        seed: f64,
        ps: &ParamStore,
        grads: &mut ParamGrads,
    ) -> Vec<Option<Value>> {
        let mut table: Vec<Option<Value>> = vec![None; self.nodes.len()];
        table[loss] = Some(Value::Scalar(seed));
        for id in (0..self.nodes.len()).rev() {
            let Some(gout) = table[id].take() else {
                continue;
            };
            self.backward_node(id, &gout, ps, grads, &mut table);
            table[id] = Some(gout);
        }
        table
    }

    fn accumulate(table: &mut [Option<Value>], id: NodeId, g: Value) {
        match &mut table[id] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(
        &self,
        id: NodeId,
        gout: &Value,
        ps: &ParamStore,
        grads: &mut ParamGrads,
        table: &mut [Option<Value>],
    ) {
        let node = &self.nodes[id];
        match &node.op {
            Op::InputChw | Op::InputVec => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let Value::Chw(dy) = gout else { unreachable!() };
                let Aux::Col(col) = &node.aux else { unreachable!() };
                let wp = ps.get(*w);
                let ParamShape::Conv { in_c: _, kh, kw, .. } = wp.shape else {
                    unreachable!()
                };
                let in_shape = self.chw(*x).dim();
                let wlen = wp.data.len();
                let wdata = wp.data.clone();
                let dw = grads.slot_mut(*w, wlen);
                // Bias and weight slots cannot be borrowed together from
                // the accumulator, so the bias gradient lands in a local
                // buffer first.
                let mut db_local = b.map(|bid| vec![0.0; ps.get(bid).data.len()]);
                let dx = kernels::conv2d_backward(
                    &dy.view(),
                    col,
                    &wdata,
                    dw,
                    db_local.as_deref_mut(),
                    in_shape,
                    kh,
                    kw,
                    *stride,
                    *pad,
                );
                if let (Some(bid), Some(db)) = (b, db_local) {
                    let slot = grads.slot_mut(*bid, db.len());
                    for (acc, g) in slot.iter_mut().zip(db.iter()) {
                        *acc += g;
                    }
                }
                Self::accumulate(table, *x, Value::Chw(dx));
            }
            Op::GroupNorm { x, gamma, beta, groups } => {
                let Value::Chw(dy) = gout else { unreachable!() };
                let Aux::GnStats(stats) = &node.aux else { unreachable!() };
                let xv = self.chw(*x);
                let gamma_data = ps.get(*gamma).data.clone();
                let c = gamma_data.len();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let dx = kernels::group_norm_backward(
                    &dy.view(),
                    &xv.view(),
                    &gamma_data,
                    &mut dgamma,
                    &mut dbeta,
                    stats,
                    *groups,
                );
                for (acc, g) in grads.slot_mut(*gamma, c).iter_mut().zip(dgamma.iter()) {
                    *acc += g;
                }
                for (acc, g) in grads.slot_mut(*beta, c).iter_mut().zip(dbeta.iter()) {
                    *acc += g;
                }
                Self::accumulate(table, *x, Value::Chw(dx));
            }
            Op::Relu { x } => {
                let g = match (&node.value, gout) {
                    (Value::Chw(y), Value::Chw(dy)) => {
                        let mut dx = dy.clone();
                        dx.zip_mut_with(y, |g, &yv| {
                            if yv <= 0.0 {
                                *g = 0.0;
                            }
                        });
                        Value::Chw(dx)
                    }
                    (Value::Vec1(y), Value::Vec1(dy)) => {
                        let mut dx = dy.clone();
                        dx.zip_mut_with(y, |g, &yv| {
                            if yv <= 0.0 {
                                *g = 0.0;
                            }
                        });
                        Value::Vec1(dx)
                    }
                    _ => unreachable!(),
                };
                Self::accumulate(table, *x, g);
            }
            Op::Upsample2x { x } => {
                let Value::Chw(dy) = gout else { unreachable!() };
                Self::accumulate(table, *x, Value::Chw(kernels::upsample2x_backward(&dy.view())));
            }
            Op::ConcatChw { a, b } => {
                let Value::Chw(dy) = gout else { unreachable!() };
                let ca = self.chw(*a).dim().0;
                let da = dy.slice(ndarray::s![..ca, .., ..]).to_owned();
                let db = dy.slice(ndarray::s![ca.., .., ..]).to_owned();
                Self::accumulate(table, *a, Value::Chw(da));
                Self::accumulate(table, *b, Value::Chw(db));
            }
            Op::SliceSpatial { x, rows, cols } => {
                let Value::Chw(dy) = gout else { unreachable!() };
                let mut dx = Array3::zeros(self.chw(*x).dim());
                dx.slice_mut(ndarray::s![.., ..*rows, ..*cols]).assign(dy);
                Self::accumulate(table, *x, Value::Chw(dx));
            }
            Op::Add { a, b } => {
                let Value::Chw(dy) = gout else { unreachable!() };
                Self::accumulate(table, *a, Value::Chw(dy.clone()));
                Self::accumulate(table, *b, Value::Chw(dy.clone()));
            }
            Op::Flatten { x } => {
                let Value::Vec1(dy) = gout else { unreachable!() };
                let dim = self.chw(*x).dim();
                let dx = Array3::from_shape_vec(dim, dy.to_vec()).expect("flatten grad reshape");
                Self::accumulate(table, *x, Value::Chw(dx));
            }
            Op::Linear { v, w, b } => {
                let Value::Vec1(dy) = gout else { unreachable!() };
                let wp = ps.get(*w);
                let wdata = wp.data.clone();
                let vv = self.vec1(*v);
                let mut db_local = vec![0.0; dy.len()];
                let dw = grads.slot_mut(*w, wdata.len());
                let dv = kernels::linear_backward(dy, vv, &wdata, dw, &mut db_local);
                for (acc, g) in grads.slot_mut(*b, db_local.len()).iter_mut().zip(db_local.iter()) {
                    *acc += g;
                }
                Self::accumulate(table, *v, Value::Vec1(dv));
            }
            Op::Softmax2d { x } => {
                let Value::Chw(dy) = gout else { unreachable!() };
                let Value::Chw(y) = &node.value else { unreachable!() };
                let p = y.index_axis(Axis(0), 0).to_owned();
                let dplane = softmax_backward(&p, &dy.index_axis(Axis(0), 0).to_owned());
                Self::accumulate(table, *x, Value::Chw(dplane.insert_axis(Axis(0))));
            }
            Op::Dsnt { h } => {
                let Value::Coord(gx, gy) = gout else { unreachable!() };
                let (_, rows, cols) = self.chw(*h).dim();
                let dh = dsnt_backward(rows, cols, (*gx, *gy));
                Self::accumulate(table, *h, Value::Chw(dh.insert_axis(Axis(0))));
            }
            Op::GaussianJs { h, c, sigma2 } => {
                let Value::Scalar(gs) = gout else { unreachable!() };
                let Aux::Target(target) = &node.aux else {
                    // Forward produced NaN from a bad centre; training
                    // aborts before backward, so nothing flows.
                    return;
                };
                let p = Heatmap {
                    values: self.chw(*h).index_axis(Axis(0), 0).to_owned(),
                    normalized: true,
                };
                let q = Heatmap {
                    values: target.clone(),
                    normalized: true,
                };
                let mut dh = js_backward_p(&p, &q);
                dh.mapv_inplace(|v| v * gs);
                let mut dq = js_backward_q(&p, &q);
                dq.mapv_inplace(|v| v * gs);
                let (dcx, dcy) = gaussian_target_backward_center(&q, *sigma2, &dq);
                Self::accumulate(table, *h, Value::Chw(dh.insert_axis(Axis(0))));
                Self::accumulate(table, *c, Value::Coord(dcx, dcy));
            }
            Op::EucLoss { c, target } => {
                let Value::Scalar(gs) = gout else { unreachable!() };
                let (x, y) = self.coord(*c);
                let d = ((x - target.0).powi(2) + (y - target.1).powi(2)).sqrt();
                // Subgradient zero at the (measure-zero) cusp.
                if d >= 1e-12 {
                    Self::accumulate(
                        table,
                        *c,
                        Value::Coord(gs * (x - target.0) / d, gs * (y - target.1) / d),
                    );
                }
            }
            Op::Mse3 { v, target } => {
                let Value::Scalar(gs) = gout else { unreachable!() };
                let vv = self.vec1(*v);
                let dv = Array1::from_shape_fn(3, |i| gs * 2.0 * (vv[i] - target[i]));
                Self::accumulate(table, *v, Value::Vec1(dv));
            }
            Op::QuatNormalize { v } => {
                let Value::Vec1(dy) = gout else { unreachable!() };
                let vv = self.vec1(*v);
                let raw = [vv[0], vv[1], vv[2], vv[3]];
                let g = normalize_backward(raw, [dy[0], dy[1], dy[2], dy[3]]);
                Self::accumulate(table, *v, Value::Vec1(Array1::from_vec(g.to_vec())));
            }
            Op::RotLoss { q, target } => {
                let Value::Scalar(gs) = gout else { unreachable!() };
                let qv = self.vec1(*q);
                let pred = Quaternion::from_wxyz([qv[0], qv[1], qv[2], qv[3]]);
                let g = rotation_loss_backward(&[*target], &[pred]).expect("matched batch of one");
                let dv = Array1::from_shape_fn(4, |i| gs * g[0][i]);
                Self::accumulate(table, *q, Value::Vec1(dv));
            }
            Op::CropResample { x, center, side } => {
                let Value::Chw(dy) = gout else { unreachable!() };
                let dx = kernels::crop_resample_backward(&dy.view(), self.chw(*x).dim(), *center, *side);
                Self::accumulate(table, *x, Value::Chw(dx));
            }
            Op::ScalarAdd { a, b } => {
                let Value::Scalar(gs) = gout else { unreachable!() };
                Self::accumulate(table, *a, Value::Scalar(*gs));
                Self::accumulate(table, *b, Value::Scalar(*gs));
            }
            Op::ScalarScale { a, k } => {
                let Value::Scalar(gs) = gout else { unreachable!() };
                Self::accumulate(table, *a, Value::Scalar(gs * k));
            }
        }
    }
}
