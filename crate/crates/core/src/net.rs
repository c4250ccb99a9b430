//! The learnable point-to-point distance field: a point-convolution feature
//! extractor (initial projection plus three densely connected convolution
//! blocks) and a distance regressor over inverse-distance-interpolated
//! features. Forward evaluation plus gradients with respect to both the
//! query coordinates and every trainable tensor.

use std::path::Path;
use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::cloud::{Point3, PointCloud};
use crate::error::{Error, Result};
use crate::field::DistanceField;
use crate::knn::SpatialIndex;
use crate::tensor::{Tape, Var};

/// What the final regressor layer emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// One channel mapped through softplus: a nonnegative distance.
    Distance,
    /// Three raw channels: a coordinate displacement.
    Offset,
}

/// Which features the regressor consumes alongside the query coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegressorInput {
    Full,
    LocalOnly,
    GlobalOnly,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    /// Feature width of every MLP.
    pub d: usize,
    /// Neighborhood size for the point convolutions.
    pub k: usize,
    pub head: HeadKind,
    pub regressor_input: RegressorInput,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            d: 32,
            k: 16,
            head: HeadKind::Distance,
            regressor_input: RegressorInput::Full,
        }
    }
}

impl NetConfig {
    fn head_channels(&self) -> usize {
        match self.head {
            HeadKind::Distance => 1,
            HeadKind::Offset => 3,
        }
    }

    fn regressor_in(&self) -> usize {
        match self.regressor_input {
            RegressorInput::Full => 3 + 5 * self.d,
            RegressorInput::LocalOnly => 3 + 4 * self.d,
            RegressorInput::GlobalOnly => 3 + self.d,
        }
    }
}

/// Hidden-layer activation of the kernel MLPs. Identity exists so tests can
/// configure kernels as pure linear maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    /// in×out weight.
    pub w: Array2<f64>,
    /// 1×out bias.
    pub b: Array2<f64>,
}

impl LinearLayer {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        LinearLayer {
            w: Array2::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-bound..bound)),
            b: Array2::zeros((1, fan_out)),
        }
    }
}

/// Two linear layers with an activation on the hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp2 {
    pub l1: LinearLayer,
    pub l2: LinearLayer,
    pub activation: Activation,
}

impl Mlp2 {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, hidden: usize, fan_out: usize) -> Self {
        Mlp2 {
            l1: LinearLayer::init(rng, fan_in, hidden),
            l2: LinearLayer::init(rng, hidden, fan_out),
            activation: Activation::Relu,
        }
    }
}

/// One convolution group: a channel-reducing MLP followed by the point
/// convolution kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGroupParams {
    pub reduce: LinearLayer,
    pub alpha: Mlp2,
    pub beta: Mlp2,
    pub gamma: Mlp2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseBlockParams {
    pub groups: Vec<ConvGroupParams>,
    pub transition: LinearLayer,
}

/// All trainable tensors of the distance network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub cfg: NetConfig,
    pub initial: LinearLayer,
    pub blocks: Vec<DenseBlockParams>,
    pub regressor: Vec<LinearLayer>,
}

impl NetworkParams {
    /// Seeded initialization: weights uniform in ±1/sqrt(fan_in), zero biases.
    pub fn init(cfg: NetConfig, seed: u64) -> Self {
        let d = cfg.d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let initial = LinearLayer::init(&mut rng, 3, d);
        let mut blocks = Vec::with_capacity(3);
        for _ in 0..3 {
            let mut groups = Vec::with_capacity(3);
            for j in 0..3 {
                let reduce_in = (j + 1) * d;
                groups.push(ConvGroupParams {
                    reduce: LinearLayer::init(&mut rng, reduce_in, d),
                    alpha: Mlp2::init(&mut rng, 3, d, d),
                    beta: Mlp2::init(&mut rng, d, d, d),
                    gamma: Mlp2::init(&mut rng, d, d, d),
                });
            }
            let transition = LinearLayer::init(&mut rng, 4 * d, d);
            blocks.push(DenseBlockParams { groups, transition });
        }
        let mut regressor = Vec::with_capacity(4);
        regressor.push(LinearLayer::init(&mut rng, cfg.regressor_in(), d));
        regressor.push(LinearLayer::init(&mut rng, d, d));
        regressor.push(LinearLayer::init(&mut rng, d, d));
        regressor.push(LinearLayer::init(&mut rng, d, cfg.head_channels()));
        NetworkParams {
            cfg,
            initial,
            blocks,
            regressor,
        }
    }

    /// Visits every tensor in a fixed canonical order.
    pub fn visit(&self, mut f: impl FnMut(String, &Array2<f64>)) {
        let mut lin = |name: String, l: &LinearLayer, f: &mut dyn FnMut(String, &Array2<f64>)| {
            f(format!("{name}.w"), &l.w);
            f(format!("{name}.b"), &l.b);
        };
        lin("initial".into(), &self.initial, &mut f);
        for (bi, b) in self.blocks.iter().enumerate() {
            for (gi, g) in b.groups.iter().enumerate() {
                let p = format!("block{bi}.group{gi}");
                lin(format!("{p}.reduce"), &g.reduce, &mut f);
                for (kn, m) in [("alpha", &g.alpha), ("beta", &g.beta), ("gamma", &g.gamma)] {
                    lin(format!("{p}.{kn}.l1"), &m.l1, &mut f);
                    lin(format!("{p}.{kn}.l2"), &m.l2, &mut f);
                }
            }
            lin(format!("block{bi}.transition"), &b.transition, &mut f);
        }
        for (ri, r) in self.regressor.iter().enumerate() {
            lin(format!("regressor{ri}"), r, &mut f);
        }
    }

    /// Mutable variant of [`NetworkParams::visit`], same order.
    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut Array2<f64>)) {
        let mut lin = |name: String, l: &mut LinearLayer, f: &mut dyn FnMut(&str, &mut Array2<f64>)| {
            f(&format!("{name}.w"), &mut l.w);
            f(&format!("{name}.b"), &mut l.b);
        };
        lin("initial".into(), &mut self.initial, &mut f);
        for (bi, b) in self.blocks.iter_mut().enumerate() {
            for (gi, g) in b.groups.iter_mut().enumerate() {
                let p = format!("block{bi}.group{gi}");
                lin(format!("{p}.reduce"), &mut g.reduce, &mut f);
                for (kn, m) in [
                    ("alpha", &mut g.alpha),
                    ("beta", &mut g.beta),
                    ("gamma", &mut g.gamma),
                ] {
                    lin(format!("{p}.{kn}.l1"), &mut m.l1, &mut f);
                    lin(format!("{p}.{kn}.l2"), &mut m.l2, &mut f);
                }
            }
            lin(format!("block{bi}.transition"), &mut b.transition, &mut f);
        }
        for (ri, r) in self.regressor.iter_mut().enumerate() {
            lin(format!("regressor{ri}"), r, &mut f);
        }
    }

    /// Tensor count in canonical order.
    pub fn tensor_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, _| n += 1);
        n
    }
}

// ---------------------------------------------------------------------------
// tape-side mirrors

#[derive(Clone, Copy)]
struct LinVar {
    w: Var,
    b: Var,
}

#[derive(Clone, Copy)]
struct Mlp2Var {
    l1: LinVar,
    l2: LinVar,
    activation: Activation,
}

struct GroupVar {
    reduce: LinVar,
    alpha: Mlp2Var,
    beta: Mlp2Var,
    gamma: Mlp2Var,
}

struct BlockVar {
    groups: Vec<GroupVar>,
    transition: LinVar,
}

pub(crate) struct NetVars {
    initial: LinVar,
    blocks: Vec<BlockVar>,
    regressor: Vec<LinVar>,
    /// Canonical-order flat list, matching [`NetworkParams::visit`].
    all: Vec<Var>,
}

impl NetworkParams {
    pub(crate) fn to_vars(&self, tape: &mut Tape, trainable: bool) -> NetVars {
        let mut all = Vec::new();
        let mut lin = |tape: &mut Tape, l: &LinearLayer, all: &mut Vec<Var>| -> LinVar {
            let w = if trainable {
                tape.leaf(l.w.clone())
            } else {
                tape.constant(l.w.clone())
            };
            let b = if trainable {
                tape.leaf(l.b.clone())
            } else {
                tape.constant(l.b.clone())
            };
            all.push(w);
            all.push(b);
            LinVar { w, b }
        };
        let initial = lin(tape, &self.initial, &mut all);
        let mut blocks = Vec::new();
        for b in &self.blocks {
            let mut groups = Vec::new();
            for g in &b.groups {
                let reduce = lin(tape, &g.reduce, &mut all);
                let mut mk = |tape: &mut Tape, m: &Mlp2, all: &mut Vec<Var>| -> Mlp2Var {
                    let l1 = lin(tape, &m.l1, all);
                    let l2 = lin(tape, &m.l2, all);
                    Mlp2Var {
                        l1,
                        l2,
                        activation: m.activation,
                    }
                };
                let alpha = mk(tape, &g.alpha, &mut all);
                let beta = mk(tape, &g.beta, &mut all);
                let gamma = mk(tape, &g.gamma, &mut all);
                groups.push(GroupVar {
                    reduce,
                    alpha,
                    beta,
                    gamma,
                });
            }
            let transition = lin(tape, &b.transition, &mut all);
            blocks.push(BlockVar { groups, transition });
        }
        let regressor = self
            .regressor
            .iter()
            .map(|r| lin(tape, r, &mut all))
            .collect();
        NetVars {
            initial,
            blocks,
            regressor,
            all,
        }
    }
}

fn mlp2_apply(tape: &mut Tape, m: Mlp2Var, x: Var) -> Var {
    let h = tape.linear(x, m.l1.w, m.l1.b);
    let h = match m.activation {
        Activation::Relu => tape.relu(h),
        Activation::Identity => h,
    };
    tape.linear(h, m.l2.w, m.l2.b)
}

fn points_to_array(points: &[Point3]) -> Array2<f64> {
    let mut a = Array2::zeros((points.len(), 3));
    for (i, p) in points.iter().enumerate() {
        a[(i, 0)] = p.x;
        a[(i, 1)] = p.y;
        a[(i, 2)] = p.z;
    }
    a
}

/// Flattened k-NN table (self excluded) plus neighbor offsets p_k - p.
fn neighborhood(
    points: &[Point3],
    index: &SpatialIndex,
    k: usize,
) -> Result<(Rc<Vec<usize>>, Array2<f64>)> {
    let n = points.len();
    let mut idx = Vec::with_capacity(n * k);
    let mut offs = Array2::zeros((n * k, 3));
    for (i, p) in points.iter().enumerate() {
        let nbrs = index.knn(*p, k, true)?;
        for (j, (nb, _)) in nbrs.iter().enumerate() {
            idx.push(*nb);
            let d = points[*nb].sub(*p);
            offs[(i * k + j, 0)] = d.x;
            offs[(i * k + j, 1)] = d.y;
            offs[(i * k + j, 2)] = d.z;
        }
    }
    Ok((Rc::new(idx), offs))
}

fn conv_group(
    tape: &mut Tape,
    g: &GroupVar,
    cat: &[Var],
    nbr: &Rc<Vec<usize>>,
    offs: Var,
    k: usize,
) -> Var {
    let xin = if cat.len() == 1 {
        cat[0]
    } else {
        tape.concat_cols(cat)
    };
    let red = tape.linear(xin, g.reduce.w, g.reduce.b);
    let f = tape.relu(red);
    // beta acts rowwise, so transform once and gather per neighbor
    let bf = mlp2_apply(tape, g.beta, f);
    let bg = tape.gather_rows(bf, nbr.clone());
    let a = mlp2_apply(tape, g.alpha, offs);
    let had = tape.mul(a, bg);
    let gm = mlp2_apply(tape, g.gamma, had);
    tape.segment_sum(gm, k)
}

/// Builds the whole feature-extraction graph; returns the four local feature
/// vars and the global feature var.
fn extractor_graph(
    tape: &mut Tape,
    vars: &NetVars,
    points: &[Point3],
    nbr: &Rc<Vec<usize>>,
    offs: Array2<f64>,
    k: usize,
) -> ([Var; 4], Var) {
    let pts = tape.constant(points_to_array(points));
    let offs = tape.constant(offs);
    let l0 = tape.linear(pts, vars.initial.w, vars.initial.b);
    let mut locals = [l0; 4];
    let mut x = l0;
    for (bi, block) in vars.blocks.iter().enumerate() {
        let o1 = conv_group(tape, &block.groups[0], &[x], nbr, offs, k);
        let o2 = conv_group(tape, &block.groups[1], &[x, o1], nbr, offs, k);
        let o3 = conv_group(tape, &block.groups[2], &[x, o1, o2], nbr, offs, k);
        let cat = tape.concat_cols(&[x, o1, o2, o3]);
        let t = tape.linear(cat, block.transition.w, block.transition.b);
        x = tape.relu(t);
        locals[bi + 1] = x;
    }
    let g = tape.col_max(locals[3]);
    (locals, g)
}

/// Multi-scale local features, the pooled global feature, and the anchor
/// snapshot they were extracted from.
#[derive(Debug)]
pub struct ExtractedFeatures {
    pub anchors: PointCloud,
    pub index: SpatialIndex,
    pub locals: [Array2<f64>; 4],
    pub global: Array2<f64>,
}

/// Runs the feature extractor over an interpolated cloud.
pub fn extract_features(
    p_i: &PointCloud,
    params: &NetworkParams,
    k: usize,
) -> Result<ExtractedFeatures> {
    if p_i.len() <= k {
        return Err(Error::InvalidArgument(format!(
            "feature extraction needs more than k={k} points, got {}",
            p_i.len()
        )));
    }
    let index = SpatialIndex::build(p_i)?;
    let (nbr, offs) = neighborhood(p_i.points(), &index, k)?;
    let mut tape = Tape::new();
    let vars = params.to_vars(&mut tape, false);
    let (locals, g) = extractor_graph(&mut tape, &vars, p_i.points(), &nbr, offs, k);
    Ok(ExtractedFeatures {
        anchors: p_i.clone(),
        index,
        locals: [
            tape.value(locals[0]).clone(),
            tape.value(locals[1]).clone(),
            tape.value(locals[2]).clone(),
            tape.value(locals[3]).clone(),
        ],
        global: tape.value(g).clone(),
    })
}

/// One point convolution over explicit features, as a standalone operation.
pub fn p3dconv(
    points: &PointCloud,
    feats: &Array2<f64>,
    index: &SpatialIndex,
    alpha: &Mlp2,
    beta: &Mlp2,
    gamma: &Mlp2,
    k: usize,
) -> Result<Array2<f64>> {
    if feats.nrows() != points.len() {
        return Err(Error::InvalidArgument(format!(
            "feature rows {} != point count {}",
            feats.nrows(),
            points.len()
        )));
    }
    if k >= points.len() {
        return Err(Error::InvalidArgument(format!(
            "k={k} must be below the point count {}",
            points.len()
        )));
    }
    let (nbr, offs) = neighborhood(points.points(), index, k)?;
    let mut tape = Tape::new();
    let mut mk = |m: &Mlp2, tape: &mut Tape| Mlp2Var {
        l1: LinVar {
            w: tape.constant(m.l1.w.clone()),
            b: tape.constant(m.l1.b.clone()),
        },
        l2: LinVar {
            w: tape.constant(m.l2.w.clone()),
            b: tape.constant(m.l2.b.clone()),
        },
        activation: m.activation,
    };
    let av = mk(alpha, &mut tape);
    let bv = mk(beta, &mut tape);
    let gv = mk(gamma, &mut tape);
    let f = tape.constant(feats.clone());
    let offs = tape.constant(offs);
    let bf = mlp2_apply(&mut tape, bv, f);
    let bg = tape.gather_rows(bf, nbr);
    let a = mlp2_apply(&mut tape, av, offs);
    let had = tape.mul(a, bg);
    let gm = mlp2_apply(&mut tape, gv, had);
    let out = tape.segment_sum(gm, k);
    Ok(tape.value(out).clone())
}

// ---------------------------------------------------------------------------
// regressor

/// Per-query interpolation plan: 3 anchor neighbors and whether the query
/// coincides exactly with its nearest anchor.
struct InterpPlan {
    anchor_ids: Vec<usize>,
    regular: Vec<usize>,
    coincident: Vec<usize>,
}

fn plan_interpolation(index: &SpatialIndex, queries: &[Point3]) -> Result<InterpPlan> {
    if index.len() < 3 {
        return Err(Error::InvalidArgument(
            "feature interpolation needs at least 3 anchor points".into(),
        ));
    }
    let mut anchor_ids = Vec::with_capacity(queries.len() * 3);
    let mut regular = Vec::new();
    let mut coincident = Vec::new();
    for (qi, q) in queries.iter().enumerate() {
        let nn = index.knn(*q, 3, false)?;
        if nn[0].1 == 0.0 {
            coincident.push(qi);
        } else {
            regular.push(qi);
        }
        for (i, _) in nn {
            anchor_ids.push(i);
        }
    }
    Ok(InterpPlan {
        anchor_ids,
        regular,
        coincident,
    })
}

struct RegressorGraph {
    query_var: Var,
    output: Var,
}

/// Builds the regressor graph over a batch of queries against fixed
/// extracted features. Interpolation weights are differentiable in the query
/// position except at exact anchor coincidence, where the nearest anchor's
/// features are taken with locally constant weights.
fn regressor_graph(
    tape: &mut Tape,
    vars: &NetVars,
    cfg: &NetConfig,
    locals: [Var; 4],
    global: Var,
    anchors: &[Point3],
    plan: &InterpPlan,
    queries: &[Point3],
    queries_differentiable: bool,
) -> RegressorGraph {
    let m = queries.len();
    let qarr = points_to_array(queries);
    let qvar = if queries_differentiable {
        tape.leaf(qarr)
    } else {
        tape.constant(qarr)
    };

    // interpolated locals per scale, assembled back into query order
    let mut interp: Vec<Var> = Vec::with_capacity(4);
    let reg_rows: Rc<Vec<usize>> = Rc::new(plan.regular.clone());
    let coh_rows: Rc<Vec<usize>> = Rc::new(plan.coincident.clone());
    // inverse permutation of [regular ++ coincident]
    let mut inv = vec![0usize; m];
    for (pos, &qi) in plan.regular.iter().chain(plan.coincident.iter()).enumerate() {
        inv[qi] = pos;
    }
    let inv: Rc<Vec<usize>> = Rc::new(inv);

    // shared weight computation for the regular rows
    let mut weights_regular: Option<Var> = None;
    let mut reg_anchor_rows: Rc<Vec<usize>> = Rc::new(Vec::new());
    if !plan.regular.is_empty() {
        let mut rows = Vec::with_capacity(plan.regular.len() * 3);
        let mut coords = Vec::with_capacity(plan.regular.len() * 3);
        for &qi in &plan.regular {
            for j in 0..3 {
                let a = plan.anchor_ids[qi * 3 + j];
                rows.push(a);
                coords.push(anchors[a]);
            }
        }
        reg_anchor_rows = Rc::new(rows);
        let qreg = tape.gather_rows(qvar, reg_rows.clone());
        let qrep = tape.repeat_rows(qreg, 3);
        let aconst = tape.constant(points_to_array(&coords));
        let diff = tape.sub(qrep, aconst);
        let sq = tape.mul(diff, diff);
        let d2 = tape.sum_cols(sq);
        let dist = tape.sqrt(d2);
        let w = tape.recip(dist);
        let sums = tape.segment_sum(w, 3);
        let rsum = tape.recip(sums);
        let rsum_rep = tape.repeat_rows(rsum, 3);
        weights_regular = Some(tape.mul(w, rsum_rep));
    }
    let coh_anchor_rows: Rc<Vec<usize>> = Rc::new(
        plan.coincident
            .iter()
            .map(|&qi| plan.anchor_ids[qi * 3])
            .collect(),
    );

    for l in locals {
        let mut parts: Vec<Var> = Vec::new();
        if let Some(w) = weights_regular {
            let gathered = tape.gather_rows(l, reg_anchor_rows.clone());
            let scaled = tape.row_scale(gathered, w);
            parts.push(tape.segment_sum(scaled, 3));
        }
        if !plan.coincident.is_empty() {
            parts.push(tape.gather_rows(l, coh_anchor_rows.clone()));
        }
        let stacked = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_rows(&parts)
        };
        interp.push(tape.gather_rows(stacked, inv.clone()));
    }

    let mut inputs: Vec<Var> = vec![qvar];
    match cfg.regressor_input {
        RegressorInput::Full => {
            inputs.extend(&interp);
            inputs.push(tape.broadcast_row(global, m));
        }
        RegressorInput::LocalOnly => inputs.extend(&interp),
        RegressorInput::GlobalOnly => inputs.push(tape.broadcast_row(global, m)),
    }
    let mut x = tape.concat_cols(&inputs);
    for (i, r) in vars.regressor.iter().enumerate() {
        x = tape.linear(x, r.w, r.b);
        if i + 1 < vars.regressor.len() {
            x = tape.relu(x);
        }
    }
    let output = match cfg.head {
        HeadKind::Distance => tape.softplus(x),
        HeadKind::Offset => x,
    };
    RegressorGraph {
        query_var: qvar,
        output,
    }
}

fn locals_as_constants(tape: &mut Tape, feats: &ExtractedFeatures) -> ([Var; 4], Var) {
    let locals = [
        tape.constant(feats.locals[0].clone()),
        tape.constant(feats.locals[1].clone()),
        tape.constant(feats.locals[2].clone()),
        tape.constant(feats.locals[3].clone()),
    ];
    let global = tape.constant(feats.global.clone());
    (locals, global)
}

/// Inverse-distance interpolation of the four local feature scales at a
/// query point (the weights follow the anchor 3-NN rule, with exact anchor
/// coincidence returning that anchor's rows). Mirrors the interpolation
/// stage of the regressor graph; unit tests hold the two paths equal.
pub fn interpolate_features(query: Point3, feats: &ExtractedFeatures) -> Result<[Vec<f64>; 4]> {
    let plan = plan_interpolation(&feats.index, &[query])?;
    let mut out: [Vec<f64>; 4] = Default::default();
    let ids = &plan.anchor_ids;
    if plan.coincident.len() == 1 {
        for (s, l) in feats.locals.iter().enumerate() {
            out[s] = l.row(ids[0]).to_vec();
        }
        return Ok(out);
    }
    let mut w = [0.0f64; 3];
    for j in 0..3 {
        w[j] = 1.0 / query.dist(feats.anchors[ids[j]]);
    }
    let sum: f64 = w.iter().sum();
    for (s, l) in feats.locals.iter().enumerate() {
        let d = l.ncols();
        let mut row = vec![0.0; d];
        for j in 0..3 {
            for c in 0..d {
                row[c] += w[j] / sum * l[(ids[j], c)];
            }
        }
        out[s] = row;
    }
    Ok(out)
}

/// Batched forward pass: predicted distances (or offsets) for all queries.
pub fn forward_batch(
    queries: &[Point3],
    feats: &ExtractedFeatures,
    params: &NetworkParams,
) -> Result<Array2<f64>> {
    let plan = plan_interpolation(&feats.index, queries)?;
    let mut tape = Tape::new();
    let vars = params.to_vars(&mut tape, false);
    let (locals, global) = locals_as_constants(&mut tape, feats);
    let g = regressor_graph(
        &mut tape,
        &vars,
        &params.cfg,
        locals,
        global,
        feats.anchors.points(),
        &plan,
        queries,
        false,
    );
    Ok(tape.value(g.output).clone())
}

/// Predicted distance at one query point.
pub fn forward(query: Point3, feats: &ExtractedFeatures, params: &NetworkParams) -> Result<f64> {
    Ok(forward_batch(&[query], feats, params)?[(0, 0)])
}

/// Exact derivative of the forward pass with respect to the query
/// coordinates, anchor selection held locally constant, interpolation
/// weights differentiated through.
pub fn grad_query(
    query: Point3,
    feats: &ExtractedFeatures,
    params: &NetworkParams,
) -> Result<Point3> {
    let (_, grads) = value_grad_batch(&[query], feats, params)?;
    Ok(grads[0])
}

/// Batched value-and-gradient evaluation for the distance head. Each row of
/// the output depends only on its own query, so one seeded backward pass
/// yields every per-query gradient.
pub fn value_grad_batch(
    queries: &[Point3],
    feats: &ExtractedFeatures,
    params: &NetworkParams,
) -> Result<(Vec<f64>, Vec<Point3>)> {
    if params.cfg.head != HeadKind::Distance {
        return Err(Error::InvalidArgument(
            "query gradients require the distance head".into(),
        ));
    }
    let plan = plan_interpolation(&feats.index, queries)?;
    let mut tape = Tape::new();
    let vars = params.to_vars(&mut tape, false);
    let (locals, global) = locals_as_constants(&mut tape, feats);
    let g = regressor_graph(
        &mut tape,
        &vars,
        &params.cfg,
        locals,
        global,
        feats.anchors.points(),
        &plan,
        queries,
        true,
    );
    let values: Vec<f64> = tape.value(g.output).column(0).to_vec();
    let seed = Array2::ones((queries.len(), 1));
    tape.backward_seeded(g.output, seed);
    let gq = tape
        .grad(g.query_var)
        .expect("query gradient requested")
        .clone();
    let grads = (0..queries.len())
        .map(|i| Point3::new(gq[(i, 0)], gq[(i, 1)], gq[(i, 2)]))
        .collect();
    Ok((values, grads))
}

/// Mean-absolute-error loss over a query batch and its gradients with
/// respect to every trainable tensor, in canonical visit order. The anchor
/// features are recomputed inside the graph so extractor tensors receive
/// gradients too.
pub fn grad_params(
    queries: &[Point3],
    targets: &[f64],
    feats: &ExtractedFeatures,
    params: &NetworkParams,
) -> Result<(f64, Vec<Array2<f64>>)> {
    if queries.is_empty() || queries.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "queries ({}) and targets ({}) must be nonempty and equal",
            queries.len(),
            targets.len()
        )));
    }
    let k = params.cfg.k;
    let anchors = &feats.anchors;
    let (nbr, offs) = neighborhood(anchors.points(), &feats.index, k)?;
    let plan = plan_interpolation(&feats.index, queries)?;
    let mut tape = Tape::new();
    let vars = params.to_vars(&mut tape, true);
    let (locals, global) = extractor_graph(&mut tape, &vars, anchors.points(), &nbr, offs, k);
    let g = regressor_graph(
        &mut tape,
        &vars,
        &params.cfg,
        locals,
        global,
        anchors.points(),
        &plan,
        queries,
        false,
    );
    let tarr = Array2::from_shape_vec((targets.len(), 1), targets.to_vec())
        .expect("target shape");
    let tvar = tape.constant(tarr);
    let resid = tape.sub(g.output, tvar);
    let absr = tape.abs(resid);
    let loss = tape.mean_all(absr);
    let loss_val = tape.value(loss)[(0, 0)];
    tape.backward(loss, 1.0);
    let grads = vars
        .all
        .iter()
        .map(|v| {
            tape.grad(*v)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(tape.shape(*v)))
        })
        .collect();
    Ok((loss_val, grads))
}

/// Squared-error loss over offset targets and its parameter gradients; the
/// offset-head counterpart of [`grad_params`].
pub fn grad_params_offset(
    queries: &[Point3],
    targets: &[Point3],
    feats: &ExtractedFeatures,
    params: &NetworkParams,
) -> Result<(f64, Vec<Array2<f64>>)> {
    if queries.is_empty() || queries.len() != targets.len() {
        return Err(Error::InvalidArgument(
            "queries and offset targets must be nonempty and equal".into(),
        ));
    }
    if params.cfg.head != HeadKind::Offset {
        return Err(Error::InvalidArgument(
            "offset training requires the offset head".into(),
        ));
    }
    let k = params.cfg.k;
    let anchors = &feats.anchors;
    let (nbr, offs) = neighborhood(anchors.points(), &feats.index, k)?;
    let plan = plan_interpolation(&feats.index, queries)?;
    let mut tape = Tape::new();
    let vars = params.to_vars(&mut tape, true);
    let (locals, global) = extractor_graph(&mut tape, &vars, anchors.points(), &nbr, offs, k);
    let g = regressor_graph(
        &mut tape,
        &vars,
        &params.cfg,
        locals,
        global,
        anchors.points(),
        &plan,
        queries,
        false,
    );
    let tvar = tape.constant(points_to_array(targets));
    let resid = tape.sub(g.output, tvar);
    let sq = tape.mul(resid, resid);
    let rowsum = tape.sum_cols(sq);
    let loss = tape.mean_all(rowsum);
    let loss_val = tape.value(loss)[(0, 0)];
    tape.backward(loss, 1.0);
    let grads = vars
        .all
        .iter()
        .map(|v| {
            tape.grad(*v)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(tape.shape(*v)))
        })
        .collect();
    Ok((loss_val, grads))
}

// ---------------------------------------------------------------------------
// learned field

/// The trained network packaged as a [`DistanceField`]: extracted anchor
/// features stay fixed while query-side interpolation refreshes per call.
pub struct LearnedField<'a> {
    params: &'a NetworkParams,
    feats: ExtractedFeatures,
}

impl<'a> LearnedField<'a> {
    pub fn new(params: &'a NetworkParams, p_i: &PointCloud) -> Result<Self> {
        let feats = extract_features(p_i, params, params.cfg.k)?;
        Ok(LearnedField { params, feats })
    }

    pub fn from_features(params: &'a NetworkParams, feats: ExtractedFeatures) -> Self {
        LearnedField { params, feats }
    }

    pub fn features(&self) -> &ExtractedFeatures {
        &self.feats
    }
}

impl DistanceField for LearnedField<'_> {
    fn value(&self, q: Point3) -> f64 {
        forward(q, &self.feats, self.params).expect("anchor set fixed and valid")
    }

    fn gradient(&self, q: Point3) -> Point3 {
        grad_query(q, &self.feats, self.params).expect("anchor set fixed and valid")
    }

    fn value_and_gradient(&self, q: Point3) -> (f64, Point3) {
        let (v, g) = value_grad_batch(&[q], &self.feats, self.params)
            .expect("anchor set fixed and valid");
        (v[0], g[0])
    }

    fn batch_value_and_gradient(&self, qs: &[Point3]) -> (Vec<f64>, Vec<Point3>) {
        value_grad_batch(qs, &self.feats, self.params).expect("anchor set fixed and valid")
    }

    fn frozen_probe(&self, p: Point3) -> Option<Box<dyn DistanceField + '_>> {
        let rows = interpolate_features(p, &self.feats).ok()?;
        Some(Box::new(FrozenProbe {
            params: self.params,
            feats: &self.feats,
            rows,
        }))
    }
}

/// A per-point probe whose interpolated features stay frozen at the position
/// it was created for; only the direct coordinate inputs vary.
struct FrozenProbe<'a> {
    params: &'a NetworkParams,
    feats: &'a ExtractedFeatures,
    rows: [Vec<f64>; 4],
}

impl FrozenProbe<'_> {
    fn eval(&self, q: Point3) -> (f64, Point3) {
        let d = self.params.cfg.d;
        let mut tape = Tape::new();
        let vars = self.params.to_vars(&mut tape, false);
        let qvar = tape.leaf(points_to_array(&[q]));
        let mut inputs: Vec<Var> = vec![qvar];
        match self.params.cfg.regressor_input {
            RegressorInput::Full => {
                for r in &self.rows {
                    let a = Array2::from_shape_vec((1, d), r.clone()).expect("row shape");
                    inputs.push(tape.constant(a));
                }
                inputs.push(tape.constant(self.feats.global.clone()));
            }
            RegressorInput::LocalOnly => {
                for r in &self.rows {
                    let a = Array2::from_shape_vec((1, d), r.clone()).expect("row shape");
                    inputs.push(tape.constant(a));
                }
            }
            RegressorInput::GlobalOnly => {
                inputs.push(tape.constant(self.feats.global.clone()));
            }
        }
        let mut x = tape.concat_cols(&inputs);
        for (i, r) in vars.regressor.iter().enumerate() {
            x = tape.linear(x, r.w, r.b);
            if i + 1 < vars.regressor.len() {
                x = tape.relu(x);
            }
        }
        let out = tape.softplus(x);
        let v = tape.value(out)[(0, 0)];
        tape.backward(out, 1.0);
        let gq = tape.grad(qvar).expect("query leaf").clone();
        (v, Point3::new(gq[(0, 0)], gq[(0, 1)], gq[(0, 2)]))
    }
}

impl DistanceField for FrozenProbe<'_> {
    fn value(&self, q: Point3) -> f64 {
        self.eval(q).0
    }

    fn gradient(&self, q: Point3) -> Point3 {
        self.eval(q).1
    }

    fn value_and_gradient(&self, q: Point3) -> (f64, Point3) {
        self.eval(q)
    }
}

/// Offset-head network packaged for auto-regressive refinement.
pub struct OffsetModel<'a> {
    params: &'a NetworkParams,
    feats: ExtractedFeatures,
}

impl<'a> OffsetModel<'a> {
    pub fn new(params: &'a NetworkParams, p_i: &PointCloud) -> Result<Self> {
        if params.cfg.head != HeadKind::Offset {
            return Err(Error::InvalidArgument(
                "offset refinement requires an offset-head checkpoint".into(),
            ));
        }
        let feats = extract_features(p_i, params, params.cfg.k)?;
        Ok(OffsetModel { params, feats })
    }

    /// Predicted displacement for each query point.
    pub fn batch_offsets(&self, qs: &[Point3]) -> Result<Vec<Point3>> {
        let out = forward_batch(qs, &self.feats, self.params)?;
        Ok((0..qs.len())
            .map(|i| Point3::new(out[(i, 0)], out[(i, 1)], out[(i, 2)]))
            .collect())
    }
}

// ---------------------------------------------------------------------------
// checkpoint serialization

const MAGIC: &[u8; 4] = b"PNCK";
const VERSION: u32 = 1;

fn head_tag(h: HeadKind) -> u8 {
    match h {
        HeadKind::Distance => 0,
        HeadKind::Offset => 1,
    }
}

fn reg_tag(r: RegressorInput) -> u8 {
    match r {
        RegressorInput::Full => 0,
        RegressorInput::LocalOnly => 1,
        RegressorInput::GlobalOnly => 2,
    }
}

/// Writes a checkpoint: magic, version, config, named tensors in canonical
/// order, and a trailing SHA-256 of everything before it.
pub fn save_params(params: &NetworkParams, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.cfg.d as u32).to_le_bytes());
    buf.extend_from_slice(&(params.cfg.k as u32).to_le_bytes());
    buf.push(head_tag(params.cfg.head));
    buf.push(reg_tag(params.cfg.regressor_input));
    buf.extend_from_slice(&(params.tensor_count() as u32).to_le_bytes());
    params.visit(|name, t| {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
        buf.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    });
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::write(path, &buf).map_err(|e| Error::IoWrite {
        path: path.to_path_buf(),
        source: e,
    })
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Checkpoint {
                path: self.path.to_path_buf(),
                msg: "unexpected end of file".into(),
            });
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Reads a checkpoint written by [`save_params`], verifying the checksum and
/// every tensor shape against the declared architecture.
pub fn load_params(path: &Path) -> Result<NetworkParams> {
    let buf = std::fs::read(path).map_err(|e| Error::IoRead {
        path: path.to_path_buf(),
        source: e,
    })?;
    if buf.len() < 32 {
        return Err(Error::ChecksumMismatch {
            path: path.to_path_buf(),
        });
    }
    let (body, stored) = buf.split_at(buf.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored {
        return Err(Error::ChecksumMismatch {
            path: path.to_path_buf(),
        });
    }
    let mut c = Cursor {
        buf: body,
        at: 0,
        path,
    };
    let bad = |msg: String| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    if c.take(4)? != MAGIC {
        return Err(bad("bad magic bytes".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let d = c.u32()? as usize;
    let k = c.u32()? as usize;
    let head = match c.u8()? {
        0 => HeadKind::Distance,
        1 => HeadKind::Offset,
        t => return Err(bad(format!("unknown head tag {t}"))),
    };
    let regressor_input = match c.u8()? {
        0 => RegressorInput::Full,
        1 => RegressorInput::LocalOnly,
        2 => RegressorInput::GlobalOnly,
        t => return Err(bad(format!("unknown regressor-input tag {t}"))),
    };
    let cfg = NetConfig {
        d,
        k,
        head,
        regressor_input,
    };
    let count = c.u32()? as usize;

    // the skeleton dictates expected names and shapes for this config
    let mut skeleton = NetworkParams::init(cfg, 0);
    if count != skeleton.tensor_count() {
        return Err(bad(format!(
            "expected {} tensors, file has {count}",
            skeleton.tensor_count()
        )));
    }
    let mut loaded: Vec<(String, Array2<f64>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = c.u32()? as usize;
        let name = String::from_utf8(c.take(nlen)?.to_vec())
            .map_err(|_| bad("tensor name is not utf-8".into()))?;
        let rows = c.u64()? as usize;
        let cols = c.u64()? as usize;
        let data = c.take(rows * cols * 8)?;
        let vals: Vec<f64> = data
            .chunks_exact(8)
            .map(|ch| f64::from_le_bytes(ch.try_into().unwrap()))
            .collect();
        let arr = Array2::from_shape_vec((rows, cols), vals).expect("checked size");
        loaded.push((name, arr));
    }
    let mut i = 0;
    let mut shape_err: Option<Error> = None;
    skeleton.visit_mut(|name, t| {
        if shape_err.is_some() {
            return;
        }
        let (fname, found) = &loaded[i];
        if fname != name {
            shape_err = Some(Error::Checkpoint {
                path: path.to_path_buf(),
                msg: format!("tensor {i} is `{fname}`, expected `{name}`"),
            });
        } else if found.dim() != t.dim() {
            shape_err = Some(Error::ShapeMismatch {
                name: name.to_string(),
                expected: t.dim(),
                found: found.dim(),
            });
        } else {
            *t = found.clone();
        }
        i += 1;
    });
    if let Some(e) = shape_err {
        return Err(e);
    }
    Ok(skeleton)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Point3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    fn linear_mlp2(win: usize, wout: usize, fill: f64) -> Mlp2 {
        // identity-activation kernel computing x . (fill * ones)
        Mlp2 {
            l1: LinearLayer {
                w: Array2::from_elem((win, 1), fill),
                b: Array2::zeros((1, 1)),
            },
            l2: LinearLayer {
                w: Array2::from_elem((1, wout), 1.0),
                b: Array2::zeros((1, wout)),
            },
            activation: Activation::Identity,
        }
    }

    #[test]
    fn p3dconv_hand_evaluated_example() {
        // two points on the x axis, scalar features 2 and 3, k=1, all three
        // kernels pure linear with all-ones weights and zero bias
        let pts = PointCloud::new(vec![Point3::ZERO, Point3::new(1.0, 0.0, 0.0)]).unwrap();
        let feats = Array2::from_shape_vec((2, 1), vec![2.0, 3.0]).unwrap();
        let index = SpatialIndex::build(&pts).unwrap();
        let alpha = linear_mlp2(3, 1, 1.0);
        let beta = linear_mlp2(1, 1, 1.0);
        let gamma = linear_mlp2(1, 1, 1.0);
        let out = p3dconv(&pts, &feats, &index, &alpha, &beta, &gamma, 1).unwrap();
        // point 0: gamma(alpha(1,0,0) * beta(3)) = 1 * 3 = 3
        // point 1: gamma(alpha(-1,0,0) * beta(2)) = -1 * 2 = -2
        assert!((out[(0, 0)] - 3.0).abs() < 1e-12);
        assert!((out[(1, 0)] - (-2.0)).abs() < 1e-12);
    }

    #[test]
    fn p3dconv_zero_features_give_zero_output() {
        let pts = random_cloud(20, 1);
        let index = SpatialIndex::build(&pts).unwrap();
        let feats = Array2::zeros((20, 4));
        // beta linear with zero bias maps zero to zero; the product kills alpha
        let mut alpha = Mlp2::init(&mut ChaCha8Rng::seed_from_u64(2), 3, 4, 4);
        let mut beta = Mlp2::init(&mut ChaCha8Rng::seed_from_u64(3), 4, 4, 4);
        let gamma = linear_mlp2(4, 4, 1.0);
        alpha.l1.b.fill(0.1);
        beta.l1.b.fill(0.0);
        beta.l2.b.fill(0.0);
        let out = p3dconv(&pts, &feats, &index, &alpha, &beta, &gamma, 4).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn p3dconv_permutation_equivariance() {
        let pts = random_cloud(30, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let feats = Array2::from_shape_fn((30, 8), |_| rng.gen_range(-1.0..1.0));
        let alpha = Mlp2::init(&mut ChaCha8Rng::seed_from_u64(6), 3, 8, 8);
        let beta = Mlp2::init(&mut ChaCha8Rng::seed_from_u64(7), 8, 8, 8);
        let gamma = Mlp2::init(&mut ChaCha8Rng::seed_from_u64(8), 8, 8, 8);
        let index = SpatialIndex::build(&pts).unwrap();
        let out = p3dconv(&pts, &feats, &index, &alpha, &beta, &gamma, 5).unwrap();

        // reverse the point order
        let perm: Vec<usize> = (0..30).rev().collect();
        let ppts = PointCloud::new(perm.iter().map(|&i| pts[i]).collect()).unwrap();
        let mut pfeats = Array2::zeros((30, 8));
        for (r, &i) in perm.iter().enumerate() {
            pfeats.row_mut(r).assign(&feats.row(i));
        }
        let pindex = SpatialIndex::build(&ppts).unwrap();
        let pout = p3dconv(&ppts, &pfeats, &pindex, &alpha, &beta, &gamma, 5).unwrap();
        for (r, &i) in perm.iter().enumerate() {
            for c in 0..8 {
                assert_eq!(pout[(r, c)], out[(i, c)], "row {r} col {c}");
            }
        }
    }

    #[test]
    fn extract_features_shapes_and_pooling() {
        let p_i = random_cloud(32, 9);
        let params = NetworkParams::init(NetConfig::default(), 0);
        let feats = extract_features(&p_i, &params, 16).unwrap();
        for l in &feats.locals {
            assert_eq!(l.dim(), (32, 32));
        }
        assert_eq!(feats.global.dim(), (1, 32));
        // global feature is the column-wise max of the last local scale
        for c in 0..32 {
            let m = (0..32)
                .map(|r| feats.locals[3][(r, c)])
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(feats.global[(0, c)], m);
        }
    }

    #[test]
    fn extract_features_duplicate_points_share_rows() {
        let mut pts = random_cloud(30, 10).points().to_vec();
        pts.push(pts[4]);
        let p_i = PointCloud::new(pts).unwrap();
        let params = NetworkParams::init(NetConfig { d: 8, k: 6, ..Default::default() }, 1);
        let feats = extract_features(&p_i, &params, 6).unwrap();
        for s in 0..4 {
            for c in 0..8 {
                assert_eq!(feats.locals[s][(4, c)], feats.locals[s][(30, c)]);
            }
        }
    }

    #[test]
    fn extractor_permutation_equivariance_exact() {
        let p_i = random_cloud(40, 11);
        let params = NetworkParams::init(NetConfig { d: 16, k: 8, ..Default::default() }, 2);
        let feats = extract_features(&p_i, &params, 8).unwrap();

        let perm: Vec<usize> = {
            // a fixed shuffle
            let mut v: Vec<usize> = (0..40).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            for i in (1..40).rev() {
                let j = rng.gen_range(0..=i);
                v.swap(i, j);
            }
            v
        };
        let ppts = PointCloud::new(perm.iter().map(|&i| p_i[i]).collect()).unwrap();
        let pfeats = extract_features(&ppts, &params, 8).unwrap();
        for s in 0..4 {
            for (r, &i) in perm.iter().enumerate() {
                for c in 0..16 {
                    assert_eq!(pfeats.locals[s][(r, c)], feats.locals[s][(i, c)]);
                }
            }
        }
        for c in 0..16 {
            assert_eq!(pfeats.global[(0, c)], feats.global[(0, c)]);
        }
        // forward at a fixed query is unchanged under anchor permutation
        let q = Point3::new(0.2, -0.1, 0.35);
        let f0 = forward(q, &feats, &params).unwrap();
        let f1 = forward(q, &pfeats, &params).unwrap();
        assert_eq!(f0, f1);
    }

    #[test]
    fn interpolate_features_line_example() {
        // anchors at x = 0, 1, 2 with scalar-like features 0, 1, 2
        let anchors = PointCloud::new(vec![
            Point3::ZERO,
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(2.0, 0.0, 0.0),
        ])
        .unwrap();
        let index = SpatialIndex::build(&anchors).unwrap();
        let mk = |v: &[f64]| Array2::from_shape_vec((3, 1), v.to_vec()).unwrap();
        let feats = ExtractedFeatures {
            anchors: anchors.clone(),
            index,
            locals: [
                mk(&[0.0, 1.0, 2.0]),
                mk(&[0.0, 1.0, 2.0]),
                mk(&[0.0, 1.0, 2.0]),
                mk(&[0.0, 1.0, 2.0]),
            ],
            global: Array2::zeros((1, 1)),
        };
        let out = interpolate_features(Point3::new(0.5, 0.0, 0.0), &feats).unwrap();
        // weights (2, 2, 2/3); value (0*2 + 1*2 + 2*(2/3)) / (14/3) = 5/7
        for s in 0..4 {
            assert!((out[s][0] - 5.0 / 7.0).abs() < 1e-12, "scale {s}: {}", out[s][0]);
        }
        // coincident query returns that anchor's features exactly
        let at = interpolate_features(Point3::new(1.0, 0.0, 0.0), &feats).unwrap();
        assert_eq!(at[0][0], 1.0);
    }

    #[test]
    fn interpolate_equal_distances_unweighted_mean() {
        // query equidistant from its three anchors
        let anchors = PointCloud::new(vec![
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(-0.5, 0.75f64.sqrt(), 0.0),
            Point3::new(-0.5, -(0.75f64.sqrt()), 0.0),
        ])
        .unwrap();
        let index = SpatialIndex::build(&anchors).unwrap();
        let mk = |v: &[f64]| Array2::from_shape_vec((3, 1), v.to_vec()).unwrap();
        let feats = ExtractedFeatures {
            anchors,
            index,
            locals: [mk(&[3.0, 5.0, 10.0]), mk(&[0.0; 3]), mk(&[0.0; 3]), mk(&[0.0; 3])],
            global: Array2::zeros((1, 1)),
        };
        let out = interpolate_features(Point3::ZERO, &feats).unwrap();
        assert!((out[0][0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn forward_nonnegative_and_batch_consistent() {
        let p_i = random_cloud(40, 13);
        let params = NetworkParams::init(NetConfig { d: 8, k: 6, ..Default::default() }, 3);
        let feats = extract_features(&p_i, &params, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let queries: Vec<Point3> = (0..50)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-1.2..1.2),
                    rng.gen_range(-1.2..1.2),
                    rng.gen_range(-1.2..1.2),
                )
            })
            .collect();
        let batch = forward_batch(&queries, &feats, &params).unwrap();
        for (i, q) in queries.iter().enumerate() {
            let single = forward(*q, &feats, &params).unwrap();
            assert!(single >= 0.0);
            assert_eq!(batch[(i, 0)], single, "query {i}");
        }
        // mixed batch including coincident queries agrees too
        let mixed = vec![p_i[3], queries[0], p_i[7], queries[1]];
        let mb = forward_batch(&mixed, &feats, &params).unwrap();
        for (i, q) in mixed.iter().enumerate() {
            assert_eq!(mb[(i, 0)], forward(*q, &feats, &params).unwrap(), "mixed {i}");
        }
    }

    fn fd_query_grad(
        q: Point3,
        feats: &ExtractedFeatures,
        params: &NetworkParams,
        h: f64,
    ) -> Point3 {
        let f = |p: Point3| forward(p, feats, params).unwrap();
        Point3::new(
            (f(Point3::new(q.x + h, q.y, q.z)) - f(Point3::new(q.x - h, q.y, q.z))) / (2.0 * h),
            (f(Point3::new(q.x, q.y + h, q.z)) - f(Point3::new(q.x, q.y - h, q.z))) / (2.0 * h),
            (f(Point3::new(q.x, q.y, q.z + h)) - f(Point3::new(q.x, q.y, q.z - h))) / (2.0 * h),
        )
    }

    #[test]
    fn grad_query_matches_finite_differences() {
        let p_i = random_cloud(60, 15);
        let params = NetworkParams::init(NetConfig { d: 8, k: 6, ..Default::default() }, 4);
        let feats = extract_features(&p_i, &params, 6).unwrap();
        let index = SpatialIndex::build(&p_i).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let h = 1e-6;
        let mut tested = 0;
        while tested < 20 {
            let q = Point3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            // stay away from 3-NN switch boundaries: the 3rd and 4th nearest
            // anchors must be clearly separated
            let nn = index.knn(q, 4, false).unwrap();
            if nn[3].1 - nn[2].1 < 1e-3 || nn[0].1 < 1e-3 {
                continue;
            }
            let an = grad_query(q, &feats, &params).unwrap();
            let fd = fd_query_grad(q, &feats, &params, h);
            let denom = an.norm().max(1e-8);
            assert!(
                fd.sub(an).norm() / denom < 1e-6,
                "fd {fd:?} vs analytic {an:?}"
            );
            tested += 1;
        }
    }

    #[test]
    fn grad_query_zero_for_constant_network() {
        let p_i = random_cloud(30, 17);
        let mut params = NetworkParams::init(NetConfig { d: 8, k: 6, ..Default::default() }, 5);
        // zero final layer: output is softplus(bias), independent of input
        params.regressor[3].w.fill(0.0);
        params.regressor[3].b.fill(0.3);
        let feats = extract_features(&p_i, &params, 6).unwrap();
        let g = grad_query(Point3::new(0.1, 0.2, 0.3), &feats, &params).unwrap();
        assert_eq!(g, Point3::ZERO);
    }

    #[test]
    fn grad_params_finite_difference_slice() {
        let p_i = random_cloud(24, 18);
        let params = NetworkParams::init(NetConfig { d: 4, k: 5, ..Default::default() }, 6);
        let feats = extract_features(&p_i, &params, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let queries: Vec<Point3> = (0..12)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        let targets: Vec<f64> = (0..12).map(|_| rng.gen_range(0.1..0.9)).collect();
        let (_, grads) = grad_params(&queries, &targets, &feats, &params).unwrap();

        // probe a scattered slice of parameters with central differences
        let names: Vec<String> = {
            let mut v = Vec::new();
            params.visit(|n, _| v.push(n));
            v
        };
        let h = 1e-6;
        let mut probed = 0;
        for (ti, name) in names.iter().enumerate() {
            if ti % 7 != 0 {
                continue;
            }
            let (r, c) = (0usize, 0usize);
            let mut eval = |delta: f64| -> f64 {
                let mut p2 = params.clone();
                let mut i = 0;
                p2.visit_mut(|_, t| {
                    if i == ti {
                        t[(r, c)] += delta;
                    }
                    i += 1;
                });
                let f2 = extract_features(&p_i, &p2, 5).unwrap();
                let out = forward_batch(&queries, &f2, &p2).unwrap();
                let mut loss = 0.0;
                for (qi, t) in targets.iter().enumerate() {
                    loss += (out[(qi, 0)] - t).abs();
                }
                loss / targets.len() as f64
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = grads[ti][(r, c)];
            assert!(
                (fd - an).abs() <= 1e-4 * (1.0 + an.abs()),
                "{name}: fd {fd} vs analytic {an}"
            );
            probed += 1;
        }
        assert!(probed >= 10, "probed {probed} tensors");
    }

    #[test]
    fn grad_params_zero_residual_gives_zero_grads() {
        let p_i = random_cloud(24, 20);
        let params = NetworkParams::init(NetConfig { d: 4, k: 5, ..Default::default() }, 7);
        let feats = extract_features(&p_i, &params, 5).unwrap();
        let queries: Vec<Point3> = p_i.points()[..6].to_vec();
        let out = forward_batch(&queries, &feats, &params).unwrap();
        let targets: Vec<f64> = (0..6).map(|i| out[(i, 0)]).collect();
        let (loss, grads) = grad_params(&queries, &targets, &feats, &params).unwrap();
        assert_eq!(loss, 0.0);
        for g in grads {
            assert!(g.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn grad_params_duplicated_batch_unchanged() {
        let p_i = random_cloud(24, 21);
        let params = NetworkParams::init(NetConfig { d: 4, k: 5, ..Default::default() }, 8);
        let feats = extract_features(&p_i, &params, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let queries: Vec<Point3> = (0..8)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        let targets: Vec<f64> = (0..8).map(|_| rng.gen_range(0.1..0.9)).collect();
        let (l1, g1) = grad_params(&queries, &targets, &feats, &params).unwrap();
        let mut q2 = queries.clone();
        q2.extend_from_slice(&queries);
        let mut t2 = targets.clone();
        t2.extend_from_slice(&targets);
        let (l2, g2) = grad_params(&q2, &t2, &feats, &params).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(g2.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ck");
        let params = NetworkParams::init(NetConfig::default(), 33);
        save_params(&params, &path).unwrap();
        let loaded = load_params(&path).unwrap();
        assert_eq!(params, loaded);
    }

    #[test]
    fn checkpoint_truncation_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ck");
        let params = NetworkParams::init(NetConfig { d: 4, k: 3, ..Default::default() }, 1);
        save_params(&params, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(
            load_params(&path),
            Err(Error::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn checkpoint_width_mismatch_names_layer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ck");
        let params = NetworkParams::init(NetConfig { d: 4, k: 3, ..Default::default() }, 1);
        save_params(&params, &path).unwrap();
        // tamper the declared width and re-stamp the checksum so only the
        // shape validation can catch the inconsistency
        let mut bytes = std::fs::read(&path).unwrap();
        let body_len = bytes.len() - 32;
        bytes[8..12].copy_from_slice(&8u32.to_le_bytes());
        let digest = Sha256::digest(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&digest);
        std::fs::write(&path, &bytes).unwrap();
        match load_params(&path) {
            Err(Error::ShapeMismatch { name, .. }) => {
                assert_eq!(name, "initial.w");
            }
            other => panic!("expected ShapeMismatch, got {other:?}"),
        }
    }

    #[test]
    fn frozen_probe_fixes_features() {
        let p_i = random_cloud(40, 23);
        let params = NetworkParams::init(NetConfig { d: 8, k: 6, ..Default::default() }, 9);
        let field = LearnedField::new(&params, &p_i).unwrap();
        let p0 = p_i[5];
        let probe = crate::field::DistanceField::frozen_probe(&field, p0).unwrap();
        // at the anchor itself, frozen probe and refreshed field agree
        let v_probe = probe.value(p0);
        let v_field = crate::field::DistanceField::value(&field, p0);
        assert!((v_probe - v_field).abs() < 1e-12);
        // away from the anchor they generally differ: frozen keeps l_p fixed
        let q = p0.add(Point3::new(0.21, -0.13, 0.08));
        let dv = (probe.value(q) - crate::field::DistanceField::value(&field, q)).abs();
        assert!(dv > 0.0, "expected frozen and refreshed paths to diverge");
    }
}
