//! Feed-forward embedders and heads, and the transport-head target predictor
//! `p_tau(z'|u) = sum_z p_s(z|u) * Lambda_u(z'|z)`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numgrad::{Gradients, Matrix, Tape, Var};

/// Default width of the shared representation space.
pub const FEATURE_DIM: usize = 8;
/// Default hidden widths of an embedder.
pub const EMBEDDER_HIDDEN: [usize; 2] = [32, 32];
/// Default hidden widths of a source head.
pub const HEAD_HIDDEN: [usize; 1] = [16];
/// Logit added on the diagonal of a square transport kernel at initialization.
pub const KERNEL_DIAGONAL_BOOST: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `a` and output `y`.
    pub(crate) fn derivative(self, a: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn record(self, tape: &mut Tape, a: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(a),
            Activation::Tanh => tape.tanh(a),
            Activation::Relu => tape.relu(a),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    SourceEmbedder,
    SourceHead,
    TargetEmbedder,
    TransportHead,
}

/// One affine layer `y = act(x W + b)` acting on row vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub w: Matrix,
    pub b: Matrix,
    pub act: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.cols()
    }

    pub(crate) fn pre_activation(&self, x: &Matrix) -> Result<Matrix> {
        x.matmul(&self.w)?.add_row(&self.b)
    }

    pub(crate) fn activate(&self, a: &Matrix) -> Matrix {
        let act = self.act;
        a.map(|v| act.apply(v))
    }
}

/// Weights of a small feed-forward network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "Checkpoint", try_from = "Checkpoint")]
pub struct MlpParams {
    layers: Vec<Layer>,
    role: Role,
}

/// Tape handles of one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub w: Var,
    pub b: Var,
}

/// Gradients for every layer, in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<(Matrix, Matrix)>,
}

impl MlpGrads {
    pub fn collect(grads: &Gradients, vars: &[LayerVars]) -> Self {
        Self {
            layers: vars.iter().map(|lv| (grads.get(lv.w), grads.get(lv.b))).collect(),
        }
    }

    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| {
                    (
                        Matrix::zeros(l.w.rows(), l.w.cols()),
                        Matrix::zeros(1, l.b.cols()),
                    )
                })
                .collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|(w, b)| {
                w.as_slice().iter().chain(b.as_slice()).map(|v| v * v).sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|(w, b)| (w.scale(c), b.scale(c)))
                .collect(),
        }
    }

    pub fn add(&self, other: &MlpGrads) -> Result<Self> {
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|((w1, b1), (w2, b2))| Ok((w1.add(w2)?, b1.add(b2)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    /// Flattens every gradient entry in layer order (w then b).
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.as_slice().iter().chain(b.as_slice()).copied())
            .collect()
    }
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>, role: Role) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.b.rows() != 1 || l.b.cols() != l.w.cols() {
                return Err(Error::dim(
                    "layer",
                    format!("layer {i}: bias {:?} for weights {:?}", l.b.shape(), l.w.shape()),
                ));
            }
            if i > 0 && layers[i - 1].output_dim() != l.input_dim() {
                return Err(Error::dim(
                    "layer",
                    format!(
                        "layer {i} takes {} inputs but layer {} emits {}",
                        l.input_dim(),
                        i - 1,
                        layers[i - 1].output_dim()
                    ),
                ));
            }
            if !l.w.is_finite() || !l.b.is_finite() {
                return Err(Error::invalid(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(Self { layers, role })
    }

    /// Glorot-uniform weights and zero biases. `dims` lists every width from
    /// input to output.
    pub fn random(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        role: Role,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "need input and output widths");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fin, fout) = (dims[i], dims[i + 1]);
                let lim = (6.0 / (fin + fout) as f64).sqrt();
                Layer {
                    w: Matrix::from_fn(fin, fout, |_, _| rng.random_range(-lim..lim)),
                    b: Matrix::zeros(1, fout),
                    act: if i + 1 == n { output } else { hidden },
                }
            })
            .collect();
        Self { layers, role }
    }

    /// Embedder with the default tanh hidden stack and a linear output.
    pub fn embedder(input_dim: usize, role: Role, rng: &mut impl Rng) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(&EMBEDDER_HIDDEN);
        dims.push(FEATURE_DIM);
        Self::random(&dims, Activation::Tanh, Activation::Identity, role, rng)
    }

    /// Source head producing logits over `classes`.
    pub fn head(feature_dim: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let mut dims = vec![feature_dim];
        dims.extend_from_slice(&HEAD_HIDDEN);
        dims.push(classes);
        Self::random(&dims, Activation::Tanh, Activation::Identity, Role::SourceHead, rng)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::dim(
                "embed",
                format!(
                    "input has {} columns, network expects {}",
                    x.cols(),
                    self.input_dim()
                ),
            ));
        }
        Ok(())
    }

    /// Plain evaluation on a batch of rows.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut h = x.clone();
        for l in &self.layers {
            h = l.activate(&l.pre_activation(&h)?);
        }
        Ok(h)
    }

    /// Records the network on `tape`, registering every parameter as a leaf.
    pub fn record(&self, tape: &mut Tape, x: Var) -> Result<(Var, Vec<LayerVars>)> {
        self.check_input(tape.value(x))?;
        let mut h = x;
        let mut vars = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let w = tape.leaf(l.w.clone());
            let b = tape.leaf(l.b.clone());
            let a = tape.matmul(h, w)?;
            let a = tape.add(a, b)?;
            h = l.act.record(tape, a)?;
            vars.push(LayerVars { w, b });
        }
        Ok((h, vars))
    }

    /// Gradient step `theta - lr * grad`; returns a new snapshot.
    pub fn apply_gradients(&self, grads: &MlpGrads, lr: f64) -> Result<Self> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::dim(
                "apply_gradients",
                format!("{} gradient layers for {} layers", grads.layers.len(), self.layers.len()),
            ));
        }
        let layers = self
            .layers
            .iter()
            .zip(&grads.layers)
            .map(|(l, (gw, gb))| {
                Ok(Layer {
                    w: l.w.sub(&gw.scale(lr))?,
                    b: l.b.sub(&gb.scale(lr))?,
                    act: l.act,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers, self.role)
    }

    /// Replaces the last layer's parameters.
    pub fn with_last_layer(&self, w: Matrix, b: Matrix) -> Result<Self> {
        let mut layers = self.layers.clone();
        let last = layers.last_mut().expect("non-empty");
        last.w = w;
        last.b = b;
        Self::new(layers, self.role)
    }
}

/// `u = theta(x)` or `u = phi(x')`.
pub fn embed(params: &MlpParams, x: &Matrix) -> Result<Matrix> {
    params.forward(x)
}

/// `p_s(z|u)` for every row of `u`.
pub fn predict_source(head: &MlpParams, u: &Matrix) -> Result<Matrix> {
    if u.cols() != head.input_dim() {
        return Err(Error::dim(
            "predict_source",
            format!("features have {} columns, head expects {}", u.cols(), head.input_dim()),
        ));
    }
    Ok(head.forward(u)?.softmax_rows())
}

/// Learnable kernel `Lambda_u(z'|z; psi)`: a network over `[u, onehot(z)]`
/// whose softmax output is a distribution over target labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportHeadParams {
    pub mlp: MlpParams,
    pub source_classes: usize,
    pub target_classes: usize,
}

impl TransportHeadParams {
    pub fn new(mlp: MlpParams, source_classes: usize, target_classes: usize) -> Result<Self> {
        if mlp.input_dim() <= source_classes {
            return Err(Error::dim(
                "transport_head",
                format!(
                    "input width {} leaves no room for features next to {} one-hot columns",
                    mlp.input_dim(),
                    source_classes
                ),
            ));
        }
        if mlp.output_dim() != target_classes {
            return Err(Error::dim(
                "transport_head",
                format!("{} outputs for {} target classes", mlp.output_dim(), target_classes),
            ));
        }
        Ok(Self {
            mlp: mlp.with_role(Role::TransportHead),
            source_classes,
            target_classes,
        })
    }

    /// Affine kernel with zero feature weights. For a square label space the
    /// one-hot block carries a diagonal logit boost so that `Lambda` starts
    /// near the identity; otherwise it starts uniform.
    pub fn init(feature_dim: usize, source_classes: usize, target_classes: usize) -> Self {
        let w = Matrix::from_fn(feature_dim + source_classes, target_classes, |i, j| {
            if source_classes == target_classes && i >= feature_dim && i - feature_dim == j {
                KERNEL_DIAGONAL_BOOST
            } else {
                0.0
            }
        });
        let layer = Layer {
            w,
            b: Matrix::zeros(1, target_classes),
            act: Activation::Identity,
        };
        Self {
            mlp: MlpParams {
                layers: vec![layer],
                role: Role::TransportHead,
            },
            source_classes,
            target_classes,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.mlp.input_dim() - self.source_classes
    }

    /// Rows `[u_i, e_z]` ordered by point, then source class.
    pub fn kernel_inputs(&self, u: &Matrix) -> Result<Matrix> {
        if u.cols() != self.feature_dim() {
            return Err(Error::dim(
                "transport_head",
                format!("features have {} columns, kernel expects {}", u.cols(), self.feature_dim()),
            ));
        }
        let k = self.source_classes;
        let idx: Vec<usize> = (0..u.rows()).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        let onehot = Matrix::from_fn(u.rows() * k, k, |r, c| if r % k == c { 1.0 } else { 0.0 });
        u.select_rows(&idx).hstack(&onehot)
    }

    /// `Lambda_u(.|z)` for every point and source class: an (n*K) x K'
    /// row-stochastic matrix.
    pub fn kernel(&self, u: &Matrix) -> Result<Matrix> {
        Ok(self.mlp.forward(&self.kernel_inputs(u)?)?.softmax_rows())
    }

    /// Kernel of one point as a K x K' matrix.
    pub fn kernel_at(&self, u_row: &[f64]) -> Result<Matrix> {
        self.kernel(&Matrix::row_vector(u_row))
    }

    /// Records `Lambda` on the tape from a features node.
    pub fn record(&self, tape: &mut Tape, u: Var) -> Result<(Var, Vec<LayerVars>)> {
        let k = self.source_classes;
        let n = tape.value(u).rows();
        if tape.value(u).cols() != self.feature_dim() {
            return Err(Error::dim(
                "transport_head",
                format!(
                    "features have {} columns, kernel expects {}",
                    tape.value(u).cols(),
                    self.feature_dim()
                ),
            ));
        }
        let rep = tape.repeat_rows(u, k)?;
        let onehot = tape.leaf(Matrix::from_fn(n * k, k, |r, c| if r % k == c { 1.0 } else { 0.0 }));
        let input = tape.concat(rep, onehot)?;
        let (logits, vars) = self.mlp.record(tape, input)?;
        Ok((tape.softmax(logits)?, vars))
    }
}

/// `p_tau(z'|u) = sum_z p_s(z|u) Lambda_u(z'|z)` for every row of `u`.
pub fn predict_target(
    source_head: &MlpParams,
    kernel: &TransportHeadParams,
    u: &Matrix,
) -> Result<Matrix> {
    let ps = predict_source(source_head, u)?;
    if ps.cols() != kernel.source_classes {
        return Err(Error::dim(
            "predict_target",
            format!(
                "source head emits {} classes, kernel expects {}",
                ps.cols(),
                kernel.source_classes
            ),
        ));
    }
    let lam = kernel.kernel(u)?;
    let (n, k) = ps.shape();
    let m = kernel.target_classes;
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        for z in 0..k {
            let w = ps.get(i, z);
            for (o, &l) in out.row_mut(i).iter_mut().zip(lam.row(i * k + z)) {
                *o += w * l;
            }
        }
    }
    Ok(out)
}

/// Stage-2 objective `-(1/n) sum_i ln p_tau(z'_i|u_i)`.
pub fn stage2_nll(source_head: &MlpParams, kernel: &TransportHeadParams, u: &Matrix, labels: &[usize]) -> Result<f64> {
    let p = predict_target(source_head, kernel, u)?;
    check_labels(&p, labels)?;
    Ok(-labels
        .iter()
        .enumerate()
        .map(|(i, &l)| p.get(i, l).max(crate::infotheory::LOG_FLOOR).ln())
        .sum::<f64>()
        / labels.len() as f64)
}

/// [`stage2_nll`] with its gradient for the kernel parameters; the source
/// head enters as a constant.
pub fn stage2_nll_and_grad(
    source_head: &MlpParams,
    kernel: &TransportHeadParams,
    u: &Matrix,
    labels: &[usize],
) -> Result<(f64, MlpGrads)> {
    let ps = predict_source(source_head, u)?;
    check_labels(&ps, labels)?;
    let mut tape = Tape::new();
    let uv = tape.leaf(u.clone());
    let (lam, vars) = kernel.record(&mut tape, uv)?;
    let w = tape.leaf(ps);
    let p = tape.mix(w, lam)?;
    let lp = tape.log(p)?;
    let y = tape.leaf(Matrix::one_hot(labels, kernel.target_classes)?);
    let picked = tape.mul(lp, y)?;
    let total = tape.sum(picked)?;
    let loss = tape.scale(total, -1.0 / labels.len().max(1) as f64)?;
    let grads = MlpGrads::collect(&tape.backward(loss)?, &vars);
    Ok((tape.value(loss).item(), grads))
}

fn check_labels(p: &Matrix, labels: &[usize]) -> Result<()> {
    if labels.len() != p.rows() {
        return Err(Error::dim("stage2_nll", format!("{} labels for {} points", labels.len(), p.rows())));
    }
    if labels.is_empty() {
        return Err(Error::invalid("stage-2 objective needs at least one labeled point"));
    }
    Ok(())
}

// JSON checkpoint layout:
// {"layers": [{"w": [[..]], "b": [..], "act": "tanh"}], "meta": {"role": ".."}}
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    layers: Vec<LayerJson>,
    meta: Meta,
}

#[derive(Serialize, Deserialize)]
struct LayerJson {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
    act: Activation,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    role: Role,
    #[serde(flatten, default)]
    extra: BTreeMap<String, serde_json::Value>,
}

impl From<MlpParams> for Checkpoint {
    fn from(p: MlpParams) -> Self {
        Checkpoint {
            layers: p
                .layers
                .iter()
                .map(|l| LayerJson {
                    w: l.w.to_rows(),
                    b: l.b.as_slice().to_vec(),
                    act: l.act,
                })
                .collect(),
            meta: Meta {
                role: p.role,
                extra: BTreeMap::new(),
            },
        }
    }
}

impl TryFrom<Checkpoint> for MlpParams {
    type Error = Error;

    fn try_from(c: Checkpoint) -> Result<Self> {
        let layers = c
            .layers
            .into_iter()
            .map(|l| {
                Ok(Layer {
                    w: Matrix::from_rows(&l.w)?,
                    b: Matrix::row_vector(&l.b),
                    act: l.act,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        MlpParams::new(layers, c.meta.role)
    }
}
