//! Linear and one-hidden-layer models with hand-derived gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{Layer, LayerShape, ParamVector};
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, softmax, Scalar};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    /// One ReLU hidden layer.
    Mlp1 { hidden: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    SoftmaxCe,
    SigmoidBce,
    IdentityMse,
}

/// Architecture description. The parameter layout is a pure function of this value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub head: Head,
    /// When false the bias layers are omitted entirely.
    #[serde(default = "default_true")]
    pub bias: bool,
}

fn default_true() -> bool {
    true
}

/// Owned training target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Target<T> {
    Class(usize),
    Bits(Vec<T>),
    Real(Vec<T>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TargetRef<'a, T> {
    Class(usize),
    Bits(&'a [T]),
    Real(&'a [T]),
}

impl<T> Target<T> {
    pub fn as_ref(&self) -> TargetRef<'_, T> {
        match self {
            Target::Class(c) => TargetRef::Class(*c),
            Target::Bits(b) => TargetRef::Bits(b),
            Target::Real(r) => TargetRef::Real(r),
        }
    }
}

/// Anything that can be fed to a model: a feature vector plus a target.
pub trait Sample<T> {
    fn features(&self) -> &[T];
    fn target(&self) -> TargetRef<'_, T>;
}

/// A plain owned `(x, y)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Labeled<T> {
    pub x: Vec<T>,
    pub y: Target<T>,
}

impl<T> Labeled<T> {
    pub fn new(x: Vec<T>, y: Target<T>) -> Self {
        Labeled { x, y }
    }
}

impl<T> Sample<T> for Labeled<T> {
    fn features(&self) -> &[T] {
        &self.x
    }
    fn target(&self) -> TargetRef<'_, T> {
        self.y.as_ref()
    }
}

impl<T, S: Sample<T>> Sample<T> for &S {
    fn features(&self) -> &[T] {
        (*self).features()
    }
    fn target(&self) -> TargetRef<'_, T> {
        (*self).target()
    }
}

/// Borrowed view of the parameters in their fixed order.
struct Parts<'a, T> {
    w1: &'a [T],
    b1: Option<&'a [T]>,
    w2: Option<&'a [T]>,
    b2: Option<&'a [T]>,
}

/// Intermediate values kept for backpropagation.
struct Activations<T> {
    pre: Vec<T>,
    hidden: Vec<T>,
    logits: Vec<T>,
}

impl ModelSpec {
    pub fn linear(input_dim: usize, output_dim: usize, head: Head) -> Self {
        ModelSpec {
            kind: ModelKind::Linear,
            input_dim,
            output_dim,
            head,
            bias: true,
        }
    }

    pub fn mlp1(input_dim: usize, hidden: usize, output_dim: usize, head: Head) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp1 { hidden },
            input_dim,
            output_dim,
            head,
            bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if let ModelKind::Mlp1 { hidden: 0 } = self.kind {
            return Err(Error::invalid("hidden width must be positive"));
        }
        Ok(())
    }

    /// Layer names and shapes: `[w, b]` for linear, `[w1, b1, w2, b2]` for mlp1.
    pub fn layout(&self) -> Vec<LayerShape> {
        let shape = |name: &str, shape: Vec<usize>| LayerShape {
            name: name.to_owned(),
            shape,
        };
        let mut out = Vec::new();
        match self.kind {
            ModelKind::Linear => {
                out.push(shape("w", vec![self.output_dim, self.input_dim]));
                if self.bias {
                    out.push(shape("b", vec![self.output_dim]));
                }
            }
            ModelKind::Mlp1 { hidden } => {
                out.push(shape("w1", vec![hidden, self.input_dim]));
                if self.bias {
                    out.push(shape("b1", vec![hidden]));
                }
                out.push(shape("w2", vec![self.output_dim, hidden]));
                if self.bias {
                    out.push(shape("b2", vec![self.output_dim]));
                }
            }
        }
        out
    }

    /// Name of the last weight matrix, the layer attacks use by default.
    pub fn final_weight_layer(&self) -> &'static str {
        match self.kind {
            ModelKind::Linear => "w",
            ModelKind::Mlp1 { .. } => "w2",
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamVector<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = self
            .layout()
            .into_iter()
            .map(|l| {
                let values = if l.shape.len() == 2 {
                    let limit = (6.0 / (l.shape[0] + l.shape[1]) as f64).sqrt();
                    (0..l.len())
                        .map(|_| T::lit(rng.random_range(-limit..=limit)))
                        .collect()
                } else {
                    vec![T::zero(); l.len()]
                };
                Layer {
                    name: l.name,
                    shape: l.shape,
                    values,
                }
            })
            .collect();
        ParamVector::new(layers).expect("layout from spec is consistent")
    }

    fn parts<'a, T: Scalar>(&self, params: &'a ParamVector<T>) -> Result<Parts<'a, T>> {
        let layout = self.layout();
        if params.layout() != layout {
            return Err(Error::LayoutMismatch(format!(
                "params {:?} do not match model layout {:?}",
                params.layout(),
                layout
            )));
        }
        let l = params.layers();
        let vals = |i: usize| l[i].values.as_slice();
        Ok(match (self.kind, self.bias) {
            (ModelKind::Linear, true) => Parts {
                w1: vals(0),
                b1: Some(vals(1)),
                w2: None,
                b2: None,
            },
            (ModelKind::Linear, false) => Parts {
                w1: vals(0),
                b1: None,
                w2: None,
                b2: None,
            },
            (ModelKind::Mlp1 { .. }, true) => Parts {
                w1: vals(0),
                b1: Some(vals(1)),
                w2: Some(vals(2)),
                b2: Some(vals(3)),
            },
            (ModelKind::Mlp1 { .. }, false) => Parts {
                w1: vals(0),
                b1: None,
                w2: Some(vals(1)),
                b2: None,
            },
        })
    }

    fn check_input<T>(&self, x: &[T]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn activations<T: Scalar>(&self, p: &Parts<'_, T>, x: &[T]) -> Activations<T> {
        match self.kind {
            ModelKind::Linear => Activations {
                pre: Vec::new(),
                hidden: Vec::new(),
                logits: affine(p.w1, p.b1, x, self.output_dim),
            },
            ModelKind::Mlp1 { hidden } => {
                let pre = affine(p.w1, p.b1, x, hidden);
                let h: Vec<T> = pre.iter().map(|&v| v.max(T::zero())).collect();
                let logits = affine(p.w2.expect("mlp1 has w2"), p.b2, &h, self.output_dim);
                Activations {
                    pre,
                    hidden: h,
                    logits,
                }
            }
        }
    }

    /// Pre-head scores (logits) for one input.
    pub fn forward<T: Scalar>(&self, params: &ParamVector<T>, x: &[T]) -> Result<Vec<T>> {
        self.check_input(x)?;
        let parts = self.parts(params)?;
        Ok(self.activations(&parts, x).logits)
    }

    /// Head-applied output: softmax probabilities, sigmoid probabilities or raw values.
    pub fn predict<T: Scalar>(&self, params: &ParamVector<T>, x: &[T]) -> Result<Vec<T>> {
        let logits = self.forward(params, x)?;
        Ok(match self.head {
            Head::SoftmaxCe => softmax(&logits),
            Head::SigmoidBce => logits.into_iter().map(sigmoid).collect(),
            Head::IdentityMse => logits,
        })
    }

    fn check_target<T: Scalar>(&self, y: TargetRef<'_, T>) -> Result<()> {
        match (self.head, y) {
            (Head::SoftmaxCe, TargetRef::Class(c)) if c < self.output_dim => Ok(()),
            (Head::SigmoidBce, TargetRef::Bits(b)) if b.len() == self.output_dim => {
                if b.iter().all(|&v| v == T::zero() || v == T::one()) {
                    Ok(())
                } else {
                    Err(Error::TargetMismatch("bit target must be 0 or 1".into()))
                }
            }
            (Head::IdentityMse, TargetRef::Real(r)) if r.len() == self.output_dim => Ok(()),
            (head, y) => Err(Error::TargetMismatch(format!(
                "{head:?} head with output_dim {} cannot take {}",
                self.output_dim,
                describe_target(y)
            ))),
        }
    }

    fn example_loss<T: Scalar>(&self, logits: &[T], y: TargetRef<'_, T>) -> T {
        let eps = T::lit(PROB_EPS);
        let clamp = |p: T| p.max(eps).min(T::one() - eps);
        match (self.head, y) {
            (Head::SoftmaxCe, TargetRef::Class(c)) => -clamp(softmax(logits)[c]).ln(),
            (Head::SigmoidBce, TargetRef::Bits(bits)) => {
                let total: T = logits
                    .iter()
                    .zip(bits)
                    .map(|(&z, &b)| {
                        let p = clamp(sigmoid(z));
                        -(b * p.ln() + (T::one() - b) * (T::one() - p).ln())
                    })
                    .sum();
                total / T::from_usize_lossy(logits.len())
            }
            (Head::IdentityMse, TargetRef::Real(r)) => {
                let sq: T = logits.iter().zip(r).map(|(&z, &t)| (z - t) * (z - t)).sum();
                T::lit(0.5) * sq
            }
            _ => unreachable!("target validated before use"),
        }
    }

    /// Derivative of the per-example loss with respect to the logits.
    fn logit_grad<T: Scalar>(&self, logits: &[T], y: TargetRef<'_, T>) -> Vec<T> {
        match (self.head, y) {
            (Head::SoftmaxCe, TargetRef::Class(c)) => {
                let mut g = softmax(logits);
                g[c] -= T::one();
                g
            }
            (Head::SigmoidBce, TargetRef::Bits(bits)) => {
                let k = T::from_usize_lossy(logits.len());
                logits
                    .iter()
                    .zip(bits)
                    .map(|(&z, &b)| (sigmoid(z) - b) / k)
                    .collect()
            }
            (Head::IdentityMse, TargetRef::Real(r)) => {
                logits.iter().zip(r).map(|(&z, &t)| z - t).collect()
            }
            _ => unreachable!("target validated before use"),
        }
    }

    /// Mean per-example loss over a non-empty batch.
    pub fn loss<T: Scalar, S: Sample<T>>(&self, params: &ParamVector<T>, batch: &[S]) -> Result<T> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let parts = self.parts(params)?;
        let mut total = T::zero();
        for s in batch {
            self.check_input(s.features())?;
            self.check_target(s.target())?;
            let act = self.activations(&parts, s.features());
            total += self.example_loss(&act.logits, s.target());
        }
        Ok(total / T::from_usize_lossy(batch.len()))
    }

    /// Gradient of [`ModelSpec::loss`] with the same layout as `params`.
    pub fn gradient<T: Scalar, S: Sample<T>>(
        &self,
        params: &ParamVector<T>,
        batch: &[S],
    ) -> Result<ParamVector<T>> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let parts = self.parts(params)?;
        let mut grad = params.zeros_like();
        {
            let mut slots = grad.layers_mut().iter_mut();
            let gw1 = &mut slots.next().expect("w layer").values;
            let mut gb1 = if self.bias {
                Some(&mut slots.next().expect("b layer").values)
            } else {
                None
            };
            let mut gw2 = slots.next().map(|l| &mut l.values);
            let mut gb2 = slots.next().map(|l| &mut l.values);

            for s in batch {
                let x = s.features();
                self.check_input(x)?;
                self.check_target(s.target())?;
                let act = self.activations(&parts, x);
                let dz = self.logit_grad(&act.logits, s.target());
                match self.kind {
                    ModelKind::Linear => {
                        outer_acc(gw1, &dz, x);
                        if let Some(gb) = gb1.as_deref_mut() {
                            acc(gb, &dz);
                        }
                    }
                    ModelKind::Mlp1 { hidden } => {
                        let w2 = parts.w2.expect("mlp1 has w2");
                        outer_acc(gw2.as_deref_mut().expect("w2 grad"), &dz, &act.hidden);
                        if let Some(gb) = gb2.as_deref_mut() {
                            acc(gb, &dz);
                        }
                        let mut dh = vec![T::zero(); hidden];
                        for (o, &d) in dz.iter().enumerate() {
                            let row = &w2[o * hidden..(o + 1) * hidden];
                            for (dhj, &w) in dh.iter_mut().zip(row) {
                                *dhj += w * d;
                            }
                        }
                        for (dhj, &pre) in dh.iter_mut().zip(&act.pre) {
                            if pre <= T::zero() {
                                *dhj = T::zero();
                            }
                        }
                        outer_acc(gw1, &dh, x);
                        if let Some(gb) = gb1.as_deref_mut() {
                            acc(gb, &dh);
                        }
                    }
                }
            }
        }
        let inv = T::one() / T::from_usize_lossy(batch.len());
        grad.iter_mut().for_each(|g| *g *= inv);
        Ok(grad)
    }
}

fn describe_target<T>(y: TargetRef<'_, T>) -> String {
    match y {
        TargetRef::Class(c) => format!("class index {c}"),
        TargetRef::Bits(b) => format!("bit vector of length {}", b.len()),
        TargetRef::Real(r) => format!("real vector of length {}", r.len()),
    }
}

/// `W x + b` for row-major `W` with `out` rows.
pub(crate) fn affine<T: Scalar>(w: &[T], b: Option<&[T]>, x: &[T], out: usize) -> Vec<T> {
    let n = x.len();
    (0..out)
        .map(|o| {
            let row = &w[o * n..(o + 1) * n];
            let z = row.iter().zip(x).fold(T::zero(), |s, (&a, &v)| s + a * v);
            match b {
                Some(b) => z + b[o],
                None => z,
            }
        })
        .collect()
}

/// `G += d xᵀ` for row-major `G`.
pub(crate) fn outer_acc<T: Scalar>(g: &mut [T], d: &[T], x: &[T]) {
    let n = x.len();
    for (o, &dv) in d.iter().enumerate() {
        if dv == T::zero() {
            continue;
        }
        for (gv, &xv) in g[o * n..(o + 1) * n].iter_mut().zip(x) {
            *gv += dv * xv;
        }
    }
}

pub(crate) fn acc<T: Scalar>(g: &mut [T], d: &[T]) {
    for (gv, &dv) in g.iter_mut().zip(d) {
        *gv += dv;
    }
}
