//! Dense backbone with orthogonal projection layers at declared slots.
//!
//! A network is a stack of dense stages. Slot `l` (1-based) is the point
//! right after dense stage `l`; a projection layer placed there removes
//! the span of its basis `Q` from every row: `F_proj = F - (F Q) Q^T`.
//! Placements are written `G<m>O<n>`: `m` guided layers after stages
//! `1..=m`, then `n` plain layers after the following stages.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Activation, Eager, Graph};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// Plain (`OPL`) or attribute-guided (`G-OPL`) projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ProjectionKind {
    #[cfg_attr(feature = "serde", serde(rename = "opl"))]
    Opl,
    #[cfg_attr(feature = "serde", serde(rename = "gopl"))]
    GuidedOpl,
}

/// How the basis `Q` is parameterized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum BasisMode {
    /// `W` (k x d) is learned; `Q` is the thin-QR factor of `W^T` each forward.
    #[default]
    RecomputeQr,
    /// `Q` (d x k) is learned as-is; orthonormality is only regularized.
    DirectQ,
}

/// Parsed `G<m>O<n>` placement string.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Placement {
    pub guided: usize,
    pub plain: usize,
}

impl Placement {
    pub fn total(&self) -> usize {
        self.guided + self.plain
    }

    /// Projection kind at each of `depth` slots (index 0 is slot 1).
    pub fn slots(&self, depth: usize) -> Result<Vec<Option<ProjectionKind>>> {
        if self.total() > depth {
            return Err(Error::Placement {
                text: self.to_string(),
                reason: format!("{} layers but only {} slots", self.total(), depth),
            });
        }
        Ok((0..depth)
            .map(|i| {
                if i < self.guided {
                    Some(ProjectionKind::GuidedOpl)
                } else if i < self.total() {
                    Some(ProjectionKind::Opl)
                } else {
                    None
                }
            })
            .collect())
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "G{}O{}", self.guided, self.plain)
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |reason: &str| Error::Placement {
            text: s.to_string(),
            reason: reason.to_string(),
        };
        let rest = s
            .strip_prefix('G')
            .ok_or_else(|| bad("must start with 'G'"))?;
        let (m, n) = rest.split_once('O').ok_or_else(|| bad("missing 'O'"))?;
        let digits = |t: &str| -> Result<usize> {
            if t.is_empty() || !t.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad("counts must be decimal digits"));
            }
            t.parse().map_err(|_| bad("count out of range"))
        };
        Ok(Placement {
            guided: digits(m)?,
            plain: digits(n)?,
        })
    }
}

#[cfg(feature = "serde")]
impl serde::Serialize for Placement {
    fn serialize<S: serde::Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[cfg(feature = "serde")]
impl<'de> serde::Deserialize<'de> for Placement {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let s = alloc::string::String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parses `s` and lays it out over a backbone of `depth` dense stages.
pub fn parse_placement(s: &str, depth: usize) -> Result<Vec<Option<ProjectionKind>>> {
    s.parse::<Placement>()?.slots(depth)
}

/// `activation(F W^T + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseStage {
    /// `out x in`
    pub weights: Matrix,
    /// `1 x out`
    pub bias: Matrix,
    pub activation: Activation,
}

/// Learnable basis of one projection layer.
#[derive(Clone, Debug, PartialEq)]
pub enum Basis {
    /// `W`, `k x d`; `Q = qr(W^T).q`.
    Weights(Matrix),
    /// `Q`, `d x k`.
    Direct(Matrix),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionLayerState {
    pub kind: ProjectionKind,
    basis: Basis,
    /// `Q` as of the last refresh (equal to the parameter in direct mode).
    q: Matrix,
}

impl ProjectionLayerState {
    pub fn from_weights(kind: ProjectionKind, weights: Matrix) -> Result<Self> {
        let q = linalg::qr_thin(&weights.transpose())?.q;
        Ok(ProjectionLayerState {
            kind,
            basis: Basis::Weights(weights),
            q,
        })
    }

    pub fn from_basis(kind: ProjectionKind, q: Matrix) -> Self {
        ProjectionLayerState {
            kind,
            basis: Basis::Direct(q.clone()),
            q,
        }
    }

    /// Gaussian `W` with standard deviation `1/sqrt(d)`; in direct mode the
    /// stored `Q` is seeded from one QR pass over it.
    pub fn random<R: Rng + ?Sized>(
        kind: ProjectionKind,
        mode: BasisMode,
        d: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if k == 0 || k >= d {
            return Err(Error::InvalidArgument(format!(
                "projection rank must satisfy 1 <= k < d, got k={} d={}",
                k, d
            )));
        }
        let w = gaussian(k, d, 1.0 / libm::sqrt(d as f64), rng);
        let layer = ProjectionLayerState::from_weights(kind, w)?;
        Ok(match mode {
            BasisMode::RecomputeQr => layer,
            BasisMode::DirectQ => ProjectionLayerState::from_basis(kind, layer.q),
        })
    }

    pub fn mode(&self) -> BasisMode {
        match self.basis {
            Basis::Weights(_) => BasisMode::RecomputeQr,
            Basis::Direct(_) => BasisMode::DirectQ,
        }
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    pub fn parameter(&self) -> &Matrix {
        match &self.basis {
            Basis::Weights(w) | Basis::Direct(w) => w,
        }
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    pub fn dim(&self) -> usize {
        self.q.rows()
    }

    pub fn rank(&self) -> usize {
        self.q.cols()
    }

    fn set_parameter(&mut self, m: Matrix) -> Result<()> {
        if m.shape() != self.parameter().shape() {
            return Err(Error::shape(
                "ProjectionLayerState::set_parameter",
                format!("{:?} vs {:?}", m.shape(), self.parameter().shape()),
            ));
        }
        match &mut self.basis {
            Basis::Weights(w) => {
                self.q = linalg::qr_thin(&m.transpose())?.q;
                *w = m;
            }
            Basis::Direct(q) => {
                self.q = m.clone();
                *q = m;
            }
        }
        Ok(())
    }

    /// Snapshot with `Q` fixed.
    pub fn frozen(&self) -> ProjectionLayerState {
        ProjectionLayerState::from_basis(self.kind, self.q.clone())
    }
}

/// Applies one projection layer to a batch: `(F_proj, F_removed)`.
///
/// In recompute mode `Q` is taken fresh from the QR of `W^T`.
pub fn projection_forward(layer: &ProjectionLayerState, f: &Matrix) -> Result<(Matrix, Matrix)> {
    let q = match &layer.basis {
        Basis::Weights(w) => linalg::qr_thin(&w.transpose())?.q,
        Basis::Direct(q) => q.clone(),
    };
    if f.cols() != q.rows() {
        return Err(Error::shape(
            "projection_forward",
            format!("features {:?} vs basis {:?}", f.shape(), q.shape()),
        ));
    }
    let (kept, removed) = linalg::project_rows(&q, f)?;
    Ok((kept, removed))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Stage {
    Dense(DenseStage),
    Projection(ProjectionLayerState),
}

/// Backbone shape and projection settings used to build a network.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub input_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub activation: Activation,
    pub placement: Placement,
    pub k_gopl: usize,
    pub k_opl: usize,
    pub mode: BasisMode,
}

/// Per-slot activation captured during a forward pass.
#[derive(Clone, Debug)]
pub struct SlotTap<V> {
    /// 1-based slot index.
    pub slot: usize,
    /// Activation leaving the slot (after its projection, if any).
    pub activation: V,
    /// `F_removed` of the projection at this slot.
    pub removed: Option<V>,
    pub projection: Option<ProjectionKind>,
}

/// Internals of one projection layer during a forward pass.
#[derive(Clone, Debug)]
pub struct ProjectionTrace<V> {
    pub stage_index: usize,
    pub slot: usize,
    pub kind: ProjectionKind,
    /// Activation entering the layer.
    pub input: V,
    pub q: V,
}

#[derive(Clone, Debug)]
pub struct GraphForward<V> {
    /// `B x 1`
    pub scores: V,
    pub taps: Vec<SlotTap<V>>,
    pub projections: Vec<ProjectionTrace<V>>,
}

/// Eager forward result.
#[derive(Clone, Debug)]
pub struct NetworkOutput {
    pub scores: Vec<f64>,
    pub taps: Option<Vec<SlotTap<Matrix>>>,
}

/// Dense backbone, projection layers and a linear scoring head.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    input_dim: usize,
    stages: Vec<Stage>,
    /// `1 x width`
    scorer: Matrix,
    /// `1 x 1`
    scorer_bias: Matrix,
    placement: Placement,
}

fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect();
    Matrix::from_raw(rows, cols, data)
}

impl NetworkSpec {
    /// Random network: dense weights `N(0, 1/in)`, zero biases, scorer
    /// `N(0, 1/width)`, projection layers per [`ProjectionLayerState::random`].
    pub fn build<R: Rng + ?Sized>(arch: &ArchConfig, rng: &mut R) -> Result<Self> {
        if arch.depth == 0 || arch.input_dim == 0 || arch.width == 0 {
            return Err(Error::InvalidArgument(
                "depth, input_dim and width must be positive".to_string(),
            ));
        }
        let slots = arch.placement.slots(arch.depth)?;
        let mut stages = Vec::new();
        let mut fan_in = arch.input_dim;
        for kind in slots {
            let w = gaussian(arch.width, fan_in, 1.0 / libm::sqrt(fan_in as f64), rng);
            stages.push(Stage::Dense(DenseStage {
                weights: w,
                bias: Matrix::zeros(1, arch.width),
                activation: arch.activation,
            }));
            fan_in = arch.width;
            if let Some(kind) = kind {
                let k = match kind {
                    ProjectionKind::GuidedOpl => arch.k_gopl,
                    ProjectionKind::Opl => arch.k_opl,
                };
                stages.push(Stage::Projection(ProjectionLayerState::random(
                    kind, arch.mode, arch.width, k, rng,
                )?));
            }
        }
        let scorer = gaussian(1, arch.width, 1.0 / libm::sqrt(arch.width as f64), rng);
        NetworkSpec::from_parts(arch.input_dim, stages, scorer, 0.0, arch.placement)
    }

    /// Assembles a network and checks that shapes chain.
    pub fn from_parts(
        input_dim: usize,
        stages: Vec<Stage>,
        scorer: Matrix,
        scorer_bias: f64,
        placement: Placement,
    ) -> Result<Self> {
        let mut dim = input_dim;
        let mut seen_plain = false;
        for (i, s) in stages.iter().enumerate() {
            match s {
                Stage::Dense(d) => {
                    if d.weights.cols() != dim || d.bias.shape() != (1, d.weights.rows()) {
                        return Err(Error::shape(
                            "NetworkSpec",
                            format!(
                                "stage {}: weights {:?}, bias {:?}, incoming width {}",
                                i,
                                d.weights.shape(),
                                d.bias.shape(),
                                dim
                            ),
                        ));
                    }
                    dim = d.weights.rows();
                }
                Stage::Projection(p) => {
                    if p.dim() != dim {
                        return Err(Error::shape(
                            "NetworkSpec",
                            format!(
                                "stage {}: projection over {} dims, incoming {}",
                                i,
                                p.dim(),
                                dim
                            ),
                        ));
                    }
                    if i == 0 {
                        return Err(Error::Placement {
                            text: placement.to_string(),
                            reason: "projection before the first dense stage".to_string(),
                        });
                    }
                    match p.kind {
                        ProjectionKind::Opl => seen_plain = true,
                        ProjectionKind::GuidedOpl if seen_plain => {
                            return Err(Error::Placement {
                                text: placement.to_string(),
                                reason: "guided layers must precede plain layers".to_string(),
                            })
                        }
                        ProjectionKind::GuidedOpl => {}
                    }
                }
            }
        }
        if scorer.shape() != (1, dim) {
            return Err(Error::shape(
                "NetworkSpec",
                format!("scorer {:?} for width {}", scorer.shape(), dim),
            ));
        }
        Ok(NetworkSpec {
            input_dim,
            stages,
            scorer,
            scorer_bias: Matrix::scalar(scorer_bias),
            placement,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn scorer(&self) -> &Matrix {
        &self.scorer
    }

    pub fn scorer_bias(&self) -> f64 {
        self.scorer_bias.data()[0]
    }

    pub fn placement(&self) -> Placement {
        self.placement
    }

    pub fn depth(&self) -> usize {
        self.stages
            .iter()
            .filter(|s| matches!(s, Stage::Dense(_)))
            .count()
    }

    /// `(slot, layer)` for every projection layer, in order.
    pub fn projection_layers(&self) -> Vec<(usize, &ProjectionLayerState)> {
        let mut slot = 0;
        let mut out = Vec::new();
        for s in &self.stages {
            match s {
                Stage::Dense(_) => slot += 1,
                Stage::Projection(p) => out.push((slot, p)),
            }
        }
        out
    }

    pub fn first_projection_slot(&self) -> Option<usize> {
        self.projection_layers().first().map(|(s, _)| *s)
    }

    /// Flat parameter list: per dense stage `[weights, bias]`, per projection
    /// `[W or Q]`, then `[scorer, scorer_bias]`.
    pub fn params(&self) -> Vec<Matrix> {
        let mut out = Vec::new();
        for s in &self.stages {
            match s {
                Stage::Dense(d) => {
                    out.push(d.weights.clone());
                    out.push(d.bias.clone());
                }
                Stage::Projection(p) => out.push(p.parameter().clone()),
            }
        }
        out.push(self.scorer.clone());
        out.push(self.scorer_bias.clone());
        out
    }

    pub fn num_params(&self) -> usize {
        self.param_offsets().1 + 2
    }

    /// Offset of each stage's first parameter, and the scorer's offset.
    fn param_offsets(&self) -> (Vec<usize>, usize) {
        let mut offs = Vec::with_capacity(self.stages.len());
        let mut at = 0;
        for s in &self.stages {
            offs.push(at);
            at += match s {
                Stage::Dense(_) => 2,
                Stage::Projection(_) => 1,
            };
        }
        (offs, at)
    }

    /// Writes back a parameter list laid out as by [`NetworkSpec::params`];
    /// recompute-mode layers refresh their cached `Q`.
    pub fn load_params(&mut self, params: &[Matrix]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::shape(
                "load_params",
                format!(
                    "{} matrices for {} parameters",
                    params.len(),
                    self.num_params()
                ),
            ));
        }
        let check = |m: &Matrix, target: &Matrix| -> Result<()> {
            if m.shape() != target.shape() {
                return Err(Error::shape(
                    "load_params",
                    format!("{:?} vs {:?}", m.shape(), target.shape()),
                ));
            }
            if !m.is_finite() {
                return Err(Error::NonFinite("load_params"));
            }
            Ok(())
        };
        let mut it = params.iter();
        for s in &mut self.stages {
            match s {
                Stage::Dense(d) => {
                    let (w, b) = (it.next().unwrap(), it.next().unwrap());
                    check(w, &d.weights)?;
                    check(b, &d.bias)?;
                    d.weights = w.clone();
                    d.bias = b.clone();
                }
                Stage::Projection(p) => {
                    let m = it.next().unwrap();
                    check(m, p.parameter())?;
                    p.set_parameter(m.clone())?;
                }
            }
        }
        let (s, b) = (it.next().unwrap(), it.next().unwrap());
        check(s, &self.scorer)?;
        check(b, &self.scorer_bias)?;
        self.scorer = s.clone();
        self.scorer_bias = b.clone();
        Ok(())
    }

    fn dense_graph<G: Graph>(
        g: &mut G,
        d: &DenseStage,
        w: &G::Value,
        b: &G::Value,
        x: &G::Value,
    ) -> Result<G::Value> {
        let h = g.matmul_nt(x, w)?;
        let h = g.add_row(&h, b)?;
        Ok(g.activate(&h, d.activation))
    }

    fn basis_graph<G: Graph>(
        g: &mut G,
        p: &ProjectionLayerState,
        param: &G::Value,
    ) -> Result<G::Value> {
        match p.mode() {
            BasisMode::RecomputeQr => {
                let wt = g.transpose(param);
                Ok(g.qr(&wt)?.0)
            }
            BasisMode::DirectQ => Ok(param.clone()),
        }
    }

    /// Returns `(kept, removed)`.
    fn project_graph<G: Graph>(
        g: &mut G,
        q: &G::Value,
        x: &G::Value,
    ) -> Result<(G::Value, G::Value)> {
        let coords = g.matmul(x, q)?;
        let removed = g.matmul_nt(&coords, q)?;
        let kept = g.sub(x, &removed)?;
        Ok((kept, removed))
    }

    fn check_params<V>(&self, params: &[V]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::shape(
                "network_forward",
                format!(
                    "{} parameters, expected {}",
                    params.len(),
                    self.num_params()
                ),
            ));
        }
        Ok(())
    }

    fn check_input(&self, m: &Matrix) -> Result<()> {
        if m.cols() != self.input_dim {
            return Err(Error::shape(
                "network_forward",
                format!(
                    "input has {} columns, network expects {}",
                    m.cols(),
                    self.input_dim
                ),
            ));
        }
        Ok(())
    }

    /// Forward pass over any [`Graph`], with explicit parameter values.
    pub fn forward_graph<G: Graph>(
        &self,
        g: &mut G,
        params: &[G::Value],
        input: &G::Value,
        capture: bool,
    ) -> Result<GraphForward<G::Value>> {
        self.check_params(params)?;
        self.check_input(g.value(input))?;
        let (offs, scorer_at) = self.param_offsets();
        let mut x = input.clone();
        let mut slot = 0;
        let mut taps: Vec<SlotTap<G::Value>> = Vec::new();
        let mut projections = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            match stage {
                Stage::Dense(d) => {
                    x = Self::dense_graph(g, d, &params[offs[i]], &params[offs[i] + 1], &x)
                        .map_err(|e| stage_error(e, i))?;
                    slot += 1;
                    if capture {
                        taps.push(SlotTap {
                            slot,
                            activation: x.clone(),
                            removed: None,
                            projection: None,
                        });
                    }
                }
                Stage::Projection(p) => {
                    let q = Self::basis_graph(g, p, &params[offs[i]])?;
                    let (kept, removed) =
                        Self::project_graph(g, &q, &x).map_err(|e| stage_error(e, i))?;
                    projections.push(ProjectionTrace {
                        stage_index: i,
                        slot,
                        kind: p.kind,
                        input: x,
                        q,
                    });
                    if let Some(tap) = taps.last_mut() {
                        tap.activation = kept.clone();
                        tap.removed = Some(removed);
                        tap.projection = Some(p.kind);
                    }
                    x = kept;
                }
            }
        }
        let s = g.matmul_nt(&x, &params[scorer_at])?;
        let scores = g.add_row(&s, &params[scorer_at + 1])?;
        Ok(GraphForward {
            scores,
            taps,
            projections,
        })
    }

    /// Output of `stages[..upto]` on `input`: the activation that enters
    /// stage `upto`.
    pub fn prefix_graph<G: Graph>(
        &self,
        g: &mut G,
        params: &[G::Value],
        input: &G::Value,
        upto: usize,
    ) -> Result<G::Value> {
        self.check_params(params)?;
        self.check_input(g.value(input))?;
        let (offs, _) = self.param_offsets();
        let mut x = input.clone();
        for (i, stage) in self.stages.iter().enumerate().take(upto) {
            x = match stage {
                Stage::Dense(d) => {
                    Self::dense_graph(g, d, &params[offs[i]], &params[offs[i] + 1], &x)?
                }
                Stage::Projection(p) => {
                    let q = Self::basis_graph(g, p, &params[offs[i]])?;
                    Self::project_graph(g, &q, &x)?.0
                }
            };
        }
        Ok(x)
    }

    /// Eager forward. With `capture`, every slot's activation is returned.
    pub fn forward(&self, input: &Matrix, capture: bool) -> Result<NetworkOutput> {
        let params = self.params();
        let out = self.forward_graph(&mut Eager, &params, input, capture)?;
        Ok(NetworkOutput {
            scores: out.scores.into_data(),
            taps: capture.then_some(out.taps),
        })
    }

    /// Activation entering the stage at `stage_index`.
    pub fn prefix(&self, input: &Matrix, stage_index: usize) -> Result<Matrix> {
        let params = self.params();
        self.prefix_graph(&mut Eager, &params, input, stage_index)
    }

    /// Fixes every `Q` at its current value (one QR pass in recompute mode).
    pub fn freeze(&self) -> Result<FrozenNetwork> {
        let mut stages = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            stages.push(match s {
                Stage::Dense(d) => Stage::Dense(d.clone()),
                Stage::Projection(p) => {
                    let q = match &p.basis {
                        Basis::Weights(w) => linalg::qr_thin(&w.transpose())?.q,
                        Basis::Direct(q) => q.clone(),
                    };
                    Stage::Projection(ProjectionLayerState::from_basis(p.kind, q))
                }
            });
        }
        Ok(FrozenNetwork(NetworkSpec {
            input_dim: self.input_dim,
            stages,
            scorer: self.scorer.clone(),
            scorer_bias: self.scorer_bias.clone(),
            placement: self.placement,
        }))
    }
}

fn stage_error(e: Error, stage: usize) -> Error {
    match e {
        Error::Shape { op, detail } => Error::Shape {
            op,
            detail: format!("stage {}: {}", stage, detail),
        },
        other => other,
    }
}

/// A trained network with every projection basis fixed.
///
/// Inference takes features only; there is no way to hand it attribute
/// embeddings or presence masks.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenNetwork(NetworkSpec);

impl FrozenNetwork {
    /// Wraps a network whose projection layers all hold a fixed `Q`.
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        if spec
            .projection_layers()
            .iter()
            .any(|(_, p)| p.mode() != BasisMode::DirectQ)
        {
            return Err(Error::InvalidArgument(
                "frozen networks store Q directly".to_string(),
            ));
        }
        Ok(FrozenNetwork(spec))
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.0
    }

    /// Anomaly scores for a batch of features.
    pub fn inference_forward(&self, features: &Matrix) -> Result<Vec<f64>> {
        Ok(self.0.forward(features, false)?.scores)
    }

    pub fn forward(&self, features: &Matrix, capture: bool) -> Result<NetworkOutput> {
        self.0.forward(features, capture)
    }

    /// The same network with every projection layer removed.
    pub fn without_projections(&self) -> FrozenNetwork {
        let mut spec = self.0.clone();
        spec.stages.retain(|s| matches!(s, Stage::Dense(_)));
        spec.placement = Placement {
            guided: 0,
            plain: 0,
        };
        FrozenNetwork(spec)
    }

    /// Activation entering the projection layer at `slot`.
    pub fn slot_input(&self, features: &Matrix, slot: usize) -> Result<Matrix> {
        let mut seen = 0;
        for (i, s) in self.0.stages.iter().enumerate() {
            if let Stage::Dense(_) = s {
                seen += 1;
                if seen == slot {
                    return self.0.prefix(features, i + 1);
                }
            }
        }
        Err(Error::InvalidArgument(format!("no slot {}", slot)))
    }
}
