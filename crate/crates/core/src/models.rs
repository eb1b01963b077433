//! Slice-encoder CNNs, Transformer aggregators and the fusion architectures.
//!
//! Every kind ends in the same head: one hidden layer followed by two
//! logits. MRI stacks are encoded slice by slice with a shared CNN, turned
//! into tokens with learned positional embeddings and aggregated by a
//! post-norm Transformer whose outputs are mean-pooled.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use diffcore::{Array, Mode, Tape, Var};
use ndarray::{ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::imaging::{Protocol, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ArchKind {
    XR1,
    MR1,
    XR1MR1,
    MR2,
    XR1MR2,
    XR1MR2C1,
}

impl ArchKind {
    pub const ALL: [ArchKind; 6] = [
        ArchKind::XR1,
        ArchKind::MR1,
        ArchKind::XR1MR1,
        ArchKind::MR2,
        ArchKind::XR1MR2,
        ArchKind::XR1MR2C1,
    ];

    pub fn uses_xr(self) -> bool {
        matches!(self, ArchKind::XR1 | ArchKind::XR1MR1 | ArchKind::XR1MR2 | ArchKind::XR1MR2C1)
    }

    pub fn mri_count(self) -> usize {
        match self {
            ArchKind::XR1 => 0,
            ArchKind::MR1 | ArchKind::XR1MR1 => 1,
            ArchKind::MR2 | ArchKind::XR1MR2 | ArchKind::XR1MR2C1 => 2,
        }
    }

    pub fn uses_clinical(self) -> bool {
        self == ArchKind::XR1MR2C1
    }

    /// Kinds that pool each MRI branch with its own Transformer first.
    fn mid_level(self) -> bool {
        matches!(self, ArchKind::XR1MR2 | ArchKind::XR1MR2C1)
    }
}

impl FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArchKind::ALL
            .into_iter()
            .find(|k| format!("{k:?}") == s)
            .ok_or_else(|| contract(format!("unknown architecture {s:?}")))
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Input source as seen by the model; ablation masks refer to these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Modality {
    Xr,
    Dess,
    Tse,
    T2map,
    Clin,
}

impl From<Protocol> for Modality {
    fn from(p: Protocol) -> Self {
        match p {
            Protocol::Xr => Modality::Xr,
            Protocol::Dess => Modality::Dess,
            Protocol::Tse => Modality::Tse,
            Protocol::T2map => Modality::T2map,
        }
    }
}

impl Modality {
    pub fn protocol(self) -> Option<Protocol> {
        match self {
            Modality::Xr => Some(Protocol::Xr),
            Modality::Dess => Some(Protocol::Dess),
            Modality::Tse => Some(Protocol::Tse),
            Modality::T2map => Some(Protocol::T2map),
            Modality::Clin => None,
        }
    }

    pub fn tag(self) -> &'static str {
        match self.protocol() {
            Some(p) => p.tag(),
            None => "CLIN",
        }
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("CLIN") {
            return Ok(Modality::Clin);
        }
        Ok(s.parse::<Protocol>()?.into())
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub kind: ArchKind,
    pub descriptor_dim: usize,
    pub trf_layers: usize,
    pub trf_heads: usize,
    pub dropout_rate: f64,
    pub head_hidden: usize,
    pub encoder_channels: Vec<usize>,
    pub clinical_dim: usize,
    /// MRI protocols feeding the MRI branches, in branch order.
    pub mri: Vec<Protocol>,
    /// Size of the positional-embedding table.
    pub max_slices: usize,
}

impl ArchSpec {
    /// Desk defaults for `kind`; MRI branches default to DESS, then T2 map.
    pub fn desk(kind: ArchKind) -> Self {
        let mri = match kind.mri_count() {
            0 => vec![],
            1 => vec![Protocol::Dess],
            _ => vec![Protocol::Dess, Protocol::T2map],
        };
        Self {
            kind,
            descriptor_dim: 64,
            trf_layers: 4,
            trf_heads: 8,
            dropout_rate: 0.1,
            head_hidden: 64,
            encoder_channels: vec![8, 16, 32],
            clinical_dim: if kind.uses_clinical() { 9 } else { 0 },
            mri,
            max_slices: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.descriptor_dim;
        if d == 0 || self.trf_heads == 0 || d % self.trf_heads != 0 {
            return Err(contract(format!(
                "descriptor_dim {d} must be a positive multiple of trf_heads {}",
                self.trf_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(contract("dropout_rate must lie in [0, 1)"));
        }
        if self.head_hidden == 0 || self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(contract("head_hidden and encoder channels must be positive"));
        }
        if self.mri.len() != self.kind.mri_count() {
            return Err(contract(format!(
                "{} needs {} MRI protocols, spec lists {}",
                self.kind,
                self.kind.mri_count(),
                self.mri.len()
            )));
        }
        if self.mri.iter().any(|p| !p.is_mri()) {
            return Err(contract("MRI branches must use MRI protocols"));
        }
        if self.mri.len() == 2 && self.mri[0] == self.mri[1] {
            return Err(contract("the two MRI branches need distinct protocols"));
        }
        if self.kind.uses_clinical() != (self.clinical_dim > 0) {
            return Err(contract(format!(
                "{}: clinical_dim must be {}",
                self.kind,
                if self.kind.uses_clinical() { "positive" } else { "0" }
            )));
        }
        if self.kind.mri_count() > 0 && (self.trf_layers == 0 || self.max_slices == 0) {
            return Err(contract("Transformer kinds need trf_layers > 0 and max_slices > 0"));
        }
        Ok(())
    }

    /// Modalities the model consumes.
    pub fn modalities(&self) -> Vec<Modality> {
        let mut m = Vec::new();
        if self.kind.uses_xr() {
            m.push(Modality::Xr);
        }
        m.extend(self.mri.iter().map(|&p| Modality::from(p)));
        if self.kind.uses_clinical() {
            m.push(Modality::Clin);
        }
        m
    }
}

/// Input tensors for one batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModalityBatch {
    /// `[B, 1, H, W]`.
    pub xr: Option<Array>,
    /// `[B, S, H, W]` per protocol.
    pub mri: BTreeMap<Protocol, Array>,
    /// Slice position indices per protocol; defaults to `0..S`.
    pub slice_positions: BTreeMap<Protocol, Vec<usize>>,
    /// `[B, C]`.
    pub clinical: Option<Array>,
    /// Modalities replaced by their entry in `means` before encoding.
    pub masked: BTreeSet<Modality>,
    /// Per-sample mean tensors (no batch axis).
    pub means: BTreeMap<Modality, Array>,
}

impl ModalityBatch {
    pub fn batch_size(&self) -> Result<usize> {
        let mut sizes = Vec::new();
        if let Some(x) = &self.xr {
            sizes.push(("XR", x.shape().first().copied().unwrap_or(0)));
        }
        for (p, a) in &self.mri {
            sizes.push((p.tag(), a.shape().first().copied().unwrap_or(0)));
        }
        if let Some(c) = &self.clinical {
            sizes.push(("CLIN", c.shape().first().copied().unwrap_or(0)));
        }
        let first = sizes.first().ok_or_else(|| contract("batch holds no modality"))?.1;
        if let Some((name, b)) = sizes.iter().find(|(_, b)| *b != first) {
            return Err(contract(format!("batch size of {name} is {b}, expected {first}")));
        }
        Ok(first)
    }

    pub fn tensor(&self, m: Modality) -> Option<&Array> {
        match m {
            Modality::Xr => self.xr.as_ref(),
            Modality::Clin => self.clinical.as_ref(),
            other => self.mri.get(&other.protocol().unwrap()),
        }
    }

    /// Samples `idx` of every present modality, with masks and means kept.
    pub fn select(&self, idx: &[usize]) -> ModalityBatch {
        let pick = |a: &Array| a.select(Axis(0), idx);
        ModalityBatch {
            xr: self.xr.as_ref().map(pick),
            mri: self.mri.iter().map(|(p, a)| (*p, pick(a))).collect(),
            slice_positions: self.slice_positions.clone(),
            clinical: self.clinical.as_ref().map(pick),
            masked: self.masked.clone(),
            means: self.means.clone(),
        }
    }

    /// Mean over the batch axis of every present modality.
    pub fn modality_means(&self) -> BTreeMap<Modality, Array> {
        let mut out = BTreeMap::new();
        for m in [Modality::Xr, Modality::Dess, Modality::Tse, Modality::T2map, Modality::Clin] {
            if let Some(a) = self.tensor(m) {
                if let Some(mean) = a.mean_axis(Axis(0)) {
                    out.insert(m, mean);
                }
            }
        }
        out
    }
}

/// Stacks preprocessed `[H, W]` radiographs into `[B, 1, H, W]`.
pub fn stack_xr(volumes: &[&Volume]) -> Result<Array> {
    let first = volumes.first().ok_or_else(|| contract("no radiographs to stack"))?;
    let shape = first.shape().to_vec();
    if shape.len() != 2 {
        return Err(contract("radiographs must be 2D"));
    }
    let views: Vec<_> = volumes
        .iter()
        .map(|v| {
            if v.shape() != shape.as_slice() {
                return Err(contract(format!("radiograph shape {:?} differs from {shape:?}", v.shape())));
            }
            Ok(v.data().view().insert_axis(Axis(0)).insert_axis(Axis(0)))
        })
        .collect::<Result<_>>()?;
    Ok(ndarray::concatenate(Axis(0), &views).expect("checked shapes"))
}

/// Stacks preprocessed `[H, W, S]` volumes into `[B, S, H, W]`.
pub fn stack_mri(volumes: &[&Volume]) -> Result<Array> {
    let first = volumes.first().ok_or_else(|| contract("no MRI volumes to stack"))?;
    let shape = first.shape().to_vec();
    if shape.len() != 3 {
        return Err(contract("MRI volumes must be 3D"));
    }
    let views: Vec<_> = volumes
        .iter()
        .map(|v| {
            if v.shape() != shape.as_slice() {
                return Err(contract(format!("MRI shape {:?} differs from {shape:?}", v.shape())));
            }
            Ok(v.data().view().permuted_axes(IxDyn(&[2, 0, 1])).insert_axis(Axis(0)))
        })
        .collect::<Result<_>>()?;
    Ok(ndarray::concatenate(Axis(0), &views)
        .expect("checked shapes")
        .as_standard_layout()
        .into_owned())
}

/// Named parameter arrays in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    fn push(&mut self, name: String, value: Array) {
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    HeUniform(usize),
    Zeros,
    Ones,
    /// Standard normal scaled by 1/sqrt(dim).
    ScaledNormal(usize),
}

/// Parameter layout of a spec: names, shapes and initialisers.
fn layout(spec: &ArchSpec) -> Vec<(String, Vec<usize>, Init)> {
    let d = spec.descriptor_dim;
    let mut out = Vec::new();
    let encoder = |out: &mut Vec<_>, p: &str| {
        let mut cin = 1;
        for (k, &c) in spec.encoder_channels.iter().enumerate() {
            out.push((format!("{p}.s{k}.down.w"), vec![c, cin, 3, 3], Init::HeUniform(cin * 9)));
            out.push((format!("{p}.s{k}.down.b"), vec![c], Init::Zeros));
            out.push((format!("{p}.s{k}.res.w"), vec![c, c, 3, 3], Init::HeUniform(c * 9)));
            out.push((format!("{p}.s{k}.res.b"), vec![c], Init::Zeros));
            cin = c;
        }
        out.push((format!("{p}.proj.w"), vec![cin, d], Init::HeUniform(cin)));
        out.push((format!("{p}.proj.b"), vec![d], Init::Zeros));
    };
    let transformer = |out: &mut Vec<_>, p: &str| {
        for l in 0..spec.trf_layers {
            for m in ["q", "k", "v", "o", "ff1", "ff2"] {
                out.push((format!("{p}.l{l}.{m}.w"), vec![d, d], Init::HeUniform(d)));
                out.push((format!("{p}.l{l}.{m}.b"), vec![d], Init::Zeros));
            }
            for n in ["ln1", "ln2"] {
                out.push((format!("{p}.l{l}.{n}.g"), vec![d], Init::Ones));
                out.push((format!("{p}.l{l}.{n}.b"), vec![d], Init::Zeros));
            }
        }
    };
    if spec.kind.uses_xr() {
        encoder(&mut out, "xr.enc");
    }
    for p in &spec.mri {
        let pre = format!("mri.{}", p.tag());
        encoder(&mut out, &format!("{pre}.enc"));
        out.push((format!("{pre}.pos"), vec![spec.max_slices, d], Init::ScaledNormal(d)));
        if spec.kind.mid_level() {
            transformer(&mut out, &format!("{pre}.trf"));
        }
    }
    if spec.kind.uses_clinical() {
        out.push(("clin.w".into(), vec![spec.clinical_dim, d], Init::HeUniform(spec.clinical_dim)));
        out.push(("clin.b".into(), vec![d], Init::Zeros));
    }
    let sources = spec.modalities().len();
    if spec.kind.mri_count() > 0 {
        if sources > 1 {
            out.push(("fusion.modality".into(), vec![sources, d], Init::ScaledNormal(d)));
        }
        transformer(&mut out, "fusion.trf");
    }
    out.push(("head.fc1.w".into(), vec![d, spec.head_hidden], Init::HeUniform(d)));
    out.push(("head.fc1.b".into(), vec![spec.head_hidden], Init::Zeros));
    out.push(("head.fc2.w".into(), vec![spec.head_hidden, 2], Init::HeUniform(spec.head_hidden)));
    out.push(("head.fc2.b".into(), vec![2], Init::Zeros));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ArchSpec,
    pub params: ParamStore,
}

pub fn build_model(spec: &ArchSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    for (name, shape, init) in layout(spec) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::HeUniform(fan_in) => {
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
            Init::ScaledNormal(dim) => {
                let s = 1.0 / (dim as f64).sqrt();
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * s
                    })
                    .collect()
            }
        };
        params.push(name, ArrayD::from_shape_vec(IxDyn(&shape), data).expect("layout shape"));
    }
    Ok(Model {
        spec: spec.clone(),
        params,
    })
}

/// Graph-building context: parameter lookups by name.
struct Ctx<'a> {
    tape: &'a mut Tape,
    vars: &'a [Var],
    index: &'a BTreeMap<String, usize>,
    dropout: f64,
}

impl Ctx<'_> {
    fn p(&self, name: &str) -> Var {
        self.vars[*self.index.get(name).unwrap_or_else(|| panic!("parameter {name} missing from layout"))]
    }

    /// conv3x3 + bias, shaped for NCHW broadcasting.
    fn conv(&mut self, x: Var, pre: &str, stride: usize) -> Result<Var> {
        let w = self.p(&format!("{pre}.w"));
        let b = self.p(&format!("{pre}.b"));
        let c = self.tape.shape(b)[0];
        let y = self.tape.conv2d(x, w, stride, 1)?;
        let b4 = self.tape.reshape(b, &[1, c, 1, 1])?;
        Ok(self.tape.add(y, b4)?)
    }

    /// `[N, 1, H, W]` → `[N, D]`.
    fn encoder(&mut self, x: Var, pre: &str, stages: usize) -> Result<Var> {
        let mut h = x;
        for k in 0..stages {
            let down = self.conv(h, &format!("{pre}.s{k}.down"), 2)?;
            let down = self.tape.relu(down)?;
            let res = self.conv(down, &format!("{pre}.s{k}.res"), 1)?;
            let sum = self.tape.add(down, res)?;
            h = self.tape.relu(sum)?;
        }
        let pooled = self.tape.global_average_pool(h)?;
        let (w, b) = (self.p(&format!("{pre}.proj.w")), self.p(&format!("{pre}.proj.b")));
        Ok(self.tape.linear(pooled, w, Some(b))?)
    }

    fn dense(&mut self, x: Var, pre: &str) -> Result<Var> {
        let (w, b) = (self.p(&format!("{pre}.w")), self.p(&format!("{pre}.b")));
        Ok(self.tape.linear(x, w, Some(b))?)
    }

    fn norm(&mut self, x: Var, pre: &str) -> Result<Var> {
        let y = self.tape.layer_norm(x)?;
        let g = self.tape.mul(y, self.p(&format!("{pre}.g")))?;
        Ok(self.tape.add(g, self.p(&format!("{pre}.b")))?)
    }

    /// Post-norm encoder layers over `[B, T, D]`.
    fn transformer(&mut self, x: Var, pre: &str, layers: usize, heads: usize) -> Result<Var> {
        let s = self.tape.shape(x).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let dh = d / heads;
        let mut h = x;
        for l in 0..layers {
            let p = format!("{pre}.l{l}");
            let split = |ctx: &mut Self, v: Var| -> Result<Var> {
                let v = ctx.tape.reshape(v, &[b, t, heads, dh])?;
                let v = ctx.tape.permute(v, &[0, 2, 1, 3])?;
                Ok(ctx.tape.reshape(v, &[b * heads, t, dh])?)
            };
            let q = self.dense(h, &format!("{p}.q"))?;
            let k = self.dense(h, &format!("{p}.k"))?;
            let v = self.dense(h, &format!("{p}.v"))?;
            let (q, k, v) = (split(self, q)?, split(self, k)?, split(self, v)?);
            let kt = self.tape.transpose_last(k)?;
            let scores = self.tape.matmul(q, kt)?;
            let scores = self.tape.mul_scalar(scores, 1.0 / (dh as f64).sqrt())?;
            let attn = self.tape.softmax(scores)?;
            let ctxv = self.tape.matmul(attn, v)?;
            let ctxv = self.tape.reshape(ctxv, &[b, heads, t, dh])?;
            let ctxv = self.tape.permute(ctxv, &[0, 2, 1, 3])?;
            let ctxv = self.tape.reshape(ctxv, &[b, t, d])?;
            let att_out = self.dense(ctxv, &format!("{p}.o"))?;
            let att_out = self.tape.dropout(att_out, self.dropout)?;
            let sum = self.tape.add(h, att_out)?;
            let h1 = self.norm(sum, &format!("{p}.ln1"))?;
            let f = self.dense(h1, &format!("{p}.ff1"))?;
            let f = self.tape.relu(f)?;
            let f = self.dense(f, &format!("{p}.ff2"))?;
            let f = self.tape.dropout(f, self.dropout)?;
            let sum = self.tape.add(h1, f)?;
            h = self.norm(sum, &format!("{p}.ln2"))?;
        }
        Ok(h)
    }
}

impl Model {
    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Registers the parameters as tape leaves, in store order.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.params
            .values()
            .iter()
            .map(|v| tape.input(v.clone(), requires_grad))
            .collect()
    }

    /// Builds the logits `[B, 2]` on `tape` from bound parameter vars.
    pub fn logits_graph(&self, tape: &mut Tape, params: &[Var], batch: &ModalityBatch) -> Result<Var> {
        if params.len() != self.params.len() {
            return Err(contract(format!(
                "expected {} parameter vars, got {}",
                self.params.len(),
                params.len()
            )));
        }
        let spec = &self.spec;
        let bsz = batch.batch_size()?;
        let d = spec.descriptor_dim;
        let stages = spec.encoder_channels.len();
        let input = |tape: &mut Tape, m: Modality| -> Result<Var> {
            let a = batch
                .tensor(m)
                .ok_or_else(|| contract(format!("{} requires the {m} modality", spec.kind)))?;
            if batch.masked.contains(&m) {
                let mean = batch
                    .means
                    .get(&m)
                    .ok_or_else(|| contract(format!("no mean tensor for masked modality {m}")))?;
                if mean.shape() != &a.shape()[1..] {
                    return Err(contract(format!(
                        "mean tensor for {m} has shape {:?}, samples have {:?}",
                        mean.shape(),
                        &a.shape()[1..]
                    )));
                }
                let full = mean.broadcast(a.raw_dim()).expect("checked shape").to_owned();
                Ok(tape.input(full, false))
            } else {
                Ok(tape.input(a.clone(), false))
            }
        };

        let mut ctx = Ctx {
            tape,
            vars: params,
            index: &self.params.index,
            dropout: spec.dropout_rate,
        };
        let mut tokens: Vec<Var> = Vec::new();
        if spec.kind.uses_xr() {
            let x = input(ctx.tape, Modality::Xr)?;
            if ctx.tape.shape(x).len() != 4 || ctx.tape.shape(x)[1] != 1 {
                return Err(contract("XR input must be [B, 1, H, W]"));
            }
            let e = ctx.encoder(x, "xr.enc", stages)?;
            if spec.kind == ArchKind::XR1 {
                return head(&mut ctx, e);
            }
            tokens.push(ctx.tape.reshape(e, &[bsz, 1, d])?);
        }
        for &p in &spec.mri {
            let m = Modality::from(p);
            let x = input(ctx.tape, m)?;
            let s = ctx.tape.shape(x).to_vec();
            if s.len() != 4 {
                return Err(contract(format!("{p} input must be [B, S, H, W], got {s:?}")));
            }
            let n_slices = s[1];
            let positions: Vec<usize> = match batch.slice_positions.get(&p) {
                Some(pos) if pos.len() == n_slices => pos.clone(),
                Some(pos) => {
                    return Err(contract(format!(
                        "{p}: {} slice positions for {n_slices} slices",
                        pos.len()
                    )))
                }
                None => (0..n_slices).collect(),
            };
            if positions.iter().any(|&i| i >= spec.max_slices) {
                return Err(contract(format!("{p}: slice index exceeds max_slices {}", spec.max_slices)));
            }
            let pre = format!("mri.{}", p.tag());
            let flat = ctx.tape.reshape(x, &[bsz * n_slices, 1, s[2], s[3]])?;
            let e = ctx.encoder(flat, &format!("{pre}.enc"), stages)?;
            let e = ctx.tape.reshape(e, &[bsz, n_slices, d])?;
            let pos = ctx.tape.embedding(ctx.p(&format!("{pre}.pos")), &positions)?;
            let pos = ctx.tape.reshape(pos, &[1, n_slices, d])?;
            let mut t = ctx.tape.add(e, pos)?;
            if spec.kind.mid_level() {
                t = ctx.transformer(t, &format!("{pre}.trf"), spec.trf_layers, spec.trf_heads)?;
                let pooled = ctx.tape.mean_axis(t, 1)?;
                t = ctx.tape.reshape(pooled, &[bsz, 1, d])?;
            }
            tokens.push(t);
        }
        if spec.kind.uses_clinical() {
            let c = input(ctx.tape, Modality::Clin)?;
            if ctx.tape.shape(c) != [bsz, spec.clinical_dim] {
                return Err(contract(format!(
                    "clinical input must be [B, {}], got {:?}",
                    spec.clinical_dim,
                    ctx.tape.shape(c)
                )));
            }
            let e = ctx.dense(c, "clin")?;
            let e = ctx.tape.relu(e)?;
            tokens.push(ctx.tape.reshape(e, &[bsz, 1, d])?);
        }
        if tokens.len() > 1 {
            let table = ctx.p("fusion.modality");
            for (i, t) in tokens.iter_mut().enumerate() {
                let emb = ctx.tape.embedding(table, &[i])?;
                let emb = ctx.tape.reshape(emb, &[1, 1, d])?;
                *t = ctx.tape.add(*t, emb)?;
            }
        }
        let seq = if tokens.len() == 1 {
            tokens[0]
        } else {
            ctx.tape.concat(&tokens, 1)?
        };
        let fused = ctx.transformer(seq, "fusion.trf", spec.trf_layers, spec.trf_heads)?;
        let pooled = ctx.tape.mean_axis(fused, 1)?;
        head(&mut ctx, pooled)
    }

    /// Logits `[B, 2]`. Eval mode is deterministic; train mode draws
    /// dropout masks from `seed`.
    pub fn forward(&self, batch: &ModalityBatch, mode: Mode, seed: u64) -> Result<Array> {
        let mut tape = Tape::new(mode, seed);
        let vars = self.bind(&mut tape, false);
        let out = self.logits_graph(&mut tape, &vars, batch)?;
        Ok(tape.value(out).clone())
    }

    /// Softmax probability of class 1 per sample (eval mode).
    pub fn predict_proba(&self, batch: &ModalityBatch) -> Result<Vec<f64>> {
        let logits = self.forward(batch, Mode::Eval, 0)?;
        Ok(class1_probability(&logits))
    }
}

fn head(ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
    let h = ctx.dense(x, "head.fc1")?;
    let h = ctx.tape.relu(h)?;
    let h = ctx.tape.dropout(h, ctx.dropout)?;
    ctx.dense(h, "head.fc2")
}

/// Row-wise softmax probability of the second logit.
pub fn class1_probability(logits: &Array) -> Vec<f64> {
    logits
        .outer_iter()
        .map(|row| {
            let (a, b) = (row[0], row[1]);
            let m = a.max(b);
            let (ea, eb) = ((a - m).exp(), (b - m).exp());
            eb / (ea + eb)
        })
        .collect()
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"CKP1";

/// Checkpoint layout (little-endian): magic `CKP1`; u32 length + ArchSpec
/// JSON; u32 parameter count; per parameter u32 name length, UTF-8 name,
/// u8 ndim, u32 extents, f64 values in row-major order.
pub fn write_checkpoint<W: Write>(model: &Model, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    let spec = serde_json::to_vec(&model.spec)?;
    w.write_all(&(spec.len() as u32).to_le_bytes())?;
    w.write_all(&spec)?;
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for (name, v) in model.params.names().iter().zip(model.params.values()) {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[v.ndim() as u8])?;
        for &e in v.shape() {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for x in v.as_standard_layout().iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn checkpoint_bytes(model: &Model) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf).expect("writing to memory");
    buf
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Model> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a CKP1 checkpoint".into()));
    }
    let n = read_u32(&mut r)? as usize;
    let mut spec_buf = vec![0u8; n];
    r.read_exact(&mut spec_buf)?;
    let spec: ArchSpec = serde_json::from_slice(&spec_buf)?;
    let mut model = build_model(&spec, 0)?;
    let count = read_u32(&mut r)? as usize;
    if count != model.params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} parameters, spec implies {}",
            model.params.len()
        )));
    }
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let mut nd = [0u8; 1];
        r.read_exact(&mut nd)?;
        let shape: Vec<usize> = (0..nd[0]).map(|_| read_u32(&mut r).map(|e| e as usize)).collect::<Result<_>>()?;
        let slot = model
            .params
            .get_mut(&name)
            .ok_or_else(|| Error::Format(format!("unexpected parameter {name}")))?;
        if slot.shape() != shape.as_slice() {
            return Err(Error::Format(format!("parameter {name} has shape {shape:?}, expected {:?}", slot.shape())));
        }
        for x in slot.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *x = f64::from_le_bytes(b);
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_and_modality_parse() {
        for k in ArchKind::ALL {
            assert_eq!(k.to_string().parse::<ArchKind>().unwrap(), k);
        }
        assert!("XR2".parse::<ArchKind>().is_err());
        assert_eq!("clin".parse::<Modality>().unwrap(), Modality::Clin);
        assert_eq!("T2MAP".parse::<Modality>().unwrap(), Modality::T2map);
    }

    #[test]
    fn spec_validation() {
        let mut s = ArchSpec::desk(ArchKind::MR1);
        s.trf_heads = 7;
        assert!(build_model(&s, 0).is_err());
        let mut s = ArchSpec::desk(ArchKind::XR1MR2C1);
        s.clinical_dim = 0;
        assert!(s.validate().is_err());
        let mut s = ArchSpec::desk(ArchKind::MR2);
        s.mri = vec![Protocol::Dess];
        assert!(s.validate().is_err());
        for k in ArchKind::ALL {
            ArchSpec::desk(k).validate().unwrap();
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = build_model(&ArchSpec::desk(ArchKind::XR1MR1), 5).unwrap();
        let bytes = checkpoint_bytes(&m);
        let back = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back, m);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
    }
}
