//! Feature distillation: pooling a feature matrix of any length into a
//! fixed-length vector, optionally after a non-local attention block.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jfe::{FeatureMatrix, Layout};
use crate::tensor::{Graph, SeededRng, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pairwise {
    EmbeddedGaussian,
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DistillMode {
    Vfd,
    NlaEmb,
    NlaCat,
    DnlaMuEmb,
    DnlaMuCat,
    DnlaDeltaEmb,
}

impl DistillMode {
    pub const ALL: [DistillMode; 6] = [
        DistillMode::Vfd,
        DistillMode::NlaEmb,
        DistillMode::NlaCat,
        DistillMode::DnlaMuEmb,
        DistillMode::DnlaMuCat,
        DistillMode::DnlaDeltaEmb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistillMode::Vfd => "vfd",
            DistillMode::NlaEmb => "nla_emb",
            DistillMode::NlaCat => "nla_cat",
            DistillMode::DnlaMuEmb => "dnla_mu_emb",
            DistillMode::DnlaMuCat => "dnla_mu_cat",
            DistillMode::DnlaDeltaEmb => "dnla_delta_emb",
        }
    }

    pub fn pairwise(self) -> Pairwise {
        match self {
            DistillMode::NlaCat | DistillMode::DnlaMuCat => Pairwise::Concat,
            _ => Pairwise::EmbeddedGaussian,
        }
    }
}

impl fmt::Display for DistillMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl TryFrom<String> for DistillMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DistillMode> for String {
    fn from(m: DistillMode) -> String {
        m.name().to_string()
    }
}

impl FromStr for DistillMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DistillMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown mode {s:?}; expected one of vfd, nla_emb, nla_cat, dnla_mu_emb, dnla_mu_cat, dnla_delta_emb"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VfdConfig {
    pub kernel: usize,
    pub stride: usize,
    pub out_len: usize,
}

impl Default for VfdConfig {
    fn default() -> Self {
        VfdConfig {
            kernel: 8,
            stride: 4,
            out_len: 8,
        }
    }
}

impl VfdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.stride >= self.kernel {
            return Err(Error::Config(format!(
                "pooling stride {} must be in 1..kernel ({})",
                self.stride, self.kernel
            )));
        }
        if self.out_len == 0 {
            return Err(Error::Config("pooled length must be positive".into()));
        }
        Ok(())
    }

    pub fn output_len(&self, channels: usize) -> usize {
        channels * (self.out_len + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NlaParams<T = Tensor> {
    pub theta: T,
    pub phi: T,
    pub g: T,
    /// `[C_e × C]`
    pub out: T,
    pub pairwise: Pairwise,
    /// Halves of `w_cat` applied to θ and φ, each `[C_e × 1]`; concat only.
    pub cat: Option<(T, T)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionBranchParams<T = Tensor> {
    /// `[C_e × C_e]`
    pub w_m: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaHeads<T = Tensor> {
    pub spatial: NlaParams<T>,
    pub temporal: NlaParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AttentionParams<T = Tensor> {
    None,
    Nla(NlaParams<T>),
    Mu(NlaParams<T>, MotionBranchParams<T>),
    Delta(DeltaHeads<T>),
}

fn uniform(rows: usize, cols: usize, rng: &mut SeededRng) -> Tensor {
    let b = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::uniform(vec![rows, cols], -b, b, rng)
}

impl NlaParams {
    /// Bottleneck `C_e = max(C/2, 1)`; `W_out` starts at zero so the block is
    /// the identity until trained.
    pub fn init(c: usize, pairwise: Pairwise, rng: &mut SeededRng) -> Self {
        let ce = (c / 2).max(1);
        let theta = uniform(c, ce, rng);
        let phi = uniform(c, ce, rng);
        let g = uniform(c, ce, rng);
        let cat = match pairwise {
            Pairwise::Concat => Some((uniform(ce, 1, rng), uniform(ce, 1, rng))),
            Pairwise::EmbeddedGaussian => None,
        };
        NlaParams {
            theta,
            phi,
            g,
            out: Tensor::zeros(vec![ce, c]),
            pairwise,
            cat,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.theta.shape()[1]
    }
}

impl<T> NlaParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> NlaParams<U> {
        let mut n = |s: &str, t: &T| f(&format!("{prefix}.{s}"), t);
        NlaParams {
            theta: n("theta", &self.theta),
            phi: n("phi", &self.phi),
            g: n("g", &self.g),
            out: n("out", &self.out),
            pairwise: self.pairwise,
            cat: self
                .cat
                .as_ref()
                .map(|(a, b)| (n("cat_theta", a), n("cat_phi", b))),
        }
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{prefix}.theta"), &mut self.theta));
        out.push((format!("{prefix}.phi"), &mut self.phi));
        out.push((format!("{prefix}.g"), &mut self.g));
        out.push((format!("{prefix}.out"), &mut self.out));
        if let Some((a, b)) = self.cat.as_mut() {
            out.push((format!("{prefix}.cat_theta"), a));
            out.push((format!("{prefix}.cat_phi"), b));
        }
    }
}

impl AttentionParams {
    pub fn init(mode: DistillMode, c: usize, rng: &mut SeededRng) -> Self {
        match mode {
            DistillMode::Vfd => AttentionParams::None,
            DistillMode::NlaEmb | DistillMode::NlaCat => {
                AttentionParams::Nla(NlaParams::init(c, mode.pairwise(), rng))
            }
            DistillMode::DnlaMuEmb | DistillMode::DnlaMuCat => {
                let nla = NlaParams::init(c, mode.pairwise(), rng);
                let ce = nla.embed_dim();
                AttentionParams::Mu(nla, MotionBranchParams { w_m: uniform(ce, ce, rng) })
            }
            DistillMode::DnlaDeltaEmb => AttentionParams::Delta(DeltaHeads {
                spatial: NlaParams::init(c, Pairwise::EmbeddedGaussian, rng),
                temporal: NlaParams::init(c, Pairwise::EmbeddedGaussian, rng),
            }),
        }
    }
}

impl<T> AttentionParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&str, &T) -> U) -> AttentionParams<U> {
        match self {
            AttentionParams::None => AttentionParams::None,
            AttentionParams::Nla(p) => AttentionParams::Nla(p.map("attention.nla", f)),
            AttentionParams::Mu(p, m) => AttentionParams::Mu(
                p.map("attention.nla", f),
                MotionBranchParams {
                    w_m: f("attention.motion.w_m", &m.w_m),
                },
            ),
            AttentionParams::Delta(h) => AttentionParams::Delta(DeltaHeads {
                spatial: h.spatial.map("attention.spatial", f),
                temporal: h.temporal.map("attention.temporal", f),
            }),
        }
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        match self {
            AttentionParams::None => {}
            AttentionParams::Nla(p) => p.named_mut("attention.nla", &mut out),
            AttentionParams::Mu(p, m) => {
                p.named_mut("attention.nla", &mut out);
                out.push(("attention.motion.w_m".into(), &mut m.w_m));
            }
            AttentionParams::Delta(h) => {
                h.spatial.named_mut("attention.spatial", &mut out);
                h.temporal.named_mut("attention.temporal", &mut out);
            }
        }
        out
    }
}

/// Non-local aggregation on `x[B × n × C]`: returns `(g(x), y)` with
/// `y_i = Σ_j f(x_i, x_j) g(x_j) / C(x)`, both `[B × n × C_e]`.
fn nla_aggregate(g: &mut Graph, x: Var, p: &NlaParams<Var>) -> Result<(Var, Var)> {
    let n = g.shape(x)[1];
    let theta = g.matmul(x, p.theta)?;
    let phi = g.matmul(x, p.phi)?;
    let gx = g.matmul(x, p.g)?;
    let weights = match (p.pairwise, p.cat) {
        (Pairwise::EmbeddedGaussian, _) => {
            let phi_t = g.permute(phi, &[0, 2, 1])?;
            let logits = g.matmul(theta, phi_t)?;
            g.softmax(logits, 2)?
        }
        (Pairwise::Concat, Some((wa, wb))) => {
            let a = g.matmul(theta, wa)?;
            let b = g.matmul(phi, wb)?;
            let b_t = g.permute(b, &[0, 2, 1])?;
            let f = g.add(a, b_t)?;
            let f = g.relu(f);
            g.scale(f, 1.0 / n as f64)
        }
        (Pairwise::Concat, None) => {
            return Err(Error::Config("concat attention requires w_cat".into()));
        }
    };
    let y = g.matmul(weights, gx)?;
    Ok((gx, y))
}

/// `W_out·y` for every batch row of `x[B × n × C]`, without the residual.
pub fn nla_delta(g: &mut Graph, x: Var, p: &NlaParams<Var>) -> Result<Var> {
    let (_, y) = nla_aggregate(g, x, p)?;
    g.matmul(y, p.out)
}

fn as_batch(g: &mut Graph, x: Var) -> Result<(Var, usize, usize)> {
    let s = g.shape(x).to_vec();
    if s.len() != 2 {
        return Err(Error::dim("attention", &s, &[0, 0]));
    }
    Ok((g.reshape(x, &[1, s[0], s[1]])?, s[0], s[1]))
}

/// Non-local block with residual on `x[N × C]`.
pub fn nla(g: &mut Graph, x: Var, p: &NlaParams<Var>) -> Result<Var> {
    let (xb, n, c) = as_batch(g, x)?;
    let d = nla_delta(g, xb, p)?;
    let d = g.reshape(d, &[n, c])?;
    g.add(d, x)
}

/// Non-local block plus the motion branch: frame differences of `g(x)`
/// within each clip, lower-quantile masking, an encoding layer, and a mean
/// over time broadcast back onto every frame before the output projection.
pub fn dnla_mu(
    g: &mut Graph,
    x: Var,
    p: &NlaParams<Var>,
    m: &MotionBranchParams<Var>,
    q: f64,
    layout: Layout,
) -> Result<Var> {
    if layout.frames < 2 {
        return Err(Error::DegenerateSequence(format!(
            "motion branch needs at least 2 frames per clip, layout has {}",
            layout.frames
        )));
    }
    let (xb, n, c) = as_batch(g, x)?;
    if n != layout.positions() {
        return Err(Error::dim("dnla_mu", &[n, c], &[layout.clips, layout.frames, layout.joints]));
    }
    let (gx, y) = nla_aggregate(g, xb, p)?;
    let ce = g.shape(gx)[2];
    let Layout { clips, frames, joints } = layout;
    let gt = g.reshape(gx, &[clips, frames, joints * ce])?;
    let diff = g.temporal_difference(gt)?;
    let mask = g.quantile_mask(diff, q)?;
    let masked = g.mul(diff, mask)?;
    let masked = g.reshape(masked, &[clips, frames - 1, joints, ce])?;
    let enc = g.pointwise_conv(masked, m.w_m)?;
    let enc = g.relu(enc);
    let branch = g.mean_axis(enc, 1, true)?;
    let y4 = g.reshape(y, &[clips, frames, joints, ce])?;
    let fused = g.add(y4, branch)?;
    let fused = g.reshape(fused, &[n, ce])?;
    let d = g.matmul(fused, p.out)?;
    g.add(d, x)
}

/// Axis-factored attention: a spatial head over the joints of each frame and
/// a temporal head over the frames of each joint, both added to `x`.
pub fn dnla_delta(g: &mut Graph, x: Var, h: &DeltaHeads<Var>, layout: Layout) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 2 || s[0] != layout.positions() {
        return Err(Error::dim("dnla_delta", &s, &[layout.clips, layout.frames, layout.joints]));
    }
    let c = s[1];
    let Layout { clips, frames, joints } = layout;
    let steps = clips * frames;

    let xs = g.reshape(x, &[steps, joints, c])?;
    let ds = nla_delta(g, xs, &h.spatial)?;
    let ds = g.reshape(ds, &[s[0], c])?;

    let xt = g.reshape(x, &[steps, joints, c])?;
    let xt = g.permute(xt, &[1, 0, 2])?;
    let dt = nla_delta(g, xt, &h.temporal)?;
    let dt = g.permute(dt, &[1, 0, 2])?;
    let dt = g.reshape(dt, &[s[0], c])?;

    let out = g.add(x, ds)?;
    g.add(out, dt)
}

/// `[L × L_in]` averaging matrix with windows `[⌊iL_in/L⌋, ⌈(i+1)L_in/L⌉)`.
pub fn adaptive_pool_matrix(l_in: usize, l: usize) -> Tensor {
    let mut m = vec![0.0; l * l_in];
    for i in 0..l {
        let start = i * l_in / l;
        let end = ((i + 1) * l_in).div_ceil(l);
        let w = 1.0 / (end - start) as f64;
        for j in start..end {
            m[i * l_in + j] = w;
        }
    }
    Tensor::new(vec![l, l_in], m).expect("positive pool shape")
}

/// Overlapping average pooling along positions, resampled to `out_len`
/// rows, plus a global max row; flattened channel-major to
/// `[1 × C·(L+1)]`.
pub fn vfd(g: &mut Graph, x: Var, cfg: &VfdConfig) -> Result<Var> {
    cfg.validate()?;
    let s = g.shape(x).to_vec();
    if s.len() != 2 {
        return Err(Error::dim("vfd", &s, &[cfg.kernel, 0]));
    }
    if s[0] < cfg.kernel {
        return Err(Error::Config(format!(
            "feature matrix has {} positions, pooling kernel needs {}",
            s[0], cfg.kernel
        )));
    }
    let c = s[1];
    let pooled = g.overlap_avg_pool(x, cfg.kernel, cfg.stride)?;
    let l_in = g.shape(pooled)[0];
    let resample = g.constant(adaptive_pool_matrix(l_in, cfg.out_len));
    let avg = g.matmul(resample, pooled)?;
    let mx = g.global_max_pool(x)?;
    let mx = g.reshape(mx, &[1, c])?;
    let rows = g.concat(&[avg, mx], 0)?;
    let cols = g.permute(rows, &[1, 0])?;
    g.reshape(cols, &[1, c * (cfg.out_len + 1)])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillConfig {
    pub mode: DistillMode,
    pub vfd: VfdConfig,
    pub q: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            mode: DistillMode::DnlaDeltaEmb,
            vfd: VfdConfig::default(),
            q: 0.25,
        }
    }
}

/// Applies the configured attention block (if any) and pools.
pub fn distill_graph(
    g: &mut Graph,
    x: Var,
    layout: Layout,
    params: &AttentionParams<Var>,
    cfg: &DistillConfig,
) -> Result<Var> {
    let h = match (cfg.mode, params) {
        (DistillMode::Vfd, AttentionParams::None) => x,
        (DistillMode::NlaEmb | DistillMode::NlaCat, AttentionParams::Nla(p))
            if p.pairwise == cfg.mode.pairwise() =>
        {
            nla(g, x, p)?
        }
        (DistillMode::DnlaMuEmb | DistillMode::DnlaMuCat, AttentionParams::Mu(p, m))
            if p.pairwise == cfg.mode.pairwise() =>
        {
            dnla_mu(g, x, p, m, cfg.q, layout)?
        }
        (DistillMode::DnlaDeltaEmb, AttentionParams::Delta(h)) => dnla_delta(g, x, h, layout)?,
        _ => {
            return Err(Error::Config(format!(
                "attention parameters do not match mode {}",
                cfg.mode
            )))
        }
    };
    vfd(g, h, &cfg.vfd)
}

fn constants(g: &mut Graph, p: &NlaParams<Tensor>) -> NlaParams<Var> {
    p.map("", &mut |_, t| g.constant(t.clone()))
}

// The tensor-level attention evaluators reduce over positions in sorted
// order, so reordering positions permutes their output exactly.

pub fn nla_forward(x: &FeatureMatrix, p: &NlaParams) -> Result<FeatureMatrix> {
    let mut g = Graph::with_sorted_sums();
    let xv = g.constant(x.features.clone());
    let pv = constants(&mut g, p);
    let out = nla(&mut g, xv, &pv)?;
    FeatureMatrix::new(g.value(out).clone(), x.layout)
}

/// Row-stochastic attention matrix `[N × N]` of the embedded-Gaussian form.
pub fn attention_weights(x: &FeatureMatrix, p: &NlaParams) -> Result<Tensor> {
    let mut g = Graph::with_sorted_sums();
    let xv = g.constant(x.features.clone());
    let pv = constants(&mut g, p);
    let theta = g.matmul(xv, pv.theta)?;
    let phi = g.matmul(xv, pv.phi)?;
    let phi_t = g.permute(phi, &[1, 0])?;
    let logits = g.matmul(theta, phi_t)?;
    let w = g.softmax(logits, 1)?;
    Ok(g.value(w).clone())
}

pub fn dnla_mu_forward(
    x: &FeatureMatrix,
    p: &NlaParams,
    m: &MotionBranchParams,
    q: f64,
) -> Result<FeatureMatrix> {
    let mut g = Graph::with_sorted_sums();
    let xv = g.constant(x.features.clone());
    let pv = constants(&mut g, p);
    let mv = MotionBranchParams {
        w_m: g.constant(m.w_m.clone()),
    };
    let out = dnla_mu(&mut g, xv, &pv, &mv, q, x.layout)?;
    FeatureMatrix::new(g.value(out).clone(), x.layout)
}

pub fn dnla_delta_forward(x: &FeatureMatrix, h: &DeltaHeads) -> Result<FeatureMatrix> {
    let mut g = Graph::with_sorted_sums();
    let xv = g.constant(x.features.clone());
    let hv = DeltaHeads {
        spatial: constants(&mut g, &h.spatial),
        temporal: constants(&mut g, &h.temporal),
    };
    let out = dnla_delta(&mut g, xv, &hv, x.layout)?;
    FeatureMatrix::new(g.value(out).clone(), x.layout)
}

/// Sparse vector of length `C·(L+1)`.
pub fn vfd_forward(x: &FeatureMatrix, cfg: &VfdConfig) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let xv = g.constant(x.features.clone());
    let out = vfd(&mut g, xv, cfg)?;
    Ok(g.value(out).data().to_vec())
}

pub fn distill(x: &FeatureMatrix, params: &AttentionParams, cfg: &DistillConfig) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let xv = g.constant(x.features.clone());
    let pv = params.map(&mut |_, t| g.constant(t.clone()));
    let out = distill_graph(&mut g, xv, x.layout, &pv, cfg)?;
    Ok(g.value(out).data().to_vec())
}
