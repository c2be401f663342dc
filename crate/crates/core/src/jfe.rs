//! Joint feature encoder: one spatial graph convolution followed by two
//! separable temporal convolutions. Also the loader for precomputed
//! appearance features, which take the encoder's place on the video path.
//!
//! Appearance-feature file, little-endian:
//!
//! ```text
//! magic   8 bytes  "AQAFEAT1"
//! clips   u32      must be 7
//! length  u32      L, positions per clip
//! chans   u32      C
//! payload f32 × clips·L·C, row-major [clip][position][channel]
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::skeleton::{AdjacencyGraph, ClipBatch, NUM_CLIPS, NUM_JOINTS};
use crate::tensor::{Graph, SeededRng, Tensor, Var};

const FEAT_MAGIC: &[u8; 8] = b"AQAFEAT1";

/// Extent of each axis of a feature matrix. Positions are ordered clip-major,
/// then time, then joint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub clips: usize,
    pub frames: usize,
    pub joints: usize,
}

impl Layout {
    pub fn positions(&self) -> usize {
        self.clips * self.frames * self.joints
    }
}

#[derive(Clone, Debug)]
pub struct FeatureMatrix {
    /// `[positions × channels]`
    pub features: Tensor,
    pub layout: Layout,
}

impl FeatureMatrix {
    pub fn new(features: Tensor, layout: Layout) -> Result<Self> {
        if features.rank() != 2 || features.shape()[0] != layout.positions() {
            return Err(Error::dim(
                "feature_matrix",
                features.shape(),
                &[layout.clips, layout.frames, layout.joints],
            ));
        }
        Ok(FeatureMatrix { features, layout })
    }

    pub fn positions(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnParams<T = Tensor> {
    pub w: T,
    /// Self-loop gate added to the normalized adjacency.
    pub gate: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SepTemporalParams<T = Tensor> {
    /// `[C × k_t]`
    pub depthwise: T,
    /// `[C × C']`
    pub pointwise: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JfeParams<T = Tensor> {
    pub gcn: GcnParams<T>,
    pub temporal1: SepTemporalParams<T>,
    pub temporal2: SepTemporalParams<T>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JfeConfig {
    /// Input, spatial, first temporal and second temporal widths.
    pub channels: [usize; 4],
    pub kernel: usize,
}

impl Default for JfeConfig {
    fn default() -> Self {
        JfeConfig {
            channels: [2, 32, 32, 64],
            kernel: 9,
        }
    }
}

impl JfeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if !(self.channels[0] == 2 || self.channels[0] == 3) {
            return Err(Error::Config(format!(
                "input channels must be 2 or 3, got {}",
                self.channels[0]
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "temporal kernel must be odd, got {}",
                self.kernel
            )));
        }
        Ok(())
    }

    /// Frames per clip after the strided second stage.
    pub fn out_frames(&self, t: usize) -> usize {
        let pad = (self.kernel - 1) / 2;
        (t + 2 * pad - self.kernel) / 2 + 1
    }

    pub fn out_layout(&self, t: usize) -> Layout {
        Layout {
            clips: NUM_CLIPS,
            frames: self.out_frames(t),
            joints: NUM_JOINTS,
        }
    }
}

fn glorot(rows: usize, cols: usize, rng: &mut SeededRng) -> Tensor {
    let b = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::uniform(vec![rows, cols], -b, b, rng)
}

impl JfeParams {
    pub fn init(cfg: &JfeConfig, rng: &mut SeededRng) -> Self {
        let [c0, c1, c2, c3] = cfg.channels;
        let k = cfg.kernel;
        let dw = |c: usize, rng: &mut SeededRng| {
            let b = (3.0 / k as f64).sqrt();
            Tensor::uniform(vec![c, k], -b, b, rng)
        };
        JfeParams {
            gcn: GcnParams {
                w: glorot(c0, c1, rng),
                gate: Tensor::scalar(0.0),
            },
            temporal1: SepTemporalParams {
                depthwise: dw(c1, rng),
                pointwise: glorot(c1, c2, rng),
            },
            temporal2: SepTemporalParams {
                depthwise: dw(c2, rng),
                pointwise: glorot(c2, c3, rng),
            },
        }
    }
}

impl<T> JfeParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&str, &T) -> U) -> JfeParams<U> {
        JfeParams {
            gcn: GcnParams {
                w: f("jfe.gcn.w", &self.gcn.w),
                gate: f("jfe.gcn.gate", &self.gcn.gate),
            },
            temporal1: SepTemporalParams {
                depthwise: f("jfe.temporal1.depthwise", &self.temporal1.depthwise),
                pointwise: f("jfe.temporal1.pointwise", &self.temporal1.pointwise),
            },
            temporal2: SepTemporalParams {
                depthwise: f("jfe.temporal2.depthwise", &self.temporal2.depthwise),
                pointwise: f("jfe.temporal2.pointwise", &self.temporal2.pointwise),
            },
        }
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut T)> {
        vec![
            ("jfe.gcn.w", &mut self.gcn.w),
            ("jfe.gcn.gate", &mut self.gcn.gate),
            ("jfe.temporal1.depthwise", &mut self.temporal1.depthwise),
            ("jfe.temporal1.pointwise", &mut self.temporal1.pointwise),
            ("jfe.temporal2.depthwise", &mut self.temporal2.depthwise),
            ("jfe.temporal2.pointwise", &mut self.temporal2.pointwise),
        ]
    }
}

/// `relu((A_norm + g·I) · X · W)` per frame on `x[F × 25 × C_in]`, where `F`
/// is any number of frames.
pub fn gcn(g: &mut Graph, x: Var, graph: &AdjacencyGraph, p: &GcnParams<Var>) -> Result<Var> {
    let sx = g.shape(x).to_vec();
    if sx.len() != 3 || sx[1] != NUM_JOINTS {
        return Err(Error::dim("spatial_graph_conv", &sx, &[NUM_JOINTS, NUM_JOINTS]));
    }
    let a = g.constant(graph.normalized.clone());
    let eye = g.constant(Tensor::eye(NUM_JOINTS));
    let gi = g.mul(eye, p.gate)?;
    let a = g.add(a, gi)?;
    let ax = g.matmul(a, x)?;
    let h = g.pointwise_conv(ax, p.w)?;
    Ok(g.relu(h))
}

/// Depthwise temporal convolution, pointwise mixing, relu on `x[B × T × S × C]`.
pub fn sep_temporal(g: &mut Graph, x: Var, p: &SepTemporalParams<Var>, stride: usize) -> Result<Var> {
    let d = g.depthwise_conv1d(x, p.depthwise, stride)?;
    let h = g.pointwise_conv(d, p.pointwise)?;
    Ok(g.relu(h))
}

/// Encodes `clips[7 × T × 25 × C_in]` into `[7·T'·25 × C_out]`.
pub fn jfe_encode(g: &mut Graph, clips: Var, graph: &AdjacencyGraph, p: &JfeParams<Var>) -> Result<Var> {
    let s = g.shape(clips).to_vec();
    if s.len() != 4 || s[2] != NUM_JOINTS {
        return Err(Error::dim("jfe_forward", &s, &[NUM_CLIPS, 0, NUM_JOINTS, 0]));
    }
    let (b, t, c) = (s[0], s[1], s[3]);
    let flat = g.reshape(clips, &[b * t, NUM_JOINTS, c])?;
    let h = gcn(g, flat, graph, &p.gcn)?;
    let c1 = g.shape(h)[2];
    let h = g.reshape(h, &[b, t, NUM_JOINTS, c1])?;
    let h = sep_temporal(g, h, &p.temporal1, 1)?;
    let h = sep_temporal(g, h, &p.temporal2, 2)?;
    let hs = g.shape(h).to_vec();
    g.reshape(h, &[hs[0] * hs[1] * hs[2], hs[3]])
}

fn bind(g: &mut Graph, p: &JfeParams<Tensor>) -> JfeParams<Var> {
    p.map(&mut |_, t| g.constant(t.clone()))
}

pub fn spatial_graph_conv(x: &Tensor, graph: &AdjacencyGraph, p: &GcnParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let pv = GcnParams {
        w: g.constant(p.w.clone()),
        gate: g.constant(p.gate.clone()),
    };
    let out = gcn(&mut g, xv, graph, &pv)?;
    Ok(g.value(out).clone())
}

/// Single-sequence form on `x[T × 25 × C]`; errors if `k_t > T`.
pub fn separable_temporal_conv(x: &Tensor, p: &SepTemporalParams, stride: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::dim("separable_temporal_conv", s, p.depthwise.shape()));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.reshape(vec![1, s[0], s[1], s[2]])?);
    let pv = SepTemporalParams {
        depthwise: g.constant(p.depthwise.clone()),
        pointwise: g.constant(p.pointwise.clone()),
    };
    let out = sep_temporal(&mut g, xv, &pv, stride)?;
    let os = g.shape(out).to_vec();
    g.value(out).reshape(vec![os[1], os[2], os[3]])
}

pub fn jfe_forward(batch: &ClipBatch, graph: &AdjacencyGraph, p: &JfeParams) -> Result<FeatureMatrix> {
    let mut g = Graph::new();
    let x = g.constant(batch.clips.clone());
    let pv = bind(&mut g, p);
    let out = jfe_encode(&mut g, x, graph, &pv)?;
    let frames = g.shape(out)[0] / (NUM_CLIPS * NUM_JOINTS);
    FeatureMatrix::new(
        g.value(out).clone(),
        Layout {
            clips: NUM_CLIPS,
            frames,
            joints: NUM_JOINTS,
        },
    )
}

/// Writes `features[7 × L × C]` in the appearance-feature format.
pub fn write_appearance_features(path: &Path, features: &Tensor) -> Result<()> {
    let s = features.shape();
    if s.len() != 3 {
        return Err(Error::dim("write_appearance_features", s, &[NUM_CLIPS, 0, 0]));
    }
    let mut buf = Vec::with_capacity(20 + 4 * features.numel());
    buf.extend_from_slice(FEAT_MAGIC);
    for &d in s {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in features.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a feature file into a `[7·L × C]` matrix with one "joint" per
/// position. `expected` optionally pins `(L, C)`.
pub fn load_appearance_features(path: &Path, expected: Option<(usize, usize)>) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != FEAT_MAGIC {
        return Err(Error::format(path, "missing AQAFEAT1 header"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (clips, len, chans) = (dim(0), dim(1), dim(2));
    if clips != NUM_CLIPS {
        return Err(Error::format(path, format!("expected {NUM_CLIPS} clips, found {clips}")));
    }
    if len == 0 || chans == 0 {
        return Err(Error::format(path, format!("empty feature shape [{clips}, {len}, {chans}]")));
    }
    if let Some((l, c)) = expected {
        if (l, c) != (len, chans) {
            return Err(Error::format(
                path,
                format!("expected [7, {l}, {c}], found [7, {len}, {chans}]"),
            ));
        }
    }
    let payload = &bytes[20..];
    let n = clips * len * chans;
    if payload.len() != 4 * n {
        return Err(Error::format(
            path,
            format!("payload holds {} bytes, header implies {}", payload.len(), 4 * n),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    FeatureMatrix::new(
        Tensor::new(vec![clips * len, chans], data)?,
        Layout {
            clips,
            frames: len,
            joints: 1,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::build_adjacency;

    fn params(cfg: &JfeConfig, seed: u64) -> JfeParams {
        let mut p = JfeParams::init(cfg, &mut SeededRng::new(seed));
        p.gcn.gate = Tensor::scalar(0.3);
        p
    }

    fn batch(t: usize, c: usize, seed: u64) -> ClipBatch {
        let mut rng = SeededRng::new(seed);
        ClipBatch {
            sample_id: "x".into(),
            clips: Tensor::uniform(vec![NUM_CLIPS, t, NUM_JOINTS, c], -1.0, 1.0, &mut rng),
            label: None,
        }
    }

    #[test]
    fn gcn_identity_hook() {
        let mut graph = build_adjacency();
        graph.normalized = Tensor::eye(NUM_JOINTS);
        let mut rng = SeededRng::new(1);
        let x = Tensor::uniform(vec![3, NUM_JOINTS, 4], -1.0, 1.0, &mut rng);
        let p = GcnParams {
            w: Tensor::eye(4),
            gate: Tensor::scalar(0.0),
        };
        let out = spatial_graph_conv(&x, &graph, &p).unwrap();
        let relu: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
        assert_eq!(out.data(), &relu[..]);
    }

    #[test]
    fn gcn_matches_dense_oracle() {
        let graph = build_adjacency();
        let mut rng = SeededRng::new(2);
        let (t, ci, co) = (4, 3, 5);
        let x = Tensor::uniform(vec![t, NUM_JOINTS, ci], -1.0, 1.0, &mut rng);
        let p = GcnParams {
            w: Tensor::uniform(vec![ci, co], -1.0, 1.0, &mut rng),
            gate: Tensor::scalar(0.7),
        };
        let out = spatial_graph_conv(&x, &graph, &p).unwrap();
        let a = |i: usize, j: usize| graph.normalized.at(&[i, j]) + if i == j { 0.7 } else { 0.0 };
        for f in 0..t {
            for i in 0..NUM_JOINTS {
                for o in 0..co {
                    let mut s = 0.0;
                    for j in 0..NUM_JOINTS {
                        for c in 0..ci {
                            s += a(i, j) * x.at(&[f, j, c]) * p.w.at(&[c, o]);
                        }
                    }
                    assert!((out.at(&[f, i, o]) - s.max(0.0)).abs() < 1e-12);
                }
            }
        }
        let zero = spatial_graph_conv(&Tensor::zeros(vec![t, NUM_JOINTS, ci]), &graph, &p).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gcn_shape_mismatch() {
        let graph = build_adjacency();
        let p = GcnParams {
            w: Tensor::zeros(vec![3, 4]),
            gate: Tensor::scalar(0.0),
        };
        let x = Tensor::zeros(vec![2, NUM_JOINTS, 2]);
        assert!(matches!(
            spatial_graph_conv(&x, &graph, &p),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn temporal_identity_and_smoothing() {
        let mut rng = SeededRng::new(3);
        let x = Tensor::uniform(vec![6, NUM_JOINTS, 2], -1.0, 1.0, &mut rng);
        let p = SepTemporalParams {
            depthwise: Tensor::from_fn(vec![2, 3], |i| if i % 3 == 1 { 1.0 } else { 0.0 }),
            pointwise: Tensor::eye(2),
        };
        let out = separable_temporal_conv(&x, &p, 1).unwrap();
        let relu: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
        assert_eq!(out.data(), &relu[..]);

        let x = Tensor::full(vec![6, NUM_JOINTS, 2], 0.75);
        let p = SepTemporalParams {
            depthwise: Tensor::full(vec![2, 3], 1.0 / 3.0),
            pointwise: Tensor::eye(2),
        };
        let out = separable_temporal_conv(&x, &p, 1).unwrap();
        for t in 1..5 {
            assert!((out.at(&[t, 7, 1]) - 0.75).abs() < 1e-15);
        }
        assert!((out.at(&[0, 7, 1]) - 0.5).abs() < 1e-15);
        assert!((out.at(&[5, 7, 1]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn temporal_matches_sliding_window_oracle() {
        let mut rng = SeededRng::new(4);
        let (t, c, co, k) = (7, 3, 4, 5);
        let x = Tensor::uniform(vec![t, NUM_JOINTS, c], -1.0, 1.0, &mut rng);
        let p = SepTemporalParams {
            depthwise: Tensor::uniform(vec![c, k], -1.0, 1.0, &mut rng),
            pointwise: Tensor::uniform(vec![c, co], -1.0, 1.0, &mut rng),
        };
        for stride in [1, 2] {
            let out = separable_temporal_conv(&x, &p, stride).unwrap();
            let t_out = (t - 1) / stride + 1;
            assert_eq!(out.shape(), &[t_out, NUM_JOINTS, co]);
            for to in 0..t_out {
                for j in 0..NUM_JOINTS {
                    let mut dw = vec![0.0; c];
                    for (ch, d) in dw.iter_mut().enumerate() {
                        for w in 0..k {
                            let ti = (to * stride + w) as isize - (k as isize - 1) / 2;
                            if ti >= 0 && (ti as usize) < t {
                                *d += p.depthwise.at(&[ch, w]) * x.at(&[ti as usize, j, ch]);
                            }
                        }
                    }
                    for o in 0..co {
                        let s: f64 = (0..c).map(|ch| dw[ch] * p.pointwise.at(&[ch, o])).sum();
                        assert!((out.at(&[to, j, o]) - s.max(0.0)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn kernel_longer_than_clip_is_config_error() {
        let p = SepTemporalParams {
            depthwise: Tensor::zeros(vec![2, 9]),
            pointwise: Tensor::eye(2),
        };
        let x = Tensor::zeros(vec![8, NUM_JOINTS, 2]);
        assert!(matches!(separable_temporal_conv(&x, &p, 1), Err(Error::Config(_))));
    }

    #[test]
    fn forward_shape_for_channel_plans() {
        let graph = build_adjacency();
        for (plan, t, frames) in [
            ([2, 32, 32, 32], 16, 8),
            ([3, 8, 16, 24], 10, 5),
            ([2, 4, 4, 6], 9, 5),
        ] {
            let cfg = JfeConfig {
                channels: plan,
                kernel: 5,
            };
            let out = jfe_forward(&batch(t, plan[0], 5), &graph, &params(&cfg, 6)).unwrap();
            assert_eq!(out.features.shape(), &[NUM_CLIPS * frames * NUM_JOINTS, plan[3]]);
            assert_eq!(out.layout, cfg.out_layout(t));
        }
        let cfg = JfeConfig::default();
        let out = jfe_forward(&batch(16, 2, 7), &graph, &params(&cfg, 8)).unwrap();
        assert_eq!(out.features.shape(), &[1400, 64]);
    }

    #[test]
    fn zero_input_gives_zero_features() {
        let graph = build_adjacency();
        let cfg = JfeConfig::default();
        let mut b = batch(16, 2, 9);
        b.clips = Tensor::zeros(b.clips.shape().to_vec());
        let out = jfe_forward(&b, &graph, &params(&cfg, 10)).unwrap();
        assert!(out.features.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let graph = build_adjacency();
        let cfg = JfeConfig::default();
        let a = jfe_forward(&batch(16, 2, 11), &graph, &params(&cfg, 12)).unwrap();
        let b = jfe_forward(&batch(16, 2, 11), &graph, &params(&cfg, 12)).unwrap();
        assert!(a.features.bitwise_eq(&b.features));
    }

    #[test]
    fn zero_gate_is_ungated() {
        let graph = build_adjacency();
        let cfg = JfeConfig::default();
        let mut p = params(&cfg, 13);
        p.gcn.gate = Tensor::scalar(0.0);
        let b = batch(16, 2, 14);
        let gated = jfe_forward(&b, &graph, &p).unwrap();

        let mut g = Graph::new();
        let x = g.constant(b.clips.reshape(vec![NUM_CLIPS * 16, NUM_JOINTS, 2]).unwrap());
        let a = g.constant(graph.normalized.clone());
        let w = g.constant(p.gcn.w.clone());
        let ax = g.matmul(a, x).unwrap();
        let h = g.pointwise_conv(ax, w).unwrap();
        let h = g.relu(h);
        let h = g.reshape(h, &[NUM_CLIPS, 16, NUM_JOINTS, 32]).unwrap();
        let pv = bind(&mut g, &p);
        let h = sep_temporal(&mut g, h, &pv.temporal1, 1).unwrap();
        let h = sep_temporal(&mut g, h, &pv.temporal2, 2).unwrap();
        let h = g.reshape(h, &[1400, 64]).unwrap();
        assert!(gated.features.bitwise_eq(g.value(h)));
    }

    #[test]
    fn every_parameter_gets_gradient() {
        let graph = build_adjacency();
        let cfg = JfeConfig {
            channels: [2, 4, 4, 6],
            kernel: 5,
        };
        let p = params(&cfg, 15);
        let b = batch(8, 2, 16);
        let mut g = Graph::new();
        let pv = p.map(&mut |_, t| g.param(t.clone()));
        let x = g.constant(b.clips.clone());
        let out = jfe_encode(&mut g, x, &graph, &pv).unwrap();
        let w = g.constant(Tensor::from_fn(g.shape(out).to_vec(), |i| ((i % 13) as f64 - 6.0) / 7.0));
        let y = g.mul(out, w).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        let mut pv = pv;
        for (name, v) in pv.named_mut() {
            let gr = grads.get(*v).unwrap();
            assert!(gr.data().iter().any(|&x| x != 0.0), "{name} has zero gradient");
        }
    }

    #[test]
    fn appearance_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.feat");
        // f32-representable values survive the round trip exactly
        let t = Tensor::from_fn(vec![7, 4, 64], |i| (i % 97) as f64 * 0.25 - 3.0);
        write_appearance_features(&path, &t).unwrap();
        let fm = load_appearance_features(&path, Some((4, 64))).unwrap();
        assert_eq!(fm.features.shape(), &[28, 64]);
        assert_eq!(fm.features.data(), t.data());
        assert_eq!(fm.layout, Layout { clips: 7, frames: 4, joints: 1 });
        assert!(matches!(
            load_appearance_features(&path, Some((5, 64))),
            Err(Error::Format { .. })
        ));

        let six = dir.path().join("six.feat");
        write_appearance_features(&six, &Tensor::zeros(vec![6, 4, 8])).unwrap();
        assert!(matches!(load_appearance_features(&six, None), Err(Error::Format { .. })));

        assert!(matches!(
            load_appearance_features(&dir.path().join("missing.feat"), None),
            Err(Error::Io { .. })
        ));
    }
}
