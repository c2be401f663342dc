use sparse_aqa::attention::{
    dnla_delta_forward, dnla_mu_forward, nla_forward, DeltaHeads, MotionBranchParams, NlaParams, Pairwise,
};
use sparse_aqa::jfe::{FeatureMatrix, Layout};
use sparse_aqa::tensor::{SeededRng, Tensor};

type Rows = Vec<Vec<f64>>;

fn randomized(c: usize, pairwise: Pairwise, rng: &mut SeededRng) -> NlaParams {
    let mut p = NlaParams::init(c, pairwise, rng);
    p.out = Tensor::uniform(p.out.shape().to_vec(), -1.0, 1.0, rng);
    p
}

fn project(x: &[Vec<f64>], w: &Tensor) -> Rows {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|r| (0..n).map(|j| (0..k).map(|p| r[p] * w.data()[p * n + j]).sum()).collect())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

/// Attention aggregate `y` (before the output projection) by direct loops.
fn aggregate(x: &[Vec<f64>], p: &NlaParams) -> (Rows, Rows) {
    let n = x.len();
    let (theta, phi, g) = (project(x, &p.theta), project(x, &p.phi), project(x, &p.g));
    let ce = g[0].len();
    let mut y = vec![vec![0.0; ce]; n];
    for i in 0..n {
        let w: Vec<f64> = match &p.cat {
            None => {
                let l: Vec<f64> = (0..n).map(|j| dot(&theta[i], &phi[j])).collect();
                let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.iter().map(|v| v / s).collect()
            }
            Some((a, b)) => (0..n)
                .map(|j| (dot(&theta[i], a.data()) + dot(&phi[j], b.data())).max(0.0) / n as f64)
                .collect(),
        };
        for j in 0..n {
            for e in 0..ce {
                y[i][e] += w[j] * g[j][e];
            }
        }
    }
    (y, g)
}

fn delta(x: &[Vec<f64>], p: &NlaParams) -> Rows {
    project(&aggregate(x, p).0, &p.out)
}

fn matrix(layout: Layout, c: usize, rng: &mut SeededRng) -> FeatureMatrix {
    FeatureMatrix::new(Tensor::uniform(vec![layout.positions(), c], -1.0, 1.0, rng), layout).unwrap()
}

fn rows(m: &FeatureMatrix) -> Rows {
    let c = m.features.shape()[1];
    m.features.data().chunks(c).map(|r| r.to_vec()).collect()
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(u, v)| (u - v).abs())
        .fold(0.0, f64::max)
}

#[test]
fn factored_heads_match_per_axis_non_local_blocks() {
    let mut rng = SeededRng::new(31);
    for pairwise in [Pairwise::EmbeddedGaussian, Pairwise::Concat] {
        let layout = Layout { clips: 2, frames: 3, joints: 5 };
        let c = 6;
        let x = matrix(layout, c, &mut rng);
        let heads = DeltaHeads {
            spatial: randomized(c, pairwise, &mut rng),
            temporal: randomized(c, pairwise, &mut rng),
        };
        let got = rows(&dnla_delta_forward(&x, &heads).unwrap());

        let xr = rows(&x);
        let mut want = xr.clone();
        let steps = layout.clips * layout.frames;
        for s in 0..steps {
            let idx: Vec<usize> = (0..layout.joints).map(|j| s * layout.joints + j).collect();
            let sub: Rows = idx.iter().map(|&i| xr[i].clone()).collect();
            for (k, d) in delta(&sub, &heads.spatial).into_iter().enumerate() {
                want[idx[k]].iter_mut().zip(d).for_each(|(w, v)| *w += v);
            }
        }
        for j in 0..layout.joints {
            let idx: Vec<usize> = (0..steps).map(|s| s * layout.joints + j).collect();
            let sub: Rows = idx.iter().map(|&i| xr[i].clone()).collect();
            for (k, d) in delta(&sub, &heads.temporal).into_iter().enumerate() {
                want[idx[k]].iter_mut().zip(d).for_each(|(w, v)| *w += v);
            }
        }
        let err = max_diff(&got, &want);
        assert!(err < 1e-12, "{pairwise:?}: {err:e}");
    }
}

/// Motion branch by direct loops: frame differences of g(x) within each clip,
/// the lowest floor(q·n) of them zeroed, encoded, relu'd, averaged over time
/// and added to the aggregate of every frame before the output projection.
fn motion_oracle(xr: &[Vec<f64>], p: &NlaParams, w_m: &Tensor, q: f64, layout: Layout) -> Rows {
    let (mut y, g) = aggregate(xr, p);
    let ce = g[0].len();
    let at = |clip: usize, t: usize, j: usize| (clip * layout.frames + t) * layout.joints + j;
    let diff = |clip: usize, t: usize, j: usize, e: usize| g[at(clip, t, j)][e] - g[at(clip, t - 1, j)][e];
    let mut all = Vec::new();
    for clip in 0..layout.clips {
        for t in 1..layout.frames {
            for j in 0..layout.joints {
                all.extend((0..ce).map(|e| diff(clip, t, j, e)));
            }
        }
    }
    all.sort_by(f64::total_cmp);
    let threshold = all[(q * all.len() as f64).floor() as usize];
    for clip in 0..layout.clips {
        for j in 0..layout.joints {
            let mut branch = vec![0.0; ce];
            for t in 1..layout.frames {
                let d: Vec<f64> = (0..ce)
                    .map(|e| diff(clip, t, j, e))
                    .map(|v| if v < threshold { 0.0 } else { v })
                    .collect();
                let enc = project(&[d], w_m).remove(0);
                for e in 0..ce {
                    branch[e] += enc[e].max(0.0) / (layout.frames - 1) as f64;
                }
            }
            for t in 0..layout.frames {
                y[at(clip, t, j)].iter_mut().zip(&branch).for_each(|(v, b)| *v += b);
            }
        }
    }
    let mut out = project(&y, &p.out);
    out.iter_mut().zip(xr).for_each(|(w, xv)| w.iter_mut().zip(xv).for_each(|(a, b)| *a += b));
    out
}

#[test]
fn motion_branch_matches_composition_oracle() {
    let mut rng = SeededRng::new(32);
    let layout = Layout { clips: 2, frames: 4, joints: 3 };
    for pairwise in [Pairwise::EmbeddedGaussian, Pairwise::Concat] {
        for q in [0.0, 0.25, 0.5] {
            let c = 4;
            let x = matrix(layout, c, &mut rng);
            let p = randomized(c, pairwise, &mut rng);
            let ce = p.theta.shape()[1];
            let m = MotionBranchParams {
                w_m: Tensor::uniform(vec![ce, ce], -1.0, 1.0, &mut rng),
            };
            let got = rows(&dnla_mu_forward(&x, &p, &m, q).unwrap());
            let want = motion_oracle(&rows(&x), &p, &m.w_m, q, layout);
            let err = max_diff(&got, &want);
            assert!(err < 1e-12, "{pairwise:?} q={q}: {err:e}");
        }
    }
}

#[test]
fn zero_output_projection_is_identity() {
    let mut rng = SeededRng::new(33);
    let layout = Layout { clips: 1, frames: 4, joints: 5 };
    let x = matrix(layout, 8, &mut rng);
    for pairwise in [Pairwise::EmbeddedGaussian, Pairwise::Concat] {
        let p = NlaParams::init(8, pairwise, &mut rng);
        let y = nla_forward(&x, &p).unwrap();
        assert_eq!(y.features, x.features);
    }
}
