//! Score and gender heads, the training loss, rank correlation and Adam.

use crate::error::{Error, Result};
use crate::skeleton::Gender;
use crate::tensor::{Graph, SeededRng, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<T = Tensor> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
    pub w_score: T,
    pub b_score: T,
    pub w_gender: T,
    pub b_gender: T,
}

impl MlpParams {
    pub fn init(input: usize, hidden: [usize; 2], rng: &mut SeededRng) -> Self {
        let layer = |i: usize, o: usize, rng: &mut SeededRng| {
            let b = (6.0 / (i + o) as f64).sqrt();
            Tensor::uniform(vec![i, o], -b, b, rng)
        };
        MlpParams {
            w1: layer(input, hidden[0], rng),
            b1: Tensor::zeros(vec![1, hidden[0]]),
            w2: layer(hidden[0], hidden[1], rng),
            b2: Tensor::zeros(vec![1, hidden[1]]),
            w_score: layer(hidden[1], 1, rng),
            b_score: Tensor::zeros(vec![1, 1]),
            w_gender: layer(hidden[1], 2, rng),
            b_gender: Tensor::zeros(vec![1, 2]),
        }
    }

    pub fn input_len(&self) -> usize {
        self.w1.shape()[0]
    }
}

impl<T> MlpParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&str, &T) -> U) -> MlpParams<U> {
        MlpParams {
            w1: f("mlp.w1", &self.w1),
            b1: f("mlp.b1", &self.b1),
            w2: f("mlp.w2", &self.w2),
            b2: f("mlp.b2", &self.b2),
            w_score: f("mlp.w_score", &self.w_score),
            b_score: f("mlp.b_score", &self.b_score),
            w_gender: f("mlp.w_gender", &self.w_gender),
            b_gender: f("mlp.b_gender", &self.b_gender),
        }
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut T)> {
        vec![
            ("mlp.w1", &mut self.w1),
            ("mlp.b1", &mut self.b1),
            ("mlp.w2", &mut self.w2),
            ("mlp.b2", &mut self.b2),
            ("mlp.w_score", &mut self.w_score),
            ("mlp.b_score", &mut self.b_score),
            ("mlp.w_gender", &mut self.w_gender),
            ("mlp.b_gender", &mut self.b_gender),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub score_norm: f64,
    pub gender_logits: [f64; 2],
}

impl Prediction {
    pub fn gender(&self) -> Gender {
        // ties go to class 0
        Gender::from_class(usize::from(self.gender_logits[1] > self.gender_logits[0]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub w: f64,
    pub lambda_g: f64,
    pub class_loss_enabled: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w: 1.0,
            lambda_g: 0.1,
            class_loss_enabled: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w >= 0.0 && self.lambda_g >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got w={} lambda_g={}",
                self.w, self.lambda_g
            )));
        }
        Ok(())
    }
}

/// Returns `(score [1×1], gender logits [1×2])` for `feat[1 × D]`.
pub fn mlp(g: &mut Graph, feat: Var, p: &MlpParams<Var>) -> Result<(Var, Var)> {
    let affine = |g: &mut Graph, x: Var, w: Var, b: Var| -> Result<Var> {
        let h = g.matmul(x, w)?;
        g.add(h, b)
    };
    let h = affine(g, feat, p.w1, p.b1)?;
    let h = g.relu(h);
    let h = affine(g, h, p.w2, p.b2)?;
    let h = g.relu(h);
    let s = affine(g, h, p.w_score, p.b_score)?;
    let score = g.sigmoid(s);
    let logits = affine(g, h, p.w_gender, p.b_gender)?;
    Ok((score, logits))
}

pub fn mlp_forward(feat: &[f64], p: &MlpParams) -> Result<Prediction> {
    if feat.len() != p.input_len() {
        return Err(Error::dim("mlp_forward", &[1, feat.len()], p.w1.shape()));
    }
    let mut g = Graph::new();
    let f = g.constant(Tensor::new(vec![1, feat.len()], feat.to_vec())?);
    let pv = p.map(&mut |_, t| g.constant(t.clone()));
    let (s, l) = mlp(&mut g, f, &pv)?;
    let l = g.value(l).data();
    Ok(Prediction {
        score_norm: g.value(s).data()[0],
        gender_logits: [l[0], l[1]],
    })
}

/// `|e| + w·e² (+ λ_g·CE)` with `e = score − target`; a `[1]` scalar.
pub fn loss(
    g: &mut Graph,
    score: Var,
    logits: Var,
    target: f64,
    gender: Gender,
    lw: &LossWeights,
) -> Result<Var> {
    let t = g.constant(Tensor::full(g.shape(score).to_vec(), target));
    let e = g.sub(score, t)?;
    let l1 = g.abs(e);
    let l1 = g.sum(l1);
    let sq = g.mul(e, e)?;
    let sq = g.sum(sq);
    let l2 = g.scale(sq, lw.w);
    let mut total = g.add(l1, l2)?;
    if lw.class_loss_enabled {
        let probs = g.softmax(logits, 1)?;
        let mut onehot = [0.0; 2];
        onehot[gender.class()] = 1.0;
        let oh = g.constant(Tensor::new(vec![1, 2], onehot.to_vec())?);
        let p = g.mul(probs, oh)?;
        let p = g.sum(p);
        let lp = g.log(p);
        let ce = g.scale(lp, -lw.lambda_g);
        total = g.add(total, ce)?;
    }
    Ok(total)
}

/// Loss of an already computed prediction against a normalized target.
pub fn total_loss(pred: &Prediction, target_norm: f64, gender: Gender, lw: &LossWeights) -> Result<Tensor> {
    let mut g = Graph::new();
    let s = g.constant(Tensor::new(vec![1, 1], vec![pred.score_norm])?);
    let l = g.constant(Tensor::new(vec![1, 2], pred.gender_logits.to_vec())?);
    let out = loss(&mut g, s, l, target_norm, gender, lw)?;
    Ok(g.value(out).clone())
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.len() != targets.len() {
        return Err(Error::dim("spearman", &[preds.len()], &[targets.len()]));
    }
    if preds.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "need at least 2 samples, got {}",
            preds.len()
        )));
    }
    if preds.iter().chain(targets).any(|v| !v.is_finite()) {
        return Err(Error::UndefinedCorrelation("non-finite input".into()));
    }
    let (ra, rb) = (average_ranks(preds), average_ranks(targets));
    let n = ra.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (a, b) in ra.iter().zip(&rb) {
        let (da, db) = (a - mean, b - mean);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("zero rank variance".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(shapes: &[&[usize]]) -> Self {
        AdamState {
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s.to_vec())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.to_vec())).collect(),
        }
    }
}

/// One bias-corrected Adam update over parallel lists of parameters and
/// gradients.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[&Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(
            "adam_step",
            &[params.len()],
            &[grads.len(), state.m.len()],
        ));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::dim("adam_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (k, p) in params.iter_mut().enumerate() {
        let g = grads[k].data();
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_mlp(d: usize) -> MlpParams {
        let mut p = MlpParams::init(d, [4, 3], &mut SeededRng::new(0));
        for (_, t) in p.named_mut() {
            t.data_mut().fill(0.0);
        }
        p
    }

    #[test]
    fn zero_network() {
        let pred = mlp_forward(&[0.3, -1.0, 2.0], &zero_mlp(3)).unwrap();
        assert_eq!(pred.score_norm, 0.5);
        assert_eq!(pred.gender_logits, [0.0, 0.0]);
    }

    #[test]
    fn bias_path_only() {
        let mut p = MlpParams::init(3, [4, 3], &mut SeededRng::new(1));
        p.b1 = Tensor::new(vec![1, 4], vec![0.5, -0.5, 1.0, 0.0]).unwrap();
        p.b2 = Tensor::new(vec![1, 3], vec![0.1, 0.2, -0.3]).unwrap();
        p.b_score = Tensor::new(vec![1, 1], vec![0.25]).unwrap();
        p.b_gender = Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap();
        let pred = mlp_forward(&[0.0; 3], &p).unwrap();
        let h1 = [0.5, 0.0, 1.0, 0.0];
        let h2: Vec<f64> = (0..3)
            .map(|o| {
                let s: f64 = (0..4).map(|i| h1[i] * p.w2.at(&[i, o])).sum();
                (s + p.b2.at(&[0, o])).max(0.0)
            })
            .collect();
        let s: f64 = (0..3).map(|i| h2[i] * p.w_score.at(&[i, 0])).sum::<f64>() + 0.25;
        assert!((pred.score_norm - 1.0 / (1.0 + (-s).exp())).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(
            mlp_forward(&[0.0; 4], &zero_mlp(3)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn loss_examples() {
        let off = LossWeights {
            w: 0.0,
            lambda_g: 0.1,
            class_loss_enabled: false,
        };
        let pred = |s: f64| Prediction {
            score_norm: s,
            gender_logits: [0.0, 0.0],
        };
        assert_eq!(total_loss(&pred(1.0), 0.0, Gender::Female, &off).unwrap().item().unwrap(), 1.0);
        let half = LossWeights { w: 0.5, ..off };
        assert_eq!(total_loss(&pred(0.5), -1.5, Gender::Female, &half).unwrap().item().unwrap(), 4.0);

        let exact = Prediction {
            score_norm: 0.7,
            gender_logits: [10.0, -10.0],
        };
        let l = total_loss(&exact, 0.7, Gender::Female, &LossWeights::default()).unwrap();
        assert!(l.item().unwrap() < 1e-4 && l.item().unwrap() >= 0.0);
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[2.0, 1.0, 3.0]).unwrap(), 0.5);
        let x: [f64; 5] = [0.3, -1.0, 2.5, 7.0, 0.0];
        let mono: Vec<f64> = x.iter().map(|v| v.exp() * 3.0 + 1.0).collect();
        assert_eq!(spearman(&x, &mono).unwrap(), 1.0);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(spearman(&x, &neg).unwrap(), -1.0);
        assert!(matches!(spearman(&[1.0], &[1.0]), Err(Error::UndefinedCorrelation(_))));
        assert!(matches!(
            spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn tied_ranks() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut p = Tensor::scalar(0.0);
        let g = Tensor::scalar(1.0);
        let mut st = AdamState::new(&[&[1]]);
        adam_step(&mut [&mut p], &[&g], &mut st, &AdamConfig::default()).unwrap();
        assert!((p.item().unwrap() + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn adam_zero_gradient_and_monotone() {
        let mut p = Tensor::scalar(2.0);
        let mut st = AdamState::new(&[&[1]]);
        let cfg = AdamConfig::default();
        adam_step(&mut [&mut p], &[&Tensor::scalar(1.0)], &mut st, &cfg).unwrap();
        let before = (p.clone(), st.m[0].item().unwrap(), st.v[0].item().unwrap());
        adam_step(&mut [&mut p], &[&Tensor::scalar(0.0)], &mut st, &cfg).unwrap();
        assert_eq!(st.m[0].item().unwrap(), before.1 * 0.9);
        assert_eq!(st.v[0].item().unwrap(), before.2 * 0.999);

        let mut p = Tensor::scalar(0.0);
        let mut st = AdamState::new(&[&[1]]);
        let mut last = p.item().unwrap();
        for _ in 0..50 {
            adam_step(&mut [&mut p], &[&Tensor::scalar(0.3)], &mut st, &cfg).unwrap();
            assert!(p.item().unwrap() < last);
            last = p.item().unwrap();
        }
        let mut zero = Tensor::scalar(1.5);
        let mut st = AdamState::new(&[&[1]]);
        adam_step(&mut [&mut zero], &[&Tensor::scalar(0.0)], &mut st, &cfg).unwrap();
        assert_eq!(zero.item().unwrap(), 1.5);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = Tensor::zeros(vec![2]);
        let g = Tensor::zeros(vec![3]);
        let mut st = AdamState::new(&[&[2]]);
        assert!(matches!(
            adam_step(&mut [&mut p], &[&g], &mut st, &AdamConfig::default()),
            Err(Error::Dimension { .. })
        ));
    }
}
