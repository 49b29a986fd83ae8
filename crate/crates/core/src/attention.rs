//! Learnable per-pretext loss weights `λ = sigmoid(σ) + 1 ∈ (1, 2)` and the
//! combined training objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{Scalar, Tensor};

/// Pretext order used for σ and λ.
pub const PRETEXTS: [&str; 4] = ["rot", "loc", "jig", "clu"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Learned `λ_i = sigmoid(σ_i) + 1`.
    Attention,
    /// Plain summation, every `λ_i = 1`.
    Sum,
    /// Fixed user-supplied weights.
    Manual([f64; 4]),
}

/// `σ` for (rot, loc, jig, clu) plus the fixed few-shot and patch weights.
#[derive(Debug, Clone)]
pub struct PretextWeights<T: Scalar = f32> {
    /// `[4]`, trainable in attention mode.
    pub sigma: Tensor<T>,
    pub alpha: f64,
    pub beta: f64,
    pub mode: WeightMode,
}

impl<T: Scalar> PretextWeights<T> {
    pub fn new(mode: WeightMode) -> Result<Self> {
        let sigma = match mode {
            WeightMode::Attention => Tensor::param(&[4], vec![T::zero(); 4])?,
            _ => Tensor::zeros(&[4])?,
        };
        Ok(Self { sigma, alpha: 1.0, beta: 1.0, mode })
    }

    pub fn attention() -> Self {
        Self::new(WeightMode::Attention).expect("static shape")
    }

    /// Parameters for the optimizer: `σ` in attention mode, nothing
    /// otherwise.
    pub fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        match self.mode {
            WeightMode::Attention => vec![("att.sigma".to_string(), self.sigma.clone())],
            _ => Vec::new(),
        }
    }

    /// Current `λ` values (rot, loc, jig, clu).
    pub fn lambdas(&self) -> [f64; 4] {
        match self.mode {
            WeightMode::Attention => {
                let s = self.sigma.to_f64_vec();
                std::array::from_fn(|i| 1.0 / (1.0 + (-s[i]).exp()) + 1.0)
            }
            WeightMode::Sum => [1.0; 4],
            WeightMode::Manual(w) => w,
        }
    }

    /// `λ_i` as a graph node (a constant outside attention mode).
    pub fn lambda(&self, i: usize) -> Result<Tensor<T>> {
        if i >= 4 {
            return Err(Error::Index(format!("pretext {i} of 4")));
        }
        match self.mode {
            WeightMode::Attention => Ok(pretext_weight(&self.sigma.element(i)?)),
            _ => Tensor::from_f64(&[], &[self.lambdas()[i]]),
        }
    }

    /// Draws `σ` uniformly from `±spread`; used by tests and ablations.
    pub fn randomize(&self, spread: f64, rng: &mut impl rand::Rng) -> Result<()> {
        self.sigma.set_data((0..4).map(|_| T::of(rng.gen_range(-spread..=spread))).collect())
    }
}

/// SUM ablation: all `λ = 1`, `σ` leaves the optimizer.
pub fn disable_attention<T: Scalar>(weights: &PretextWeights<T>) -> PretextWeights<T> {
    PretextWeights {
        sigma: weights.sigma.detach(),
        alpha: weights.alpha,
        beta: weights.beta,
        mode: WeightMode::Sum,
    }
}

/// `sigmoid(σ) + 1`.
pub fn pretext_weight<T: Scalar>(sigma: &Tensor<T>) -> Tensor<T> {
    sigma.sigmoid().add_const(T::one())
}

/// Per-branch losses for one step; `None` marks a disabled branch.
#[derive(Debug, Clone, Default)]
pub struct LossComponents<T: Scalar = f32> {
    pub few: Option<Tensor<T>>,
    pub pat: Option<Tensor<T>>,
    pub rot: Option<Tensor<T>>,
    pub loc: Option<Tensor<T>>,
    pub jig: Option<Tensor<T>>,
    pub clu: Option<Tensor<T>>,
}

impl<T: Scalar> LossComponents<T> {
    pub fn pretexts(&self) -> [Option<&Tensor<T>>; 4] {
        [self.rot.as_ref(), self.loc.as_ref(), self.jig.as_ref(), self.clu.as_ref()]
    }

    fn named(&self) -> [(&'static str, Option<&Tensor<T>>); 6] {
        [
            ("few", self.few.as_ref()),
            ("pat", self.pat.as_ref()),
            ("rot", self.rot.as_ref()),
            ("loc", self.loc.as_ref()),
            ("jig", self.jig.as_ref()),
            ("clu", self.clu.as_ref()),
        ]
    }

    /// Scalar values per branch (few, pat, rot, loc, jig, clu).
    pub fn values(&self) -> [Option<f64>; 6] {
        self.named().map(|(_, t)| t.map(|t| t.item().as_f64()))
    }
}

/// `α·L_few + β·L_pat + Σ λ_i·L_i` over the enabled branches. Fails on a
/// non-finite component, naming it.
pub fn total_loss<T: Scalar>(losses: &LossComponents<T>, weights: &PretextWeights<T>) -> Result<Tensor<T>> {
    for (name, t) in losses.named() {
        if let Some(t) = t {
            if t.numel() != 1 {
                return Err(Error::Dimension(format!("loss `{name}` is not a scalar: {:?}", t.shape())));
            }
            let v = t.item().as_f64();
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss `{name}` = {v}")));
            }
        }
    }
    let mut terms = Vec::new();
    if let Some(l) = &losses.few {
        terms.push(l.scale(T::of(weights.alpha)));
    }
    if let Some(l) = &losses.pat {
        terms.push(l.scale(T::of(weights.beta)));
    }
    for (i, l) in losses.pretexts().into_iter().enumerate() {
        if let Some(l) = l {
            terms.push(l.mul_scalar(&weights.lambda(i)?)?);
        }
    }
    let mut total = Tensor::scalar(T::zero());
    for t in terms {
        total = total.add(&t.reshape(&[])?)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::ndgrad::gradcheck::check_gradients;

    fn consts(v: [f64; 6]) -> LossComponents<f64> {
        let t = |x: f64| Some(Tensor::scalar(x));
        LossComponents { few: t(v[0]), pat: t(v[1]), rot: t(v[2]), loc: t(v[3]), jig: t(v[4]), clu: t(v[5]) }
    }

    #[test]
    fn weight_values() {
        let w = |s: f64| pretext_weight(&Tensor::<f64>::scalar(s)).item();
        assert_eq!(w(0.0), 1.5);
        assert!((w(20.0) - 2.0).abs() < 1e-8);
        assert!((w(-20.0) - 1.0).abs() < 1e-8);
        for s in [-30.0, -3.0, 0.1, 7.0, 30.0] {
            assert!(w(s) >= 1.0 && w(s) <= 2.0);
        }
        let sigma = Tensor::<f64>::param(&[], vec![0.0]).unwrap();
        pretext_weight(&sigma).backward().unwrap();
        assert!((sigma.grad().unwrap()[0] - 0.25).abs() < 1e-12);
        let r = check_gradients(&[sigma], |p| Ok(pretext_weight(&p[0])), 1e-6).unwrap();
        assert!(r.passes(1e-8));
    }

    #[test]
    fn totals() {
        let att = PretextWeights::<f64>::attention();
        assert_eq!(total_loss(&consts([0.0; 6]), &att).unwrap().item(), 0.0);
        assert_eq!(total_loss(&consts([1.0; 6]), &att).unwrap().item(), 8.0);
        let sum = disable_attention(&att);
        assert_eq!(total_loss(&consts([1.0; 6]), &sum).unwrap().item(), 6.0);
        assert!(sum.named_parameters().is_empty());
        assert_eq!(att.named_parameters()[0].0, "att.sigma");

        let manual = PretextWeights::<f64>::new(WeightMode::Manual([0.5, 0.0, 2.0, 1.0])).unwrap();
        assert_eq!(total_loss(&consts([1.0; 6]), &manual).unwrap().item(), 5.5);

        let partial = LossComponents { few: Some(Tensor::scalar(2.0)), rot: Some(Tensor::scalar(1.0)), ..Default::default() };
        assert_eq!(total_loss(&partial, &att).unwrap().item(), 3.5);
    }

    #[test]
    fn non_finite_component_is_named() {
        let mut l = consts([1.0; 6]);
        l.jig = Some(Tensor::scalar(f64::NAN));
        let err = total_loss(&l, &PretextWeights::attention()).unwrap_err();
        assert!(matches!(&err, Error::NonFinite(m) if m.contains("jig")), "{err}");
    }

    #[test]
    fn sigma_gradient_matches_analytic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let w = PretextWeights::<f64>::attention();
            w.randomize(3.0, &mut rng).unwrap();
            let vals: [f64; 6] = std::array::from_fn(|_| rng.gen_range(0.0..3.0));
            total_loss(&consts(vals), &w).unwrap().backward().unwrap();
            let g = w.sigma.grad().unwrap();
            let s = w.sigma.to_vec();
            for i in 0..4 {
                let sig = 1.0 / (1.0 + (-s[i]).exp());
                assert!((g[i] - vals[2 + i] * sig * (1.0 - sig)).abs() < 1e-12);
                assert!(g[i] >= 0.0);
            }
            let r = check_gradients(&[w.sigma.clone()], |_| total_loss(&consts(vals), &w), 1e-6).unwrap();
            assert!(r.passes(1e-6), "{r:?}");
        }
    }

    #[test]
    fn component_gradients_are_scaled_by_lambda() {
        let w = PretextWeights::<f64>::attention();
        let rot = Tensor::<f64>::param(&[], vec![1.0]).unwrap();
        let few = Tensor::<f64>::param(&[], vec![1.0]).unwrap();
        let l = LossComponents { few: Some(few.clone()), rot: Some(rot.clone()), ..Default::default() };
        total_loss(&l, &w).unwrap().backward().unwrap();
        assert_eq!(rot.grad().unwrap()[0], 1.5);
        assert_eq!(few.grad().unwrap()[0], 1.0);
    }

    #[test]
    fn sum_mode_has_no_sigma_gradient() {
        let sum = disable_attention(&PretextWeights::<f64>::attention());
        total_loss(&consts([1.0; 6]), &sum).unwrap();
        assert!(!sum.sigma.requires_grad());
        assert!(sum.sigma.grad().is_none());
    }

    #[test]
    fn saturated_attention_approaches_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let vals: [f64; 6] = std::array::from_fn(|_| rng.gen_range(0.0..2.0));
        let att = PretextWeights::<f64>::attention();
        att.sigma.set_data(vec![-20.0; 4]).unwrap();
        let a = total_loss(&consts(vals), &att).unwrap().item();
        let s = total_loss(&consts(vals), &disable_attention(&att)).unwrap().item();
        assert!((a - s).abs() < 1e-6);
    }

    #[test]
    fn swapping_pretexts_keeps_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = PretextWeights::<f64>::attention();
        w.randomize(2.0, &mut rng).unwrap();
        let vals: [f64; 6] = std::array::from_fn(|_| rng.gen_range(0.0..2.0));
        let before = total_loss(&consts(vals), &w).unwrap().item();
        let mut s = w.sigma.to_vec();
        s.swap(0, 2);
        w.sigma.set_data(s.clone()).unwrap();
        let mut swapped = vals;
        swapped.swap(2, 4);
        let after = total_loss(&consts(swapped), &w).unwrap().item();
        assert!((before - after).abs() < 1e-12);

        let lam = w.lambdas();
        let arg = |v: &[f64]| (0..4).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        assert_eq!(arg(&lam), arg(&s));
    }
}
