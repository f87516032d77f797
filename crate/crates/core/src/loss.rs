//! The five-term loss, closed-form Gaussian KL, ELBO anomaly scores and a
//! mutual-information lower bound for paired samples.
//!
//! ```text
//! L = l1 mse(x, x_high) + l2 mse(x, x_high + x_low) + l3 mean(x_zero^2)
//!   + l4 KL(q(z1|x) || N(0, I)) + l5 KL(q(z2|x, z1) || N(0, I))
//! ```

use crate::autodiff::{Graph, Var};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::model::{ForwardPass, Model, Sampling, Variant};
use crate::rng::SeedStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 1.0,
            lambda5: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
            lambda5: 0.0,
        }
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5]
    }

    pub fn scaled(&self, s: f64) -> Self {
        let [a, b, c, d, e] = self.as_array();
        LossWeights {
            lambda1: s * a,
            lambda2: s * b,
            lambda3: s * c,
            lambda4: s * d,
            lambda5: s * e,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, w) in self.as_array().iter().enumerate() {
            if !(w.is_finite() && *w >= 0.0) {
                return Err(Error::Config(format!(
                    "lambda{} must be finite and nonnegative, got {w}",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// Weights with every term the variant does not produce forced to zero.
    ///
    /// The single-branch variants train on their own reconstruction: High uses
    /// `lambda1` and `lambda4`, Low uses `lambda2` and `lambda5`.
    pub fn effective_for(&self, variant: Variant) -> Self {
        let mut w = *self;
        match variant {
            Variant::High => {
                w.lambda2 = 0.0;
                w.lambda3 = 0.0;
                w.lambda5 = 0.0;
            }
            Variant::Low => {
                w.lambda1 = 0.0;
                w.lambda3 = 0.0;
                w.lambda4 = 0.0;
            }
            Variant::Ch => {
                w.lambda1 = 0.0;
                w.lambda3 = 0.0;
            }
            Variant::Pch => {}
        }
        w
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        for (i, w) in self.as_array().iter().enumerate() {
            kv.set(&format!("lambda{}", i + 1), w);
        }
    }

    pub fn read_kv(&mut self, kv: &KeyValues) -> Result<()> {
        kv.read_into("lambda1", &mut self.lambda1)?;
        kv.read_into("lambda2", &mut self.lambda2)?;
        kv.read_into("lambda3", &mut self.lambda3)?;
        kv.read_into("lambda4", &mut self.lambda4)?;
        kv.read_into("lambda5", &mut self.lambda5)?;
        Ok(())
    }
}

/// One row of loss terms; absent terms are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TermValues {
    pub term1: f64,
    pub term2: f64,
    pub term3: f64,
    pub kl1: f64,
    pub kl2: f64,
    pub total: f64,
}

impl TermValues {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.lambda1 * self.term1
            + w.lambda2 * self.term2
            + w.lambda3 * self.term3
            + w.lambda4 * self.kl1
            + w.lambda5 * self.kl2
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.term1, self.term2, self.term3, self.kl1, self.kl2, self.total]
    }

    fn add_assign(&mut self, o: &TermValues) {
        self.term1 += o.term1;
        self.term2 += o.term2;
        self.term3 += o.term3;
        self.kl1 += o.kl1;
        self.kl2 += o.kl2;
        self.total += o.total;
    }

    fn scale(&mut self, s: f64) {
        self.term1 *= s;
        self.term2 *= s;
        self.term3 *= s;
        self.kl1 *= s;
        self.kl2 *= s;
        self.total *= s;
    }

    /// Sequential mean of rows.
    pub fn mean_of(rows: &[TermValues]) -> TermValues {
        let mut acc = TermValues::default();
        for r in rows {
            acc.add_assign(r);
        }
        if !rows.is_empty() {
            acc.scale(1.0 / rows.len() as f64);
        }
        acc
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub mean: TermValues,
    pub per_sample: Vec<TermValues>,
}

/// Graph handles of a built loss.
#[derive(Clone, Copy, Debug)]
pub struct LossGraph {
    pub term1: Option<Var>,
    pub term2: Option<Var>,
    pub term3: Option<Var>,
    pub kl1: Option<Var>,
    pub kl2: Option<Var>,
    /// Per-sample weighted total, shape `(B,)`.
    pub per_sample: Var,
    /// Batch mean of `per_sample`, a scalar.
    pub total: Var,
    pub weights: LossWeights,
}

impl LossGraph {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let get = |v: Option<Var>| v.map(|v| g.value(v).data().to_vec());
        let cols = [
            get(self.term1),
            get(self.term2),
            get(self.term3),
            get(self.kl1),
            get(self.kl2),
        ];
        let totals = g.value(self.per_sample).data();
        let per_sample: Vec<TermValues> = (0..totals.len())
            .map(|i| {
                let at = |c: &Option<Vec<f64>>| c.as_ref().map_or(0.0, |c| c[i]);
                TermValues {
                    term1: at(&cols[0]),
                    term2: at(&cols[1]),
                    term3: at(&cols[2]),
                    kl1: at(&cols[3]),
                    kl2: at(&cols[4]),
                    total: totals[i],
                }
            })
            .collect();
        LossBreakdown {
            mean: TermValues::mean_of(&per_sample),
            per_sample,
        }
    }
}

/// Per-sample mean squared difference, shape `(B,)`.
pub fn mse_term(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    Ok(g.mean_per_sample(sq))
}

/// Per-sample `0.5 * sum(mu^2 + exp(logvar) - 1 - logvar)`, shape `(B,)`.
pub fn kl_standard_normal(g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
    let m2 = g.square(mu);
    let ev = g.exp(logvar);
    let a = g.add(m2, ev)?;
    let b = g.sub(a, logvar)?;
    let c = g.add_scalar(b, -1.0);
    let s = g.sum_per_sample(c);
    Ok(g.mul_scalar(s, 0.5))
}

/// [`mse_term`] on plain tensors.
pub fn mse_per_sample(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(a.clone()), g.constant(b.clone()));
    let v = mse_term(&mut g, a, b)?;
    Ok(g.value(v).data().to_vec())
}

/// [`kl_standard_normal`] on plain tensors.
pub fn kl_per_sample(mu: &Tensor, logvar: &Tensor) -> Result<Vec<f64>> {
    if mu.shape() != logvar.shape() {
        return Err(Error::shape(
            "kl_standard_normal",
            format!("mu {:?} vs logvar {:?}", mu.shape(), logvar.shape()),
        ));
    }
    let mut g = Graph::new();
    let (m, l) = (g.constant(mu.clone()), g.constant(logvar.clone()));
    let v = kl_standard_normal(&mut g, m, l)?;
    Ok(g.value(v).data().to_vec())
}

fn need(v: Option<Var>, lambda: f64, what: &str, variant: Variant) -> Result<Option<Var>> {
    match v {
        Some(v) => Ok(Some(v)),
        None if lambda > 0.0 => Err(Error::Invalid(format!(
            "{variant} variant produces no {what} but its weight is {lambda}"
        ))),
        None => Ok(None),
    }
}

/// Builds the weighted loss for a forward pass of `x`.
///
/// Terms whose inputs are missing must carry zero weight; use
/// [`LossWeights::effective_for`] to get a consistent set.
pub fn pch_loss(g: &mut Graph, x: Var, fp: &ForwardPass, w: &LossWeights) -> Result<LossGraph> {
    w.validate()?;
    let v = fp.variant;
    let r = &fp.recon;
    let d = &fp.draw;
    let x_high = need(r.x_high, w.lambda1, "x_high", v)?;
    let x_zero = need(r.x_zero, w.lambda3, "x_zero", v)?;
    need(d.mu1, w.lambda4, "z1 posterior", v)?;
    need(d.mu2, w.lambda5, "z2 posterior", v)?;

    let term1 = x_high.map(|xh| mse_term(g, x, xh)).transpose()?;
    let term2 = Some(mse_term(g, x, r.x_combined)?);
    let term3 = x_zero.map(|xz| {
        let sq = g.square(xz);
        g.mean_per_sample(sq)
    });
    let kl1 = match (d.mu1, d.logvar1) {
        (Some(m), Some(l)) => Some(kl_standard_normal(g, m, l)?),
        _ => None,
    };
    let kl2 = match (d.mu2, d.logvar2) {
        (Some(m), Some(l)) => Some(kl_standard_normal(g, m, l)?),
        _ => None,
    };

    let batch = g.value(x).batch();
    let mut per_sample = g.constant(Tensor::zeros(&[batch]));
    for (term, lambda) in [
        (term1, w.lambda1),
        (term2, w.lambda2),
        (term3, w.lambda3),
        (kl1, w.lambda4),
        (kl2, w.lambda5),
    ] {
        if let Some(t) = term {
            if lambda != 0.0 {
                let s = g.mul_scalar(t, lambda);
                per_sample = g.add(per_sample, s)?;
            }
        }
    }
    let total = g.mean(per_sample);
    Ok(LossGraph {
        term1,
        term2,
        term3,
        kl1,
        kl2,
        per_sample,
        total,
        weights: *w,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreOptions {
    pub n_draws: usize,
    /// Add `lambda3 * term3` to the score.
    pub include_term3: bool,
    pub batch_size: usize,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        ScoreOptions {
            n_draws: 1,
            include_term3: false,
            batch_size: 64,
        }
    }
}

/// Per-slice negative-ELBO score and the terms it was built from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SliceScore {
    pub terms: TermValues,
    pub score: f64,
}

/// Negative ELBO per slice (higher = more anomalous), averaged over `n_draws` posterior samples.
pub fn elbo_score(
    model: &Model,
    x: &Tensor,
    weights: &LossWeights,
    rng: &mut SeedStream,
    opts: &ScoreOptions,
) -> Result<Vec<SliceScore>> {
    if opts.n_draws == 0 || opts.batch_size == 0 {
        return Err(Error::Invalid("n_draws and batch_size must be positive".into()));
    }
    let mut w = weights.effective_for(model.variant());
    if !opts.include_term3 {
        w.lambda3 = 0.0;
    }
    let n = x.batch();
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + opts.batch_size).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let xb = x.select_rows(&idx)?;
        let mut acc = vec![TermValues::default(); idx.len()];
        for _ in 0..opts.n_draws {
            let mut g = Graph::new();
            let xv = g.constant(xb.clone());
            let fp = model.forward(&mut g, xv, &mut Sampling::Draw(rng))?;
            let lg = pch_loss(&mut g, xv, &fp, &w)?;
            for (a, row) in acc.iter_mut().zip(lg.breakdown(&g).per_sample) {
                a.add_assign(&row);
            }
        }
        for mut t in acc {
            t.scale(1.0 / opts.n_draws as f64);
            out.push(SliceScore {
                score: t.total,
                terms: t,
            });
        }
        start = end;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiEstimate {
    pub bound: f64,
    pub stderr: f64,
}

/// Monte-Carlo estimate of `E[log G(x|z)] + H(x)`, a lower bound on `I(x; z)`.
pub fn mi_lower_bound<X, Z>(
    samples: &[(X, Z)],
    decoder_loglik: impl Fn(&X, &Z) -> f64,
    entropy_x: f64,
) -> Result<MiEstimate> {
    if samples.len() < 2 {
        return Err(Error::Invalid("mi_lower_bound needs at least two samples".into()));
    }
    let n = samples.len() as f64;
    let ll: Vec<f64> = samples.iter().map(|(x, z)| decoder_loglik(x, z)).collect();
    let mean = ll.iter().sum::<f64>() / n;
    let var = ll.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(MiEstimate {
        bound: mean + entropy_x,
        stderr: (var / n).sqrt(),
    })
}

/// `n` draws of standard bivariate normal `(x, z)` with correlation `rho`.
pub fn gaussian_pairs(rho: f64, n: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = SeedStream::new(seed);
    let s = (1.0 - rho * rho).max(0.0).sqrt();
    (0..n)
        .map(|_| {
            let x = rng.normal();
            let z = rho * x + s * rng.normal();
            (x, z)
        })
        .collect()
}

/// `I(x; z) = -0.5 ln(1 - rho^2)` for a standard bivariate normal.
pub fn gaussian_mi(rho: f64) -> f64 {
    -0.5 * (1.0 - rho * rho).ln()
}

/// Differential entropy of `N(0, 1)`.
pub fn standard_normal_entropy() -> f64 {
    0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln()
}

/// `log N(x; mean, var)`.
pub fn gaussian_loglik(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean).powi(2) / var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference_check, GradCheckOptions};
    use crate::model::ArchConfig;
    use proptest::prelude::*;

    #[test]
    fn mse_examples() {
        let a = Tensor::from_fn(&[2, 1, 4, 4], |i| i as f64 * 0.1);
        assert_eq!(mse_per_sample(&a, &a).unwrap(), vec![0.0, 0.0]);
        let b = a.map(|v| v - 2.0);
        for v in mse_per_sample(&a, &b).unwrap() {
            assert!((v - 4.0).abs() < 1e-12);
        }
        assert!(mse_per_sample(&a, &Tensor::zeros(&[2, 1, 4, 5])).is_err());

        let mut rng = SeedStream::new(3);
        let x = Tensor::from_fn(&[3, 1, 4, 4], |_| rng.normal());
        let y = Tensor::from_fn(&[3, 1, 4, 4], |_| rng.normal());
        let got = mse_per_sample(&x, &y).unwrap();
        for (s, g) in got.iter().enumerate() {
            let mut acc = 0.0;
            for i in 0..16 {
                let d = x.data()[s * 16 + i] - y.data()[s * 16 + i];
                acc += d * d;
            }
            assert!((acc / 16.0 - g).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_examples() {
        let kl = |m: f64, l: f64| {
            kl_per_sample(
                &Tensor::new(vec![1, 1], vec![m]).unwrap(),
                &Tensor::new(vec![1, 1], vec![l]).unwrap(),
            )
            .unwrap()[0]
        };
        assert_eq!(kl(0.0, 0.0), 0.0);
        assert!((kl(1.0, 0.0) - 0.5).abs() < 1e-15);
        assert!((kl(0.0, 4f64.ln()) - 0.806853).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(mu in proptest::collection::vec(-5.0f64..5.0, 6), lv in proptest::collection::vec(-6.0f64..4.0, 6)) {
            let m = Tensor::new(vec![2, 3], mu).unwrap();
            let l = Tensor::new(vec![2, 3], lv).unwrap();
            for v in kl_per_sample(&m, &l).unwrap() {
                prop_assert!(v >= -1e-12);
            }
        }
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = SeedStream::new(11);
        for _ in 0..5 {
            let mu = rng.uniform_in(-2.0, 2.0);
            let lv = rng.uniform_in(-2.0, 1.5);
            let closed = kl_per_sample(
                &Tensor::new(vec![1, 1], vec![mu]).unwrap(),
                &Tensor::new(vec![1, 1], vec![lv]).unwrap(),
            )
            .unwrap()[0];
            let est = monte_carlo_kl(mu, lv, 200_000, &mut rng);
            assert!((closed - est.0).abs() < 3.0 * est.1 + 1e-12, "{closed} vs {est:?}");
        }
    }

    /// Mean and standard error of `log q(z) - log p(z)` with `z ~ q`.
    fn monte_carlo_kl(mu: f64, lv: f64, n: usize, rng: &mut SeedStream) -> (f64, f64) {
        let var = lv.exp();
        let sd = var.sqrt();
        let mut s = 0.0;
        let mut s2 = 0.0;
        for _ in 0..n {
            let z = mu + sd * rng.normal();
            let v = gaussian_loglik(z, mu, var) - gaussian_loglik(z, 0.0, 1.0);
            s += v;
            s2 += v * v;
        }
        let m = s / n as f64;
        let var_hat = (s2 / n as f64 - m * m) * n as f64 / (n as f64 - 1.0);
        (m, (var_hat / n as f64).sqrt())
    }

    fn small_model(v: Variant, seed: u64) -> Model {
        small_model_with(v, seed, true)
    }

    fn small_model_with(v: Variant, seed: u64, term3_detached: bool) -> Model {
        let arch = ArchConfig {
            image_size: 16,
            base_channels: 4,
            z1_dim: 3,
            z2_channels: 2,
            cond_channels: 2,
            variant: v,
            term3_detached,
        };
        Model::new(arch, seed).unwrap()
    }

    fn batch(seed: u64) -> Tensor {
        let mut rng = SeedStream::new(seed);
        Tensor::from_fn(&[2, 1, 16, 16], |_| rng.normal())
    }

    #[test]
    fn zero_weights_give_zero_total() {
        let m = small_model(Variant::Pch, 1);
        let mut g = Graph::new();
        let x = g.constant(batch(2));
        let fp = m
            .forward(&mut g, x, &mut Sampling::Draw(&mut SeedStream::new(3)))
            .unwrap();
        let lg = pch_loss(&mut g, x, &fp, &LossWeights::zero()).unwrap();
        assert_eq!(g.value(lg.total).item(), 0.0);
    }

    #[test]
    fn inconsistent_weights_rejected() {
        let m = small_model(Variant::Ch, 1);
        let mut g = Graph::new();
        let x = g.constant(batch(2));
        let fp = m.forward(&mut g, x, &mut Sampling::Mean).unwrap();
        assert!(pch_loss(&mut g, x, &fp, &LossWeights::default()).is_err());
        assert!(pch_loss(&mut g, x, &fp, &LossWeights::default().effective_for(Variant::Ch)).is_ok());
        let bad = LossWeights {
            lambda1: -1.0,
            ..LossWeights::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn high_variant_is_standard_vae_loss() {
        let m = small_model(Variant::High, 4);
        let mut g = Graph::new();
        let xt = batch(5);
        let x = g.constant(xt.clone());
        let fp = m
            .forward(&mut g, x, &mut Sampling::Draw(&mut SeedStream::new(6)))
            .unwrap();
        let w = LossWeights::default().effective_for(Variant::High);
        let lg = pch_loss(&mut g, x, &fp, &w).unwrap();
        let xh = g.value(fp.recon.x_high.unwrap()).clone();
        let mse = mse_per_sample(&xt, &xh).unwrap();
        let kl = kl_per_sample(g.value(fp.draw.mu1.unwrap()), g.value(fp.draw.logvar1.unwrap())).unwrap();
        let expect = (mse[0] + kl[0] + mse[1] + kl[1]) / 2.0;
        assert!((g.value(lg.total).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn total_matches_direct_recomputation_and_is_linear() {
        let m = small_model(Variant::Pch, 7);
        let xt = batch(8);
        let w = LossWeights {
            lambda1: 0.3,
            lambda2: 1.7,
            lambda3: 0.9,
            lambda4: 0.05,
            lambda5: 0.4,
        };
        let run = |w: &LossWeights| {
            let mut g = Graph::new();
            let x = g.constant(xt.clone());
            let fp = m
                .forward(&mut g, x, &mut Sampling::Draw(&mut SeedStream::new(9)))
                .unwrap();
            let lg = pch_loss(&mut g, x, &fp, w).unwrap();
            let r = crate::model::ReconstructionTensors::collect(&g, &fp.recon);
            let kl1 = kl_direct(g.value(fp.draw.mu1.unwrap()), g.value(fp.draw.logvar1.unwrap()));
            let kl2 = kl_direct(g.value(fp.draw.mu2.unwrap()), g.value(fp.draw.logvar2.unwrap()));
            (lg.breakdown(&g), r, kl1, kl2)
        };
        let (b, r, kl1, kl2) = run(&w);
        let p = 256;
        let mut expected_total = 0.0;
        for s in 0..2 {
            let sl = |t: &Tensor| t.data()[s * p..(s + 1) * p].to_vec();
            let x = sl(&xt);
            let xh = sl(r.x_high.as_ref().unwrap());
            let xc = sl(&r.x_combined);
            let xz = sl(r.x_zero.as_ref().unwrap());
            let t1 = x.iter().zip(&xh).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p as f64;
            let t2 = x.iter().zip(&xc).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p as f64;
            let t3 = xz.iter().map(|a| a * a).sum::<f64>() / p as f64;
            let tot = 0.3 * t1 + 1.7 * t2 + 0.9 * t3 + 0.05 * kl1[s] + 0.4 * kl2[s];
            let row = b.per_sample[s];
            assert!((row.term1 - t1).abs() < 1e-12 && (row.term2 - t2).abs() < 1e-12 && (row.term3 - t3).abs() < 1e-12);
            assert!((row.total - tot).abs() < 1e-10);
            assert!((row.weighted_total(&w) - row.total).abs() < 1e-12);
            expected_total += tot / 2.0;
        }
        assert!((b.mean.total - expected_total).abs() < 1e-10);
        let (b2, ..) = run(&w.scaled(2.0));
        assert_eq!(b2.mean.total, 2.0 * b.mean.total);
    }

    fn kl_direct(mu: &Tensor, lv: &Tensor) -> Vec<f64> {
        let b = mu.batch();
        let per = mu.numel() / b;
        (0..b)
            .map(|s| {
                (s * per..(s + 1) * per)
                    .map(|i| 0.5 * (mu.data()[i].powi(2) + lv.data()[i].exp() - 1.0 - lv.data()[i]))
                    .sum()
            })
            .collect()
    }

    #[test]
    fn pch_loss_gradient_check() {
        let m = small_model_with(Variant::Pch, 21, false);
        let x = batch(22);
        let mut params = m.params.clone();
        let w = LossWeights {
            lambda1: 0.7,
            lambda2: 1.0,
            lambda3: 0.5,
            lambda4: 0.3,
            lambda5: 0.2,
        };
        let cfg = m.config.clone();
        let report = finite_difference_check(
            |g, p| {
                let model = Model {
                    config: cfg.clone(),
                    params: p.clone(),
                };
                let xv = g.constant(x.clone());
                let fp = model.forward(g, xv, &mut Sampling::Draw(&mut SeedStream::new(23)))?;
                Ok(pch_loss(g, xv, &fp, &w)?.total)
            },
            &mut params,
            &GradCheckOptions {
                max_coords_per_param: Some(6),
                ..GradCheckOptions::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn detached_zero_pass_leaves_low_branch_gradients_alone() {
        let x = batch(24);
        let grads = |lambda3: f64| {
            let m = small_model(Variant::Pch, 25);
            let mut params = m.params.clone();
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let fp = m
                .forward(&mut g, xv, &mut Sampling::Draw(&mut SeedStream::new(26)))
                .unwrap();
            let w = LossWeights {
                lambda3,
                ..LossWeights::default()
            };
            let lg = pch_loss(&mut g, xv, &fp, &w).unwrap();
            g.backward(lg.total, &mut params).unwrap();
            params
        };
        let (with, without) = (grads(1.0), grads(0.0));
        for name in ["dec_low.up2.w", "dec_low.conv.w", "enc_low.mu.w", "dec_low.cond.w"] {
            assert_eq!(with.grad(name).unwrap(), without.grad(name).unwrap(), "{name}");
        }
        assert_ne!(
            with.grad("dec_high.up4.w").unwrap(),
            without.grad("dec_high.up4.w").unwrap()
        );
    }

    #[test]
    fn elbo_score_is_finite_and_deterministic() {
        let m = small_model(Variant::Pch, 30);
        let x = Tensor::zeros(&[3, 1, 16, 16]);
        let opts = ScoreOptions {
            n_draws: 2,
            ..ScoreOptions::default()
        };
        let a = elbo_score(&m, &x, &LossWeights::default(), &mut SeedStream::new(1), &opts).unwrap();
        let b = elbo_score(&m, &x, &LossWeights::default(), &mut SeedStream::new(1), &opts).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.score.is_finite()));
        assert!(a.iter().all(|s| s.terms.term3 >= 0.0));
        // default score leaves term 3 out
        for s in &a {
            let t = s.terms;
            assert!((s.score - (t.term1 + t.term2 + t.kl1 + t.kl2)).abs() < 1e-12);
        }
    }

    #[test]
    fn mi_bound_on_gaussian_toy() {
        for (i, rho) in [0.0, 0.5, 0.9].into_iter().enumerate() {
            let pairs = gaussian_pairs(rho, 100_000, 40 + i as u64);
            let cond_var = 1.0 - rho * rho;
            let est = mi_lower_bound(
                &pairs,
                |x, z| gaussian_loglik(*x, rho * z, cond_var),
                standard_normal_entropy(),
            )
            .unwrap();
            let mi = gaussian_mi(rho);
            assert!(est.bound <= mi + 3.0 * est.stderr, "rho {rho}: {est:?} vs {mi}");
            assert!(est.bound >= mi - 0.05, "rho {rho}: {est:?} vs {mi}");
            // a mis-specified decoder stays below the true value
            let poor = mi_lower_bound(
                &pairs,
                |x, z| gaussian_loglik(*x, 0.5 * rho * z, 1.0),
                standard_normal_entropy(),
            )
            .unwrap();
            assert!(poor.bound <= mi + 3.0 * poor.stderr);
        }
        assert!((gaussian_mi(0.9) - 0.8304).abs() < 1e-4);
    }
}
