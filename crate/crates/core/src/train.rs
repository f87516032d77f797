//! Adam, the epoch loop and bit-exact checkpoints.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, ParamStore};
use crate::codec::{Reader, Writer};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::loss::{pch_loss, LossWeights, TermValues};
use crate::model::{ArchConfig, Model, Sampling};
use crate::rng::{derive_seed, SeedStream, StreamState};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PCHK";
pub const CHECKPOINT_VERSION: u32 = 1;

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
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub m: ParamStore,
    pub v: ParamStore,
    pub t: u64,
}

impl AdamMoments {
    pub fn new(params: &ParamStore) -> Self {
        let mut m = ParamStore::new();
        for (name, e) in params.iter() {
            m.insert(name, Tensor::zeros(e.value.shape()));
        }
        AdamMoments { v: m.clone(), m, t: 0 }
    }
}

/// One bias-corrected Adam update from the gradients stored in `params`.
pub fn adam_step(params: &mut ParamStore, moments: &mut AdamMoments, cfg: &AdamConfig) -> Result<()> {
    for name in params.names() {
        let shape = params.value(name)?.shape();
        let ok = moments.m.value(name).map(|t| t.shape() == shape).unwrap_or(false)
            && moments.v.value(name).map(|t| t.shape() == shape).unwrap_or(false);
        if !ok {
            return Err(Error::Invalid(format!(
                "Adam moments are not initialized for parameter {name:?}"
            )));
        }
    }
    moments.t += 1;
    let t = moments.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, e) in params.iter_mut() {
        let m = moments.m.get_mut(name)?.value.data_mut();
        let v = moments.v.get_mut(name)?.value.data_mut();
        let g = e.grad.data();
        let w = e.value.data_mut();
        for i in 0..w.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            w[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    /// Clamped to the dataset size.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Linear ramp of the KL weights over the first epoch.
    pub kl_warmup: bool,
    pub weights: LossWeights,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 64,
            epochs: 10,
            seed: 0,
            kl_warmup: false,
            weights: LossWeights::default(),
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        if !(a.lr.is_finite() && a.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", a.lr)));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(Error::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if !(a.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.weights.validate()?;
        self.arch.validate()
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("lr", self.adam.lr);
        kv.set("beta1", self.adam.beta1);
        kv.set("beta2", self.adam.beta2);
        kv.set("eps", self.adam.eps);
        kv.set("batch_size", self.batch_size);
        kv.set("epochs", self.epochs);
        kv.set("seed", self.seed);
        kv.set("kl_warmup", self.kl_warmup);
        self.weights.write_kv(kv);
        self.arch.write_kv(kv);
    }

    pub fn read_kv(&mut self, kv: &KeyValues) -> Result<()> {
        kv.read_into("lr", &mut self.adam.lr)?;
        kv.read_into("beta1", &mut self.adam.beta1)?;
        kv.read_into("beta2", &mut self.adam.beta2)?;
        kv.read_into("eps", &mut self.adam.eps)?;
        kv.read_into("batch_size", &mut self.batch_size)?;
        kv.read_into("epochs", &mut self.epochs)?;
        kv.read_into("seed", &mut self.seed)?;
        kv.read_into("kl_warmup", &mut self.kl_warmup)?;
        self.weights.read_kv(kv)?;
        self.arch.read_kv(kv)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        self.write_kv(&mut kv);
        kv
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.read_kv(kv)?;
        Ok(c)
    }
}

/// Complete training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ParamStore,
    pub moments: AdamMoments,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: StreamState,
}

impl Checkpoint {
    /// Fresh state: initialized parameters, zero moments, epoch 0.
    pub fn initial(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.arch.clone(), derive_seed(config.seed, &[0]))?;
        let rng = SeedStream::new(derive_seed(config.seed, &[1])).state();
        Ok(Checkpoint {
            moments: AdamMoments::new(&model.params),
            params: model.params,
            config,
            epoch: 0,
            rng,
        })
    }

    pub fn model(&self) -> Model {
        Model {
            config: self.config.arch.clone(),
            params: self.params.clone(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(&CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.str(&self.config.to_kv().render())?;
        w.len_u32(self.params.len())?;
        for (name, e) in self.params.iter() {
            w.str(name)?;
            w.tensor_body(&e.value)?;
            w.tensor_body(self.moments.m.value(name)?)?;
            w.tensor_body(self.moments.v.value(name)?)?;
        }
        w.u64(self.moments.t);
        w.u64(self.epoch as u64);
        w.bytes(&self.rng.key);
        w.u64(self.rng.stream);
        w.u128(self.rng.word_pos);
        match self.rng.spare {
            Some(bits) => {
                w.u8(1);
                w.u64(bits);
            }
            None => w.u8(0),
        }
        Ok(w.buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let config = TrainConfig::from_kv(&KeyValues::parse(&r.str("config block")?)?)?;
        let n = r.u32("tensor count")? as usize;
        let mut params = ParamStore::new();
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for _ in 0..n {
            let name = r.str("tensor name")?;
            let value = r.tensor_body()?;
            let mt = r.tensor_body()?;
            let vt = r.tensor_body()?;
            if mt.shape() != value.shape() || vt.shape() != value.shape() {
                return Err(Error::CheckpointMismatch(format!("moment shapes differ for {name:?}")));
            }
            params.insert(name.clone(), value);
            m.insert(name.clone(), mt);
            v.insert(name, vt);
        }
        let t = r.u64("step count")?;
        let epoch = r.u64("epoch")? as usize;
        let key = r.array::<32>("rng key")?;
        let stream = r.u64("rng stream")?;
        let word_pos = r.u128("rng position")?;
        let spare = match r.u8("rng spare flag")? {
            0 => None,
            1 => Some(r.u64("rng spare")?),
            f => return Err(Error::Invalid(format!("bad rng spare flag {f}"))),
        };
        r.finish("checkpoint")?;
        let model = Model::from_params(config.arch.clone(), params)?;
        Ok(Checkpoint {
            config,
            params: model.params,
            moments: AdamMoments { m, v, t },
            epoch,
            rng: StreamState {
                key,
                stream,
                word_pos,
                spare,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Fails unless the checkpoint was trained with `arch`.
    pub fn expect_arch(&self, arch: &ArchConfig) -> Result<()> {
        if &self.config.arch != arch {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint holds a {} model ({:?}), expected {} ({:?})",
                self.config.arch.variant, self.config.arch, arch.variant, arch
            )));
        }
        Ok(())
    }

    pub fn sha256_hex(&self) -> Result<String> {
        Ok(sha256_hex(&self.encode()?))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        write!(s, "{b:02x}").unwrap();
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based epoch index.
    pub epoch: usize,
    /// Epoch means of the per-sample terms; `total` uses the variant's effective weights.
    pub terms: TermValues,
    pub wall_seconds: f64,
}

/// Epoch log as CSV; the wall-clock column is optional so logs can be compared byte for byte.
pub fn epoch_log_csv(log: &[EpochLog], with_wall: bool) -> String {
    let mut s = String::from("epoch,term1,term2,term3,kl1,kl2,total");
    s.push_str(if with_wall { ",wall_seconds\n" } else { "\n" });
    for r in log {
        let t = r.terms;
        write!(
            s,
            "{},{},{},{},{},{},{}",
            r.epoch, t.term1, t.term2, t.term3, t.kl1, t.kl2, t.total
        )
        .unwrap();
        if with_wall {
            write!(s, ",{:.3}", r.wall_seconds).unwrap();
        }
        s.push('\n');
    }
    s
}

/// Steps a [`Checkpoint`] through epochs of a fixed image stack.
pub struct Trainer {
    pub state: Checkpoint,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        Ok(Trainer {
            state: Checkpoint::initial(config)?,
        })
    }

    pub fn resume(state: Checkpoint) -> Result<Self> {
        state.config.validate()?;
        Ok(Trainer { state })
    }

    pub fn finished(&self) -> bool {
        self.state.epoch >= self.state.config.epochs
    }

    /// Runs one epoch over `data` (`(N, 1, S, S)`) with a fresh seeded shuffle.
    pub fn run_epoch(&mut self, data: &Tensor) -> Result<EpochLog> {
        let started = Instant::now();
        let st = &mut self.state;
        let cfg = st.config.clone();
        let s = cfg.arch.image_size;
        if data.shape().len() != 4 || data.shape()[1..] != [1, s, s] {
            return Err(Error::shape(
                "train",
                format!("expected (N, 1, {s}, {s}) images, got {:?}", data.shape()),
            ));
        }
        let n = data.batch();
        let bs = cfg.batch_size.min(n);
        let steps = n.div_ceil(bs);
        let weights = cfg.weights.effective_for(cfg.arch.variant);
        let model_cfg = cfg.arch.clone();
        let mut rng = SeedStream::from_state(&st.rng);
        let order = rng.permutation(n);
        let epoch = st.epoch + 1;
        let mut rows: Vec<TermValues> = Vec::with_capacity(n);

        for (b, idx) in order.chunks(bs).enumerate() {
            let mut w = weights;
            if cfg.kl_warmup && st.epoch == 0 {
                let f = (b + 1) as f64 / steps as f64;
                w.lambda4 *= f;
                w.lambda5 *= f;
            }
            let xb = data.select_rows(idx)?;
            let model = Model {
                config: model_cfg.clone(),
                params: std::mem::take(&mut st.params),
            };
            let mut g = Graph::new();
            let x = g.constant(xb);
            let built = model
                .forward(&mut g, x, &mut Sampling::Draw(&mut rng))
                .and_then(|fp| pch_loss(&mut g, x, &fp, &w));
            let mut params = model.params;
            let lg = match built {
                Ok(lg) => lg,
                Err(e) => {
                    st.params = params;
                    return Err(e);
                }
            };
            let total = g.value(lg.total).item();
            if !total.is_finite() {
                st.params = params;
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    detail: format!("loss is {total}"),
                });
            }
            params.zero_grads();
            let res = g
                .backward(lg.total, &mut params)
                .and_then(|_| adam_step(&mut params, &mut st.moments, &cfg.adam));
            st.params = params;
            res?;
            rows.extend(lg.breakdown(&g).per_sample);
        }

        st.params.zero_grads();
        st.rng = rng.state();
        st.epoch = epoch;
        let mut terms = TermValues::mean_of(&rows);
        terms.total = terms.weighted_total(&weights);
        Ok(EpochLog {
            epoch,
            terms,
            wall_seconds: started.elapsed().as_secs_f64(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Trains from scratch for `config.epochs` epochs.
pub fn train(data: &Tensor, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(Trainer::new(config.clone())?, data, |_| {})
}

/// Continues `trainer` until its configured epoch count, reporting each epoch.
pub fn train_with(mut trainer: Trainer, data: &Tensor, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    let mut log = Vec::new();
    while !trainer.finished() {
        let row = trainer.run_epoch(data)?;
        on_epoch(&row);
        log.push(row);
    }
    Ok(TrainOutcome {
        checkpoint: trainer.state,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn store(v: f64, g: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(v));
        p.get_mut("w").unwrap().grad = Tensor::scalar(g);
        p
    }

    #[test]
    fn adam_first_step_by_hand() {
        let mut p = store(1.0, 1.0);
        let mut m = AdamMoments::new(&p);
        adam_step(&mut p, &mut m, &AdamConfig::default()).unwrap();
        let expect = 1.0 - 1e-4 * (1.0 / (1.0 + 1e-8));
        assert!((p.value("w").unwrap().item() - expect).abs() < 1e-15);
        assert_eq!(m.t, 1);
    }

    #[test]
    fn adam_zero_gradient_decays_moments() {
        let mut p = store(0.5, 2.0);
        let mut m = AdamMoments::new(&p);
        let cfg = AdamConfig::default();
        adam_step(&mut p, &mut m, &cfg).unwrap();
        let before = p.value("w").unwrap().item();
        let (m0, v0) = (m.m.value("w").unwrap().item(), m.v.value("w").unwrap().item());
        p.get_mut("w").unwrap().grad = Tensor::scalar(0.0);
        let mut q = p.clone();
        q.get_mut("w").unwrap().value = Tensor::scalar(before);
        adam_step(&mut q, &mut m, &cfg).unwrap();
        assert!((m.m.value("w").unwrap().item() - 0.9 * m0).abs() < 1e-15);
        assert!((m.v.value("w").unwrap().item() - 0.999 * v0).abs() < 1e-15);
    }

    #[test]
    fn adam_two_steps_match_reference_recurrence() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut p = store(0.3, 0.7);
        let mut mo = AdamMoments::new(&p);
        adam_step(&mut p, &mut mo, &cfg).unwrap();
        adam_step(&mut p, &mut mo, &cfg).unwrap();
        let (mut w, mut m, mut v) = (0.3f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = 0.9 * m + 0.1 * 0.7;
            v = 0.999 * v + 0.001 * 0.49;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p.value("w").unwrap().item() - w).abs() < 1e-12);
    }

    #[test]
    fn adam_requires_moments() {
        let mut p = store(1.0, 1.0);
        let mut m = AdamMoments::new(&ParamStore::new());
        assert!(adam_step(&mut p, &mut m, &AdamConfig::default()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            epochs: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        let mut c = TrainConfig::default();
        c.adam.lr = 0.0;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            seed: 77,
            kl_warmup: true,
            ..Default::default()
        };
        assert_eq!(TrainConfig::from_kv(&c.to_kv()).unwrap(), c);
    }

    fn tiny_config(variant: Variant, epochs: usize) -> TrainConfig {
        TrainConfig {
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            batch_size: 4,
            epochs,
            seed: 5,
            kl_warmup: false,
            weights: LossWeights::default(),
            arch: ArchConfig {
                image_size: 16,
                base_channels: 4,
                z1_dim: 4,
                z2_channels: 2,
                cond_channels: 2,
                variant,
                term3_detached: true,
            },
        }
    }

    fn tiny_data(n: usize) -> Tensor {
        let mut rng = SeedStream::new(99);
        Tensor::from_fn(&[n, 1, 16, 16], |_| rng.normal())
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = tiny_data(10);
        let cfg = tiny_config(Variant::Pch, 3);
        let full = train(&data, &cfg).unwrap();

        let mut t = Trainer::new(cfg.clone()).unwrap();
        let first = t.run_epoch(&data).unwrap();
        let bytes = t.state.encode().unwrap();
        let resumed = train_with(
            Trainer::resume(Checkpoint::decode(&bytes).unwrap()).unwrap(),
            &data,
            |_| {},
        )
        .unwrap();

        assert_eq!(resumed.checkpoint.encode().unwrap(), full.checkpoint.encode().unwrap());
        assert_eq!(first.terms, full.log[0].terms);
        assert_eq!(resumed.log[1].terms, full.log[2].terms);
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let data = tiny_data(6);
        let out = train(&data, &tiny_config(Variant::Ch, 1)).unwrap();
        let bytes = out.checkpoint.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, out.checkpoint);
        assert_eq!(back.encode().unwrap(), bytes);

        assert!(matches!(
            Checkpoint::decode(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated(_))
        ));
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::decode(&bad),
            Err(Error::UnsupportedVersion { .. })
        ));

        let mut wrong = out.checkpoint.clone();
        wrong.config.arch.variant = Variant::Low;
        let err = Checkpoint::decode(&wrong.encode().unwrap()).unwrap_err();
        assert!(matches!(err, Error::CheckpointMismatch(_)), "{err:?}");
        assert!(out.checkpoint.expect_arch(&wrong.config.arch).is_err());
    }

    #[test]
    fn log_rows_are_consistent_and_training_is_deterministic() {
        let data = tiny_data(8);
        let cfg = tiny_config(Variant::Pch, 2);
        let a = train(&data, &cfg).unwrap();
        let b = train(&data, &cfg).unwrap();
        assert_eq!(a.checkpoint.sha256_hex().unwrap(), b.checkpoint.sha256_hex().unwrap());
        assert_eq!(epoch_log_csv(&a.log, false), epoch_log_csv(&b.log, false));
        for row in &a.log {
            let t = row.terms;
            assert!((t.total - t.weighted_total(&cfg.weights)).abs() < 1e-9);
            assert!(t.term3 > 0.0);
        }
        let csv = epoch_log_csv(&a.log, true);
        assert!(csv.starts_with("epoch,term1,term2,term3,kl1,kl2,total,wall_seconds\n"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn divergence_reports_batch() {
        let data = tiny_data(8);
        let mut cfg = tiny_config(Variant::High, 1);
        cfg.batch_size = 3;
        let mut t = Trainer::new(cfg).unwrap();
        let mut bad = data.clone();
        bad.data_mut().fill(f64::NAN);
        match t.run_epoch(&bad) {
            Err(Error::Diverged { epoch: 1, batch: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn warmup_changes_first_epoch_only_weighting() {
        let data = tiny_data(8);
        let mut cfg = tiny_config(Variant::Low, 1);
        let plain = train(&data, &cfg).unwrap();
        cfg.kl_warmup = true;
        let warm = train(&data, &cfg).unwrap();
        assert_ne!(plain.checkpoint.params, warm.checkpoint.params);
    }
}
