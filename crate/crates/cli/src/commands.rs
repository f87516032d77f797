use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pchvae::autodiff::{finite_difference_check, GradCheckOptions};
use pchvae::config::KeyValues;
use pchvae::experiment::{self, EvalOptions, SweepConfig, SweepEvent, TableRow};
use pchvae::linear_pc::{
    bound_check, eckart_young_optimum, objective_eq1, objective_eq2, pca_oracle, planted_spectrum, principal_angles,
    reconstruction_error, train_linear, LinearAE, LinearTrainConfig, ObjectiveWeights,
};
use pchvae::loss::{pch_loss, LossWeights, ScoreOptions};
use pchvae::model::{ArchConfig, Model, Sampling, Variant};
use pchvae::phantom::{export_pgm, generate_dataset, Dataset, DatasetSpec, Label};
use pchvae::train::{epoch_log_csv, train_with, Checkpoint, Trainer};
use pchvae::{Error, Result, SeedStream, Tensor};

use crate::settings::{train_config, write_text, CONFIG_ECHO};

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn gen_data(a: &crate::GenData) -> Result<()> {
    let spec = DatasetSpec {
        n_train: a.n_train,
        n_val: a.n_val,
        n_test: a.n_test,
        anomaly_fraction: a.anomaly_frac,
        image_size: a.size,
        master_seed: a.seed,
        family: a.anomaly_family.parse()?,
    };
    let started = Instant::now();
    let data = generate_dataset(&spec)?;
    data.save(&a.out)?;
    let mut kv = data.manifest.to_kv();
    kv.set("command", "gen-data");
    write_text(&a.out.join(CONFIG_ECHO), &kv.render())?;
    let n_anom = data.test_labels.iter().filter(|l| **l == Label::Anomalous).count();
    println!(
        "wrote {} train / {} val / {} test slices ({} anomalous, {}) of {}x{} to {} in {:.1}s",
        spec.n_train,
        spec.n_val,
        spec.n_test,
        n_anom,
        spec.family,
        spec.image_size,
        spec.image_size,
        a.out.display(),
        started.elapsed().as_secs_f64()
    );
    println!(
        "standardization: mean {:.6} std {:.6}",
        data.manifest.standardization.mean, data.manifest.standardization.std
    );
    Ok(())
}

pub fn train(a: &crate::Train) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let mut extra = vec![("image_size", data.image_size().to_string())];
    if let Some(v) = &a.variant {
        extra.push(("variant", v.parse::<Variant>()?.to_string()));
    }
    if let Some(s) = a.seed {
        extra.push(("seed", s.to_string()));
    }
    let cfg = train_config(&a.flags, &extra)?;
    let trainer = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            ck.expect_arch(&cfg.arch)?;
            let mut ck = ck;
            ck.config.epochs = cfg.epochs;
            Trainer::resume(ck)?
        }
        None => Trainer::new(cfg.clone())?,
    };
    println!(
        "training {} ({} parameters) on {} slices for {} epochs",
        cfg.arch.variant,
        Model::new(cfg.arch.clone(), 0)?.num_parameters(),
        data.train.batch(),
        cfg.epochs
    );
    let outcome = train_with(trainer, &data.train, |row| {
        let t = row.terms;
        println!(
            "epoch {:>3}  total {:.5}  term1 {:.5}  term2 {:.5}  term3 {:.5}  kl1 {:.4}  kl2 {:.4}  ({:.1}s)",
            row.epoch, t.total, t.term1, t.term2, t.term3, t.kl1, t.kl2, row.wall_seconds
        );
    })?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    outcome.checkpoint.save(&a.out)?;
    write_text(
        &sibling(&a.out, ".config.txt"),
        &outcome.checkpoint.config.to_kv().render(),
    )?;
    write_text(&sibling(&a.out, ".log.csv"), &epoch_log_csv(&outcome.log, true))?;
    println!(
        "checkpoint {} sha256 {}",
        a.out.display(),
        outcome.checkpoint.sha256_hex()?
    );
    Ok(())
}

pub fn eval(a: &crate::Eval) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let ck = Checkpoint::load(&a.ckpt)?;
    let opts = EvalOptions {
        score: ScoreOptions {
            n_draws: a.n_draws,
            include_term3: a.include_term3,
            ..ScoreOptions::default()
        },
        score_seed: a.score_seed,
        sampled_mse: a.sampled_mse,
    };
    let r = experiment::evaluate(&ck.model(), &ck.config.weights, &data, &opts)?;
    let row = TableRow::from_results(r.variant, &[&r]);
    write_text(&a.out, &experiment::table_csv(&[row]))?;
    if let Some(p) = &a.scores {
        write_text(p, &experiment::scores_csv(&r))?;
    }
    let mut kv = ck.config.to_kv();
    kv.set("n_draws", a.n_draws);
    kv.set("include_term3", a.include_term3);
    kv.set("score_seed", a.score_seed);
    kv.set("sampled_mse", a.sampled_mse);
    write_text(&sibling(&a.out, ".config.txt"), &kv.render())?;
    println!("{}: mse {:.5}  auroc {:.4}  ap {:.4}", r.variant, r.mse, r.auroc, r.ap);
    Ok(())
}

pub fn reconstruct(a: &crate::Reconstruct) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let ck = Checkpoint::load(&a.ckpt)?;
    let split = match a.split.as_str() {
        "test" => &data.test,
        "train" => &data.train,
        "val" => data
            .val
            .as_ref()
            .ok_or_else(|| Error::Invalid("dataset has no val split".into()))?,
        other => return Err(Error::Invalid(format!("unknown split {other:?}"))),
    };
    if a.slice >= split.batch() {
        return Err(Error::Invalid(format!(
            "slice {} out of range (split has {})",
            a.slice,
            split.batch()
        )));
    }
    let x = split.select_rows(&[a.slice])?;
    let r = ck.model().reconstruct(&x)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let panels: [(&str, Option<&Tensor>); 5] = [
        ("input", Some(&x)),
        ("x_high", r.x_high.as_ref()),
        ("x_low", r.x_low.as_ref()),
        ("x_combined", Some(&r.x_combined)),
        ("x_zero", r.x_zero.as_ref()),
    ];
    for (name, t) in panels {
        if let Some(t) = t {
            let p = a.out.join(format!("{name}.pgm"));
            export_pgm(&p, t)?;
            println!("wrote {}", p.display());
        }
    }
    let mut kv = ck.config.to_kv();
    kv.set("slice", a.slice);
    kv.set("split", &a.split);
    write_text(&a.out.join(CONFIG_ECHO), &kv.render())?;
    Ok(())
}

pub fn grad_check(a: &crate::GradCheck) -> Result<()> {
    let variants = match &a.variant {
        Some(v) => vec![v.parse::<Variant>()?],
        None => Variant::ALL.to_vec(),
    };
    let mut rng = SeedStream::new(a.seed);
    let x = Tensor::from_fn(&[a.batch.max(1), 1, a.size, a.size], |_| rng.normal());
    let mut all_ok = true;
    for variant in variants {
        let started = Instant::now();
        // the exact gradient of the full loss includes the zero pass through x_low
        let arch = ArchConfig {
            image_size: a.size,
            base_channels: a.base_channels,
            variant,
            term3_detached: false,
            ..ArchConfig::default()
        };
        let model = Model::new(arch.clone(), a.seed)?;
        let weights = LossWeights {
            lambda1: 0.9,
            lambda2: 1.1,
            lambda3: 0.7,
            lambda4: 0.3,
            lambda5: 0.2,
        }
        .effective_for(variant);
        let mut params = model.params.clone();
        let opts = GradCheckOptions {
            step: a.step,
            tolerance: a.tolerance,
            max_coords_per_param: (a.coords > 0).then_some(a.coords),
            seed: a.seed,
            ..GradCheckOptions::default()
        };
        let noise_seed = a.seed.wrapping_add(1);
        let report = finite_difference_check(
            |g, p| {
                let m = Model {
                    config: arch.clone(),
                    params: p.clone(),
                };
                let xv = g.constant(x.clone());
                let fp = m.forward(g, xv, &mut Sampling::Draw(&mut SeedStream::new(noise_seed)))?;
                Ok(pch_loss(g, xv, &fp, &weights)?.total)
            },
            &mut params,
            &opts,
        )?;
        let checked: usize = report.params.iter().map(|p| p.checked).sum();
        let ok = report.passed();
        all_ok &= ok;
        println!(
            "{:<5} {}  max relative error {:.3e} over {} coordinates in {} tensors ({:.1}s)",
            variant.as_str(),
            if ok { "PASS" } else { "FAIL" },
            report.max_rel_error(),
            checked,
            report.params.len(),
            started.elapsed().as_secs_f64()
        );
        if !ok {
            for p in report.params.iter().filter(|p| p.max_rel_error >= a.tolerance) {
                println!("      {}: {:.3e} at {:?}", p.name, p.max_rel_error, p.worst);
            }
        }
    }
    if all_ok {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "gradient check failed (tolerance {:e})",
            a.tolerance
        )))
    }
}

fn degrees(rad: f64) -> f64 {
    rad.to_degrees()
}

pub fn linear_demo(a: &crate::LinearDemo) -> Result<()> {
    let spectrum: Vec<f64> = (0..a.d).map(|i| 10.0 * 0.6f64.powi(i as i32)).collect();
    let x = planted_spectrum(&spectrum, a.n, a.seed)?;
    let init = LinearAE::random(a.d, a.k1, a.k2, a.seed.wrapping_add(1))?;
    let b = bound_check(&x, &init, 1.0, 1.0)?;
    println!("d {} k1 {} k2 {} n {}", a.d, a.k1, a.k2, a.n);
    println!(
        "random init: one-step objective {:.6}  three-term objective {:.6}  bound {}",
        b.lhs,
        b.rhs,
        if b.holds { "holds" } else { "VIOLATED" }
    );
    let cfg = LinearTrainConfig {
        steps: a.steps,
        ..LinearTrainConfig::default()
    };
    let pca_fit = train_linear(
        &x,
        &init,
        ObjectiveWeights {
            l1: 1.0,
            l2: 0.0,
            l3: 0.0,
        },
        &cfg,
    )?;
    let pca = pca_oracle(&x, a.k1 + a.k2)?;
    let top = pca.components.leading_columns(a.k1);
    let angles = principal_angles(&pca_fit.ae.w1, &top)?;
    let err = reconstruction_error(&x, &pca_fit.ae.w1)?;
    let opt = eckart_young_optimum(&x, a.k1)?;
    println!(
        "first component only: largest principal angle to PCA {:.3} deg, reconstruction error {:.6} vs optimum {:.6} ({:+.3}%)",
        angles.iter().copied().fold(0.0, f64::max).to_degrees(),
        err,
        opt,
        100.0 * (err / opt - 1.0)
    );
    let full = train_linear(
        &x,
        &pca_fit.ae,
        ObjectiveWeights {
            l1: 1.0,
            l2: 1.0,
            l3: 1.0,
        },
        &cfg,
    )?;
    let ae = &full.ae;
    let both = pchvae::linear_pc::Matrix::from_columns(
        &(0..a.k1)
            .map(|j| ae.w1.column(j))
            .chain((0..a.k2).map(|j| ae.w2.column(j)))
            .collect::<Vec<_>>(),
    )?;
    let joint = principal_angles(&both, &pca.components)?;
    println!(
        "two components: one-step objective {:.6}  three-term objective {:.6}  largest angle of span(w1, w2) to PCA {:.3} deg",
        objective_eq1(&x, ae, 1.0, 1.0)?,
        objective_eq2(&x, ae, 1.0, 1.0, 1.0)?,
        degrees(joint.iter().copied().fold(0.0, f64::max))
    );
    if let Some(out) = &a.out {
        let mut csv = String::from("phase,step,objective\n");
        for (i, v) in pca_fit.trace.iter().enumerate() {
            csv.push_str(&format!("first,{i},{v}\n"));
        }
        for (i, v) in full.trace.iter().enumerate() {
            csv.push_str(&format!("both,{i},{v}\n"));
        }
        write_text(out, &csv)?;
        let mut kv = KeyValues::new();
        kv.set("d", a.d);
        kv.set("k1", a.k1);
        kv.set("k2", a.k2);
        kv.set("n", a.n);
        kv.set("seed", a.seed);
        kv.set("steps", a.steps);
        write_text(&sibling(out, ".config.txt"), &kv.render())?;
    }
    Ok(())
}

pub fn sweep(a: &crate::Sweep) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let cfg = train_config(&a.flags, &[("image_size", data.image_size().to_string())])?;
    let variants = a.variants.iter().map(|v| v.parse()).collect::<Result<Vec<Variant>>>()?;
    let seeds: Vec<u64> = (a.first_seed..a.first_seed + a.seeds).collect();
    let sc = SweepConfig {
        variants,
        seeds,
        train: cfg,
        eval: EvalOptions {
            score: ScoreOptions {
                n_draws: a.n_draws,
                include_term3: a.include_term3,
                ..ScoreOptions::default()
            },
            ..EvalOptions::default()
        },
    };
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut kv = sc.train.to_kv();
    kv.remove("seed");
    kv.remove("variant");
    kv.set("variants", a.variants.join(","));
    kv.set("seeds", format!("{}..{}", a.first_seed, a.first_seed + a.seeds));
    kv.set("n_draws", a.n_draws);
    kv.set("include_term3", a.include_term3);
    write_text(&a.out.join(CONFIG_ECHO), &kv.render())?;
    let result = experiment::sweep(&data, &sc, Some(&a.out), |ev| match ev {
        SweepEvent::Epoch { variant, seed, log } => {
            eprintln!(
                "  {variant} seed {seed} epoch {:>3} total {:.5} ({:.1}s)",
                log.epoch, log.terms.total, log.wall_seconds
            )
        }
        SweepEvent::Run(r) => println!(
            "{:<5} seed {}: mse {:.5}  auroc {:.4}  ap {:.4}",
            r.variant.as_str(),
            r.seed,
            r.eval.mse,
            r.eval.auroc,
            r.eval.ap
        ),
    })?;
    println!("\n{}", experiment::table_csv(&result.rows));
    Ok(())
}
