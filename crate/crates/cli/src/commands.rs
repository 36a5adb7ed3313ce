use std::path::Path;

use featseg::clustering::{auto_minibatch, fit_restarts, ClusterModel, LloydConfig, PixelDataset};
use featseg::distill::{self, FcnParams, Image, Real, TrainConfig, LOSS_CURVE};
use featseg::latentdir::{self, DirectionConfig, LatentDirection};
use featseg::maskgen::{synth_dataset, ClassMap};
use featseg::metrics::{evaluate_manifests, MatchMode};
use featseg::tensorio::{self, read_manifest, write_json};
use featseg::toygen::{toy_dataset_range, ToyConfig, TOY_MANIFEST};
use featseg::{Error, Result};
use serde_json::{json, Value};

use crate::{
    ClusterArgs, Command, DistillArgs, EvalArgs, FitDirectionArgs, ManipulateArgs, MatchArg,
    PrecisionArg, PredictArgs, SynthArgs, ToygenArgs,
};

pub fn run(cmd: Command) -> Result<Value> {
    match cmd {
        Command::Toygen(a) => toygen(a),
        Command::Cluster(a) => cluster(a),
        Command::Synth(a) => synth(a),
        Command::FitDirection(a) => fit_direction(a),
        Command::Manipulate(a) => manipulate(a),
        Command::Distill(a) => distill(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
    }
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn toygen(a: ToygenArgs) -> Result<Value> {
    let cfg = ToyConfig {
        image_size: a.size,
        feature_size: a.feature_size,
        feature_dim: a.feature_dim,
        n_regions: a.regions,
        noise_sigma: a.noise_sigma,
        latent_dim: a.latent_dim,
        dataset_seed: a.seed,
        attr_class: a.attr_class,
    };
    cfg.validate()?;
    let m = toy_dataset_range(&cfg, a.start, a.n as usize, &a.out)?;
    eprintln!(
        "wrote {} toy samples to {}",
        m.samples.len(),
        a.out.display()
    );
    Ok(json!({
        "manifest": display(&a.out.join(TOY_MANIFEST)),
        "n_samples": m.samples.len(),
        "n_classes": cfg.n_classes(),
    }))
}

fn cluster(a: ClusterArgs) -> Result<Value> {
    if !(a.rel_tol >= 0.0 && a.rel_tol.is_finite()) {
        return Err(Error::invalid(
            "--rel-tol",
            "must be finite and non-negative",
        ));
    }
    let m = read_manifest(&a.manifest)?;
    let mut data = PixelDataset::from_manifest(&m, a.l2_normalize)?;
    data = data.with_feature_layer(m.feature_layer);
    let k = a.k as usize;
    let minibatch = a
        .minibatch
        .map(|b| b as usize)
        .or_else(|| auto_minibatch(data.n_points()));
    let cfg = LloydConfig {
        max_iters: a.max_iters as usize,
        rel_tol: a.rel_tol,
        minibatch_size: minibatch,
        seed: a.seed,
    };
    eprintln!(
        "clustering {} points of dim {} into {k} clusters ({} restarts)",
        data.n_points(),
        data.dim(),
        a.restarts
    );
    let (model, j) = fit_restarts(&data, k, a.seed, a.restarts as usize, &cfg)?;
    model.save(&a.out)?;
    Ok(json!({
        "model": display(&a.out),
        "sidecar": display(&featseg::clustering::sidecar_path(&a.out)),
        "k": model.k(),
        "dim": model.dim(),
        "n_points": data.n_points(),
        "inertia": j,
        "iterations": model.inertia_history.len(),
        "minibatch": minibatch,
        "l2_normalized": model.l2_normalized,
    }))
}

fn synth(a: SynthArgs) -> Result<Value> {
    let m = read_manifest(&a.manifest)?;
    let model = ClusterModel::load(&a.model)?;
    let cm = a.classmap.as_ref().map(ClassMap::load).transpose()?;
    let out = synth_dataset(&m, &model, cm.as_ref(), &a.out)?;
    eprintln!("wrote {} masks to {}", out.samples.len(), a.out.display());
    Ok(json!({
        "manifest": display(&a.out.join(featseg::maskgen::SYNTH_MANIFEST)),
        "n_samples": out.samples.len(),
        "n_classes": cm.map_or(model.k(), |c| c.n_classes),
    }))
}

fn fit_direction(a: FitDirectionArgs) -> Result<Value> {
    if !(a.l2_penalty >= 0.0 && a.l2_penalty.is_finite()) {
        return Err(Error::invalid(
            "--l2-penalty",
            "must be finite and non-negative",
        ));
    }
    let m = read_manifest(&a.manifest)?;
    let pairs = latentdir::pairs_from_manifest(&m)?;
    let cfg = DirectionConfig {
        l2_penalty: a.l2_penalty,
        max_iters: a.max_iters as usize,
        seed: a.seed,
        ..DirectionConfig::default()
    };
    let dir = latentdir::fit_direction(&pairs, &cfg)?;
    dir.save(&a.out)?;
    Ok(json!({
        "direction": display(&a.out),
        "n_pairs": dir.n_pairs,
        "train_accuracy": dir.train_accuracy,
        "bias": dir.bias,
        "dim": dir.g.len(),
    }))
}

fn manipulate(a: ManipulateArgs) -> Result<Value> {
    if !a.alpha.is_finite() {
        return Err(Error::invalid("--alpha", "must be finite"));
    }
    let w = latentdir::read_latent(&a.latent)?;
    let dir = LatentDirection::load(&a.direction)?;
    let moved = latentdir::manipulate(&w, &dir, a.alpha)?;
    latentdir::write_latent(&moved, &a.out)?;
    let score = |v: &[f64]| v.iter().zip(&dir.g).map(|(x, g)| x * g).sum::<f64>() + dir.bias;
    Ok(json!({
        "latent": display(&a.out),
        "alpha": a.alpha,
        "score_before": score(&w),
        "score_after": score(&moved),
    }))
}

fn train_and_save<T: Real>(
    m: &tensorio::DatasetManifest,
    a: &DistillArgs,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let out = distill::fcn_train::<T>(m, a.classes as usize, cfg)?;
    for (epoch, loss) in out.loss_curve.iter().enumerate() {
        eprintln!("epoch {:>3}  loss {loss:.6}", epoch + 1);
    }
    out.params.save(&a.out)?;
    write_json(&out.loss_curve, a.out.join(LOSS_CURVE))?;
    Ok(out.loss_curve)
}

fn distill(a: DistillArgs) -> Result<Value> {
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        momentum: a.momentum,
        seed: a.seed,
    };
    cfg.validate()?;
    let m = read_manifest(&a.manifest)?;
    let curve = match a.precision {
        PrecisionArg::F32 => train_and_save::<f32>(&m, &a, &cfg)?,
        PrecisionArg::F64 => train_and_save::<f64>(&m, &a, &cfg)?,
    };
    Ok(json!({
        "params": display(&a.out),
        "n_classes": a.classes,
        "epochs": cfg.epochs,
        "final_loss": curve.last(),
        "loss_curve": display(&a.out.join(LOSS_CURVE)),
    }))
}

fn predict_with<T: Real>(a: &PredictArgs) -> Result<Value> {
    let p = FcnParams::<T>::load(&a.params)?;
    if let Some(image) = &a.image {
        let rgb = tensorio::read_rgb_png(image)?;
        let mask = distill::fcn_predict(&p, &Image::from_rgb(&rgb))?;
        tensorio::write_mask_png(&mask, &a.out)?;
        return Ok(json!({
            "mask": display(&a.out),
            "width": mask.width,
            "height": mask.height,
        }));
    }
    let manifest = a
        .manifest
        .as_ref()
        .expect("clap requires --image or --manifest");
    let m = read_manifest(manifest)?;
    let out = distill::predict_dataset(&p, &m, &a.out)?;
    Ok(json!({
        "manifest": display(&a.out.join(distill::PREDICT_MANIFEST)),
        "n_samples": out.samples.len(),
    }))
}

fn predict(a: PredictArgs) -> Result<Value> {
    match a.precision {
        PrecisionArg::F32 => predict_with::<f32>(&a),
        PrecisionArg::F64 => predict_with::<f64>(&a),
    }
}

fn eval(a: EvalArgs) -> Result<Value> {
    let mode = match a.match_mode {
        MatchArg::OneToOne => MatchMode::OneToOne,
        MatchArg::Majority => MatchMode::Majority,
    };
    let pred = read_manifest(&a.pred_manifest)?;
    let gt = read_manifest(&a.gt_manifest)?;
    let report = evaluate_manifests(&pred, &gt, mode)?;
    eprint!("{}", report.to_table());
    write_json(&report, &a.out)?;
    Ok(serde_json::to_value(&report)?)
}
