use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde_json::json;
use vdm_core::checkpoint::{self, Checkpoint};
use vdm_core::config::RunConfig;
use vdm_core::data::{self, CountingData, Pixmap, TensorSet};
use vdm_core::eval::{self, AucSummary, Fill, Method, Order, PerturbationCurve};
use vdm_core::maskgen::{self, GateStack};
use vdm_core::numerics::{op_suite, Fault, Tensor};
use vdm_core::training::{self, VitReport};
use vdm_core::vit::ViT;
use vdm_core::Error;

use crate::{svg, EvalArgs, ExplainArgs, Failure, FaultArg, GenDataArgs, GradcheckArgs, TrainDiffmaskArgs, TrainVitArgs};

/// Tolerance for every gradient check.
const GRAD_TOLERANCE: f64 = 1e-3;

fn prepare_out(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::usage(format!("cannot create {}: {e}", dir.display())))
}

fn finish(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    cfg.write_to(out)?;
    Ok(())
}

fn load_data(dir: &Path, cfg: &mut RunConfig) -> Result<CountingData, Failure> {
    if !dir.is_dir() {
        return Err(Failure::usage(format!("dataset directory {} not found", dir.display())));
    }
    let data = data::read_dataset(dir)?;
    cfg.grid = data.spec.clone();
    Ok(data)
}

fn load_vit(path: &Path) -> Result<ViT<f32>, Failure> {
    Ok(checkpoint::load_vit(&Checkpoint::load(path)?)?)
}

fn load_stack(path: &Path, vit: &ViT<f32>) -> Result<GateStack<f32>, Failure> {
    let (vcfg, stack) = checkpoint::load_stack(&Checkpoint::load(path)?)?;
    if vcfg != vit.config {
        return Err(Failure::usage("interpretation checkpoint was trained for a different classifier shape"));
    }
    Ok(stack)
}

fn check_image_size(vit: &ViT<f32>, size: usize) -> Result<(), Failure> {
    if size != vit.config.image_size {
        return Err(Failure::usage(format!(
            "images are {size}x{size} but the classifier expects {0}x{0}",
            vit.config.image_size
        )));
    }
    Ok(())
}

pub fn gen_data(mut cfg: RunConfig, a: GenDataArgs) -> Result<(), Failure> {
    if let Some(n) = a.count {
        cfg.splits.train = n;
    }
    if let Some(n) = a.val_count {
        cfg.splits.val = n;
    }
    if let Some(n) = a.eval_count {
        cfg.splits.eval = n;
    }
    if let Some(g) = a.grid {
        cfg.grid.grid = g;
    }
    if let Some(p) = a.patch_px {
        cfg.grid.patch_px = p;
    }
    let s = cfg.splits;
    if s.train == 0 || s.val == 0 || s.eval == 0 {
        return Err(Failure::usage("every split needs a positive count"));
    }
    let cfg = cfg.resolved();
    cfg.grid.validate()?;
    prepare_out(&a.out)?;
    let data = CountingData::generate(cfg.seed, cfg.splits, &cfg.grid)?;
    data::write_dataset(&a.out, &data)?;
    finish(&cfg, &a.out)?;
    println!(
        "{}",
        json!({
            "train": s.train,
            "val": s.val,
            "eval": s.eval,
            "image_size": cfg.grid.image_size(),
        })
    );
    Ok(())
}

fn vit_report_csv(report: &VitReport) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,val_accuracy\n");
    for e in &report.epochs {
        writeln!(out, "{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.val_accuracy).unwrap();
    }
    out
}

pub fn train_vit(mut cfg: RunConfig, a: TrainVitArgs) -> Result<(), Failure> {
    if let Some(e) = a.epochs {
        cfg.recipe.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.recipe.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.recipe.batch_size = b;
    }
    let data = load_data(&a.data, &mut cfg)?;
    let cfg = cfg.resolved();
    cfg.validate()?;
    prepare_out(&a.out)?;
    let train = TensorSet::from_images(&data.train)?;
    let val = TensorSet::from_images(&data.val)?;
    let eval_set = TensorSet::from_images(&data.eval)?;
    let (vit, report) = training::train_vit_with(&train, &val, &cfg.vit, &cfg.recipe, |e| {
        eprintln!(
            "epoch {:>3}  train_loss {:.5}  val_accuracy {:.4}",
            e.epoch, e.train_loss, e.val_accuracy
        );
    })?;
    checkpoint::vit_checkpoint(&vit)?.save(&a.out.join("vit.ckpt"))?;
    fs::write(a.out.join("report.csv"), vit_report_csv(&report)).map_err(Error::from)?;
    finish(&cfg, &a.out)?;
    println!(
        "{}",
        json!({
            "val_accuracy": report.best_val_accuracy,
            "eval_accuracy": training::accuracy(&vit, &eval_set)?,
            "best_epoch": report.best_epoch,
            "epochs_run": report.epochs.len(),
        })
    );
    Ok(())
}

pub fn train_diffmask(mut cfg: RunConfig, a: TrainDiffmaskArgs) -> Result<(), Failure> {
    let t = &mut cfg.train;
    let overrides = [
        (a.lr_gates, &mut t.lr_gates),
        (a.lr_baseline, &mut t.lr_baseline),
        (a.lr_lambda, &mut t.lr_lambda),
        (a.lambda_init, &mut t.lambda_init),
        (a.margin, &mut t.margin),
    ];
    for (flag, field) in overrides {
        if let Some(v) = flag {
            *field = v;
        }
    }
    if let Some(e) = a.epochs {
        t.epochs = e;
    }
    if let Some(b) = a.batch_size {
        t.batch_size = b;
    }
    if let Some(v) = a.alpha {
        cfg.gates.alpha = v;
    }
    if let Some(v) = a.beta {
        cfg.gates.beta = v;
    }
    let data = load_data(&a.data, &mut cfg)?;
    let vit = load_vit(&a.vit)?;
    cfg.vit = vit.config.clone();
    let cfg = cfg.resolved();
    cfg.validate()?;
    check_image_size(&vit, data.spec.image_size())?;
    prepare_out(&a.out)?;
    finish(&cfg, &a.out)?;
    let train = TensorSet::from_images(&data.train)?;
    let result = training::train_diffmask_with(&train, &vit, cfg.gates.clone(), &cfg.train, |e| {
        eprintln!(
            "epoch {:>3}  kl {:.5}  masked {:.4}  lambda {:.4}",
            e.epoch, e.mean_kl, e.mean_masked_fraction, e.lambda
        );
    });
    let (stack, report) = match result {
        Ok(r) => r,
        Err(Error::Diverged(d)) => {
            fs::write(a.out.join("divergence.json"), serde_json::to_vec_pretty(&d).map_err(Error::from)?)
                .map_err(Error::from)?;
            return Err(Error::Diverged(d).into());
        }
        Err(e) => return Err(e.into()),
    };
    checkpoint::stack_checkpoint(&vit.config, &stack)?.save(&a.out.join("diffmask.ckpt"))?;
    fs::write(a.out.join("report.csv"), report.to_csv()).map_err(Error::from)?;
    let eval_set = TensorSet::from_images(&data.eval)?;
    let masks = eval::evaluate_masks(&data.eval, &eval_set, &vit, &stack)?;
    let last = report.epochs.last().expect("at least one epoch");
    println!(
        "{}",
        json!({
            "eval_kl": masks.mean_kl(),
            "eval_match_rate": masks.match_rate(),
            "final_lambda": last.lambda,
            "final_train_kl": last.mean_kl,
            "final_masked_fraction": last.mean_masked_fraction,
            "steps": report.steps.len(),
        })
    );
    Ok(())
}

/// `pixel * (0.2 + 0.8 * saliency)`, channelwise.
pub fn overlay(image: &[u8], saliency: &[f64]) -> Vec<u8> {
    image
        .chunks_exact(3)
        .zip(saliency)
        .flat_map(|(px, &s)| {
            let k = 0.2 + 0.8 * s.clamp(0.0, 1.0);
            px.iter().map(move |&c| (c as f64 * k).round() as u8).collect::<Vec<_>>()
        })
        .collect()
}

pub fn explain(cfg: RunConfig, a: ExplainArgs) -> Result<(), Failure> {
    let vit = load_vit(&a.vit)?;
    let stack = load_stack(&a.diffmask, &vit)?;
    let pix = Pixmap::load(&a.image)?;
    if pix.channels != 3 || pix.width != pix.height {
        return Err(Failure::usage("expected a square RGB (P6) image"));
    }
    check_image_size(&vit, pix.width)?;
    let normalized: Vec<f32> = pix.data.iter().map(|&b| data::normalize(b)).collect();
    let image = Tensor::new(&[pix.height, pix.width, 3], normalized).map_err(Error::from)?;
    let e = maskgen::explain(&image, &vit, &stack)?;
    prepare_out(&a.out)?;
    data::saliency_pixmap(&e.saliency).save(&a.out.join("saliency.pgm"))?;
    Pixmap::rgb(pix.width, pix.height, overlay(&pix.data, &e.saliency.values))?.save(&a.out.join("overlay.ppm"))?;
    let report = json!({
        "mask": e.mask.z,
        "per_layer": e.mask.per_layer,
        "kl": e.kl,
        "class_before": e.class_before,
        "class_after": e.class_after,
        "probs_before": e.probs_before,
        "probs_after": e.probs_after,
    });
    fs::write(a.out.join("explain.json"), serde_json::to_vec_pretty(&report).map_err(Error::from)?)
        .map_err(Error::from)?;
    let cfg = RunConfig {
        vit: vit.config.clone(),
        gates: stack.config.clone(),
        ..cfg
    };
    finish(&cfg, &a.out)?;
    println!(
        "{}",
        json!({"kl": e.kl, "class_before": e.class_before, "class_after": e.class_after})
    );
    Ok(())
}

fn parse_methods(list: &str) -> Result<Vec<Method>, Failure> {
    let mut out = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let m: Method = name.parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(Failure::usage("no methods given; valid methods: diffmask, rollout, random"));
    }
    Ok(out)
}

pub fn curves_csv(curves: &[PerturbationCurve]) -> String {
    let mut out = String::from("method,order,fraction,kl,acc\n");
    for c in curves {
        for ((f, kl), acc) in c.fractions.iter().zip(&c.kl).zip(&c.acc) {
            writeln!(out, "{},{},{f},{kl},{acc}", c.method, c.order.as_str()).unwrap();
        }
    }
    out
}

pub fn eval(mut cfg: RunConfig, a: EvalArgs) -> Result<(), Failure> {
    let methods = parse_methods(&a.methods)?;
    if let Some(f) = &a.fill {
        cfg.eval.fill = f.parse::<Fill>()?;
    }
    if a.limit.is_some() {
        cfg.eval.limit = a.limit;
    }
    let data = load_data(&a.data, &mut cfg)?;
    let vit = load_vit(&a.vit)?;
    cfg.vit = vit.config.clone();
    let stack = match (&a.diffmask, methods.contains(&Method::DiffMask)) {
        (Some(p), _) => Some(load_stack(p, &vit)?),
        (None, true) => return Err(Failure::usage("--diffmask is required for the diffmask method")),
        (None, false) => None,
    };
    if let Some(s) = &stack {
        cfg.gates = s.config.clone();
    }
    let cfg = cfg.resolved();
    check_image_size(&vit, data.spec.image_size())?;
    let n = cfg.eval.limit.unwrap_or(data.eval.len()).min(data.eval.len()).max(1);
    let images = &data.eval[..n];
    let set = TensorSet::from_images(images)?;
    let train = TensorSet::from_images(&data.train)?;
    let fill = cfg.eval.fill.color(&train);
    let fractions = eval::default_fractions();
    prepare_out(&a.out)?;
    let mut curves = Vec::new();
    let mut aucs = BTreeMap::new();
    let mut summary = serde_json::Map::new();
    for &m in &methods {
        let attributions = match m {
            Method::DiffMask => {
                let masks = eval::evaluate_masks(images, &set, &vit, stack.as_ref().expect("checked above"))?;
                summary.insert("diffmask_match_rate".into(), json!(masks.match_rate()));
                summary.insert("diffmask_mean_kl".into(), json!(masks.mean_kl()));
                masks.attributions()
            }
            Method::Rollout => eval::rollout_for_set(&set, &vit)?,
            Method::Random => eval::random_attributions(cfg.seed, set.len(), vit.config.n_patches()),
        };
        let pos = eval::perturb_and_score(&set, &vit, &attributions, Order::Positive, &fractions, fill)?;
        let neg = eval::perturb_and_score(&set, &vit, &attributions, Order::Negative, &fractions, fill)?;
        aucs.insert(m.as_str().to_string(), AucSummary::from_curves(&pos, &neg)?);
        curves.push(pos);
        curves.push(neg);
    }
    fs::write(a.out.join("curves.csv"), curves_csv(&curves)).map_err(Error::from)?;
    fs::write(a.out.join("auc.json"), serde_json::to_vec_pretty(&aucs).map_err(Error::from)?).map_err(Error::from)?;
    if a.svg {
        fs::write(a.out.join("curves.svg"), svg::curves(&curves)).map_err(Error::from)?;
    }
    finish(&cfg, &a.out)?;
    summary.insert("images".into(), json!(n));
    summary.insert("auc".into(), serde_json::to_value(&aucs).map_err(Error::from)?);
    println!("{}", serde_json::Value::Object(summary));
    Ok(())
}

pub fn gradcheck(cfg: RunConfig, a: GradcheckArgs) -> Result<(), Failure> {
    let fault = a.inject_fault.map(|f| match f {
        FaultArg::Tanh => Fault::TanhBackward,
    });
    let checks = op_suite(cfg.seed, a.points.max(1), 1e-4, fault).map_err(Error::from)?;
    let mut worst = 0f64;
    for c in &checks {
        println!("{:<16} {:.3e}", c.kind.name(), c.max_rel_error);
        worst = worst.max(c.max_rel_error);
    }
    let e2e = training::check_loss_gradient(cfg.seed, 6, fault)?;
    println!("{:<16} {:.3e}", "masking_loss", e2e);
    worst = worst.max(e2e);
    println!("max relative error {worst:.3e}");
    if worst < GRAD_TOLERANCE {
        Ok(())
    } else {
        Err(Failure::internal(format!(
            "gradient check failed: {worst:.3e} >= {GRAD_TOLERANCE:e}"
        )))
    }
}
