//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fail.

use std::path::Path;
use std::process::{Command, ExitCode, Output};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use vdm_core::checkpoint::{self, Checkpoint};
use vdm_core::data::{self, SplitSizes, TensorSet};
use vdm_core::hardconcrete::{scalar, uniform_noise, HCParams};
use vdm_core::maskgen::GateConfig;
use vdm_core::numerics::Tensor;
use vdm_core::training::{self, TrainConfig, VitRecipe};
use vdm_core::vit::ViT;

const VDM: &str = env!("CARGO_BIN_EXE_vdm");
/// DiffMask epochs for the faithfulness run; the default config trains for 100.
const DIFFMASK_EPOCHS: usize = 10;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, id: &str, name: &str, pass: bool, detail: String) {
        if !pass {
            self.failed += 1;
        }
        println!("{id} {name:<28} {}  {detail}", if pass { "PASS" } else { "FAIL" });
    }

    fn info(&self, id: &str, detail: String) {
        println!("{id} {:<28} INFO  {detail}", "");
    }
}

fn vdm(args: &[&str]) -> (Output, Duration) {
    let t = Instant::now();
    let out = Command::new(VDM).args(args).output().expect("spawn vdm");
    (out, t.elapsed())
}

fn last_json(out: &Output) -> Value {
    let stdout = String::from_utf8_lossy(&out.stdout);
    stdout
        .lines()
        .rev()
        .find_map(|l| serde_json::from_str(l).ok())
        .unwrap_or(Value::Null)
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn ac1(r: &mut Report) {
    let (out, took) = vdm(&["gradcheck"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let worst = stdout
        .lines()
        .find_map(|l| l.strip_prefix("max relative error "))
        .unwrap_or("?")
        .to_string();
    let pass = out.status.code() == Some(0) && took < Duration::from_secs(60);
    r.line("AC1", "gradient fidelity", pass, format!("max rel err {worst}, {:.1}s", took.as_secs_f64()));
    let (faulted, _) = vdm(&["gradcheck", "--inject-fault", "tanh"]);
    r.line(
        "AC1",
        "gradcheck catches a bad vjp",
        faulted.status.code() == Some(1),
        format!("exit {:?}", faulted.status.code()),
    );
}

fn ac2(r: &mut Report) {
    let hc = HCParams::default();
    let n = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut pass = true;
    let mut worst_z = 0f64;
    for u in [-4.0, -2.0, 0.0, 2.0, 4.0] {
        let noise = uniform_noise::<f64, _>(&mut rng, &[n]);
        let hits = noise.data().iter().filter(|&&e| scalar::sample(u, e, &hc) > 0.0).count();
        let p_hat = hits as f64 / n as f64;
        let p = scalar::prob_nonzero(u, &hc);
        let se = (p * (1.0 - p) / n as f64).sqrt();
        let z = (p_hat - p).abs() / se;
        worst_z = worst_z.max(z);
        pass &= z <= 3.0;
    }
    let p0 = scalar::prob_nonzero(0.0, &hc);
    pass &= (p0 - 0.5798).abs() <= 0.002;
    r.line("AC2", "hard concrete P(z>0)", pass, format!("worst |dev| {worst_z:.2} SE, P(u=0) {p0:.6}"));
}

fn ac6(r: &mut Report, vit: &ViT<f32>, set: &TensorSet) {
    let idx: Vec<usize> = (0..8).collect();
    let images = set.gather(&idx).expect("gather");
    let (b, n, pd) = (idx.len(), vit.config.n_patches(), vit.config.patch_dim());
    let d = vit.config.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let baseline = uniform_noise::<f32, _>(&mut rng, &[d]).map(|v| v - 0.5);
    let plain = vit.forward(&images).expect("forward");
    let ones = Tensor::full(&[b, n], 1.0);
    let kept = vit.masked_forward(&images, &ones, &baseline).expect("masked");
    let identity = plain.logits.data() == kept.logits.data();
    let zeros = Tensor::full(&[b, n], 0.0);
    let blanked = vit.masked_forward(&images, &zeros, &baseline).expect("masked");
    let k = vit.config.n_classes;
    let rows: Vec<&[f32]> = blanked.logits.data().chunks(k).collect();
    let invariant = rows.windows(2).all(|w| w[0] == w[1]);
    let distinct = images.data().chunks(n * pd).collect::<Vec<_>>().windows(2).all(|w| w[0] != w[1]);
    r.line(
        "AC6",
        "masking identities",
        identity && invariant && distinct,
        format!("z=1 bit-exact {identity}, z=0 invariant over {b} images {invariant}"),
    );
}

fn ac8(r: &mut Report, vit_ckpt: &Path, vit: &ViT<f32>, eval_set: &TensorSet, reported_acc: f64, small: &TensorSet, small_val: &TensorSet) {
    let bytes = std::fs::read(vit_ckpt).expect("read checkpoint");
    let reloaded = Checkpoint::from_bytes(&bytes).expect("parse");
    let byte_identical = reloaded.to_bytes().expect("encode") == bytes;
    let again = checkpoint::load_vit(&reloaded).expect("load");
    let acc_a = training::accuracy(vit, eval_set).expect("accuracy");
    let acc_b = training::accuracy(&again, eval_set).expect("accuracy");
    let metrics = acc_a == acc_b && acc_a == reported_acc;

    let recipe = VitRecipe {
        epochs: 1,
        ..VitRecipe::default()
    };
    let vit_runs: Vec<Vec<f64>> = (0..2)
        .map(|_| {
            let (_, rep) = training::train_vit(small, small_val, &vit.config, &recipe).expect("train");
            rep.epochs.iter().flat_map(|e| [e.train_loss, e.val_loss]).collect()
        })
        .collect();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let dm_runs: Vec<Vec<(f64, f64, f64)>> = (0..2)
        .map(|_| {
            let (_, rep) = training::train_diffmask(small, vit, GateConfig::default(), &cfg).expect("train");
            rep.steps.iter().map(|s| (s.l0, s.kl, s.lambda)).collect()
        })
        .collect();
    let same = vit_runs[0] == vit_runs[1] && dm_runs[0] == dm_runs[1] && !dm_runs[0].is_empty();
    r.line(
        "AC8",
        "determinism and persistence",
        byte_identical && metrics && same,
        format!(
            "round-trip identical {byte_identical}, eval acc {acc_a} -> {acc_b}, reruns identical {same} ({} steps)",
            dm_runs[0].len()
        ),
    );
}

fn read_curves(dir: &Path) -> Vec<(String, String, f64, f64)> {
    let text = std::fs::read_to_string(dir.join("curves.csv")).unwrap_or_default();
    text.lines()
        .skip(1)
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            Some((f[0].to_string(), f[1].to_string(), f[2].parse().ok()?, f[3].parse().ok()?))
        })
        .collect()
}

fn ac5(r: &mut Report, eval_dir: &Path, n_patches: usize) {
    let rows = read_curves(eval_dir);
    let curve = |m: &str, o: &str| -> Vec<(f64, f64)> {
        rows.iter().filter(|x| x.0 == m && x.1 == o).map(|x| (x.2, x.3)).collect()
    };
    let pos = curve("diffmask", "positive");
    let neg = curve("diffmask", "negative");
    let mut ordered = !pos.is_empty() && pos.len() == neg.len();
    let mut detail = Vec::new();
    for (&(f, p), &(_, q)) in pos.iter().zip(&neg) {
        if f == 0.0 {
            continue;
        }
        // when every patch is removed both orders produce the same input
        let all_removed = vdm_core::eval::removal_count(f, n_patches) == n_patches;
        let ok = if all_removed { q <= p } else { q < p };
        ordered &= ok;
        if !ok {
            detail.push(format!("f={f}: neg {q:.4} pos {p:.4}"));
        }
    }
    let auc: Value = std::fs::read(eval_dir.join("auc.json"))
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok())
        .unwrap_or(Value::Null);
    let dm_neg = auc["diffmask"]["neg_kl"].as_f64().unwrap_or(f64::NAN);
    let ro_neg = auc["rollout"]["neg_kl"].as_f64().unwrap_or(f64::NAN);
    let beats = dm_neg < ro_neg;
    r.line(
        "AC5",
        "perturbation ordering",
        ordered && beats,
        format!(
            "neg below pos at every f {ordered}{}, neg AUC(KL) diffmask {dm_neg:.4} vs rollout {ro_neg:.4}",
            if detail.is_empty() { String::new() } else { format!(" [{}]", detail.join("; ")) }
        ),
    );
    for m in ["diffmask", "rollout", "random"] {
        if let Some(s) = auc.get(m) {
            r.info("AC5", format!("{m}: pos_kl {:.4} neg_kl {:.4}", s["pos_kl"].as_f64().unwrap_or(f64::NAN), s["neg_kl"].as_f64().unwrap_or(f64::NAN)));
        }
    }
}

fn main() -> ExitCode {
    let mut r = Report { failed: 0 };
    ac1(&mut r);
    ac2(&mut r);

    let tmp = tempfile::tempdir().expect("tempdir");
    let data_dir = tmp.path().join("data");
    let vit_dir = tmp.path().join("vit");
    let dm_dir = tmp.path().join("diffmask");
    let sizes = SplitSizes::default();

    let (out, _) = vdm(&["gen-data", "--out", path(&data_dir)]);
    if !out.status.success() {
        println!("setup: gen-data failed: {}", stderr(&out));
        return ExitCode::FAILURE;
    }

    let (out, took) = vdm(&["train", "vit", "--data", path(&data_dir), "--out", path(&vit_dir)]);
    let summary = last_json(&out);
    let eval_acc = summary["eval_accuracy"].as_f64().unwrap_or(0.0);
    let epochs = summary["epochs_run"].as_u64().unwrap_or(u64::MAX);
    r.line(
        "AC3",
        "counting-task classifier",
        out.status.success() && eval_acc >= 0.99 && epochs <= 20 && took <= Duration::from_secs(15 * 60),
        format!(
            "eval acc {eval_acc} on {} images, {epochs} epochs, {:.0}s",
            sizes.eval,
            took.as_secs_f64()
        ),
    );
    let vit_ckpt = vit_dir.join("vit.ckpt");
    let Ok(vit) = Checkpoint::load(&vit_ckpt).and_then(|c| checkpoint::load_vit(&c)) else {
        println!("setup: no classifier checkpoint: {}", stderr(&out));
        return ExitCode::FAILURE;
    };
    let dataset = data::read_dataset(&data_dir).expect("dataset");
    let small_train = TensorSet::from_images(&dataset.train[..320]).expect("train set");
    let small_val = TensorSet::from_images(&dataset.val[..100]).expect("val set");
    let eval_set = TensorSet::from_images(&dataset.eval).expect("eval set");

    let epochs = DIFFMASK_EPOCHS.to_string();
    let (out, took) = vdm(&[
        "train", "diffmask", "--data", path(&data_dir), "--vit", path(&vit_ckpt), "--out", path(&dm_dir), "--epochs", &epochs,
    ]);
    let summary = last_json(&out);
    let match_rate = summary["eval_match_rate"].as_f64().unwrap_or(0.0);
    let kl = summary["eval_kl"].as_f64().unwrap_or(f64::INFINITY);
    r.line(
        "AC4",
        "mask faithfulness",
        out.status.success() && match_rate >= 0.9 && kl <= 0.1 && took <= Duration::from_secs(30 * 60),
        format!(
            "{:.1}% of eval masks match, mean eval KL {kl:.5}, {DIFFMASK_EPOCHS} epochs, {:.0}s",
            100.0 * match_rate,
            took.as_secs_f64()
        ),
    );

    let eval_dir = tmp.path().join("eval");
    let dm_ckpt = dm_dir.join("diffmask.ckpt");
    let (out, took) = vdm(&[
        "eval", "--data", path(&data_dir), "--vit", path(&vit_ckpt), "--diffmask", path(&dm_ckpt), "--out", path(&eval_dir),
    ]);
    if !out.status.success() {
        println!("eval failed: {}", stderr(&out));
    }
    ac5(&mut r, &eval_dir, vit.config.n_patches());
    r.info("AC5", format!("eval over {} images took {:.0}s", sizes.eval, took.as_secs_f64()));

    let gray_dir = tmp.path().join("eval-gray");
    let (out, _) = vdm(&[
        "eval", "--data", path(&data_dir), "--vit", path(&vit_ckpt), "--diffmask", path(&dm_ckpt), "--out", path(&gray_dir),
        "--methods", "diffmask,rollout", "--fill", "gray",
    ]);
    if out.status.success() {
        let auc = last_json(&out)["auc"].clone();
        r.info(
            "AC5",
            format!(
                "gray fill: diffmask pos {:.4} neg {:.4}, rollout pos {:.4} neg {:.4}",
                auc["diffmask"]["pos_kl"].as_f64().unwrap_or(f64::NAN),
                auc["diffmask"]["neg_kl"].as_f64().unwrap_or(f64::NAN),
                auc["rollout"]["pos_kl"].as_f64().unwrap_or(f64::NAN),
                auc["rollout"]["neg_kl"].as_f64().unwrap_or(f64::NAN),
            ),
        );
    }

    ac6(&mut r, &vit, &eval_set);

    let degenerate_dir = tmp.path().join("degenerate");
    let (out, took) = vdm(&[
        "train", "diffmask", "--data", path(&data_dir), "--vit", path(&vit_ckpt), "--out", path(&degenerate_dir),
        "--lr-lambda", "0", "--lambda-init", "0",
    ]);
    let err = stderr(&out);
    let steps_per_epoch = sizes.train.div_ceil(TrainConfig::default().batch_size);
    let step = std::fs::read(degenerate_dir.join("divergence.json"))
        .ok()
        .and_then(|b| serde_json::from_slice::<Value>(&b).ok())
        .and_then(|v| v["step"].as_u64());
    let within_epoch = step.is_some_and(|s| (s as usize) < steps_per_epoch);
    r.line(
        "AC7",
        "divergence guardrail",
        out.status.code() == Some(3) && err.contains("masking the whole image") && within_epoch,
        format!(
            "exit {:?}, tripped at step {} of {steps_per_epoch}, {:.0}s",
            out.status.code(),
            step.map_or("?".into(), |s| s.to_string()),
            took.as_secs_f64()
        ),
    );

    ac8(&mut r, &vit_ckpt, &vit, &eval_set, eval_acc, &small_train, &small_val);

    if r.failed == 0 {
        println!("all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{} criteria failed", r.failed);
        ExitCode::FAILURE
    }
}
