//! Acceptance suite: one PASS / FAIL / FLAG line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Pass a substring to run a
//! subset, e.g. `cargo test --test acceptance -- masking`. A FLAG marks a
//! directional experiment whose expected direction did not hold; it is
//! reported but does not fail the suite.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use proteus_cli::ablate::{run_preset, AblateOptions, Preset};
use proteus_cli::config::{default_model, Mode, RunConfig};
use proteus_cli::runs::distill;
use proteus_core::autodiff::{default_shapes, grad_check, grad_check_fn, Bindings, OpKind, Tape, Var};
use proteus_core::data::{
    gen_toy_dataset, load_container, make_batch, save_container, NormStats, ToySpec, View,
};
use proteus_core::distill::{
    loss_feat, loss_patch, loss_supervised_kd, loss_token, sample_mask, DistillConfig, Distiller,
    HeadKind, KdMode, Labels, LossWeights, ProjectionHead,
};
use proteus_core::eval::{fit_logreg, l2_grid, pca_rgb, probe_lbfgs, FeatureMatrix};
use proteus_core::optim::Schedule;
use proteus_core::vit::{
    self, load_checkpoint, read_checkpoint, save_checkpoint, select_layers, weight_inherit,
    write_checkpoint, Checkpoint, ViTConfig,
};
use proteus_core::{ParamSet, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

enum Status {
    Pass,
    Fail,
    Flag,
}

struct Outcome {
    status: Status,
    detail: String,
}

fn judge(ok: bool, detail: String) -> Outcome {
    Outcome {
        status: if ok { Status::Pass } else { Status::Fail },
        detail,
    }
}

type Check = fn(&Path) -> Outcome;

const CRITERIA: [(u32, &str, Check); 10] = [
    (1, "gradient suite", c1_gradients),
    (2, "loss identities", c2_loss_identities),
    (3, "masking", c3_masking),
    (4, "self-distillation convergence", c4_self_distillation),
    (5, "dataset-bias direction", c5_dataset_bias),
    (6, "objective ablation harness", c6_objective_ablation),
    (7, "probe correctness", c7_probe),
    (8, "pca", c8_pca),
    (9, "determinism and formats", c9_determinism),
    (10, "weight inheritance", c10_inheritance),
];

fn main() {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let scratch = tempfile::tempdir().expect("scratch dir");
    let mut failed = 0;
    for (id, name, check) in CRITERIA {
        if filter.as_deref().is_some_and(|f| !name.contains(f) && f != id.to_string()) {
            continue;
        }
        let dir = scratch.path().join(format!("c{id}"));
        fs::create_dir_all(&dir).expect("criterion dir");
        let t = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(|| check(&dir))).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            judge(false, format!("panicked: {msg}"))
        });
        let tag = match out.status {
            Status::Pass => "PASS",
            Status::Flag => "FLAG",
            Status::Fail => {
                failed += 1;
                "FAIL"
            }
        };
        println!("criterion {id:>2} {tag} {name} ({:.1}s): {}", t.elapsed().as_secs_f64(), out.detail);
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- helpers

fn tiny_vit() -> ViTConfig {
    let mut c = ViTConfig::new(8, 4, 1, 16, 2, 2);
    c.layers_for_probe = 1;
    c
}

fn bindings(names: &[String], vars: &[Var]) -> Bindings {
    Bindings::from_pairs(names.iter().cloned().zip(vars.iter().copied()))
}

fn project(head: &ProjectionHead, p: &ParamSet<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::no_grad();
    let bind = tape.register(p, false);
    let xv = tape.constant(x.clone());
    let y = head.project(&mut tape, &bind, xv).unwrap();
    tape.value(y).clone()
}

fn toy_file(dir: &Path, per_class: usize, seed: u64) -> std::path::PathBuf {
    let ds = gen_toy_dataset(&ToySpec {
        per_class,
        seed,
        ..ToySpec::default()
    })
    .unwrap();
    let p = dir.join(format!("toy_{per_class}_{seed}.pxds"));
    save_container(&ds, &p).unwrap();
    p
}

fn random_teacher(dir: &Path) -> std::path::PathBuf {
    let cfg = default_model();
    let ck = Checkpoint {
        params: vit::init_params::<f32>(&cfg, 7).unwrap(),
        config: cfg,
        opt_state: None,
    };
    let p = dir.join("teacher.prtc");
    save_checkpoint(&p, &ck).unwrap();
    p
}

fn small_weights() -> LossWeights {
    LossWeights {
        token: 0.7,
        feat: 1.3,
        patch: 0.4,
        lambda: 0.5,
    }
}

/// A short distillation run through the same code path as `proteus distill`.
fn distill_run(dir: &Path, data: &Path, teacher: &Path, out: &str) -> std::path::PathBuf {
    let mut c = RunConfig {
        mode: Mode::Distill,
        seed: 3,
        output_dir: dir.join(out),
        dataset: Some(data.to_path_buf()),
        teacher: Some(teacher.to_path_buf()),
        batch_size: 16,
        ..RunConfig::default()
    };
    c.model.dim = 16;
    c.schedule.total_steps = 12;
    c.schedule.warmup_steps = 2;
    c.distill.weights = small_weights();
    distill(&c).unwrap();
    c.output_dir.join("metrics.csv")
}

// --------------------------------------------------------------- criteria

fn c1_gradients(_: &Path) -> Outcome {
    let t = Instant::now();
    let mut worst = (0.0f64, String::new());
    for kind in OpKind::ALL {
        for seed in 0..3 {
            let err = grad_check(kind, &default_shapes(kind), seed).unwrap();
            if err > worst.0 || worst.1.is_empty() {
                worst = (err, format!("{} seed {seed}", kind.name()));
            }
        }
    }

    let cfg = tiny_vit();
    let p = vit::init_params::<f64>(&cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let names: Vec<String> = p.names().map(str::to_string).collect();
    // Larger than init scale so the gradients are not vanishingly small.
    let inputs: Vec<Tensor<f64>> = names
        .iter()
        .map(|n| {
            let shape = p.get(n).unwrap().shape().to_vec();
            if n.contains("norm") && n.ends_with("weight") {
                Tensor::uniform(&shape, 0.5, 1.5, &mut rng)
            } else {
                Tensor::uniform(&shape, -0.3, 0.3, &mut rng)
            }
        })
        .collect();
    let x = Tensor::<f64>::randn(&[2, 1, 8, 8], 1.0, &mut rng);
    let cls_target = Tensor::<f64>::randn(&[2, 16], 1.0, &mut rng);
    let patch_target = Tensor::<f64>::randn(&[2, 4, 16], 1.0, &mut rng);
    let vit_err = grad_check_fn(
        |tape, vars| {
            let b = bindings(&names, vars);
            let out = vit::forward(tape, &b, "", &cfg, &x, None)?;
            let (ct, pt) = (tape.constant(cls_target.clone()), tape.constant(patch_target.clone()));
            let a = tape.mse(out.cls, ct)?;
            let c = tape.mse(out.patches, pt)?;
            tape.add(a, c)
        },
        &inputs,
    )
    .unwrap();
    let secs = t.elapsed().as_secs_f64();
    judge(
        worst.0 < 1e-4 && vit_err < 1e-3 && secs < 60.0,
        format!(
            "{} ops x 3 seeds, worst {:.2e} ({}) < 1e-4; ViT loss {vit_err:.2e} < 1e-3; {secs:.1}s < 60s",
            OpKind::ALL.len(),
            worst.0,
            worst.1
        ),
    )
}

fn c2_loss_identities(dir: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let head = ProjectionHead::new(HeadKind::LnLinear, 8, 12, "h.");
    let hp = head.init::<f64, _>(&mut rng);
    let eval = |f: &dyn Fn(&mut Tape<f64>, &Bindings) -> Var| {
        let mut tape = Tape::no_grad();
        let bind = tape.register(&hp, false);
        let v = f(&mut tape, &bind);
        tape.value(v).item()
    };

    let s = Tensor::<f64>::randn(&[4, 8], 1.0, &mut rng);
    let t = project(&head, &hp, &s);
    let token = eval(&|tape, b| {
        let (sv, tv) = (tape.constant(s.clone()), tape.constant(t.clone()));
        loss_token(tape, b, &head, sv, tv).unwrap()
    });
    let sp = Tensor::<f64>::randn(&[4, 16, 8], 1.0, &mut rng);
    let tp = project(&head, &hp, &sp);
    let feat = eval(&|tape, b| {
        let (sv, tv) = (tape.constant(sp.clone()), tape.constant(tp.clone()));
        loss_feat(tape, b, &head, sv, tv).unwrap()
    });
    let mask = sample_mask(4, 16, [0.1, 0.5], &mut rng).unwrap();
    let patch = eval(&|tape, b| {
        let (sv, tv) = (tape.constant(sp.clone()), tape.constant(tp.clone()));
        loss_patch(tape, b, &head, sv, tv, &mask, true).unwrap()
    });

    let z = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
    let mut tape = Tape::<f64>::no_grad();
    let zv = tape.constant(z.clone());
    let kd = loss_supervised_kd(&mut tape, zv, &z, None, KdMode::Soft, false, 0.5).unwrap();
    let kl = tape.value(kd.kl).item();
    let u = tape.constant(Tensor::zeros(&[3, 4]));
    let ce_v = tape.cross_entropy(u, &[0, 2, 3]).unwrap();
    let ce = tape.value(ce_v).item();
    let ce_err = (ce - 4f64.ln()).abs();

    let data = toy_file(dir, 4, 0);
    let teacher = random_teacher(dir);
    let rows = proteus_cli::metrics::read_metrics(&distill_run(dir, &data, &teacher, "run")).unwrap();
    let cfg = DistillConfig {
        weights: small_weights(),
        ..DistillConfig::default()
    };
    let mismatch = rows
        .iter()
        .map(|r| (r.loss_total - r.losses().expected_total(cfg.mode, cfg.use_ce, &cfg.weights)).abs())
        .fold(0.0, f64::max);

    let zeros_ok = token.abs() < 1e-9 && feat.abs() < 1e-9 && patch.abs() < 1e-9;
    judge(
        zeros_ok && kl.abs() < 1e-9 && ce_err < 1e-9 && mismatch < 1e-6 && !rows.is_empty(),
        format!(
            "token {token:.1e} feat {feat:.1e} patch {patch:.1e} (< 1e-9); KL(p,p) {kl:.1e}; \
             |CE(uniform,4) - ln 4| {ce_err:.1e}; total vs weighted sum max {mismatch:.1e} over {} logged steps (< 1e-6)",
            rows.len()
        ),
    )
}

fn c3_masking(_: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let n = default_model().num_patches();
    let m = sample_mask(10_000, n, [0.1, 0.5], &mut rng).unwrap();
    let fr: Vec<f64> = (0..m.batch()).map(|b| m.fraction(b)).collect();
    let in_bounds = fr.iter().all(|&f| (0.1..=0.5).contains(&f));
    let mean = fr.iter().sum::<f64>() / fr.len() as f64;

    let head = ProjectionHead::new(HeadKind::LnLinear, 8, 12, "h.");
    let hp = head.init::<f64, _>(&mut rng);
    let s = Tensor::<f64>::randn(&[6, n, 8], 1.0, &mut rng);
    let t = Tensor::<f64>::randn(&[6, n, 12], 1.0, &mut rng);
    let mask = sample_mask(6, n, [0.1, 0.5], &mut rng).unwrap();
    let loss = |s: &Tensor<f64>| {
        let mut tape = Tape::no_grad();
        let bind = tape.register(&hp, false);
        let (sv, tv) = (tape.constant(s.clone()), tape.constant(t.clone()));
        let l = loss_patch(&mut tape, &bind, &head, sv, tv, &mask, true).unwrap();
        tape.value(l).item()
    };
    let mut perturbed = s.clone();
    for (i, &masked) in mask.flags().iter().enumerate() {
        if !masked {
            for v in &mut perturbed.data_mut()[i * 8..(i + 1) * 8] {
                *v += 1e3;
            }
        }
    }
    let (a, b) = (loss(&s), loss(&perturbed));
    judge(
        in_bounds && (mean - 0.3).abs() <= 0.02 && a == b,
        format!(
            "10000 masks over {n} patches, fractions in [{:.3}, {:.3}], mean {mean:.4} (0.3 ± 0.02); \
             patch loss with unmasked positions perturbed bitwise equal: {}",
            fr.iter().cloned().fold(f64::INFINITY, f64::min),
            fr.iter().cloned().fold(0.0, f64::max),
            a == b
        ),
    )
}

fn c4_self_distillation(_: &Path) -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| {
        let t = Instant::now();
        let cfg = default_model();
        let teacher = vit::init_params::<f32>(&cfg, 1).unwrap();
        let student = vit::init_params::<f32>(&cfg, 2).unwrap();
        let mut d =
            Distiller::new(teacher, cfg.clone(), &student, cfg.clone(), DistillConfig::default(), None, 3)
                .unwrap();
        let ds = gen_toy_dataset(&ToySpec::default()).unwrap();
        let stats: NormStats = ds.channel_stats();
        let schedule = Schedule {
            base_lr: 3e-3,
            warmup_steps: 10,
            total_steps: 200,
            ..Schedule::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut order: Vec<usize> = (0..ds.len()).collect();
        let mut losses = Vec::new();
        for step in 0..schedule.total_steps as usize {
            let bs = 32;
            let per_epoch = ds.len() / bs;
            if step % per_epoch == 0 {
                order.shuffle(&mut rng);
            }
            let k = step % per_epoch;
            let idx = &order[k * bs..(k + 1) * bs];
            let x: Tensor<f32> = make_batch(&ds, idx, View::Center(cfg.image_size), &stats, 0).unwrap();
            losses.push(d.step(&x, &Labels::none(), &schedule, &mut rng).unwrap());
        }
        let (l0, ln) = (losses[0], *losses.last().unwrap());
        let (first, last) = (l0.total, ln.total);
        let reduction = 1.0 - last / first;
        let secs = t.elapsed().as_secs_f64();
        judge(
            reduction >= 0.9 && secs < 300.0,
            format!(
                "random 2-block dim-32 teacher, 200 steps, 1 thread: total {first:.4} -> {last:.4} \
                 ({:.1}% reduction, need >= 90%; token {:.4} -> {:.4}, feat {:.4} -> {:.4}, \
                 patch {:.4} -> {:.4}); {secs:.1}s < 300s",
                100.0 * reduction,
                l0.token,
                ln.token,
                l0.feat,
                ln.feat,
                l0.patch,
                ln.patch,
            ),
        )
    })
}

fn c5_dataset_bias(dir: &Path) -> Outcome {
    let rep = run_preset(&AblateOptions::new(Preset::Table1, dir.join("table1"))).unwrap();
    let get = |n: &str| rep.means.iter().find(|(k, _)| k == n).map(|(_, v)| *v).unwrap();
    let per_seed = |n: &str| {
        rep.rows
            .iter()
            .filter(|r| r.run == n)
            .map(|r| format!("s{}={:.3}", r.seed, r.probe_test.unwrap_or(r.probe_val)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let detail = format!(
        "held-out probe accuracy over seeds [0, 1, 2]: hint (token+feat) {:.4} [{}] vs soft-logit+CE {:.4} [{}]",
        get("hint_token_feat"),
        per_seed("hint_token_feat"),
        get("soft_ce"),
        per_seed("soft_ce"),
    );
    Outcome {
        status: if rep.direction_ok == Some(true) { Status::Pass } else { Status::Flag },
        detail,
    }
}

fn c6_objective_ablation(dir: &Path) -> Outcome {
    let mut opts = AblateOptions::new(Preset::Table2, dir.join("table2"));
    opts.seeds = vec![0];
    let rep = run_preset(&opts).unwrap();
    let complete = rep.rows.len() == 4 && rep.rows.iter().all(|r| r.steps == opts.steps);
    let files = ["summary.csv", "summary.md", "summary.json"].iter().all(|f| opts.out.join(f).is_file());
    let full = rep.rows.iter().find(|r| r.run == "token_feat_patch").unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(opts.out.join("token_feat_patch_s0/summary.json")).unwrap())
            .unwrap();
    let means: Vec<String> = summary["epoch_means"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| format!("{:.4}", e["patch"].as_f64().unwrap()))
        .collect();
    let monotone = full.patch_monotone == Some(true);
    judge(
        complete && files && monotone,
        format!(
            "{} runs of {} steps, summary files written: {files}; token+feat+patch epoch-mean patch loss [{}] strictly decreasing: {monotone}",
            rep.rows.len(),
            opts.steps,
            means.join(", ")
        ),
    )
}

fn separable(rows_per_class: usize, seed: u64) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, d) = (4, 8);
    let noise = Tensor::<f64>::randn(&[rows_per_class * k, d], 0.3, &mut rng);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..rows_per_class * k {
        let y = i % k;
        for j in 0..d {
            let centre = if j == y { 4.0 } else { 0.0 };
            data.push(centre + noise.data()[i * d + j]);
        }
        labels.push(y);
    }
    FeatureMatrix::new(rows_per_class * k, d, data, labels, 1).unwrap()
}

fn c7_probe(_: &Path) -> Outcome {
    let grid = l2_grid();
    let grid_ok = grid.len() == 45 && grid[0] == 1e-6 && grid[44] == 1e3;
    let train = separable(50, 71);
    let val = separable(10, 72);
    let r = probe_lbfgs(&train, &val, None, 500).unwrap();

    let mut perm: Vec<usize> = (0..train.rows).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(73));
    let shuffled = train.select(&perm);
    let rs = probe_lbfgs(&shuffled, &val, None, 500).unwrap();
    let acc_diff = (r.val_accuracy - rs.val_accuracy)
        .abs()
        .max((r.train_accuracy - rs.train_accuracy).abs());
    let (a, b) = (fit_logreg(&train, 4, 1e-2, 500).unwrap(), fit_logreg(&shuffled, 4, 1e-2, 500).unwrap());
    let w_diff = a
        .model
        .weight
        .iter()
        .chain(&a.model.bias)
        .zip(b.model.weight.iter().chain(&b.model.bias))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    judge(
        grid_ok && r.train_accuracy >= 0.99 && r.best_l2 == rs.best_l2 && acc_diff <= 1e-6 && w_diff <= 1e-6,
        format!(
            "grid {} values [{:e}, {:e}]; separable train accuracy {:.4} (>= 0.99); row shuffle: \
             same l2 {}, accuracy diff {acc_diff:.1e}, weight diff {w_diff:.1e} (<= 1e-6)",
            grid.len(),
            grid[0],
            grid[44],
            r.train_accuracy,
            r.best_l2 == rs.best_l2
        ),
    )
}

fn c8_pca(_: &Path) -> Outcome {
    let (n, d) = (64, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let base = Tensor::<f64>::randn(&[n, d], 1.0, &mut rng);
    // Distinct column scales give a well-separated spectrum.
    let data: Vec<f64> = base
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v * (1.0 + (i % d) as f64 * 0.4))
        .collect();
    let x = Tensor::new(vec![n, d], data.clone()).unwrap();
    let p = pca_rgb(&x).unwrap();

    let mut ortho = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = p.components[i].iter().zip(&p.components[j]).map(|(a, b)| a * b).sum();
            ortho = ortho.max((dot - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }

    let m = DMatrix::from_row_slice(n, d, &data);
    let mean = m.row_mean();
    let centred = DMatrix::from_fn(n, d, |r, c| m[(r, c)] - mean[c]);
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    let mut eig: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let var_err = (0..3)
        .map(|i| (p.explained_variance[i] - eig[i]).abs())
        .fold(0.0, f64::max);
    judge(
        ortho < 1e-6 && var_err < 1e-6,
        format!(
            "64x16 features: orthonormality error {ortho:.1e} (< 1e-6); top-3 variance [{:.4}, {:.4}, {:.4}] \
             vs dense eigensolver, max error {var_err:.1e} (< 1e-6)",
            p.explained_variance[0], p.explained_variance[1], p.explained_variance[2]
        ),
    )
}

fn c9_determinism(dir: &Path) -> Outcome {
    let data = toy_file(dir, 5, 9);
    let raw = fs::read(&data).unwrap();
    let ds = load_container(&data).unwrap();
    let again = dir.join("again.pxds");
    save_container(&ds, &again).unwrap();
    let pxds_ok = ds.to_bytes() == raw && fs::read(&again).unwrap() == raw;

    let cfg = default_model();
    let teacher = vit::init_params::<f32>(&cfg, 5).unwrap();
    let mut d = Distiller::new(
        teacher.clone(),
        cfg.clone(),
        &teacher,
        cfg.clone(),
        DistillConfig::default(),
        None,
        0,
    )
    .unwrap();
    let x = Tensor::<f32>::randn(&[2, 3, 16, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    d.step(&x, &Labels::none(), &Schedule::default(), &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap();
    let ck = Checkpoint {
        config: cfg,
        params: d.student(),
        opt_state: Some(d.opt_state().clone()),
    };
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &ck).unwrap();
    let back = read_checkpoint(&mut bytes.as_slice()).unwrap();
    let mut rewritten = Vec::new();
    write_checkpoint(&mut rewritten, &back).unwrap();
    let path = dir.join("ck.prtc");
    save_checkpoint(&path, &ck).unwrap();
    let prtc_ok = back == ck && rewritten == bytes && load_checkpoint(&path).unwrap() == ck;

    let teacher_path = random_teacher(dir);
    let a = fs::read(distill_run(dir, &data, &teacher_path, "a")).unwrap();
    let b = fs::read(distill_run(dir, &data, &teacher_path, "b")).unwrap();
    judge(
        pxds_ok && prtc_ok && a == b,
        format!(
            "PXDS bitwise round trip {pxds_ok}; PRTC (with optimizer state) bitwise round trip {prtc_ok}; \
             two seeded runs, metrics.csv byte-identical ({} bytes): {}",
            a.len(),
            a == b
        ),
    )
}

fn c10_inheritance(dir: &Path) -> Outcome {
    let cfg = default_model();
    let teacher = vit::init_params::<f32>(&cfg, 3).unwrap();
    let (copy, _) = weight_inherit(&teacher, &cfg, &cfg, 0).unwrap();
    let exact = copy == teacher;
    let layers = select_layers(4, 2);

    let mut opts = AblateOptions::new(Preset::Inherit, dir.join("inherit"));
    opts.seeds = vec![0];
    let rep = run_preset(&opts).unwrap();
    let has = |n: &str| rep.rows.iter().any(|r| r.run == n && r.steps == opts.steps);
    let ok = exact && layers == [0, 3] && has("fresh") && has("inherit") && !rep.notes.is_empty();
    judge(
        ok,
        format!(
            "equal-shape copy exact: {exact}; depth 4 -> 2 selects {layers:?}; {}",
            rep.notes.join("; ")
        ),
    )
}
