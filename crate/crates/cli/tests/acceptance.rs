//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Positional arguments filter criteria by name. The process exits non-zero
//! on failures only when `STAMPFORMER_ACCEPTANCE_STRICT` is set.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::net::TcpStream;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stamp_core::dataset::{materialize_dataset, Dataset, MaterializeOptions};
use stamp_core::doe::{build_doe, read_doe_csv, split_sizes, Split, DEFAULT_SPLIT};
use stamp_core::geometry::{lhs_sample, design_bounds, write_geometry_set, RasterSpec};
use stamp_core::materials::{build_family, read_material_manifest, write_material_set, MaterialFamily, DEFAULT_CLUSTERS};
use stamp_core::metrics::{relative_error_of, representative_max, top_k};
use stamp_core::oracle::Field;
use stamp_core::{Grid, Mask};
use stamp_model::gradcheck::check_gradients;
use stamp_model::layers::SwinBlock;
use stamp_model::optim::{adam_update, AdamParams};
use stamp_model::params::ParamStore;
use stamp_model::reference::{reference_block, reference_mse, values};
use stamp_model::train::{evaluate_loss, load_samples, mse_loss, TrainConfig, Trainer};
use stamp_model::{ForwardOptions, ModelConfig, StampFormer};

const BIN: &str = env!("CARGO_BIN_EXE_stampformer");

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn cli(args: &[&str]) {
    let log = std::env::var("RUST_LOG").unwrap_or_else(|_| "warn".into());
    let out = Command::new(BIN).args(args).env("RUST_LOG", log).stderr(Stdio::inherit()).output().expect("stampformer runs");
    assert!(out.status.success(), "stampformer {} failed", args.join(" "));
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
}

/// CLI pipeline from materials to dataset under `root`.
fn toy_pipeline(root: &Path, n_geometries: usize, seed: u64) {
    let seed = seed.to_string();
    let n = n_geometries.to_string();
    cli(&["gen-materials", "--family", "aluminium", "--seed", &seed, "--out", s(&root.join("materials"))]);
    cli(&["gen-geometries", "--n", &n, "--seed", &seed, "--res", "64x64", "--out", s(&root.join("geometries"))]);
    cli(&["gen-doe", "--geometries", s(&root.join("geometries")), "--materials", s(&root.join("materials")), "--seed", &seed, "--out", s(root)]);
    cli(&[
        "gen-dataset",
        "--doe",
        s(&root.join("doe.csv")),
        "--geometries",
        s(&root.join("geometries")),
        "--materials",
        s(&root.join("materials")),
        "--out",
        s(&root.join("data")),
    ]);
}

fn write_train_config(path: &Path, lr: f64, step_epochs: usize, batch: usize) {
    let cfg = serde_json::json!({
        "preset": "toy",
        "train": {"lr0": lr, "step_epochs": step_epochs, "batch_size": batch},
    });
    std::fs::write(path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
}

fn read_report(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn best_train_loss(history: &Path) -> f64 {
    std::fs::read_to_string(history)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse::<f64>().unwrap())
        .fold(f64::INFINITY, f64::min)
}

fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let results = check_gradients(&ModelConfig::grad_check(), 0, 64, 1e-4).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let worst = results.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).unwrap();
    let min_checked = results.iter().map(|r| r.checked).min().unwrap();
    let pass = results.iter().all(|r| r.max_rel_err < 1e-3) && min_checked >= 64 && secs < 300.0;
    Outcome::new(
        pass,
        format!(
            "{} groups, >= {min_checked} params each, worst {} {:.2e}, {secs:.0} s",
            results.len(),
            worst.group,
            worst.max_rel_err
        ),
    )
}

fn attention_oracle() -> Outcome {
    let mut ps = ParamStore::new(3, DType::F64, Device::Cpu);
    let block = SwinBlock::new(&mut ps, "blk", 8, 2, (4, 4), 4, true, 2.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (name, dims, data) in ps.export().unwrap() {
        let offset = if name.ends_with("gamma") { 1.0 } else { 0.0 };
        let v: Vec<f64> = data.iter().map(|_| offset + rng.random_range(-0.5..0.5)).collect();
        ps.assign(&name, &dims, &v).unwrap();
    }
    let x: Vec<f64> = (0..2 * 16 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let got = values(&block.forward(&Tensor::from_vec(x.clone(), (2, 4, 4, 8), &Device::Cpu).unwrap()).unwrap());
    let mut attn_err: f64 = 0.0;
    for (b, chunk) in x.chunks(16 * 8).enumerate() {
        let want = reference_block(&block, chunk, 4, 4, 8);
        for (g, w) in got[b * 128..(b + 1) * 128].iter().zip(&want) {
            attn_err = attn_err.max((g - w).abs());
        }
    }

    let model = StampFormer::new(&ModelConfig::grad_check(), 1, DType::F64, &Device::Cpu).unwrap();
    let heights: Vec<f64> = (0..256).map(|_| rng.random_range(0.0..20.0)).collect();
    let stresses: Vec<f64> = (0..100).map(|i| 150.0 + 2.0 * i as f64).collect();
    let (geo, curves) = model.inputs(&[&heights], &[&stresses]).unwrap();
    let mut inject_err: f64 = 0.0;
    let (_, trace) = model.forward_with(&geo, &curves, &ForwardOptions { capture: true, ..Default::default() }).unwrap();
    let chosen: Vec<Option<Tensor>> = trace
        .stage_embeddings
        .iter()
        .map(|e| {
            let c = e.dim(1).unwrap();
            let v: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            Some(Tensor::from_vec(v, (1, c), &Device::Cpu).unwrap())
        })
        .collect();
    let opts = ForwardOptions {
        capture: true,
        stage_embeddings: chosen.clone(),
        ..Default::default()
    };
    let (_, t2) = model.forward_with(&geo, &curves, &opts).unwrap();
    for ((f, x), e) in t2.merged.iter().zip(&t2.injected).zip(&chosen) {
        let (b, h, w, c) = f.dims4().unwrap();
        let broadcast = e.as_ref().unwrap().reshape((b, 1, 1, c)).unwrap().broadcast_as((b, h, w, c)).unwrap();
        inject_err = inject_err.max(max_abs_diff(&(x - f).unwrap(), &broadcast));
    }
    Outcome::new(
        attn_err < 1e-5 && inject_err < 1e-12,
        format!("window=grid vs global {attn_err:.1e}; injection vs rank-1 broadcast {inject_err:.1e}"),
    )
}

fn pipeline_counts() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let steel = build_family(MaterialFamily::Steel, None, 0).unwrap();
    let records = write_material_set(&dir.path().join("steel"), MaterialFamily::Steel, &steel).unwrap();
    let ids: Vec<u32> = (0..600).collect();
    let doe = build_doe(&ids, &records, DEFAULT_SPLIT, DEFAULT_CLUSTERS as u8, 0).unwrap();
    let sizes = split_sizes(&doe);
    let geoms = |split: Split| -> BTreeSet<u32> { doe.iter().filter(|e| e.split == split).map(|e| e.geometry_id).collect() };
    let (tr, va, te) = (geoms(Split::Train), geoms(Split::Val), geoms(Split::Test));
    let shared = tr.intersection(&va).count() + tr.intersection(&te).count() + va.intersection(&te).count();
    let aluminium = build_family(MaterialFamily::Aluminium, None, 0).unwrap();
    let pass = sizes == [2400, 300, 300] && aluminium.len() == 110 && shared == 0 && steel.len() == 600;
    Outcome::new(
        pass,
        format!(
            "doe {}/{}/{}; aluminium {} curves; steel {} curves; shared geometry ids {shared}",
            sizes[0],
            sizes[1],
            sizes[2],
            aluminium.len(),
            steel.len()
        ),
    )
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..48), rng.random_range(1..48));
        let vals: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut cells: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.7)).collect();
        cells[rng.random_range(0..h * w)] = true;
        let grid = Grid::from_vec(h, w, 1, vals.clone()).unwrap();
        let mask = Mask::new(h, w, cells.clone()).unwrap();
        let mut valid: Vec<f64> = vals.iter().zip(&cells).filter(|(_, &c)| c).map(|(v, _)| *v).collect();
        valid.sort_by(|a, b| b.total_cmp(a));
        let k = top_k(valid.len());
        let oracle = valid[..k].iter().sum::<f64>() / k as f64;
        if representative_max(&grid, &mask).unwrap() != oracle {
            mismatches += 1;
        }
    }
    let rel = relative_error_of(0.20, 0.22).unwrap();
    let (b, h, w, c) = (2, 9, 11, 3);
    let p: Vec<f64> = (0..b * h * w * c).map(|_| rng.random_range(-2.0..2.0)).collect();
    let t: Vec<f64> = (0..b * h * w * c).map(|_| rng.random_range(-2.0..2.0)).collect();
    let loss = mse_loss(
        &Tensor::from_vec(p.clone(), (b, h, w, c), &Device::Cpu).unwrap(),
        &Tensor::from_vec(t.clone(), (b, h, w, c), &Device::Cpu).unwrap(),
    )
    .unwrap()
    .to_scalar::<f64>()
    .unwrap();
    let loss_err = (loss - reference_mse(&p, &t, [b, h, w, c])).abs();
    Outcome::new(
        mismatches == 0 && (rel - 10.0).abs() < 1e-9 && loss_err < 1e-10,
        format!("representative_max mismatches {mismatches}/1000; 0.20/0.22 -> {rel:.6}%; loss vs double loop {loss_err:.1e}"),
    )
}

fn scheduler_optimizer() -> Outcome {
    let cfg = TrainConfig::default();
    let lrs = [cfg.lr(0), cfg.lr(100), cfg.lr(200)];
    let lr_ok = lrs.iter().zip([1e-4, 4e-5, 1.6e-5]).all(|(a, b)| (a - b).abs() <= 1e-15 * b);
    let p = AdamParams::default();
    let grads = [0.7, -0.2, 1.3, 0.05, -0.9];
    let (mut theta, mut m, mut v) = ([0.4f64], [0.0f64], [0.0f64]);
    let (mut r_theta, mut r_m, mut r_v) = (0.4f64, 0.0f64, 0.0f64);
    let mut adam_err: f64 = 0.0;
    for (i, g) in grads.iter().enumerate() {
        let t = i as u64 + 1;
        adam_update(&mut theta, &[*g], &mut m, &mut v, t, 1e-3, &p);
        r_m = p.beta1 * r_m + (1.0 - p.beta1) * g;
        r_v = p.beta2 * r_v + (1.0 - p.beta2) * g * g;
        let m_hat = r_m / (1.0 - p.beta1.powi(t as i32));
        let v_hat = r_v / (1.0 - p.beta2.powi(t as i32));
        r_theta -= 1e-3 * m_hat / (v_hat.sqrt() + p.epsilon);
        adam_err = adam_err.max((theta[0] - r_theta).abs());
    }
    Outcome::new(
        lr_ok && adam_err < 1e-10,
        format!("lr(0,100,200) = ({:.3e}, {:.3e}, {:.3e}); Adam vs reference over 5 steps {adam_err:.1e}", lrs[0], lrs[1], lrs[2]),
    )
}

fn single_sample_overfit() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let curves = build_family(MaterialFamily::Aluminium, None, 1).unwrap();
    write_material_set(&root.join("materials"), MaterialFamily::Aluminium, &curves).unwrap();
    let geoms = lhs_sample(10, &design_bounds(), 1).unwrap();
    write_geometry_set(&root.join("geometries"), &geoms, &RasterSpec::desk()).unwrap();
    let records = read_material_manifest(&root.join("materials")).unwrap();
    let ids: Vec<u32> = geoms.iter().map(|g| g.geometry_id).collect();
    let doe = build_doe(&ids, &records, DEFAULT_SPLIT, DEFAULT_CLUSTERS as u8, 1).unwrap();
    materialize_dataset(&doe, &root.join("geometries"), &root.join("materials"), &root.join("data"), &MaterializeOptions::default()).unwrap();
    let ds = Dataset::open(&root.join("data")).unwrap();
    let mut train = load_samples(&ds, Split::Train, Field::Thinning).unwrap();
    train.truncate(1);

    let t = Instant::now();
    let model = StampFormer::new(&ModelConfig::toy(1), 0, DType::F32, &Device::Cpu).unwrap();
    let cfg = TrainConfig {
        lr0: 1e-3,
        step_epochs: 100,
        max_epochs: 300,
        batch_size: 1,
        ..Default::default()
    };
    let initial = evaluate_loss(&model, &train, 1).unwrap();
    let mut trainer = Trainer::new(model, cfg).unwrap();
    trainer.fit(&train, &[]).unwrap();
    let final_loss = evaluate_loss(&trainer.model, &train, 1).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let orders = (initial / final_loss).log10();
    Outcome::new(
        orders >= 5.0 && secs < 600.0,
        format!("loss {initial:.3e} -> {final_loss:.3e} ({orders:.2} orders of magnitude) in 300 epochs, {secs:.0} s"),
    )
}

fn synthetic_end_to_end() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let t = Instant::now();
    toy_pipeline(root, 100, 1);
    let cfg = root.join("train.json");
    write_train_config(&cfg, 1e-3, 15, 8);
    let run = root.join("run");
    cli(&["train", "--field", "thinning", "--config", s(&cfg), "--data", s(&root.join("data")), "--out", s(&run), "--epochs", "30", "--seed", "1"]);
    let ckpt = run.join("best.ckpt");
    cli(&["eval", "--checkpoint", s(&ckpt), "--data", s(&root.join("data")), "--out", s(&root.join("eval"))]);
    cli(&["eval", "--checkpoint", s(&ckpt), "--data", s(&root.join("data")), "--out", s(&root.join("ablation")), "--zero-material", "--no-figures"]);
    let secs = t.elapsed().as_secs_f64();
    let report = read_report(&root.join("eval/report.json"));
    let ablated = read_report(&root.join("ablation/report.json"));
    let rel = report["aggregate"]["rel_err"]["mean"].as_f64().unwrap();
    let rel_zero = ablated["aggregate"]["rel_err"]["mean"].as_f64().unwrap();
    let masked = report["aggregate"]["masked_mse_mean"].as_f64().unwrap();
    let best = best_train_loss(&run.join("history.csv"));
    let n = report["per_sample"].as_array().unwrap().len();
    Outcome::new(
        rel < 15.0 && masked < 10.0 * best && secs < 2700.0 && rel_zero > rel,
        format!(
            "{n} test samples: mean rel err {rel:.2}%, masked mse {masked:.3e} vs best train {best:.3e} ({:.2}x); material branch zeroed {rel_zero:.2}%; {:.1} min",
            masked / best,
            secs / 60.0
        ),
    )
}

fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn http(port: u16, method: &str, path: &str, body: &str) -> Option<(u16, String)> {
    let mut stream = TcpStream::connect(("127.0.0.1", port)).ok()?;
    stream.set_read_timeout(Some(Duration::from_secs(30))).ok()?;
    write!(
        stream,
        "{method} {path} HTTP/1.1\r\nHost: localhost\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .ok()?;
    let mut buf = String::new();
    stream.read_to_string(&mut buf).ok()?;
    let status = buf.split_whitespace().nth(1)?.parse().ok()?;
    Some((status, buf.split_once("\r\n\r\n").map(|(_, b)| b.to_string()).unwrap_or_default()))
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn inference_latency() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    toy_pipeline(root, 10, 5);
    let cfg = root.join("train.json");
    write_train_config(&cfg, 1e-3, 15, 8);
    let ckpts = root.join("checkpoints");
    cli(&["train", "--field", "thinning", "--config", s(&cfg), "--data", s(&root.join("data")), "--out", s(&ckpts.join("thinning")), "--epochs", "1"]);
    let port = free_port();
    let _server = Server(
        Command::new(BIN)
            .args(["serve", "--checkpoints", s(&ckpts), "--materials", s(&root.join("materials")), "--port", &port.to_string()])
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    );
    let deadline = Instant::now() + Duration::from_secs(60);
    while http(port, "GET", "/health", "").map(|r| r.0) != Some(200) {
        assert!(Instant::now() < deadline, "service did not come up");
        std::thread::sleep(Duration::from_millis(100));
    }
    let body = serde_json::json!({
        "geometry": {
            "r1_mm": 7.5, "r2_mm": 6.0, "r3_mm": 8.0, "r4_mm": 45.0, "r5_start_mm": 10.0,
            "r5_end_mm": 17.5, "bead_d1_mm": 45.0, "bead_d2_mm": 115.0, "draft_angle_deg": 47.5
        },
        "material": {"material_id": 12},
        "field": "thinning"
    })
    .to_string();
    let mut times = Vec::new();
    for _ in 0..10 {
        let t = Instant::now();
        let (status, _) = http(port, "POST", "/predict", &body).expect("response");
        times.push(t.elapsed().as_secs_f64());
        assert_eq!(status, 200);
    }
    let worst = times.iter().cloned().fold(0.0, f64::max);
    times.sort_by(f64::total_cmp);
    Outcome::new(
        worst < 1.0,
        format!("10 requests over HTTP: median {:.0} ms, max {:.0} ms", times[5] * 1e3, worst * 1e3),
    )
}

fn determinism_run(root: &Path) -> (Vec<u8>, String, serde_json::Value) {
    toy_pipeline(root, 20, 9);
    let cfg = root.join("train.json");
    write_train_config(&cfg, 1e-3, 15, 8);
    let run = root.join("run");
    cli(&["train", "--field", "thinning", "--config", s(&cfg), "--data", s(&root.join("data")), "--out", s(&run), "--epochs", "2", "--seed", "9"]);
    cli(&["eval", "--checkpoint", s(&run.join("best.ckpt")), "--data", s(&root.join("data")), "--no-figures"]);
    let doe = std::fs::read(root.join("doe.csv")).unwrap();
    let hash = Dataset::open(&root.join("data")).unwrap().manifest.content_hash;
    let per_sample = read_report(&run.join("eval/report.json"))["per_sample"].clone();
    (doe, hash, per_sample)
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (doe_a, hash_a, per_a) = determinism_run(a.path());
    let (doe_b, hash_b, per_b) = determinism_run(b.path());
    let rows = read_doe_csv(&a.path().join("doe.csv")).unwrap().len();
    let same_doe = doe_a == doe_b;
    let same_hash = hash_a == hash_b;
    let same_metrics = per_a == per_b && per_a.as_array().is_some_and(|v| !v.is_empty());
    Outcome::new(
        same_doe && same_hash && same_metrics,
        format!(
            "doe.csv ({rows} rows) identical: {same_doe}; content hash identical: {same_hash}; {} per-sample metrics identical: {same_metrics}",
            per_a.as_array().map_or(0, |v| v.len())
        ),
    )
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient_correctness", gradient_correctness),
        ("attention_oracle", attention_oracle),
        ("pipeline_counts", pipeline_counts),
        ("metric_oracles", metric_oracles),
        ("scheduler_optimizer", scheduler_optimizer),
        ("single_sample_overfit", single_sample_overfit),
        ("synthetic_end_to_end", synthetic_end_to_end),
        ("inference_latency", inference_latency),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    let mut ran = 0;
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        println!("{} {name}: {}", if outcome.pass { "PASS" } else { "FAIL" }, outcome.detail);
        let _ = std::io::stdout().flush();
        if !outcome.pass {
            failed.push(name);
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed.len());
    if !failed.is_empty() {
        println!("failing: {}", failed.join(", "));
        if std::env::var_os("STAMPFORMER_ACCEPTANCE_STRICT").is_some() {
            std::process::exit(1);
        }
    }
}
