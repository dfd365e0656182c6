//! Acceptance suite. Trains an equivariant and an invariant model with the same seed
//! through the CLI, evaluates both, and prints one PASS/FAIL line per criterion.
//!
//! Exits 0 after reporting unless STEERKIT_ACCEPTANCE_STRICT=1, in which case any
//! failing criterion makes the process exit 1. A JSON summary is written next to the
//! artifacts under the cargo target tmpdir.

use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::Instant;
use steerkit::augment::{AugmentKind, AugmentParams};
use steerkit::checkpoint::Checkpoint;
use steerkit::data::{generate_shapes, load_cifar10, ShapesConfig, CIFAR_RECORD};
use steerkit::eval::ood::ood_auc;
use steerkit::eval::retrieval::mrr;
use steerkit::gradsuite::{run_suite, CASE_NAMES};
use steerkit::losses::rho;
use steerkit::rng::CounterRng;
use steerkit::steer::{delta_steer, fit_maps_frozen, AffineEncoder, FitConfig, SteerMap};

struct Check {
    ok: bool,
    detail: String,
}

fn check(ok: bool, detail: impl Into<String>) -> Check {
    Check { ok, detail: detail.into() }
}

struct Criterion {
    name: &'static str,
    checks: Vec<Check>,
}

impl Criterion {
    fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.ok)
    }
}

type Res<T> = Result<T, String>;

fn cli(args: &[&str]) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_steerkit"));
    c.args(args).env("RUST_LOG", "warn");
    c
}

fn finish(child: Child, what: &str) -> Res<Value> {
    let out = child.wait_with_output().map_err(|e| format!("{what}: {e}"))?;
    if !out.status.success() {
        return Err(format!("{what}: exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr).trim()));
    }
    serde_json::from_slice(&out.stdout).map_err(|e| format!("{what}: stdout is not JSON: {e}"))
}

fn spawn(args: &[&str]) -> Res<Child> {
    cli(args)
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| format!("{}: {e}", args[0]))
}

fn run(args: &[&str]) -> Res<Value> {
    finish(spawn(args)?, &args.join(" "))
}

fn num(v: &Value, key: &str) -> Res<f64> {
    v[key].as_f64().ok_or_else(|| format!("missing `{key}` in {v}"))
}

fn failed(e: String) -> Vec<Check> {
    vec![check(false, e)]
}

struct Models {
    eq: String,
    inv: String,
}

fn train_models(dir: &Path) -> Res<Models> {
    let p = |n: &str| dir.join(n).to_string_lossy().into_owned();
    let (eq, inv_raw, inv) = (p("eq.ckpt"), p("inv_raw.ckpt"), p("inv.ckpt"));
    let t = Instant::now();
    let a = spawn(&["train", "--model", "equivariant", "--out", &eq, "--log", &p("eq.jsonl")])?;
    let b = spawn(&["train", "--model", "invariant", "--out", &inv_raw, "--log", &p("inv.jsonl")])?;
    let (ra, rb) = (finish(a, "train equivariant"), finish(b, "train invariant"));
    ra?;
    rb?;
    run(&["fit-maps", "-c", &inv_raw, "--out", &inv])?;
    eprintln!("trained both models and fitted invariant maps in {:.0?}", t.elapsed());
    Ok(Models { eq, inv })
}

fn gradients() -> Vec<Check> {
    let cases = CASE_NAMES.len() * 4;
    let t = Instant::now();
    match run_suite(cases, 7, 1e-4) {
        Ok(r) => {
            let secs = t.elapsed().as_secs_f64();
            let bad = r.cases.iter().filter(|c| !c.report.passed).count();
            vec![
                check(r.cases.len() >= 100, format!("{} cases over {} ops/losses", r.cases.len(), CASE_NAMES.len())),
                check(r.passed(), format!("max rel err {:.2e}, {bad} over 1e-4", r.max_rel_err)),
                check(secs <= 120.0, format!("{secs:.1} s")),
            ]
        }
        Err(e) => failed(e.to_string()),
    }
}

fn rho_fixtures() -> Vec<Check> {
    let d = 8;
    let mut rng = CounterRng::new(11);
    let e: Vec<f32> = (0..d).map(|_| rng.normal() as f32).collect();
    let c: Vec<f32> = (0..d).map(|_| rng.normal() as f32).collect();
    let e_aug: Vec<f32> = e.iter().zip(&c).map(|(a, b)| a + b).collect();
    let p = AugmentParams::new(AugmentKind::Photo, vec![0.3, -0.2, 0.1]).expect("valid θ");
    let identity = SteerMap::<f32>::identity(AugmentKind::Photo, d);
    let mut perfect = identity.clone();
    if let Some((_, b)) = perfect.params_mut().last() {
        b.data_mut().copy_from_slice(&c);
    }
    match (rho(&perfect, &e, &e_aug, &p), rho(&identity, &e, &e_aug, &p)) {
        (Ok(zero), Ok(one)) => vec![
            check(zero.abs() <= 1e-6, format!("perfect map ρ = {zero:.2e}")),
            check((one - 1.0).abs() <= 1e-6, format!("identity map ρ = {one:.8}")),
        ],
        (a, b) => failed(format!("{a:?} {b:?}")),
    }
}

fn rho_separation(m: &Models) -> Vec<Check> {
    let mut out = rho_fixtures();
    for kind in ["geo", "photo"] {
        let r = (|| {
            let eq = num(&run(&["measure-rho", "-c", &m.eq, "--kind", kind])?, "mean_rho")?;
            let inv = num(&run(&["measure-rho", "-c", &m.inv, "--kind", kind])?, "mean_rho")?;
            Ok::<_, String>((eq, inv))
        })();
        out.push(match r {
            Ok((eq, inv)) => check(inv - eq >= 0.1, format!("ρ_{kind}: eq {eq:.3} vs inv {inv:.3} (gap {:.3}, need ≥ 0.1)", inv - eq)),
            Err(e) => check(false, e),
        });
    }
    out
}

fn mrr_separation(m: &Models) -> Vec<Check> {
    let oracle = mrr(&[1, 2, 4]).map(|v| v == 7.0 / 12.0).unwrap_or(false);
    let mut out = vec![check(oracle, "ranks {1,2,4} give 7/12")];
    for suite in ["color", "zoom"] {
        let r = (|| {
            let q = |ck: &str| run(&["mrr", "-c", ck, "--suite", suite, "--mode", "delta"]);
            Ok::<_, String>((num(&q(&m.eq)?, "mrr")?, num(&q(&m.inv)?, "mrr")?))
        })();
        out.push(match r {
            Ok((eq, inv)) => check(eq >= inv + 0.1, format!("{suite}: ΔM MRR eq {eq:.3} vs inv {inv:.3} (need eq ≥ inv + 0.1)")),
            Err(e) => check(false, e),
        });
    }
    out
}

fn transfer(m: &Models) -> Vec<Check> {
    let r = (|| {
        let acc = |ck: &str, t: &str| num(&run(&["probe", "-c", ck, "--target", t])?, "eval_accuracy");
        Ok::<_, String>([acc(&m.eq, "color")?, acc(&m.inv, "color")?, acc(&m.eq, "class")?, acc(&m.inv, "class")?])
    })();
    match r {
        Ok([ec, ic, ek, ik]) => vec![
            check(ec > ic, format!("color probe eq {ec:.3} vs inv {ic:.3} (need eq > inv)")),
            check((ek - ik).abs() <= 0.05, format!("class probe eq {ek:.3} vs inv {ik:.3} (gap {:.3}, need ≤ 0.05)", (ek - ik).abs())),
        ],
        Err(e) => failed(e),
    }
}

/// Every cut between distinct scores, plus the empty cut, by direct counting.
fn brute_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut ts: Vec<f64> = pos.iter().chain(neg).copied().collect();
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();
    let (mut auc, mut prev_r) = (0.0, 0.0);
    for t in ts {
        let tp = pos.iter().filter(|&&s| s >= t).count() as f64;
        let fp = neg.iter().filter(|&&s| s >= t).count() as f64;
        let r = tp / pos.len() as f64;
        auc += (r - prev_r) * (tp / (tp + fp));
        prev_r = r;
    }
    auc
}

fn auc_oracle() -> Check {
    let mut rng = CounterRng::new(99);
    let mut worst = 0.0f64;
    let mut n = 0;
    for _ in 0..500 {
        let np = 1 + (rng.uniform(0.0, 25.0) as usize);
        let nn = 1 + (rng.uniform(0.0, 25.0) as usize);
        let levels = 1.0 + rng.uniform(0.0, 8.0).floor();
        let mut draw = |k: usize| (0..k).map(|_| (rng.uniform(0.0, levels)).floor()).collect::<Vec<_>>();
        let (pos, neg) = (draw(np), draw(nn));
        match ood_auc(&pos, &neg) {
            Ok(a) => worst = worst.max((a - brute_auc(&pos, &neg)).abs()),
            Err(_) => worst = f64::INFINITY,
        }
        n += 1;
    }
    check(worst == 0.0, format!("{n} instances of ≤ 50 points with ties, max |Δ| = {worst:e}"))
}

fn ood(m: &Models) -> Vec<Check> {
    let mut out = vec![auc_oracle()];
    let curve = |ck: &str| -> Res<(f64, f64)> {
        let v = run(&["ood", "-c", ck, "--corruption", "gaussian_noise", "--severity", "3", "--augs", "1,60", "--mode", "latent", "--kind", "geo"])?;
        let pts = v["points"].as_array().ok_or("no points")?;
        let at = |n: u64| {
            pts.iter()
                .find(|p| p[0].as_u64() == Some(n))
                .and_then(|p| p[1].as_f64())
                .ok_or(format!("no point for {n} augmentations"))
        };
        Ok((at(1)?, at(60)?))
    };
    match curve(&m.eq) {
        Ok((a1, a60)) => out.push(check(a60 >= a1 + 0.02, format!("eq AUC-PR {a1:.3} → {a60:.3} (need +0.02)"))),
        Err(e) => out.push(check(false, e)),
    }
    match curve(&m.inv) {
        Ok((a1, a60)) => out.push(check((a60 - a1).abs() <= 0.02, format!("inv AUC-PR {a1:.3} → {a60:.3} (need |Δ| ≤ 0.02)"))),
        Err(e) => out.push(check(false, e)),
    }
    out
}

fn latency(m: &Models) -> Vec<Check> {
    match run(&["bench-tta", "-c", &m.eq, "--augs", "60", "--batch", "32"]) {
        Ok(v) => {
            let speedup = v["speedup"].as_f64().unwrap_or(0.0);
            let latent = v["latent_encoder_samples"].as_u64();
            let input = v["input_encoder_samples"].as_u64();
            vec![
                check(speedup >= 5.0, format!("latent path {speedup:.1}× faster than input path (need ≥ 5×)")),
                check(latent == Some(32), format!("latent encoder samples {latent:?} for batch 32")),
                check(input == Some(60 * 32), format!("input encoder samples {input:?}")),
            ]
        }
        Err(e) => failed(e),
    }
}

fn steering_algebra(m: &Models) -> Vec<Check> {
    let mut rng = CounterRng::new(5);
    let (mut worst_id, mut worst_zero) = (0.0f64, 0.0f64);
    for trial in 0..200 {
        let kind = AugmentKind::ALL[trial % 3];
        let map = SteerMap::<f64>::new(kind, 16, trial as u64);
        let e: Vec<f64> = (0..16).map(|_| rng.normal() * 2.0).collect();
        let theta = match kind {
            AugmentKind::Geo => {
                let (h, w) = (rng.uniform(0.2, 1.0), rng.uniform(0.2, 1.0));
                vec![rng.uniform(0.0, 1.0 - w), rng.uniform(0.0, 1.0 - h), h, w]
            }
            _ => (0..kind.theta_dim()).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        };
        let p = AugmentParams::new(kind, theta).expect("θ drawn in range");
        let w_m = rng.uniform(0.0, 10.0);
        let (Ok(mapped), Ok(delta), Ok(zero)) = (map.apply(&e, &p), delta_steer(&map, &e, &p, w_m), delta_steer(&map, &e, &p, 0.0)) else {
            return failed("steering call failed".into());
        };
        for i in 0..16 {
            worst_id = worst_id.max(((delta[i] - e[i]) - (1.0 + w_m) * (mapped[i] - e[i])).abs());
            worst_zero = worst_zero.max((zero[i] - mapped[i]).abs());
        }
    }
    let mut out = vec![
        check(worst_id <= 1e-6, format!("ΔM − e = (1+w_m)(M − e), max err {worst_id:.1e} over 200 draws")),
        check(worst_zero == 0.0, format!("w_m = 0 equals map_apply, max err {worst_zero:e}")),
    ];
    for kind in ["geo", "photo"] {
        out.push(match run(&["measure-rho", "-c", &m.eq, "--kind", kind, "--n-samples", "1"]).and_then(|v| num(&v, "anchoring")) {
            Ok(a) => check(a <= 0.1, format!("{kind} map anchoring mean‖M(e,θ_id)−e‖/mean‖e‖ = {a:.3} (need ≤ 0.1)")),
            Err(e) => check(false, e),
        });
    }
    out
}

fn synthetic_cifar(records: usize, rng: &mut CounterRng) -> Vec<u8> {
    let mut bytes = vec![0u8; records * CIFAR_RECORD];
    for (i, rec) in bytes.chunks_mut(CIFAR_RECORD).enumerate() {
        rec[0] = (i % 10) as u8;
        for b in &mut rec[1..] {
            *b = rng.uniform(0.0, 256.0) as u8;
        }
    }
    bytes
}

fn formats(m: &Models, dir: &Path) -> Vec<Check> {
    let mut out = Vec::new();
    let trip = (|| {
        let bytes = std::fs::read(&m.eq).map_err(|e| e.to_string())?;
        let ck = Checkpoint::from_bytes(&bytes).map_err(|e| e.to_string())?;
        let copy = dir.join("roundtrip.ckpt");
        ck.save(&copy).map_err(|e| e.to_string())?;
        let again = Checkpoint::load(&copy).map_err(|e| e.to_string())?;
        let same = std::fs::read(&copy).map_err(|e| e.to_string())? == bytes && again == ck;
        Ok::<_, String>(same)
    })();
    out.push(match trip {
        Ok(same) => check(same, "checkpoint load → save reproduces the file byte for byte"),
        Err(e) => check(false, e),
    });

    let cifar = dir.join("cifar");
    let mut rng = CounterRng::new(3);
    let r = (|| {
        std::fs::create_dir_all(&cifar).map_err(|e| e.to_string())?;
        std::fs::write(cifar.join("data_batch_1.bin"), synthetic_cifar(10_000, &mut rng)).map_err(|e| e.to_string())?;
        std::fs::write(cifar.join("test_batch.bin"), synthetic_cifar(10_000, &mut rng)).map_err(|e| e.to_string())?;
        let ds = load_cifar10(&cifar).map_err(|e| e.to_string())?;
        let labels_ok = ds.train.iter().all(|li| li.class_label < 10) && (0..10).all(|c| ds.train.iter().any(|li| li.class_label == c));
        Ok::<_, String>((ds.train.len(), ds.eval.len(), labels_ok))
    })();
    out.push(match r {
        Ok((tr, ev, labels)) => check(tr == 10_000 && ev == 10_000 && labels, format!("official-layout batches: {tr} train + {ev} test records, labels 0–9")),
        Err(e) => check(false, e),
    });
    let trunc = dir.join("cifar_truncated");
    let rejected = std::fs::create_dir_all(&trunc)
        .and_then(|_| {
            let mut b = synthetic_cifar(10_000, &mut rng);
            b.truncate(b.len() - 100);
            std::fs::write(trunc.join("data_batch_1.bin"), b)
        })
        .map(|_| load_cifar10(&trunc).is_err())
        .unwrap_or(false);
    out.push(check(rejected, "truncated batch file is rejected"));
    out
}

fn affine_oracle() -> Vec<Check> {
    let r = (|| {
        let ds = generate_shapes(&ShapesConfig {
            n_train: 600,
            n_eval: 10,
            ..Default::default()
        })?;
        let enc = AffineEncoder::new(32 * 32 * 3, 16, 0.3, 9);
        let cfg = FitConfig {
            epochs: 40,
            views_per_image: 4,
            ..Default::default()
        };
        fit_maps_frozen(&enc, &ds.train, &[AugmentKind::Geo, AugmentKind::Photo], &cfg)
    })();
    match r {
        Ok((_, hist)) => hist
            .iter()
            .map(|h| {
                let last = h.loss.last().copied().unwrap_or(f64::INFINITY);
                check(last <= 1e-3, format!("{} map on e(x) + Aθ: final L_E {last:.2e} (need ≤ 1e-3)", h.kind))
            })
            .collect(),
        Err(e) => failed(e.to_string()),
    }
}

fn main() {
    let strict = std::env::var("STEERKIT_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).expect("artifact dir");
    let t = Instant::now();

    let mut results = vec![Criterion { name: "gradients", checks: gradients() }];
    let models = train_models(&dir);
    match &models {
        Ok(m) => {
            results.push(Criterion { name: "rho-separation", checks: rho_separation(m) });
            results.push(Criterion { name: "mrr-separation", checks: mrr_separation(m) });
            results.push(Criterion { name: "transfer", checks: transfer(m) });
            results.push(Criterion { name: "ood-tta", checks: ood(m) });
            results.push(Criterion { name: "latency", checks: latency(m) });
            results.push(Criterion { name: "steering-algebra", checks: steering_algebra(m) });
            results.push(Criterion { name: "formats", checks: formats(m, &dir) });
        }
        Err(e) => {
            for name in ["rho-separation", "mrr-separation", "transfer", "ood-tta", "latency", "steering-algebra", "formats"] {
                results.push(Criterion { name, checks: failed(format!("training failed: {e}")) });
            }
        }
    }
    results.push(Criterion { name: "affine-oracle", checks: affine_oracle() });

    println!();
    for r in &results {
        println!("{} {}", if r.passed() { "PASS" } else { "FAIL" }, r.name);
        for c in &r.checks {
            println!("     {} {}", if c.ok { "ok  " } else { "MISS" }, c.detail);
        }
    }
    let n_pass = results.iter().filter(|r| r.passed()).count();
    println!("\nacceptance: {n_pass}/{} criteria passed in {:.0?}", results.len(), t.elapsed());

    let summary = json!(results
        .iter()
        .map(|r| json!({
            "criterion": r.name,
            "passed": r.passed(),
            "checks": r.checks.iter().map(|c| json!({"ok": c.ok, "detail": c.detail})).collect::<Vec<_>>(),
        }))
        .collect::<Vec<_>>());
    let path = dir.join("summary.json");
    if std::fs::write(&path, serde_json::to_string_pretty(&summary).expect("serializable")).is_ok() {
        println!("summary: {}", path.display());
    }
    if strict && n_pass < results.len() {
        std::process::exit(1);
    }
}
