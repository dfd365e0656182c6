use super::*;
use crate::augment::{parse_theta, AugmentKind};
use crate::checkpoint::{checkpoint_id, Checkpoint, MapsOrigin};
use crate::data::{export_png, generate_shapes, Dataset, DatasetSpec, Image, ShapesConfig};
use crate::eval::ood::write_pr_csv;
use crate::eval::{
    bench_tta, execute_retrieve, linear_probe, measure_rho, ood_report, run_mrr, Corruption, MrrSuite, ProbeConfig,
    ProbeTarget, QueryMode, RetrievalIndex, RetrieveRequest, TtaMode,
};
use crate::losses::LossWeights;
use crate::steer::{fit_maps_frozen, FitConfig, FrozenModel};
use crate::trainer::{train, ModelKind, TrainConfig};
use serde::Serialize;
use serde_json::json;
use std::collections::BTreeMap;
use std::time::Instant;

pub(super) fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::FitMaps(a) => fit_maps(a, out),
        Command::MeasureRho(a) => rho(a, out),
        Command::Probe(a) => probe(a, out),
        Command::Index(a) => index(a, out),
        Command::Retrieve(a) => retrieve(a, out),
        Command::Mrr(a) => mrr(a, out),
        Command::Ood(a) => ood(a, out),
        Command::BenchTta(a) => bench(a, out),
        Command::Sweep(a) => sweep(a, out),
        Command::Serve(a) => serve(a),
    }
}

fn emit(out: &mut dyn Write, v: &impl Serialize) -> Result<()> {
    let s = serde_json::to_string_pretty(v).expect("report serializes");
    writeln!(out, "{s}").map_err(|e| Error::io("<stdout>", e))
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<T> {
    s.parse()
}

fn parse_kinds(list: &[String]) -> Result<Vec<AugmentKind>> {
    list.iter().map(|s| parse(s.trim())).collect()
}

fn parse_model_kind(s: &str) -> Result<ModelKind> {
    match s {
        "equivariant" => Ok(ModelKind::Equivariant),
        "invariant" => Ok(ModelKind::Invariant),
        other => Err(Error::validation("model", format!("`{other}` is not equivariant or invariant"))),
    }
}

struct Loaded {
    ck: Checkpoint,
    id: String,
}

fn load_checkpoint(path: &Path) -> Result<Loaded> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck = Checkpoint::from_bytes(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    if let crate::checkpoint::Status::Failed { reason } = &ck.status {
        log::warn!("{}: training did not complete ({reason})", path.display());
    }
    Ok(Loaded {
        id: checkpoint_id(&bytes),
        ck,
    })
}

fn dataset_of(ck: &Checkpoint) -> Result<Dataset> {
    ck.config.dataset.load()
}

fn gen_data(a: GenDataArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg: ShapesConfig = match &a.config {
        Some(p) => load_toml(p)?,
        None => ShapesConfig::default(),
    };
    if let Some(v) = a.n_train {
        cfg.n_train = v;
    }
    if let Some(v) = a.n_eval {
        cfg.n_eval = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let ds = generate_shapes(&cfg)?;
    export_png(&ds, &a.out)?;
    log::info!("wrote {} train and {} eval images to {}", ds.train.len(), ds.eval.len(), a.out.display());
    emit(
        out,
        &json!({
            "out": a.out,
            "train": ds.train.len(),
            "eval": ds.eval.len(),
            "num_classes": ds.num_classes,
            "config": cfg,
        }),
    )
}

/// Config file, then preset, then individual flags.
fn build_train_config(o: &TrainOptions) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &o.config {
        Some(p) => load_toml(p)?,
        None => TrainConfig::default(),
    };
    if let Some(p) = &o.preset {
        let w = LossWeights::preset(p)?;
        cfg.weights.alpha = w.alpha;
        cfg.weights.beta = w.beta;
    }
    if let Some(v) = o.tau {
        cfg.weights.tau = v;
    }
    if o.raw_uniformity {
        cfg.weights.uniformity_on_sphere = false;
    }
    if let Some(v) = o.weight_decay {
        cfg.weights.weight_decay = v;
    }
    if let Some(v) = o.epochs {
        cfg.epochs = v;
        if cfg.warmup_epochs >= v {
            cfg.warmup_epochs = v.saturating_sub(1).min(cfg.warmup_epochs);
        }
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = o.lr {
        cfg.base_lr = v;
    }
    if let Some(v) = o.warmup_epochs {
        cfg.warmup_epochs = v;
    }
    if let Some(v) = o.clip_norm {
        cfg.clip_norm = v;
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(k) = &o.kinds {
        cfg.kinds = parse_kinds(k)?;
    }
    if o.ce_augment {
        cfg.ce_augment = true;
    }
    if let Some(dir) = &o.cifar {
        cfg.dataset = DatasetSpec::Cifar10 { dir: dir.clone() };
    }
    if o.n_train.is_some() || o.n_eval.is_some() {
        let DatasetSpec::Shapes(s) = &mut cfg.dataset else {
            return Err(Error::Usage("--n-train/--n-eval only apply to the shapes dataset".into()));
        };
        if let Some(v) = o.n_train {
            s.n_train = v;
        }
        if let Some(v) = o.n_eval {
            s.n_eval = v;
        }
    }
    Ok(cfg)
}

#[derive(Serialize)]
struct TrainSummary {
    checkpoint: PathBuf,
    checkpoint_id: String,
    model_kind: ModelKind,
    final_eval_accuracy: f64,
    final_rho_proxy: BTreeMap<AugmentKind, f64>,
    epochs: usize,
    elapsed_s: f64,
}

fn run_training(cfg: &TrainConfig, ds: &Dataset, out_path: &Path, log_path: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    log::info!("effective config: {}", serde_json::to_string(cfg).expect("config serializes"));
    let mut sink: Box<dyn Write> = match log_path {
        Some(p) => Box::new(std::fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => Box::new(std::io::stderr()),
    };
    let t = Instant::now();
    let ck = match train(cfg, ds, Some(sink.as_mut())) {
        Ok(ck) => ck,
        Err(f) => {
            if matches!(f.error, Error::NonFinite(_) | Error::Domain { .. }) {
                f.checkpoint.save(out_path)?;
                log::error!("partial checkpoint marked failed written to {}", out_path.display());
            }
            return Err(f.error);
        }
    };
    let bytes = ck.to_bytes()?;
    std::fs::write(out_path, &bytes).map_err(|e| Error::io(out_path, e))?;
    log::info!(
        "{:?} model: eval accuracy {:.4} after {} epochs, {:.1}s",
        cfg.model_kind,
        ck.history.final_eval_accuracy,
        cfg.epochs,
        t.elapsed().as_secs_f64()
    );
    Ok(TrainSummary {
        checkpoint: out_path.to_path_buf(),
        checkpoint_id: checkpoint_id(&bytes),
        model_kind: cfg.model_kind,
        final_eval_accuracy: ck.history.final_eval_accuracy,
        final_rho_proxy: ck.history.epochs.last().map(|e| e.rho_proxy.clone()).unwrap_or_default(),
        epochs: cfg.epochs,
        elapsed_s: t.elapsed().as_secs_f64(),
    })
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = build_train_config(&a.opts)?;
    if let Some(m) = &a.model {
        cfg.model_kind = parse_model_kind(m)?;
    }
    if let Some(v) = a.alpha {
        cfg.weights.alpha = v;
    }
    if let Some(v) = a.beta {
        cfg.weights.beta = v;
    }
    cfg.validate()?;
    let ds = cfg.dataset.load()?;
    let summary = run_training(&cfg, &ds, &a.out, a.opts.log.as_deref())?;
    emit(out, &summary)
}

fn fit_maps(a: FitMapsArgs, out: &mut dyn Write) -> Result<()> {
    let Loaded { mut ck, .. } = load_checkpoint(&a.ck.checkpoint)?;
    if ck.maps_origin == Some(MapsOrigin::CoTrained) && !ck.maps.is_empty() && !a.replace {
        return Err(Error::Usage(format!(
            "{} already has co-trained maps; pass --replace to fit frozen ones instead",
            a.ck.checkpoint.display()
        )));
    }
    let mut cfg: FitConfig = match &a.config {
        Some(p) => load_toml(p)?,
        None => FitConfig::default(),
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.base_lr = v;
    }
    if let Some(v) = a.views {
        cfg.views_per_image = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let kinds = match &a.kinds {
        Some(k) => parse_kinds(k)?,
        None => ck.config.kinds.clone(),
    };
    if kinds.is_empty() {
        return Err(Error::validation("kinds", "nothing to fit"));
    }
    log::info!("fit config: {}", serde_json::to_string(&cfg).expect("config serializes"));
    let ds = dataset_of(&ck)?;
    let t = Instant::now();
    let (maps, hist) = {
        let enc = FrozenModel {
            model: &ck.model,
            standardizer: &ck.standardizer,
        };
        fit_maps_frozen(&enc, &ds.train, &kinds, &cfg)?
    };
    ck.maps = maps;
    ck.maps_origin = Some(MapsOrigin::FrozenFit);
    ck.fit_history = hist;
    let dest = a.out.unwrap_or(a.ck.checkpoint);
    let bytes = ck.to_bytes()?;
    std::fs::write(&dest, &bytes).map_err(|e| Error::io(&dest, e))?;
    let losses: BTreeMap<AugmentKind, (f64, f64)> = ck
        .fit_history
        .iter()
        .map(|h| (h.kind, (h.loss[0], *h.loss.last().expect("at least one epoch"))))
        .collect();
    emit(
        out,
        &json!({
            "checkpoint": dest,
            "checkpoint_id": checkpoint_id(&bytes),
            "kinds": kinds,
            "l_e_initial_final": losses,
            "elapsed_s": t.elapsed().as_secs_f64(),
        }),
    )
}

fn rho(a: RhoArgs, out: &mut dyn Write) -> Result<()> {
    let kind: AugmentKind = parse(&a.kind)?;
    let Loaded { ck, .. } = load_checkpoint(&a.ck.checkpoint)?;
    ck.map(kind)?;
    let ds = dataset_of(&ck)?;
    let r = measure_rho(&ck, &ds.eval, kind, a.n_samples, a.n_theta, a.seed)?;
    log::info!("mean ρ_{kind} = {:.4} over {} samples", r.mean_rho, r.n_samples * r.n_theta);
    emit(out, &r)
}

fn probe(a: ProbeArgs, out: &mut dyn Write) -> Result<()> {
    let target: ProbeTarget = parse(&a.target)?;
    let Loaded { ck, .. } = load_checkpoint(&a.ck.checkpoint)?;
    let ds = dataset_of(&ck)?;
    let cfg = ProbeConfig {
        steps: a.steps,
        lr: a.lr,
        shuffle_labels: a.shuffle_labels,
        seed: a.seed,
    };
    let r = linear_probe(&ck, &ds, target, &cfg)?;
    log::info!("{target:?} probe: eval accuracy {:.4}", r.eval_accuracy);
    emit(out, &r)
}

fn index(a: IndexArgs, out: &mut dyn Write) -> Result<()> {
    let Loaded { ck, id } = load_checkpoint(&a.ck.checkpoint)?;
    let ds = dataset_of(&ck)?;
    let idx = RetrievalIndex::of_images(&ck, &ds.eval, "eval split, clean images")?;
    idx.save(&a.out, &id)?;
    emit(
        out,
        &json!({"index": a.out, "checkpoint_id": id, "size": idx.len(), "dim": idx.dim()}),
    )
}

/// The index a retrieval command runs against: a saved file or the eval split embedded now.
pub(crate) fn open_index(ck: &Checkpoint, id: &str, path: Option<&Path>, ds: &Dataset) -> Result<RetrievalIndex> {
    match path {
        Some(p) => {
            let idx = RetrievalIndex::load(p, id)?;
            if idx.len() != ds.eval.len() {
                return Err(Error::format(p, format!("index has {} keys, eval split has {}", idx.len(), ds.eval.len())));
            }
            Ok(idx)
        }
        None => RetrievalIndex::of_images(ck, &ds.eval, "eval split, clean images"),
    }
}

fn retrieve(a: RetrieveArgs, out: &mut dyn Write) -> Result<()> {
    let Loaded { ck, id } = load_checkpoint(&a.ck.checkpoint)?;
    let req = RetrieveRequest {
        query_id: a.query_id,
        mode: parse::<QueryMode>(&a.mode)?,
        kind: a.kind.as_deref().map(parse).transpose()?,
        theta: a.theta.as_deref().map(parse_theta).transpose()?,
        w_m: a.wm,
        k: a.k,
    };
    req.steps()?;
    let ds = dataset_of(&ck)?;
    let idx = open_index(&ck, &id, a.index.as_deref(), &ds)?;
    let r = execute_retrieve(&ck, &idx, &ds.eval, &req)?;
    let ids: Vec<usize> = r.neighbors.iter().map(|n| n.id).collect();
    log::info!("query {} ({:?}): {ids:?}", req.query_id, req.mode);
    emit(
        out,
        &json!({
            "checkpoint_id": id,
            "query_id": r.query_id,
            "mode": r.mode,
            "kind": req.kind,
            "theta": req.theta,
            "w_m": r.w_m,
            "k": req.k,
            "neighbors": r.neighbors,
            "query_embedding_norm": r.query_embedding_norm,
        }),
    )
}

fn eval_subset<'a>(ds: &'a Dataset, n: usize, flag: &str) -> Result<&'a [crate::data::LabeledImage]> {
    if n == 0 {
        return Err(Error::validation(flag, "must be at least 1"));
    }
    if n > ds.eval.len() {
        log::warn!("{flag}={n} exceeds the eval split; using all {}", ds.eval.len());
    }
    Ok(&ds.eval[..n.min(ds.eval.len())])
}

fn mrr(a: MrrArgs, out: &mut dyn Write) -> Result<()> {
    let suite: MrrSuite = parse(&a.suite)?;
    let mode: QueryMode = parse(&a.mode)?;
    let Loaded { ck, .. } = load_checkpoint(&a.ck.checkpoint)?;
    let wm = a.wm.unwrap_or_else(|| ck.default_wm());
    let ds = dataset_of(&ck)?;
    let images = eval_subset(&ds, a.n_images, "n_images")?;
    let r = run_mrr(&ck, images, suite, mode, a.n_theta, wm, a.seed)?;
    log::info!("{suite:?} suite, {mode:?} queries: MRR {:.4}", r.mrr);
    emit(out, &r)
}

fn ood(a: OodArgs, out: &mut dyn Write) -> Result<()> {
    let corruption: Corruption = parse(&a.corruption)?;
    let mode: TtaMode = parse(&a.mode)?;
    let kind: AugmentKind = parse(&a.kind)?;
    corruption.parameter(a.severity)?;
    if a.augs.is_empty() || a.augs.contains(&0) {
        return Err(Error::validation("augs", "view counts must be ≥ 1"));
    }
    let Loaded { ck, .. } = load_checkpoint(&a.ck.checkpoint)?;
    if mode == TtaMode::Latent {
        ck.map(kind)?;
    }
    let ds = dataset_of(&ck)?;
    let images = eval_subset(&ds, a.n_images, "n_images")?;
    let r = ood_report(&ck, images, corruption, a.severity, &a.augs, mode, kind, a.seed)?;
    if let Some(dir) = &a.csv_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for ((n, _), curve) in r.points.iter().zip(&r.curves) {
            let p = dir.join(format!("pr_n{n}.csv"));
            let f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
            write_pr_csv(curve, std::io::BufWriter::new(f)).map_err(|e| Error::io(&p, e))?;
        }
    }
    for (n, auc) in &r.points {
        log::info!("{corruption} s{}: {n} views, AUC-PR {auc:.4}", a.severity);
    }
    emit(out, &r)
}

fn bench(a: BenchArgs, out: &mut dyn Write) -> Result<()> {
    let kind: AugmentKind = parse(&a.kind)?;
    let Loaded { ck, .. } = load_checkpoint(&a.ck.checkpoint)?;
    ck.map(kind)?;
    let ds = dataset_of(&ck)?;
    let images: Vec<&Image> = eval_subset(&ds, a.batch, "batch")?.iter().map(|l| &l.image).collect();
    let r = bench_tta(&ck, &images, a.augs, kind, a.reps, a.seed)?;
    log::info!(
        "input {:.1} ms, latent {:.1}+{:.1} ms, speedup {:.1}x",
        r.t_input_ms,
        r.t_latent_encode_ms,
        r.t_latent_map_ms,
        r.speedup
    );
    emit(out, &r)
}

#[derive(Serialize)]
struct SweepRow {
    alpha: f64,
    beta: f64,
    #[serde(flatten)]
    train: TrainSummary,
    rho: BTreeMap<AugmentKind, f64>,
}

fn sweep(a: SweepArgs, out: &mut dyn Write) -> Result<()> {
    let base = build_train_config(&a.opts)?;
    for (flag, list) in [("alpha", &a.alpha), ("beta", &a.beta)] {
        if list.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::validation(flag, "values must be finite and ≥ 0"));
        }
    }
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let ds = base.dataset.load()?;
    let mut rows = Vec::new();
    for &alpha in &a.alpha {
        for &beta in &a.beta {
            let mut cfg = base.clone();
            cfg.model_kind = ModelKind::Equivariant;
            cfg.weights.alpha = alpha;
            cfg.weights.beta = beta;
            let path = a.out_dir.join(format!("alpha{alpha}_beta{beta}.ckpt"));
            let log_path = a.opts.log.as_ref().map(|p| {
                let mut s = p.clone().into_os_string();
                s.push(format!(".alpha{alpha}_beta{beta}"));
                PathBuf::from(s)
            });
            let summary = run_training(&cfg, &ds, &path, log_path.as_deref())?;
            let ck = Checkpoint::load(&path)?;
            let mut rho = BTreeMap::new();
            for &k in ck.maps.keys() {
                rho.insert(k, measure_rho(&ck, &ds.eval, k, a.rho_samples, 4, cfg.seed)?.mean_rho);
            }
            log::info!("α={alpha} β={beta}: accuracy {:.4}, ρ {rho:?}", summary.final_eval_accuracy);
            rows.push(SweepRow {
                alpha,
                beta,
                train: summary,
                rho,
            });
        }
    }
    emit(out, &rows)
}

fn serve(a: ServeArgs) -> Result<()> {
    let addr: std::net::SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|_| Error::validation("host", format!("`{}:{}` is not a socket address", a.host, a.port)))?;
    crate::serve::serve_blocking(addr, a.ck.checkpoint, a.index)
}
