use super::non_identity;
use crate::augment::{self, AugmentKind, AugmentParams};
use crate::checkpoint::Checkpoint;
use crate::data::{Image, LabeledImage};
use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::steer::{embed_images, extrapolate};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Tolerance on stored key norms.
pub const NORM_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Neighbor {
    pub id: usize,
    pub distance: f64,
}

pub fn l2_normalized(v: &[f32]) -> Result<Vec<f32>> {
    let n = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if !(n >= 1e-6) {
        return Err(Error::Domain {
            op: "l2_normalize",
            msg: format!("embedding norm {n} is too small to normalize"),
        });
    }
    Ok(v.iter().map(|&x| (x as f64 / n) as f32).collect())
}

/// Exhaustive Euclidean index over l2-normalized keys, stored in ascending id order.
#[derive(Clone, Debug)]
pub struct RetrievalIndex {
    ids: Vec<usize>,
    dim: usize,
    vectors: Vec<f32>,
    position: HashMap<usize, usize>,
    pub provenance: String,
}

impl RetrievalIndex {
    pub fn from_embeddings(ids: &[usize], emb: &Tensor<f32>, provenance: impl Into<String>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::validation("images", "cannot build an index from nothing"));
        }
        if emb.rows() != ids.len() {
            return Err(Error::Shape {
                op: "index",
                lhs: vec![ids.len()],
                rhs: emb.shape().to_vec(),
            });
        }
        let dim = emb.last_dim();
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.sort_by_key(|&i| ids[i]);
        let mut out = Self {
            ids: Vec::with_capacity(ids.len()),
            dim,
            vectors: Vec::with_capacity(ids.len() * dim),
            position: HashMap::with_capacity(ids.len()),
            provenance: provenance.into(),
        };
        for i in order {
            if out.position.insert(ids[i], out.ids.len()).is_some() {
                return Err(Error::validation("ids", format!("duplicate id {}", ids[i])));
            }
            out.ids.push(ids[i]);
            out.vectors.extend(l2_normalized(emb.row(i))?);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn vector(&self, id: usize) -> Option<&[f32]> {
        self.position.get(&id).map(|&p| &self.vectors[p * self.dim..(p + 1) * self.dim])
    }

    /// Every key ranked by distance to `query`, ties by ascending id.
    pub fn ranking(&self, query: &[f32]) -> Result<Vec<Neighbor>> {
        if query.len() != self.dim {
            return Err(Error::Shape {
                op: "retrieve",
                lhs: vec![self.dim],
                rhs: vec![query.len()],
            });
        }
        let mut out: Vec<Neighbor> = self
            .ids
            .iter()
            .zip(self.vectors.chunks(self.dim))
            .map(|(&id, v)| Neighbor {
                id,
                distance: v.iter().zip(query).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt(),
            })
            .collect();
        // Keys are already in id order, so a stable sort keeps ties by id.
        out.sort_by(|a, b| a.distance.total_cmp(&b.distance));
        Ok(out)
    }

    /// The `k` nearest keys. `k` above the index size is clamped.
    pub fn retrieve(&self, query: &[f32], k: usize) -> Result<Vec<Neighbor>> {
        if k > self.len() {
            log::warn!("k={k} exceeds index size {}; returning all keys", self.len());
        }
        let mut r = self.ranking(query)?;
        r.truncate(k);
        Ok(r)
    }

    /// 1-based rank of `target`. A missing target counts as rank = index size.
    pub fn rank_of(&self, query: &[f32], target: usize) -> Result<usize> {
        let r = self.ranking(query)?;
        Ok(match r.iter().position(|n| n.id == target) {
            Some(p) => p + 1,
            None => {
                log::warn!("target id {target} is not in the index");
                self.len()
            }
        })
    }
}

/// Encodes `(id, image)` pairs, optionally augmenting each key first.
pub fn build_index(
    ck: &Checkpoint,
    items: &[(usize, &Image)],
    key_aug: Option<&[Vec<AugmentParams>]>,
    provenance: impl Into<String>,
) -> Result<RetrievalIndex> {
    if items.is_empty() {
        return Err(Error::validation("images", "cannot build an index from nothing"));
    }
    let augmented: Vec<Image>;
    let imgs: Vec<&Image> = match key_aug {
        Some(seqs) => {
            if seqs.len() != items.len() {
                return Err(Error::validation("key_aug", "need one augmentation sequence per image"));
            }
            augmented = items
                .iter()
                .zip(seqs)
                .map(|((_, img), s)| augment::compose(img, s))
                .collect::<Result<_>>()?;
            augmented.iter().collect()
        }
        None => items.iter().map(|(_, img)| *img).collect(),
    };
    let e = embed_images(&ck.model, &ck.standardizer, &imgs)?;
    let ids: Vec<usize> = items.iter().map(|(id, _)| *id).collect();
    RetrievalIndex::from_embeddings(&ids, &e, provenance)
}

/// How a query embedding is formed from an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// `e(x)`.
    Raw,
    /// `e(g(x; θ))`.
    InputAug,
    /// `M(e(x), θ)`.
    Map,
    /// `ΔM(e(x), θ)`.
    Delta,
}

impl std::str::FromStr for QueryMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Self::Raw),
            "input-aug" | "input_aug" => Ok(Self::InputAug),
            "map" => Ok(Self::Map),
            "delta" => Ok(Self::Delta),
            other => Err(Error::validation("mode", format!("`{other}` is not raw, input-aug, map or delta"))),
        }
    }
}

/// Steers a batch of clean embeddings. Row `i` follows `steps[i]`, and every row
/// must use the same sequence of kinds.
pub fn steer_rows(
    ck: &Checkpoint,
    clean: &Tensor<f32>,
    steps: &[Vec<AugmentParams>],
    mode: QueryMode,
    w_m: f64,
) -> Result<Tensor<f32>> {
    if matches!(mode, QueryMode::Raw | QueryMode::InputAug) {
        return Err(Error::Usage(format!("{mode:?} queries are not formed in latent space")));
    }
    let n = clean.rows();
    let depth = steps.first().map_or(0, Vec::len);
    if steps.len() != n || depth == 0 || steps.iter().any(|s| s.len() != depth) {
        return Err(Error::Usage("map and delta queries need θ for every row".into()));
    }
    let mut cur = clean.clone();
    for s in 0..depth {
        let kind = steps[0][s].kind;
        if steps.iter().any(|row| row[s].kind != kind) {
            return Err(Error::Usage("rows disagree on the map sequence".into()));
        }
        let theta = Tensor::new(
            vec![n, kind.theta_dim()],
            steps.iter().flat_map(|row| row[s].theta_f32()).collect(),
        )?;
        cur = ck.map(kind)?.apply_batch(&cur, &theta)?;
    }
    if mode == QueryMode::Delta {
        let d = clean.last_dim();
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            data.extend(extrapolate(clean.row(i), cur.row(i), w_m)?);
        }
        cur = Tensor::new(vec![n, d], data)?;
    }
    Ok(cur)
}

/// The l2-normalized query embedding for one image.
pub fn query_embedding(ck: &Checkpoint, img: &Image, mode: QueryMode, steps: &[AugmentParams], w_m: f64) -> Result<Vec<f32>> {
    l2_normalized(&query_vector(ck, img, mode, steps, w_m)?)
}

/// The query embedding before normalization.
pub fn query_vector(ck: &Checkpoint, img: &Image, mode: QueryMode, steps: &[AugmentParams], w_m: f64) -> Result<Vec<f32>> {
    let e = match mode {
        QueryMode::Raw => embed_images(&ck.model, &ck.standardizer, &[img])?,
        QueryMode::InputAug => {
            if steps.is_empty() {
                return Err(Error::Usage("input-aug queries need --kind and --theta".into()));
            }
            let a = augment::compose(img, steps)?;
            embed_images(&ck.model, &ck.standardizer, &[&a])?
        }
        QueryMode::Map | QueryMode::Delta => {
            let clean = embed_images(&ck.model, &ck.standardizer, &[img])?;
            steer_rows(ck, &clean, &[steps.to_vec()], mode, w_m)?
        }
    };
    Ok(e.row(0).to_vec())
}

/// `(1/n) Σ 1/r_i` over 1-based ranks.
pub fn mrr(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::validation("ranks", "need at least one query"));
    }
    if ranks.contains(&0) {
        return Err(Error::validation("ranks", "ranks are 1-based"));
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MrrSuite {
    /// Chromatic shift with the channel mean held fixed.
    Color,
    /// Centered crop.
    Zoom,
    /// Equal shift on all channels.
    Bright,
    /// Chromatic shift followed by a random crop.
    ColorCrop,
}

impl std::str::FromStr for MrrSuite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "color" => Ok(Self::Color),
            "zoom" => Ok(Self::Zoom),
            "bright" => Ok(Self::Bright),
            "color-crop" | "color_crop" => Ok(Self::ColorCrop),
            other => Err(Error::validation("suite", format!("`{other}` is not color, zoom, bright or color-crop"))),
        }
    }
}

impl MrrSuite {
    pub const ALL: [MrrSuite; 4] = [Self::Color, Self::Zoom, Self::Bright, Self::ColorCrop];

    pub fn kinds(self) -> &'static [AugmentKind] {
        match self {
            Self::Color | Self::Bright => &[AugmentKind::Photo],
            Self::Zoom => &[AugmentKind::Geo],
            Self::ColorCrop => &[AugmentKind::Photo, AugmentKind::Geo],
        }
    }

    /// One augmentation sequence drawn for this suite.
    pub fn draw(self, rng: &mut CounterRng) -> Vec<AugmentParams> {
        let color = |rng: &mut CounterRng| {
            let v: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let m = v.iter().sum::<f64>() / 3.0;
            let dev: Vec<f64> = v.iter().map(|x| x - m).collect();
            let peak = dev.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(1e-9);
            let c = rng.uniform(0.4, 0.9);
            AugmentParams {
                kind: AugmentKind::Photo,
                theta: dev.iter().map(|x| c * x / peak).collect(),
            }
        };
        match self {
            Self::Color => vec![color(rng)],
            Self::Bright => {
                let d = rng.uniform(0.2, 0.8) * if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
                vec![AugmentParams {
                    kind: AugmentKind::Photo,
                    theta: vec![d; 3],
                }]
            }
            Self::Zoom => {
                let s = rng.uniform(0.4, 0.85);
                let o = (1.0 - s) / 2.0;
                vec![AugmentParams {
                    kind: AugmentKind::Geo,
                    theta: vec![o, o, s, s],
                }]
            }
            Self::ColorCrop => vec![color(rng), non_identity(AugmentKind::Geo, rng)],
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MrrReport {
    pub suite: MrrSuite,
    pub mode: QueryMode,
    pub mrr: f64,
    pub n_queries: usize,
    pub index_size: usize,
    pub w_m: f64,
}

/// Keys are `e(g(x; θ))` for every (image, θ) pair; the query for a pair is formed by
/// `mode` from the clean image and must retrieve that pair's key.
pub fn run_mrr(
    ck: &Checkpoint,
    images: &[LabeledImage],
    suite: MrrSuite,
    mode: QueryMode,
    n_theta: usize,
    w_m: f64,
    seed: u64,
) -> Result<MrrReport> {
    if images.is_empty() || n_theta == 0 {
        return Err(Error::validation("n_theta", "need at least one image and one θ"));
    }
    for &k in suite.kinds() {
        if matches!(mode, QueryMode::Map | QueryMode::Delta) {
            ck.map(k)?;
        }
    }
    let mut rng = CounterRng::new(seed).stream(0x6d7272 + suite as u64);
    let mut steps = Vec::with_capacity(images.len() * n_theta);
    let mut keyed: Vec<(usize, &Image)> = Vec::with_capacity(images.len() * n_theta);
    for (i, li) in images.iter().enumerate() {
        for t in 0..n_theta {
            steps.push(suite.draw(&mut rng));
            keyed.push((i * n_theta + t, &li.image));
        }
    }
    let index = build_index(ck, &keyed, Some(&steps), format!("{suite:?} keys, {n_theta} θ per image"))?;
    let sources: Vec<&Image> = keyed.iter().map(|(_, img)| *img).collect();
    let queries = match mode {
        QueryMode::Raw => embed_images(&ck.model, &ck.standardizer, &sources)?,
        QueryMode::InputAug => {
            let aug: Vec<Image> = sources.iter().zip(&steps).map(|(img, s)| augment::compose(img, s)).collect::<Result<_>>()?;
            embed_images(&ck.model, &ck.standardizer, &aug.iter().collect::<Vec<_>>())?
        }
        QueryMode::Map | QueryMode::Delta => {
            let clean = embed_images(&ck.model, &ck.standardizer, &sources)?;
            steer_rows(ck, &clean, &steps, mode, w_m)?
        }
    };
    let mut ranks = Vec::with_capacity(keyed.len());
    for (row, (id, _)) in keyed.iter().enumerate() {
        let q = l2_normalized(queries.row(row))?;
        ranks.push(index.rank_of(&q, *id)?);
    }
    Ok(MrrReport {
        suite,
        mode,
        mrr: mrr(&ranks)?,
        n_queries: ranks.len(),
        index_size: index.len(),
        w_m,
    })
}


pub const DEFAULT_K: usize = 10;

fn default_k() -> usize {
    DEFAULT_K
}

/// One retrieval against an index of clean images. Shared by the CLI and the HTTP API.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieveRequest {
    pub query_id: usize,
    pub mode: QueryMode,
    #[serde(default)]
    pub kind: Option<AugmentKind>,
    #[serde(default)]
    pub theta: Option<Vec<f64>>,
    /// Falls back to the checkpoint's default.
    #[serde(default)]
    pub w_m: Option<f64>,
    #[serde(default = "default_k")]
    pub k: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct RetrieveOutcome {
    pub query_id: usize,
    pub mode: QueryMode,
    pub w_m: f64,
    pub neighbors: Vec<Neighbor>,
    pub query_embedding_norm: f64,
}

impl RetrieveRequest {
    /// The steering step, if the mode needs one. Raw queries ignore θ.
    pub fn steps(&self) -> Result<Vec<AugmentParams>> {
        if self.mode == QueryMode::Raw {
            return Ok(Vec::new());
        }
        let kind = self
            .kind
            .ok_or_else(|| Error::validation("kind", format!("{:?} queries need a kind", self.mode)))?;
        let theta = self
            .theta
            .clone()
            .ok_or_else(|| Error::validation("theta", format!("{:?} queries need θ", self.mode)))?;
        Ok(vec![AugmentParams::new(kind, theta)?])
    }
}

/// Runs `req` against `index`, whose ids are positions in `images`.
pub fn execute_retrieve(
    ck: &Checkpoint,
    index: &RetrievalIndex,
    images: &[LabeledImage],
    req: &RetrieveRequest,
) -> Result<RetrieveOutcome> {
    if req.k == 0 {
        return Err(Error::validation("k", "must be at least 1"));
    }
    let img = images.get(req.query_id).ok_or_else(|| Error::NotFound {
        what: format!("query_id {}", req.query_id),
    })?;
    let steps = req.steps()?;
    let w_m = req.w_m.unwrap_or_else(|| ck.default_wm());
    if !(w_m >= 0.0 && w_m.is_finite()) {
        return Err(Error::validation("w_m", format!("must be a finite value ≥ 0, got {w_m}")));
    }
    if let Some(p) = steps.first() {
        if matches!(req.mode, QueryMode::Map | QueryMode::Delta) {
            ck.map(p.kind)?;
        }
    }
    let q = query_vector(ck, &img.image, req.mode, &steps, w_m)?;
    let norm = q.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    let neighbors = index.retrieve(&l2_normalized(&q)?, req.k)?;
    Ok(RetrieveOutcome {
        query_id: req.query_id,
        mode: req.mode,
        w_m,
        neighbors,
        query_embedding_norm: norm,
    })
}

const INDEX_FORMAT: &str = "steerkit-index/1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexFile {
    format: String,
    checkpoint_id: String,
    provenance: String,
    dim: usize,
    ids: Vec<usize>,
    vectors: Vec<f32>,
}

impl RetrievalIndex {
    /// Clean embeddings of every image, keyed by position.
    pub fn of_images(ck: &Checkpoint, images: &[LabeledImage], provenance: impl Into<String>) -> Result<Self> {
        let items: Vec<(usize, &Image)> = images.iter().enumerate().map(|(i, li)| (i, &li.image)).collect();
        build_index(ck, &items, None, provenance)
    }

    pub fn save(&self, path: &std::path::Path, checkpoint_id: &str) -> Result<()> {
        let file = IndexFile {
            format: INDEX_FORMAT.into(),
            checkpoint_id: checkpoint_id.into(),
            provenance: self.provenance.clone(),
            dim: self.dim,
            ids: self.ids.clone(),
            vectors: self.vectors.clone(),
        };
        let bytes = serde_json::to_vec(&file).expect("index serializes");
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Loads an index file and checks that it was built from `checkpoint_id`.
    pub fn load(path: &std::path::Path, checkpoint_id: &str) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let f: IndexFile = serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        if f.format != INDEX_FORMAT {
            return Err(Error::format(path, format!("unknown index format `{}`", f.format)));
        }
        if f.checkpoint_id != checkpoint_id {
            return Err(Error::format(
                path,
                format!("index was built from checkpoint {}, not {checkpoint_id}", f.checkpoint_id),
            ));
        }
        if f.dim == 0 || f.vectors.len() != f.ids.len() * f.dim {
            return Err(Error::format(path, "vector block does not match ids and dim"));
        }
        for (i, v) in f.vectors.chunks(f.dim).enumerate() {
            let n = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > NORM_TOL {
                return Err(Error::format(path, format!("key {} has norm {n}", f.ids[i])));
            }
        }
        let emb = Tensor::new(vec![f.ids.len(), f.dim], f.vectors)?;
        Self::from_embeddings(&f.ids, &emb, f.provenance).map_err(|e| Error::format(path, e.to_string()))
    }
}
