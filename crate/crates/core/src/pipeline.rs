//! End-to-end run. Every stage writes its artifacts under the output
//! directory and records their SHA-256 in `manifest.json`; a resumed run
//! reloads any stage whose fingerprint and artifact hashes still match.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clf::{evaluate, train_gbt, Classifier, EvalReport, GbtModel};
use crate::config::{stage_index, PipelineConfig, STAGES};
use crate::error::{Error, Result};
use crate::gan::{synth_conditional, train_cwgan, GanHistory, GanModel};
use crate::io::ingest::{ingest_reader, write_queries};
use crate::io::{desk_corpus, ingest_csv, Checkpoint, LabeledQuery};
use crate::lab::{grid_search_mix, mix, stratified_kfold, Dataset, GridCell, GridConfig, GridResult, MixSpec, Provenance};
use crate::metrics::{full_report, Fidelity, QualityReport};
use crate::pseudo::{fit_pca, pseudo_label, LabelMapping, PseudoLabelResult};
use crate::rng;
use crate::tensor::Tensor;
use crate::text::{embed_batch, tokenize, train_embeddings, EmbeddingTable, TokenSequence, TokenizeOptions};
use crate::unet::{generate_unet, train_unet, UNetHistory, UNetParams};
use crate::vae::{encode_dataset, train_vae, vae_quality, VaeHistory, VaeParams, LATENT_DIM};

pub const MANIFEST: &str = "manifest.json";
pub const REPORTS_DIR: &str = "reports";

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Reuse completed stages recorded in an existing manifest.
    pub resume: bool,
    /// Stop after this stage.
    pub until: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    /// Hash of the stage's configuration and every upstream fingerprint.
    pub fingerprint: String,
    /// Artifact file name to SHA-256.
    pub outputs: BTreeMap<String, String>,
    /// Compute time of the run that produced the artifacts; a reused stage
    /// keeps the original figure.
    pub seconds: f64,
    pub reused: bool,
    /// Disabled by a stage toggle.
    pub disabled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: serde_json::Value,
    pub stage_seeds: BTreeMap<String, u64>,
    /// Input file to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub stages: Vec<StageRecord>,
    pub failure: Option<StageFailure>,
}

impl RunManifest {
    /// `stage/file` to hash over every completed stage. Wall times and the
    /// reuse flag are left out so two runs can be compared.
    pub fn output_hashes(&self) -> BTreeMap<String, String> {
        self.stages
            .iter()
            .flat_map(|s| s.outputs.iter().map(move |(f, h)| (format!("{}/{f}", s.name), h.clone())))
            .collect()
    }

    pub fn completed(&self) -> Vec<&str> {
        self.stages.iter().map(|s| s.name.as_str()).collect()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub rows: usize,
    pub class_counts: [usize; 2],
    pub holdout_rows: usize,
    pub skipped_rows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualitySummary {
    pub vae: Fidelity,
    pub unet: Option<QualityReport>,
    pub cwgan: Option<QualityReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoSource {
    pub rows: usize,
    /// Share of rows whose pseudo-label equals the source or conditioning label.
    pub agreement: f64,
    pub mapping: LabelMapping,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoSummary {
    pub unet: Option<PseudoSource>,
    pub cwgan: Option<PseudoSource>,
    pub applied_to_unet: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub result: GridResult,
    /// Real-only rows under the same folds.
    pub baseline: GridCell,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalSummary {
    pub p1: f64,
    pub p2: f64,
    pub train_rows: usize,
    pub test_rows: usize,
    pub hybrid: EvalReport,
    pub baseline: EvalReport,
}

/// The exported JSON summary; validated against `schema/summary.schema.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub completed: Vec<String>,
    pub corpus: CorpusSummary,
    pub embedding: Option<EmbeddingSummary>,
    pub vae: Option<LossSummary>,
    pub unet: Option<LossSummary>,
    pub cwgan: Option<GanSummary>,
    pub quality: Option<QualitySummary>,
    pub pseudo: Option<PseudoSummary>,
    pub grid: Option<GridSummary>,
    #[serde(rename = "final")]
    pub final_model: Option<FinalSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSummary {
    pub vocab: usize,
    pub epoch_loss: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub epochs: usize,
    pub final_train_loss: f64,
    pub final_val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanSummary {
    pub generator_steps: usize,
    pub final_critic_loss: f64,
    pub final_generator_loss: f64,
    pub grad_norm_last100: f64,
}

#[derive(Default)]
struct State {
    corpus: Vec<LabeledQuery>,
    skipped: usize,
    seqs: Vec<TokenSequence>,
    table: Option<EmbeddingTable>,
    vae: Option<VaeParams>,
    vae_history: Option<VaeHistory>,
    features: Option<Tensor>,
    unet: Option<UNetParams>,
    unet_history: Option<UNetHistory>,
    unet_rows: Option<Dataset>,
    cwgan: Option<GanModel>,
    cwgan_history: Option<GanHistory>,
    cwgan_rows: Option<Dataset>,
    quality: Option<QualitySummary>,
    pca_scatter: Option<String>,
    pseudo: Option<PseudoSummary>,
    pseudo_csv: BTreeMap<String, String>,
    grid: Option<GridSummary>,
    final_model: Option<FinalSummary>,
}

type Artifacts = Vec<(String, Vec<u8>)>;

/// A finished (or halted) run: its manifest plus the in-memory results the
/// reports are built from.
pub struct PipelineRun {
    pub config: PipelineConfig,
    pub out: PathBuf,
    pub manifest: RunManifest,
    state: State,
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    Ok(b)
}

fn labels_tensor(y: &[u8]) -> Tensor {
    Tensor::vector(y.iter().map(|&l| f64::from(l)).collect())
}

fn tensor_labels(t: &Tensor) -> Result<Vec<u8>> {
    t.data()
        .iter()
        .map(|&v| match v {
            0.0 => Ok(0),
            1.0 => Ok(1),
            _ => Err(Error::data(format!("stored label {v} is not 0 or 1"))),
        })
        .collect()
}

fn dataset_checkpoint(kind: &str, d: &Dataset) -> Checkpoint {
    let mut c = Checkpoint::new(kind);
    c.push("x", d.x.clone());
    c.push("y", labels_tensor(&d.y));
    c
}

fn dataset_from_checkpoint(c: &Checkpoint, kind: &str, p: Provenance) -> Result<Dataset> {
    c.expect_kind(kind)?;
    Dataset::new(c.require("x")?.clone(), tensor_labels(c.require("y")?)?, p)
}

fn last(v: &[f64]) -> f64 {
    v.last().copied().unwrap_or(f64::NAN)
}

impl PipelineRun {
    fn new(config: &PipelineConfig) -> Self {
        let config = config.seeded();
        let stage_seeds = STAGES.iter().map(|s| (s.to_string(), config.stage_seed(s))).collect();
        PipelineRun {
            out: config.paths.out.clone(),
            manifest: RunManifest {
                config: serde_json::to_value(&config).expect("config serializes"),
                stage_seeds,
                inputs: BTreeMap::new(),
                stages: Vec::new(),
                failure: None,
            },
            config,
            state: State::default(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn read_ckpt(&self, name: &str) -> Result<Checkpoint> {
        Checkpoint::load(&self.path(name))
    }

    fn read_json<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        Ok(serde_json::from_slice(&std::fs::read(self.path(name))?)?)
    }

    fn enabled(&self, stage: &str) -> bool {
        let t = &self.config.stages;
        match stage {
            "unet" => t.unet,
            "cwgan" => t.cwgan,
            "quality" => t.quality,
            "pseudo" => t.pseudo,
            "grid" => t.grid,
            "final" => t.final_model,
            _ => true,
        }
    }

    fn stage_settings(&self, stage: &str) -> serde_json::Value {
        let c = &self.config;
        let v = match stage {
            "ingest" => serde_json::json!({ "inputs": self.manifest.inputs, "corpus": c.corpus }),
            "tokenize" => serde_json::json!({ "url_decode": c.corpus.url_decode }),
            "embed" => serde_json::json!(c.embedding),
            "vae" => serde_json::json!(c.vae),
            "unet" => serde_json::json!({ "unet": c.unet, "rows": c.synth.unet_rows, "sigma": c.synth.noise_sigma, "test": c.final_model.test_fraction }),
            "cwgan" => serde_json::json!({ "cwgan": c.cwgan, "rows": c.synth.cwgan_rows, "test": c.final_model.test_fraction }),
            "quality" => serde_json::json!({ "pairs": c.synth.quality_pairs, "sigma": c.synth.noise_sigma }),
            "pseudo" => serde_json::json!({ "apply": c.synth.pseudo_label_unet }),
            "grid" => serde_json::json!({ "grid": c.grid, "model": c.grid_model }),
            _ => serde_json::json!(c.final_model),
        };
        serde_json::json!({
            "stage": stage,
            "seed": c.stage_seed(stage),
            "enabled": self.enabled(stage),
            "settings": v,
        })
    }

    fn fingerprint(&self, stage: &str) -> String {
        let prev = self.manifest.stages.last().map(|s| s.fingerprint.as_str()).unwrap_or("");
        sha256_hex(format!("{prev}\n{}", self.stage_settings(stage)).as_bytes())
    }

    /// Indices of real rows held out for the final evaluation.
    fn holdout(&self) -> Result<Vec<usize>> {
        let y: Vec<u8> = self.state.corpus.iter().map(|q| q.label).collect();
        let f = self.config.final_model.test_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::invalid(format!("final.test_fraction {f} outside (0, 1)")));
        }
        let k = ((1.0 / f).round() as usize).max(2);
        let plan = stratified_kfold(&y, k, self.config.stage_seed("split"))?;
        let mut h = plan.folds[0].clone();
        h.sort_unstable();
        Ok(h)
    }

    fn train_rows(&self) -> Result<Vec<usize>> {
        let h = self.holdout()?;
        let mut keep = vec![true; self.state.corpus.len()];
        for i in h {
            keep[i] = false;
        }
        Ok((0..keep.len()).filter(|&i| keep[i]).collect())
    }

    fn labels(&self) -> Vec<u8> {
        self.state.corpus.iter().map(|q| q.label).collect()
    }

    fn table(&self) -> Result<&EmbeddingTable> {
        self.state.table.as_ref().ok_or_else(|| Error::invalid("embedding stage has not run"))
    }

    fn vae(&self) -> Result<&VaeParams> {
        self.state.vae.as_ref().ok_or_else(|| Error::invalid("vae stage has not run"))
    }

    fn features(&self) -> Result<&Tensor> {
        self.state.features.as_ref().ok_or_else(|| Error::invalid("vae stage has not run"))
    }

    fn real_dataset(&self, idx: &[usize]) -> Result<Dataset> {
        let y = self.labels();
        Dataset::new(self.features()?.select_rows(idx), idx.iter().map(|&i| y[i]).collect(), Provenance::Real)
    }

    fn synth_or_empty(&self, d: &Option<Dataset>, p: Provenance) -> Dataset {
        d.clone().unwrap_or_else(|| Dataset::empty(LATENT_DIM, p))
    }

    // ---- stages -------------------------------------------------------

    fn run_stage(&mut self, stage: &str) -> Result<Artifacts> {
        let seed = self.config.stage_seed(stage);
        match stage {
            "ingest" => {
                let mut corpus = Vec::new();
                if self.config.paths.inputs.is_empty() {
                    corpus = desk_corpus(self.config.corpus.generate, seed);
                } else {
                    for p in &self.config.paths.inputs {
                        let r = ingest_csv(p, &self.config.corpus.schema)?;
                        self.state.skipped += r.skipped.len();
                        corpus.extend(r.queries);
                    }
                }
                let limit = self.config.corpus.limit;
                if limit > 0 && corpus.len() > limit {
                    let mut idx = rand::seq::index::sample(&mut rng::seeded(seed), corpus.len(), limit).into_vec();
                    idx.sort_unstable();
                    corpus = idx.into_iter().map(|i| corpus[i].clone()).collect();
                }
                for c in 0..2u8 {
                    if !corpus.iter().any(|q| q.label == c) {
                        return Err(Error::data(format!("corpus has no rows of class {c}")));
                    }
                }
                self.state.corpus = corpus;
                let mut csv = Vec::new();
                write_queries(&mut csv, &self.state.corpus, &self.config.corpus.schema)?;
                Ok(vec![
                    ("corpus.csv".into(), csv),
                    ("ingest.json".into(), json_bytes(&serde_json::json!({ "skipped": self.state.skipped }))?),
                ])
            }
            "tokenize" => {
                let opts = TokenizeOptions {
                    url_decode: self.config.corpus.url_decode,
                };
                self.state.seqs = self
                    .state
                    .corpus
                    .iter()
                    .map(|q| tokenize(&q.query, opts))
                    .collect::<Result<_>>()?;
                Ok(vec![("tokens.json".into(), json_bytes(&self.state.seqs)?)])
            }
            "embed" => {
                let t = train_embeddings(&self.state.seqs, &self.config.embedding)?;
                let bytes = t.to_checkpoint().to_bytes();
                self.state.table = Some(t);
                Ok(vec![("embedding.ckpt".into(), bytes)])
            }
            "vae" => {
                let x = embed_batch(&self.state.seqs, self.table()?);
                let (params, history) = train_vae(&x, &self.config.vae)?;
                let z = encode_dataset(&x, &params)?;
                let mut f = Checkpoint::new("features");
                f.push("x", z.clone());
                f.push("y", labels_tensor(&self.labels()));
                let out = vec![
                    ("vae.ckpt".into(), params.to_checkpoint().to_bytes()),
                    ("vae_history.json".into(), json_bytes(&history)?),
                    ("features.ckpt".into(), f.to_bytes()),
                ];
                self.state.vae = Some(params);
                self.state.vae_history = Some(history);
                self.state.features = Some(z);
                Ok(out)
            }
            "unet" => {
                let train = self.train_rows()?;
                let train_seqs: Vec<TokenSequence> = train.iter().map(|&i| self.state.seqs[i].clone()).collect();
                let x = embed_batch(&train_seqs, self.table()?);
                let (params, history) = train_unet(&x, &self.config.unet)?;
                let (synth, src) = generate_unet(&x, &params, self.config.synth.noise_sigma, self.config.synth.unet_rows, rng::mix_seed(seed, 1))?;
                let y = self.labels();
                let rows = Dataset::new(
                    encode_dataset(&synth, self.vae()?)?,
                    src.iter().map(|&s| y[train[s]]).collect(),
                    Provenance::Unet,
                )?;
                let out = vec![
                    ("unet.ckpt".into(), params.to_checkpoint().to_bytes()),
                    ("unet_history.json".into(), json_bytes(&history)?),
                    ("unet_synth.ckpt".into(), dataset_checkpoint("unet-synth", &rows).to_bytes()),
                ];
                self.state.unet = Some(params);
                self.state.unet_history = Some(history);
                self.state.unet_rows = Some(rows);
                Ok(out)
            }
            "cwgan" => {
                let real = self.real_dataset(&self.train_rows()?)?;
                let (model, history) = train_cwgan(&real.x, &real.y, &self.config.cwgan)?;
                let total = self.config.synth.cwgan_rows;
                let ones = real.y.iter().filter(|&&l| l == 1).count();
                let n1 = ((total * ones) as f64 / real.len() as f64).round() as usize;
                let (x0, y0) = synth_conditional(total - n1, 0, &model.generator, rng::mix_seed(seed, 10))?;
                let (x1, y1) = synth_conditional(n1, 1, &model.generator, rng::mix_seed(seed, 11))?;
                let rows = Dataset::new(Tensor::stack_rows(&[&x0, &x1])?, [y0, y1].concat(), Provenance::Cwgan)?;
                let out = vec![
                    ("cwgan.ckpt".into(), model.to_checkpoint().to_bytes()),
                    ("cwgan_history.json".into(), json_bytes(&history)?),
                    ("cwgan_synth.ckpt".into(), dataset_checkpoint("cwgan-synth", &rows).to_bytes()),
                ];
                self.state.cwgan = Some(model);
                self.state.cwgan_history = Some(history);
                self.state.cwgan_rows = Some(rows);
                Ok(out)
            }
            "quality" => {
                let q = self.quality(seed)?;
                let scatter = self.pca_scatter()?;
                let out = vec![
                    ("quality.json".into(), json_bytes(&q)?),
                    ("pca_scatter.csv".into(), scatter.clone().into_bytes()),
                ];
                self.state.quality = Some(q);
                self.state.pca_scatter = Some(scatter);
                Ok(out)
            }
            "pseudo" => {
                let mut out = Vec::new();
                let mut summary = PseudoSummary {
                    unet: None,
                    cwgan: None,
                    applied_to_unet: false,
                };
                for (name, rows) in [("unet", &self.state.unet_rows), ("cwgan", &self.state.cwgan_rows)] {
                    let Some(d) = rows.as_ref().filter(|d| d.len() >= 3) else { continue };
                    let r: PseudoLabelResult = pseudo_label(&d.x, rng::mix_seed(seed, name.len() as u64))?;
                    let agree = r.labels.iter().zip(&d.y).filter(|(a, b)| a == b).count();
                    let src = PseudoSource {
                        rows: d.len(),
                        agreement: agree as f64 / d.len() as f64,
                        mapping: r.mapping.clone(),
                        labels: r.labels.clone(),
                    };
                    let csv = r.to_csv();
                    out.push((format!("pseudo_{name}.csv"), csv.clone().into_bytes()));
                    self.state.pseudo_csv.insert(name.to_string(), csv);
                    if name == "unet" {
                        summary.unet = Some(src);
                    } else {
                        summary.cwgan = Some(src);
                    }
                }
                out.push(("pseudo.json".into(), json_bytes(&summary)?));
                self.apply_pseudo(summary);
                Ok(out)
            }
            "grid" => {
                let real = self.real_dataset(&self.train_rows()?)?;
                let unet = self.synth_or_empty(&self.state.unet_rows, Provenance::Unet);
                let cwgan = self.synth_or_empty(&self.state.cwgan_rows, Provenance::Cwgan);
                let gbt = self.config.grid_model.clone();
                let factory = move |x: &Tensor, y: &[u8], s: u64| -> Result<Box<dyn Classifier>> {
                    Ok(Box::new(train_gbt(x, y, &crate::clf::GbtConfig { seed: s, ..gbt.clone() })?))
                };
                let result = grid_search_mix(&real, &unet, &cwgan, &self.config.grid, &factory)?;
                let base_cfg = GridConfig {
                    p1: vec![0.0],
                    p2: vec![0.0],
                    ..self.config.grid.clone()
                };
                let baseline = grid_search_mix(&real, &unet, &cwgan, &base_cfg, &factory)?.ranked.remove(0);
                if let Some(e) = &baseline.error {
                    return Err(Error::data(format!("real-only baseline failed: {e}")));
                }
                let s = GridSummary { result, baseline };
                let out = vec![
                    ("grid.json".into(), json_bytes(&s)?),
                    ("grid.csv".into(), s.result.to_csv().into_bytes()),
                ];
                self.state.grid = Some(s);
                Ok(out)
            }
            "final" => {
                let (p1, p2) = match self.state.grid.as_ref().and_then(|g| g.result.best()) {
                    Some(c) => (c.p1, c.p2),
                    None => (0.0, 0.0),
                };
                let real = self.real_dataset(&self.train_rows()?)?;
                let test = self.real_dataset(&self.holdout()?)?;
                let unet = self.synth_or_empty(&self.state.unet_rows, Provenance::Unet);
                let cwgan = self.synth_or_empty(&self.state.cwgan_rows, Provenance::Cwgan);
                let train = mix(&real, &unet, &cwgan, &MixSpec { p1, p2, seed })?;
                let cfg = &self.config.final_model.gbt;
                let hybrid_model = train_gbt(&train.x, &train.y, cfg)?;
                let base_model = train_gbt(&real.x, &real.y, cfg)?;
                let s = FinalSummary {
                    p1,
                    p2,
                    train_rows: train.len(),
                    test_rows: test.len(),
                    hybrid: evaluate(&hybrid_model, &test.x, &test.y)?,
                    baseline: evaluate(&base_model, &test.x, &test.y)?,
                };
                let out = vec![
                    ("final_gbt.ckpt".into(), hybrid_model.to_checkpoint().to_bytes()),
                    ("final.json".into(), json_bytes(&s)?),
                ];
                self.state.final_model = Some(s);
                Ok(out)
            }
            other => Err(Error::invalid(format!("unknown stage {other}"))),
        }
    }

    fn load_stage(&mut self, stage: &str) -> Result<()> {
        match stage {
            "ingest" => {
                let r = ingest_reader(std::fs::File::open(self.path("corpus.csv"))?, &self.config.corpus.schema)?;
                self.state.corpus = r.queries;
                let meta: serde_json::Value = self.read_json("ingest.json")?;
                self.state.skipped = meta["skipped"].as_u64().unwrap_or(0) as usize;
            }
            "tokenize" => self.state.seqs = self.read_json("tokens.json")?,
            "embed" => self.state.table = Some(EmbeddingTable::from_checkpoint(&self.read_ckpt("embedding.ckpt")?)?),
            "vae" => {
                self.state.vae = Some(VaeParams::from_checkpoint(&self.read_ckpt("vae.ckpt")?)?);
                self.state.vae_history = Some(self.read_json("vae_history.json")?);
                let f = self.read_ckpt("features.ckpt")?;
                f.expect_kind("features")?;
                self.state.features = Some(f.require("x")?.clone());
            }
            "unet" => {
                self.state.unet = Some(UNetParams::from_checkpoint(&self.read_ckpt("unet.ckpt")?)?);
                self.state.unet_history = Some(self.read_json("unet_history.json")?);
                let c = self.read_ckpt("unet_synth.ckpt")?;
                self.state.unet_rows = Some(dataset_from_checkpoint(&c, "unet-synth", Provenance::Unet)?);
            }
            "cwgan" => {
                self.state.cwgan = Some(GanModel::from_checkpoint(&self.read_ckpt("cwgan.ckpt")?)?);
                self.state.cwgan_history = Some(self.read_json("cwgan_history.json")?);
                let c = self.read_ckpt("cwgan_synth.ckpt")?;
                self.state.cwgan_rows = Some(dataset_from_checkpoint(&c, "cwgan-synth", Provenance::Cwgan)?);
            }
            "quality" => {
                self.state.quality = Some(self.read_json("quality.json")?);
                self.state.pca_scatter = Some(std::fs::read_to_string(self.path("pca_scatter.csv"))?);
            }
            "pseudo" => {
                for name in ["unet", "cwgan"] {
                    let p = self.path(&format!("pseudo_{name}.csv"));
                    if p.exists() {
                        self.state.pseudo_csv.insert(name.to_string(), std::fs::read_to_string(p)?);
                    }
                }
                let s: PseudoSummary = self.read_json("pseudo.json")?;
                self.apply_pseudo(s);
            }
            "grid" => self.state.grid = Some(self.read_json("grid.json")?),
            "final" => {
                GbtModel::from_checkpoint(&self.read_ckpt("final_gbt.ckpt")?)?;
                self.state.final_model = Some(self.read_json("final.json")?);
            }
            other => return Err(Error::invalid(format!("unknown stage {other}"))),
        }
        Ok(())
    }

    fn apply_pseudo(&mut self, mut s: PseudoSummary) {
        s.applied_to_unet = false;
        if self.config.synth.pseudo_label_unet {
            if let (Some(src), Some(rows)) = (&s.unet, self.state.unet_rows.as_mut()) {
                rows.y = src.labels.clone();
                s.applied_to_unet = true;
            }
        }
        self.state.pseudo = Some(s);
    }

    fn quality(&self, seed: u64) -> Result<QualitySummary> {
        let table = self.table()?;
        let vae = self.vae()?;
        let pairs = self.config.synth.quality_pairs.max(1);
        let n = self.state.seqs.len();
        let mut r = rng::seeded(seed);
        let pick = rand::seq::index::sample(&mut r, n, pairs.min(n)).into_vec();
        let pick_seqs: Vec<TokenSequence> = pick.iter().map(|&i| self.state.seqs[i].clone()).collect();
        let vae_fid = vae_quality(&embed_batch(&pick_seqs, table), vae)?;

        let train = self.train_rows()?;
        let unet = match &self.state.unet {
            Some(params) => {
                let train_seqs: Vec<TokenSequence> = train.iter().map(|&i| self.state.seqs[i].clone()).collect();
                let x = embed_batch(&train_seqs, table);
                let (synth, src) = generate_unet(&x, params, self.config.synth.noise_sigma, pairs, rng::mix_seed(seed, 1))?;
                let real: Vec<TokenSequence> = src.iter().map(|&s| train_seqs[s].clone()).collect();
                Some(full_report(&real, &synth, table, None)?)
            }
            None => None,
        };
        let cwgan = match &self.state.cwgan_rows {
            Some(d) if !d.is_empty() => {
                // unpaired samples are matched to real queries of the same class
                let y = self.labels();
                let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
                for &i in &train {
                    by_class[y[i] as usize].push(i);
                }
                for c in by_class.iter_mut() {
                    rng::shuffle(&mut r, c);
                }
                let m = pairs.min(d.len());
                let order = rng::permutation(&mut r, d.len());
                let rows: Vec<usize> = order[..m].to_vec();
                let mut cursor = [0usize; 2];
                let mut real = Vec::with_capacity(m);
                for &k in &rows {
                    let c = d.y[k] as usize;
                    let pool = &by_class[c];
                    real.push(self.state.seqs[pool[cursor[c] % pool.len()]].clone());
                    cursor[c] += 1;
                }
                Some(full_report(&real, &d.x.select_rows(&rows), table, Some(vae))?)
            }
            _ => None,
        };
        Ok(QualitySummary {
            vae: vae_fid,
            unet,
            cwgan,
        })
    }

    /// Real, U-Net and CWGAN rows projected on the real rows' top two
    /// principal components.
    fn pca_scatter(&self) -> Result<String> {
        let real = self.features()?;
        let pca = fit_pca(real)?;
        let y = self.labels();
        let mut s = String::from("source,label,pc1,pc2\n");
        let mut emit = |name: &str, x: &Tensor, labels: &[u8]| -> Result<()> {
            let z = pca.project(x)?;
            for (i, l) in labels.iter().enumerate() {
                s.push_str(&format!("{name},{l},{},{}\n", z.row(i)[0], z.row(i)[1]));
            }
            Ok(())
        };
        emit("real", real, &y)?;
        if let Some(d) = &self.state.unet_rows {
            emit("unet", &d.x, &d.y)?;
        }
        if let Some(d) = &self.state.cwgan_rows {
            emit("cwgan", &d.x, &d.y)?;
        }
        Ok(s)
    }

    // ---- driver -------------------------------------------------------

    fn write_manifest(&self) -> Result<()> {
        std::fs::write(self.path(MANIFEST), json_bytes(&self.manifest)?)?;
        Ok(())
    }

    fn reusable(&self, previous: Option<&RunManifest>, stage: &str, fingerprint: &str) -> Option<StageRecord> {
        let rec = previous?.stages.iter().find(|s| s.name == stage)?;
        if rec.fingerprint != fingerprint {
            return None;
        }
        let intact = rec
            .outputs
            .iter()
            .all(|(f, h)| std::fs::read(self.path(f)).map(|b| sha256_hex(&b) == *h).unwrap_or(false));
        intact.then(|| rec.clone())
    }

    fn execute(&mut self, options: &RunOptions) -> Result<()> {
        let stop = match &options.until {
            Some(s) => stage_index(s)?,
            None => STAGES.len() - 1,
        };
        std::fs::create_dir_all(&self.out)?;
        for p in &self.config.paths.inputs {
            let bytes = std::fs::read(p).map_err(|e| Error::data(format!("{}: {e}", p.display())))?;
            self.manifest.inputs.insert(p.display().to_string(), sha256_hex(&bytes));
        }
        let previous = if options.resume {
            RunManifest::load(&self.out).ok()
        } else {
            None
        };
        for stage in &STAGES[..=stop] {
            let fp = self.fingerprint(stage);
            let t = Instant::now();
            if !self.enabled(stage) {
                self.manifest.stages.push(StageRecord {
                    name: stage.to_string(),
                    fingerprint: fp,
                    outputs: BTreeMap::new(),
                    seconds: 0.0,
                    reused: false,
                    disabled: true,
                });
                continue;
            }
            if let Some(mut rec) = self.reusable(previous.as_ref(), stage, &fp) {
                log::info!("stage {stage}: reusing artifacts");
                self.load_stage(stage)?;
                rec.reused = true;
                self.manifest.stages.push(rec);
                continue;
            }
            log::info!("stage {stage}: running");
            let artifacts = match self.run_stage(stage) {
                Ok(a) => a,
                Err(e) => {
                    self.manifest.failure = Some(StageFailure {
                        stage: stage.to_string(),
                        message: e.to_string(),
                    });
                    self.write_manifest()?;
                    return Err(e);
                }
            };
            let mut outputs = BTreeMap::new();
            for (name, bytes) in artifacts {
                std::fs::write(self.path(&name), &bytes)?;
                outputs.insert(name, sha256_hex(&bytes));
            }
            self.manifest.stages.push(StageRecord {
                name: stage.to_string(),
                fingerprint: fp,
                outputs,
                seconds: t.elapsed().as_secs_f64(),
                reused: false,
                disabled: false,
            });
            self.write_manifest()?;
        }
        self.write_manifest()
    }

    pub fn summary(&self) -> Summary {
        let s = &self.state;
        let y = self.labels();
        let ones = y.iter().filter(|&&l| l == 1).count();
        Summary {
            seed: self.config.seed,
            completed: self.manifest.stages.iter().filter(|r| !r.disabled).map(|r| r.name.clone()).collect(),
            corpus: CorpusSummary {
                rows: y.len(),
                class_counts: [y.len() - ones, ones],
                holdout_rows: if y.is_empty() { 0 } else { self.holdout().map(|h| h.len()).unwrap_or(0) },
                skipped_rows: s.skipped,
            },
            embedding: s.table.as_ref().map(|t| EmbeddingSummary {
                vocab: t.vocab().len(),
                epoch_loss: t.record.epoch_loss.clone(),
            }),
            vae: s.vae_history.as_ref().map(|h| LossSummary {
                epochs: h.train_loss.len(),
                final_train_loss: last(&h.train_loss),
                final_val_loss: h.val_loss.last().copied(),
            }),
            unet: s.unet_history.as_ref().map(|h| LossSummary {
                epochs: h.train_loss.len(),
                final_train_loss: last(&h.train_loss),
                final_val_loss: h.val_loss.last().copied(),
            }),
            cwgan: s.cwgan_history.as_ref().map(|h| {
                let k = h.grad_norm.len();
                let tail = &h.grad_norm[k.saturating_sub(100)..];
                GanSummary {
                    generator_steps: h.generator_loss.len(),
                    final_critic_loss: last(&h.critic_loss),
                    final_generator_loss: last(&h.generator_loss),
                    grad_norm_last100: tail.iter().sum::<f64>() / tail.len().max(1) as f64,
                }
            }),
            quality: s.quality.clone(),
            pseudo: s.pseudo.clone(),
            grid: s.grid.clone(),
            final_model: s.final_model.clone(),
        }
    }

    /// Writes the JSON summary and every CSV/text report into `dir`;
    /// returns the written paths in a fixed order.
    pub fn export_reports(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let s = &self.state;
        let mut files: Vec<(String, Vec<u8>)> = vec![("summary.json".into(), json_bytes(&self.summary())?)];
        if let Some(h) = &s.vae_history {
            files.push(("vae_history.csv".into(), h.to_csv().into_bytes()));
        }
        if let Some(h) = &s.unet_history {
            files.push(("unet_history.csv".into(), h.to_csv().into_bytes()));
        }
        if let Some(h) = &s.cwgan_history {
            files.push(("cwgan_history.csv".into(), h.to_csv().into_bytes()));
        }
        if let Some(q) = &s.quality {
            files.push(("quality.csv".into(), quality_csv(q).into_bytes()));
        }
        if let Some(p) = &s.pca_scatter {
            files.push(("pca_scatter.csv".into(), p.clone().into_bytes()));
        }
        for (name, csv) in &s.pseudo_csv {
            files.push((format!("pseudo_{name}.csv"), csv.clone().into_bytes()));
        }
        if let Some(g) = &s.grid {
            files.push(("grid.csv".into(), g.result.to_csv().into_bytes()));
        }
        if let Some(f) = &s.final_model {
            let text = format!(
                "hybrid (p1 = {}, p2 = {})\n\n{}\nreal only\n\n{}",
                f.p1,
                f.p2,
                f.hybrid.classification_report(),
                f.baseline.classification_report()
            );
            files.push(("classification_report.txt".into(), text.into_bytes()));
            files.push(("confusion.csv".into(), f.hybrid.confusion_csv().into_bytes()));
            files.push(("confusion_baseline.csv".into(), f.baseline.confusion_csv().into_bytes()));
        }
        let mut written = Vec::with_capacity(files.len());
        for (name, bytes) in files {
            let p = dir.join(name);
            std::fs::write(&p, bytes)?;
            written.push(p);
        }
        Ok(written)
    }
}

fn quality_csv(q: &QualitySummary) -> String {
    let mut s = String::from("source,mse,r2,evs,bleu,bleu_corpus,cosine,levenshtein_mean,mean_diff,var_diff,n_pairs\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    s.push_str(&format!(
        "vae,{},{},{},,,,,{},{},\n",
        q.vae.mse,
        opt(q.vae.r2),
        opt(q.vae.evs),
        q.vae.mean_diff,
        q.vae.var_diff
    ));
    for (name, r) in [("unet", &q.unet), ("cwgan", &q.cwgan)] {
        if let Some(r) = r {
            s.push_str(&format!(
                "{name},{},{},{},{},{},{},{},{},{},{}\n",
                r.mse,
                opt(r.r2),
                opt(r.evs),
                r.bleu,
                r.bleu_corpus,
                opt(r.cosine),
                r.levenshtein_mean,
                r.mean_diff,
                r.var_diff,
                r.n_pairs
            ));
        }
    }
    s
}

/// Runs (or resumes) the pipeline and exports reports into
/// `<out>/reports`. On a stage failure the manifest on disk records the
/// completed stages and the failure before the error is returned.
pub fn run_pipeline(config: &PipelineConfig, options: &RunOptions) -> Result<PipelineRun> {
    let mut run = PipelineRun::new(config);
    run.execute(options)?;
    run.export_reports(&run.out.join(REPORTS_DIR))?;
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hex_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn labels_survive_tensor_storage() {
        let y = vec![0, 1, 1, 0];
        assert_eq!(tensor_labels(&labels_tensor(&y)).unwrap(), y);
        assert!(tensor_labels(&Tensor::vector(vec![0.5])).is_err());
    }

    #[test]
    fn tiny_run_resumes_and_stops_early() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = PipelineConfig::tiny();
        c.paths.out = dir.path().to_path_buf();
        let first = run_pipeline(&c, &RunOptions { resume: false, until: Some("vae".into()) }).unwrap();
        assert_eq!(first.manifest.completed(), vec!["ingest", "tokenize", "embed", "vae"]);
        let second = run_pipeline(&c, &RunOptions { resume: true, until: Some("embed".into()) }).unwrap();
        assert!(second.manifest.stages.iter().all(|s| s.reused));
        assert!(run_pipeline(&c, &RunOptions { resume: false, until: Some("bogus".into()) }).is_err());
    }
}
