//! End-to-end runs from a declarative TOML configuration.
//!
//! A run loads the corpus, builds the kernels its method needs, trains and
//! evaluates SVMs, and writes `report.json`, `confusion.csv` and
//! `manifest.json` (plus `zipf.csv` when a codebook is fitted) to the output
//! directory. Expensive artifacts live in the cache directory under a key
//! hashed from the stage name, its parameters and the content hashes of
//! its inputs; each artifact has a `.sha256` sidecar, and an artifact
//! whose bytes no longer match it is recomputed.
//!
//! Every random stage gets its own seed derived from the master seed and
//! the stage name, so changing one stage never shifts another's stream.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bowe::{build_histograms, pq_kernel_cross, pq_kernel_matrix, pq_kernel_matrix_raw, read_histograms, write_histograms, BoweHistogram};
use crate::cluster::{cluster_size_report, kmeans_fit, som_fit, Codebook, Method, SomConfig, VectorSet, MAX_FIT_VECTORS};
use crate::corpus::{preprocess, split_train_test, Corpus};
use crate::embed::{doc_vectors, join_dump, read_contextual_dump, train_cbow, CbowConfig, DocTokenVectors, EmbeddingTable};
use crate::error::{Error, Result};
use crate::hisk::{compute_hisk_cross, compute_hisk_matrix, NgramRange};
use crate::kernel::{normalize_kernel, KernelMatrix};
use crate::learn::{evaluate_train_test, fuse_kernels, kfold_cv, EvalReport, SvmParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelMethod {
    #[serde(rename = "hisk")]
    Hisk,
    #[serde(rename = "bowe")]
    Bowe,
    #[serde(rename = "hisk+bowe")]
    HiskBowe,
}

impl KernelMethod {
    pub fn uses_hisk(self) -> bool {
        matches!(self, KernelMethod::Hisk | KernelMethod::HiskBowe)
    }

    pub fn uses_bowe(self) -> bool {
        matches!(self, KernelMethod::Bowe | KernelMethod::HiskBowe)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunProtocol {
    TrainTest,
    Kfold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingSource {
    /// Train CBOW vectors on the fitting documents.
    Cbow,
    /// A word2vec text file.
    Static,
    /// A JSONL dump of per-document token vectors.
    Contextual,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Single corpus, split by `train_fraction` for train/test runs.
    pub path: Option<PathBuf>,
    pub train_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HiskSpec {
    pub ngrams: NgramRange,
}

/// Optional SOM overrides; unset fields take the defaults for `k`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SomSpec {
    pub grid_rows: Option<usize>,
    pub grid_cols: Option<usize>,
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub radius_start: Option<f64>,
    pub radius_end: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoweSpec {
    pub k: usize,
    pub clusterer: Method,
    pub som: SomSpec,
    pub embedding: EmbeddingSource,
    /// word2vec text file for `static`.
    pub embeddings: Option<PathBuf>,
    /// Token-vector dump for `contextual`.
    pub dump: Option<PathBuf>,
    /// CBOW settings; the seed is replaced by the stage seed.
    pub cbow: CbowConfig,
}

impl Default for BoweSpec {
    fn default() -> Self {
        BoweSpec {
            k: 500,
            clusterer: Method::Som,
            som: SomSpec::default(),
            embedding: EmbeddingSource::Cbow,
            embeddings: None,
            dump: None,
            cbow: CbowConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub method: KernelMethod,
    pub protocol: RunProtocol,
    pub folds: usize,
    pub c: f64,
    pub normalize: bool,
    pub cache_dir: PathBuf,
    pub output_dir: PathBuf,
    pub jobs: Option<usize>,
    pub corpus: CorpusSpec,
    pub hisk: HiskSpec,
    pub bowe: BoweSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            method: KernelMethod::Hisk,
            protocol: RunProtocol::TrainTest,
            folds: 10,
            c: 1000.0,
            normalize: true,
            cache_dir: PathBuf::from(".sentikern-cache"),
            output_dir: PathBuf::from("sentikern-run"),
            jobs: None,
            corpus: CorpusSpec::default(),
            hisk: HiskSpec::default(),
            bowe: BoweSpec::default(),
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| bad(e.to_string()))
    }

    /// Parses a config file; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = RunConfig::from_toml_str(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut cfg.corpus.train, &mut cfg.corpus.test, &mut cfg.corpus.path, &mut cfg.bowe.embeddings, &mut cfg.bowe.dump]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        fix(&mut cfg.cache_dir);
        fix(&mut cfg.output_dir);
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| bad(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let exists = |p: &Path| -> Result<()> {
            if p.exists() {
                Ok(())
            } else {
                Err(bad(format!("{} does not exist", p.display())))
            }
        };
        let cs = &self.corpus;
        match (&cs.path, &cs.train, &cs.test) {
            (Some(p), None, None) => {
                exists(p)?;
                if self.protocol == RunProtocol::TrainTest {
                    let f = cs.train_fraction.ok_or_else(|| bad("corpus.path with train-test needs corpus.train_fraction"))?;
                    if !(f > 0.0 && f < 1.0) {
                        return Err(bad("corpus.train_fraction must lie in (0, 1)"));
                    }
                }
            }
            (None, Some(tr), Some(te)) => {
                exists(tr)?;
                exists(te)?;
            }
            _ => return Err(bad("give either corpus.path or both corpus.train and corpus.test")),
        }
        if self.protocol == RunProtocol::Kfold && self.folds < 2 {
            return Err(bad("folds must be >= 2"));
        }
        SvmParams::with_c(self.c).validate()?;
        if self.method.uses_bowe() {
            let b = &self.bowe;
            if b.k == 0 {
                return Err(bad("bowe.k must be >= 1"));
            }
            match b.embedding {
                EmbeddingSource::Cbow => b.cbow.validate()?,
                EmbeddingSource::Static => exists(b.embeddings.as_deref().ok_or_else(|| bad("static embedding needs bowe.embeddings"))?)?,
                EmbeddingSource::Contextual => exists(b.dump.as_deref().ok_or_else(|| bad("contextual embedding needs bowe.dump"))?)?,
            }
            if b.clusterer == Method::Som {
                self.som_config()?.validate()?;
            }
        }
        Ok(())
    }

    /// SOM settings for the clustering stage, seeded with its stage seed.
    pub fn som_config(&self) -> Result<SomConfig> {
        let s = &self.bowe.som;
        let seed = sub_seed(self.seed, "cluster");
        let mut cfg = match (s.grid_rows, s.grid_cols) {
            (Some(r), Some(c)) => SomConfig::new(r, c, seed),
            (None, None) => SomConfig::for_k(self.bowe.k, seed),
            _ => return Err(bad("bowe.som needs both grid_rows and grid_cols")),
        };
        if cfg.k != self.bowe.k {
            return Err(bad(format!("SOM grid {}x{} does not hold k = {}", cfg.grid_rows, cfg.grid_cols, self.bowe.k)));
        }
        if let Some(v) = s.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = s.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = s.radius_start {
            cfg.radius_start = v;
        }
        if let Some(v) = s.radius_end {
            cfg.radius_end = v;
        }
        Ok(cfg)
    }
}

/// Seed for one stage: the first eight bytes of SHA-256 over the master
/// seed and the stage name.
pub fn sub_seed(seed: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub path: PathBuf,
    pub content_hash: String,
    pub cache_hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub report: EvalReport,
    pub report_path: PathBuf,
    pub confusion_path: PathBuf,
    pub manifest_path: PathBuf,
    pub zipf_path: Option<PathBuf>,
    pub artifacts: Vec<StageRecord>,
}

struct Cache {
    dir: PathBuf,
    records: Vec<StageRecord>,
}

impl Cache {
    fn key(stage: &str, params: &serde_json::Value, inputs: &[&str]) -> String {
        let blob = serde_json::json!({ "stage": stage, "params": params, "inputs": inputs });
        sha_hex(blob.to_string().as_bytes())
    }

    /// Returns the cached artifact when its bytes match the sidecar hash,
    /// otherwise computes, stores and returns it, with its content hash.
    fn stage<T>(
        &mut self,
        stage: &str,
        ext: &str,
        params: serde_json::Value,
        inputs: &[&str],
        compute: impl FnOnce() -> Result<T>,
        encode: impl Fn(&T) -> Result<Vec<u8>>,
        decode: impl Fn(&[u8]) -> Result<T>,
    ) -> Result<(T, String)> {
        let key = Cache::key(stage, &params, inputs);
        let path = self.dir.join(format!("{stage}-{}.{ext}", &key[..16]));
        let sidecar = self.dir.join(format!("{stage}-{}.{ext}.sha256", &key[..16]));
        if let (Ok(bytes), Ok(expected)) = (fs::read(&path), fs::read_to_string(&sidecar)) {
            let hash = sha_hex(&bytes);
            if hash == expected.trim() {
                if let Ok(value) = decode(&bytes) {
                    self.records.push(StageRecord {
                        stage: stage.into(),
                        path,
                        content_hash: hash.clone(),
                        cache_hit: true,
                    });
                    return Ok((value, hash));
                }
            }
        }
        let value = compute().map_err(|e| e.in_stage(stage))?;
        let bytes = encode(&value).map_err(|e| e.in_stage(stage))?;
        let hash = sha_hex(&bytes);
        fs::create_dir_all(&self.dir).map_err(|e| Error::from(e).in_stage(stage))?;
        fs::write(&path, &bytes).map_err(|e| Error::from(e).in_stage(stage))?;
        fs::write(&sidecar, &hash).map_err(|e| Error::from(e).in_stage(stage))?;
        self.records.push(StageRecord {
            stage: stage.into(),
            path,
            content_hash: hash.clone(),
            cache_hit: false,
        });
        Ok((value, hash))
    }

    fn kernel(
        &mut self,
        stage: &str,
        params: serde_json::Value,
        inputs: &[&str],
        compute: impl FnOnce() -> Result<KernelMatrix>,
    ) -> Result<(KernelMatrix, String)> {
        self.stage(
            stage,
            "kmat",
            params,
            inputs,
            compute,
            |k| {
                let mut buf = Vec::new();
                k.write_to(&mut buf)?;
                Ok(buf)
            },
            |b| KernelMatrix::read_from(b),
        )
    }
}

fn corpus_hash(c: &Corpus) -> Result<String> {
    let mut buf = Vec::new();
    c.write_jsonl(&mut buf)?;
    Ok(sha_hex(&buf))
}

/// The documents a run trains on and, for train/test runs, predicts.
struct Data {
    train: Corpus,
    test: Option<Corpus>,
    classes: Vec<String>,
}

fn load_data(cfg: &RunConfig) -> Result<Data> {
    let cs = &cfg.corpus;
    let (train, test) = match (&cs.path, &cs.train, &cs.test) {
        (Some(p), _, _) => {
            let (all, _) = Corpus::load(p)?;
            match cfg.protocol {
                RunProtocol::Kfold => (all, None),
                RunProtocol::TrainTest => {
                    let f = cs.train_fraction.unwrap_or(0.8);
                    let (tr, te) = split_train_test(&all, f, sub_seed(cfg.seed, "split"))?;
                    (tr, Some(te))
                }
            }
        }
        (None, Some(tr), Some(te)) => {
            let (tr, _) = Corpus::load(tr)?;
            let (te, _) = Corpus::load(te)?;
            match cfg.protocol {
                // Cross-validation pools every labelled document.
                RunProtocol::Kfold => (Corpus::concat(&[&tr, &te])?, None),
                RunProtocol::TrainTest => (tr, Some(te)),
            }
        }
        _ => return Err(bad("incomplete corpus section: give train and test, or path")),
    };
    let mut classes: Vec<String> = train.label_set().to_vec();
    if let Some(te) = &test {
        for l in te.label_set() {
            if !classes.contains(l) {
                return Err(Error::DegenerateLabels(format!("test label {l:?} never occurs in training data")));
            }
        }
    }
    classes.sort_by(|a, b| match (a.parse::<i64>(), b.parse::<i64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.cmp(b),
    });
    Ok(Data { train, test, classes })
}

fn label_indices(c: &Corpus, classes: &[String]) -> Vec<usize> {
    c.reviews().iter().map(|r| classes.iter().position(|l| *l == r.label).expect("label validated")).collect()
}

/// Square and (for train/test) cross kernels of one method.
struct Kernels {
    square: KernelMatrix,
    cross: Option<KernelMatrix>,
}

fn hisk_kernels(cfg: &RunConfig, data: &Data, hashes: &Hashes, cache: &mut Cache) -> Result<Kernels> {
    let ngrams = cfg.hisk.ngrams.clone();
    let params = serde_json::json!({ "ngrams": ngrams.lengths(), "normalize": cfg.normalize });
    let train_docs = data.train.documents();
    let (square, _) = cache.kernel("hisk", params.clone(), &[&hashes.train], || {
        let raw = compute_hisk_matrix(data.train.ids(), &train_docs, &ngrams)?;
        if cfg.normalize {
            normalize_kernel(&raw)
        } else {
            Ok(raw)
        }
    })?;
    let cross = match (&data.test, &hashes.test) {
        (Some(test), Some(th)) => Some(
            cache
                .kernel("hisk-cross", params, &[th, &hashes.train], || {
                    let ck = compute_hisk_cross(test.ids(), &test.documents(), data.train.ids(), &train_docs, &ngrams)?;
                    if cfg.normalize {
                        ck.normalized()
                    } else {
                        Ok(ck.matrix)
                    }
                })?
                .0,
        ),
        _ => None,
    };
    Ok(Kernels { square, cross })
}

enum Vectors {
    Table(EmbeddingTable),
    Dump(Vec<DocTokenVectors>),
}

impl Vectors {
    fn for_corpus(&self, c: &Corpus) -> Result<Vec<DocTokenVectors>> {
        match self {
            Vectors::Table(t) => Ok(c.reviews().iter().map(|r| doc_vectors(&r.id, &preprocess(&r.text), t).0).collect()),
            Vectors::Dump(d) => join_dump(d, &c.ids()),
        }
    }
}

fn embedding_table_bytes(t: &EmbeddingTable) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    t.write_text(&mut buf)?;
    Ok(buf)
}

fn load_vectors(cfg: &RunConfig, data: &Data, hashes: &Hashes, cache: &mut Cache) -> Result<(Vectors, String)> {
    let b = &cfg.bowe;
    match b.embedding {
        EmbeddingSource::Cbow => {
            let cbow = CbowConfig {
                seed: sub_seed(cfg.seed, "embed"),
                ..b.cbow.clone()
            };
            let (table, hash) = cache.stage(
                "embed",
                "vec",
                serde_json::to_value(&cbow)?,
                &[&hashes.train],
                || Ok(train_cbow(&data.train, &cbow)?.0),
                embedding_table_bytes,
                |bytes| EmbeddingTable::read_text(bytes),
            )?;
            Ok((Vectors::Table(table), hash))
        }
        EmbeddingSource::Static => {
            let path = b.embeddings.as_ref().ok_or_else(|| bad("bowe.embeddings missing"))?;
            let bytes = fs::read(path).map_err(|e| Error::from(e).in_stage("embed"))?;
            let table = EmbeddingTable::read_text(&bytes[..]).map_err(|e| e.in_stage("embed"))?;
            Ok((Vectors::Table(table), sha_hex(&bytes)))
        }
        EmbeddingSource::Contextual => {
            let path = b.dump.as_ref().ok_or_else(|| bad("bowe.dump missing"))?;
            let bytes = fs::read(path).map_err(|e| Error::from(e).in_stage("embed"))?;
            let dump = read_contextual_dump(&bytes[..]).map_err(|e| e.in_stage("embed"))?;
            Ok((Vectors::Dump(dump), sha_hex(&bytes)))
        }
    }
}

fn bowe_kernels(
    cfg: &RunConfig,
    data: &Data,
    hashes: &Hashes,
    cache: &mut Cache,
    zipf_path: &Path,
) -> Result<Kernels> {
    let (vectors, emb_hash) = load_vectors(cfg, data, hashes, cache)?;
    let train_vecs = vectors.for_corpus(&data.train).map_err(|e| e.in_stage("embed"))?;
    let test_vecs = match &data.test {
        Some(t) => Some(vectors.for_corpus(t).map_err(|e| e.in_stage("embed"))?),
        None => None,
    };

    // The codebook only ever sees training documents.
    let cluster_seed = sub_seed(cfg.seed, "cluster");
    let fit_set = || -> Result<VectorSet> { Ok(VectorSet::pool(&train_vecs)?.subsample(MAX_FIT_VECTORS, cluster_seed)) };
    let method = cfg.bowe.clusterer;
    let som = if method == Method::Som { Some(cfg.som_config()?) } else { None };
    let params = serde_json::json!({ "method": method, "k": cfg.bowe.k, "seed": cluster_seed, "som": som, "cap": MAX_FIT_VECTORS });
    let (codebook, cb_hash) = cache.stage(
        "cluster",
        "codebook",
        params,
        &[&emb_hash, &hashes.train],
        || {
            let v = fit_set()?;
            match &som {
                Some(s) => som_fit(&v, s),
                None => kmeans_fit(&v, cfg.bowe.k, cluster_seed),
            }
        },
        |cb| {
            let mut buf = Vec::new();
            cb.write_to(&mut buf)?;
            Ok(buf)
        },
        |b| Codebook::read_from(b),
    )?;

    let zipf = cluster_size_report(&codebook, &fit_set().map_err(|e| e.in_stage("zipf"))?).map_err(|e| e.in_stage("zipf"))?;
    let mut csv = Vec::new();
    zipf.write_csv(&mut csv)?;
    fs::write(zipf_path, csv)?;

    let hist_stage = |cache: &mut Cache, name: &str, docs: &[DocTokenVectors], corpus_hash: &str| {
        cache.stage(
            name,
            "jsonl",
            serde_json::Value::Null,
            &[&cb_hash, &emb_hash, corpus_hash],
            || build_histograms(docs, &codebook),
            |h| {
                let mut buf = Vec::new();
                write_histograms(h, &mut buf)?;
                Ok(buf)
            },
            |b| read_histograms(b),
        )
    };
    let (train_h, train_hh): (Vec<BoweHistogram>, String) = hist_stage(cache, "bowe", &train_vecs, &hashes.train)?;
    let params = serde_json::json!({ "normalize": cfg.normalize });
    let (square, _) = cache.kernel("pq", params.clone(), &[&train_hh], || {
        if cfg.normalize {
            pq_kernel_matrix(&train_h)
        } else {
            pq_kernel_matrix_raw(&train_h)
        }
    })?;
    let cross = match (&test_vecs, &hashes.test) {
        (Some(tv), Some(th)) => {
            let (test_h, test_hh) = hist_stage(cache, "bowe-test", tv, th)?;
            let (k, _) = cache.kernel("pq-cross", params, &[&test_hh, &train_hh], || {
                let ck = pq_kernel_cross(&test_h, &train_h)?;
                if cfg.normalize {
                    ck.normalized()
                } else {
                    Ok(ck.matrix)
                }
            })?;
            Some(k)
        }
        _ => None,
    };
    Ok(Kernels { square, cross })
}

struct Hashes {
    train: String,
    test: Option<String>,
}

/// Runs every stage the configured method needs and writes the report.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let data = load_data(cfg).map_err(|e| e.in_stage("corpus"))?;
    let hashes = Hashes {
        train: corpus_hash(&data.train)?,
        test: data.test.as_ref().map(corpus_hash).transpose()?,
    };
    fs::create_dir_all(&cfg.output_dir)?;
    let mut cache = Cache {
        dir: cfg.cache_dir.clone(),
        records: Vec::new(),
    };

    let mut parts = Vec::new();
    if cfg.method.uses_hisk() {
        parts.push(hisk_kernels(cfg, &data, &hashes, &mut cache)?);
    }
    let zipf_path = cfg.output_dir.join("zipf.csv");
    if cfg.method.uses_bowe() {
        parts.push(bowe_kernels(cfg, &data, &hashes, &mut cache, &zipf_path)?);
    }
    let (square, cross) = if parts.len() == 1 {
        let k = parts.pop().expect("one kernel");
        (k.square, k.cross)
    } else {
        let squares: Vec<KernelMatrix> = parts.iter().map(|k| k.square.clone()).collect();
        let square = fuse_kernels(&squares).map_err(|e| e.in_stage("fuse"))?;
        let cross = match parts.iter().map(|k| k.cross.clone()).collect::<Option<Vec<_>>>() {
            Some(c) => Some(fuse_kernels(&c).map_err(|e| e.in_stage("fuse"))?),
            None => None,
        };
        (square, cross)
    };

    let params = SvmParams::with_c(cfg.c);
    let train_labels = label_indices(&data.train, &data.classes);
    let report = match (cfg.protocol, &data.test, &cross) {
        (RunProtocol::TrainTest, Some(test), Some(cross)) => evaluate_train_test(
            &square,
            &train_labels,
            cross,
            &label_indices(test, &data.classes),
            &data.classes,
            &params,
            cfg.seed,
        ),
        (RunProtocol::Kfold, _, _) => {
            let mut r = kfold_cv(&square, &train_labels, &data.classes, cfg.folds, sub_seed(cfg.seed, "cv"), &params)?;
            r.seed = cfg.seed;
            Ok(r)
        }
        _ => Err(bad("train-test run without a test set")),
    }
    .map_err(|e| e.in_stage("learn"))?;

    let report_path = cfg.output_dir.join("report.json");
    let mut json = serde_json::to_vec_pretty(&report)?;
    json.push(b'\n');
    fs::write(&report_path, json)?;
    let confusion_path = cfg.output_dir.join("confusion.csv");
    let mut csv = Vec::new();
    report.write_confusion_csv(&mut csv)?;
    fs::write(&confusion_path, csv)?;

    let out = RunOutput {
        report,
        report_path,
        confusion_path,
        manifest_path: cfg.output_dir.join("manifest.json"),
        zipf_path: cfg.method.uses_bowe().then_some(zipf_path),
        artifacts: cache.records,
    };
    fs::write(&out.manifest_path, serde_json::to_vec_pretty(&out)?)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Review;

    fn synthetic_corpus(n: usize) -> Corpus {
        let pos = ["excelent", "super", "recomand", "perfect"];
        let neg = ["groaznic", "defect", "dezamagit", "returnat"];
        let filler = ["produsul", "a", "ajuns", "azi", "cutia", "este", "telefon", "livrare", "pret"];
        let mut reviews = Vec::new();
        for i in 0..n {
            let positive = i % 2 == 0;
            let marks = if positive { &pos } else { &neg };
            let mut words = Vec::new();
            for j in 0..12 {
                words.push(filler[(i * 7 + j * 3) % filler.len()]);
                if j % 4 == 0 {
                    words.push(marks[(i + j) % marks.len()]);
                }
            }
            reviews.push(Review {
                id: format!("r{i}"),
                text: words.join(" "),
                stars: Some(if positive { 5 } else { 1 }),
                label: if positive { "positive" } else { "negative" }.into(),
            });
        }
        Corpus::new(reviews).unwrap()
    }

    fn config(dir: &Path, method: KernelMethod, protocol: RunProtocol) -> RunConfig {
        let corpus = synthetic_corpus(40);
        let path = dir.join("corpus.jsonl");
        corpus.save(&path).unwrap();
        let mut cfg = RunConfig {
            method,
            protocol,
            folds: 4,
            cache_dir: dir.join("cache"),
            output_dir: dir.join("out"),
            corpus: CorpusSpec {
                path: Some(path),
                train_fraction: Some(0.75),
                ..CorpusSpec::default()
            },
            ..RunConfig::default()
        };
        cfg.bowe.k = 6;
        cfg.bowe.som.epochs = Some(20);
        cfg.bowe.cbow = CbowConfig {
            dim: 8,
            min_count: 1,
            epochs: 3,
            ..CbowConfig::default()
        };
        cfg
    }

    #[test]
    fn sub_seeds_differ_by_stage_and_seed() {
        assert_eq!(sub_seed(1, "cluster"), sub_seed(1, "cluster"));
        assert_ne!(sub_seed(1, "cluster"), sub_seed(1, "embed"));
        assert_ne!(sub_seed(1, "cluster"), sub_seed(2, "cluster"));
    }

    #[test]
    fn toml_round_trip_and_defaults() {
        let cfg = RunConfig::from_toml_str(
            r#"
            method = "hisk+bowe"
            protocol = "kfold"
            [corpus]
            path = "x.jsonl"
            [bowe]
            clusterer = "kmeans"
            k = 50
            "#,
        )
        .unwrap();
        assert_eq!(cfg.method, KernelMethod::HiskBowe);
        assert_eq!(cfg.folds, 10);
        assert_eq!(cfg.c, 1000.0);
        assert_eq!(cfg.hisk.ngrams.lengths(), &[3, 4, 5]);
        assert_eq!(cfg.bowe.cbow.dim, 300);
        let again = RunConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(again, cfg);
        assert!(RunConfig::from_toml_str("methd = \"hisk\"").is_err());
    }

    #[test]
    fn validation_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(dir.path(), KernelMethod::Bowe, RunProtocol::TrainTest);
        cfg.validate().unwrap();
        cfg.bowe.embedding = EmbeddingSource::Static;
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        cfg.bowe.embedding = EmbeddingSource::Cbow;
        cfg.bowe.som.grid_rows = Some(4);
        cfg.bowe.som.grid_cols = Some(2);
        assert!(cfg.validate().is_err());
        cfg.corpus.path = Some(dir.path().join("missing.jsonl"));
        let err = run_pipeline(&cfg).unwrap_err();
        assert_eq!(err.stage(), Some("config"));
    }

    #[test]
    fn hisk_train_test_is_cached_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path(), KernelMethod::Hisk, RunProtocol::TrainTest);
        let first = run_pipeline(&cfg).unwrap();
        assert!(first.artifacts.iter().all(|a| !a.cache_hit));
        assert_eq!(first.report.accuracy, 1.0);
        let bytes = fs::read(&first.report_path).unwrap();
        let second = run_pipeline(&cfg).unwrap();
        assert!(second.artifacts.iter().all(|a| a.cache_hit));
        assert_eq!(fs::read(&second.report_path).unwrap(), bytes);

        // A tampered artifact no longer matches its sidecar and is rebuilt.
        let victim = &second.artifacts[0].path;
        let original = fs::read(victim).unwrap();
        let mut broken = original.clone();
        *broken.last_mut().unwrap() ^= 1;
        fs::write(victim, broken).unwrap();
        let third = run_pipeline(&cfg).unwrap();
        assert!(!third.artifacts[0].cache_hit);
        assert_eq!(fs::read(victim).unwrap(), original);
    }

    #[test]
    fn cache_hits_match_recomputation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path(), KernelMethod::HiskBowe, RunProtocol::Kfold);
        let first = run_pipeline(&cfg).unwrap();
        let cached: Vec<Vec<u8>> = first.artifacts.iter().map(|a| fs::read(&a.path).unwrap()).collect();
        fs::remove_dir_all(&cfg.cache_dir).unwrap();
        let again = run_pipeline(&cfg).unwrap();
        assert!(again.artifacts.iter().all(|a| !a.cache_hit));
        for (a, bytes) in again.artifacts.iter().zip(&cached) {
            assert_eq!(&fs::read(&a.path).unwrap(), bytes, "{}", a.stage);
        }
        assert_eq!(again.report, first.report);
        let stages: Vec<&str> = again.artifacts.iter().map(|a| a.stage.as_str()).collect();
        assert_eq!(stages, ["hisk", "embed", "cluster", "bowe", "pq"]);
        let csv = fs::read_to_string(again.zipf_path.unwrap()).unwrap();
        assert!(csv.starts_with("rank,size,p_r,q_r\n"));
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn stage_errors_name_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(dir.path(), KernelMethod::Bowe, RunProtocol::TrainTest);
        cfg.bowe.cbow.min_count = 10_000;
        let err = run_pipeline(&cfg).unwrap_err();
        assert_eq!(err.stage(), Some("embed"));
        assert!(matches!(err, Error::Stage { ref source, .. } if matches!(**source, Error::EmptyVocabulary)));
    }
}
