use std::path::PathBuf;
use std::time::Instant;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::stages::{
    export_splits, generate_data, mitigate, run_detection, train_model, Exports, MetricsReport, MitigationResult,
};
use crate::concepts::{
    describe_clusters, http_providers_from_env, ConceptsReport, ProviderKind, StubCaptioner, StubRefiner,
};
use crate::detection::{ClusterReport, Detection, PrototypeBank};
use crate::error::{Error, Result};
use crate::store::{read_json, write_json, RunRecord, Store};
use crate::synth::SynthDataset;
use crate::vit::{load_checkpoint, save_checkpoint, ActivationSet, TrainReport, ViTModel};

pub const DATASET: &str = "dataset";
pub const MODEL: &str = "model";
pub const TRAIN_REPORT: &str = "train_report.json";
pub const VAL_ACTIVATIONS: &str = "activations-val";
pub const TEST_ACTIVATIONS: &str = "activations-test";
pub const CLUSTERS: &str = "clusters";
pub const PROTOTYPES: &str = "prototypes";
pub const CONCEPTS: &str = "concepts";
pub const SELECTION_FILE: &str = "selection.json";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionSource {
    Expert,
    Auto,
}

/// The cluster mitigation acts on, and who chose it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub cluster: usize,
    pub source: SelectionSource,
    /// What the unsupervised score picked, kept for comparison.
    pub auto_cluster: usize,
    pub scores: Vec<f64>,
    pub tie: bool,
}

/// A request to select a cluster: an explicit choice or the score's pick.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectRequest {
    Expert(usize),
    Auto,
}

/// One prototypical patch ready for display.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeView {
    pub image_id: u64,
    pub position: usize,
    pub score: f64,
    /// Upscaled patch crop, PNG, base64.
    pub png_base64: String,
}

pub fn mitigation_kind(cluster: usize) -> String {
    format!("mitigation/cluster-{cluster}")
}

/// Store-backed pipeline for one run. Each stage checks its
/// prerequisites, returns the cached artifact when its flag is set and
/// otherwise computes, persists, flags and times itself.
pub struct Runner {
    store: Store,
    record: RunRecord,
    config: PipelineConfig,
    data: Option<SynthDataset>,
    model: Option<ViTModel>,
    exports: Option<Exports>,
    detection: Option<Detection>,
}

impl Runner {
    /// Starts a new run. Component seeds are resolved before the config
    /// snapshot is written, so the run is reproducible from `run.json`.
    pub fn create(store: Store, config: &PipelineConfig) -> Result<Self> {
        let config = config.resolved();
        config.validate()?;
        let record = store.create_run(serde_json::to_value(&config)?)?;
        log::info!("created run {}", record.run_id);
        Ok(Self::with(store, record, config))
    }

    pub fn open(store: Store, run_id: &str) -> Result<Self> {
        let record = store.load_run(run_id)?;
        let config: PipelineConfig =
            serde_json::from_value(record.config.clone()).map_err(|e| Error::Config(format!("run config: {e}")))?;
        Ok(Self::with(store, record, config))
    }

    fn with(store: Store, record: RunRecord, config: PipelineConfig) -> Self {
        Self {
            store,
            record,
            config,
            data: None,
            model: None,
            exports: None,
            detection: None,
        }
    }

    pub fn run_id(&self) -> &str {
        &self.record.run_id
    }

    pub fn record(&self) -> &RunRecord {
        &self.record
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn run_dir(&self) -> PathBuf {
        self.store.run_dir(&self.record.run_id)
    }

    fn require(&self, done: bool, stage: &str) -> Result<()> {
        if done {
            Ok(())
        } else {
            Err(Error::StageIncomplete(stage.to_string()))
        }
    }

    fn finish_stage(&mut self, stage: &str, started: Instant, artifacts: &[&str]) -> Result<()> {
        self.record
            .timings
            .insert(stage.to_string(), started.elapsed().as_secs_f64());
        for a in artifacts {
            self.record.artifacts.insert(a.to_string(), a.to_string());
        }
        self.record.touch();
        self.store.save_run(&self.record)
    }

    pub fn generate(&mut self) -> Result<&SynthDataset> {
        if self.data.is_none() {
            let data = if self.record.flags.generated {
                self.store.read_artifact(self.run_id(), DATASET)?
            } else {
                let t = Instant::now();
                let data = generate_data(&self.config)?;
                self.store.write_artifact(&self.record.run_id, DATASET, &data)?;
                self.record.flags.generated = true;
                self.finish_stage("generate-data", t, &[DATASET])?;
                data
            };
            self.data = Some(data);
        }
        Ok(self.data.as_ref().expect("loaded above"))
    }

    fn loaded_data(&mut self) -> Result<&SynthDataset> {
        self.require(self.record.flags.generated, "generate-data")?;
        self.generate()
    }

    pub fn train(&mut self) -> Result<&ViTModel> {
        if self.model.is_none() {
            let dir = self.store.artifact_dir(self.run_id(), MODEL);
            let model = if self.record.flags.trained {
                load_checkpoint(&dir)?
            } else {
                self.loaded_data()?;
                let t = Instant::now();
                let data = self.data.as_ref().expect("loaded above");
                let (model, report) = train_model(&self.config, data)?;
                save_checkpoint(&model, &dir)?;
                write_json(&self.run_dir().join(TRAIN_REPORT), &report)?;
                self.record.flags.trained = true;
                self.finish_stage("train", t, &[MODEL, TRAIN_REPORT])?;
                model
            };
            self.model = Some(model);
        }
        Ok(self.model.as_ref().expect("loaded above"))
    }

    pub fn train_report(&self) -> Result<TrainReport> {
        self.require(self.record.flags.trained, "train")?;
        read_json(&self.run_dir().join(TRAIN_REPORT))
    }

    fn loaded_model(&mut self) -> Result<&ViTModel> {
        self.require(self.record.flags.trained, "train")?;
        self.train()
    }

    pub fn export(&mut self) -> Result<&Exports> {
        if self.exports.is_none() {
            let exports = if self.record.flags.exported {
                Exports {
                    val: self.store.read_artifact(self.run_id(), VAL_ACTIVATIONS)?,
                    test: self.store.read_artifact(self.run_id(), TEST_ACTIVATIONS)?,
                }
            } else {
                self.loaded_data()?;
                self.loaded_model()?;
                let t = Instant::now();
                let exports = export_splits(
                    self.model.as_ref().expect("loaded"),
                    self.data.as_ref().expect("loaded"),
                )?;
                self.store
                    .write_artifact::<ActivationSet>(self.run_id(), VAL_ACTIVATIONS, &exports.val)?;
                self.store
                    .write_artifact::<ActivationSet>(self.run_id(), TEST_ACTIVATIONS, &exports.test)?;
                self.record.flags.exported = true;
                self.finish_stage("export", t, &[VAL_ACTIVATIONS, TEST_ACTIVATIONS])?;
                exports
            };
            self.exports = Some(exports);
        }
        Ok(self.exports.as_ref().expect("loaded above"))
    }

    fn loaded_exports(&mut self) -> Result<&Exports> {
        self.require(self.record.flags.exported, "export")?;
        self.export()
    }

    /// Clustering, representatives and prototype scoring on the validation split.
    pub fn detect(&mut self) -> Result<&Detection> {
        if self.detection.is_none() {
            let detection = if self.record.flags.prototyped {
                Detection {
                    report: self.store.read_artifact(self.run_id(), CLUSTERS)?,
                    prototypes: self.store.read_artifact(self.run_id(), PROTOTYPES)?,
                }
            } else {
                self.loaded_data()?;
                self.loaded_exports()?;
                let t = Instant::now();
                let data = self.data.as_ref().expect("loaded");
                let val = &self.exports.as_ref().expect("loaded").val;
                let detection = run_detection(&self.config, data, val)?;
                self.store
                    .write_artifact::<ClusterReport>(self.run_id(), CLUSTERS, &detection.report)?;
                self.record.flags.clustered = true;
                self.store
                    .write_artifact::<PrototypeBank>(self.run_id(), PROTOTYPES, &detection.prototypes)?;
                self.record.flags.prototyped = true;
                self.finish_stage("detect", t, &[CLUSTERS, PROTOTYPES])?;
                detection
            };
            self.detection = Some(detection);
        }
        Ok(self.detection.as_ref().expect("loaded above"))
    }

    fn loaded_detection(&mut self) -> Result<&Detection> {
        self.require(self.record.flags.prototyped, "detect")?;
        self.detect()
    }

    pub fn cluster_report(&mut self) -> Result<ClusterReport> {
        Ok(self.loaded_detection()?.report.clone())
    }

    /// Top prototypes of one cluster as upscaled PNG crops.
    pub fn prototype_views(&mut self, cluster: usize, limit: usize) -> Result<Vec<PrototypeView>> {
        self.loaded_detection()?;
        self.loaded_data()?;
        let bank = &self.detection.as_ref().expect("loaded").prototypes;
        if cluster >= bank.clusters.len() {
            return Err(Error::NotFound(format!("cluster {cluster}")));
        }
        let data = self.data.as_ref().expect("loaded");
        let (patch, upscale) = (self.config.data.patch_size, self.config.concepts.upscale);
        bank.top(cluster)
            .iter()
            .take(limit)
            .map(|p| {
                let image = &data
                    .val
                    .get(p.patch.image_id as usize)
                    .ok_or_else(|| Error::NotFound(format!("image {}", p.patch.image_id)))?
                    .image;
                let png = image.crop_patch(patch, p.patch.position).upscale(upscale).to_png()?;
                Ok(PrototypeView {
                    image_id: p.patch.image_id,
                    position: p.patch.position,
                    score: p.score,
                    png_base64: base64::engine::general_purpose::STANDARD.encode(png),
                })
            })
            .collect()
    }

    /// Captions and concept sentences per cluster. Fails with a provider
    /// error only when no cluster received a concept.
    pub fn concepts(&mut self) -> Result<ConceptsReport> {
        if self.record.flags.concepts {
            return self.store.read_artifact(self.run_id(), CONCEPTS);
        }
        self.loaded_detection()?;
        self.loaded_data()?;
        let t = Instant::now();
        let cfg = &self.config.concepts;
        let bank = &self.detection.as_ref().expect("loaded").prototypes;
        let data = self.data.as_ref().expect("loaded");
        let lookup = |id: u64| data.val.get(id as usize).map(|s| &s.image);
        let patch = self.config.data.patch_size;
        let report = match cfg.provider {
            ProviderKind::Stub => describe_clusters(bank, lookup, patch, &StubCaptioner, &StubRefiner, cfg)?,
            ProviderKind::Http => {
                let (captioner, refiner) = http_providers_from_env(cfg)?;
                describe_clusters(bank, lookup, patch, &captioner, &refiner, cfg)?
            }
        };
        if report.failed {
            let reason = report
                .clusters
                .iter()
                .find_map(|c| c.error.clone())
                .unwrap_or_else(|| "no concept produced".into());
            return Err(Error::Provider(reason));
        }
        self.store.write_artifact(self.run_id(), CONCEPTS, &report)?;
        self.record.flags.concepts = true;
        self.record.flags.concepts_partial = report.partial;
        self.finish_stage("concepts", t, &[CONCEPTS])?;
        Ok(report)
    }

    pub fn selection(&self) -> Result<SelectionRecord> {
        self.require(self.record.flags.selected, "select")?;
        read_json(&self.run_dir().join(SELECTION_FILE))
    }

    /// Records the cluster to mitigate. An automatic request never
    /// replaces an expert decision; changing the cluster clears the
    /// mitigated flag, though earlier mitigations stay cached.
    pub fn select(&mut self, request: SelectRequest) -> Result<SelectionRecord> {
        let t = Instant::now();
        let selection = self.loaded_detection()?.report.selection.clone();
        let k = selection.scores.len();
        let previous = if self.record.flags.selected {
            Some(self.selection()?)
        } else {
            None
        };
        let (cluster, source) = match request {
            SelectRequest::Expert(c) if c >= k => {
                return Err(Error::invalid(format!("cluster {c} does not exist (K = {k})")));
            }
            SelectRequest::Expert(c) => (c, SelectionSource::Expert),
            SelectRequest::Auto => match &previous {
                Some(p) if p.source == SelectionSource::Expert => {
                    return Err(Error::InvalidState(format!(
                        "cluster {} was chosen by an expert; select it explicitly to change it",
                        p.cluster
                    )));
                }
                Some(p) => return Ok(p.clone()),
                None => (selection.cluster, SelectionSource::Auto),
            },
        };
        let record = SelectionRecord {
            cluster,
            source,
            auto_cluster: selection.cluster,
            scores: selection.scores,
            tie: selection.tie,
        };
        if previous.as_ref() == Some(&record) {
            return Ok(record);
        }
        if previous.as_ref().is_some_and(|p| p.cluster != cluster) {
            self.record.flags.mitigated = false;
            self.record.artifacts.remove(METRICS_FILE);
        }
        write_json(&self.run_dir().join(SELECTION_FILE), &record)?;
        self.record.flags.selected = true;
        self.finish_stage("select", t, &[SELECTION_FILE])?;
        Ok(record)
    }

    /// Mitigates the selected cluster, reusing a cached result for the
    /// same cluster, and publishes its metrics as the run's metrics.
    pub fn mitigate(&mut self) -> Result<MitigationResult> {
        self.require(self.record.flags.prototyped, "detect")?;
        let cluster = self.selection()?.cluster;
        let kind = mitigation_kind(cluster);
        let t = Instant::now();
        let result = if self.store.has_artifact(self.run_id(), &kind) {
            self.store.read_artifact(self.run_id(), &kind)?
        } else {
            self.loaded_data()?;
            self.loaded_model()?;
            self.loaded_exports()?;
            self.loaded_detection()?;
            let result = mitigate(
                &self.config,
                self.model.as_ref().expect("loaded"),
                self.data.as_ref().expect("loaded"),
                self.exports.as_ref().expect("loaded"),
                self.detection.as_ref().expect("loaded"),
                cluster,
            )?;
            self.store.write_artifact(self.run_id(), &kind, &result)?;
            result
        };
        if !self.record.flags.mitigated {
            write_json(&self.run_dir().join(METRICS_FILE), &result.metrics)?;
            self.record.flags.mitigated = true;
            self.finish_stage("mitigate", t, &[&kind, METRICS_FILE])?;
        }
        Ok(result)
    }

    pub fn metrics(&self) -> Result<MetricsReport> {
        self.require(self.record.flags.mitigated, "mitigate")?;
        read_json(&self.run_dir().join(METRICS_FILE))
    }

    /// Every stage in order. Concepts run unless `skip_concepts`; an
    /// existing selection, expert or automatic, is kept.
    pub fn run_all(&mut self, skip_concepts: bool) -> Result<MetricsReport> {
        self.generate()?;
        self.train()?;
        self.export()?;
        self.detect()?;
        if !skip_concepts {
            // Concepts are advisory; a dead provider must not block mitigation.
            match self.concepts() {
                Err(Error::Provider(e)) => log::warn!("concepts skipped: {e}"),
                other => {
                    other?;
                }
            }
        }
        if !self.record.flags.selected {
            self.select(SelectRequest::Auto)?;
        }
        self.mitigate()?;
        self.metrics()
    }

    /// Seconds spent in recorded stages.
    pub fn total_runtime(&self) -> f64 {
        self.record.timings.values().sum()
    }
}

/// Plain-text comparison of the evaluated methods.
pub fn metrics_table(metrics: &MetricsReport, runtime_secs: f64) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.1}"));
    let mut out = format!("{:<28} {:>6} {:>6} {:>6} {:>6}\n", "method", "WGA", "AGA", "SP%", "NS%");
    let rows = [
        ("baseline", &metrics.baseline),
        ("asm w/o retraining", &metrics.asm_without_retraining),
        ("asm", &metrics.asm),
        ("group-balanced retraining", &metrics.group_balanced_retraining),
    ];
    for (name, m) in rows {
        out.push_str(&format!(
            "{:<28} {:>6} {:>6} {:>6} {:>6}\n",
            name,
            fmt(Some(m.wga)),
            fmt(Some(m.aga)),
            fmt(m.sp_rate),
            fmt(m.ns_rate)
        ));
    }
    out.push_str(&format!("cluster {}  runtime {runtime_secs:.1} s\n", metrics.cluster));
    out
}
