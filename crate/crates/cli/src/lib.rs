//! Stage runners behind the `nextchannel` binary.
//!
//! Every stage reads and writes files under one output directory and tags
//! what it writes with the configuration hash of its stage, so a later stage
//! can refuse inputs produced under a different configuration.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use nextchannel_core::baseline::run_baseline;
use nextchannel_core::config::{RunConfig, Stage};
use nextchannel_core::data::{
    extract_all, load_images, mask_path, percentile_normalizer, read_centers, read_jsonl, synth_generate, CellRecord,
    MarkerPanel, MultichannelImage, PatchDataset, SegmentationMask, SynthDataset,
};
use nextchannel_core::embed::{embed_patches, EmbedOutput};
use nextchannel_core::io::{csv_reader, ensure_fresh, fmt_f64, write_json, CsvDoc};
use nextchannel_core::matrix::Matrix;
use nextchannel_core::model::{disentanglement_trials, load_weights_expecting, NextChannelEncoder};
use nextchannel_core::phenotype::{
    adjusted_rand_index, cluster, cluster_heatmap, confusion_matrix, subcluster, write_assignments, write_label_template,
    ClusterAssignment, ClusterHeatmap, ConfusionMatrix, PhenotypeMap, UNKNOWN_PHENOTYPE,
};
use nextchannel_core::report::{
    gallery_canvas, gallery_members, heatmap_canvas, project_2d, scatter_by_label, scatter_by_value, Scale,
};
use nextchannel_core::train::{TrainOutput, Trainer};
use nextchannel_core::{Error, Result};
use serde_json::{json, Value};

/// Artifact paths relative to the output directory.
pub mod layout {
    pub const SYNTH: &str = "synth";
    pub const SYNTH_STAMP: &str = "synth/run.json";
    pub const PATCHES: &str = "patches.nxch";
    pub const SKIPPED: &str = "extract_skipped.csv";
    pub const TRAIN: &str = "train";
    pub const WEIGHTS: &str = "train/weights.nxch";
    pub const EMBEDDINGS: &str = "embeddings.nxch";
    pub const CONTRIBUTIONS: &str = "contributions.nxch";
    pub const CLUSTER: &str = "cluster";
    pub const PHENOTYPE: &str = "phenotype";
    pub const BASELINE: &str = "baseline";
    pub const REPORT: &str = "report";
    pub const DISENTANGLEMENT: &str = "disentanglement.json";

    // Files inside a clustering directory.
    pub const ASSIGNMENT: &str = "assignment.json";
    pub const ASSIGNMENTS_CSV: &str = "assignments.csv";
    pub const HEATMAP_CSV: &str = "heatmap.csv";
    pub const LABEL_TEMPLATE: &str = "label_template.txt";
    pub const PHENOTYPES_CSV: &str = "phenotypes.csv";
}

/// Images, centres and (for the baseline) masks of one run.
struct Source {
    images: Vec<MultichannelImage>,
    records: Vec<CellRecord>,
    masks: Vec<Option<SegmentationMask>>,
}

pub struct Pipeline {
    cfg: RunConfig,
    out: PathBuf,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.paths.out.clone();
        Ok(Self { cfg, out })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    pub fn hash(&self, stage: Stage) -> String {
        self.cfg.stage_hash(stage)
    }

    fn panel(&self) -> Result<MarkerPanel> {
        self.cfg.panel()
    }

    fn fresh(&self, rel: &str, stage: Stage) -> Result<PathBuf> {
        let p = self.path(rel);
        ensure_fresh(&p, &self.hash(stage))?;
        Ok(p)
    }

    pub fn synth(&self) -> Result<Value> {
        if !self.cfg.uses_synth() {
            return Err(Error::config("paths.images", "is set; the synthetic generator only runs without input images"));
        }
        let ds = synth_generate(&self.cfg.synth, &self.panel()?)?;
        ds.save(&self.path(layout::SYNTH))?;
        let summary = json!({
            "run_hash": self.hash(Stage::Synth),
            "images": ds.images.len(),
            "cells": ds.records.len(),
        });
        write_json(&self.path(layout::SYNTH_STAMP), &summary)?;
        Ok(summary)
    }

    fn source(&self, with_masks: bool) -> Result<Source> {
        let panel = self.panel()?;
        if self.cfg.uses_synth() {
            self.fresh(layout::SYNTH_STAMP, Stage::Synth)?;
            let ds = SynthDataset::load(&self.path(layout::SYNTH))?;
            panel.ensure_same(&ds.panel, "synthetic dataset")?;
            return Ok(Source {
                masks: ds.masks.into_iter().map(Some).collect(),
                images: ds.images,
                records: ds.records,
            });
        }
        let paths = &self.cfg.paths;
        let images = load_images(paths.images.as_deref().expect("checked by uses_synth"), Some(&panel))?;
        let centers = paths
            .centers
            .as_deref()
            .ok_or_else(|| Error::config("paths.centers", "is required with paths.images"))?;
        let records = read_centers(centers)?;
        let masks = if with_masks {
            let dir = paths
                .masks
                .as_deref()
                .ok_or_else(|| Error::config("paths.masks", "the baseline needs segmentation masks"))?;
            images
                .iter()
                .map(|img| {
                    let p = mask_path(dir, &img.image_id);
                    if p.exists() {
                        SegmentationMask::load(&p).map(Some)
                    } else {
                        log::warn!("no mask for image {}; its cells are skipped by the baseline", img.image_id);
                        Ok(None)
                    }
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Source { images, records, masks })
    }

    pub fn extract(&self) -> Result<Value> {
        let src = self.source(false)?;
        let ext = extract_all(&src.images, &src.records, self.cfg.extract.patch_size, &self.panel()?)?;
        ext.dataset.save(&self.path(layout::PATCHES), Some(&self.hash(Stage::Extract)))?;
        let mut doc = CsvDoc::new(Some(&self.hash(Stage::Extract)), &["cell_id", "image_id", "reason"])?;
        for s in &ext.skipped {
            doc.row([s.cell_id.to_string(), s.image_id.clone(), s.reason.clone()])?;
        }
        doc.save(&self.path(layout::SKIPPED))?;
        Ok(json!({"patches": ext.dataset.len(), "skipped": ext.skipped.len()}))
    }

    fn patches(&self) -> Result<PatchDataset> {
        let p = self.fresh(layout::PATCHES, Stage::Extract)?;
        PatchDataset::load(&p, Some(&self.panel()?))
    }

    /// Records of the extracted patches, without loading the pixels.
    fn patch_records(&self) -> Result<Vec<CellRecord>> {
        let p = self.fresh(layout::PATCHES, Stage::Extract)?;
        read_jsonl(&PatchDataset::records_path(&p))
    }

    pub fn train(&self, resume: bool) -> Result<Value> {
        let ds = self.patches()?;
        let out = TrainOutput {
            dir: self.path(layout::TRAIN),
            run_hash: Some(self.hash(Stage::Train)),
        };
        let mut trainer = if resume {
            if !out.checkpoint_path().exists() {
                return Err(Error::MissingArtifact(out.checkpoint_path()));
            }
            Trainer::resume(&out, self.cfg.train.clone(), self.cfg.augment.clone())?
        } else {
            let mut encoder = NextChannelEncoder::build(&self.cfg.model, self.cfg.seed)?;
            encoder.set_normalizer(percentile_normalizer(&ds.patches, self.cfg.extract.normalizer_quantile)?)?;
            Trainer::new(encoder, self.cfg.train.clone(), self.cfg.augment.clone())?
        };
        let epochs = trainer.fit(&ds.patches, Some(&out))?;
        let state = &trainer.state;
        Ok(json!({
            "epochs_run": epochs.len(),
            "epoch": state.epoch,
            "views_seen": state.views_seen,
            "last_loss": state.last_loss,
        }))
    }

    pub fn embed(&self) -> Result<Value> {
        let weights = self.fresh(layout::WEIGHTS, Stage::Train)?;
        let encoder = load_weights_expecting(&weights, &self.cfg.model)?;
        let ds = self.patches()?;
        let out = embed_patches(&encoder, &ds.patches, Some(self.cfg.embed_crop()))?;
        out.save(
            &self.path(layout::EMBEDDINGS),
            &self.path(layout::CONTRIBUTIONS),
            ds.panel.names(),
            &self.hash(Stage::Embed),
        )?;
        Ok(json!({
            "cells": out.embeddings.rows,
            "embed_dim": out.embeddings.cols,
            "groups": out.contributions.cols,
        }))
    }

    pub fn embeddings(&self) -> Result<(EmbedOutput, Vec<String>)> {
        let e = self.fresh(layout::EMBEDDINGS, Stage::Embed)?;
        let c = self.fresh(layout::CONTRIBUTIONS, Stage::Embed)?;
        EmbedOutput::load(&e, &c)
    }

    fn cell_ids(records: &[CellRecord], rows: usize) -> Result<Vec<u64>> {
        if records.len() != rows {
            return Err(Error::Shape(format!("{} patch records for {rows} embedding rows", records.len())));
        }
        Ok(records.iter().map(|r| r.cell_id).collect())
    }

    pub fn cluster(&self) -> Result<Value> {
        let (emb, markers) = self.embeddings()?;
        let ids = Self::cell_ids(&self.patch_records()?, emb.embeddings.rows)?;
        let a = cluster(&emb.embeddings, &self.cfg.cluster)?;
        let hm = cluster_heatmap(&a, &emb.contributions, &markers)?;
        write_clustering(&self.path(layout::CLUSTER), &ids, &a, &hm, &self.hash(Stage::Cluster))?;
        Ok(clustering_summary(&a, &hm))
    }

    pub fn assignment(&self) -> Result<ClusterAssignment> {
        let p = self.fresh(&format!("{}/{}", layout::CLUSTER, layout::ASSIGNMENT), Stage::Cluster)?;
        read_assignment(&p)
    }

    pub fn subcluster(&self, id: i64) -> Result<Value> {
        let a = self.assignment()?;
        let (emb, markers) = self.embeddings()?;
        let ids = Self::cell_ids(&self.patch_records()?, emb.embeddings.rows)?;
        let s = subcluster(&emb.embeddings, &emb.contributions, &markers, &a, id, &self.cfg.cluster)?;
        let member_ids: Vec<u64> = s.members.iter().map(|&i| ids[i]).collect();
        let dir = self.path(&format!("{}/sub_{id}", layout::CLUSTER));
        write_clustering(&dir, &member_ids, &s.assignment, &s.heatmap, &self.hash(Stage::Cluster))?;
        let mut summary = clustering_summary(&s.assignment, &s.heatmap);
        summary["parent"] = json!(id);
        summary["members"] = json!(s.members.len());
        Ok(summary)
    }

    fn label_map_path(&self, given: Option<&Path>, configured: &Option<PathBuf>, field: &str, template: &str) -> Result<PathBuf> {
        given
            .map(Path::to_path_buf)
            .or_else(|| configured.clone())
            .ok_or_else(|| {
                Error::config(
                    field,
                    format!("no label map given; fill in {} and pass it with --labels", self.path(template).display()),
                )
            })
    }

    pub fn phenotype(&self, labels: Option<&Path>) -> Result<Value> {
        let template = format!("{}/{}", layout::CLUSTER, layout::LABEL_TEMPLATE);
        let map_path = self.label_map_path(labels, &self.cfg.paths.label_map, "paths.label_map", &template)?;
        let a = self.assignment()?;
        let records = self.patch_records()?;
        let ids = Self::cell_ids(&records, a.labels.len())?;
        let map = PhenotypeMap::load(&map_path, &self.cfg.report.vocabulary)?;
        map.ensure_total(&a)?;
        let names = map.assign(&a)?;
        let hash = self.hash(Stage::Cluster);
        let dir = self.path(layout::PHENOTYPE);
        write_assignments(&dir.join(layout::PHENOTYPES_CSV), &ids, &a, Some(&names), Some(&hash))?;
        let mut summary = json!({"cells": names.len(), "counts": count(&names)});
        if let Some(reference) = reference_labels(&records) {
            let cm = confusion_matrix(&reference, &names, None, &self.cfg.report.vocabulary)?;
            cm.write_csv(&dir.join("confusion_reference.csv"), Some(&hash))?;
            summary["rediscovery"] = rediscovery(&cm);
        }
        Ok(summary)
    }

    pub fn baseline(&self, labels: Option<&Path>) -> Result<Value> {
        let src = self.source(true)?;
        let res = run_baseline(&src.images, &src.masks, &src.records, &self.cfg.cluster)?;
        let kept: Vec<&CellRecord> = res.features.cells.iter().map(|&i| &src.records[i]).collect();
        let ids: Vec<u64> = kept.iter().map(|r| r.cell_id).collect();
        let hash = self.hash(Stage::Baseline);
        let dir = self.path(layout::BASELINE);
        let markers = self.panel()?.names().to_vec();
        let hm = cluster_heatmap(&res.assignment, &res.standardized, &markers)?;
        write_clustering(&dir, &ids, &res.assignment, &hm, &hash)?;
        let mut doc = CsvDoc::new(Some(&hash), &["cell_id", "reason"])?;
        for (id, why) in &res.features.dropped {
            doc.row([id.to_string(), why.clone()])?;
        }
        doc.save(&dir.join("dropped.csv"))?;
        let mut summary = clustering_summary(&res.assignment, &hm);
        let truth: Vec<Option<&str>> = kept.iter().map(|r| r.type_label()).collect();
        if truth.iter().all(Option::is_some) && !truth.is_empty() {
            summary["ari_vs_reference"] = json!(adjusted_rand_index(&truth, &res.assignment.labels)?);
        }
        let template = format!("{}/{}", layout::BASELINE, layout::LABEL_TEMPLATE);
        if let Ok(map_path) = self.label_map_path(labels, &self.cfg.paths.baseline_label_map, "paths.baseline_label_map", &template) {
            let map = PhenotypeMap::load(&map_path, &self.cfg.report.vocabulary)?;
            map.ensure_total(&res.assignment)?;
            let names = map.assign(&res.assignment)?;
            write_assignments(&dir.join(layout::PHENOTYPES_CSV), &ids, &res.assignment, Some(&names), Some(&hash))?;
            summary["counts"] = count(&names);
        }
        Ok(summary)
    }

    pub fn report(&self) -> Result<Value> {
        let a = self.assignment()?;
        let (emb, markers) = self.embeddings()?;
        let ds = self.patches()?;
        let ids = Self::cell_ids(&ds.records, a.labels.len())?;
        let hash = self.hash(Stage::Report);
        let dir = self.path(layout::REPORT);
        let rc = &self.cfg.report;
        let mut written = Vec::new();
        let mut note = |name: &str| {
            written.push(name.to_owned());
            dir.join(name)
        };

        let proj = project_2d(&emb.embeddings, &rc.projection, self.cfg.seed)?;
        let mut doc = CsvDoc::new(Some(&hash), &["cell_id", "cluster", "x", "y"])?;
        for (&i, c) in proj.indices.iter().zip(&proj.coords) {
            doc.row([ids[i].to_string(), a.labels[i].to_string(), fmt_f64(c[0] as f64), fmt_f64(c[1] as f64)])?;
        }
        doc.save(&note("projection.csv"))?;
        let labels: Vec<i64> = proj.indices.iter().map(|&i| a.labels[i]).collect();
        scatter_by_label(&proj.coords, &labels, 512)?.save(&note("projection_clusters.png"), Some(&hash))?;
        let contrib = emb.contributions.select_rows(&proj.indices);
        scatter_by_value(&proj.coords, &contrib, 192)?.save(&note("projection_contributions.png"), Some(&hash))?;

        let hm = cluster_heatmap(&a, &emb.contributions, &markers)?;
        hm.write_csv(&note("heatmap.csv"), Some(&hash))?;
        if !hm.is_empty() {
            heatmap_canvas(&hm.values, Scale::Column, 16).save(&note("heatmap.png"), Some(&hash))?;
        }

        let members = gallery_members(&emb.embeddings, &a, rc.gallery_size)?;
        let channels: Vec<usize> = if rc.gallery_markers.is_empty() {
            (0..markers.len().min(6)).collect()
        } else {
            let panel = self.panel()?;
            rc.gallery_markers.iter().filter_map(|m| panel.index_of(m)).collect()
        };
        let mut doc = CsvDoc::new(Some(&hash), &["cluster", "rank", "cell_id"])?;
        for (c, row) in members.iter().enumerate() {
            for (rank, &i) in row.iter().enumerate() {
                doc.row([c.to_string(), rank.to_string(), ids[i].to_string()])?;
            }
        }
        doc.save(&note("gallery.csv"))?;
        if !members.is_empty() {
            let refs: Vec<_> = ds.patches.iter().collect();
            gallery_canvas(&refs, &members, &channels, rc.gallery_zoom)?.save(&note("gallery.png"), Some(&hash))?;
        }

        let encoder_pheno = self.path(&format!("{}/{}", layout::PHENOTYPE, layout::PHENOTYPES_CSV));
        let baseline_pheno = self.path(&format!("{}/{}", layout::BASELINE, layout::PHENOTYPES_CSV));
        let mut summary = json!({});
        if encoder_pheno.exists() {
            ensure_fresh(&encoder_pheno, &self.hash(Stage::Cluster))?;
            let enc = read_phenotypes(&encoder_pheno)?;
            if let Some(reference) = reference_labels(&ds.records) {
                let predicted: Vec<&str> = ids.iter().map(|id| enc.get(id).map_or(UNKNOWN_PHENOTYPE, String::as_str)).collect();
                let cm = confusion_matrix(&reference, &predicted, None, &rc.vocabulary)?;
                write_confusion(&cm, &note("confusion_reference.csv"), &note("confusion_reference.png"), &hash)?;
                summary["rediscovery_vs_reference"] = rediscovery(&cm);
            }
            if baseline_pheno.exists() {
                ensure_fresh(&baseline_pheno, &self.hash(Stage::Baseline))?;
                let base = read_phenotypes(&baseline_pheno)?;
                let (reference, predicted): (Vec<&str>, Vec<&str>) = base
                    .iter()
                    .filter_map(|(id, b)| enc.get(id).map(|e| (b.as_str(), e.as_str())))
                    .unzip();
                let cm = confusion_matrix(&reference, &predicted, None, &rc.vocabulary)?;
                write_confusion(&cm, &note("confusion_baseline.csv"), &note("confusion_baseline.png"), &hash)?;
                summary["rediscovery_vs_baseline"] = rediscovery(&cm);
            }
        }
        summary["written"] = json!(written);
        Ok(summary)
    }

    /// Random single-channel perturbations through the trained encoder, or
    /// through freshly initialized ones with `untrained`.
    pub fn check_disentanglement(&self, trials: usize, magnitude: f32, untrained: bool) -> Result<Value> {
        let encoder = if untrained {
            None
        } else {
            let weights = self.fresh(layout::WEIGHTS, Stage::Train)?;
            Some(load_weights_expecting(&weights, &self.cfg.model)?)
        };
        let patches = if self.path(layout::PATCHES).exists() {
            self.patches()?.patches
        } else {
            Vec::new()
        };
        let s = disentanglement_trials(
            &self.cfg.model,
            encoder.as_ref(),
            &patches,
            self.cfg.extract.patch_size,
            trials,
            magnitude,
            self.cfg.seed,
        )?;
        let summary = json!({
            "run_hash": encoder.is_some().then(|| self.hash(Stage::Train)),
            "trials": s.trials,
            "trained": encoder.is_some(),
            "max_offgroup_delta": s.max_offgroup_delta,
            "max_offgroup_gradient": s.max_offgroup_gradient,
            "entangled_fraction": s.entangled_fraction(),
            "reports": s.reports,
        });
        write_json(&self.path(layout::DISENTANGLEMENT), &summary)?;
        if !s.disentangled() {
            return Err(Error::Contract(format!(
                "perturbing one channel moved features of other groups (max delta {}, max gradient {})",
                s.max_offgroup_delta, s.max_offgroup_gradient
            )));
        }
        let mut short = summary;
        short.as_object_mut().expect("object").remove("reports");
        Ok(short)
    }

    /// Every stage in order; phenotyping only when label maps are configured.
    pub fn run_all(&self) -> Result<Value> {
        let mut summary = serde_json::Map::new();
        if self.cfg.uses_synth() {
            summary.insert("synth".into(), self.synth()?);
        }
        summary.insert("extract".into(), self.extract()?);
        summary.insert("train".into(), self.train(false)?);
        summary.insert("embed".into(), self.embed()?);
        summary.insert("cluster".into(), self.cluster()?);
        if self.cfg.paths.label_map.is_some() {
            summary.insert("phenotype".into(), self.phenotype(None)?);
        }
        summary.insert("baseline".into(), self.baseline(None)?);
        summary.insert("report".into(), self.report()?);
        Ok(Value::Object(summary))
    }
}

fn write_clustering(dir: &Path, ids: &[u64], a: &ClusterAssignment, hm: &ClusterHeatmap, hash: &str) -> Result<()> {
    write_json(&dir.join(layout::ASSIGNMENT), &json!({"run_hash": hash, "assignment": a}))?;
    write_assignments(&dir.join(layout::ASSIGNMENTS_CSV), ids, a, None, Some(hash))?;
    hm.write_csv(&dir.join(layout::HEATMAP_CSV), Some(hash))?;
    write_label_template(&dir.join(layout::LABEL_TEMPLATE), hm)
}

pub fn read_assignment(path: &Path) -> Result<ClusterAssignment> {
    let v: Value = serde_json::from_slice(&std::fs::read(path)?)?;
    serde_json::from_value(v["assignment"].clone())
        .map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))
}

fn clustering_summary(a: &ClusterAssignment, hm: &ClusterHeatmap) -> Value {
    json!({
        "clusters": a.num_clusters(),
        "detected": a.detected,
        "unknown": a.unknown_count(),
        "sizes": a.sizes(),
        "suggested_markers": hm.suggested_markers(),
    })
}

/// Type-level reference labels, when every record has one.
fn reference_labels(records: &[CellRecord]) -> Option<Vec<&str>> {
    let labels: Option<Vec<&str>> = records.iter().map(CellRecord::type_label).collect();
    labels.filter(|l| !l.is_empty())
}

fn count(names: &[&str]) -> Value {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for n in names {
        *counts.entry(n).or_default() += 1;
    }
    json!(counts)
}

fn rediscovery(cm: &ConfusionMatrix) -> Value {
    let rows: BTreeMap<&str, f64> = cm
        .classes
        .iter()
        .zip(cm.diagonal())
        .filter(|(c, _)| !cm.zero_rows.contains(c))
        .map(|(c, d)| (c.as_str(), d))
        .collect();
    json!(rows)
}

/// `cell_id -> phenotype` from a phenotypes CSV.
pub fn read_phenotypes(path: &Path) -> Result<HashMap<u64, String>> {
    let mut rdr = csv_reader(path)?;
    let mut out = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let (Some(id), Some(p)) = (rec.get(0), rec.get(2)) else {
            return Err(Error::Corrupt(format!("short row in {}", path.display())));
        };
        let id: u64 = id
            .parse()
            .map_err(|_| Error::Corrupt(format!("bad cell id `{id}` in {}", path.display())))?;
        out.insert(id, p.to_owned());
    }
    Ok(out)
}

fn write_confusion(cm: &ConfusionMatrix, csv: &Path, png: &Path, hash: &str) -> Result<()> {
    cm.write_csv(csv, Some(hash))?;
    let rows: Vec<Vec<f32>> = cm.fractions.iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect();
    if !rows.is_empty() {
        heatmap_canvas(&Matrix::from_rows(&rows)?, Scale::Unit, 24).save(png, Some(hash))?;
    }
    Ok(())
}
