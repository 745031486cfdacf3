//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 2, 6, 7 and 9 share one end-to-end run of the synthetic
//! quickstart configuration (about 10,000 cells, 300 epochs).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nextchannel_cli::{layout, read_assignment, Pipeline};
use nextchannel_core::augment::AugmentConfig;
use nextchannel_core::config::RunConfig;
use nextchannel_core::data::{extract_all, read_jsonl, synth_generate, t_cell_variant_types, CellRecord, PatchDataset, SynthConfig};
use nextchannel_core::embed::embed_patches;
use nextchannel_core::io::csv_reader;
use nextchannel_core::model::{disentanglement_trials, load_weights, ModelConfig};
use nextchannel_core::phenotype::{adjusted_rand_index, apply_unknown_rule, subcluster, ClusterAssignment, UNKNOWN};
use nextchannel_core::rng;
use nextchannel_core::train::{lars_update, lr_at, nt_xent_loss, LarsConfig, TrainConfig};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn report(results: &mut Vec<bool>, n: usize, name: &str, t: Instant, o: Outcome) {
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    println!("criterion {n:>2} {verdict} {name}: {} [{:.1} s]", o.detail, t.elapsed().as_secs_f64());
    results.push(o.pass);
}

fn small_model(channels: usize) -> ModelConfig {
    ModelConfig {
        stage_depths: vec![2, 2],
        downsample_factors: vec![2],
        ..ModelConfig::for_channels(channels)
    }
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let s = disentanglement_trials(&small_model(8), None, &[], 32, 100, 1.0, 2024).unwrap();
    let secs = t.elapsed().as_secs_f64();
    outcome(
        s.disentangled() && secs < 60.0,
        format!(
            "{} trials, max off-group delta {}, max off-group gradient {}",
            s.trials, s.max_offgroup_delta, s.max_offgroup_gradient
        ),
    )
}

/// Exhaustive NT-Xent in f64, written out pair by pair.
fn nt_xent_oracle(rows: &[Vec<f32>], patch: &[usize], tau: f64) -> f64 {
    let unit: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let n = r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            r.iter().map(|&v| v as f64 / n).collect()
        })
        .collect();
    let sim = |a: usize, b: usize| unit[a].iter().zip(&unit[b]).map(|(x, y)| x * y).sum::<f64>() / tau;
    let (mut total, mut pairs) = (0.0, 0usize);
    for i in 0..rows.len() {
        for j in 0..rows.len() {
            if i == j || patch[i] != patch[j] {
                continue;
            }
            let mut denom = sim(i, j).exp();
            for k in 0..rows.len() {
                if patch[k] != patch[i] {
                    denom += sim(i, k).exp();
                }
            }
            total += -sim(i, j) + denom.ln();
            pairs += 1;
        }
    }
    total / pairs as f64
}

fn criterion_3() -> Outcome {
    let t = Instant::now();
    let mut r = rng::stream(3, &[]);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let b = r.random_range(1..=8usize);
        let v = r.random_range(2..=16 / b);
        let d = r.random_range(2..=8usize);
        let tau = r.random_range(0.05..1.0);
        let patch: Vec<usize> = (0..b * v).map(|i| i / v).collect();
        let rows: Vec<Vec<f32>> = (0..b * v)
            .map(|_| {
                let raw: Vec<f32> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
                let n = raw.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-3);
                raw.iter().map(|x| x / n).collect()
            })
            .collect();
        let got = nt_xent_loss(&rows, &patch, tau).unwrap();
        worst = worst.max((got - nt_xent_oracle(&rows, &patch, tau)).abs());
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(worst <= 1e-6 && secs < 60.0, format!("1000 batches, max |loss - oracle| = {worst:.2e}"))
}

fn criterion_4() -> Outcome {
    let c = TrainConfig::default();
    let lr = |e| lr_at(e, c.peak_lr, c.warmup_epochs, c.epochs);
    let sched = lr(10) == 4.6 && (lr(2505) - 2.3).abs() <= 1e-9 && lr(4999) < 1e-5 * c.peak_lr;
    // w = (3, 4), g = (0.6, 0.8): ||w|| = 5, ||g|| = 1,
    // trust = 1e-3 * 5 / (1 + 0.01 * 5) = 1/210, step = g + 0.01 w = (0.63, 0.84),
    // v' = 0.9 (0.1, -0.2) + step / 210 = (0.093, -0.176), w' = w - 2 v'
    let cfg = LarsConfig { momentum: 0.9, weight_decay: 0.01, trust_coefficient: 1e-3 };
    let mut w = vec![3.0f64, 4.0];
    let mut v = vec![0.1f64, -0.2];
    let trust = lars_update(&mut w, &[0.6, 0.8], &mut v, 2.0, &cfg, true);
    let err = [
        (trust - 1.0 / 210.0).abs(),
        (v[0] - 0.093).abs(),
        (v[1] + 0.176).abs(),
        (w[0] - 2.814).abs(),
        (w[1] - 4.352).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    outcome(
        sched && err <= 1e-9,
        format!("lr(10) {}, lr(2505) {:.12}, lr(4999) {:.3e}, LARS max error {err:.1e}", lr(10), lr(2505), lr(4999)),
    )
}

fn criterion_5() -> Outcome {
    let plan = TrainConfig::default().view_plan(10_000, AugmentConfig::default().views_per_patch());
    outcome(
        plan.views_per_batch == 3072 && plan.total_views == 15_360_000,
        format!("{} views per batch, {} views over the default run", plan.views_per_batch, plan.total_views),
    )
}

fn criterion_8() -> Outcome {
    let mut labels = vec![0i64; 49];
    labels.extend(vec![1; 50]);
    labels.extend(vec![2; 120]);
    let a = ClusterAssignment { labels: labels.clone(), k_used: 8, algorithm: "fixture".into(), seed: 0, detected: 3 };
    let out = apply_unknown_rule(&a, 50);
    let small_gone = out.labels[..49].iter().all(|&l| l == UNKNOWN);
    let boundary_kept = out.labels[49..99].iter().all(|&l| l >= 0);
    outcome(
        small_gone && boundary_kept && out.num_clusters() == 2,
        format!("49-member cluster -> unknown: {small_gone}; 50-member cluster kept: {boundary_kept}"),
    )
}

fn quickstart_config(out: &Path) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/quickstart.toml");
    let mut cfg = RunConfig::load(&path).unwrap();
    cfg.paths.out = out.to_path_buf();
    cfg
}

/// Type name -> its signature marker (largest signature entry, summed over
/// sub-types).
fn signature_markers(cfg: &RunConfig) -> BTreeMap<String, String> {
    let mut sums: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for t in &cfg.synth.types {
        let name = t.name.split(':').next().unwrap().to_owned();
        let s = sums.entry(name).or_insert_with(|| vec![0.0; t.signature.len()]);
        for (a, &b) in s.iter_mut().zip(&t.signature) {
            *a += b as f64;
        }
    }
    sums.into_iter()
        .map(|(name, s)| {
            let best = (0..s.len()).fold(0, |b, g| if s[g] > s[b] { g } else { b });
            (name, cfg.panel[best].clone())
        })
        .collect()
}

fn heatmap_suggestions(path: &Path) -> BTreeMap<i64, String> {
    let mut rdr = csv_reader(path).unwrap();
    rdr.records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].parse().unwrap(), r[2].to_owned())
        })
        .collect()
}

fn majority<'a>(labels: impl Iterator<Item = &'a str>) -> &'a str {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l).or_default() += 1;
    }
    counts.into_iter().max_by_key(|&(_, n)| n).map(|(l, _)| l).unwrap_or("")
}

/// Label map naming each cluster after the type whose signature marker is
/// the cluster's suggested marker.
fn write_label_map(path: &Path, suggestions: &BTreeMap<i64, String>, markers: &BTreeMap<String, String>) {
    let by_marker: BTreeMap<&str, &str> = markers.iter().map(|(t, m)| (m.as_str(), t.as_str())).collect();
    let mut text = String::new();
    for (id, m) in suggestions {
        text.push_str(&format!("{id}: {}\n", by_marker.get(m.as_str()).copied().unwrap_or("unknown")));
    }
    std::fs::write(path, text).unwrap();
}

struct Shared {
    pipeline: Pipeline,
    records: Vec<CellRecord>,
    train_secs: f64,
}

fn run_quickstart(dir: &Path) -> Shared {
    let t = Instant::now();
    let p = Pipeline::new(quickstart_config(&dir.join("quickstart"))).unwrap();
    p.synth().unwrap();
    p.extract().unwrap();
    p.train(false).unwrap();
    p.embed().unwrap();
    p.cluster().unwrap();
    let records = read_jsonl(&PatchDataset::records_path(&p.path(layout::PATCHES))).unwrap();
    Shared { pipeline: p, records, train_secs: t.elapsed().as_secs_f64() }
}

fn criterion_6(s: &Shared) -> Outcome {
    let p = &s.pipeline;
    let a = read_assignment(&p.path(&format!("{}/{}", layout::CLUSTER, layout::ASSIGNMENT))).unwrap();
    let truth: Vec<&str> = s.records.iter().map(|r| r.type_label().unwrap()).collect();
    let ari = adjusted_rand_index(&a.labels, &truth).unwrap();
    let markers = signature_markers(p.config());
    let suggestions = heatmap_suggestions(&p.path(&format!("{}/{}", layout::CLUSTER, layout::HEATMAP_CSV)));
    let mut mismatches = Vec::new();
    for (&id, suggested) in &suggestions {
        let ty = majority(a.members(id).into_iter().map(|i| truth[i]));
        if markers.get(ty) != Some(suggested) {
            mismatches.push(format!("cluster {id} ({ty}) -> {suggested}"));
        }
    }
    outcome(
        ari >= 0.8 && mismatches.is_empty() && !suggestions.is_empty() && s.train_secs <= 1800.0,
        format!(
            "ARI {ari:.3}, {} clusters, marker mismatches {:?}, pipeline {:.0} s",
            suggestions.len(),
            mismatches,
            s.train_secs
        ),
    )
}

fn criterion_2(s: &Shared) -> Outcome {
    let p = &s.pipeline;
    let enc = load_weights(&p.path(layout::WEIGHTS)).unwrap();
    let ds = PatchDataset::load(&p.path(layout::PATCHES), None).unwrap();
    let crop = p.config().embed_crop();
    let patches: Vec<_> = ds
        .patches
        .iter()
        .take(2000)
        .map(|x| nextchannel_core::augment::center_crop(&enc.normalizer().applied(x), crop).unwrap())
        .collect();
    let t = disentanglement_trials(enc.config(), Some(&enc), &patches, crop, 200, 1.0, 7).unwrap();
    let frac = t.entangled_fraction();
    outcome(frac >= 0.95, format!("{} of {} single-channel perturbations moved the embedding ({:.1}%)", t.entangled, t.trials, 100.0 * frac))
}

fn criterion_7(s: &Shared, dir: &Path) -> Outcome {
    let p = &s.pipeline;
    let base = p.baseline(None).unwrap();
    let ari = base["ari_vs_reference"].as_f64().unwrap_or(f64::NAN);
    let markers = signature_markers(p.config());
    let enc_map = dir.join("encoder_labels.txt");
    let base_map = dir.join("baseline_labels.txt");
    write_label_map(&enc_map, &heatmap_suggestions(&p.path(&format!("{}/{}", layout::CLUSTER, layout::HEATMAP_CSV))), &markers);
    write_label_map(&base_map, &heatmap_suggestions(&p.path(&format!("{}/{}", layout::BASELINE, layout::HEATMAP_CSV))), &markers);
    p.phenotype(Some(&enc_map)).unwrap();
    p.baseline(Some(&base_map)).unwrap();
    p.report().unwrap();
    let mut rdr = csv_reader(&p.path(&format!("{}/confusion_baseline.csv", layout::REPORT))).unwrap();
    let header = rdr.headers().unwrap().clone();
    let mut worst_sum = 0.0f64;
    let mut min_diag = f64::INFINITY;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.unwrap();
        let support: usize = rec[header.len() - 1].parse().unwrap();
        if support == 0 {
            continue;
        }
        let values: Vec<f64> = (1..header.len() - 1).map(|j| rec[j].parse().unwrap()).collect();
        worst_sum = worst_sum.max((values.iter().sum::<f64>() - 1.0).abs());
        min_diag = min_diag.min(values[i]);
    }
    outcome(
        ari >= 0.9 && worst_sum <= 1e-9 && min_diag >= 0.7,
        format!("baseline ARI {ari:.3}, max |row sum - 1| {worst_sum:.1e}, min diagonal {min_diag:.3}"),
    )
}

fn criterion_9(s: &Shared) -> Outcome {
    let p = &s.pipeline;
    let cfg = p.config();
    let panel = cfg.panel().unwrap();
    let synth = SynthConfig { types: t_cell_variant_types(), num_images: 8, seed: 1, ..cfg.synth.clone() };
    let ds = synth_generate(&synth, &panel).unwrap();
    let ex = extract_all(&ds.images, &ds.records, cfg.extract.patch_size, &panel).unwrap();
    let enc = load_weights(&p.path(layout::WEIGHTS)).unwrap();
    let out = embed_patches(&enc, &ex.dataset.patches, Some(cfg.embed_crop())).unwrap();
    let full: Vec<&str> = ex.dataset.records.iter().map(|r| r.label.as_deref().unwrap()).collect();
    // the T-cell-like parent cluster holds both variants
    let parent = ClusterAssignment {
        labels: full.iter().map(|l| if l.starts_with("T cells") { 0 } else { 1 }).collect(),
        k_used: cfg.cluster.k,
        algorithm: "fixture".into(),
        seed: 0,
        detected: 2,
    };
    let sub = subcluster(&out.embeddings, &out.contributions, panel.names(), &parent, 0, &cfg.cluster).unwrap();
    let truth: Vec<&str> = sub.members.iter().map(|&i| full[i]).collect();
    let ari = adjusted_rand_index(&sub.assignment.labels, &truth).unwrap();
    let n = sub.assignment.num_clusters();
    outcome(n == 2 && ari >= 0.9, format!("{} T-like cells -> {n} subclusters, ARI {ari:.3}", sub.members.len()))
}

const REPRO: &str = r#"
seed = 11
panel = ["CD3", "CD4", "CD8", "CD20", "GD2", "GZMB", "Vimentin", "S100B"]

[synth]
num_images = 2
image_size = 256
cells_per_image = 150

[model]
channels = 8
groups = 8
features_per_group = 4
expansion = 2
embed_dim = 32
stage_depths = [2, 2]
downsample_factors = [2]

[train]
batch_patches = 64
epochs = 5
warmup_epochs = 2
peak_lr = 0.3
projection_head = [32, 32, 16]
checkpoint_every = 0

[cluster]
min_cluster_size = 10

[report.projection]
epochs = 30
"#;

fn criterion_10(dir: &Path) -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let run = |name: &str| -> PathBuf {
        let mut cfg = RunConfig::from_toml(REPRO).unwrap();
        cfg.paths.out = dir.join(name);
        let p = Pipeline::new(cfg).unwrap();
        pool.install(|| p.run_all()).unwrap();
        dir.join(name)
    };
    let (a, b) = (run("repro_a"), run("repro_b"));
    let files = [
        layout::EMBEDDINGS,
        layout::CONTRIBUTIONS,
        "cluster/assignments.csv",
        "cluster/heatmap.csv",
        "baseline/assignments.csv",
        "baseline/heatmap.csv",
        "report/projection.csv",
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(a.join(f)).unwrap() != std::fs::read(b.join(f)).unwrap())
        .collect();
    outcome(differing.is_empty(), format!("{} artifacts compared, differing: {differing:?}", files.len()))
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let mut results = Vec::new();

    let t = Instant::now();
    report(&mut results, 1, "disentanglement", t, criterion_1());
    let t = Instant::now();
    report(&mut results, 3, "NT-Xent oracle", t, criterion_3());
    let t = Instant::now();
    report(&mut results, 4, "schedule and LARS", t, criterion_4());
    let t = Instant::now();
    report(&mut results, 5, "view arithmetic", t, criterion_5());
    let t = Instant::now();
    report(&mut results, 8, "unknown rule", t, criterion_8());
    let t = Instant::now();
    report(&mut results, 10, "reproducibility", t, criterion_10(dir.path()));

    let shared = run_quickstart(dir.path());
    let t = Instant::now();
    report(&mut results, 6, "synthetic rediscovery", t, criterion_6(&shared));
    let t = Instant::now();
    report(&mut results, 2, "entanglement after mixing", t, criterion_2(&shared));
    let t = Instant::now();
    report(&mut results, 7, "baseline parity", t, criterion_7(&shared, dir.path()));
    let t = Instant::now();
    report(&mut results, 9, "subclustering", t, criterion_9(&shared));

    let failed = results.iter().filter(|&&p| !p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
