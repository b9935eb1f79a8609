mod support;

use std::collections::BTreeSet;
use std::path::PathBuf;

use e2gan_core::dataio::{
    load_checkpoint, load_concept_dataset, split_indices, text_embedding, write_concept_dataset, ConceptRecord,
    LoadOptions, PairedImage,
};
use e2gan_core::lora::{lora_b_name, lora_param_count, sampling_depth, RankSpec, SEARCHED_SAMPLING_RANKS};
use e2gan_core::metrics::fid_score;
use e2gan_core::model::{generator_layout, Generator, GeneratorConfig};
use e2gan_core::selection::{Embedder, ToyPixels};
use e2gan_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use support::{assert_same_tree, read_json, sha256, Workspace, MICRO_TOML};

fn micro_workspace() -> Workspace {
    let ws = Workspace::new();
    ws.write("run.toml", MICRO_TOML);
    ws
}

fn stderr(out: &std::process::Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

// ---------------------------------------------------------------------------------------
// exit codes

#[test]
fn help_and_version_succeed() {
    let ws = Workspace::new();
    for args in [&["--help"][..], &["--version"], &["finetune", "--help"]] {
        assert_eq!(ws.run(args).status.code(), Some(0), "{args:?}");
    }
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    let ws = micro_workspace();
    ws.write("typo.toml", "sed = 1\n");
    ws.write("nested.toml", "seed = 1\n[train]\nseed = 2\n");
    let cases: Vec<Vec<&str>> = vec![
        vec!["no-such-command"],
        vec!["build-base"],
        vec!["account", "--dataset-size", "many"],
        vec!["finetune", "--base", "b", "--concept", "c", "--out", "o"],
        vec!["finetune", "--base", "b", "--rank-spec", "s", "--full", "--concept", "c", "--out", "o"],
        vec!["--config", "typo.toml", "account"],
        vec!["--config", "nested.toml", "account"],
        vec!["--config", "absent.toml", "account"],
        vec!["--config", "run.toml", "search-rank", "--out", "s"],
        vec!["--config", "run.toml", "select-data", "--k", "3"],
    ];
    for args in cases {
        let out = ws.run(&args);
        assert_eq!(out.status.code(), Some(1), "{args:?}: {}", stderr(&out));
        assert!(!stderr(&out).trim().is_empty(), "{args:?} printed no message");
    }
}

#[test]
fn unknown_config_key_is_named_in_the_message() {
    let ws = Workspace::new();
    ws.write("typo.toml", "[train]\nepoch = 3\n");
    let out = ws.run(&["--config", "typo.toml", "account"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("epoch"), "{}", stderr(&out));
}

// ---------------------------------------------------------------------------------------
// synth-data

#[test]
fn synth_data_is_deterministic_and_loadable() {
    let ws = micro_workspace();
    let a = ws.synth("posterize", 6, 16, 4, "a");
    ws.synth("posterize", 6, 16, 4, "b");
    assert_same_tree(&ws.path("a"), &ws.path("b"));
    let rec = load_concept_dataset(&a, LoadOptions { resolution: 16, text_dim: 128 }).unwrap();
    assert_eq!(rec.pairs.len(), 6);
    assert_eq!(rec.name, "posterize");
    let bad = ws.run(&["synth-data", "--task", "sharpen", "--out", "x"]);
    assert_eq!(bad.status.code(), Some(1));
}

// ---------------------------------------------------------------------------------------
// build-base

#[test]
fn build_base_writes_checkpoint_log_and_reruns_identically() {
    let ws = micro_workspace();
    let inv = ws.synth("invert", 8, 16, 1, "d/invert");
    let blur = ws.synth("blur", 8, 16, 2, "d/blur");
    let concepts = format!("{},{}", inv.display(), blur.display());
    for out in ["base1", "base2"] {
        ws.ok(&["--config", "run.toml", "build-base", "--concepts", &concepts, "--out", out]);
    }
    let ckpt = ws.path("base1/base.e2g");
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(ws.path("base1/metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2, "one line per epoch");
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["g_l1"].as_f64().unwrap().is_finite());
        assert!(v["d_loss"].as_f64().is_some());
        assert!(v.get("seconds").is_none());
    }
    assert_eq!(std::fs::read_to_string(ws.path("base1/losses.csv")).unwrap().lines().count(), 3);
    for plot in ["loss_g_l1.png", "loss_g_total.png", "loss_d.png"] {
        assert!(ws.path("base1").join(plot).exists(), "{plot}");
    }
    let summary = read_json(&ws.path("base1/summary.json"));
    assert_eq!(summary["sha256"], sha256(&ckpt));
    let resolved = std::fs::read_to_string(ws.path("base1/resolved_config.toml")).unwrap();
    assert!(resolved.contains("seed = 7"));
    assert_same_tree(&ws.path("base1"), &ws.path("base2"));
}

#[test]
fn build_base_reads_concepts_from_the_config() {
    let ws = micro_workspace();
    ws.synth("invert", 6, 16, 1, "d/invert");
    ws.write("cfg/run.toml", &format!("{MICRO_TOML}\n[data]\nconcepts = [\"../d/invert/manifest.json\"]\n"));
    ws.ok(&["--config", "cfg/run.toml", "build-base", "--out", "base"]);
    assert!(ws.path("base/base.e2g").exists());
}

#[test]
fn missing_dataset_path_is_named_in_the_error() {
    let ws = micro_workspace();
    let out = ws.run(&["--config", "run.toml", "build-base", "--concepts", "nowhere/manifest.json", "--out", "base"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("nowhere/manifest.json"), "{}", stderr(&out));
    assert!(!ws.path("base/base.e2g").exists());
}

// ---------------------------------------------------------------------------------------
// select-data

#[test]
fn coreset_of_every_training_pair_is_the_whole_training_split() {
    let ws = micro_workspace();
    let hue = ws.synth("hue_shift", 12, 16, 3, "d/hue");
    let n = split_indices(12, 3).train.len();
    let k = n.to_string();
    for m in ["sel1/core.json", "sel2/core.json"] {
        ws.ok(&["--config", "run.toml", "select-data", "--concept", hue.to_str().unwrap(), "--k", &k, "--out-manifest", m]);
    }
    let manifest = read_json(&ws.path("sel1/core.json"));
    assert_eq!(manifest["pairs"].as_array().unwrap().len(), n);
    assert_eq!(manifest["train_only"], true);
    let report = read_json(&ws.path("sel1/selection.json"));
    assert_eq!(report["selected"].as_array().unwrap().len(), n);
    assert_same_tree(&ws.path("sel1"), &ws.path("sel2"));

    let too_many = (n + 1).to_string();
    let out = ws.run(&["--config", "run.toml", "select-data", "--concept", hue.to_str().unwrap(), "--k", &too_many, "--out-manifest", "x/c.json"]);
    assert_eq!(out.status.code(), Some(1));
}

fn blob_concept(n: usize, seed: u64) -> ConceptRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres = [[0.7f32, -0.6, -0.6], [-0.6, -0.6, 0.7]];
    let pairs = (0..n)
        .map(|i| {
            let c = centres[i % 2];
            let jitter: Vec<f32> = (0..3).map(|_| rng.gen_range(-0.15..0.15)).collect();
            let data = (0..3).flat_map(|ch| std::iter::repeat_n(c[ch] + jitter[ch], 16 * 16)).collect();
            let img = Tensor::new(&[3, 16, 16], data).unwrap();
            PairedImage { id: format!("blob-{i:02}"), source: img.clone(), edited: img }
        })
        .collect();
    ConceptRecord {
        name: "blobs".into(),
        prompt: "two blobs".into(),
        text_embedding: text_embedding("two blobs", 16),
        pairs,
        splits: split_indices(n, seed),
    }
}

/// Exhaustive two-way partition with minimum within-cluster sum of squares, then the
/// member nearest each centroid.
fn brute_force_two_medoids(rows: &[Vec<f64>]) -> BTreeSet<usize> {
    let n = rows.len();
    let d = rows[0].len();
    let mut best = (f64::INFINITY, 0u32);
    for mask in 1..(1u32 << (n - 1)) {
        let mut inertia = 0.0;
        for side in [true, false] {
            let members: Vec<usize> = (0..n).filter(|&i| (mask >> i & 1 == 1) == side).collect();
            let mean: Vec<f64> = (0..d).map(|j| members.iter().map(|&i| rows[i][j]).sum::<f64>() / members.len() as f64).collect();
            inertia += members.iter().map(|&i| rows[i].iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sum::<f64>();
        }
        if inertia < best.0 {
            best = (inertia, mask);
        }
    }
    let mut picks = BTreeSet::new();
    for side in [true, false] {
        let members: Vec<usize> = (0..n).filter(|&i| (best.1 >> i & 1 == 1) == side).collect();
        let mean: Vec<f64> = (0..d).map(|j| members.iter().map(|&i| rows[i][j]).sum::<f64>() / members.len() as f64).collect();
        let dist = |i: usize| rows[i].iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        picks.insert(*members.iter().min_by(|&&a, &&b| dist(a).total_cmp(&dist(b))).unwrap());
    }
    picks
}

#[test]
fn two_cluster_coreset_matches_brute_force() {
    let ws = micro_workspace();
    let dir = ws.path("d/blobs");
    let manifest = write_concept_dataset(&blob_concept(18, 5), &dir, 5).unwrap();
    ws.ok(&["--config", "run.toml", "select-data", "--concept", manifest.to_str().unwrap(), "--k", "2", "--out-manifest", "sel/core.json"]);

    let rec = load_concept_dataset(&manifest, LoadOptions { resolution: 16, text_dim: 16 }).unwrap();
    let rows: Vec<Vec<f64>> =
        rec.splits.train.iter().map(|&i| ToyPixels.embed("blob", &rec.pairs[i].source).unwrap()).collect();
    let expected: BTreeSet<PathBuf> = brute_force_two_medoids(&rows)
        .into_iter()
        .map(|j| dir.join(&rec.pairs[rec.splits.train[j]].id).canonicalize().unwrap())
        .collect();
    let written = read_json(&ws.path("sel/core.json"));
    let got: BTreeSet<PathBuf> =
        written["pairs"].as_array().unwrap().iter().map(|p| PathBuf::from(p["source"].as_str().unwrap())).collect();
    assert_eq!(got, expected);

    let subset = load_concept_dataset(&ws.path("sel/core.json"), LoadOptions { resolution: 16, text_dim: 16 }).unwrap();
    assert_eq!(subset.splits.train.len(), 2);
    assert!(subset.splits.test.is_empty());
}

#[test]
fn base_concept_selection_picks_k_names() {
    let ws = micro_workspace();
    let ms: Vec<String> = [("invert", 1), ("blur", 2), ("posterize", 3)]
        .iter()
        .map(|&(t, s)| ws.synth(t, 6, 16, s, &format!("d/{t}")).display().to_string())
        .collect();
    ws.ok(&["--config", "run.toml", "select-data", "--concepts", &ms.join(","), "--k", "2", "--out", "pick"]);
    let v = read_json(&ws.path("pick/selected_concepts.json"));
    let names: BTreeSet<&str> = v["concepts"].as_array().unwrap().iter().map(|c| c.as_str().unwrap()).collect();
    assert_eq!(names.len(), 2);
    assert!(names.is_subset(&["invert", "blur", "posterize"].into_iter().collect()));
}

// ---------------------------------------------------------------------------------------
// search-rank

fn ranks_by_depth(spec: &serde_json::Value) -> Vec<(String, usize)> {
    spec["ranks"].as_object().unwrap().iter().map(|(k, v)| (k.clone(), v.as_u64().unwrap() as usize)).collect()
}

#[test]
fn scripted_search_with_default_thresholds_finds_the_published_ranks() {
    let ws = Workspace::new();
    ws.ok(&["search-rank", "--scripted-scores", "3,2,1,1.5", "--out", "s"]);
    let spec = read_json(&ws.path("s/rank_spec.json"));
    let ranks = ranks_by_depth(&spec);
    assert!(!ranks.is_empty());
    for (id, r) in &ranks {
        let expected = sampling_depth(id).map_or(1, |d| SEARCHED_SAMPLING_RANKS[d]);
        assert_eq!(*r, expected, "{id}");
    }
    let trace = std::fs::read_to_string(ws.path("s/trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 4);
    assert!(trace.lines().count() <= 6);
    let layers = generator_layout(&GeneratorConfig::default());
    let searched = RankSpec::searched(&layers).unwrap();
    assert_eq!(read_json(&ws.path("s/summary.json"))["lora_params"], lora_param_count(&searched, &layers).unwrap());
}

#[test]
fn unit_thresholds_give_an_all_ones_spec_in_one_round() {
    let ws = Workspace::new();
    ws.write("ones.toml", "[search]\nsampling_thresholds = [1, 1, 1, 1]\ntb_threshold = 1\nscripted_scores = [5.0, 4.0]\n");
    ws.ok(&["--config", "ones.toml", "search-rank", "--out", "s"]);
    assert!(ranks_by_depth(&read_json(&ws.path("s/rank_spec.json"))).iter().all(|(_, r)| *r == 1));
    assert_eq!(std::fs::read_to_string(ws.path("s/trace.jsonl")).unwrap().lines().count(), 1);
}

#[test]
fn trained_search_respects_thresholds_and_reruns_identically() {
    let ws = micro_workspace();
    let inv = ws.synth("invert", 8, 16, 1, "d/invert");
    let blur = ws.synth("blur", 12, 16, 2, "d/blur");
    ws.ok(&["--config", "run.toml", "build-base", "--concepts", inv.to_str().unwrap(), "--out", "base"]);
    for out in ["s1", "s2"] {
        ws.ok(&["--config", "run.toml", "search-rank", "--base", "base/base.e2g", "--concepts", blur.to_str().unwrap(), "--out", out]);
    }
    let spec: RankSpec = serde_json::from_value(read_json(&ws.path("s1/rank_spec.json"))).unwrap();
    for (id, r) in &spec.ranks {
        assert!(*r >= 1 && *r <= spec.thresholds[id], "{id}");
    }
    let rounds = std::fs::read_to_string(ws.path("s1/trace.jsonl")).unwrap().lines().count();
    assert!((1..=2).contains(&rounds), "max threshold 2 allows at most 2 rounds, saw {rounds}");
    assert_same_tree(&ws.path("s1"), &ws.path("s2"));
}

// ---------------------------------------------------------------------------------------
// finetune

#[test]
fn finetune_trains_only_adapters_and_leaves_the_base_untouched() {
    let ws = micro_workspace();
    let inv = ws.synth("invert", 8, 16, 1, "d/invert");
    let hue = ws.synth("hue_shift", 8, 16, 3, "d/hue");
    ws.ok(&["--config", "run.toml", "build-base", "--concepts", inv.to_str().unwrap(), "--out", "base"]);
    ws.ok(&["--config", "run.toml", "search-rank", "--scripted-scores", "2,1", "--out", "s"]);
    let before = sha256(&ws.path("base/base.e2g"));
    let mut printed = String::new();
    for out in ["ft1", "ft2"] {
        printed = ws.ok(&[
            "--config", "run.toml", "finetune", "--base", "base/base.e2g", "--rank-spec", "s/rank_spec.json", "--concept",
            hue.to_str().unwrap(), "--out", out,
        ]);
    }
    assert_eq!(sha256(&ws.path("base/base.e2g")), before);
    assert!(printed.contains("trainable parameters"), "{printed}");

    let spec: RankSpec = serde_json::from_value(read_json(&ws.path("s/rank_spec.json"))).unwrap();
    let base = load_checkpoint(&ws.path("base/base.e2g")).unwrap();
    let expected = lora_param_count(&spec, base.generator().unwrap().describe_layers()).unwrap();
    let summary = read_json(&ws.path("ft1/summary.json"));
    assert_eq!(summary["trainable_params"], expected);
    assert_eq!(summary["base_sha256"], before);
    let delta = load_checkpoint(&ws.path("ft1/delta.e2g")).unwrap();
    assert_eq!(delta.num_elements(), expected);
    assert_same_tree(&ws.path("ft1"), &ws.path("ft2"));

    ws.ok(&["--config", "run.toml", "finetune", "--base", "base/base.e2g", "--full", "--concept", hue.to_str().unwrap(), "--out", "full"]);
    let full = read_json(&ws.path("full/summary.json"));
    assert_eq!(full["trainable_fraction"], 1.0);
    assert!(ws.path("full/model.e2g").exists());
    assert_eq!(sha256(&ws.path("base/base.e2g")), before);
}

#[test]
fn zero_epoch_finetune_of_the_default_model_is_an_identity_delta_under_two_percent() {
    let ws = Workspace::new();
    let gen = Generator::<f32>::build(GeneratorConfig::default(), 0).unwrap();
    let base_path = ws.path("base.e2g");
    e2gan_core::dataio::save_checkpoint(&e2gan_core::dataio::Checkpoint::base(&gen, None), &base_path).unwrap();
    let concept = ws.synth("hue_shift", 3, 256, 1, "d/hue");
    ws.ok(&["search-rank", "--scripted-scores", "3,2,1,1.5", "--out", "s"]);
    let printed = ws.ok(&[
        "finetune", "--base", "base.e2g", "--rank-spec", "s/rank_spec.json", "--concept", concept.to_str().unwrap(),
        "--epochs", "0", "--out", "ft",
    ]);
    let pct: f64 = printed
        .split('(')
        .nth(1)
        .and_then(|s| s.split('%').next())
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or_else(|| panic!("no percentage in {printed:?}"));
    assert!(pct < 2.0, "{pct}% trainable");
    let spec = RankSpec::searched(gen.describe_layers()).unwrap();
    assert_eq!(read_json(&ws.path("ft/summary.json"))["trainable_params"], lora_param_count(&spec, gen.describe_layers()).unwrap());
    let delta = load_checkpoint(&ws.path("ft/delta.e2g")).unwrap();
    for id in spec.ranks.keys() {
        let b = &delta.tensors[&lora_b_name(id)];
        assert!(b.data().iter().all(|&v| v == 0.0), "{id} B factor moved");
    }
}

// ---------------------------------------------------------------------------------------
// eval

/// The documented report layout.
#[derive(Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Report {
    schema_version: u32,
    concept: String,
    split: String,
    images: usize,
    mean_l1: f64,
    fid: Option<f64>,
    fid_embedder: serde_json::Value,
    model_sha256: String,
    delta_sha256: Option<String>,
}

#[test]
fn eval_report_round_trips_and_is_reproducible() {
    let ws = micro_workspace();
    let inv = ws.synth("invert", 8, 16, 1, "d/invert");
    let hue = ws.synth("hue_shift", 20, 16, 3, "d/hue");
    ws.ok(&["--config", "run.toml", "build-base", "--concepts", inv.to_str().unwrap(), "--out", "base"]);
    ws.ok(&["--config", "run.toml", "search-rank", "--scripted-scores", "1", "--out", "s"]);
    ws.ok(&["--config", "run.toml", "finetune", "--base", "base/base.e2g", "--rank-spec", "s/rank_spec.json", "--concept", hue.to_str().unwrap(), "--out", "ft"]);
    for out in ["e1", "e2"] {
        ws.ok(&["--config", "run.toml", "eval", "--model", "base/base.e2g", "--delta", "ft/delta.e2g", "--concept", hue.to_str().unwrap(), "--out", out]);
    }
    assert_same_tree(&ws.path("e1"), &ws.path("e2"));

    let text = std::fs::read_to_string(ws.path("e1/report.json")).unwrap();
    let report: Report = serde_json::from_str(&text).unwrap();
    let again: Report = serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
    assert_eq!(report, again);
    let n_test = split_indices(20, 3).test.len();
    assert_eq!(report.images, n_test);
    assert_eq!(report.split, "test");
    assert_eq!(report.delta_sha256.as_deref(), Some(sha256(&ws.path("ft/delta.e2g")).as_str()));
    let fid = report.fid.expect("two or more test images give a Fréchet score");
    assert!(fid.is_finite() && fid >= 0.0);

    let csv = std::fs::read_to_string(ws.path("e1/per_image_l1.csv")).unwrap();
    let values: Vec<f64> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(values.len(), n_test);
    assert!((values.iter().sum::<f64>() / n_test as f64 - report.mean_l1).abs() < 1e-9);
    assert!(ws.path("e1/per_image_l1.png").exists());

    // the dense base alone is a different model
    ws.ok(&["--config", "run.toml", "eval", "--model", "base/base.e2g", "--concept", hue.to_str().unwrap(), "--out", "e3"]);
    let dense: Report = serde_json::from_str(&std::fs::read_to_string(ws.path("e3/report.json")).unwrap()).unwrap();
    assert!(dense.delta_sha256.is_none());

    // reference against itself scores zero under the report's embedder
    let rec = load_concept_dataset(&hue, LoadOptions { resolution: 16, text_dim: 16 }).unwrap();
    let refs: Vec<_> = rec.splits.test.iter().map(|&i| rec.pairs[i].edited.clone()).collect();
    assert!(fid_score(&refs, &refs, &ToyPixels).unwrap().abs() < 1e-8);

    let wrong = ws.run(&["--config", "run.toml", "eval", "--model", "ft/delta.e2g", "--concept", hue.to_str().unwrap(), "--out", "e4"]);
    assert_eq!(wrong.status.code(), Some(1));
}

// ---------------------------------------------------------------------------------------
// account

#[test]
fn account_prints_parseable_json_near_the_published_size() {
    let ws = Workspace::new();
    let stdout = ws.ok(&["account", "--compare", "--out", "acc"]);
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(v, read_json(&ws.path("acc/account.json")));
    let params = v["generator_params"].as_f64().unwrap();
    assert!((params / 7.1e6 - 1.0).abs() <= 0.15, "{params}");
    assert!(v["trainable_fraction"].as_f64().unwrap() < 0.02);
    assert_eq!(v["full"]["trainable_params"], v["generator_params"]);
    assert_eq!(v["lora"]["trainable_params"], v["lora_params"]);
    let r = &v["reported"];
    assert_eq!(r["e2gan_params"], 7.1e6);
    assert_eq!(r["e2gan_flops"], 23.6e9);
    assert_eq!(r["pix2pix_params"], 11.4e6);
    assert_eq!(r["comodgan_flops"], 98.2e9);

    let plain: serde_json::Value = serde_json::from_str(&ws.ok(&["account"])).unwrap();
    assert!(plain.get("reported").is_none());
}

#[test]
fn account_uses_a_given_rank_spec_and_dataset_size() {
    let ws = Workspace::new();
    ws.write("ones.toml", "[search]\nsampling_thresholds = [1, 1, 1, 1]\nscripted_scores = [1.0]\n");
    ws.ok(&["--config", "ones.toml", "search-rank", "--out", "s"]);
    let v: serde_json::Value =
        serde_json::from_str(&ws.ok(&["account", "--rank-spec", "s/rank_spec.json", "--dataset-size", "400"])).unwrap();
    let layers = generator_layout(&GeneratorConfig::default());
    let ones = RankSpec::by_depth(&layers, [1; 4], 1).unwrap();
    assert_eq!(v["lora_params"], lora_param_count(&ones, &layers).unwrap());
    let full = read_json_str(&ws.ok(&["account", "--dataset-size", "800"]));
    assert_eq!(full["full"]["iteration_count"].as_u64().unwrap(), 2 * v["full"]["iteration_count"].as_u64().unwrap());
}

fn read_json_str(s: &str) -> serde_json::Value {
    serde_json::from_str(s).unwrap()
}
