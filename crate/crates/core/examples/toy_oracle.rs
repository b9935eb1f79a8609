//! Desk-scale end-to-end run: base training on `invert`, a rank search on two probe
//! concepts, then adapter and full fine-tunes on `hue_shift`. Prints the numbers the toy
//! thresholds in the test suite were fixed from.
//!
//! `cargo run --release -p e2gan-core --example toy_oracle`

use std::time::Instant;

use e2gan_core::dataio::{synth_paired_task, SynthTask};
use e2gan_core::lora::{depth_thresholds, lora_param_count};
use e2gan_core::model::GeneratorConfig;
use e2gan_core::rank_search::{search_global_rank, RankTrial, SearchConfig};
use e2gan_core::trainer::{
    evaluate, finetune_concept, finetune_full, pretrain_autoencoder, train_base, GenModel, LoraSearchTrial, LossConfig,
    SearchScorer, TrainConfig, TrainMode,
};

fn main() -> e2gan_core::Result<()> {
    let cfg = GeneratorConfig { image_resolution: 32, ..GeneratorConfig::micro() };
    let loss = LossConfig::default();
    let invert = synth_paired_task(SynthTask::Invert, 64, 32, 7, cfg.text_embed_dim)?;
    let train = TrainConfig { epochs: 30, batch_size: 1, seed: 3, lr: 5e-4, ..Default::default() };
    let t = Instant::now();
    let (base, log) = train_base(std::slice::from_ref(&invert), &cfg, 8, &train, &loss)?;
    let (first, last) = (log.epochs[0].g_l1, log.epochs.last().unwrap().g_l1);
    println!("base {:.1}s: epoch-1 L1 {first:.4}, last {last:.4}, ratio {:.3}", t.elapsed().as_secs_f64(), last / first);

    let gen = base.generator()?;
    let layers = gen.describe_layers();
    let thresholds = depth_thresholds(layers, [1, 2, 2, 4], 1);
    let search = SearchConfig::new(3, thresholds.clone())?;
    let ft = TrainConfig { epochs: 20, lr: 2e-3, ..train.clone() };
    let probes: Vec<_> = [SynthTask::Blur, SynthTask::Posterize]
        .iter()
        .map(|&task| synth_paired_task(task, 32, 32, 13, cfg.text_embed_dim))
        .collect::<Result<_, _>>()?;
    let t = Instant::now();
    let names: Vec<String> = probes.iter().map(|p| p.name.clone()).collect();
    let found = search_global_rank(&names, &search, |name| {
        let concept = probes.iter().find(|p| p.name == name).unwrap().clone();
        let trial = LoraSearchTrial::new(&base, concept, &thresholds, &ft, &loss, SearchScorer::L1)?;
        Ok(Box::new(trial) as Box<dyn RankTrial>)
    })?;
    println!("search {:.1}s: {:?}", t.elapsed().as_secs_f64(), found.spec.ranks);
    for c in &found.per_concept {
        for r in &c.trace {
            println!("  {} round {} score {:.4} {:?}", r.concept, r.round, r.score, r.ranks.values().collect::<Vec<_>>());
        }
    }
    let spec = found.spec;
    let total = gen.params().num_elements();
    let lora = lora_param_count(&spec, layers)?;
    println!("micro params {total}, adapter params {lora} ({:.2}%)", 100.0 * lora as f64 / total as f64);

    let hue = synth_paired_task(SynthTask::HueShift, 64, 32, 11, cfg.text_embed_dim)?;
    let before = evaluate(&GenModel::Dense(gen.clone()), &hue, &hue.splits.test, 1)?.mean_l1;
    let t = Instant::now();
    let adapted = finetune_concept(&base, &hue, &spec, &ft, &loss)?;
    let l_lora = evaluate(&adapted.model, &hue, &hue.splits.test, 1)?.mean_l1;
    println!("adapter fine-tune {:.1}s: test L1 {l_lora:.4} (base {before:.4})", t.elapsed().as_secs_f64());
    let t = Instant::now();
    let full = finetune_full(&base, &hue, &ft, &loss)?;
    let l_full = evaluate(&full.model, &hue, &hue.splits.test, 1)?.mean_l1;
    println!("full fine-tune {:.1}s: test L1 {l_full:.4}, ratio {:.3}", t.elapsed().as_secs_f64(), l_lora / l_full);

    let ae_cfg = GeneratorConfig::micro();
    let images = synth_paired_task(SynthTask::Invert, 32, 16, 5, ae_cfg.text_embed_dim)?;
    let ae_train = TrainConfig { epochs: 50, batch_size: 1, seed: 1, lr: 5e-4, mode: TrainMode::Autoencoder, ..Default::default() };
    let t = Instant::now();
    let (_, ae_log) = pretrain_autoencoder(&images, &ae_cfg, &ae_train)?;
    println!("autoencoder {:.1}s: last L1 {:.4}", t.elapsed().as_secs_f64(), ae_log.epochs.last().unwrap().g_l1);
    Ok(())
}
