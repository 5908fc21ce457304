// Temporary hyperparameter scratchpad; not part of the deliverable.

use std::collections::BTreeSet;
use std::time::Instant;

use fsre_core::corpus::{generate_synthetic, split_relations, EpisodeSpec, SynthConfig};
use fsre_core::fewshot::{evaluate, train, ConceptKb, ModelConfig, Pooling, Variant};
use fsre_core::rng::{substream, Stream};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("overfit");
    match mode {
        "overfit" => overfit(&args[2..]),
        "synth" => synth(&args[2..]),
        other => eprintln!("unknown mode {other}"),
    }
}

fn parse<T: std::str::FromStr>(args: &[String], key: &str, default: T) -> T {
    args.iter()
        .position(|a| a == key)
        .and_then(|i| args.get(i + 1))
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn overfit(args: &[String]) {
    let lr = parse(args, "--lr", 0.2);
    let momentum = parse(args, "--momentum", 0.9);
    let episodes = parse(args, "--episodes", 400usize);
    let d = parse(args, "--d", 8usize);
    let seed = parse(args, "--seed", 12u64);
    let pooling = if parse(args, "--mean-pool", 0) == 1 { Pooling::Mean } else { Pooling::Cls };

    let config = SynthConfig {
        relations: 3,
        concepts: 3,
        generic_concepts: 2,
        entities_per_concept: 6,
        instances_per_relation: 2,
        sentence_len: 5,
        filler_vocab: 8,
        concept_dim: 6,
        ..SynthConfig::default()
    };
    let (dataset, index, table) =
        generate_synthetic(&config, &mut substream(31, Stream::Synth)).unwrap();
    let kb = ConceptKb::new(index, table);
    let split: BTreeSet<String> = dataset.relation_ids().map(str::to_owned).collect();
    let model_config = ModelConfig {
        variant: Variant::Full,
        d,
        d_ff: 2 * d,
        d_p: 6,
        d_c: 6,
        l_max: 48,
        learning_rate: lr,
        momentum,
        max_episodes: episodes,
        seed,
        pooling,
        ..ModelConfig::default()
    };
    let spec = EpisodeSpec::new(3, 1).with_queries(3);
    let start = Instant::now();
    let (_, log) = train(&dataset, &split, &spec, &model_config, Some(&kb)).unwrap();
    let elapsed = start.elapsed();
    for chunk in log.chunks(50) {
        let acc: f64 = chunk.iter().map(|e| e.accuracy).sum::<f64>() / chunk.len() as f64;
        let loss: f64 = chunk.iter().map(|e| e.loss).sum::<f64>() / chunk.len() as f64;
        println!(
            "ep {:4}..{:4}  loss {loss:.4}  acc {acc:.3}",
            chunk[0].episode,
            chunk.last().unwrap().episode
        );
    }
    if parse(args, "--detail", 0) == 1 {
        for e in log.iter().rev().take(5).rev() {
            println!("  ep {:4} loss {:10.5} acc {:.3}", e.episode, e.loss, e.accuracy);
        }
        let (model, _) = (train(&dataset, &split, &spec, &model_config, Some(&kb)).unwrap().0, ());
        let ep = fsre_core::corpus::sample_episode(
            &dataset, &split, &spec, &mut substream(999, Stream::Sample)).unwrap();
        let r = fsre_core::fewshot::episode_forward(&ep, &model, Some(&kb)).unwrap();
        for (q, row) in r.logits.iter().enumerate() {
            println!("  q{q} label {} pred {} logits {:?}", ep.queries[q].1, r.predicted[q], row);
        }
        println!("  loss {} acc {}", r.loss, r.accuracy);
        let norms: Vec<(String, f64)> = model.params.tensors().iter()
            .map(|(n, t)| ((*n).to_string(), t.iter().map(|x| x*x).sum::<f64>().sqrt()))
            .collect();
        println!("  param norms: {norms:?}");
    }
    println!("elapsed {elapsed:?} ({:?}/episode)", elapsed / log.len().max(1) as u32);
}

fn synth(args: &[String]) {
    let lr = parse(args, "--lr", 0.2);
    let momentum = parse(args, "--momentum", 0.9);
    let episodes = parse(args, "--episodes", 2000usize);
    let d = parse(args, "--d", 16usize);
    let seed = parse(args, "--seed", 1u64);
    let variant = match parse(args, "--variant", "full".to_string()).as_str() {
        "full" => Variant::Full,
        "no_att" => Variant::NoAtt,
        "no_fusion" => Variant::NoFusion,
        "simple" => Variant::Simple,
        _ => Variant::SentenceOnly,
    };
    let pooling = if parse(args, "--mean-pool", 0) == 1 { Pooling::Mean } else { Pooling::Cls };
    let eval_episodes = parse(args, "--eval-episodes", 200usize);

    let config = SynthConfig::default();
    let (dataset, index, table) =
        generate_synthetic(&config, &mut substream(7, Stream::Synth)).unwrap();
    let kb = ConceptKb::new(index, table);
    let split = split_relations(&dataset, 7, (14, 5, 5)).unwrap();

    let model_config = ModelConfig {
        variant,
        d,
        d_ff: 2 * d,
        d_p: 16,
        d_c: 16,
        l_max: 64,
        learning_rate: lr,
        momentum,
        grad_clip: Some(parse(args, "--clip", 1.0)),
        head_hidden: parse(args, "--head-hidden", 32usize),
        max_episodes: episodes,
        seed,
        pooling,
        early_stop_acc: Some(parse(args, "--early-stop", 0.99)),
        early_stop_window: 100,
        ..ModelConfig::default()
    };
    let spec = EpisodeSpec::new(5, 1).with_queries(5);

    if parse(args, "--gate-stats", 0) == 1 {
        // Selection behavior at init: how often does the gate open, and how
        // often does it pick the determining (c*) concept?
        let vocab = fsre_core::fewshot::build_vocab(&dataset, &split.train, Some(&kb));
        let mut rng = substream(seed, Stream::Init);
        let params = fsre_core::fewshot::ModelParams::init(&model_config, vocab.len(), &mut rng);
        let model = fsre_core::fewshot::Model { config: model_config.clone(), params, vocab };
        let (mut total, mut selected, mut determining) = (0u32, 0u32, 0u32);
        let mut sample_rng = substream(seed, Stream::Sample);
        for _ in 0..20 {
            let ep = fsre_core::corpus::sample_episode(&dataset, &split.train, &spec, &mut sample_rng).unwrap();
            let q = &ep.queries[0].0;
            let s = &ep.support[0][0];
            let (_, trace) = fsre_core::fewshot::pair_logit_traced(q, s, &model, Some(&kb)).unwrap();
            for gate in trace.gates {
                total += 1;
                if let Some(i) = gate.decision.selected {
                    selected += 1;
                    if gate.candidates[i].starts_with('c') {
                        determining += 1;
                    }
                }
            }
        }
        println!("gates: {total} total, {selected} selected, {determining} determining");
    }

    let start = Instant::now();
    let (model, log) = train(&dataset, &split.train, &spec, &model_config, Some(&kb)).unwrap();
    let train_time = start.elapsed();
    for chunk in log.chunks(200) {
        let acc: f64 = chunk.iter().map(|e| e.accuracy).sum::<f64>() / chunk.len() as f64;
        let loss: f64 = chunk.iter().map(|e| e.loss).sum::<f64>() / chunk.len() as f64;
        println!(
            "ep {:5}..{:5}  loss {loss:.4}  acc {acc:.3}",
            chunk[0].episode,
            chunk.last().unwrap().episode
        );
    }
    if parse(args, "--logit-debug", 0) == 1 {
        let ep = fsre_core::corpus::sample_episode(
            &dataset, &split.train, &spec, &mut substream(5555, Stream::Sample)).unwrap();
        let r = fsre_core::fewshot::episode_forward(&ep, &model, Some(&kb)).unwrap();
        for (qi, row) in r.logits.iter().enumerate() {
            println!("  q{qi} label {} pred {} logits {:?}", ep.queries[qi].1, r.predicted[qi], row);
        }
        let norms: Vec<(String, f64)> = model.params.tensors().iter()
            .map(|(n, t)| ((*n).to_string(), t.iter().map(|x| x*x).sum::<f64>().sqrt()))
            .collect();
        println!("  param norms: {norms:?}");
    }
    if parse(args, "--gate-stats", 0) == 1 {
        let (mut total, mut selected, mut determining) = (0u32, 0u32, 0u32);
        let mut sample_rng = substream(seed.wrapping_add(500), Stream::Eval);
        for _ in 0..20 {
            let ep = fsre_core::corpus::sample_episode(&dataset, &split.test, &spec, &mut sample_rng).unwrap();
            let q = &ep.queries[0].0;
            let s = &ep.support[0][0];
            let (_, trace) = fsre_core::fewshot::pair_logit_traced(q, s, &model, Some(&kb)).unwrap();
            for gate in trace.gates {
                total += 1;
                if let Some(i) = gate.decision.selected {
                    selected += 1;
                    if gate.candidates[i].starts_with('c') {
                        determining += 1;
                    }
                }
            }
        }
        println!("post-train gates on TEST: {total} total, {selected} selected, {determining} determining");
    }
    let start_eval = Instant::now();
    let report = evaluate(&dataset, &split.test, &spec, &model, Some(&kb), eval_episodes, 900).unwrap();
    println!(
        "variant {:?} seed {seed}: trained {} episodes in {train_time:?}, eval acc {:.4} ± {:.4} ({eval_episodes} eps in {:?})",
        variant,
        log.len(),
        report.accuracy,
        report.ci95,
        start_eval.elapsed()
    );
}

#[allow(dead_code)]
fn dummy() {}
