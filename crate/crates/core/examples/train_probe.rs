use scansr::imaging::*;
use scansr::training::{train_two_stage, TrainRunConfig, TrainVariant};

fn make_corpus(n: usize, side: usize) -> Vec<Micrograph> {
    (0..n)
        .map(|i| synth_micrograph(i as u64, side, if i % 2 == 0 { SynthStyle::GaussianField } else { SynthStyle::Lattice }).unwrap())
        .collect()
}

fn main() {
    let corpus = make_corpus(100, 64);
    let mut cfg = TrainRunConfig::desk_two_stage(TrainVariant::Unified);
    cfg.non_adversarial_iterations = 1500;
    cfg.base_channels = 16;
    cfg.depth = 2;
    let result = train_two_stage(&cfg, &corpus, None).unwrap();
    let mut last = Vec::new();
    for line in result.metrics.as_csv().lines() {
        if line.contains("g_mse") {
            last.push(line.to_string());
        }
    }
    for (i, l) in last.iter().enumerate() {
        if i % 150 == 0 || i + 1 == last.len() {
            println!("{l}");
        }
    }
}
