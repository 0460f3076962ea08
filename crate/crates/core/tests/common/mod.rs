#![allow(dead_code)]

use egoprompt_core::data::{make_benchmark, BenchmarkSpec, SyntheticBenchmark};
use egoprompt_core::encoders::EncoderConfig;
use egoprompt_core::trainer::TrainConfig;

/// Small benchmark that trains in well under a second per stage.
pub fn tiny_spec() -> BenchmarkSpec {
    BenchmarkSpec {
        samples_per_split: 48,
        frames: 2,
        patches: 2,
        dim: 16,
        ..BenchmarkSpec::default()
    }
}

pub fn tiny_bench(seed: u64) -> SyntheticBenchmark {
    make_benchmark(seed, &tiny_spec()).unwrap()
}

pub fn tiny_cfg() -> TrainConfig {
    let mut cfg = TrainConfig::desk_scale();
    cfg.encoder = EncoderConfig {
        depth: 2,
        dim: 16,
        heads: 2,
        text_prompt_len: 2,
        video_prompt_len: 2,
        frames: 2,
        patches: 2,
        mlp_ratio: 2,
        deep_prompting: true,
    };
    cfg.epochs_stage1 = 3;
    cfg.epochs_stage2 = 3;
    cfg.warmup_epochs = 1;
    cfg.batch_size = 8;
    cfg.pool_size = 6;
    cfg.k = 2;
    cfg
}
