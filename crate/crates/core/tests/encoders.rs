use egoprompt_core::component::Component;
use egoprompt_core::encoders::layers::Attention;
use egoprompt_core::encoders::{
    divided_spacetime_block, encode_handcrafted_classes, encode_text_classes, encode_video,
    map_text_prompts_to_video, ClassTokens, ComponentPromptSet, EncoderConfig, FrozenEncoders, VideoBlock,
    VideoLayout, Vocabulary, NOUN_TEMPLATE, VERB_TEMPLATE,
};
use egoprompt_core::init::{gaussian, rng_for};
use egoprompt_core::numerics::{grad_check, GradCheckOptions, Objective};
use egoprompt_core::{Error, Result, Scalar, Tape, Tensor, Var};

fn labels(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn small_cfg() -> EncoderConfig {
    EncoderConfig {
        depth: 2,
        dim: 8,
        heads: 2,
        text_prompt_len: 2,
        video_prompt_len: 2,
        frames: 2,
        patches: 2,
        mlp_ratio: 2,
        deep_prompting: true,
    }
}

fn random_clip(cfg: &EncoderConfig, seed: u64) -> Tensor<f32> {
    let mut rng = rng_for(seed, 77);
    gaussian(&mut rng, &[cfg.frames, cfg.patches, cfg.dim], 0.3)
}

#[test]
fn frozen_init_is_deterministic_and_seeded() {
    let cfg = EncoderConfig::default();
    let a = FrozenEncoders::<f32>::init(3, &cfg).unwrap();
    let b = FrozenEncoders::<f32>::init(3, &cfg).unwrap();
    let c = FrozenEncoders::<f32>::init(4, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.checksum(), b.checksum());
    assert_ne!(a.text[0].attn.wq, c.text[0].attn.wq);
    assert_ne!(a.checksum(), c.checksum());
}

#[test]
fn parameter_count_matches_closed_form() {
    let cfg = EncoderConfig::default();
    let enc = FrozenEncoders::<f32>::init(0, &cfg).unwrap();
    // K * (text layer + video block), d = 32, MLP hidden 64
    let d = 32;
    let h = 64;
    let mlp = 2 * d + d * h + h + h * d + d;
    let per_layer = (4 * d * d + mlp) + (8 * d * d + mlp);
    assert_eq!(cfg.frozen_param_count(), 2 * per_layer);
    assert_eq!(enc.param_count(), cfg.frozen_param_count());
    assert_eq!(enc.param_count(), 41_600);
}

#[test]
fn config_validation() {
    let bad = EncoderConfig { heads: 5, ..EncoderConfig::default() };
    assert!(matches!(bad.validate(), Err(Error::Config { key, .. }) if key == "encoder.heads"));
    let bad = EncoderConfig { depth: 0, ..EncoderConfig::default() };
    assert!(matches!(FrozenEncoders::<f32>::init(0, &bad), Err(Error::Config { .. })));
}

fn run_block(block: &VideoBlock<f64>, cfg: &EncoderConfig, e: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::<f64>::new();
    let w = block.bind(&mut tape);
    let lv = VideoLayout::from_config(cfg).bind(&mut tape);
    let x = tape.constant(e.clone());
    let out = divided_spacetime_block(&mut tape, &w, &lv, cfg.heads, x).unwrap();
    tape.value(out).clone()
}

#[test]
fn zero_block_is_pure_residual() {
    let cfg = small_cfg();
    let block = VideoBlock::<f64>::zeros(cfg.dim, cfg.hidden());
    let mut rng = rng_for(1, 0);
    let e = gaussian::<f64>(&mut rng, &[cfg.clip_tokens() + cfg.video_prompt_len, cfg.dim], 1.0);
    assert_eq!(run_block(&block, &cfg, &e), e);
}

#[test]
fn single_frame_temporal_attention_is_value_projection() {
    let cfg = EncoderConfig { frames: 1, patches: 3, ..small_cfg() };
    let d = cfg.dim;
    let mut rng = rng_for(2, 0);
    let mut block = VideoBlock::<f64>::zeros(d, cfg.hidden());
    block.time_attn = Attention {
        wq: gaussian(&mut rng, &[d, d], 0.5),
        wk: gaussian(&mut rng, &[d, d], 0.5),
        wv: gaussian(&mut rng, &[d, d], 0.5),
        wo: gaussian(&mut rng, &[d, d], 0.5),
    };
    let n = cfg.clip_tokens() + cfg.video_prompt_len;
    let e = gaussian::<f64>(&mut rng, &[n, d], 1.0);
    let out = run_block(&block, &cfg, &e);

    // every patch attends only to itself: out = e + e Wv Wo
    let (wv, wo) = (block.time_attn.wv.data(), block.time_attn.wo.data());
    for i in 0..n {
        let row = e.row(i);
        for j in 0..d {
            let expected = if i < cfg.clip_tokens() {
                let mut acc = 0.0;
                for a in 0..d {
                    for b in 0..d {
                        acc += row[a] * wv[a * d + b] * wo[b * d + j];
                    }
                }
                row[j] + acc
            } else {
                row[j]
            };
            let got = out.data()[i * d + j];
            assert!((got - expected).abs() < 1e-12, "token {i} dim {j}: {got} vs {expected}");
        }
    }
}

#[test]
fn frame_permutation_is_equivariant() {
    let cfg = EncoderConfig { frames: 2, patches: 2, ..small_cfg() };
    let block = VideoBlock::<f64>::init(&mut rng_for(5, 0), &cfg);
    let n = cfg.clip_tokens() + cfg.video_prompt_len;
    let e = gaussian::<f64>(&mut rng_for(6, 0), &[n, cfg.dim], 1.0);
    let swap = |t: &Tensor<f64>| {
        let d = cfg.dim;
        let mut s = t.clone();
        for p in 0..cfg.patches {
            for j in 0..d {
                s.data_mut()[p * d + j] = t.data()[(cfg.patches + p) * d + j];
                s.data_mut()[(cfg.patches + p) * d + j] = t.data()[p * d + j];
            }
        }
        s
    };
    let a = run_block(&block, &cfg, &swap(&e));
    let b = swap(&run_block(&block, &cfg, &e));
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn block_rejects_wrong_token_count() {
    let cfg = small_cfg();
    let block = VideoBlock::<f64>::zeros(cfg.dim, cfg.hidden());
    let mut tape = Tape::<f64>::new();
    let w = block.bind(&mut tape);
    let lv = VideoLayout::from_config(&cfg).bind(&mut tape);
    let x = tape.constant(Tensor::zeros(vec![3, cfg.dim]));
    assert!(matches!(
        divided_spacetime_block(&mut tape, &w, &lv, cfg.heads, x),
        Err(Error::Dimension { .. })
    ));
}

struct TextFixture {
    enc: FrozenEncoders<f32>,
    prompts: ComponentPromptSet<f32>,
}

impl TextFixture {
    fn new(cfg: &EncoderConfig) -> Self {
        Self {
            enc: FrozenEncoders::init(11, cfg).unwrap(),
            prompts: ComponentPromptSet::init(Component::Verb, cfg, 11),
        }
    }

    fn learned(&self, prompts: &ComponentPromptSet<f32>, names: &[&str], template: &str) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let ev = self.enc.bind(&mut tape);
        let pv = prompts.bind(&mut tape, true);
        let classes = ClassTokens::new(&self.enc.vocab, Component::Verb, &labels(names), template)?;
        let t = encode_text_classes(&mut tape, &ev, &pv, &classes)?;
        Ok(tape.value(t.embeddings).clone())
    }

    fn handcrafted(&self, names: &[&str], template: &str) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let ev = self.enc.bind(&mut tape);
        let classes = ClassTokens::new(&self.enc.vocab, Component::Verb, &labels(names), template)?;
        let t = encode_handcrafted_classes(&mut tape, &ev, &classes)?;
        assert!(!tape.requires_grad(t.embeddings));
        Ok(tape.value(t.embeddings).clone())
    }
}

fn zeroed(p: &ComponentPromptSet<f32>) -> ComponentPromptSet<f32> {
    let mut z = p.clone();
    for t in &mut z.text_prompts {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    z
}

#[test]
fn text_classes_rows_and_shapes() {
    let fx = TextFixture::new(&EncoderConfig::default());
    let t = fx.learned(&fx.prompts, &["cut", "cut", "open"], VERB_TEMPLATE).unwrap();
    assert_eq!(t.shape(), &[3, 32]);
    assert_eq!(t.row(0), t.row(1));
    assert_ne!(t.row(0), t.row(2));
    for i in 0..3 {
        let n: f32 = t.row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
    }
    let one = fx.learned(&fx.prompts, &["cut"], VERB_TEMPLATE).unwrap();
    assert_eq!(one.shape(), &[1, 32]);
}

#[test]
fn prompts_causally_affect_text_rows() {
    let fx = TextFixture::new(&EncoderConfig::default());
    let names = ["take", "put"];
    let with = fx.learned(&fx.prompts, &names, VERB_TEMPLATE).unwrap();
    let without = fx.learned(&zeroed(&fx.prompts), &names, VERB_TEMPLATE).unwrap();
    for i in 0..2 {
        assert_ne!(with.row(i), without.row(i));
    }
}

#[test]
fn learned_path_with_zero_prompts_equals_handcrafted() {
    for deep in [true, false] {
        let cfg = EncoderConfig { deep_prompting: deep, ..EncoderConfig::default() };
        let fx = TextFixture::new(&cfg);
        let names = ["wash", "pour", "stir"];
        let learned = fx.learned(&zeroed(&fx.prompts), &names, VERB_TEMPLATE).unwrap();
        let frozen = fx.handcrafted(&names, VERB_TEMPLATE).unwrap();
        assert_eq!(learned, frozen);
    }
}

#[test]
fn handcrafted_tables_are_deterministic_and_template_sensitive() {
    let fx = TextFixture::new(&EncoderConfig::default());
    let names = ["knife", "cup", "bowl"];
    let a = fx.handcrafted(&names, VERB_TEMPLATE).unwrap();
    let b = fx.handcrafted(&names, VERB_TEMPLATE).unwrap();
    assert_eq!(a, b);
    let c = fx.handcrafted(&names, NOUN_TEMPLATE).unwrap();
    for i in 0..names.len() {
        assert_ne!(a.row(i), c.row(i));
    }
    assert_eq!(VERB_TEMPLATE, "a video of a [CLASS] action");
}

#[test]
fn template_without_placeholder_is_rejected() {
    let fx = TextFixture::new(&EncoderConfig::default());
    assert!(matches!(fx.handcrafted(&["cut"], "a video of an action"), Err(Error::Template(_))));
    assert!(matches!(
        Vocabulary::instantiate("no placeholder", "cut"),
        Err(Error::Template(_))
    ));
}

#[test]
fn vocabulary_is_fixed_and_roughly_unit_norm() {
    let v = Vocabulary::new(32);
    assert_eq!(v.embed("knife"), v.embed("knife"));
    assert_ne!(v.embed("knife"), v.embed("spoon"));
    let n: f64 = v.embed("knife").iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(n > 0.5 && n < 1.6, "{n}");
    assert_eq!(Vocabulary::tokenize("Cut  the_Onion"), vec!["cut", "the", "onion"]);
}

fn video_prompts_of(p: &ComponentPromptSet<f32>) -> Vec<Tensor<f32>> {
    let mut tape = Tape::new();
    let pv = p.bind(&mut tape, false);
    let out = map_text_prompts_to_video(&mut tape, &pv).unwrap();
    out.iter().map(|&v| tape.value(v).clone()).collect()
}

#[test]
fn zero_projection_gives_zero_video_prompts() {
    let cfg = EncoderConfig::default();
    let mut p = ComponentPromptSet::<f32>::init(Component::Noun, &cfg, 1);
    for w in p.proj_weights.iter_mut().chain(p.proj_biases.iter_mut()) {
        w.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    for v in video_prompts_of(&p) {
        assert_eq!(v.shape(), &[cfg.video_prompt_len, cfg.dim]);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn identity_projection_copies_text_prompts() {
    let cfg = EncoderConfig::default();
    let mut p = ComponentPromptSet::<f32>::init(Component::Noun, &cfg, 1);
    for w in &mut p.proj_weights {
        *w = Tensor::identity(cfg.dim);
    }
    for (v, t) in video_prompts_of(&p).iter().zip(&p.text_prompts) {
        assert_eq!(v, t);
    }
}

#[test]
fn video_prompts_resample_to_video_length() {
    let cfg = EncoderConfig { text_prompt_len: 4, video_prompt_len: 2, ..EncoderConfig::default() };
    let p = ComponentPromptSet::<f32>::init(Component::Verb, &cfg, 1);
    for v in video_prompts_of(&p) {
        assert_eq!(v.shape(), &[2, cfg.dim]);
    }
}

struct MappingLoss;

impl Objective for MappingLoss {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, leaves: &[Var]) -> Result<Var> {
        // leaves: text prompt, projection weight, bias, target
        let h = tape.matmul(leaves[0], leaves[1])?;
        let h = tape.add_row(h, leaves[2])?;
        let r = tape.constant(egoprompt_core::encoders::resample_matrix(3, 2));
        let v = tape.matmul(r, h)?;
        let diff = tape.sub(v, leaves[3])?;
        let sq = tape.mul(diff, diff)?;
        let s = tape.sum(sq);
        let g = tape.gelu(v);
        let gs = tape.sum(g);
        tape.add(s, gs)
    }
}

#[test]
fn gradient_flows_through_prompt_mapping() {
    let mut rng = rng_for(9, 0);
    let leaves = vec![
        gaussian::<f64>(&mut rng, &[2, 4], 0.5),
        gaussian::<f64>(&mut rng, &[4, 4], 0.5),
        gaussian::<f64>(&mut rng, &[4], 0.5),
        gaussian::<f64>(&mut rng, &[3, 4], 0.5),
    ];
    let report = grad_check::<f32, _>(&MappingLoss, &leaves, GradCheckOptions::default()).unwrap();
    assert!(report.passed(), "{report:?}");
    assert!(report.leaves[0].scale > 0.0 && report.leaves[1].scale > 0.0);
}

fn encode(enc: &FrozenEncoders<f32>, p: &ComponentPromptSet<f32>, clip: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let ev = enc.bind(&mut tape);
    let pv = p.bind(&mut tape, true);
    let vp = map_text_prompts_to_video(&mut tape, &pv)?;
    let x = tape.constant(clip.clone());
    let f = encode_video(&mut tape, &ev, &vp, x)?;
    Ok(tape.value(f).clone())
}

#[test]
fn video_feature_contracts() {
    let cfg = EncoderConfig::default();
    let enc = FrozenEncoders::<f32>::init(2, &cfg).unwrap();
    let verb = ComponentPromptSet::<f32>::init(Component::Verb, &cfg, 2);
    let noun = ComponentPromptSet::<f32>::init(Component::Noun, &cfg, 2);
    let clip = random_clip(&cfg, 1);
    let a = encode(&enc, &verb, &clip).unwrap();
    let b = encode(&enc, &verb, &clip).unwrap();
    let c = encode(&enc, &noun, &clip).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.shape(), &[cfg.dim]);
    let n: f64 = a.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
    assert!((n - 1.0).abs() < 1e-6);
}

#[test]
fn video_rejects_wrong_grid() {
    let cfg = EncoderConfig::default();
    let enc = FrozenEncoders::<f32>::init(2, &cfg).unwrap();
    let p = ComponentPromptSet::<f32>::init(Component::Verb, &cfg, 2);
    let clip = Tensor::<f32>::filled(vec![3, cfg.patches, cfg.dim], 0.1);
    assert!(matches!(encode(&enc, &p, &clip), Err(Error::Dimension { .. })));
}

#[test]
fn deep_prompting_changes_features() {
    let deep = EncoderConfig::default();
    let shallow = EncoderConfig { deep_prompting: false, ..deep.clone() };
    let clip = random_clip(&deep, 3);
    let enc_d = FrozenEncoders::<f32>::init(4, &deep).unwrap();
    let enc_s = FrozenEncoders::<f32>::init(4, &shallow).unwrap();
    let p = ComponentPromptSet::<f32>::init(Component::Verb, &deep, 4);
    assert_ne!(encode(&enc_d, &p, &clip).unwrap(), encode(&enc_s, &p, &clip).unwrap());
}

#[test]
fn outputs_are_finite_over_config_grid() {
    for depth in [1, 2, 3] {
        for (dim, heads) in [(8, 1), (8, 2), (16, 4), (32, 4)] {
            for (lt, lv) in [(1, 1), (2, 4), (4, 4)] {
                for deep in [true, false] {
                    let cfg = EncoderConfig {
                        depth,
                        dim,
                        heads,
                        text_prompt_len: lt,
                        video_prompt_len: lv,
                        frames: 3,
                        patches: 2,
                        mlp_ratio: 2,
                        deep_prompting: deep,
                    };
                    for seed in 0..2 {
                        let enc = FrozenEncoders::<f32>::init(seed, &cfg).unwrap();
                        let p = ComponentPromptSet::<f32>::init(Component::Noun, &cfg, seed);
                        let f = encode(&enc, &p, &random_clip(&cfg, seed)).unwrap();
                        assert!(f.is_finite());
                        let mut tape = Tape::new();
                        let ev = enc.bind(&mut tape);
                        let pv = p.bind(&mut tape, true);
                        let classes =
                            ClassTokens::new(&enc.vocab, Component::Noun, &labels(&["cup", "lid"]), NOUN_TEMPLATE)
                                .unwrap();
                        let t = encode_text_classes(&mut tape, &ev, &pv, &classes).unwrap();
                        assert!(tape.value(t.embeddings).is_finite());
                    }
                }
            }
        }
    }
}

#[test]
fn template_seeding_fills_first_layer_only() {
    let cfg = EncoderConfig::default();
    let vocab = Vocabulary::new(cfg.dim);
    let mut p = ComponentPromptSet::<f64>::init(Component::Verb, &cfg, 3);
    let deeper = p.text_prompts[1].clone();
    p.seed_from_template(&vocab, "a video of a [CLASS] action").unwrap();
    // context words: a, video, of, a, action -> first four fill L_t = 4
    for (i, w) in ["a", "video", "of", "a"].iter().enumerate() {
        assert_eq!(p.text_prompts[0].row(i), vocab.embed(w).as_slice());
    }
    assert_eq!(p.text_prompts[1], deeper);
    assert!(matches!(
        p.seed_from_template(&vocab, "no placeholder"),
        Err(egoprompt_core::Error::Template(_))
    ));
}
