//! Seeded synthetic verb/noun benchmark.
//!
//! Each clip is a `T x S` grid of `d`-dimensional tokens. A contiguous block
//! of spatial positions (the HOI region) carries `u_noun + ((t + 1) / T) u_verb`
//! in frame `t`, so the noun lives in token content and the verb in the
//! change across frames. The remaining positions are clutter drawn from a
//! shared background pool, sometimes with a distractor object. Latent factors
//! are the token-table rows of the label names.

mod spec;

pub use spec::{BenchmarkSpec, DomainShift, DEFAULT_NOUNS, DEFAULT_VERBS};

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::component::Component;
use crate::container::{self, NamedArray};
use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::init::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    WithinTest,
    CrossTest,
    BaseTest,
    NovelTest,
}

impl Split {
    pub const ALL: [Split; 5] = [
        Split::Train,
        Split::WithinTest,
        Split::CrossTest,
        Split::BaseTest,
        Split::NovelTest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::WithinTest => "within-test",
            Split::CrossTest => "cross-test",
            Split::BaseTest => "base-test",
            Split::NovelTest => "novel-test",
        }
    }

    pub fn domain(self) -> u8 {
        match self {
            Split::Train | Split::WithinTest => 0,
            Split::CrossTest | Split::BaseTest | Split::NovelTest => 1,
        }
    }

    fn stream(self) -> u64 {
        0x1000 + self as u64
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Clips of one split, stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub frames: usize,
    pub patches: usize,
    pub dim: usize,
    /// `len * T * S * d` values.
    pub tokens: Vec<f32>,
    pub verbs: Vec<usize>,
    pub nouns: Vec<usize>,
    pub domains: Vec<u8>,
    /// First spatial position of the HOI block in each clip.
    pub hoi_offsets: Vec<usize>,
}

impl Dataset {
    fn empty(split: Split, spec: &BenchmarkSpec) -> Self {
        Self {
            split,
            frames: spec.frames,
            patches: spec.patches,
            dim: spec.dim,
            tokens: Vec::new(),
            verbs: Vec::new(),
            nouns: Vec::new(),
            domains: Vec::new(),
            hoi_offsets: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.verbs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.verbs.is_empty()
    }

    pub fn clip_len(&self) -> usize {
        self.frames * self.patches * self.dim
    }

    /// Tokens of clip `i`, `[T, S, d]` row-major.
    pub fn clip(&self, i: usize) -> &[f32] {
        let n = self.clip_len();
        &self.tokens[i * n..(i + 1) * n]
    }

    pub fn labels(&self, c: Component) -> &[usize] {
        match c {
            Component::Verb => &self.verbs,
            Component::Noun => &self.nouns,
        }
    }

    /// Seeded shuffle of all indices split into batches; the last partial
    /// batch is kept.
    pub fn batches(&self, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
        sample_batches(self.len(), batch_size, epoch_seed)
    }
}

/// Seeded shuffle of `0..n` cut into batches of `batch_size`.
pub fn sample_batches(n: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Usage("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 || batch_size > n {
        return Err(Error::Usage(format!("batch size {batch_size} must be in 1..={n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Generated benchmark: label sets, compatibility, held-out labels and the
/// five splits.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBenchmark {
    pub seed: u64,
    pub spec: BenchmarkSpec,
    pub verb_names: Vec<String>,
    pub noun_names: Vec<String>,
    pub compat: Vec<Vec<bool>>,
    pub novel_verbs: Vec<usize>,
    pub novel_nouns: Vec<usize>,
    pub splits: BTreeMap<Split, Dataset>,
}

impl SyntheticBenchmark {
    pub fn split(&self, s: Split) -> &Dataset {
        &self.splits[&s]
    }

    pub fn names(&self, c: Component) -> &[String] {
        match c {
            Component::Verb => &self.verb_names,
            Component::Noun => &self.noun_names,
        }
    }

    pub fn novel(&self, c: Component) -> &[usize] {
        match c {
            Component::Verb => &self.novel_verbs,
            Component::Noun => &self.novel_nouns,
        }
    }

    /// Labels of component `c` seen in training, ascending.
    pub fn base(&self, c: Component) -> Vec<usize> {
        let novel = self.novel(c);
        (0..self.names(c).len()).filter(|i| !novel.contains(i)).collect()
    }

    pub fn base_names(&self, c: Component) -> Vec<String> {
        self.base(c).into_iter().map(|i| self.names(c)[i].clone()).collect()
    }

    pub fn novel_names(&self, c: Component) -> Vec<String> {
        self.novel(c).iter().map(|&i| self.names(c)[i].clone()).collect()
    }

    /// CRC32 of the exported file image (its footer).
    pub fn fingerprint(&self) -> Result<u32> {
        let bytes = self.to_bytes()?;
        let footer: [u8; 4] = bytes[bytes.len() - 4..].try_into().expect("4-byte footer");
        Ok(u32::from_le_bytes(footer))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (header, arrays) = self.encode_parts()?;
        container::encode(DATASET_KIND, header, &arrays)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::decode_container(container::decode(bytes, DATASET_KIND)?)
    }
}

const DATASET_KIND: &str = "egoprompt-dataset";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    seed: u64,
    spec: BenchmarkSpec,
    verb_names: Vec<String>,
    noun_names: Vec<String>,
    compat: Vec<Vec<bool>>,
    novel_verbs: Vec<usize>,
    novel_nouns: Vec<usize>,
    split_sizes: BTreeMap<String, usize>,
}

fn to_i32(v: &[usize]) -> Vec<i32> {
    v.iter().map(|&x| x as i32).collect()
}

fn from_i32(name: &str, v: &[i32], bound: usize) -> Result<Vec<usize>> {
    v.iter()
        .map(|&x| {
            if x < 0 || x as usize >= bound {
                Err(Error::Malformed(format!("{name}: value {x} outside 0..{bound}")))
            } else {
                Ok(x as usize)
            }
        })
        .collect()
}

impl SyntheticBenchmark {
    fn encode_parts(&self) -> Result<(serde_json::Value, Vec<NamedArray>)> {
        let header = DatasetHeader {
            seed: self.seed,
            spec: self.spec.clone(),
            verb_names: self.verb_names.clone(),
            noun_names: self.noun_names.clone(),
            compat: self.compat.clone(),
            novel_verbs: self.novel_verbs.clone(),
            novel_nouns: self.novel_nouns.clone(),
            split_sizes: self.splits.iter().map(|(s, d)| (s.name().to_string(), d.len())).collect(),
        };
        let mut arrays = Vec::new();
        for (s, d) in &self.splits {
            if d.is_empty() {
                continue;
            }
            let n = d.len();
            let name = s.name();
            arrays.push(NamedArray::f32(
                format!("{name}.tokens"),
                vec![n, d.frames, d.patches, d.dim],
                d.tokens.clone(),
            ));
            arrays.push(NamedArray::i32(format!("{name}.verb"), vec![n], to_i32(&d.verbs)));
            arrays.push(NamedArray::i32(format!("{name}.noun"), vec![n], to_i32(&d.nouns)));
            arrays.push(NamedArray::i32(
                format!("{name}.domain"),
                vec![n],
                d.domains.iter().map(|&x| x as i32).collect(),
            ));
            arrays.push(NamedArray::i32(format!("{name}.hoi_offset"), vec![n], to_i32(&d.hoi_offsets)));
        }
        Ok((serde_json::to_value(header)?, arrays))
    }

    fn decode_container(c: container::Container) -> Result<Self> {
        let h: DatasetHeader = serde_json::from_value(c.header.clone())
            .map_err(|e| Error::Malformed(format!("dataset header: {e}")))?;
        let spec = h.spec;
        let (nv, nn) = (h.verb_names.len(), h.noun_names.len());
        let mut splits = BTreeMap::new();
        for s in Split::ALL {
            let size = *h
                .split_sizes
                .get(s.name())
                .ok_or_else(|| Error::Malformed(format!("missing split {s}")))?;
            let mut d = Dataset::empty(s, &spec);
            if size > 0 {
                let name = s.name();
                let (shape, tokens) = c.f32(&format!("{name}.tokens"))?;
                let expected = [size, spec.frames, spec.patches, spec.dim];
                if shape != expected {
                    return Err(Error::dim("import_dataset", shape, &expected));
                }
                d.tokens = tokens.to_vec();
                let labels = |suffix: &str, bound: usize| -> Result<Vec<usize>> {
                    let key = format!("{name}.{suffix}");
                    let (shape, v) = c.i32(&key)?;
                    if shape != [size] {
                        return Err(Error::dim("import_dataset", shape, &[size]));
                    }
                    from_i32(&key, v, bound)
                };
                d.verbs = labels("verb", nv)?;
                d.nouns = labels("noun", nn)?;
                d.domains = labels("domain", 2)?.into_iter().map(|x| x as u8).collect();
                d.hoi_offsets = labels("hoi_offset", spec.patches)?;
            }
            splits.insert(s, d);
        }
        Ok(Self {
            seed: h.seed,
            spec,
            verb_names: h.verb_names,
            noun_names: h.noun_names,
            compat: h.compat,
            novel_verbs: h.novel_verbs,
            novel_nouns: h.novel_nouns,
            splits,
        })
    }
}

pub fn export_dataset(b: &SyntheticBenchmark, path: &Path) -> Result<()> {
    container::write_atomic(path, &b.to_bytes()?)
}

pub fn import_dataset(path: &Path) -> Result<SyntheticBenchmark> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    SyntheticBenchmark::from_bytes(&bytes)
}

/// Random orthonormal `d x d` matrix (Gram-Schmidt on Gaussian columns).
fn random_orthonormal(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

/// `R = Q B Q^T` with `B` rotating each consecutive plane by `angle`.
pub fn domain_rotation(seed: u64, d: usize, angle: f64) -> Vec<Vec<f64>> {
    let q = random_orthonormal(&mut rng_for(seed, 0x2000), d);
    let (c, s) = (angle.cos(), angle.sin());
    // columns of Q are q[i]; R = sum over planes of rotated outer products
    let mut r = vec![vec![0.0; d]; d];
    let mut i = 0;
    while i < d {
        if i + 1 < d {
            let (a, b) = (&q[i], &q[i + 1]);
            for x in 0..d {
                for y in 0..d {
                    r[x][y] += c * (a[x] * a[y] + b[x] * b[y]) + s * (b[x] * a[y] - a[x] * b[y]);
                }
            }
            i += 2;
        } else {
            let a = &q[i];
            for x in 0..d {
                for y in 0..d {
                    r[x][y] += a[x] * a[y];
                }
            }
            i += 1;
        }
    }
    r
}

fn pick_novel(rng: &mut ChaCha8Rng, n: usize, count: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..n).collect();
    all.shuffle(rng);
    let mut out = all[..count].to_vec();
    out.sort_unstable();
    out
}

fn has_partner(compat: &[Vec<bool>], v: usize, nouns: &[usize]) -> bool {
    nouns.iter().any(|&n| compat[v][n])
}

fn has_verb_partner(compat: &[Vec<bool>], n: usize, verbs: &[usize]) -> bool {
    verbs.iter().any(|&v| compat[v][n])
}

fn check_compat(compat: &[Vec<bool>], base_v: &[usize], base_n: &[usize]) -> Result<()> {
    let nv = compat.len();
    let nn = compat[0].len();
    let all_v: Vec<usize> = (0..nv).collect();
    let all_n: Vec<usize> = (0..nn).collect();
    for v in 0..nv {
        if !has_partner(compat, v, &all_n) {
            return Err(Error::Spec(format!("verb {v} has no compatible noun")));
        }
    }
    for n in 0..nn {
        if !has_verb_partner(compat, n, &all_v) {
            return Err(Error::Spec(format!("noun {n} has no compatible verb")));
        }
    }
    for &v in base_v {
        if !has_partner(compat, v, base_n) {
            return Err(Error::Spec(format!("base verb {v} has no base noun partner")));
        }
    }
    for &n in base_n {
        if !has_verb_partner(compat, n, base_v) {
            return Err(Error::Spec(format!("base noun {n} has no base verb partner")));
        }
    }
    Ok(())
}

fn complement(n: usize, held: &[usize]) -> Vec<usize> {
    (0..n).filter(|i| !held.contains(i)).collect()
}

/// Draws a compatibility matrix and repairs it so every label, and every
/// base label within the base set, has a partner.
fn draw_compat(rng: &mut ChaCha8Rng, spec: &BenchmarkSpec, base_v: &[usize], base_n: &[usize]) -> Vec<Vec<bool>> {
    let (nv, nn) = (spec.n_verbs, spec.n_nouns);
    let mut c: Vec<Vec<bool>> = (0..nv)
        .map(|_| (0..nn).map(|_| rng.gen_bool(spec.compat_density)).collect())
        .collect();
    for &v in base_v {
        if !has_partner(&c, v, base_n) {
            let n = base_n[rng.gen_range(0..base_n.len())];
            c[v][n] = true;
        }
    }
    for &n in base_n {
        if !has_verb_partner(&c, n, base_v) {
            let v = base_v[rng.gen_range(0..base_v.len())];
            c[v][n] = true;
        }
    }
    for v in 0..nv {
        if !c[v].iter().any(|&x| x) {
            c[v][rng.gen_range(0..nn)] = true;
        }
    }
    for n in 0..nn {
        if !(0..nv).any(|v| c[v][n]) {
            c[rng.gen_range(0..nv)][n] = true;
        }
    }
    c
}

struct Generator<'a> {
    spec: &'a BenchmarkSpec,
    verb_factors: Vec<Vec<f64>>,
    noun_factors: Vec<Vec<f64>>,
    background: Vec<Vec<f64>>,
    rotation: Vec<Vec<f64>>,
}

impl Generator<'_> {
    fn clip(&self, rng: &mut ChaCha8Rng, v: usize, n: usize, domain: u8) -> (Vec<f32>, usize) {
        let s = self.spec;
        let (nt, ns, d) = (s.frames, s.patches, s.dim);
        let clutter = s.clutter_per_frame();
        let hoi = ns - clutter;
        let offset = rng.gen_range(0..=ns - hoi);
        let token_noise = Normal::new(0.0, s.token_noise).expect("finite std");
        let shift_noise = Normal::new(0.0, s.domain_shift.noise_std).expect("finite std");
        let mut out = Vec::with_capacity(nt * ns * d);
        let mut tok = vec![0.0f64; d];
        for t in 0..nt {
            let ramp = s.verb_scale * (t + 1) as f64 / nt as f64;
            for p in 0..ns {
                if (offset..offset + hoi).contains(&p) {
                    for j in 0..d {
                        tok[j] = self.noun_factors[n][j] + ramp * self.verb_factors[v][j];
                    }
                } else {
                    let bg = &self.background[rng.gen_range(0..self.background.len())];
                    tok.copy_from_slice(bg);
                    if rng.gen_bool(s.distractor_prob) {
                        let other = &self.noun_factors[rng.gen_range(0..self.noun_factors.len())];
                        tok.iter_mut().zip(other).for_each(|(x, y)| *x += 0.7 * y);
                    }
                }
                for x in tok.iter_mut() {
                    *x += token_noise.sample(rng);
                }
                if domain == 1 {
                    let rotated: Vec<f64> = self
                        .rotation
                        .iter()
                        .map(|row| row.iter().zip(&tok).map(|(a, b)| a * b).sum::<f64>())
                        .collect();
                    tok.copy_from_slice(&rotated);
                    for x in tok.iter_mut() {
                        *x += shift_noise.sample(rng);
                    }
                }
                out.extend(tok.iter().map(|&x| x as f32));
            }
        }
        (out, offset)
    }
}

/// Generates all five splits from `(seed, spec)`.
pub fn make_benchmark(seed: u64, spec: &BenchmarkSpec) -> Result<SyntheticBenchmark> {
    spec.validate()?;
    let verb_names = spec.verb_labels();
    let noun_names = spec.noun_labels();
    let (nv, nn) = (spec.n_verbs, spec.n_nouns);

    let mut label_rng = rng_for(seed, 0x10);
    let (novel_verbs, novel_nouns, compat) = match &spec.compat {
        Some(c) => {
            // search for a held-out set that keeps the base labels connected
            let mut found = None;
            for _ in 0..256 {
                let hv = pick_novel(&mut label_rng, nv, spec.novel_count(nv));
                let hn = pick_novel(&mut label_rng, nn, spec.novel_count(nn));
                if check_compat(c, &complement(nv, &hv), &complement(nn, &hn)).is_ok() {
                    found = Some((hv, hn));
                    break;
                }
            }
            let (hv, hn) = match found {
                Some(x) => x,
                None => {
                    check_compat(c, &(0..nv).collect::<Vec<_>>(), &(0..nn).collect::<Vec<_>>())?;
                    return Err(Error::Spec("no held-out label set keeps every base label paired".into()));
                }
            };
            (hv, hn, c.clone())
        }
        None => {
            let hv = pick_novel(&mut label_rng, nv, spec.novel_count(nv));
            let hn = pick_novel(&mut label_rng, nn, spec.novel_count(nn));
            let c = draw_compat(&mut label_rng, spec, &complement(nv, &hv), &complement(nn, &hn));
            (hv, hn, c)
        }
    };
    let base_v = complement(nv, &novel_verbs);
    let base_n = complement(nn, &novel_nouns);
    check_compat(&compat, &base_v, &base_n)?;

    let vocab = Vocabulary::new(spec.dim);
    let mut bg_rng = rng_for(seed, 0x20);
    let bg_normal = Normal::new(0.0, 1.0 / (spec.dim as f64).sqrt()).expect("finite std");
    let generator = Generator {
        spec,
        verb_factors: verb_names.iter().map(|w| phrase_factor(&vocab, w)).collect(),
        noun_factors: noun_names.iter().map(|w| phrase_factor(&vocab, w)).collect(),
        background: (0..spec.background_pool)
            .map(|_| (0..spec.dim).map(|_| bg_normal.sample(&mut bg_rng)).collect())
            .collect(),
        rotation: domain_rotation(seed, spec.dim, spec.domain_shift.rotation_angle),
    };

    let base_pairs: Vec<(usize, usize)> = base_v
        .iter()
        .flat_map(|&v| base_n.iter().map(move |&n| (v, n)))
        .filter(|&(v, n)| compat[v][n])
        .collect();
    let novel_pairs: Vec<(usize, usize)> = (0..nv)
        .flat_map(|v| (0..nn).map(move |n| (v, n)))
        .filter(|&(v, n)| compat[v][n] && (novel_verbs.contains(&v) || novel_nouns.contains(&n)))
        .collect();

    let mut splits = BTreeMap::new();
    for split in Split::ALL {
        let pairs = if split == Split::NovelTest { &novel_pairs } else { &base_pairs };
        let mut d = Dataset::empty(split, spec);
        if !pairs.is_empty() {
            let mut rng = rng_for(seed, split.stream());
            let domain = split.domain();
            for _ in 0..spec.samples_per_split {
                let (v, n) = pairs[rng.gen_range(0..pairs.len())];
                let (tokens, offset) = generator.clip(&mut rng, v, n, domain);
                d.tokens.extend(tokens);
                d.verbs.push(v);
                d.nouns.push(n);
                d.domains.push(domain);
                d.hoi_offsets.push(offset);
            }
        }
        splits.insert(split, d);
    }

    Ok(SyntheticBenchmark {
        seed,
        spec: spec.clone(),
        verb_names,
        noun_names,
        compat,
        novel_verbs,
        novel_nouns,
        splits,
    })
}

/// Sum of the token rows of a (possibly multi-word) label name.
fn phrase_factor(vocab: &Vocabulary, name: &str) -> Vec<f64> {
    let mut acc = vec![0.0; vocab.dim()];
    for t in Vocabulary::tokenize(name) {
        acc.iter_mut().zip(vocab.embed(&t)).for_each(|(a, b)| *a += b);
    }
    acc
}

/// Empirical mutual information (nats) between two label sequences.
pub fn label_mutual_information(a: &[usize], b: &[usize], na: usize, nb: usize) -> f64 {
    let n = a.len() as f64;
    let mut joint = vec![vec![0.0; nb]; na];
    let mut pa = vec![0.0; na];
    let mut pb = vec![0.0; nb];
    for (&x, &y) in a.iter().zip(b) {
        joint[x][y] += 1.0 / n;
        pa[x] += 1.0 / n;
        pb[y] += 1.0 / n;
    }
    let mut mi = 0.0;
    for x in 0..na {
        for y in 0..nb {
            if joint[x][y] > 0.0 {
                mi += joint[x][y] * (joint[x][y] / (pa[x] * pb[y])).ln();
            }
        }
    }
    mi
}
