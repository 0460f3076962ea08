//! Training losses: component cross-entropy, knowledge-guided loss, the two
//! pool regularizers and the stage composites.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::pool::{select_topk, PoolVars};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_freq: f64,
    pub lambda_orth: f64,
    pub lambda_kg: f64,
    pub tau_cls: f64,
    /// Size of the most/least used sets in the frequency term; `None` means
    /// the retrieval `k`.
    pub k_freq: Option<usize>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_freq: 1.0,
            lambda_orth: 1.0,
            lambda_kg: 1.0,
            tau_cls: 0.07,
            k_freq: None,
        }
    }
}

impl LossWeights {
    pub fn validate(&self, pool_size: usize) -> Result<()> {
        for (key, v) in [
            ("loss.lambda_freq", self.lambda_freq),
            ("loss.lambda_orth", self.lambda_orth),
            ("loss.lambda_kg", self.lambda_kg),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config {
                    key: key.into(),
                    reason: format!("must be a finite non-negative number, got {v}"),
                });
            }
        }
        if !(self.tau_cls > 0.0 && self.tau_cls.is_finite()) {
            return Err(Error::Config {
                key: "loss.tau_cls".into(),
                reason: format!("must be positive, got {}", self.tau_cls),
            });
        }
        if let Some(k) = self.k_freq {
            if k == 0 || k > pool_size {
                return Err(Error::Config {
                    key: "loss.k_freq".into(),
                    reason: format!("must be in 1..={pool_size}, got {k}"),
                });
            }
        }
        Ok(())
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= classes) {
        Some(&label) => Err(Error::Label { label, classes }),
        None => Ok(()),
    }
}

/// Cosine logits of every row of `feats` (`[B, d]`) against every row of
/// `table` (`[N, d]`): `[B, N]`.
pub fn cosine_logits<T: Scalar>(tape: &mut Tape<T>, feats: Var, table: Var) -> Result<Var> {
    let f = tape.l2_normalize_rows(feats)?;
    let w = tape.l2_normalize_rows(table)?;
    let wt = tape.transpose(w)?;
    tape.matmul(f, wt)
}

/// `-ln softmax(cos(f, w_j) / tau)_y` for a single feature `f` (`[d]`).
pub fn component_ce_loss<T: Scalar>(tape: &mut Tape<T>, f: Var, table: Var, y: usize, tau_cls: f64) -> Result<Var> {
    let d = tape.value(f).len();
    let f2 = tape.reshape(f, vec![1, d])?;
    batch_ce_loss(tape, f2, table, &[y], tau_cls)
}

/// Batch mean of the component cross-entropy; `feats` is `[B, d]`.
pub fn batch_ce_loss<T: Scalar>(
    tape: &mut Tape<T>,
    feats: Var,
    table: Var,
    labels: &[usize],
    tau_cls: f64,
) -> Result<Var> {
    let b = tape.shape(feats)[0];
    let n = tape.shape(table)[0];
    if labels.len() != b {
        return Err(Error::dim("batch_ce_loss", &[b], &[labels.len()]));
    }
    check_labels(labels, n)?;
    let logits = cosine_logits(tape, feats, table)?;
    let logp = tape.log_softmax_rows(logits, T::of(tau_cls))?;
    let flat = tape.reshape(logp, vec![b * n])?;
    let idx: Vec<usize> = labels.iter().enumerate().map(|(i, &y)| i * n + y).collect();
    let picked = tape.gather_rows(flat, &idx)?;
    let mean = tape.mean(picked);
    Ok(tape.scale(mean, -T::one()))
}

/// Mean over classes of the squared L2 distance between corresponding rows.
pub fn kg_loss<T: Scalar>(tape: &mut Tape<T>, learned: Var, frozen: Var) -> Result<Var> {
    if tape.shape(learned) != tape.shape(frozen) {
        return Err(Error::dim("kg_loss", tape.shape(learned), tape.shape(frozen)));
    }
    let rows = tape.shape(learned)[0];
    let diff = tape.sub(learned, frozen)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, T::of(1.0 / rows as f64)))
}

/// Most- and least-used prompt sets of a soft-frequency vector. The most
/// used set breaks ties toward the lower index, the least used toward the
/// higher index.
pub fn frequency_extremes(s: &[f64], k_freq: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let max_set = select_topk(s, k_freq)?;
    let neg: Vec<f64> = s.iter().rev().map(|v| -v).collect();
    let p = s.len();
    let min_set = select_topk(&neg, k_freq)?.into_iter().map(|i| p - 1 - i).collect();
    Ok((max_set, min_set))
}

/// `sum_{p in S_max} s_p - sum_{p in S_min} s_p`, summed over the given
/// per-component windows (each `[P]`).
pub fn freq_reg_loss<T: Scalar>(tape: &mut Tape<T>, windows: &[Var], k_freq: usize) -> Result<Var> {
    if windows.is_empty() {
        return Err(Error::Usage("frequency regularizer over no windows".into()));
    }
    let mut terms = Vec::with_capacity(windows.len());
    for &w in windows {
        let values = tape.value(w).to_f64_vec();
        let (max_set, min_set) = frequency_extremes(&values, k_freq)?;
        let hi = tape.gather_rows(w, &max_set)?;
        let hi = tape.sum(hi);
        let lo = tape.gather_rows(w, &min_set)?;
        let lo = tape.sum(lo);
        terms.push(tape.sub(hi, lo)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// Off-tape value of one frequency window's regularizer.
pub fn freq_reg_value(s: &[f64], k_freq: usize) -> Result<f64> {
    let (max_set, min_set) = frequency_extremes(s, k_freq)?;
    let hi: f64 = max_set.iter().map(|&i| s[i]).sum();
    let lo: f64 = min_set.iter().map(|&i| s[i]).sum();
    Ok(-(lo - hi))
}

fn mean_abs_offdiag_cos<T: Scalar>(tape: &mut Tape<T>, x: Var, mask: Var, p: usize) -> Result<Var> {
    let n = tape.l2_normalize_rows(x)?;
    let nt = tape.transpose(n)?;
    let g = tape.matmul(n, nt)?;
    let g = tape.abs(g);
    let g = tape.mul(g, mask)?;
    let s = tape.sum(g);
    Ok(tape.scale(s, T::of(1.0 / (p * (p - 1)) as f64)))
}

/// `(1 / (P (P - 1))) sum_{i != j} (|cos(q_i, q_j)| + |cos(v_i, v_j)|)`.
pub fn orth_loss<T: Scalar>(tape: &mut Tape<T>, pool: &PoolVars) -> Result<Var> {
    let p = tape.shape(pool.queries)[0];
    if p < 2 {
        return Err(Error::param("pool_size", format!("orthogonality needs at least 2 prompts, got {p}")));
    }
    let mut mask = Tensor::<T>::filled(vec![p, p], T::one());
    for i in 0..p {
        mask.data_mut()[i * p + i] = T::zero();
    }
    let mask = tape.constant(mask);
    let q = mean_abs_offdiag_cos(tape, pool.queries, mask, p)?;
    let v = mean_abs_offdiag_cos(tape, pool.values, mask, p)?;
    tape.add(q, v)
}

/// Per-component Stage-1 inputs for a batch.
#[derive(Clone, Copy, Debug)]
pub struct ComponentBatch<'a> {
    /// `[B, d]` component features.
    pub feats: Var,
    /// Learned class table `[N, d]`.
    pub table: Var,
    /// Frozen template table `[N, d]`.
    pub frozen: Var,
    pub labels: &'a [usize],
}

#[derive(Clone, Copy, Debug)]
pub struct Stage1Terms {
    pub total: Var,
    pub ce: [Var; 2],
    pub kg: [Var; 2],
}

/// `mean_b (CE_v + CE_n) + lambda_kg (KG_v + KG_n)`.
pub fn stage1_loss<T: Scalar>(
    tape: &mut Tape<T>,
    verb: &ComponentBatch,
    noun: &ComponentBatch,
    weights: &LossWeights,
) -> Result<Stage1Terms> {
    let ce_v = batch_ce_loss(tape, verb.feats, verb.table, verb.labels, weights.tau_cls)?;
    let ce_n = batch_ce_loss(tape, noun.feats, noun.table, noun.labels, weights.tau_cls)?;
    let kg_v = kg_loss(tape, verb.table, verb.frozen)?;
    let kg_n = kg_loss(tape, noun.table, noun.frozen)?;
    let ce = tape.add(ce_v, ce_n)?;
    let kg = tape.add(kg_v, kg_n)?;
    let kg_w = tape.scale(kg, T::of(weights.lambda_kg));
    let total = tape.add(ce, kg_w)?;
    Ok(Stage1Terms {
        total,
        ce: [ce_v, ce_n],
        kg: [kg_v, kg_n],
    })
}

/// Stage-2 inputs for a batch.
#[derive(Clone, Debug)]
pub struct UnifiedBatch<'a> {
    /// `[B, d]` fused features `f_s`.
    pub fused: Var,
    pub verb_table: Var,
    pub noun_table: Var,
    pub verb_labels: &'a [usize],
    pub noun_labels: &'a [usize],
    /// Per-component soft-frequency windows, each `[P]`.
    pub windows: [Var; 2],
    pub pool: PoolVars,
}

#[derive(Clone, Copy, Debug)]
pub struct UnifiedTerms {
    pub total: Var,
    pub ce: [Var; 2],
    pub freq: Var,
    pub orth: Var,
}

/// `mean_b (CE(f_s, W^v) + CE(f_s, W^n)) + lambda_freq L_freq + lambda_orth L_orth`.
pub fn unified_loss<T: Scalar>(
    tape: &mut Tape<T>,
    batch: &UnifiedBatch,
    weights: &LossWeights,
    k_freq: usize,
) -> Result<UnifiedTerms> {
    let ce_v = batch_ce_loss(tape, batch.fused, batch.verb_table, batch.verb_labels, weights.tau_cls)?;
    let ce_n = batch_ce_loss(tape, batch.fused, batch.noun_table, batch.noun_labels, weights.tau_cls)?;
    let freq = freq_reg_loss(tape, &batch.windows, k_freq)?;
    let orth = orth_loss(tape, &batch.pool)?;
    let ce = tape.add(ce_v, ce_n)?;
    let fw = tape.scale(freq, T::of(weights.lambda_freq));
    let ow = tape.scale(orth, T::of(weights.lambda_orth));
    let reg = tape.add(fw, ow)?;
    let total = tape.add(ce, reg)?;
    Ok(UnifiedTerms {
        total,
        ce: [ce_v, ce_n],
        freq,
        orth,
    })
}
