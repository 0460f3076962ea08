//! Unified prompt pool: top-k cosine retrieval, attention fusion and
//! selection statistics.

use crate::component::Component;
use crate::error::{Error, Result};
use crate::init::{rng_for, uniform};
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;

/// `P` query/value pairs plus per-component selection statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptPool<T> {
    /// `[P, d]`
    pub queries: Tensor<T>,
    /// `[P, d]`
    pub values: Tensor<T>,
    /// Integer selection counts, indexed by [`Component::index`].
    pub counters: [Vec<u64>; 2],
    /// Accumulated attention mass per prompt.
    pub soft_freq: [Vec<f64>; 2],
}

/// Affine `2d -> d` fusion map followed by L2 normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionProjector<T> {
    /// `[2d, d]`
    pub weight: Tensor<T>,
    /// `[d]`
    pub bias: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct PoolVars {
    pub queries: Var,
    pub values: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ProjectorVars {
    pub weight: Var,
    pub bias: Var,
}

/// Top-k retrieval on a tape. `weights` is the `[k]` attention vector.
#[derive(Clone, Debug)]
pub struct RetrievalVars {
    pub component: Component,
    pub indices: Vec<usize>,
    pub weights: Var,
}

/// Materialized retrieval result.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult<T> {
    pub component: Component,
    /// Selected prompt ids, by descending similarity.
    pub indices: Vec<usize>,
    pub weights: Vec<T>,
}

impl<T: Scalar> PromptPool<T> {
    /// Queries and values uniform in `±1/sqrt(d)`; counters zeroed.
    pub fn init(size: usize, dim: usize, seed: u64) -> Result<Self> {
        if size == 0 {
            return Err(Error::param("pool_size", "must be at least 1"));
        }
        if dim == 0 {
            return Err(Error::param("dim", "must be at least 1"));
        }
        let mut rng = rng_for(seed, 0x200);
        let bound = 1.0 / (dim as f64).sqrt();
        Ok(Self {
            queries: uniform(&mut rng, &[size, dim], bound),
            values: uniform(&mut rng, &[size, dim], bound),
            counters: [vec![0; size], vec![0; size]],
            soft_freq: [vec![0.0; size], vec![0.0; size]],
        })
    }

    pub fn size(&self) -> usize {
        self.queries.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.queries.cols()
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> PoolVars {
        PoolVars {
            queries: tape.leaf(self.queries.clone(), trainable),
            values: tape.leaf(self.values.clone(), trainable),
        }
    }

    pub fn cast<U: Scalar>(&self) -> PromptPool<U> {
        PromptPool {
            queries: self.queries.cast(),
            values: self.values.cast(),
            counters: self.counters.clone(),
            soft_freq: self.soft_freq.clone(),
        }
    }

    /// Off-tape retrieval of `f` (length `d`).
    pub fn retrieve(&self, component: Component, f: &[T], k: usize, tau_pool: f64) -> Result<RetrievalResult<T>> {
        let mut tape = Tape::new();
        let pv = self.bind(&mut tape, false);
        let fv = tape.constant(Tensor::new(vec![f.len()], f.to_vec())?);
        let r = retrieve_topk(&mut tape, component, fv, &pv, k, tau_pool)?;
        Ok(RetrievalResult {
            component,
            indices: r.indices,
            weights: tape.value(r.weights).data().to_vec(),
        })
    }

    /// Adds one to the counter of every selected prompt and the attention
    /// weight to its soft frequency.
    pub fn record_selection<W: Scalar>(&mut self, component: Component, indices: &[usize], weights: &[W]) {
        let c = component.index();
        for (&i, w) in indices.iter().zip(weights) {
            self.counters[c][i] += 1;
            self.soft_freq[c][i] += w.widen();
        }
    }

    pub fn record(&mut self, r: &RetrievalResult<T>) {
        self.record_selection(r.component, &r.indices, &r.weights);
    }

    pub fn reset_statistics(&mut self) {
        for c in 0..2 {
            self.counters[c].iter_mut().for_each(|v| *v = 0);
            self.soft_freq[c].iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Mean absolute off-diagonal cosine similarity within the queries and
    /// within the values, averaged over the two; zero for `P < 2`.
    pub fn mean_abs_cos(&self) -> f64 {
        let p = self.size();
        if p < 2 {
            return 0.0;
        }
        let mean_for = |t: &Tensor<T>| {
            let rows: Vec<Vec<f64>> = (0..p).map(|i| t.row(i).iter().map(|x| x.widen()).collect()).collect();
            let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
            let mut acc = 0.0;
            for i in 0..p {
                for j in 0..p {
                    if i != j && norms[i] > 0.0 && norms[j] > 0.0 {
                        let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                        acc += (dot / (norms[i] * norms[j])).abs();
                    }
                }
            }
            acc / (p * (p - 1)) as f64
        };
        0.5 * (mean_for(&self.queries) + mean_for(&self.values))
    }

    /// Shannon entropy (nats) of the normalized selection counts.
    pub fn selection_entropy(&self, component: Component) -> Result<f64> {
        entropy_of_counts(&self.counters[component.index()])
    }
}

pub fn entropy_of_counts(counts: &[u64]) -> Result<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Usage("selection entropy of all-zero counters".into()));
    }
    let total = total as f64;
    Ok(counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum())
}

impl<T: Scalar> FusionProjector<T> {
    /// Weight uniform in `±1/sqrt(2d)`, zero bias.
    pub fn init(dim: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, 0x300);
        Self {
            weight: uniform(&mut rng, &[2 * dim, dim], 1.0 / ((2 * dim) as f64).sqrt()),
            bias: Tensor::zeros(vec![dim]),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> ProjectorVars {
        ProjectorVars {
            weight: tape.leaf(self.weight.clone(), trainable),
            bias: tape.leaf(self.bias.clone(), trainable),
        }
    }

    pub fn cast<U: Scalar>(&self) -> FusionProjector<U> {
        FusionProjector {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// Indices of the `k` largest scores, by descending score; ties go to the
/// lower index.
pub fn select_topk<T: Scalar>(scores: &[T], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::param("k", format!("must be in 1..={}, got {k}", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    Ok(order)
}

fn check_tau(tau_pool: f64) -> Result<()> {
    if !(tau_pool > 0.0 && tau_pool.is_finite()) {
        return Err(Error::param("tau_pool", format!("must be positive, got {tau_pool}")));
    }
    Ok(())
}

/// Selects the `k` queries most cosine-similar to `f` and returns softmax
/// weights over `cos / tau_pool` restricted to that set.
pub fn retrieve_topk<T: Scalar>(
    tape: &mut Tape<T>,
    component: Component,
    f: Var,
    pool: &PoolVars,
    k: usize,
    tau_pool: f64,
) -> Result<RetrievalVars> {
    check_tau(tau_pool)?;
    let p = tape.shape(pool.queries)[0];
    if k == 0 || k > p {
        return Err(Error::param("k", format!("must be in 1..={p}, got {k}")));
    }
    let cos = tape.cosine_against_rows(f, pool.queries)?;
    let indices = select_topk(tape.value(cos).data(), k)?;
    weights_for(tape, component, cos, indices, tau_pool)
}

/// Same as [`retrieve_topk`] with a given index set, used to replay a
/// selection at another precision.
pub fn retrieve_with_indices<T: Scalar>(
    tape: &mut Tape<T>,
    component: Component,
    f: Var,
    pool: &PoolVars,
    indices: &[usize],
    tau_pool: f64,
) -> Result<RetrievalVars> {
    check_tau(tau_pool)?;
    let cos = tape.cosine_against_rows(f, pool.queries)?;
    weights_for(tape, component, cos, indices.to_vec(), tau_pool)
}

fn weights_for<T: Scalar>(
    tape: &mut Tape<T>,
    component: Component,
    cos: Var,
    indices: Vec<usize>,
    tau_pool: f64,
) -> Result<RetrievalVars> {
    let sel = tape.gather_rows(cos, &indices)?;
    let weights = tape.softmax_rows(sel, T::of(tau_pool))?;
    Ok(RetrievalVars {
        component,
        indices,
        weights,
    })
}

/// `f' = sum_i alpha_i v_i` over the selected values.
pub fn fuse_patterns<T: Scalar>(tape: &mut Tape<T>, r: &RetrievalVars, pool: &PoolVars) -> Result<Var> {
    let k = r.indices.len();
    let vsel = tape.gather_rows(pool.values, &r.indices)?;
    let d = tape.shape(vsel)[1];
    let w = tape.reshape(r.weights, vec![1, k])?;
    let out = tape.matmul(w, vsel)?;
    tape.reshape(out, vec![d])
}

/// `f_s = normalize(W [f_v'; f_n'] + b)`.
pub fn project_fusion<T: Scalar>(tape: &mut Tape<T>, fv: Var, fn_: Var, proj: &ProjectorVars) -> Result<Var> {
    let d = tape.value(fv).len();
    if tape.shape(fv) != [d] || tape.shape(fn_) != [d] {
        return Err(Error::dim("project_fusion", tape.shape(fv), tape.shape(fn_)));
    }
    let a = tape.reshape(fv, vec![1, d])?;
    let b = tape.reshape(fn_, vec![1, d])?;
    let x = tape.concat_cols(&[a, b])?;
    let h = tape.matmul(x, proj.weight)?;
    let h = tape.add_row(h, proj.bias)?;
    let h = tape.l2_normalize_rows(h)?;
    let out_d = tape.shape(h)[1];
    tape.reshape(h, vec![out_d])
}

/// Mean per-prompt attention mass over a window of retrievals: `[P]`.
pub fn soft_frequency<T: Scalar>(tape: &mut Tape<T>, retrievals: &[RetrievalVars], pool_size: usize) -> Result<Var> {
    if retrievals.is_empty() {
        return Err(Error::Usage("empty soft-frequency window".into()));
    }
    let mut acc: Option<Var> = None;
    for r in retrievals {
        let s = tape.scatter_add(r.weights, &r.indices, pool_size)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    let total = acc.expect("non-empty window");
    Ok(tape.scale(total, T::of(1.0 / retrievals.len() as f64)))
}
