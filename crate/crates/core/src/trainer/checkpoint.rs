use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::component::Component;
use crate::container::{self, ArrayData, NamedArray};
use crate::error::{Error, Result};
use crate::model::{ModelState, ParamGroup, PromptInit};
use crate::scalar::Scalar;

use super::{LabelSpace, TrainConfig, Variant};

pub const CHECKPOINT_KIND: &str = "egoprompt-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    /// 1 after component prompt learning, 2 once the pool is trained.
    pub stage: u8,
    pub variant: Variant,
    pub config: TrainConfig,
    pub labels: LabelSpace,
    pub epochs_done: usize,
    pub steps_done: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub model: ModelState<T>,
}

fn counters_name(c: Component) -> String {
    format!("pool.counters.{}", c.name())
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays: Vec<NamedArray> = self
            .model
            .all_named_tensors()
            .into_iter()
            .map(|(name, t)| {
                let data = t.data().iter().map(|v| v.widen() as f32).collect();
                NamedArray::f32(name, t.shape().to_vec(), data)
            })
            .collect();
        for c in Component::ALL {
            let counts = &self.model.pool.counters[c.index()];
            let data = counts
                .iter()
                .map(|&n| i32::try_from(n).map_err(|_| Error::Usage(format!("selection count {n} overflows i32"))))
                .collect::<Result<Vec<_>>>()?;
            arrays.push(NamedArray::i32(counters_name(c), vec![counts.len()], data));
        }
        container::encode(CHECKPOINT_KIND, serde_json::to_value(&self.header)?, &arrays)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = container::decode(bytes, CHECKPOINT_KIND)?;
        let header: CheckpointHeader = serde_json::from_value(c.header.clone())
            .map_err(|e| Error::Malformed(format!("checkpoint header: {e}")))?;
        header.config.validate()?;
        let cfg = &header.config;
        let mut model = ModelState::<T>::init(
            cfg.seed,
            &cfg.encoder,
            cfg.pool_size,
            PromptInit::Gaussian,
            cfg.templates(),
        )?;
        let expected = ParamGroup::ALL.iter().map(|&g| model.param_count(g)).sum::<usize>();
        let mut restored = 0;
        for group in ParamGroup::ALL {
            let names: Vec<String> = model.named_tensors(group).into_iter().map(|(n, _)| n).collect();
            for (name, t) in names.iter().zip(model.tensors_mut(group)) {
                let (shape, data) = c.f32(name)?;
                if shape != t.shape() {
                    return Err(Error::dim("load_checkpoint", shape, t.shape()));
                }
                t.data_mut()
                    .iter_mut()
                    .zip(data)
                    .for_each(|(x, &v)| *x = T::of(v as f64));
                restored += data.len();
            }
        }
        debug_assert_eq!(restored, expected);
        for comp in Component::ALL {
            let (shape, data) = c.i32(&counters_name(comp))?;
            if shape != [cfg.pool_size] {
                return Err(Error::dim("load_checkpoint", shape, &[cfg.pool_size]));
            }
            if let Some(bad) = data.iter().find(|&&n| n < 0) {
                return Err(Error::Malformed(format!("negative selection count {bad}")));
            }
            model.pool.counters[comp.index()] = data.iter().map(|&n| n as u64).collect();
        }
        let known = model.all_named_tensors().len() + 2;
        if c.arrays.len() != known {
            let extra: Vec<&str> = c
                .arrays
                .iter()
                .map(|a| a.name.as_str())
                .filter(|n| !n.starts_with("pool.counters.") && !model.all_named_tensors().iter().any(|(m, _)| m == n))
                .collect();
            return Err(Error::Malformed(format!("unexpected arrays in checkpoint: {extra:?}")));
        }
        for a in &c.arrays {
            if let ArrayData::F32(v) = &a.data {
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Malformed(format!("non-finite values in {}", a.name)));
                }
            }
        }
        Ok(Self { header, model })
    }
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    container::write_atomic(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
