use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Batches of indices into the record list handed to [`plan_batches`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub batches: Vec<Vec<usize>>,
}

impl BatchPlan {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }
}

/// Length-binned batching over `(id, framed_length)` pairs.
///
/// Shuffles, stable-sorts by length so equal lengths keep their shuffled
/// order, greedily fills batches under both caps, then shuffles batch order.
pub fn plan_batches(
    records: &[(&str, usize)],
    max_batch_bin: usize,
    max_batch_size: usize,
    rng: &mut Rng,
) -> Result<BatchPlan> {
    if max_batch_size == 0 {
        return Err(Error::contract("max_batch_size must be ≥ 1"));
    }
    if let Some(&(id, len)) = records.iter().find(|(_, len)| *len > max_batch_bin) {
        return Err(Error::OversizeRecord {
            id: id.to_string(),
            len,
            cap: max_batch_bin,
        });
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| records[i].1);

    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut cur_len = 0;
    for i in order {
        let len = records[i].1;
        if !cur.is_empty() && (cur.len() == max_batch_size || cur_len + len > max_batch_bin) {
            batches.push(std::mem::take(&mut cur));
            cur_len = 0;
        }
        cur.push(i);
        cur_len += len;
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches.shuffle(rng);
    Ok(BatchPlan { batches })
}
