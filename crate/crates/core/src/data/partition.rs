//! Client partitioning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Result, Sample};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub client_counts: Vec<usize>,
    pub test_count: usize,
    pub seed: u64,
}

/// Named client layouts: `(name, client counts, test count)`.
pub const PRESETS: &[(&str, &[usize], usize)] = &[
    ("blastocyst-4-client", &[110, 90, 200, 300], 101),
    ("ham10k-10-client", &[1176, 588, 305, 941, 1058, 1294, 648, 942, 883, 1132], 1000),
    ("kvasir-4-client", &[125, 175, 275, 325], 100),
    ("synthetic-4client", &[55, 45, 100, 150], 50),
];

impl PartitionSpec {
    pub fn preset(name: &str, seed: u64) -> Option<Self> {
        PRESETS
            .iter()
            .find(|(n, ..)| *n == name)
            .map(|(_, counts, test)| Self { client_counts: counts.to_vec(), test_count: *test, seed })
    }

    pub fn total(&self) -> usize {
        self.client_counts.iter().sum::<usize>() + self.test_count
    }
}

/// Seeded shuffle, then contiguous blocks: one per client in order, then
/// the test set. Samples beyond the spec's total are left out.
pub fn partition_dataset(samples: &[Sample], spec: &PartitionSpec) -> Result<(Vec<Vec<Sample>>, Vec<Sample>)> {
    if spec.total() > samples.len() {
        return Err(DataError::Config(format!("partition needs {} samples, dataset has {}", spec.total(), samples.len())));
    }
    if spec.client_counts.iter().any(|&c| c == 0) {
        return Err(DataError::Config("every client needs at least one sample".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut cursor = order.into_iter();
    let mut take = |k: usize| cursor.by_ref().take(k).map(|i| samples[i].clone()).collect::<Vec<_>>();
    let shards = spec.client_counts.iter().map(|&c| take(c)).collect();
    let test = take(spec.test_count);
    Ok((shards, test))
}

/// Seeded train/validation split keeping `round(0.85 n)` for training.
pub fn train_val_split(shard: &[Sample], seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let n_train = (shard.len() * 85 + 50) / 100;
    let mut order: Vec<usize> = (0..shard.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (tr, va) = order.split_at(n_train);
    (tr.iter().map(|&i| shard[i].clone()).collect(), va.iter().map(|&i| shard[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dummy(n: usize) -> Vec<Sample> {
        (0..n).map(|i| Sample::new(format!("s{i}"), 1, 1, 1, vec![0.0], vec![0]).unwrap()).collect()
    }

    #[test]
    fn blastocyst_preset_consumes_all() {
        let spec = PartitionSpec::preset("blastocyst-4-client", 3).unwrap();
        assert_eq!(spec.total(), 801);
        let data = dummy(801);
        let (shards, test) = partition_dataset(&data, &spec).unwrap();
        assert_eq!(shards.iter().map(Vec::len).collect::<Vec<_>>(), vec![110, 90, 200, 300]);
        assert_eq!(test.len(), 101);
        let mut ids: Vec<_> = shards.iter().flatten().chain(&test).map(|s| s.id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 801);
    }

    #[test]
    fn split_85_15() {
        let (tr, va) = train_val_split(&dummy(200), 1);
        assert_eq!((tr.len(), va.len()), (170, 30));
    }

    #[test]
    fn over_budget_is_config_error() {
        let spec = PartitionSpec { client_counts: vec![3, 3], test_count: 1, seed: 0 };
        assert!(matches!(partition_dataset(&dummy(6), &spec), Err(DataError::Config(_))));
    }
}
