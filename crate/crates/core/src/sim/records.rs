//! Deterministic record streams for stage outputs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use crate::datastore::Record;
use crate::model::{DataModel, KEY_SPACE};

/// Odd multiplier scattering Zipf ranks over the key space; multiplication
/// by an odd number is a bijection modulo a power of two.
const SCATTER: u64 = 0x9E37_79B1;

pub fn stream_rng(seed: u64, job: u32, stage: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((job as u64) << 32) | stage as u64);
    rng
}

/// The full output stream of one stage, in emission order.
pub fn generate_records(model: &DataModel, seed: u64, job: u32, stage: u32) -> Vec<Record> {
    let n = model.records();
    let bytes = model.per_record_bytes();
    let mut rng = stream_rng(seed, job, stage);
    if n == 0 {
        return Vec::new();
    }
    if !model.segments().is_empty() {
        return segmented(model, &mut rng);
    }
    let [lo, hi] = model.values();
    let zipf = (model.key_skew() > 0.0).then(|| Zipf::new(KEY_SPACE as f64, model.key_skew()).expect("valid zipf"));
    (0..n)
        .map(|_| {
            let key = match &zipf {
                Some(z) => ((z.sample(&mut rng) as u64 - 1).wrapping_mul(SCATTER)) % KEY_SPACE,
                None => rng.random_range(0..KEY_SPACE),
            };
            Record {
                key,
                bytes,
                value: rng.random_range(lo..hi),
            }
        })
        .collect()
}

/// Splits the record count over segments by weight (largest remainder),
/// draws keys and values uniformly inside each segment, then shuffles.
fn segmented(model: &DataModel, rng: &mut ChaCha8Rng) -> Vec<Record> {
    let n = model.records();
    let segs = model.segments();
    let total: u64 = segs.iter().map(|s| s.weight).sum();
    let mut counts: Vec<u64> = segs
        .iter()
        .map(|s| (n as u128 * s.weight as u128 / total as u128) as u64)
        .collect();
    let mut order: Vec<usize> = (0..segs.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse((n as u128 * segs[i].weight as u128) % total as u128));
    let mut missing = n - counts.iter().sum::<u64>();
    for &i in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        counts[i] += 1;
        missing -= 1;
    }
    let mut out = Vec::with_capacity(n as usize);
    for (s, &c) in segs.iter().zip(&counts) {
        for _ in 0..c {
            out.push(Record {
                key: rng.random_range(s.keys[0]..s.keys[1]),
                bytes: model.per_record_bytes(),
                value: rng.random_range(s.values[0]..s.values[1]),
            });
        }
    }
    out.shuffle(rng);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{granule_index_for_key, KeySegment};

    #[test]
    fn deterministic_per_seed_and_stage() {
        let m = DataModel::new(1000, 100, 1.1).unwrap();
        assert_eq!(generate_records(&m, 1, 0, 0), generate_records(&m, 1, 0, 0));
        assert_ne!(generate_records(&m, 1, 0, 0), generate_records(&m, 1, 0, 1));
        assert_ne!(generate_records(&m, 2, 0, 0), generate_records(&m, 1, 0, 0));
    }

    #[test]
    fn totals_match_model() {
        let m = DataModel::new(5000, 500, 0.8).unwrap();
        let r = generate_records(&m, 3, 1, 2);
        assert_eq!(r.len(), 500);
        assert_eq!(r.iter().map(|r| r.bytes).sum::<u64>(), 5000);
        assert!(r.iter().all(|r| r.key < KEY_SPACE));
    }

    #[test]
    fn uniform_keys_spread_evenly() {
        let n = 64u32;
        let m = DataModel::new(100_000, 100_000, 0.0).unwrap();
        let mut counts = vec![0f64; n as usize];
        for r in generate_records(&m, 9, 0, 0) {
            counts[granule_index_for_key(r.key, n, KEY_SPACE) as usize] += 1.0;
        }
        let mean = 100_000.0 / n as f64;
        let sigma = (mean * (1.0 - 1.0 / n as f64)).sqrt();
        assert!(counts.iter().all(|c| (c - mean).abs() <= 3.0 * sigma + 1.0));
    }

    #[test]
    fn segments_are_exact() {
        let seg = |k0, w| KeySegment {
            keys: [k0, k0 + 10],
            weight: w,
            values: [5, 6],
        };
        let m = DataModel::new(70, 7, 0.0)
            .unwrap()
            .with_segments(vec![seg(0, 1), seg(100, 2)])
            .unwrap();
        let r = generate_records(&m, 0, 0, 0);
        let low = r.iter().filter(|r| r.key < 10).count();
        assert_eq!((low, r.len() - low), (2, 5));
        assert!(r.iter().all(|r| r.value == 5));
    }
}
