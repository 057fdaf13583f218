use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Cohort;
use crate::error::{Error, Result};

/// Shuffled record indices split by whether the event is observed.
fn strata(cohort: &Cohort, rng: &mut ChaCha8Rng) -> [Vec<usize>; 2] {
    let (mut with, mut without): (Vec<usize>, Vec<usize>) =
        (0..cohort.len()).partition(|&i| cohort.records()[i].event.start.is_some());
    with.shuffle(rng);
    without.shuffle(rng);
    [with, without]
}

/// Patient-level train/test split, stratified on event occurrence.
pub fn split(cohort: &Cohort, test_fraction: f64, seed: u64) -> Result<(Cohort, Cohort)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for stratum in strata(cohort, &mut rng) {
        let n_test = (stratum.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&stratum[..n_test]);
        train.extend_from_slice(&stratum[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((cohort.subset(&train), cohort.subset(&test)))
}

/// `k` stratified (train, validation) folds whose validation parts
/// partition the cohort.
pub fn kfold(cohort: &Cohort, k: usize, seed: u64) -> Result<Vec<(Cohort, Cohort)>> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    if cohort.len() < k {
        return Err(Error::Config(format!(
            "cannot split {} records into {k} folds",
            cohort.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0usize; cohort.len()];
    let mut position = 0;
    for stratum in strata(cohort, &mut rng) {
        for i in stratum {
            fold_of[i] = position % k;
            position += 1;
        }
    }
    Ok((0..k)
        .map(|f| {
            let (val, train): (Vec<usize>, Vec<usize>) =
                (0..cohort.len()).partition(|&i| fold_of[i] == f);
            (cohort.subset(&train), cohort.subset(&val))
        })
        .collect())
}
