use rand::seq::SliceRandom;

use super::{ImageRecord, Manifest, Origin, Split, StrokeClass, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::seed;

/// Number of test records for a class of `n` real records:
/// `round((1 − train_fraction) · n)`, halves rounded away from zero.
pub fn test_count(n: usize, train_fraction: f64) -> usize {
    ((1.0 - train_fraction) * n as f64).round() as usize
}

/// Assigns train/test per record. Real records are split per class by a
/// seeded shuffle; synthetic records always go to train.
pub fn assign_splits(records: &[ImageRecord], train_fraction: f64, seed: u64) -> Result<Vec<Split>> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Parameter(format!(
            "train_fraction {train_fraction} outside (0, 1)"
        )));
    }
    let mut splits = vec![Split::Train; records.len()];
    for class in StrokeClass::ALL {
        let mut members: Vec<usize> = records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label == class && r.origin == Origin::Real)
            .map(|(i, _)| i)
            .collect();
        if members.len() < 2 {
            return Err(Error::Stratification {
                class: class.dir_name().to_string(),
                count: members.len(),
            });
        }
        let mut rng = seed::rng(seed::mix(&[seed, class.id() as u64]));
        members.shuffle(&mut rng);
        let n_test = test_count(members.len(), train_fraction);
        for &i in &members[..n_test] {
            splits[i] = Split::Test;
        }
    }
    Ok(splits)
}

/// Stratified train/test split. The outputs are disjoint, jointly cover `m`
/// and keep the input record order.
pub fn stratified_split(m: &Manifest, train_fraction: f64, seed: u64) -> Result<(Manifest, Manifest)> {
    let splits = assign_splits(m.records(), train_fraction, seed)?;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (r, s) in m.records().iter().zip(splits) {
        let rec = ImageRecord {
            split: s,
            ..r.clone()
        };
        match s {
            Split::Test => test.push(rec),
            _ => train.push(rec),
        }
    }
    Ok((
        Manifest::derived(m.root(), train),
        Manifest::derived(m.root(), test),
    ))
}

/// Expected `(train, test)` per-class counts for the given real counts.
pub fn expected_counts(counts: [usize; NUM_CLASSES], train_fraction: f64) -> ([usize; NUM_CLASSES], [usize; NUM_CLASSES]) {
    let test = counts.map(|n| test_count(n, train_fraction));
    let mut train = [0; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        train[c] = counts[c] - test[c];
    }
    (train, test)
}
