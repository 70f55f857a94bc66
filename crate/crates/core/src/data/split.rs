use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, POSITIVE_CLASS};
use crate::error::{Error, Result};

/// Largest-remainder apportionment of `n` items over `fractions`.
fn apportion(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut left = n - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    // stable: equal remainders favour the earlier split
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if fractions[k] > 0.0 {
            counts[k] += 1;
            left -= 1;
        }
    }
    counts
}

/// Stratified train/validation/test split. Each class is shuffled under
/// `seed` and apportioned separately, so every split keeps the positive ratio
/// to within one sample. Samples keep their original relative order.
pub fn split(ds: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for class in [0u8, POSITIVE_CLASS as u8] {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let counts = apportion(idx.len(), &fractions);
        let mut start = 0;
        for (k, &c) in counts.iter().enumerate() {
            parts[k].extend_from_slice(&idx[start..start + c]);
            start += c;
        }
    }
    let positives = ds.positives();
    let names = ["train", "validation", "test"];
    for (k, part) in parts.iter_mut().enumerate() {
        part.sort_unstable();
        let pos = part.iter().filter(|&&i| ds.labels[i] as usize == POSITIVE_CLASS).count();
        if fractions[k] > 0.0 && positives > 0 && pos == 0 {
            return Err(Error::Stratification(format!(
                "{} split receives no positives ({positives} available)",
                names[k]
            )));
        }
    }
    let [a, b, c] = parts;
    Ok((ds.subset(&a), ds.subset(&b), ds.subset(&c)))
}
