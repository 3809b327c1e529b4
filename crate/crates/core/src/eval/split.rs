use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::MALIGNANT;
use crate::wsi::{DatasetManifest, Split};

/// Whole-number shares of `units` proportional to `fractions`, by largest
/// remainder (earlier splits win remainder ties).
pub fn apportion(units: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * units as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(units.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn check_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.is_empty() || fractions.len() > Split::ALL.len() {
        return Err(Error::Split(format!("need 1 to 3 fractions, got {}", fractions.len())));
    }
    if fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
        return Err(Error::Split("fractions must be non-negative".into()));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Split(format!("fractions sum to {sum}, not 1")));
    }
    Ok(())
}

/// Tags every record with a split; fractions are in train, val, test
/// order. By slide, each slide's tiles stay together; otherwise tiles are
/// dealt alternately by class so every split stays balanced.
pub fn split_manifest(manifest: &DatasetManifest, fractions: &[f64], by_slide: bool, seed: u64) -> Result<DatasetManifest> {
    check_fractions(fractions)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = manifest.clone();
    if by_slide {
        let mut ids: Vec<&str> = manifest.records.iter().map(|r| r.slide_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        let nonzero = fractions.iter().filter(|&&f| f > 0.0).count();
        if ids.len() < nonzero {
            return Err(Error::Split(format!("{} slides cannot fill {nonzero} splits", ids.len())));
        }
        ids.shuffle(&mut rng);
        let mut counts = apportion(ids.len(), fractions);
        // a requested split never ends up empty
        for i in 0..counts.len() {
            if fractions[i] > 0.0 && counts[i] == 0 {
                let donor = (0..counts.len()).max_by_key(|&j| (counts[j], usize::MAX - j)).expect("nonempty");
                counts[donor] -= 1;
                counts[i] += 1;
            }
        }
        let mut assignment = Vec::with_capacity(ids.len());
        for (split, &c) in Split::ALL.iter().zip(&counts) {
            assignment.extend(std::iter::repeat_n(*split, c));
        }
        for r in &mut out.records {
            let pos = ids.iter().position(|id| *id == r.slide_id).expect("collected above");
            r.split = assignment[pos];
        }
    } else {
        let (mut pos, mut neg): (Vec<usize>, Vec<usize>) =
            (0..manifest.len()).partition(|&i| manifest.records[i].label == MALIGNANT);
        pos.shuffle(&mut rng);
        neg.shuffle(&mut rng);
        let mut order = Vec::with_capacity(manifest.len());
        let (mut a, mut b) = (pos.into_iter(), neg.into_iter());
        loop {
            match (a.next(), b.next()) {
                (None, None) => break,
                (x, y) => order.extend(x.into_iter().chain(y)),
            }
        }
        let counts = apportion(order.len(), fractions);
        let mut it = order.into_iter();
        for (split, &c) in Split::ALL.iter().zip(&counts) {
            for i in it.by_ref().take(c) {
                out.records[i].split = *split;
            }
        }
    }
    Ok(out)
}
