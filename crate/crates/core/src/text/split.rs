use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

use super::{DatasetSplit, Sentiment};

/// Test-set size per class.
///
/// Each class gets `round_half_up(fraction · n_c)`. When those sum to more or
/// less than `round_half_up(fraction · N)`, single units are moved between
/// classes (largest rounding residual first, larger classes on ties) until the
/// global target is met; no class moves more than one unit away from its
/// exact share.
pub fn stratified_quota(counts: &[usize], fraction: f64) -> Vec<usize> {
    let half_up = |x: f64| (x + 0.5).floor() as usize;
    let exact: Vec<f64> = counts.iter().map(|&n| fraction * n as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|&x| half_up(x)).collect();
    let total: usize = counts.iter().sum();
    let target = half_up(fraction * total as f64);
    let assigned: usize = quota.iter().sum();

    let mut order: Vec<usize> = (0..counts.len()).collect();
    if assigned < target {
        // raise the classes that were rounded down, largest residual first
        order.retain(|&c| (quota[c] as f64) < exact[c] && quota[c] < counts[c]);
        order.sort_by(|&a, &b| {
            let ra = exact[a] - quota[a] as f64;
            let rb = exact[b] - quota[b] as f64;
            rb.total_cmp(&ra).then(counts[b].cmp(&counts[a])).then(a.cmp(&b))
        });
        for &c in order.iter().take(target - assigned) {
            quota[c] += 1;
        }
    } else if assigned > target {
        order.retain(|&c| (quota[c] as f64) > exact[c] && quota[c] > 0);
        order.sort_by(|&a, &b| {
            let ra = quota[a] as f64 - exact[a];
            let rb = quota[b] as f64 - exact[b];
            rb.total_cmp(&ra).then(counts[b].cmp(&counts[a])).then(a.cmp(&b))
        });
        for &c in order.iter().take(assigned - target) {
            quota[c] -= 1;
        }
    }
    quota
}

/// Splits `data` so every class in `classes` contributes its
/// [`stratified_quota`] share to the test side, chosen uniformly at random.
/// Both outputs keep the input order.
pub fn stratified_split<R: Rng + ?Sized>(
    data: &DatasetSplit,
    classes: &[Sentiment],
    test_fraction: f64,
    rng: &mut R,
) -> Result<(DatasetSplit, DatasetSplit)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::config(format!("test fraction must be in [0, 1), got {test_fraction}")));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes.len()];
    for (i, ex) in data.examples.iter().enumerate() {
        let c = classes
            .iter()
            .position(|&k| k == ex.label)
            .ok_or_else(|| Error::Data(format!("label {} is not one of the split classes", ex.label)))?;
        members[c].push(i);
    }
    if let Some(c) = members.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!(
            "class {} has no examples in {}; cannot stratify",
            classes[c], data.name
        )));
    }
    let counts: Vec<usize> = members.iter().map(Vec::len).collect();
    let quota = stratified_quota(&counts, test_fraction);
    let mut is_test = vec![false; data.len()];
    for (idx, q) in members.iter_mut().zip(quota) {
        idx.shuffle(rng);
        for &i in &idx[..q] {
            is_test[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (ex, t) in data.examples.iter().zip(is_test) {
        if t {
            test.push(ex.clone());
        } else {
            train.push(ex.clone());
        }
    }
    Ok((
        DatasetSplit::new(format!("{}-train", data.name), train),
        DatasetSplit::new(format!("{}-test", data.name), test),
    ))
}

/// Twitter examples minus `irrelevant`, followed by every GermEval example.
pub fn mix_datasets(twitter: &DatasetSplit, germeval: &DatasetSplit) -> DatasetSplit {
    let mut examples = twitter.without_irrelevant().examples;
    examples.extend(germeval.examples.iter().cloned());
    DatasetSplit::new(format!("mixed-{}", germeval.name), examples)
}
