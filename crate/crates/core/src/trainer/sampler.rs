//! P identities x K images batch construction.

use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::TrainError;
use crate::data::TrainManifest;

/// One sampled image: path and identity id.
pub type Sample = (String, u64);

/// `k` images of a group: without replacement when the group is large
/// enough, otherwise with replacement.
fn sample_group<R: Rng + ?Sized>(group: &[String], k: usize, rng: &mut R) -> Vec<String> {
    if group.len() >= k {
        index::sample(rng, group.len(), k)
            .into_iter()
            .map(|i| group[i].clone())
            .collect()
    } else {
        (0..k)
            .map(|_| group[rng.random_range(0..group.len())].clone())
            .collect()
    }
}

fn batch_for<R: Rng + ?Sized>(
    manifest: &TrainManifest,
    ids: &[u64],
    k: usize,
    rng: &mut R,
) -> Vec<Sample> {
    ids.iter()
        .flat_map(|&id| {
            sample_group(&manifest.groups()[&id], k, rng)
                .into_iter()
                .map(move |p| (p, id))
                .collect::<Vec<_>>()
        })
        .collect()
}

/// `p` distinct identities drawn uniformly, `k` images each.
pub fn pk_sample<R: Rng + ?Sized>(
    manifest: &TrainManifest,
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Sample>, TrainError> {
    let ids: Vec<u64> = manifest.groups().keys().copied().collect();
    if ids.len() < p {
        return Err(TrainError::TooFewIdentities {
            needed: p,
            available: ids.len(),
        });
    }
    let chosen: Vec<u64> = index::sample(rng, ids.len(), p)
        .into_iter()
        .map(|i| ids[i])
        .collect();
    Ok(batch_for(manifest, &chosen, k, rng))
}

/// The batches of one epoch: identities are shuffled and cut into groups of
/// `p`, so every identity appears at least once. The last group is filled
/// with identities from the front of the shuffled order.
pub fn epoch_batches<R: Rng + ?Sized>(
    manifest: &TrainManifest,
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Vec<Sample>>, TrainError> {
    let mut ids: Vec<u64> = manifest.groups().keys().copied().collect();
    if ids.len() < p {
        return Err(TrainError::TooFewIdentities {
            needed: p,
            available: ids.len(),
        });
    }
    ids.shuffle(rng);
    let mut batches = Vec::with_capacity(ids.len().div_ceil(p));
    for chunk in ids.chunks(p) {
        let mut chosen = chunk.to_vec();
        let mut fill = ids.iter();
        while chosen.len() < p {
            let next = *fill.next().expect("at least p identities");
            if !chosen.contains(&next) {
                chosen.push(next);
            }
        }
        batches.push(batch_for(manifest, &chosen, k, rng));
    }
    Ok(batches)
}
