//! Site-stratified k-fold splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Indices of one train/test split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Deals each site's patients round-robin over the folds, events first, so
/// every site and the event rate are spread evenly. The fold pointer carries
/// over between sites to keep fold sizes within one of each other.
pub fn split_folds(sites: &[u32], events: &[bool], k: usize, seed: u64) -> Result<Vec<Fold>> {
    let n = sites.len();
    if events.len() != n {
        return Err(Error::Input("sites and events differ in length".into()));
    }
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if k > n {
        return Err(Error::Config(format!("{k} folds over {n} patients")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut site_ids: Vec<u32> = sites.to_vec();
    site_ids.sort_unstable();
    site_ids.dedup();

    let mut assignment = vec![0usize; n];
    let mut next = 0usize;
    for site in site_ids {
        let mut with_event: Vec<usize> = (0..n).filter(|&i| sites[i] == site && events[i]).collect();
        let mut censored: Vec<usize> = (0..n).filter(|&i| sites[i] == site && !events[i]).collect();
        with_event.shuffle(&mut rng);
        censored.shuffle(&mut rng);
        for i in with_event.into_iter().chain(censored) {
            assignment[i] = next % k;
            next += 1;
        }
    }
    Ok((0..k)
        .map(|f| Fold {
            train: (0..n).filter(|&i| assignment[i] != f).collect(),
            test: (0..n).filter(|&i| assignment[i] == f).collect(),
        })
        .collect())
}
