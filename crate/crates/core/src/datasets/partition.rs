use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};

use super::{DataError, Dataset};
use crate::rng::{self, SimRng};

/// Disjoint, non-empty index lists, one per client, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub assignments: Vec<Vec<usize>>,
}

impl Partition {
    pub fn client_count(&self) -> usize {
        self.assignments.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    /// True iff the lists cover `[0, n)` exactly once.
    pub fn is_exact_cover(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for &i in self.assignments.iter().flatten() {
            if i >= n || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        seen.into_iter().all(|s| s)
    }
}

fn check_clients(ds: &Dataset, n_clients: usize) -> Result<(), DataError> {
    if n_clients == 0 {
        return Err(DataError::InvalidArgument("n_clients must be at least 1".into()));
    }
    if n_clients > ds.len() {
        return Err(DataError::TooManyClients {
            clients: n_clients,
            samples: ds.len(),
        });
    }
    Ok(())
}

/// Seeded uniform shuffle cut into `n_clients` parts whose sizes differ by at
/// most one (the first `len % n_clients` clients get the extra sample).
pub fn partition_iid(ds: &Dataset, n_clients: usize, seed: u64) -> Result<Partition, DataError> {
    check_clients(ds, n_clients)?;
    let mut rng = rng::stream_rng(seed, rng::Stream::Partition, 0, 0);
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut rng);
    let base = ds.len() / n_clients;
    let extra = ds.len() % n_clients;
    let mut assignments = Vec::with_capacity(n_clients);
    let mut start = 0;
    for c in 0..n_clients {
        let size = base + usize::from(c < extra);
        let mut part = idx[start..start + size].to_vec();
        part.sort_unstable();
        assignments.push(part);
        start += size;
    }
    Ok(Partition { assignments })
}

/// Symmetric Dirichlet draw via normalized Gamma(alpha, 1) variates.
fn dirichlet(alpha: f64, k: usize, rng: &mut SimRng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let mut draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        for d in &mut draws {
            *d /= sum;
        }
    } else {
        // every draw underflowed; put the whole mass on one client
        draws.iter_mut().for_each(|d| *d = 0.0);
        let winner = rand::Rng::random_range(rng, 0..k);
        draws[winner] = 1.0;
    }
    draws
}

/// Per-class Dirichlet split: for every class one proportion vector over the
/// clients is drawn and the class's shuffled samples are cut at the rounded
/// cumulative proportions. Clients left empty then take one sample each from
/// the currently largest client (lowest index on ties).
pub fn partition_dirichlet(
    ds: &Dataset,
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Partition, DataError> {
    check_clients(ds, n_clients)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(DataError::InvalidArgument(format!(
            "dirichlet alpha must be positive and finite, got {alpha}"
        )));
    }
    let mut rng = rng::stream_rng(seed, rng::Stream::Partition, 1, 0);
    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
    for class in 0..ds.class_count() {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels()[i] == class).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let props = dirichlet(alpha, n_clients, &mut rng);
        let m = idx.len();
        let mut cum = 0.0;
        let mut start = 0;
        for (c, p) in props.iter().enumerate() {
            cum += p;
            let end = if c + 1 == n_clients {
                m
            } else {
                ((cum * m as f64).round() as usize).clamp(start, m)
            };
            assignments[c].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    while let Some(empty) = assignments.iter().position(Vec::is_empty) {
        let donor = (0..n_clients)
            .max_by(|&a, &b| {
                assignments[a]
                    .len()
                    .cmp(&assignments[b].len())
                    .then(b.cmp(&a))
            })
            .expect("at least one client");
        let moved = assignments[donor].pop().expect("donor holds >= 2 samples");
        assignments[empty].push(moved);
    }
    for a in &mut assignments {
        a.sort_unstable();
    }
    Ok(Partition { assignments })
}
