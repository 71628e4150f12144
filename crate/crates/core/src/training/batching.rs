use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};

/// Shuffled index batches for one epoch; the short final batch is dropped.
///
/// The permutation depends only on `(seed, epoch)`.
pub fn make_batches(n_items: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        bail!(Config, "batch size must be at least 2 for in-batch negatives, got {batch_size}");
    }
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drops_short_tail() {
        let b = make_batches(10, 4, 0, 0).unwrap();
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|x| x.len() == 4));
        let mut seen: Vec<usize> = b.concat();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn deterministic_per_seed_and_epoch() {
        assert_eq!(make_batches(50, 8, 3, 1).unwrap(), make_batches(50, 8, 3, 1).unwrap());
        assert_ne!(make_batches(50, 8, 3, 0).unwrap(), make_batches(50, 8, 3, 1).unwrap());
        assert_ne!(make_batches(50, 8, 3, 0).unwrap(), make_batches(50, 8, 4, 0).unwrap());
    }

    #[test]
    fn rejects_tiny_batches() {
        assert!(matches!(make_batches(10, 1, 0, 0), Err(crate::Error::Config(_))));
    }
}
