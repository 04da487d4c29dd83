use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Independent random stream for one concern, derived from the master seed
/// and a label so that streams do not perturb each other.
pub fn sub_rng(master: u64, label: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}
