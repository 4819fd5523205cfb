//! 64-bit FNV-1a, used for checkpoint checksums, embedding buckets and
//! content hashes in run manifests.

pub const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Clone, Copy)]
pub struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Fnv1a(FNV_OFFSET)
    }
}

impl Fnv1a {
    /// Starts from the offset basis xor-ed with `seed`.
    pub fn with_seed(seed: u64) -> Self {
        Fnv1a(FNV_OFFSET ^ seed)
    }

    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a::default();
    h.update(bytes);
    h.finish()
}

pub fn fnv1a_seeded(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = Fnv1a::with_seed(seed);
    h.update(bytes);
    h.finish()
}
