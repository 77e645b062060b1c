//! Per-run allocator configuration.
//!
//! Parameters come from the environment (read once at initialization through
//! non-allocating `getenv`) or from an explicit [`AllocatorConfig`] passed to
//! the embedding API. Randomized parameters (bag size, canary byte) are drawn
//! from a dedicated initialization stream of the seed, so a fixed `FG_SEED`
//! pins the entire run.

use crate::rng::Xorshift128Plus;

/// Stream id reserved for initialization draws; thread streams use their
/// subheap slot index, which is always far below this.
const INIT_STREAM: u64 = u64::MAX;

pub const MIN_BAG_MB: u64 = 4;
pub const MAX_BAG_MB: u64 = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllocatorConfig {
    /// Bytes per bag; power of two in [4 MiB, 32 MiB]. Randomized per
    /// execution unless pinned via `FG_BAG_SIZE_MB`.
    pub bag_size: usize,
    /// Percent of granules converted to guard regions, 0..=50.
    pub guard_budget_pct: u8,
    /// 1-in-W chance that an allocation bypasses the freelist.
    pub override_weight_w: u64,
    /// Byte written at the last offset of every slot; never zero so that
    /// zero-fill overflows are still caught.
    pub canary_byte: u8,
    pub destroy_on_free: bool,
    pub abort_on_violation: bool,
    /// Resolved seed for all randomized decisions this run.
    pub seed: u64,
    /// Whether the seed was forced (FG_SEED / explicit) rather than drawn
    /// from OS entropy.
    pub seeded: bool,
    pub max_threads: usize,
    /// Diagnostic lever: pin every chain choice to one index (0..=3).
    pub force_chain: Option<u8>,
}

impl AllocatorConfig {
    /// Defaults with randomized parameters resolved from `seed`.
    pub fn from_seed(seed: u64, seeded: bool) -> Self {
        let mut init = Xorshift128Plus::from_seed(seed, INIT_STREAM);
        let bag_mb = MIN_BAG_MB << (init.next_u64() % 4); // {4, 8, 16, 32}
        let canary = loop {
            let b = (init.next_u64() & 0xFF) as u8;
            if b != 0 {
                break b;
            }
        };
        AllocatorConfig {
            bag_size: (bag_mb as usize) << 20,
            guard_budget_pct: 10,
            override_weight_w: 16,
            canary_byte: canary,
            destroy_on_free: false,
            abort_on_violation: true,
            seed,
            seeded,
            max_threads: 128,
            force_chain: None,
        }
    }

    /// Read the environment once and build the run configuration.
    ///
    /// Recognized variables: `FG_SEED`, `FG_BAG_SIZE_MB` (4/8/16/32),
    /// `FG_GUARD_BUDGET` (integer percent), `FG_OVERRIDE_W`,
    /// `FG_DESTROY_ON_FREE` (0/1), `FG_ABORT` (0/1), `FG_MAX_THREADS`,
    /// `FG_FORCE_CHAIN` (0..=3, diagnostic).
    pub fn from_env() -> Self {
        let (seed, seeded) = match crate::os::getenv_u64("FG_SEED\0") {
            Some(s) => (s, true),
            None => (crate::os::entropy_u64(), false),
        };
        let mut cfg = Self::from_seed(seed, seeded);
        if let Some(mb) = crate::os::getenv_u64("FG_BAG_SIZE_MB\0") {
            cfg.bag_size = (mb as usize) << 20;
        }
        if let Some(p) = crate::os::getenv_u64("FG_GUARD_BUDGET\0") {
            cfg.guard_budget_pct = p.min(u8::MAX as u64) as u8;
        }
        if let Some(w) = crate::os::getenv_u64("FG_OVERRIDE_W\0") {
            cfg.override_weight_w = w;
        }
        if let Some(d) = crate::os::getenv_u64("FG_DESTROY_ON_FREE\0") {
            cfg.destroy_on_free = d != 0;
        }
        if let Some(a) = crate::os::getenv_u64("FG_ABORT\0") {
            cfg.abort_on_violation = a != 0;
        }
        if let Some(t) = crate::os::getenv_u64("FG_MAX_THREADS\0") {
            cfg.max_threads = t as usize;
        }
        if let Some(c) = crate::os::getenv_u64("FG_FORCE_CHAIN\0") {
            cfg.force_chain = Some((c % 4) as u8);
        }
        cfg
    }

    pub fn validate(&self) -> Result<(), &'static str> {
        let mb = self.bag_size >> 20;
        if !self.bag_size.is_power_of_two()
            || self.bag_size != mb << 20
            || !(MIN_BAG_MB..=MAX_BAG_MB).contains(&(mb as u64))
        {
            return Err("bag size must be a power of two between 4 MiB and 32 MiB");
        }
        if self.guard_budget_pct > 50 {
            return Err("guard budget must be between 0% and 50%");
        }
        if self.override_weight_w < 1 {
            return Err("override weight W must be at least 1");
        }
        if self.max_threads < 1 || !self.max_threads.is_power_of_two() {
            return Err("max threads must be a positive power of two");
        }
        if self.canary_byte == 0 {
            return Err("canary byte must be nonzero");
        }
        if let Some(c) = self.force_chain {
            if c > 3 {
                return Err("forced chain index must be 0..=3");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_seed_pins_randomized_parameters() {
        let a = AllocatorConfig::from_seed(1234, true);
        let b = AllocatorConfig::from_seed(1234, true);
        assert_eq!(a.bag_size, b.bag_size);
        assert_eq!(a.canary_byte, b.canary_byte);
    }

    #[test]
    fn bag_size_varies_across_seeds() {
        // With 64 seeds the chance of a single bag size is (1/4)^63.
        let mut seen = std::collections::HashSet::new();
        for seed in 0..64 {
            seen.insert(AllocatorConfig::from_seed(seed, true).bag_size);
        }
        assert!(seen.len() > 1);
        for s in &seen {
            assert!(s.is_power_of_two());
            assert!((4 << 20..=32 << 20).contains(s));
        }
    }

    #[test]
    fn canary_is_never_zero() {
        for seed in 0..512 {
            assert_ne!(AllocatorConfig::from_seed(seed, true).canary_byte, 0);
        }
    }

    #[test]
    fn defaults_validate() {
        AllocatorConfig::from_seed(9, true).validate().unwrap();
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = AllocatorConfig::from_seed(9, true);
        c.bag_size = 3 << 20;
        assert!(c.validate().is_err());
        let mut c = AllocatorConfig::from_seed(9, true);
        c.bag_size = 64 << 20;
        assert!(c.validate().is_err());
        let mut c = AllocatorConfig::from_seed(9, true);
        c.guard_budget_pct = 51;
        assert!(c.validate().is_err());
        let mut c = AllocatorConfig::from_seed(9, true);
        c.override_weight_w = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn env_overrides_apply() {
        std::env::set_var("FG_SEED", "77");
        std::env::set_var("FG_BAG_SIZE_MB", "8");
        std::env::set_var("FG_GUARD_BUDGET", "0");
        std::env::set_var("FG_OVERRIDE_W", "32");
        std::env::set_var("FG_ABORT", "0");
        let cfg = AllocatorConfig::from_env();
        assert_eq!(cfg.seed, 77);
        assert!(cfg.seeded);
        assert_eq!(cfg.bag_size, 8 << 20);
        assert_eq!(cfg.guard_budget_pct, 0);
        assert_eq!(cfg.override_weight_w, 32);
        assert!(!cfg.abort_on_violation);
        for v in [
            "FG_SEED",
            "FG_BAG_SIZE_MB",
            "FG_GUARD_BUDGET",
            "FG_OVERRIDE_W",
            "FG_ABORT",
        ] {
            std::env::remove_var(v);
        }
    }
}
