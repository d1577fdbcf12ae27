//! Haptic intent inference and payload-adaptive velocity tracking for
//! leader–follower co-manipulation, with the dyadic evaluation metrics.

pub mod autodiff;
pub mod checkpoint;
pub mod dyad;
pub mod intent;
pub mod metrics;
pub mod ppo;
pub mod rng;
pub mod wavelet;
