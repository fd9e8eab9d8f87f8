//! Execution backends. The harness talks to one trait; behind it sit real
//! process execution on pinned cores and a deterministic synthetic
//! contention model used for fast, hardware-free verification.

pub mod real;
pub mod synthetic;

pub use real::RealBackend;
pub use synthetic::{SutModel, SyntheticBackend, SyntheticProfile};

use crate::environment::ConcreteEnvironment;
use crate::error::{Error, Result};
use crate::harness::{BackendKind, MeasurementSample, PlatformDescriptor, Program};

/// One timed execution environment. Implementations must be
/// indistinguishable to the harness: given a program and an environment they
/// yield a [`MeasurementSample`], whatever machinery sits underneath.
pub trait Backend {
    fn kind(&self) -> BackendKind;

    /// Run `program` on the SUT core with `env`'s enemies active and return
    /// the timed sample. Enemy startup problems surface as
    /// [`Error::EnemyStart`] so the harness can discard and retry.
    fn execute(
        &mut self,
        program: &Program,
        env: &ConcreteEnvironment,
        platform: &PlatformDescriptor,
    ) -> Result<MeasurementSample>;

    /// Evict cached state left over from the previous sample.
    fn flush_cache(&mut self, platform: &PlatformDescriptor) -> Result<()>;

    /// Give the chip time to cool after an overheated sample.
    fn cooldown_after_overheat(&mut self);
}

/// Build the backend the platform file asks for. `seed` overrides the
/// synthetic profile's own seed; the real backend ignores it.
pub fn backend_for(platform: &PlatformDescriptor, seed: Option<u64>) -> Result<Box<dyn Backend>> {
    platform.validate()?;
    match platform.backend {
        BackendKind::Synthetic => {
            let path = platform.synthetic_profile.as_deref().ok_or_else(|| {
                Error::Config(format!(
                    "platform {} selects the synthetic backend but names no synthetic_profile",
                    platform.name
                ))
            })?;
            let profile = SyntheticProfile::load(path)?;
            let backend = match seed {
                Some(s) => SyntheticBackend::with_seed(profile, s)?,
                None => SyntheticBackend::new(profile)?,
            };
            Ok(Box::new(backend))
        }
        BackendKind::Real => Ok(Box::new(RealBackend::new(platform)?)),
    }
}
