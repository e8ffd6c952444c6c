use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, DenoiserModel, DiffusionError, ScheduleDescriptor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// JSON model container. Floats are written in shortest round-trip form, so
/// write -> read -> write reproduces the same bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub architecture: Architecture,
    pub schedule: ScheduleDescriptor,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(model: &DenoiserModel, schedule: ScheduleDescriptor) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            architecture: model.architecture().clone(),
            schedule,
            params: model.params().to_vec(),
        }
    }

    pub fn model(&self) -> Result<DenoiserModel, DiffusionError> {
        DenoiserModel::from_params(self.architecture.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, DiffusionError> {
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(DiffusionError::NonFinite("checkpoint parameters"));
        }
        let mut out =
            serde_json::to_vec(self).map_err(|e| DiffusionError::Checkpoint(e.to_string()))?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DiffusionError> {
        let ckpt: Checkpoint =
            serde_json::from_slice(bytes).map_err(|e| DiffusionError::Checkpoint(e.to_string()))?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(DiffusionError::Checkpoint(format!(
                "unsupported format version {}",
                ckpt.format_version
            )));
        }
        // validates the parameter count
        ckpt.model()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), DiffusionError> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| DiffusionError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, DiffusionError> {
        let bytes =
            fs::read(path).map_err(|e| DiffusionError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_unknown_version() {
        let m = DenoiserModel::zeros(Architecture::desk_default(2, 4, 50));
        let mut c = Checkpoint::new(&m, ScheduleDescriptor::default());
        c.format_version = 99;
        let bytes = serde_json::to_vec(&c).unwrap();
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn write_read_write_is_byte_identical(seed in any::<u64>(), scale in -1e6f64..1e6) {
            let mut m = DenoiserModel::init(Architecture::desk_default(2, 4, 50), seed);
            for p in m.params_mut().iter_mut().step_by(7) {
                *p *= scale;
            }
            let c = Checkpoint::new(&m, ScheduleDescriptor::default());
            let first = c.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&first).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.to_bytes().unwrap(), first);
        }
    }
}
