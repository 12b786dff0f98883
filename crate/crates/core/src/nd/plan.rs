use serde::Serialize;

use crate::mask::{InvalidMask, NdClass, NdTypeMask};

/// Which extra protocol phases a request needs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PhasePlan {
    pub carries_values_in_pre_prepare: bool,
    pub needs_ppu_phase: bool,
    pub needs_post_commit: bool,
    pub verify_post_values: bool,
}

pub fn plan_phases(mask: NdTypeMask) -> PhasePlan {
    PhasePlan {
        carries_values_in_pre_prepare: mask.has(NdClass::Vpre),
        needs_ppu_phase: mask.has(NdClass::Npre),
        needs_post_commit: mask.has_post(),
        verify_post_values: mask.has(NdClass::Vpost),
    }
}

pub fn plan_phases_bits(bits: u8) -> Result<PhasePlan, InvalidMask> {
    NdTypeMask::new(bits).map(plan_phases)
}
