//! Mapping between raw 16-bit sample units and dB SPL.

use serde::{Deserialize, Serialize};

use crate::buffer::I16_MAX;

/// A full-scale sine (peak 32767) at the microphone reads `full_scale_db_spl`.
///
/// Peak-equivalent levels (peSPL) use the same mapping applied to a waveform's
/// peak, so a pulse with peak `A` is `full_scale + 20·log10(A / 32767)` dB peSPL.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub full_scale_db_spl: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Self { full_scale_db_spl: 94.0 }
    }
}

/// Lower clamp for levels, so silent bands stay finite in reports.
pub const LEVEL_FLOOR_DB: f64 = -200.0;

impl Calibration {
    /// Peak amplitude of a sine (or peak of a transient) at `db` SPL.
    pub fn amplitude(&self, db: f64) -> f64 {
        I16_MAX * 10f64.powf((db - self.full_scale_db_spl) / 20.0)
    }

    /// Level of a sine with peak amplitude `amp`.
    pub fn level_db(&self, amp: f64) -> f64 {
        self.power_db(amp * amp)
    }

    /// Level for a squared peak amplitude.
    pub fn power_db(&self, amp_sq: f64) -> f64 {
        let db = self.full_scale_db_spl + 10.0 * (amp_sq / (I16_MAX * I16_MAX)).log10();
        if db.is_nan() {
            LEVEL_FLOOR_DB
        } else {
            db.max(LEVEL_FLOOR_DB)
        }
    }

    /// Standard deviation of white noise whose RMS equals that of a sine at `db` SPL.
    pub fn noise_sigma(&self, db: f64) -> f64 {
        if db == f64::NEG_INFINITY {
            0.0
        } else {
            self.amplitude(db) / std::f64::consts::SQRT_2
        }
    }
}
