//! Cohort data model, input preparation and splits.

mod cohort;
mod prepare;
mod split;

pub use cohort::{
    parse_cohort, read_cohort, write_cohort, write_cohort_to, EncounterSequence, Regime, COHORT_FORMAT, WINDOW_HOURS,
};
pub use prepare::{
    impute_locf, patients_digest, prepare, prepare_dataset, presence_targets, resample_hourly, ModelInput, NormStats,
    PreparedDataset, PreparedPatient, SplitRole, Strategy,
};
pub use split::{split_indices, split_random, split_regime_matched, RegimeSplits, Splits};
