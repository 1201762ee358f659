//! Imaging and expression ingestion and preprocessing.

pub mod cohort;
pub mod expression;
pub mod preprocess;
pub mod raw;
pub mod volume;

pub use cohort::{build_cohort, Cohort, CohortConfig, CohortManifest, Exclusion, ImagingInput, PatientRecord, Split, SplitFractions};
pub use expression::ExpressionMatrix;
pub use volume::{Modality, TumorMask, Volume};
