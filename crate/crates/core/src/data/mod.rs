//! Volumes, synthetic phantoms, preprocessing, sampling and file formats.

pub mod ehr;
pub mod manifest;
pub mod modality;
pub mod nifti;
pub mod patches;
pub mod phantom;
pub mod preprocess;
pub mod rawvol;
pub mod volume;

pub use ehr::{EhrRecord, Gender, EHR_FEATURE_DIM};
pub use manifest::{CenterEntry, Manifest, Part, Split};
pub use modality::{sample_modality_mode, ModeProbs};
pub use nifti::{read_nifti, write_nifti, NiftiError};
pub use patches::{flip, random_flips, rot90_xy, sample_patches, Patch, PatchRatio};
pub use phantom::{generate_phantom, CenterShift, PhantomSpec};
pub use preprocess::{preprocess_intensities, PreprocessReport};
pub use volume::{Case, LabelGrid, Modality, Mode, Volume, BACKGROUND, LYMPH, NUM_CLASSES, TUMOR};
