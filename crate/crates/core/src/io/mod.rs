//! File formats: the `SVOL` volume container, dataset manifests and reports.
//!
//! Clinical formats (DICOM, NIfTI) are not read here. Converting them to
//! `SVOL` needs only the voxel array in D, H, W order (W fastest) and the
//! spacing in millimetres; see [`volume`] for the byte layout.

pub mod manifest;
pub mod report;
pub mod volume;

pub use manifest::{load_manifest, save_manifest, write_dataset, Manifest, ManifestEntry, MANIFEST_FILE};
pub use report::{ablation_csv, history_csv, load_report_csv, report_csv, save_report, ReportRow, RunMetadata};
pub use volume::{decode, encode, read_volume, write_volume, Dtype, Payload, Volume};
