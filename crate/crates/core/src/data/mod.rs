//! Feature banks, dataset manifests, splits and view assembly.

pub mod bank;
pub mod manifest;
pub mod split;
pub mod views;

pub use bank::{read_bank, write_bank, FeatureBank, BANK_MAGIC, BANK_VERSION};
pub use manifest::{read_id_list, write_id_list, Dataset, DatasetManifest, RepresentationRef, SplitPolicy, MANIFEST_SCHEMA};
pub use split::{stratified_holdout, stratified_kfold, Part, SplitAssignment};
pub use views::{load_views, ViewData};
