//! The submission template contract: manifest schema, bundle archives and
//! their validation.

mod archive;
mod manifest;
pub mod template;

pub use archive::{
    check_bundle, pack_bundle, pack_files, validate_bundle, BundleContents, BundleError, BundleFile,
    BundleLimits, SubmissionBundle, MANIFEST_PATH,
};
pub use manifest::{
    normalize_relative_path, parse_manifest, Entrypoints, Manifest, ManifestError, SCHEMA_VERSION,
};
