//! Email fixtures shipped with the repository, with their SHA-256 digests.

/// Reconstructed "Rackspace" phishing email.
pub const PHISH_EML: &[u8] = include_bytes!("../../../fixtures/rackspace_phish.eml");
pub const PHISH_SHA256: &str = "a42745f3fdf06a7c89270b35acaab7dc9c125f2b99fc73e2d06350b8af499c50";

/// Well-formed internal email that should raise no flags.
pub const CLEAN_EML: &[u8] = include_bytes!("../../../fixtures/clean.eml");
pub const CLEAN_SHA256: &str = "c719f461f7c03f663df921f1182d1b63f8c6993ded0625dfe74bcbbd273f35b1";
