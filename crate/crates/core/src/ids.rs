//! Identifier newtypes shared by every entity in the model.
//!
//! All identifiers are opaque, case-sensitive strings. Entities address each
//! other by [`EntityName`], which is the rendered form used in traces.

use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                Self(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

string_id!(
    /// A QKD node.
    NodeId
);
string_id!(
    /// A QKD link between two nodes.
    LinkId
);
string_id!(
    /// An application (secure application entity) registered to a node.
    AppId
);
string_id!(
    /// Identifier of one key in a link's key pool (128-bit, lowercase hex).
    KeyId
);
string_id!(
    /// One end-to-end key establishment instance.
    AssociationId
);
string_id!(
    /// Rendered name of a local KMS, e.g. `KMS_3d` for node `N3` on link `d`.
    ///
    /// The `(NodeId, LinkId)` pair behind a name is recovered through
    /// [`crate::topology::Topology::kms_endpoint`].
    KmsId
);
string_id!(
    /// Transport-level address of any entity (application, vKMS, KMS or controller).
    EntityName
);

/// Transport name of the controller.
pub const QUSEC_NAME: &str = "QuSeC";

/// Short label used for a node inside rendered names: `N3` becomes `3`,
/// any other identifier is kept verbatim.
pub fn node_label(node: &NodeId) -> &str {
    let s = node.as_str();
    match s.strip_prefix('N') {
        Some(rest) if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) => rest,
        _ => s,
    }
}

impl KmsId {
    /// Renders the KMS serving `link` on `node`.
    pub fn render(node: &NodeId, link: &LinkId) -> Self {
        Self(format!("KMS_{}{}", node_label(node), link))
    }
}

impl EntityName {
    pub fn vkms(node: &NodeId) -> Self {
        Self(format!("vKMS_{}", node_label(node)))
    }

    pub fn qusec() -> Self {
        Self(QUSEC_NAME.to_owned())
    }

    pub fn is_qusec(&self) -> bool {
        self.0 == QUSEC_NAME
    }
}

impl From<&KmsId> for EntityName {
    fn from(k: &KmsId) -> Self {
        Self(k.0.clone())
    }
}

impl From<KmsId> for EntityName {
    fn from(k: KmsId) -> Self {
        Self(k.0)
    }
}

impl From<AppId> for EntityName {
    fn from(a: AppId) -> Self {
        Self(a.0)
    }
}

impl From<&AppId> for EntityName {
    fn from(a: &AppId) -> Self {
        Self(a.0.clone())
    }
}
