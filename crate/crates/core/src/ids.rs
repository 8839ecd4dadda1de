//! Opaque identifier newtypes shared across the simulator.

use serde::{Deserialize, Serialize};

macro_rules! id_type {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(
            Debug, Default, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize,
            Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(
    /// A catalog item.
    ItemId
);
id_type!(
    /// A customer account. This is the pseudonym vendors see; it never names
    /// a physical location.
    CustomerId
);
id_type!(
    /// Any participant in the network: vendor, DPN site, PMAN site, customer,
    /// or secondary recipient.
    EntityId
);
id_type!(
    /// A purchase.
    OrderId
);
id_type!(
    /// The observable identity of a package's outermost layer. A fresh
    /// surface id is minted at every wrapping event and never reused within
    /// a run; refreshing it is what de-identification means physically.
    SurfaceId
);

/// Run-scoped source of fresh [`SurfaceId`]s. Every wrap draws from one of
/// these, so uniqueness holds across the whole run by construction.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct SurfaceMint {
    next: u64,
}

impl SurfaceMint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn mint(&mut self) -> SurfaceId {
        let id = SurfaceId(self.next);
        self.next += 1;
        id
    }

    /// Number of surface ids minted so far.
    pub fn minted(&self) -> u64 {
        self.next
    }
}
