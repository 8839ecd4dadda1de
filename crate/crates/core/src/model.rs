//! Domain types for goods, orders, addresses, and the package
//! wrapping/unwrapping mechanics that realize de-identification.
//!
//! Sealing is modeled as an opener-checked access rule rather than real
//! encryption: the privacy analysis depends on who *can* open a layer, not on
//! cipher strength. [`Package::interior`] is private to this module, so no
//! code outside it can inspect below a layer's surface without going through
//! [`unwrap_package`].

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{CustomerId, EntityId, ItemId, OrderId, SurfaceId, SurfaceMint};

/// Simulated time. Pure f64 arithmetic keeps runs deterministic for a fixed
/// scenario.
pub type SimTime = f64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    /// An entity other than the layer's designated opener tried to unwrap it.
    #[error("access denied: entity {by} cannot open layer {surface} sealed for {opener}")]
    AccessDenied {
        surface: SurfaceId,
        opener: EntityId,
        by: EntityId,
    },
}

/// The role a physical location plays in the network.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum AddressKind {
    CustomerHome,
    VendorSite,
    DpnSite,
    PmanSite,
    SecondaryRecipientHome,
}

impl fmt::Display for AddressKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AddressKind::CustomerHome => "customer",
            AddressKind::VendorSite => "vendor",
            AddressKind::DpnSite => "dpn",
            AddressKind::PmanSite => "pman",
            AddressKind::SecondaryRecipientHome => "secondary",
        };
        write!(f, "{s}")
    }
}

/// A physical location, identified by the entity registered there.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct Address {
    pub entity: EntityId,
    pub kind: AddressKind,
}

impl Address {
    pub fn new(entity: EntityId, kind: AddressKind) -> Self {
        Self { entity, kind }
    }
}

/// Package size on a fixed four-class ladder. Wrapping never decreases size
/// class; mix nodes normalize outbound packages to a configured common class.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    S0,
    S1,
    S2,
    S3,
}

impl SizeClass {
    pub const ALL: [SizeClass; 4] = [SizeClass::S0, SizeClass::S1, SizeClass::S2, SizeClass::S3];

    /// Smallest class that holds `count` items: 1 item fits S0, up to 3 fit
    /// S1, up to 8 fit S2, anything larger ships as a pallet.
    pub fn for_item_count(count: u32) -> Self {
        match count {
            0..=1 => SizeClass::S0,
            2..=3 => SizeClass::S1,
            4..=8 => SizeClass::S2,
            _ => SizeClass::S3,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "s0" => Some(SizeClass::S0),
            "s1" => Some(SizeClass::S1),
            "s2" => Some(SizeClass::S2),
            "s3" => Some(SizeClass::S3),
            _ => None,
        }
    }
}

impl fmt::Display for SizeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SizeClass::S0 => "s0",
            SizeClass::S1 => "s1",
            SizeClass::S2 => "s2",
            SizeClass::S3 => "s3",
        };
        write!(f, "{s}")
    }
}

/// A multiset of items. Backed by an ordered map so iteration order, equality,
/// and serialization are deterministic.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemBag(BTreeMap<ItemId, u32>);

impl ItemBag {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn singleton(item: ItemId) -> Self {
        let mut bag = Self::new();
        bag.add(item, 1);
        bag
    }

    pub fn add(&mut self, item: ItemId, count: u32) {
        if count > 0 {
            *self.0.entry(item).or_insert(0) += count;
        }
    }

    pub fn extend_from(&mut self, other: &ItemBag) {
        for (&item, &count) in other.iter() {
            self.add(item, count);
        }
    }

    /// Removes `other` from `self`; returns false (and leaves `self`
    /// untouched) if any count would go negative.
    pub fn remove_all(&mut self, other: &ItemBag) -> bool {
        if !self.contains(other) {
            return false;
        }
        for (&item, &count) in other.iter() {
            let entry = self.0.get_mut(&item).expect("checked by contains");
            *entry -= count;
            if *entry == 0 {
                self.0.remove(&item);
            }
        }
        true
    }

    pub fn contains(&self, other: &ItemBag) -> bool {
        other
            .iter()
            .all(|(item, &count)| self.0.get(item).copied().unwrap_or(0) >= count)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Total number of item instances.
    pub fn len(&self) -> u32 {
        self.0.values().sum()
    }

    pub fn count(&self, item: ItemId) -> u32 {
        self.0.get(&item).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ItemId, &u32)> {
        self.0.iter()
    }

    /// Distinct items in the bag, in id order.
    pub fn items(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.0.keys().copied()
    }
}

impl FromIterator<ItemId> for ItemBag {
    fn from_iter<T: IntoIterator<Item = ItemId>>(iter: T) -> Self {
        let mut bag = Self::new();
        for item in iter {
            bag.add(item, 1);
        }
        bag
    }
}

/// The goods inside the innermost layer of a package: what is being shipped
/// and who it is ultimately for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub items: ItemBag,
    pub final_recipient: Address,
}

impl Manifest {
    pub fn new(items: ItemBag, final_recipient: Address) -> Self {
        debug_assert!(!items.is_empty(), "manifests carry at least one item");
        Self {
            items,
            final_recipient,
        }
    }
}

/// What a layer hides: either the goods themselves or another sealed layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
enum Interior {
    Goods(Manifest),
    Wrapped(Box<Package>),
}

/// One sealed layer of a physical parcel.
///
/// The observable surface is `(surface_id, visible_dest, size_class)`; the
/// interior is readable only by `opener` via [`unwrap_package`]. Invariants:
/// the innermost interior is always [`Manifest`] goods, all surface ids in a
/// nested package are distinct, and an outer layer's size class is never
/// smaller than its interior's.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Package {
    pub surface_id: SurfaceId,
    pub visible_dest: Address,
    pub size_class: SizeClass,
    pub opener: EntityId,
    interior: Interior,
}

/// What an authorized unwrap reveals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Unwrapped {
    /// Another sealed layer; forward it to the returned destination.
    Package(Package),
    /// The goods themselves.
    Goods(Manifest),
}

impl Package {
    /// Seals a manifest into a first (innermost) layer.
    pub fn over_goods(
        mint: &mut SurfaceMint,
        manifest: Manifest,
        dest: Address,
        opener: EntityId,
    ) -> Package {
        let size_class = SizeClass::for_item_count(manifest.items.len());
        Package {
            surface_id: mint.mint(),
            visible_dest: dest,
            size_class,
            opener,
            interior: Interior::Goods(manifest),
        }
    }

    /// Number of sealed layers (>= 1).
    pub fn depth(&self) -> usize {
        match &self.interior {
            Interior::Goods(_) => 1,
            Interior::Wrapped(inner) => 1 + inner.depth(),
        }
    }

    /// Surface ids of every layer, outermost first.
    pub fn layer_surfaces(&self) -> Vec<SurfaceId> {
        let mut out = vec![self.surface_id];
        if let Interior::Wrapped(inner) = &self.interior {
            out.extend(inner.layer_surfaces());
        }
        out
    }

    /// Ground-truth inspection of the full layer structure, for engine
    /// bookkeeping and tests only. Not part of any entity's knowledge.
    pub fn ground_truth_layers(&self) -> Vec<LayerInfo> {
        let mut out = vec![LayerInfo {
            surface_id: self.surface_id,
            visible_dest: self.visible_dest,
            size_class: self.size_class,
            opener: self.opener,
        }];
        if let Interior::Wrapped(inner) = &self.interior {
            out.extend(inner.ground_truth_layers());
        }
        out
    }

    /// Ground-truth access to the innermost manifest. Engine bookkeeping and
    /// tests only.
    pub fn ground_truth_manifest(&self) -> &Manifest {
        match &self.interior {
            Interior::Goods(m) => m,
            Interior::Wrapped(inner) => inner.ground_truth_manifest(),
        }
    }

    /// What one illegal opening of this layer would reveal: the immediate
    /// interior, nothing deeper. Used to model package sniffing.
    pub fn sniff_interior(&self) -> SniffResult {
        match &self.interior {
            Interior::Goods(m) => SniffResult::Goods(m.clone()),
            Interior::Wrapped(inner) => SniffResult::Layer {
                inner_surface: inner.surface_id,
                inner_dest: inner.visible_dest,
            },
        }
    }
}

/// Observable layer facts, used for ground-truth assertions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerInfo {
    pub surface_id: SurfaceId,
    pub visible_dest: Address,
    pub size_class: SizeClass,
    pub opener: EntityId,
}

/// What tearing one layer open reveals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SniffResult {
    Goods(Manifest),
    Layer {
        inner_surface: SurfaceId,
        inner_dest: Address,
    },
}

/// Wraps `inner` in an additional layer addressed to `dest` and openable only
/// by `opener`. The new surface id is fresh, and the outer size class is the
/// inner's normalized up to `min_class` (the wrapping node's common class).
pub fn wrap_package(
    mint: &mut SurfaceMint,
    inner: Package,
    dest: Address,
    opener: EntityId,
    min_class: SizeClass,
) -> Package {
    let size_class = inner.size_class.max(min_class);
    Package {
        surface_id: mint.mint(),
        visible_dest: dest,
        size_class,
        opener,
        interior: Interior::Wrapped(Box::new(inner)),
    }
}

/// Opens one layer of `p` on behalf of `by`.
///
/// Only the layer's designated opener succeeds; everyone else gets
/// [`ModelError::AccessDenied`]. On success the caller learns the revealed
/// content and where it should go next — the inner layer's own visible
/// destination, or the manifest's final recipient at the innermost layer —
/// and nothing below that surface.
pub fn unwrap_package(p: Package, by: EntityId) -> Result<(Address, Unwrapped), ModelError> {
    if by != p.opener {
        return Err(ModelError::AccessDenied {
            surface: p.surface_id,
            opener: p.opener,
            by,
        });
    }
    Ok(match p.interior {
        Interior::Goods(m) => (m.final_recipient, Unwrapped::Goods(m)),
        Interior::Wrapped(inner) => (inner.visible_dest, Unwrapped::Package(*inner)),
    })
}

/// Opens consecutive layers for which `by` is the opener, stopping at the
/// first layer sealed for someone else or at the goods.
///
/// This is the physical act performed on receipt: a mix node removes the
/// rewrap shell plus its own route layer, a final recipient opens everything.
/// Returns the surfaces opened along the way.
pub fn open_owned_layers(
    pkg: Package,
    by: EntityId,
) -> (Vec<SurfaceId>, Result<(Address, Unwrapped), Package>) {
    let mut opened = Vec::new();
    let mut current = pkg;
    loop {
        if current.opener != by {
            return (opened, Err(current));
        }
        opened.push(current.surface_id);
        match unwrap_package(current, by).expect("opener checked above") {
            (dest, Unwrapped::Package(inner)) => {
                if inner.opener == by {
                    current = inner;
                } else {
                    return (opened, Ok((dest, Unwrapped::Package(inner))));
                }
            }
            (dest, goods @ Unwrapped::Goods(_)) => return (opened, Ok((dest, goods))),
        }
    }
}

/// A customer purchase: the items the customer wants plus optional noise
/// (excess) items destined for redistribution. Noise is only ever nonempty
/// under the DPN+PMAN topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Order {
    pub id: OrderId,
    pub customer: CustomerId,
    pub vendor: EntityId,
    pub self_items: ItemBag,
    pub noise_items: ItemBag,
    pub placed_at: SimTime,
}

impl Order {
    /// Everything the vendor ships for this order: self and noise items
    /// combined. The split is known only to the customer.
    pub fn all_items(&self) -> ItemBag {
        let mut bag = self.self_items.clone();
        bag.extend_from(&self.noise_items);
        bag
    }
}

/// Which leg of the network a route serves. Main deliveries run vendor to
/// customer; donations run customer to PMAN; redistributions run PMAN to a
/// secondary recipient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteClass {
    MainDelivery,
    Donation,
    Redistribution,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RouteError {
    #[error("route needs at least an origin and a destination")]
    TooShort,
    #[error("hop {index} has kind {found} where {expected} was required")]
    BadHop {
        index: usize,
        found: AddressKind,
        expected: &'static str,
    },
}

/// An ordered list of physical stops, origin first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteSpec {
    pub hops: Vec<Address>,
}

impl RouteSpec {
    pub fn new(class: RouteClass, hops: Vec<Address>) -> Result<Self, RouteError> {
        if hops.len() < 2 {
            return Err(RouteError::TooShort);
        }
        let check = |index: usize, ok: bool, expected: &'static str| -> Result<(), RouteError> {
            if ok {
                Ok(())
            } else {
                Err(RouteError::BadHop {
                    index,
                    found: hops[index].kind,
                    expected,
                })
            }
        };
        let last = hops.len() - 1;
        match class {
            RouteClass::MainDelivery => {
                check(0, hops[0].kind == AddressKind::VendorSite, "vendor_site")?;
                check(
                    last,
                    matches!(
                        hops[last].kind,
                        AddressKind::CustomerHome | AddressKind::SecondaryRecipientHome
                    ),
                    "customer_home or secondary_recipient_home",
                )?;
            }
            RouteClass::Donation => {
                check(0, hops[0].kind == AddressKind::CustomerHome, "customer_home")?;
                check(last, hops[last].kind == AddressKind::PmanSite, "pman_site")?;
            }
            RouteClass::Redistribution => {
                check(0, hops[0].kind == AddressKind::PmanSite, "pman_site")?;
                check(
                    last,
                    hops[last].kind == AddressKind::SecondaryRecipientHome,
                    "secondary_recipient_home",
                )?;
            }
        }
        for (i, hop) in hops.iter().enumerate().skip(1).take(hops.len() - 2) {
            check(
                i,
                matches!(hop.kind, AddressKind::DpnSite | AddressKind::PmanSite),
                "dpn_site or pman_site",
            )?;
        }
        Ok(Self { hops })
    }

    /// Edges traversed end to end.
    pub fn hop_count(&self) -> usize {
        self.hops.len() - 1
    }

    pub fn origin(&self) -> Address {
        self.hops[0]
    }

    pub fn terminal(&self) -> Address {
        *self.hops.last().expect("routes have at least two hops")
    }

    /// Intermediaries between origin and terminal, in traversal order.
    pub fn intermediaries(&self) -> &[Address] {
        &self.hops[1..self.hops.len() - 1]
    }
}
