//! Identifiers, message constructors and the static message-type table.
//!
//! Every protocol component shares one [`MessageTypeTable`]. A message type
//! owns a contiguous interval of CAN IDs, one per fragment, and is named by
//! the first ID of that interval.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use thiserror::Error;

/// Number of distinct 11-bit standard identifiers.
pub const CAN_ID_SPACE: u16 = 2048;

/// Largest payload a classic CAN frame can carry.
pub const FRAME_PAYLOAD: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TableError {
    #[error("CAN ID {0} is outside the 11-bit identifier space")]
    IdOutOfRange(u32),
    #[error("CAN ID {0} belongs to no registered message type")]
    UnknownId(CanId),
    #[error("message type {0} is not registered")]
    UnknownType(MessageType),
    #[error("fragment {k} is outside 1..={parts} for message type {mt}")]
    FragmentOutOfRange { mt: MessageType, k: u16, parts: u16 },
}

/// An 11-bit CAN identifier. Lower values win arbitration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CanId(u16);

impl CanId {
    pub fn new(value: u32) -> Result<Self, TableError> {
        if value < u32::from(CAN_ID_SPACE) {
            Ok(CanId(value as u16))
        } else {
            Err(TableError::IdOutOfRange(value))
        }
    }

    pub const fn value(self) -> u16 {
        self.0
    }
}

impl fmt::Display for CanId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:02}", self.0)
    }
}

/// A message type, denoted by the first CAN ID of its interval.
/// "No message type" is represented as `Option::<MessageType>::None`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MessageType(CanId);

impl MessageType {
    pub const fn new(first: CanId) -> Self {
        MessageType(first)
    }

    pub const fn first_id(self) -> CanId {
        self.0
    }
}

impl fmt::Display for MessageType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Identifies an application (the ultimate sender of a message).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AppId(pub u16);

/// Identifies a software component (fragmentation instance, multiplexer,
/// driver half or reassembly instance).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ComponentId(pub u16);

/// Identifies a TX buffer of a CAN controller (index into the bank).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TxId(pub u8);

impl fmt::Display for TxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

/// Application data. Up to one frame's worth of bytes is stored inline.
#[derive(Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Payload(SmallVec<[u8; FRAME_PAYLOAD]>);

impl Payload {
    /// The empty payload ε.
    pub fn empty() -> Self {
        Payload(SmallVec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_hex(text: &str) -> Result<Self, String> {
        let text = text.trim();
        if !text.is_ascii() {
            return Err(format!("hex payload `{text}` contains non-hex characters"));
        }
        if !text.len().is_multiple_of(2) {
            return Err(format!("hex payload `{text}` has odd length"));
        }
        (0..text.len())
            .step_by(2)
            .map(|i| {
                u8::from_str_radix(&text[i..i + 2], 16)
                    .map_err(|_| format!("invalid hex byte `{}`", &text[i..i + 2]))
            })
            .collect::<Result<SmallVec<_>, _>>()
            .map(Payload)
    }
}

impl From<Payload> for String {
    fn from(p: Payload) -> String {
        p.to_hex()
    }
}

impl TryFrom<String> for Payload {
    type Error = String;

    fn try_from(text: String) -> Result<Self, String> {
        Payload::from_hex(&text)
    }
}

impl From<&[u8]> for Payload {
    fn from(bytes: &[u8]) -> Self {
        Payload(SmallVec::from_slice(bytes))
    }
}

impl From<Vec<u8>> for Payload {
    fn from(bytes: Vec<u8>) -> Self {
        Payload(SmallVec::from_vec(bytes))
    }
}

impl fmt::Debug for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Payload({})", self.to_hex())
    }
}

impl fmt::Display for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            f.write_str("ε")
        } else {
            f.write_str(&self.to_hex())
        }
    }
}

/// First eight bytes of `data`, or all of it when shorter.
pub fn head8(data: &Payload) -> Payload {
    Payload::from(&data.0[..data.len().min(FRAME_PAYLOAD)])
}

/// Everything after the first eight bytes (ε when `data` fits in one frame).
pub fn tail8(data: &Payload) -> Payload {
    if data.len() <= FRAME_PAYLOAD {
        Payload::empty()
    } else {
        Payload::from(&data.0[FRAME_PAYLOAD..])
    }
}

pub fn append8(front: &Payload, back: &Payload) -> Payload {
    let mut joined = front.0.clone();
    joined.extend_from_slice(&back.0);
    Payload(joined)
}

/// A single CAN frame: identifier plus at most eight bytes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CanFrame {
    id: CanId,
    data: Payload,
}

impl CanFrame {
    /// Panics if `data` is longer than a frame payload.
    pub fn new(id: CanId, data: Payload) -> Self {
        assert!(
            data.len() <= FRAME_PAYLOAD,
            "CAN frame payload of {} bytes",
            data.len()
        );
        CanFrame { id, data }
    }

    pub fn id(&self) -> CanId {
        self.id
    }

    pub fn data(&self) -> &Payload {
        &self.data
    }
}

/// The message carried inside an `AMsg` wrapper; never itself a wrapper.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TxMessage {
    Frame(CanFrame),
    Cancel,
    Ack(bool),
}

/// Every message exchanged between applications and protocol components.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Message {
    /// New application message handed to a fragmentation instance.
    NewPkt {
        mt: MessageType,
        data: Payload,
    },
    /// A CAN frame (a fragment, or an unfragmented legacy message).
    Can(CanFrame),
    /// Application request to cancel its last submitted message.
    Cancel,
    /// Fragmentation request to the multiplexer to cancel one CAN ID.
    CancelI(CanId),
    Ack(bool),
    /// A message tagged with the TX buffer it concerns.
    AMsg {
        tx: TxId,
        inner: TxMessage,
    },
    /// Reassembled message handed to the application layer.
    Data {
        mt: MessageType,
        data: Payload,
    },
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Message::NewPkt { mt, data } => write!(f, "newpkt({mt},{data})"),
            Message::Can(frame) => write!(f, "can({},{})", frame.id, frame.data),
            Message::Cancel => f.write_str("cancel"),
            Message::CancelI(cid) => write!(f, "canceli({cid})"),
            Message::Ack(ok) => write!(f, "ack({ok})"),
            Message::AMsg { tx, inner } => match inner {
                TxMessage::Frame(frame) => {
                    write!(f, "amsg({tx},can({},{}))", frame.id, frame.data)
                }
                TxMessage::Cancel => write!(f, "amsg({tx},cancel)"),
                TxMessage::Ack(ok) => write!(f, "amsg({tx},ack({ok}))"),
            },
            Message::Data { mt, data } => write!(f, "data({mt},{data})"),
        }
    }
}

/// One row of the message-type table.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TableEntry {
    pub mt: MessageType,
    pub sender: AppId,
    pub receivers: BTreeSet<ComponentId>,
    pub parts: u16,
    pub frag: ComponentId,
}

impl TableEntry {
    /// Number of fragments for a fixed message length of `len` bytes.
    pub fn parts_for_length(len: usize) -> u16 {
        len.div_ceil(FRAME_PAYLOAD).max(1) as u16
    }

    /// Last CAN ID of the interval (inclusive); `None` when `parts` is 0.
    fn last_id(&self) -> Option<u32> {
        let first = u32::from(self.mt.first_id().value());
        (self.parts > 0).then(|| first + u32::from(self.parts) - 1)
    }
}

/// Static table mapping every registered CAN ID to its type's entry.
///
/// Construction accepts any rows so that [`validate_table`] can report
/// problems; lookups assume a validated table.
#[derive(Debug, Clone, Default)]
pub struct MessageTypeTable {
    entries: BTreeMap<MessageType, TableEntry>,
    duplicates: Vec<TableEntry>,
}

impl MessageTypeTable {
    pub fn new(rows: impl IntoIterator<Item = TableEntry>) -> Self {
        let mut table = MessageTypeTable::default();
        for row in rows {
            match table.entries.entry(row.mt) {
                Entry::Occupied(_) => table.duplicates.push(row),
                Entry::Vacant(slot) => {
                    slot.insert(row);
                }
            }
        }
        table
    }

    pub fn entries(&self) -> impl Iterator<Item = &TableEntry> {
        self.entries.values()
    }

    pub fn entry(&self, mt: MessageType) -> Result<&TableEntry, TableError> {
        self.entries.get(&mt).ok_or(TableError::UnknownType(mt))
    }

    /// CAN ID of fragment `k` (1-based) of message type `mt`.
    pub fn can_id(&self, mt: MessageType, k: u16) -> Result<CanId, TableError> {
        let entry = self.entry(mt)?;
        if k == 0 || k > entry.parts {
            return Err(TableError::FragmentOutOfRange {
                mt,
                k,
                parts: entry.parts,
            });
        }
        CanId::new(u32::from(mt.first_id().value()) + u32::from(k) - 1)
    }

    /// Inverse of [`Self::can_id`].
    pub fn decompose(&self, cid: CanId) -> Result<(MessageType, u16), TableError> {
        let entry = self.lookup(cid)?;
        Ok((entry.mt, cid.value() - entry.mt.first_id().value() + 1))
    }

    pub fn lookup(&self, cid: CanId) -> Result<&TableEntry, TableError> {
        self.entries
            .range(..=MessageType::new(cid))
            .next_back()
            .map(|(_, entry)| entry)
            .filter(|entry| {
                entry
                    .last_id()
                    .is_some_and(|last| u32::from(cid.value()) <= last)
            })
            .ok_or(TableError::UnknownId(cid))
    }

    pub fn sender(&self, cid: CanId) -> Result<AppId, TableError> {
        self.lookup(cid).map(|e| e.sender)
    }

    pub fn receivers(&self, cid: CanId) -> Result<&BTreeSet<ComponentId>, TableError> {
        self.lookup(cid).map(|e| &e.receivers)
    }

    /// Number of fragments; 1 marks an unfragmented (legacy) message.
    pub fn size(&self, cid: CanId) -> Result<u16, TableError> {
        self.lookup(cid).map(|e| e.parts)
    }

    pub fn frag_name(&self, cid: CanId) -> Result<ComponentId, TableError> {
        self.lookup(cid).map(|e| e.frag)
    }
}

/// What kind of software component an identifier names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ComponentKind {
    Frag { node: usize, index: usize },
    Mux { node: usize },
    DriverTx { node: usize },
    DriverRx { node: usize },
    Reassembly { node: usize },
}

#[derive(Debug, Clone)]
pub struct NodeSpec {
    pub name: String,
    pub tx_buffers: u8,
    pub mux: ComponentId,
    pub driver_tx: ComponentId,
    pub driver_rx: ComponentId,
    pub reassembly: ComponentId,
    pub frags: Vec<ComponentId>,
}

#[derive(Debug, Clone)]
pub struct AppSpec {
    pub name: String,
    pub node: usize,
}

/// Hardware nodes, their components, and the applications they host.
#[derive(Debug, Clone, Default)]
pub struct Topology {
    pub nodes: Vec<NodeSpec>,
    pub apps: Vec<AppSpec>,
    components: Vec<(String, ComponentKind)>,
}

impl Topology {
    /// Adds a node with one multiplexer, driver pair and reassembly
    /// instance plus the named fragmentation instances. Returns its index.
    pub fn add_node(&mut self, name: &str, tx_buffers: u8, frag_names: &[&str]) -> usize {
        let node = self.nodes.len();
        let mut alloc = |label: String, kind| {
            let id = ComponentId(self.components.len() as u16);
            self.components.push((label, kind));
            id
        };
        let mux = alloc(format!("{name}.mux"), ComponentKind::Mux { node });
        let driver_tx = alloc(format!("{name}.can_tx"), ComponentKind::DriverTx { node });
        let driver_rx = alloc(format!("{name}.can_rx"), ComponentKind::DriverRx { node });
        let reassembly = alloc(format!("{name}.rass"), ComponentKind::Reassembly { node });
        let frags = frag_names
            .iter()
            .enumerate()
            .map(|(index, frag)| {
                alloc(
                    format!("{name}.{frag}"),
                    ComponentKind::Frag { node, index },
                )
            })
            .collect();
        self.nodes.push(NodeSpec {
            name: name.to_string(),
            tx_buffers,
            mux,
            driver_tx,
            driver_rx,
            reassembly,
            frags,
        });
        node
    }

    pub fn add_app(&mut self, name: &str, node: usize) -> AppId {
        self.apps.push(AppSpec {
            name: name.to_string(),
            node,
        });
        AppId(self.apps.len() as u16 - 1)
    }

    pub fn component_count(&self) -> usize {
        self.components.len()
    }

    pub fn kind(&self, id: ComponentId) -> Option<ComponentKind> {
        self.components
            .get(usize::from(id.0))
            .map(|(_, kind)| *kind)
    }

    pub fn component_name(&self, id: ComponentId) -> &str {
        self.components
            .get(usize::from(id.0))
            .map_or("?", |(name, _)| name.as_str())
    }

    /// Looks up a component by its qualified `node.name` label.
    pub fn component_by_name(&self, label: &str) -> Option<ComponentId> {
        self.components
            .iter()
            .position(|(name, _)| name == label)
            .map(|i| ComponentId(i as u16))
    }

    pub fn node_by_name(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn app_by_name(&self, name: &str) -> Option<AppId> {
        self.apps
            .iter()
            .position(|a| a.name == name)
            .map(|i| AppId(i as u16))
    }

    pub fn app_name(&self, app: AppId) -> &str {
        self.apps
            .get(usize::from(app.0))
            .map_or("?", |a| a.name.as_str())
    }

    pub fn app_ids(&self) -> impl Iterator<Item = AppId> {
        (0..self.apps.len() as u16).map(AppId)
    }

    /// Node whose reassembly instance is `id`.
    pub fn node_of_reassembly(&self, id: ComponentId) -> Option<usize> {
        match self.kind(id)? {
            ComponentKind::Reassembly { node } => Some(node),
            _ => None,
        }
    }

    pub fn node_of(&self, id: ComponentId) -> Option<usize> {
        self.kind(id).map(|kind| match kind {
            ComponentKind::Frag { node, .. }
            | ComponentKind::Mux { node }
            | ComponentKind::DriverTx { node }
            | ComponentKind::DriverRx { node }
            | ComponentKind::Reassembly { node } => node,
        })
    }

    /// Index into the world's flat list of fragmentation instances.
    pub fn frag_slot(&self, id: ComponentId) -> Option<usize> {
        match self.kind(id)? {
            ComponentKind::Frag { node, index } => Some(
                self.nodes[..node]
                    .iter()
                    .map(|n| n.frags.len())
                    .sum::<usize>()
                    + index,
            ),
            _ => None,
        }
    }

    pub fn frag_ids(&self) -> impl Iterator<Item = ComponentId> + '_ {
        self.nodes.iter().flat_map(|n| n.frags.iter().copied())
    }
}

/// A single problem found by [`validate_table`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TableViolation {
    ZeroParts {
        mt: MessageType,
    },
    IdSpaceExceeded {
        mt: MessageType,
        parts: u16,
    },
    Overlap {
        first: MessageType,
        second: MessageType,
    },
    UnknownSender {
        mt: MessageType,
    },
    NotAReassembly {
        mt: MessageType,
        receiver: ComponentId,
    },
    FragNotOnSenderNode {
        mt: MessageType,
        frag: ComponentId,
    },
    FragSharedByApps {
        frag: ComponentId,
        first: AppId,
        second: AppId,
    },
}

impl fmt::Display for TableViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TableViolation::ZeroParts { mt } => write!(f, "message type {mt} has parts = 0"),
            TableViolation::IdSpaceExceeded { mt, parts } => {
                write!(f, "message type {mt} with {parts} parts runs past CAN ID 2047")
            }
            TableViolation::Overlap { first, second } => {
                write!(f, "ID intervals of message types {first} and {second} overlap")
            }
            TableViolation::UnknownSender { mt } => {
                write!(f, "message type {mt} names an unknown sender application")
            }
            TableViolation::NotAReassembly { mt, receiver } => write!(
                f,
                "message type {mt} lists component {} as receiver, which is not a reassembly instance",
                receiver.0
            ),
            TableViolation::FragNotOnSenderNode { mt, frag } => write!(
                f,
                "fragmentation instance {} of message type {mt} is not on the sender's node",
                frag.0
            ),
            TableViolation::FragSharedByApps { frag, first, second } => write!(
                f,
                "fragmentation instance {} serves applications {} and {}",
                frag.0, first.0, second.0
            ),
        }
    }
}

/// Checks the structural requirements on a table: positive part counts,
/// disjoint intervals inside the ID space, known senders and receivers,
/// fragmentation instances living on the sender's node and serving one
/// application only.
pub fn validate_table(table: &MessageTypeTable, topology: &Topology) -> Vec<TableViolation> {
    let mut violations = Vec::new();

    for dup in &table.duplicates {
        violations.push(TableViolation::Overlap {
            first: dup.mt,
            second: dup.mt,
        });
    }

    let mut previous: Option<&TableEntry> = None;
    let mut frag_owner: BTreeMap<ComponentId, AppId> = BTreeMap::new();
    for entry in table.entries() {
        let mt = entry.mt;
        match entry.last_id() {
            None => violations.push(TableViolation::ZeroParts { mt }),
            Some(last) if last >= u32::from(CAN_ID_SPACE) => {
                violations.push(TableViolation::IdSpaceExceeded {
                    mt,
                    parts: entry.parts,
                })
            }
            Some(_) => {}
        }
        if let Some(prev) = previous {
            if let Some(prev_last) = prev.last_id() {
                if u32::from(mt.first_id().value()) <= prev_last {
                    violations.push(TableViolation::Overlap {
                        first: prev.mt,
                        second: mt,
                    });
                }
            }
        }
        if entry.parts > 0 {
            previous = Some(entry);
        }

        let sender_node = topology
            .apps
            .get(usize::from(entry.sender.0))
            .map(|a| a.node);
        if sender_node.is_none() {
            violations.push(TableViolation::UnknownSender { mt });
        }
        for &receiver in &entry.receivers {
            if topology.node_of_reassembly(receiver).is_none() {
                violations.push(TableViolation::NotAReassembly { mt, receiver });
            }
        }
        let frag_node = match topology.kind(entry.frag) {
            Some(ComponentKind::Frag { node, .. }) => Some(node),
            _ => None,
        };
        if frag_node.is_none() || frag_node != sender_node {
            violations.push(TableViolation::FragNotOnSenderNode {
                mt,
                frag: entry.frag,
            });
        }
        match frag_owner.get(&entry.frag) {
            Some(&owner) if owner != entry.sender => {
                violations.push(TableViolation::FragSharedByApps {
                    frag: entry.frag,
                    first: owner,
                    second: entry.sender,
                })
            }
            _ => {
                frag_owner.insert(entry.frag, entry.sender);
            }
        }
    }
    violations
}
