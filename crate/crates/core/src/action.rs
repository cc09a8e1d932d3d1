//! Effects emitted by a protocol step and the context steps run in.

use std::collections::BTreeSet;
use std::fmt;

use bitflags::bitflags;
use serde::{Deserialize, Serialize};

use crate::types::{AppId, CanId, ComponentId, Message, MessageTypeTable, TxId};

/// Status reported by a fragmentation instance to its application.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AppStatus {
    Complete,
    Aborted,
    Failed,
}

impl fmt::Display for AppStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AppStatus::Complete => "MSG_COMPLETE",
            AppStatus::Aborted => "MSG_ABORTED",
            AppStatus::Failed => "MSG_FAILED",
        })
    }
}

/// Something handed to the application layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Delivery {
    Status {
        app: AppId,
        status: AppStatus,
    },
    /// A reassembled message; always `Message::Data`.
    Data(Message),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Unicast {
        to: ComponentId,
        msg: Message,
    },
    Groupcast {
        to: BTreeSet<ComponentId>,
        msg: Message,
    },
    Deliver(Delivery),
    /// The emitting component has reached its error state and halts.
    Err {
        reason: &'static str,
    },
}

/// Broken protocol obligations observed while a component steps. These do
/// not halt the component; the explorer reports them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Anomaly {
    /// The multiplexer stored a frame over a pending one with the same ID.
    PqueueOverwrite(CanId),
    /// The driver stored a frame into an occupied TX buffer.
    TxOverwrite(TxId),
    /// Two TX buffers hold frames with the same CAN ID.
    DuplicateBufferedId(CanId),
    /// Two nodes offered the same CAN ID to the bus.
    BusCollision(CanId),
    /// A frame arrived while another frame of the same fragmentation
    /// instance was still pending in the multiplexer.
    SecondFragmentFromInstance(CanId),
}

impl fmt::Display for Anomaly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Anomaly::PqueueOverwrite(cid) => write!(f, "pqueue entry {cid} overwritten"),
            Anomaly::TxOverwrite(tx) => write!(f, "TX buffer {tx} overwritten"),
            Anomaly::DuplicateBufferedId(cid) => write!(f, "CAN ID {cid} buffered twice"),
            Anomaly::BusCollision(cid) => write!(f, "two nodes offered CAN ID {cid}"),
            Anomaly::SecondFragmentFromInstance(cid) => {
                write!(f, "frame {cid} arrived before its instance was acked")
            }
        }
    }
}

/// Result of one atomic component step.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Reaction {
    pub actions: Vec<Action>,
    /// Which branch of the handler fired, for coverage counters.
    pub branch: &'static str,
    pub anomalies: Vec<Anomaly>,
}

impl Reaction {
    pub fn new(branch: &'static str) -> Self {
        Reaction {
            actions: Vec::new(),
            branch,
            anomalies: Vec::new(),
        }
    }

    pub fn with(mut self, action: Action) -> Self {
        self.actions.push(action);
        self
    }

    pub fn err(reason: &'static str) -> Self {
        Reaction::new(reason).with(Action::Err { reason })
    }

    pub fn is_err(&self) -> bool {
        self.actions.iter().any(|a| matches!(a, Action::Err { .. }))
    }
}

bitflags! {
    /// Seeded protocol faults used to check that the property catalog
    /// notices broken implementations.
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
    pub struct Mutations: u8 {
        /// ACKC frees the TX buffer but never schedules the next frame.
        const SKIP_ACKC_RESCHEDULE = 1 << 0;
        /// The multiplexer never forwards positive acks to fragmentation.
        const DROP_FRAG_ACK = 1 << 1;
        /// ACKC keeps the pqueue entry after a successful transmission.
        const OMIT_PQUEUE_ERASE = 1 << 2;
        /// Reassembly appends any fragment of the stored type, gaps included.
        const REASSEMBLY_ACCEPTS_GAP = 1 << 3;
        /// The driver ignores cancellation requests.
        const DRIVER_IGNORES_CANCEL = 1 << 4;
        /// nbest picks the largest pending IDs instead of the smallest.
        const NBEST_AS_MAX = 1 << 5;
    }
}

impl Mutations {
    pub const NAMES: [(&'static str, Mutations); 6] = [
        ("skip-ackc-reschedule", Mutations::SKIP_ACKC_RESCHEDULE),
        ("drop-frag-ack", Mutations::DROP_FRAG_ACK),
        ("omit-pqueue-erase", Mutations::OMIT_PQUEUE_ERASE),
        ("reassembly-accepts-gap", Mutations::REASSEMBLY_ACCEPTS_GAP),
        ("driver-ignores-cancel", Mutations::DRIVER_IGNORES_CANCEL),
        ("nbest-as-max", Mutations::NBEST_AS_MAX),
    ];

    pub fn by_name(name: &str) -> Option<Mutations> {
        Self::NAMES
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, m)| *m)
    }
}

/// Read-only context shared by every component step.
#[derive(Debug, Clone, Copy)]
pub struct Env<'a> {
    pub table: &'a MessageTypeTable,
    pub mutations: Mutations,
}

impl<'a> Env<'a> {
    pub fn new(table: &'a MessageTypeTable) -> Self {
        Env {
            table,
            mutations: Mutations::empty(),
        }
    }

    pub fn mutated(&self, m: Mutations) -> bool {
        self.mutations.contains(m)
    }
}
