//! Fragmentation protocol: one instance per set of message types of an
//! application. Splits an application message into 8-byte CAN frames and
//! hands them to the multiplexer one at a time, waiting for an ack between
//! fragments.

use crate::action::{Action, AppStatus, Delivery, Env, Reaction};
use crate::types::{head8, tail8, CanFrame, ComponentId, Message, MessageType, Payload};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FragState {
    /// Message type last handled; `None` before the first message.
    pub mt: Option<MessageType>,
    /// Data not yet fragmented.
    pub data: Payload,
    /// Fragments already sent for the current message; 0 when idle.
    pub no: u16,
    pub abort: bool,
    pub self_id: ComponentId,
    pub mux_id: ComponentId,
}

impl FragState {
    pub fn new(self_id: ComponentId, mux_id: ComponentId) -> Self {
        FragState {
            mt: None,
            data: Payload::empty(),
            no: 0,
            abort: false,
            self_id,
            mux_id,
        }
    }

    pub fn is_idle(&self) -> bool {
        self.no == 0
    }

    pub fn handle(&mut self, env: &Env<'_>, msg: Message) -> Reaction {
        match msg {
            Message::NewPkt { mt, data } => self.on_new_message(env, mt, data),
            Message::Cancel => self.on_cancel(env),
            Message::Ack(ok) => self.on_ack(env, ok),
            _ => Reaction::err("frag: unexpected message"),
        }
    }

    fn on_new_message(&mut self, env: &Env<'_>, mt: MessageType, data: Payload) -> Reaction {
        if self.no != 0 {
            return Reaction::err("frag: new message while busy");
        }
        let Ok(cid) = env.table.can_id(mt, 1) else {
            return Reaction::err("frag: unregistered message type");
        };
        self.mt = Some(mt);
        self.no = 1;
        self.data = tail8(&data);
        Reaction::new("frag.msg").with(Action::Unicast {
            to: self.mux_id,
            msg: Message::Can(CanFrame::new(cid, head8(&data))),
        })
    }

    fn on_cancel(&mut self, env: &Env<'_>) -> Reaction {
        if self.no == 0 {
            return Reaction::new("frag.canc.idle");
        }
        // Only the last fragment handed to the multiplexer can be cancelled.
        let cid = self
            .mt
            .and_then(|mt| env.table.can_id(mt, self.no).ok())
            .expect("busy fragmentation instance has a registered type");
        self.abort = true;
        Reaction::new("frag.canc").with(Action::Unicast {
            to: self.mux_id,
            msg: Message::CancelI(cid),
        })
    }

    fn on_ack(&mut self, env: &Env<'_>, ok: bool) -> Reaction {
        if self.no == 0 {
            return if ok {
                Reaction::err("frag: positive ack while idle")
            } else {
                Reaction::new("frag.ack.idle")
            };
        }
        let mt = self.mt.expect("busy fragmentation instance has a type");
        let entry = env
            .table
            .entry(mt)
            .expect("busy fragmentation instance has a registered type");
        let app = entry.sender;
        let (branch, status) = match (ok, self.abort) {
            (true, false) if self.no == entry.parts => ("frag.ack.complete", AppStatus::Complete),
            (true, false) => {
                let cid = env
                    .table
                    .can_id(mt, self.no + 1)
                    .expect("next fragment lies in the type's interval");
                let frame = CanFrame::new(cid, head8(&self.data));
                self.no += 1;
                self.data = tail8(&self.data);
                return Reaction::new("frag.ack.next").with(Action::Unicast {
                    to: self.mux_id,
                    msg: Message::Can(frame),
                });
            }
            (true, true) => ("frag.ack.aborted", AppStatus::Aborted),
            (false, _) => ("frag.ack.failed", AppStatus::Failed),
        };
        self.no = 0;
        self.abort = false;
        self.data = Payload::empty();
        Reaction::new(branch).with(Action::Deliver(Delivery::Status { app, status }))
    }
}
