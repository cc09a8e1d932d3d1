//! Reassembly protocol: one store per node with a single slot per sending
//! application. Frames of one sender are never reordered on the bus, so a
//! slot only has to remember the type, the last fragment number and the
//! bytes collected so far.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::action::{Action, Delivery, Env, Mutations, Reaction};
use crate::types::{append8, AppId, Message, MessageType, Payload};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("application {0:?} has no reassembly slot")]
pub struct UnknownApp(pub AppId);

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Slot {
    pub mt: Option<MessageType>,
    pub k: u16,
    pub data: Payload,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ReassemblyStore {
    slots: BTreeMap<AppId, Slot>,
}

impl ReassemblyStore {
    pub fn new(apps: impl IntoIterator<Item = AppId>) -> Self {
        ReassemblyStore {
            slots: apps.into_iter().map(|a| (a, Slot::default())).collect(),
        }
    }

    pub fn slot(&self, app: AppId) -> Result<&Slot, UnknownApp> {
        self.slots.get(&app).ok_or(UnknownApp(app))
    }

    pub fn mtype(&self, app: AppId) -> Result<Option<MessageType>, UnknownApp> {
        self.slot(app).map(|s| s.mt)
    }

    pub fn frameid(&self, app: AppId) -> Result<u16, UnknownApp> {
        self.slot(app).map(|s| s.k)
    }

    pub fn contents(&self, app: AppId) -> Result<&Payload, UnknownApp> {
        self.slot(app).map(|s| &s.data)
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn handle(&mut self, env: &Env<'_>, msg: Message) -> Reaction {
        let Message::Can(frame) = msg else {
            return Reaction::err("rass: unexpected message");
        };
        let Ok((mt, no)) = env.table.decompose(frame.id()) else {
            return Reaction::err("rass: unregistered CAN ID");
        };
        let entry = env
            .table
            .entry(mt)
            .expect("decompose returns registered types");
        let Some(slot) = self.slots.get_mut(&entry.sender) else {
            return Reaction::err("rass: unknown sender application");
        };
        let data = frame.data().clone();
        let deliver = |data| Action::Deliver(Delivery::Data(Message::Data { mt, data }));

        if no == 1 {
            if entry.parts == 1 {
                *slot = Slot::default();
                return Reaction::new("rass.single").with(deliver(data));
            }
            // Any stale partial from this sender is discarded.
            *slot = Slot {
                mt: Some(mt),
                k: 1,
                data,
            };
            return Reaction::new("rass.first");
        }

        let same_type = slot.mt == Some(mt);
        let in_sequence = no == slot.k + 1 || env.mutated(Mutations::REASSEMBLY_ACCEPTS_GAP);
        if same_type && in_sequence {
            slot.data = append8(&slot.data, &data);
            slot.k = no;
            if slot.k == entry.parts {
                let whole = std::mem::take(slot);
                return Reaction::new("rass.complete").with(deliver(whole.data));
            }
            Reaction::new("rass.append")
        } else if same_type && no == slot.k {
            Reaction::new("rass.duplicate")
        } else {
            *slot = Slot::default();
            Reaction::new("rass.discard")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{CanFrame, CanId, ComponentId, MessageTypeTable, TableEntry};

    fn cid(v: u32) -> CanId {
        CanId::new(v).unwrap()
    }

    fn mt(v: u32) -> MessageType {
        MessageType::new(cid(v))
    }

    fn table() -> MessageTypeTable {
        let row = |first, parts, app| TableEntry {
            mt: mt(first),
            sender: AppId(app),
            receivers: [ComponentId(3)].into(),
            parts,
            frag: ComponentId(10 + app),
        };
        MessageTypeTable::new([row(52, 3, 0), row(5, 1, 1), row(60, 2, 1)])
    }

    fn frag(id: u32, bytes: &[u8]) -> Message {
        Message::Can(CanFrame::new(cid(id), Payload::from(bytes)))
    }

    fn feed(store: &mut ReassemblyStore, env: &Env<'_>, frames: &[Message]) -> Vec<Message> {
        frames
            .iter()
            .flat_map(|f| store.handle(env, f.clone()).actions)
            .map(|a| match a {
                Action::Deliver(Delivery::Data(m)) => m,
                other => panic!("unexpected action {other:?}"),
            })
            .collect()
    }

    fn data(first: u32, bytes: &[u8]) -> Message {
        Message::Data {
            mt: mt(first),
            data: Payload::from(bytes),
        }
    }

    #[test]
    fn init_slots_are_empty() {
        let store = ReassemblyStore::new([AppId(0), AppId(1)]);
        assert_eq!(store.mtype(AppId(0)), Ok(None));
        assert_eq!(store.frameid(AppId(1)), Ok(0));
        assert_eq!(store.contents(AppId(0)), Ok(&Payload::empty()));
        assert_eq!(store.contents(AppId(7)), Err(UnknownApp(AppId(7))));
    }

    #[test]
    fn three_fragments_reassemble() {
        let t = table();
        let env = Env::new(&t);
        let mut store = ReassemblyStore::new([AppId(0), AppId(1)]);
        let out = feed(
            &mut store,
            &env,
            &[frag(52, b"a"), frag(53, b"b"), frag(54, b"c")],
        );
        assert_eq!(out, vec![data(52, b"abc")]);
        assert_eq!(store.slot(AppId(0)), Ok(&Slot::default()));
    }

    #[test]
    fn projections_follow_progress() {
        let t = table();
        let env = Env::new(&t);
        let mut store = ReassemblyStore::new([AppId(0)]);
        feed(&mut store, &env, &[frag(52, b"12")]);
        assert_eq!(store.frameid(AppId(0)), Ok(1));
        assert_eq!(store.mtype(AppId(0)), Ok(Some(mt(52))));
        feed(&mut store, &env, &[frag(53, b"34")]);
        assert_eq!(
            store.contents(AppId(0)),
            Ok(&append8(
                &Payload::from(&b"12"[..]),
                &Payload::from(&b"34"[..])
            ))
        );
    }

    #[test]
    fn repeated_fragment_is_dropped() {
        let t = table();
        let env = Env::new(&t);
        let mut store = ReassemblyStore::new([AppId(0)]);
        let out = feed(
            &mut store,
            &env,
            &[
                frag(52, b"a"),
                frag(53, b"b"),
                frag(53, b"b"),
                frag(54, b"c"),
            ],
        );
        assert_eq!(out, vec![data(52, b"abc")]);
    }

    #[test]
    fn gap_discards_partial() {
        let t = table();
        let env = Env::new(&t);
        let mut store = ReassemblyStore::new([AppId(0)]);
        let out = feed(&mut store, &env, &[frag(52, b"a"), frag(54, b"c")]);
        assert!(out.is_empty());
        assert_eq!(store.slot(AppId(0)), Ok(&Slot::default()));
    }

    #[test]
    fn single_frame_resets_stale_partial() {
        let t = table();
        let env = Env::new(&t);
        let mut store = ReassemblyStore::new([AppId(1)]);
        let out = feed(&mut store, &env, &[frag(60, b"x"), frag(5, b"y")]);
        assert_eq!(out, vec![data(5, b"y")]);
        assert_eq!(store.slot(AppId(1)), Ok(&Slot::default()));
    }

    #[test]
    fn first_fragment_overwrites_stale_partial() {
        let t = table();
        let env = Env::new(&t);
        let mut store = ReassemblyStore::new([AppId(0)]);
        let out = feed(
            &mut store,
            &env,
            &[
                frag(52, b"old"),
                frag(52, b"a"),
                frag(53, b"b"),
                frag(54, b"c"),
            ],
        );
        assert_eq!(out, vec![data(52, b"abc")]);
    }

    #[test]
    fn unregistered_id_is_an_error() {
        let t = table();
        let mut store = ReassemblyStore::new([AppId(0)]);
        assert!(store.handle(&Env::new(&t), frag(999, b"z")).is_err());
    }

    #[test]
    fn gap_mutation_corrupts_on_duplicate() {
        let t = table();
        let env = Env {
            table: &t,
            mutations: Mutations::REASSEMBLY_ACCEPTS_GAP,
        };
        let mut store = ReassemblyStore::new([AppId(0)]);
        let out = feed(
            &mut store,
            &env,
            &[
                frag(52, b"a"),
                frag(53, b"b"),
                frag(53, b"b"),
                frag(54, b"c"),
            ],
        );
        assert_eq!(out, vec![data(52, b"abbc")]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            // Duplicating any one fragment of a clean sequence does not
            // change what gets delivered.
            #[test]
            fn duplicate_tolerance(
                chunks in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 8), 3),
                dup in 0usize..3,
            ) {
                let t = table();
                let env = Env::new(&t);
                let clean: Vec<Message> = chunks
                    .iter()
                    .enumerate()
                    .map(|(i, c)| frag(52 + i as u32, c))
                    .collect();
                let mut dirty = clean.clone();
                dirty.insert(dup, clean[dup].clone());

                let mut a = ReassemblyStore::new([AppId(0)]);
                let mut b = ReassemblyStore::new([AppId(0)]);
                let expected = feed(&mut a, &env, &clean);
                prop_assert_eq!(expected.len(), 1);
                prop_assert_eq!(feed(&mut b, &env, &dirty), expected);
                prop_assert_eq!(b.slot_count(), 1);
            }
        }
    }
}
