//! Discrete-event CAN bus and the composed world it drives.

pub mod trace;
pub mod world;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::types::CanId;

/// Channel behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum BusMode {
    /// Every granted frame reaches every receiver exactly once.
    #[default]
    Perfect,
    /// A granted frame may additionally be received twice by one node.
    Duplicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("nodes {first} and {second} both offered CAN ID {cid}")]
pub struct Collision {
    pub cid: CanId,
    pub first: usize,
    pub second: usize,
}

/// Lowest CAN ID wins. `offers` holds `(node, cid)` pairs; the result is the
/// index of the winning node.
pub fn arbitrate(offers: &[(usize, CanId)]) -> Result<Option<usize>, Collision> {
    let mut seen = BTreeMap::new();
    for &(node, cid) in offers {
        if let Some(first) = seen.insert(cid, node) {
            return Err(Collision {
                cid,
                first,
                second: node,
            });
        }
    }
    Ok(seen.values().next().copied())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cid(v: u32) -> CanId {
        CanId::new(v).unwrap()
    }

    #[test]
    fn lowest_id_wins() {
        assert_eq!(arbitrate(&[(0, cid(49)), (1, cid(1))]), Ok(Some(1)));
        assert_eq!(arbitrate(&[(2, cid(99))]), Ok(Some(2)));
        assert_eq!(arbitrate(&[]), Ok(None));
    }

    #[test]
    fn equal_ids_collide() {
        assert_eq!(
            arbitrate(&[(0, cid(7)), (1, cid(7))]),
            Err(Collision {
                cid: cid(7),
                first: 0,
                second: 1
            })
        );
        assert!(arbitrate(&[(0, cid(9)), (1, cid(9)), (2, cid(1))]).is_err());
    }
}
