//! Canonical ordering of the directed edges of a fully connected graph
//! without self loops. Edge `(i, j)` carries a message from sender `i` to
//! receiver `j`; senders iterate in the outer loop, so edge `e` for pair
//! `(i, j)` sits at `i*(M-1) + (j - (j > i))`.

use std::sync::Arc;

#[derive(Clone, Debug)]
pub struct EdgeLayout {
    m: usize,
    senders: Arc<Vec<usize>>,
    receivers: Arc<Vec<usize>>,
}

impl EdgeLayout {
    pub fn new(m: usize) -> Self {
        assert!(m >= 2, "edge layout needs at least 2 bodies");
        let mut senders = Vec::with_capacity(m * (m - 1));
        let mut receivers = Vec::with_capacity(m * (m - 1));
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    senders.push(i);
                    receivers.push(j);
                }
            }
        }
        EdgeLayout {
            m,
            senders: Arc::new(senders),
            receivers: Arc::new(receivers),
        }
    }

    pub fn bodies(&self) -> usize {
        self.m
    }

    pub fn edge_count(&self) -> usize {
        self.m * (self.m - 1)
    }

    pub fn senders(&self) -> Arc<Vec<usize>> {
        self.senders.clone()
    }

    pub fn receivers(&self) -> Arc<Vec<usize>> {
        self.receivers.clone()
    }

    pub fn pair(&self, e: usize) -> (usize, usize) {
        (self.senders[e], self.receivers[e])
    }

    pub fn index_of(&self, sender: usize, receiver: usize) -> usize {
        assert_ne!(sender, receiver, "no self edges");
        sender * (self.m - 1) + receiver - usize::from(receiver > sender)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_enumerates_all_ordered_pairs() {
        let layout = EdgeLayout::new(3);
        assert_eq!(layout.edge_count(), 6);
        let pairs: Vec<(usize, usize)> = (0..6).map(|e| layout.pair(e)).collect();
        assert_eq!(pairs, vec![(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]);
        for (e, &(i, j)) in pairs.iter().enumerate() {
            assert_eq!(layout.index_of(i, j), e);
        }
    }
}
