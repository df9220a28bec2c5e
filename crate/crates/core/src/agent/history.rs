use crate::error::{check_dim, Result};

/// Window of the last `k` (local state, previous action) pairs, newest first.
///
/// Pair `i` holds `(s^l_{t-i}, a_{t-i-1})`; the action before the first
/// step of an episode is zero. Slots past `valid_len` stay exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct History {
    k: usize,
    d_l: usize,
    d_a: usize,
    data: Vec<f64>,
    valid_len: usize,
}

impl History {
    pub fn new(k: usize, d_l: usize, d_a: usize) -> Self {
        Self { k, d_l, d_a, data: vec![0.0; k * (d_l + d_a)], valid_len: 0 }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn feat(&self) -> usize {
        self.d_l + self.d_a
    }

    pub fn valid_len(&self) -> usize {
        self.valid_len
    }

    pub fn is_full(&self) -> bool {
        self.valid_len == self.k
    }

    /// Flattened `[k, d_l + d_a]` row-major window.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Starts an episode at local state `s0`.
    pub fn reset(&mut self, s0: &[f64]) -> Result<()> {
        check_dim("local state", self.d_l, s0.len())?;
        self.data.iter_mut().for_each(|v| *v = 0.0);
        self.data[..self.d_l].copy_from_slice(s0);
        self.valid_len = 1;
        Ok(())
    }

    /// Records that `action` was taken and `s_next` observed.
    pub fn push(&mut self, action: &[f64], s_next: &[f64]) -> Result<()> {
        check_dim("local state", self.d_l, s_next.len())?;
        check_dim("action", self.d_a, action.len())?;
        shift_into(&mut self.data, self.d_l, action, s_next);
        self.valid_len = (self.valid_len + 1).min(self.k);
        Ok(())
    }

    /// The window one step later, without modifying `self`.
    pub fn shifted(data: &[f64], d_l: usize, action: &[f64], s_next: &[f64]) -> Vec<f64> {
        let mut out = data.to_vec();
        shift_into(&mut out, d_l, action, s_next);
        out
    }
}

fn shift_into(data: &mut [f64], d_l: usize, action: &[f64], s_next: &[f64]) {
    let f = d_l + action.len();
    let n = data.len();
    if n == 0 {
        return;
    }
    data.copy_within(0..n - f, f);
    data[..d_l].copy_from_slice(s_next);
    data[d_l..f].copy_from_slice(action);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_newest_first_with_previous_action() {
        let mut h = History::new(3, 1, 1);
        h.reset(&[10.0]).unwrap();
        assert_eq!(h.data(), &[10.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        h.push(&[1.0], &[11.0]).unwrap();
        assert_eq!(h.data(), &[11.0, 1.0, 10.0, 0.0, 0.0, 0.0]);
        h.push(&[2.0], &[12.0]).unwrap();
        h.push(&[3.0], &[13.0]).unwrap();
        assert_eq!(h.data(), &[13.0, 3.0, 12.0, 2.0, 11.0, 1.0]);
        assert!(h.is_full());
    }

    #[test]
    fn shifted_matches_push() {
        let mut h = History::new(4, 2, 1);
        h.reset(&[1.0, 2.0]).unwrap();
        let s = History::shifted(h.data(), 2, &[0.5], &[3.0, 4.0]);
        h.push(&[0.5], &[3.0, 4.0]).unwrap();
        assert_eq!(s, h.data());
    }
}
