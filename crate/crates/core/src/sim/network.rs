//! Partially synchronous links: seeded per-pair delays after GST, lossy
//! and slow before it, FIFO on every ordered pair.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Delivery decision for one message.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Delivery {
    At(u64),
    Dropped,
}

#[derive(Clone, Debug)]
pub struct Network {
    delta: u64,
    gst: u64,
    drop_prob: f64,
    /// Post-GST delay for each ordered pair of endpoints.
    delays: Vec<Vec<u64>>,
    /// Latest scheduled delivery per ordered pair, for the FIFO clamp.
    last: Vec<Vec<u64>>,
}

impl Network {
    /// `endpoints` counts nodes and clients. Entries of `matrix` override the
    /// random draw for node-to-node links; they must lie in `1..=delta`.
    pub fn new(endpoints: usize, delta: u64, gst: u64, drop_prob: f64, matrix: Option<&[Vec<u64>]>, rng: &mut ChaCha8Rng) -> Network {
        let mut delays = vec![vec![0; endpoints]; endpoints];
        for (s, row) in delays.iter_mut().enumerate() {
            for (r, d) in row.iter_mut().enumerate() {
                let drawn = rng.gen_range(1..=delta.max(1));
                *d = matrix
                    .and_then(|m| m.get(s))
                    .and_then(|row| row.get(r))
                    .copied()
                    .unwrap_or(drawn)
                    .clamp(1, delta.max(1));
            }
        }
        Network { delta, gst, drop_prob, delays, last: vec![vec![0; endpoints]; endpoints] }
    }

    pub fn delay(&self, s: usize, r: usize) -> u64 {
        self.delays[s][r]
    }

    /// Schedules a message sent at `now` from `s` to `r`.
    pub fn schedule(&mut self, now: u64, s: usize, r: usize, rng: &mut ChaCha8Rng) -> Delivery {
        let t = if now >= self.gst {
            now + self.delays[s][r]
        } else {
            if rng.gen_bool(self.drop_prob) {
                return Delivery::Dropped;
            }
            let raw = now + rng.gen_range(self.delta..=10 * self.delta);
            // Anything sent before GST still arrives by GST + delta.
            raw.min(self.gst + self.delta).max(now + 1)
        };
        let t = t.max(self.last[s][r]);
        self.last[s][r] = t;
        Delivery::At(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn post_gst_delay_is_bounded_and_fifo() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Network::new(4, 10, 100, 0.2, None, &mut rng);
        let mut prev = 0;
        for now in 0..400 {
            match net.schedule(now, 1, 2, &mut rng) {
                Delivery::At(t) => {
                    assert!(t >= prev);
                    assert!(t <= now.max(100) + 10);
                    if now >= 100 {
                        assert!(t - now <= 10);
                    }
                    prev = t;
                }
                Delivery::Dropped => assert!(now < 100),
            }
        }
    }
}
