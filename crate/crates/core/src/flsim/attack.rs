use rand::seq::index::sample;
use rand::{Rng, RngCore};

use crate::codec::{Bit, BitMessage};
use crate::flsim::config::AttackKind;

/// Corrupt a message after encoding. `Ones` sets every bit to `+1`; `Flip`
/// negates each bit independently with probability one half.
pub fn inject_attack<R: RngCore + ?Sized>(
    msg: &BitMessage,
    kind: AttackKind,
    rng: &mut R,
) -> BitMessage {
    let bits = match kind {
        AttackKind::None => msg.bits.clone(),
        AttackKind::Ones => vec![Bit::Plus; msg.bits.len()],
        AttackKind::Flip => msg
            .bits
            .iter()
            .map(|&b| if rng.random::<bool>() { b.flipped() } else { b })
            .collect(),
    };
    BitMessage {
        bits,
        ..msg.clone()
    }
}

/// Sorted ids of `count` attackers drawn uniformly from `0..users`.
pub fn select_attackers<R: RngCore + ?Sized>(users: usize, count: usize, rng: &mut R) -> Vec<u32> {
    let mut ids: Vec<u32> = sample(rng, users, count.min(users))
        .into_iter()
        .map(|i| i as u32)
        .collect();
    ids.sort_unstable();
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::SchemeTag;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn message(n: usize) -> BitMessage {
        BitMessage {
            user_id: 1,
            round: 2,
            scheme: SchemeTag::OneBit,
            bits: (0..n)
                .map(|i| if i % 3 == 0 { Bit::Minus } else { Bit::Plus })
                .collect(),
        }
    }

    #[test]
    fn ones_sets_every_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = inject_attack(&message(50), AttackKind::Ones, &mut rng);
        assert!(out.bits.iter().all(|&b| b == Bit::Plus));
        assert_eq!((out.user_id, out.round), (1, 2));
    }

    #[test]
    fn flip_is_reproducible_and_halves() {
        let msg = message(10_000);
        let a = inject_attack(&msg, AttackKind::Flip, &mut ChaCha8Rng::seed_from_u64(9));
        let b = inject_attack(&msg, AttackKind::Flip, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        let flipped = a.bits.iter().zip(&msg.bits).filter(|(x, y)| x != y).count();
        assert!((flipped as f64 / 10_000.0 - 0.5).abs() < 0.03, "{flipped}");
    }

    #[test]
    fn attacker_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ids = select_attackers(1000, 200, &mut rng);
        assert_eq!(ids.len(), 200);
        assert!(ids.windows(2).all(|w| w[0] < w[1]) && *ids.last().unwrap() < 1000);
    }
}
