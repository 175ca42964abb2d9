//! Back-translation mixing schedule for warming up a neural system with
//! synthetic data from the phrase-based one.
//!
//! Iteration `t` takes `round(N · max(0, 1 − t/a))` pairs from the reverse
//! SMT system; the rest come from the reverse NMT system, half decoded
//! greedily and half by sampling.

use crate::error::{Error, Result};
use crate::phrase::Sentence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ScheduleMix {
    pub n_smt: u64,
    pub n_nmt_greedy: u64,
    pub n_nmt_sampled: u64,
}

impl ScheduleMix {
    pub fn total(&self) -> u64 {
        self.n_smt + self.n_nmt_greedy + self.n_nmt_sampled
    }
}

/// Computed in integers: `N·(a − t)/a` rounded half up, so large `N` never
/// loses precision.
pub fn backtranslation_mix(t: u64, n: u64, a: u64) -> Result<ScheduleMix> {
    if a == 0 {
        return Err(Error::InvalidArgument("transition length `a` must be positive".into()));
    }
    let n_smt = if t >= a {
        0
    } else {
        let num = n as u128 * (a - t) as u128;
        ((2 * num + a as u128) / (2 * a as u128)) as u64
    };
    let rest = n - n_smt;
    Ok(ScheduleMix {
        n_smt,
        n_nmt_greedy: rest.div_ceil(2),
        n_nmt_sampled: rest / 2,
    })
}

/// The first `n` pairs of each stream, in the order smt, greedy, sampled.
pub fn assemble_iteration_corpus(
    mix: &ScheduleMix,
    smt: &[(Sentence, Sentence)],
    nmt_greedy: &[(Sentence, Sentence)],
    nmt_sampled: &[(Sentence, Sentence)],
) -> Result<Vec<(Sentence, Sentence)>> {
    let streams = [
        ("smt", mix.n_smt, smt),
        ("greedy", mix.n_nmt_greedy, nmt_greedy),
        ("sampled", mix.n_nmt_sampled, nmt_sampled),
    ];
    for (name, want, pairs) in streams {
        if (pairs.len() as u64) < want {
            return Err(Error::InsufficientPairs {
                stream: name,
                requested: want as usize,
                available: pairs.len(),
            });
        }
    }
    Ok(streams
        .iter()
        .flat_map(|(_, want, pairs)| pairs[..*want as usize].iter().cloned())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_table() {
        let mix = |t| backtranslation_mix(t, 1_000_000, 30).unwrap();
        assert_eq!(mix(0), ScheduleMix { n_smt: 1_000_000, n_nmt_greedy: 0, n_nmt_sampled: 0 });
        assert_eq!(mix(15), ScheduleMix { n_smt: 500_000, n_nmt_greedy: 250_000, n_nmt_sampled: 250_000 });
        for t in 30..=60 {
            assert_eq!(mix(t).n_smt, 0);
            assert_eq!(mix(t).total(), 1_000_000);
        }
    }

    #[test]
    fn rounds_half_up_and_greedy_takes_the_odd_one() {
        // 5 · 1/2 = 2.5 → 3, leaving 2 for the neural streams
        assert_eq!(backtranslation_mix(1, 5, 2).unwrap(), ScheduleMix { n_smt: 3, n_nmt_greedy: 1, n_nmt_sampled: 1 });
        // 3 · 2/3 = 2, leaving 1 which goes to greedy
        assert_eq!(backtranslation_mix(1, 3, 3).unwrap(), ScheduleMix { n_smt: 2, n_nmt_greedy: 1, n_nmt_sampled: 0 });
    }

    #[test]
    fn zero_transition_is_rejected() {
        assert!(backtranslation_mix(0, 10, 0).is_err());
    }

    fn stream(tag: &str, n: usize) -> Vec<(Sentence, Sentence)> {
        (0..n).map(|i| (vec![format!("{tag}{i}")], vec![format!("o{i}")])).collect()
    }

    #[test]
    fn assembles_in_declared_order() {
        let mix = ScheduleMix { n_smt: 2, n_nmt_greedy: 1, n_nmt_sampled: 1 };
        let out = assemble_iteration_corpus(&mix, &stream("s", 4), &stream("g", 4), &stream("r", 4)).unwrap();
        let heads: Vec<&str> = out.iter().map(|p| p.0[0].as_str()).collect();
        assert_eq!(heads, ["s0", "s1", "g0", "r0"]);
        assert!(assemble_iteration_corpus(&ScheduleMix::default(), &[], &[], &[]).unwrap().is_empty());
    }

    #[test]
    fn deficient_stream_is_named() {
        let mix = ScheduleMix { n_smt: 1, n_nmt_greedy: 3, n_nmt_sampled: 0 };
        let err = assemble_iteration_corpus(&mix, &stream("s", 4), &stream("g", 2), &[]).unwrap_err();
        assert!(err.to_string().contains("greedy"));
    }
}
