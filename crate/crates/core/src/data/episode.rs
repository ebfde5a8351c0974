//! Support/query episode sampling.

use std::collections::BTreeMap;
use std::fmt;

use super::FeatureRecord;
use crate::error::{GtlError, Result};
use crate::numerics::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// Every novel class takes part.
    AllWay,
    /// `N` classes drawn uniformly without replacement.
    NWay(usize),
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::AllWay => write!(f, "all-way"),
            Protocol::NWay(n) => write!(f, "{n}-way"),
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = GtlError;

    /// Accepts `all`, `all-way`, `N` or `N-way`.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        let t = t.strip_suffix("-way").unwrap_or(&t);
        if t == "all" {
            return Ok(Protocol::AllWay);
        }
        match t.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Protocol::NWay(n)),
            _ => Err(GtlError::Validation(format!("unknown protocol {s:?}"))),
        }
    }
}

/// Indices refer to positions in the record slice the episode was sampled
/// from. Support indices are grouped by class in `classes` order; query
/// indices are ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub protocol: Protocol,
    pub shots: usize,
    /// Selected classes, ascending.
    pub classes: Vec<u32>,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

impl Episode {
    pub fn way(&self) -> usize {
        self.classes.len()
    }

    pub fn support_records<'a>(&self, records: &'a [FeatureRecord]) -> Vec<&'a FeatureRecord> {
        self.support.iter().map(|&i| &records[i]).collect()
    }

    pub fn query_records<'a>(&self, records: &'a [FeatureRecord]) -> Vec<&'a FeatureRecord> {
        self.query.iter().map(|&i| &records[i]).collect()
    }
}

/// Draws `k` support records per selected class, uniformly over the class's
/// records whatever their modality; every other record of a selected class
/// becomes a query.
pub fn sample_episode(
    novel: &[FeatureRecord],
    protocol: Protocol,
    k: usize,
    rng: &mut SeededRng,
) -> Result<Episode> {
    if k == 0 {
        return Err(GtlError::Validation("shots must be at least 1".into()));
    }
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in novel.iter().enumerate() {
        by_class.entry(r.label).or_default().push(i);
    }
    let all: Vec<u32> = by_class.keys().copied().collect();
    if all.is_empty() {
        return Err(GtlError::Validation("no novel records to sample from".into()));
    }
    let mut classes = match protocol {
        Protocol::AllWay => all,
        Protocol::NWay(n) => {
            if n == 0 || n > all.len() {
                return Err(GtlError::Validation(format!(
                    "{n}-way episode needs {n} classes, {} available",
                    all.len()
                )));
            }
            let mut pool = all;
            // partial Fisher-Yates: the first n slots are a uniform draw
            for i in 0..n {
                let j = i + rng.below(pool.len() - i);
                pool.swap(i, j);
            }
            pool.truncate(n);
            pool
        }
    };
    classes.sort_unstable();

    for &c in &classes {
        let available = by_class[&c].len();
        if available < k + 1 {
            return Err(GtlError::InsufficientRecords {
                label: c,
                available,
                required: k + 1,
            });
        }
    }

    let mut support = Vec::with_capacity(classes.len() * k);
    let mut query = Vec::new();
    for &c in &classes {
        let mut idx = by_class[&c].clone();
        rng.shuffle(&mut idx);
        support.extend_from_slice(&idx[..k]);
        query.extend_from_slice(&idx[k..]);
    }
    query.sort_unstable();
    Ok(Episode {
        protocol,
        shots: k,
        classes,
        support,
        query,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use proptest::prelude::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    use super::*;

    fn records(classes: u32, per_class: usize, modalities: u8) -> Vec<FeatureRecord> {
        let mut out = Vec::new();
        for c in 0..classes {
            for j in 0..per_class {
                out.push(FeatureRecord {
                    id: out.len() as u64,
                    feature: vec![0.0],
                    label: 100 + c,
                    modality: (j % modalities as usize) as u8,
                });
            }
        }
        out
    }

    fn check(ep: &Episode, recs: &[FeatureRecord]) -> std::result::Result<(), String> {
        let s: BTreeSet<usize> = ep.support.iter().copied().collect();
        let q: BTreeSet<usize> = ep.query.iter().copied().collect();
        if s.len() != ep.support.len() || q.len() != ep.query.len() {
            return Err("duplicate index".into());
        }
        if !s.is_disjoint(&q) {
            return Err("support and query overlap".into());
        }
        let classes: BTreeSet<u32> = ep.classes.iter().copied().collect();
        for &c in &classes {
            let n = ep.support.iter().filter(|&&i| recs[i].label == c).count();
            if n != ep.shots {
                return Err(format!("class {c} has {n} shots"));
            }
        }
        if ep.support.iter().any(|&i| !classes.contains(&recs[i].label)) {
            return Err("support outside selected classes".into());
        }
        if ep.query.iter().any(|&i| !classes.contains(&recs[i].label)) {
            return Err("query label missing from support".into());
        }
        let covered = recs.iter().filter(|r| classes.contains(&r.label)).count();
        if covered != s.len() + q.len() {
            return Err("selected-class records not all used".into());
        }
        Ok(())
    }

    #[test]
    fn protocol_parsing() {
        assert_eq!("all-way".parse::<Protocol>().unwrap(), Protocol::AllWay);
        assert_eq!("5-way".parse::<Protocol>().unwrap(), Protocol::NWay(5));
        assert_eq!("5".parse::<Protocol>().unwrap(), Protocol::NWay(5));
        assert!("0-way".parse::<Protocol>().is_err());
        assert!("some".parse::<Protocol>().is_err());
    }

    #[test]
    fn one_query_per_class_when_k_is_count_minus_one() {
        let recs = records(6, 4, 2);
        let ep = sample_episode(&recs, Protocol::AllWay, 3, &mut SeededRng::new(0)).unwrap();
        assert_eq!(ep.way(), 6);
        assert_eq!(ep.query.len(), 6);
        check(&ep, &recs).unwrap();
    }

    #[test]
    fn insufficient_class_is_named() {
        let mut recs = records(3, 5, 1);
        recs.retain(|r| !(r.label == 101 && r.id % 5 > 1));
        match sample_episode(&recs, Protocol::AllWay, 2, &mut SeededRng::new(0)) {
            Err(GtlError::InsufficientRecords { label, available, required }) => {
                assert_eq!((label, available, required), (101, 2, 3));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn too_many_ways_is_rejected() {
        let recs = records(3, 5, 1);
        assert!(sample_episode(&recs, Protocol::NWay(4), 1, &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn thousand_episodes_are_disjoint() {
        let recs = records(12, 7, 2);
        let mut rng = SeededRng::new(3);
        for i in 0..1000 {
            let proto = if i % 2 == 0 { Protocol::AllWay } else { Protocol::NWay(5) };
            let ep = sample_episode(&recs, proto, 1 + i % 5, &mut rng).unwrap();
            check(&ep, &recs).unwrap();
        }
    }

    #[test]
    fn five_way_selection_is_uniform() {
        let recs = records(61, 2, 1);
        let mut rng = SeededRng::new(11);
        let mut counts = BTreeMap::<u32, f64>::new();
        let episodes = 10_000;
        for _ in 0..episodes {
            let ep = sample_episode(&recs, Protocol::NWay(5), 1, &mut rng).unwrap();
            for c in ep.classes {
                *counts.entry(c).or_default() += 1.0;
            }
        }
        assert_eq!(counts.len(), 61);
        let expected = episodes as f64 * 5.0 / 61.0;
        let sd = (expected * (1.0 - 5.0 / 61.0)).sqrt();
        let mut chi2 = 0.0;
        for &n in counts.values() {
            assert!((n - expected).abs() < 4.0 * sd, "count {n} vs {expected}");
            chi2 += (n - expected).powi(2) / expected;
        }
        let crit = ChiSquared::new(60.0).unwrap().inverse_cdf(0.99);
        assert!(chi2 < crit, "chi2 {chi2} >= {crit}");
    }

    proptest! {
        #[test]
        fn invariants_hold_for_random_seeds(
            seed in any::<u64>(),
            classes in 1u32..10,
            per_class in 2usize..9,
            k in 1usize..8,
            way in 1usize..10,
        ) {
            prop_assume!(k < per_class);
            let recs = records(classes, per_class, 3);
            let mut rng = SeededRng::new(seed);
            let proto = if way as u32 <= classes { Protocol::NWay(way) } else { Protocol::AllWay };
            let ep = sample_episode(&recs, proto, k, &mut rng).unwrap();
            prop_assert!(check(&ep, &recs).is_ok(), "{:?}", check(&ep, &recs));
            let again = sample_episode(&recs, proto, k, &mut SeededRng::new(seed)).unwrap();
            prop_assert_eq!(again, ep);
        }
    }
}
