use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ctqc::completeness::{classify_completeness, CoverageParams, Subgroup, TemplateZRange};
use ctqc::presence::ZProfile;

fn range() -> TemplateZRange {
    TemplateZRange::new(0.0, 100.0).unwrap()
}

fn profile(values: Vec<f64>, z0: f64, dz: f64) -> ZProfile {
    let z = (0..values.len()).map(|i| z0 + i as f64 * dz).collect();
    ZProfile::new("s", values, z).unwrap()
}

fn values_of_len(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(prop_oneof![3 => 0.05f64..1.0, 1 => Just(0.0), 1 => 0.0f64..0.05], len)
}

fn values() -> impl Strategy<Value = Vec<f64>> {
    values_of_len(1..60)
}

fn rule(cov: [f64; 3], p: &CoverageParams) -> Subgroup {
    match cov.map(|c| c >= p.band_coverage_min) {
        [true, true, true] => Subgroup::Complete,
        [true, _, false] => Subgroup::SkullBase,
        [false, _, true] => Subgroup::SkullVault,
        [false, true, false] => Subgroup::Medial,
        _ => Subgroup::Incomplete,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    // a single slice has no neighbour to give it extent
    fn zero_padding_does_not_change_the_subgroup(
        v in values_of_len(2..60), z0 in -10.0f64..60.0, dz in 0.5f64..4.0, lead in 0usize..6, trail in 0usize..6,
    ) {
        let p = CoverageParams::default();
        let base = classify_completeness(&profile(v.clone(), z0, dz), &range(), &p);
        let mut padded = vec![0.0; lead];
        padded.extend(&v);
        padded.extend(std::iter::repeat_n(0.0, trail));
        let c = classify_completeness(&profile(padded, z0 - lead as f64 * dz, dz), &range(), &p);
        prop_assert_eq!(c.subgroup, base.subgroup);
        for (a, b) in c.band_coverage.iter().zip(base.band_coverage) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn every_profile_gets_the_rule_table_label(v in values(), z0 in -10.0f64..60.0, dz in 0.5f64..4.0) {
        let p = CoverageParams::default();
        let c = classify_completeness(&profile(v, z0, dz), &range(), &p);
        prop_assert!(Subgroup::ALL.contains(&c.subgroup));
        if c.note.is_none() {
            prop_assert_eq!(c.subgroup, rule(c.band_coverage, &p));
        } else {
            prop_assert_eq!(c.subgroup, Subgroup::Incomplete);
        }
    }

    #[test]
    fn raising_the_floor_never_completes_an_incomplete_series(
        v in values(), z0 in -10.0f64..60.0, dz in 0.5f64..4.0, f1 in 0.0f64..0.5, df in 0.0f64..0.5,
    ) {
        let lo = CoverageParams { presence_floor: f1, ..CoverageParams::default() };
        let hi = CoverageParams { presence_floor: f1 + df, ..CoverageParams::default() };
        let a = classify_completeness(&profile(v.clone(), z0, dz), &range(), &lo);
        let b = classify_completeness(&profile(v, z0, dz), &range(), &hi);
        if a.subgroup == Subgroup::Incomplete {
            prop_assert_ne!(b.subgroup, Subgroup::Complete);
        }
    }
}

/// Median presence per 1 mm bin over a population; the covered range is
/// the span of bins whose median reaches the floor.
fn covered_range(profiles: &[ZProfile], floor: f64) -> Option<(usize, usize)> {
    let mut bins: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for p in profiles {
        for (z, v) in p.iter() {
            bins.entry(z.floor() as usize).or_default().push(v);
        }
    }
    let covered: Vec<usize> = bins
        .into_iter()
        .filter_map(|(z, mut vs)| {
            vs.resize(profiles.len(), 0.0);
            vs.sort_by(f64::total_cmp);
            (vs[vs.len() / 2] >= floor).then_some(z)
        })
        .collect();
    Some((*covered.first()?, *covered.last()?))
}

#[test]
fn complete_population_spans_base_and_vault_populations() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let p = CoverageParams::default();
    let mut groups: BTreeMap<Subgroup, Vec<ZProfile>> = BTreeMap::new();
    for _ in 0..600 {
        let start = rng.random_range(0.0..80.0f64);
        let end = rng.random_range(start + 10.0..=100.0f64);
        let n = ((end - start) / 2.0) as usize + 1;
        let z: Vec<f64> = (0..n).map(|i| start + 2.0 * i as f64).collect();
        let v = z
            .iter()
            .map(|&z| (0.7 * (1.0 - ((z - 50.0) / 52.0).powi(2)).max(0.0).sqrt()).max(0.0))
            .collect();
        let prof = ZProfile::new("s", v, z).unwrap();
        let c = classify_completeness(&prof, &range(), &p);
        groups.entry(c.subgroup).or_default().push(prof);
    }
    let r = |g| covered_range(&groups[&g], p.presence_floor).unwrap();
    let (c_lo, c_hi) = r(Subgroup::Complete);
    for g in [Subgroup::SkullBase, Subgroup::SkullVault] {
        let (lo, hi) = r(g);
        assert!(
            c_lo <= lo && hi <= c_hi && (c_lo, c_hi) != (lo, hi),
            "{g}: {lo}..{hi} vs complete {c_lo}..{c_hi}"
        );
    }
}
