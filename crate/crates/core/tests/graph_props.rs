mod common;

use std::collections::BTreeMap;

use ebsg_core::graph::{one_hot_dims, permute_labels, rule_violations, GtLabels, Rule, Triplet};
use ebsg_core::metrics::constraint_violation_rate;
use ebsg_core::rng::stream;
use ebsg_core::synth::GeneratorConfig;
use proptest::prelude::*;

fn multiset(l: &GtLabels) -> BTreeMap<Triplet, usize> {
    let mut m = BTreeMap::new();
    for t in l.triplets() {
        *m.entry(t).or_default() += 1;
    }
    m
}

/// Independent rule checker.
fn breaks_rules(l: &GtLabels, rules: &[Rule]) -> bool {
    rules.iter().any(|rule| match rule {
        Rule::MutualExclusion { predicates } => (0..l.n()).any(|s| {
            l.edges.iter().filter(|e| e.subject == s && predicates.contains(&e.predicate)).count() > 1
        }),
        Rule::TypeConstraint { predicate, subjects, objects } => l.edges.iter().any(|e| {
            e.predicate == *predicate && !(subjects.contains(&l.nodes[e.subject]) && objects.contains(&l.nodes[e.object]))
        }),
    })
}

proptest! {
    #[test]
    fn decode_inverts_one_hot(n in 1usize..7, seed in any::<u64>()) {
        let mut rng = stream(seed, &[]);
        let mut l = common::labels(n, 5, 4, 0.4, &mut rng);
        l.edges.sort();
        let sg = one_hot_dims(&l, 5, 4).unwrap();
        let mut back = sg.decode();
        back.edges.sort();
        prop_assert_eq!(back, l);
        for i in 0..n {
            prop_assert_eq!(sg.nodes.row(&[i]).iter().sum::<f64>(), 1.0);
            for j in 0..n {
                let s: f64 = sg.edges.row(&[i, j]).iter().sum();
                prop_assert_eq!(s, if i == j { 0.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn permutation_preserves_triplet_multiset(n in 1usize..7, seed in any::<u64>()) {
        let mut rng = stream(seed, &[]);
        let l = common::labels(n, 5, 4, 0.4, &mut rng);
        let perm = common::permutation(n, &mut rng);
        let p = permute_labels(&l, &perm).unwrap();
        prop_assert_eq!(multiset(&p), multiset(&l));
        let identity: Vec<usize> = (0..n).collect();
        let mut same = l.clone();
        same.edges.sort();
        prop_assert_eq!(permute_labels(&l, &identity).unwrap(), same);
    }
}

#[test]
fn rule_checker_agrees_with_hand_coded_oracle() {
    let rules = GeneratorConfig::default().rules;
    let mut rng = stream(31, &[]);
    let mut scenes = Vec::new();
    for _ in 0..50 {
        let n = 2 + scenes.len() % 4;
        let l = common::labels(n, 10, 7, 0.5, &mut rng);
        assert_eq!(!rule_violations(&l, &rules).is_empty(), breaks_rules(&l, &rules));
        scenes.push(l);
    }
    let expected = scenes.iter().filter(|l| breaks_rules(l, &rules)).count() as f64 / 50.0;
    assert_eq!(constraint_violation_rate(&scenes, &rules), Some(expected));
    assert!(expected > 0.0 && expected < 1.0, "{expected}");
}
