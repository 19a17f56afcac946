use ebsg::dataset::RecordRow;
use proptest::prelude::*;

fn row() -> impl Strategy<Value = RecordRow> {
    (0usize..6, 1usize..5).prop_flat_map(|(n, f)| {
        (
            prop::collection::vec(prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), f), n),
            prop::collection::vec(0usize..10, n),
            prop::collection::vec((0..n.max(1), 0..n.max(1), 1usize..7).prop_map(|(s, o, p)| [s, o, p]), 0..4),
            any::<usize>(),
            any::<u64>(),
        )
            .prop_map(move |(node_features, node_labels, edges, scene_type, seed)| RecordRow {
                n,
                node_features,
                node_labels,
                edges: if n == 0 { Vec::new() } else { edges },
                scene_type,
                seed,
            })
    })
}

proptest! {
    #[test]
    fn rows_round_trip_bit_exactly(r in row()) {
        let text = serde_json::to_string(&r).unwrap();
        let back: RecordRow = serde_json::from_str(&text).unwrap();
        for (a, b) in r.node_features.iter().flatten().zip(back.node_features.iter().flatten()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        prop_assert_eq!(&back, &r);
        if r.n > 0 {
            let record = back.into_record().unwrap();
            prop_assert_eq!(RecordRow::from_record(&record), r);
        }
    }
}

#[test]
fn unknown_fields_and_ragged_rows_are_rejected() {
    let extra = r#"{"n":0,"node_features":[],"node_labels":[],"edges":[],"scene_type":0,"seed":1,"bogus":2}"#;
    assert!(serde_json::from_str::<RecordRow>(extra).is_err());
    let ragged = RecordRow {
        n: 2,
        node_features: vec![vec![0.0, 1.0], vec![2.0]],
        node_labels: vec![0, 1],
        edges: vec![],
        scene_type: 0,
        seed: 0,
    };
    assert!(ragged.into_record().is_err());
}
