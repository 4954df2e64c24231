use std::collections::{HashMap, HashSet};

use dgd_core::data::{Pair, PairManifest};
use dgd_core::descriptor::Embedding;
use dgd_core::evalfuse::*;
use proptest::prelude::*;

fn ps(index: usize, score: f64, label: Option<u8>) -> PairScore {
    PairScore {
        index,
        image_a: format!("a{index}"),
        image_b: format!("b{index}"),
        score,
        label,
    }
}

fn labeled(pos: &[f64], neg: &[f64]) -> Vec<PairScore> {
    pos.iter()
        .map(|&s| (s, 1))
        .chain(neg.iter().map(|&s| (s, 0)))
        .enumerate()
        .map(|(i, (s, l))| ps(i, s, Some(l)))
        .collect()
}

fn brute_auc(scores: &[PairScore]) -> f64 {
    let pos: Vec<f64> = scores.iter().filter(|s| s.label == Some(1)).map(|s| s.score).collect();
    let neg: Vec<f64> = scores.iter().filter(|s| s.label == Some(0)).map(|s| s.score).collect();
    let mut credit = 0.0;
    for p in &pos {
        for n in &neg {
            credit += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
        }
    }
    credit / (pos.len() * neg.len()) as f64
}

fn unit(v: &[f64]) -> Embedding {
    Embedding::normalized(v).unwrap()
}

fn pair_manifest(pairs: &[(&str, &str)]) -> PairManifest {
    PairManifest::new(
        pairs
            .iter()
            .map(|(a, b)| Pair {
                image_a: a.to_string(),
                image_b: b.to_string(),
                label: None,
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn cosine_examples() {
    let a = unit(&[0.6, 0.8]);
    assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
    assert_eq!(cosine_similarity(&unit(&[1.0, 0.0]), &unit(&[0.0, 1.0])).unwrap(), 0.0);
    assert_eq!(cosine_similarity(&unit(&[1.0, 0.0]), &unit(&[-1.0, 0.0])).unwrap(), -1.0);
    assert!(matches!(
        cosine_similarity(&unit(&[1.0, 0.0]), &unit(&[1.0, 0.0, 0.0])),
        Err(EvalError::DimensionMismatch { .. })
    ));
}

#[test]
fn score_pairs_examples() {
    let mut emb = HashMap::new();
    emb.insert("x".to_string(), unit(&[1.0, 2.0, 3.0]));
    emb.insert("y".to_string(), unit(&[1.0, 2.0, 3.0]));
    emb.insert("z".to_string(), unit(&[-3.0, 0.0, 1.0]));
    assert!(score_pairs(&emb, &PairManifest::default()).unwrap().is_empty());

    let scores = score_pairs(&emb, &pair_manifest(&[("x", "y"), ("x", "z")])).unwrap();
    assert_eq!(scores.len(), 2);
    assert!((scores[0].score - 1.0).abs() < 1e-9);
    assert_eq!(scores[1].index, 1);
    assert_eq!((scores[1].image_a.as_str(), scores[1].image_b.as_str()), ("x", "z"));

    match score_pairs(&emb, &pair_manifest(&[("x", "missing.pgm")])) {
        Err(EvalError::MissingEmbedding(p)) => assert_eq!(p, "missing.pgm"),
        other => panic!("expected MissingEmbedding, got {other:?}"),
    }
}

#[test]
fn auc_examples() {
    assert_eq!(auc(&labeled(&[0.9, 0.8], &[0.2, 0.1])).unwrap(), 1.0);
    assert_eq!(auc(&labeled(&[0.5, 0.5], &[0.5, 0.5])).unwrap(), 0.5);
    assert_eq!(auc(&labeled(&[0.9, 0.4], &[0.5, 0.3])).unwrap(), 0.75);
    assert!(matches!(auc(&labeled(&[0.9], &[])), Err(EvalError::OneClassOnly)));
    assert!(matches!(auc(&labeled(&[], &[0.1])), Err(EvalError::OneClassOnly)));
    assert!(matches!(
        auc(&[ps(0, 0.1, None), ps(1, 0.2, Some(1))]),
        Err(EvalError::MissingLabel { index: 0 })
    ));
}

fn scores_strategy() -> impl Strategy<Value = Vec<PairScore>> {
    // values from a small grid so ties are common
    prop::collection::vec((0u8..12, any::<bool>()), 2..60)
        .prop_filter("both classes", |v| v.iter().any(|x| x.1) && v.iter().any(|x| !x.1))
        .prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (s, l))| ps(i, f64::from(s) / 11.0 - 0.5, Some(u8::from(l))))
                .collect()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn auc_matches_brute_force(scores in scores_strategy()) {
        prop_assert!((auc(&scores).unwrap() - brute_auc(&scores)).abs() <= 1e-12);
    }

    #[test]
    fn auc_invariant_under_increasing_transform(scores in scores_strategy()) {
        let mapped: Vec<PairScore> = scores
            .iter()
            .map(|s| PairScore { score: (3.0 * s.score).exp() + 7.0, ..s.clone() })
            .collect();
        prop_assert_eq!(auc(&scores).unwrap(), auc(&mapped).unwrap());
    }

    #[test]
    fn flipping_labels_complements_auc(raw in prop::collection::vec(-1.0f64..1.0, 4..50), split in 1usize..3) {
        let mut seen = HashSet::new();
        prop_assume!(raw.iter().all(|x| seen.insert(x.to_bits())));
        let scores: Vec<PairScore> = raw
            .iter()
            .enumerate()
            .map(|(i, &s)| ps(i, s, Some(u8::from(i % (split + 1) == 0))))
            .collect();
        let flipped: Vec<PairScore> = scores
            .iter()
            .map(|s| PairScore { label: s.label.map(|l| 1 - l), ..s.clone() })
            .collect();
        prop_assert!((auc(&flipped).unwrap() - (1.0 - auc(&scores).unwrap())).abs() < 1e-12);
    }

    #[test]
    fn fusing_copies_is_identity(scores in scores_strategy(), copies in 1usize..5) {
        let inputs = vec![scores.clone(); copies];
        prop_assert_eq!(fuse(&inputs, None).unwrap(), scores);
    }

    #[test]
    fn mined_groups_partition_touched_images(
        edges in prop::collection::vec((0u8..15, 0u8..15, 0u8..8), 1..30),
        k_frac in 0.0f64..=1.0,
    ) {
        let scores: Vec<PairScore> = edges
            .iter()
            .filter(|(a, b, _)| a != b)
            .enumerate()
            .map(|(i, (a, b, s))| PairScore {
                index: i,
                image_a: format!("img{a}"),
                image_b: format!("img{b}"),
                score: f64::from(*s) / 8.0,
                label: None,
            })
            .collect();
        let k = (k_frac * scores.len() as f64).floor() as usize;
        let mined = mine_pseudo(&scores, k, 100).unwrap();

        let mut order: Vec<&PairScore> = scores.iter().collect();
        order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
        let touched: HashSet<&str> = order[..k]
            .iter()
            .flat_map(|s| [s.image_a.as_str(), s.image_b.as_str()])
            .collect();
        let listed: Vec<&str> = mined.paths().map(|(_, p)| p).collect();
        prop_assert_eq!(listed.len(), touched.len());
        prop_assert_eq!(listed.into_iter().collect::<HashSet<_>>(), touched);
        for (i, id) in mined.groups().keys().enumerate() {
            prop_assert_eq!(*id, 100 + i as u64);
        }
        // each selected pair lands inside one group
        let group_of: HashMap<&str, u64> = mined.paths().map(|(id, p)| (p, id)).collect();
        for s in &order[..k] {
            prop_assert_eq!(group_of[s.image_a.as_str()], group_of[s.image_b.as_str()]);
        }
    }
}

fn named(pairs: &[(&str, &str, f64)]) -> Vec<PairScore> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, (a, b, s))| PairScore {
            index: i,
            image_a: a.to_string(),
            image_b: b.to_string(),
            score: *s,
            label: None,
        })
        .collect()
}

#[test]
fn mine_examples() {
    let scores = named(&[("a", "b", 0.9), ("b", "c", 0.8), ("d", "e", 0.1)]);
    assert!(mine_pseudo(&scores, 0, 7).unwrap().is_empty());

    let two = mine_pseudo(&scores, 2, 7).unwrap();
    assert_eq!(two.identity_count(), 1);
    assert_eq!(two.groups()[&7], vec!["a", "b", "c"]);

    let all = mine_pseudo(&scores, 3, 7).unwrap();
    assert_eq!(all.identity_count(), 2);
    assert_eq!(all.groups()[&8], vec!["d", "e"]);

    assert!(matches!(
        mine_pseudo(&scores, 4, 0),
        Err(EvalError::KTooLarge { k: 4, available: 3 })
    ));
}

#[test]
fn mine_breaks_ties_by_index() {
    let scores = named(&[("a", "b", 0.5), ("c", "d", 0.5), ("e", "f", 0.5)]);
    let m = mine_pseudo(&scores, 1, 0).unwrap();
    assert_eq!(m.groups()[&0], vec!["a", "b"]);
}

#[test]
fn fuse_examples() {
    let a = named(&[("x", "y", 0.2)]);
    let b = named(&[("x", "y", 0.4)]);
    assert!((fuse(&[a.clone(), b.clone()], None).unwrap()[0].score - 0.3).abs() < 1e-15);

    let zero = named(&[("x", "y", 0.0)]);
    let one = named(&[("x", "y", 1.0)]);
    assert_eq!(fuse(&[zero, one], Some(&[3.0, 1.0])).unwrap()[0].score, 0.25);

    let longer = named(&[("x", "y", 0.4), ("x", "z", 0.1)]);
    assert!(matches!(
        fuse(&[a.clone(), longer], None),
        Err(EvalError::LengthMismatch { input: 1, .. })
    ));
    let reordered = named(&[("y", "x", 0.4)]);
    assert!(matches!(
        fuse(&[a.clone(), reordered], None),
        Err(EvalError::OrderMismatch { input: 1, row: 0 })
    ));
    assert!(matches!(fuse(&[a.clone(), b.clone()], Some(&[1.0])), Err(EvalError::InvalidWeights(_))));
    assert!(matches!(fuse(&[a, b], Some(&[0.0, 0.0])), Err(EvalError::InvalidWeights(_))));
    assert!(fuse(&[], None).is_err());
}

fn views(map: &[(&str, &[&[f64]])]) -> HashMap<String, Vec<Embedding>> {
    map.iter()
        .map(|(name, vs)| (name.to_string(), vs.iter().map(|v| unit(v)).collect()))
        .collect()
}

#[test]
fn tta_examples() {
    let manifest = pair_manifest(&[("A", "B")]);
    let same = views(&[("A", &[&[1.0, 0.0], &[0.0, 1.0]]), ("B", &[&[1.0, 0.0], &[0.0, 1.0]])]);
    for mode in [TtaMode::MeanSim, TtaMode::MeanEmb] {
        assert!((tta_score(&same, &manifest, mode).unwrap()[0].score - 1.0).abs() < 1e-12);
    }
    let skew = views(&[("A", &[&[1.0, 0.0], &[0.0, 1.0]]), ("B", &[&[1.0, 0.0], &[1.0, 0.0]])]);
    assert_eq!(tta_score(&skew, &manifest, TtaMode::MeanSim).unwrap()[0].score, 0.5);
    let emb = tta_score(&skew, &manifest, TtaMode::MeanEmb).unwrap()[0].score;
    assert!((emb - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);

    let ragged = views(&[("A", &[&[1.0, 0.0], &[0.0, 1.0]]), ("B", &[&[1.0, 0.0]])]);
    assert!(matches!(
        tta_score(&ragged, &manifest, TtaMode::MeanSim),
        Err(EvalError::ViewCountMismatch { .. })
    ));
}

#[test]
fn single_view_tta_equals_plain_scoring() {
    let vecs: [(&str, [f64; 3]); 3] = [("p", [1.0, 2.0, 0.5]), ("q", [-1.0, 0.3, 2.0]), ("r", [0.2, 0.2, 0.9])];
    let plain: HashMap<String, Embedding> = vecs.iter().map(|(n, v)| (n.to_string(), unit(v))).collect();
    let single: HashMap<String, Vec<Embedding>> =
        vecs.iter().map(|(n, v)| (n.to_string(), vec![unit(v)])).collect();
    let manifest = pair_manifest(&[("p", "q"), ("q", "r"), ("p", "r")]);
    let base = score_pairs(&plain, &manifest).unwrap();
    for mode in [TtaMode::MeanSim, TtaMode::MeanEmb] {
        let t = tta_score(&single, &manifest, mode).unwrap();
        for (x, y) in base.iter().zip(&t) {
            assert!((x.score - y.score).abs() < 1e-15);
        }
    }
}

#[test]
fn score_csv_roundtrip() {
    let scores = labeled(&[0.1 + 0.2, -0.75], &[1.0 / 3.0]);
    let text = scores_to_csv(&scores);
    assert!(text.starts_with("index,imageA,imageB,score,label\n"));
    assert_eq!(parse_scores(&text).unwrap(), scores);

    let unlabeled = named(&[("x", "y", 0.25)]);
    let text = scores_to_csv(&unlabeled);
    assert_eq!(text, "index,imageA,imageB,score\n0,x,y,0.25\n");
    assert_eq!(parse_scores(&text).unwrap(), unlabeled);

    assert!(matches!(
        parse_scores("index,imageA,imageB,score\n0,x,y,abc\n"),
        Err(EvalError::Parse { line: 2, .. })
    ));
    assert!(parse_scores("index,imageA,score\n").is_err());
}

#[test]
fn auc_line_format() {
    assert_eq!(format_auc(1.0), "auc=1.000000");
    assert_eq!(format_auc(0.75), "auc=0.750000");
}
