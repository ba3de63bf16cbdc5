mod common;

use caseprompt_core::corpus::Case;
use caseprompt_core::retrieval_lab::{
    knn_predict, majority_label, plan_combination, rank_by_difficulty, simulate, slot1_accuracy,
    tune_k, Flag, Pattern, SlotRule,
};
use caseprompt_core::Hit;
use common::{brute_scores, case_base};

const TRAIN: [(&str, &str, &str); 12] = [
    ("t01", "steal bike night street", "theft"),
    ("t02", "steal phone bus", "theft"),
    ("t03", "steal wallet market crowd", "theft"),
    ("t04", "steal car park", "theft"),
    ("t05", "fraud online shop money", "fraud"),
    ("t06", "fraud phone call money bank", "fraud"),
    ("t07", "fraud investment money", "fraud"),
    ("t08", "fraud loan bank", "fraud"),
    ("t09", "hit victim knife street night", "assault"),
    ("t10", "hit victim bar", "assault"),
    ("t11", "hit neighbor dispute", "assault"),
    ("t12", "hit victim phone", "assault"),
];

fn tests() -> Vec<Case> {
    vec![
        Case::new("q1", "steal bike street", "theft"),
        Case::new("q2", "fraud money bank phone", "fraud"),
        Case::new("q3", "hit victim night", "assault"),
        Case::new("q4", "steal phone money", "fraud"),
        Case::new("q5", "phone bank", "assault"),
        Case::new("q6", "market crowd dispute", "theft"),
    ]
}

#[test]
fn difficulty_ranking_matches_exhaustive_oracle() {
    let base = case_base(&TRAIN);
    let docs: Vec<&str> = TRAIN.iter().map(|r| r.1).collect();
    let mut oracle: Vec<(f64, f64, String)> = tests()
        .iter()
        .map(|q| {
            let s = brute_scores(&docs, &q.fact, 1.5, 0.75);
            let mut order: Vec<usize> = (0..s.len()).collect();
            order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
            let top = &order[..10];
            let p10 = top.iter().filter(|&&d| TRAIN[d].2 == q.charge).count() as f64 / 10.0;
            (p10, s[order[0]], q.id.clone())
        })
        .collect();
    oracle.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(b.1.partial_cmp(&a.1).unwrap())
            .then(a.2.cmp(&b.2))
    });
    let ranking = rank_by_difficulty(&base, &tests()).unwrap();
    let got: Vec<&str> = ranking.ids().collect();
    let want: Vec<&str> = oracle.iter().map(|o| o.2.as_str()).collect();
    assert_eq!(got, want);
    for (e, o) in ranking.entries.iter().zip(&oracle) {
        assert!((e.precision - o.0).abs() < 1e-12);
        assert!((e.top1_score - o.1).abs() < 1e-9);
    }
}

#[test]
fn half_target_on_four_cases_flags_the_two_easiest() {
    let base = case_base(&TRAIN);
    let tests: Vec<Case> = tests().into_iter().take(4).collect();
    let ranking = rank_by_difficulty(&base, &tests).unwrap();
    let plan = simulate(&base, &tests, &ranking, 0.5, 2, &SlotRule::SameAsFirst).unwrap();
    assert_eq!(plan.realized_p1(), 0.5);
    let easiest: Vec<&str> = ranking.ids().take(2).collect();
    for case in &tests {
        let demos = &plan.assignments[&case.id];
        let want = if easiest.contains(&case.id.as_str()) {
            Flag::T
        } else {
            Flag::F
        };
        assert_eq!(demos.len(), 2);
        assert_ne!(demos[0].demo_id, demos[1].demo_id);
        for d in demos {
            assert_eq!(d.flag, want);
            let same = base.case_by_id(&d.demo_id).unwrap().charge == case.charge;
            assert_eq!(same, want == Flag::T);
        }
    }
    assert_eq!(slot1_accuracy(&base, &tests, &plan), 0.5);
}

#[test]
fn simulated_demos_follow_bm25_rank_within_class() {
    let base = case_base(&TRAIN);
    let q = tests().remove(0);
    let ranking = rank_by_difficulty(&base, std::slice::from_ref(&q)).unwrap();
    let plan = simulate(
        &base,
        std::slice::from_ref(&q),
        &ranking,
        1.0,
        3,
        &SlotRule::Fixed(vec![Flag::F, Flag::T]),
    )
    .unwrap();
    let ranked: Vec<Hit> = base.rank_all(&q.fact);
    let first_theft: Vec<&str> = ranked
        .iter()
        .filter(|h| base.label(h) == "theft")
        .map(|h| h.doc_id.as_str())
        .collect();
    let first_other = ranked.iter().find(|h| base.label(h) != "theft").unwrap();
    let demos = &plan.assignments["q1"];
    assert_eq!(demos[0].demo_id, first_theft[0]);
    assert_eq!(demos[1].demo_id, first_other.doc_id);
    assert_eq!(demos[2].demo_id, first_theft[1]);
}

#[test]
fn pattern_plans_realize_every_slot() {
    let base = case_base(&TRAIN);
    for pattern in Pattern::all_of_len(3) {
        let plan = plan_combination(&base, &tests(), &pattern).unwrap();
        for (id, demos) in &plan.assignments {
            let gold = &tests().into_iter().find(|c| &c.id == id).unwrap().charge;
            let flags: Vec<Flag> = demos
                .iter()
                .map(|d| Flag::from_match(&base.case_by_id(&d.demo_id).unwrap().charge == gold))
                .collect();
            assert_eq!(Pattern(flags), pattern);
        }
    }
}

#[test]
fn vote_tie_goes_to_larger_summed_score() {
    let base = case_base(&[
        ("a1", "x", "a"),
        ("a2", "y", "a"),
        ("b1", "z", "b"),
        ("b2", "w", "b"),
    ]);
    let hit = |id: &str, doc: usize, score: f64, rank: usize| Hit {
        doc_id: id.into(),
        doc,
        score,
        rank,
    };
    let hits = vec![
        hit("b1", 2, 1.5, 1),
        hit("a1", 0, 1.6, 2),
        hit("a2", 1, 1.5, 3),
        hit("b2", 3, 1.4, 4),
    ];
    assert_eq!(majority_label(&base, &hits).as_deref(), Some("a"));
    let equal = vec![hit("b1", 2, 1.0, 1), hit("a1", 0, 1.0, 2)];
    assert_eq!(majority_label(&base, &equal).as_deref(), Some("b"));
}

#[test]
fn tuned_k_is_best_on_validation_by_exhaustive_check() {
    let base = case_base(&TRAIN);
    let ks: Vec<usize> = (1..=11).step_by(2).collect();
    let t = tune_k(&base, &tests(), &ks).unwrap();
    let acc = |k: usize| {
        tests()
            .iter()
            .filter(|c| knn_predict(&base, c, k).unwrap() == c.charge)
            .count() as f64
            / 6.0
    };
    let best = ks.iter().map(|&k| acc(k)).fold(f64::MIN, f64::max);
    let smallest = *ks.iter().find(|&&k| acc(k) == best).unwrap();
    assert_eq!(t.best_k, smallest);
    for (k, a) in &t.accuracy_by_k {
        assert_eq!(*a, acc(*k));
    }
}
