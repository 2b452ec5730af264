use super::*;
use crate::tokenizer::tokenize;
use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use std::collections::{HashMap, HashSet};

fn qa(q: &str, a: &str, c: &str) -> QARecord {
    QARecord { question: q.into(), answer: a.into(), category: c.into() }
}

fn tuple(p: &PairRecord) -> (&str, &str, u8) {
    (p.q1.as_str(), p.q2.as_str(), p.label)
}

#[test]
fn two_record_category_has_one_outcome() {
    let recs = [qa("q1", "a1", "C"), qa("q2", "a2", "C")];
    for seed in 0..20 {
        let out = build_qa_intermediate_pairs(&recs, &BTreeSet::new(), seed);
        let got: Vec<_> = out.pairs.iter().map(tuple).collect();
        assert_eq!(got, vec![("q1", "a1", 1), ("q1", "a2", 0), ("q2", "a2", 1), ("q2", "a1", 0)]);
        assert_eq!(out.skipped.total(), 0);
    }
}

#[test]
fn singleton_category_is_skipped() {
    let out = build_qa_intermediate_pairs(&[qa("q", "a", "lonely")], &BTreeSet::new(), 1);
    assert!(out.pairs.is_empty());
    assert_eq!(out.skipped.singleton_category, 1);
}

#[test]
fn exclusion_drops_record_but_keeps_its_answer() {
    let recs = [qa("q1", "a1", "C"), qa("q2", "a2", "C")];
    let excl: BTreeSet<String> = ["q1".to_string()].into();
    let out = build_qa_intermediate_pairs(&recs, &excl, 3);
    let got: Vec<_> = out.pairs.iter().map(tuple).collect();
    assert_eq!(got, vec![("q2", "a2", 1), ("q2", "a1", 0)]);
    assert_eq!(out.skipped.excluded, 1);
}

#[test]
fn identical_answers_leave_nothing_to_sample() {
    let recs = [qa("q1", "same", "C"), qa("q2", "same", "C")];
    let out = build_qa_intermediate_pairs(&recs, &BTreeSet::new(), 0);
    assert!(out.pairs.is_empty());
    assert_eq!(out.skipped.no_distinct_answer, 2);
}

fn random_corpus(seed: u64) -> (Vec<QARecord>, BTreeSet<String>) {
    let mut rng = seeded_rng(seed);
    let n = rng.gen_range(1..120);
    let cats = rng.gen_range(1..12);
    let answers = rng.gen_range(1..40);
    let recs: Vec<QARecord> = (0..n)
        .map(|i| {
            let c = rng.gen_range(0..cats);
            qa(&format!("question {}", rng.gen_range(0..n)), &format!("answer {c} {}", rng.gen_range(0..answers)), &format!("cat{c}{}", i % 1))
        })
        .collect();
    let excl = recs.iter().filter(|_| rng.gen_bool(0.2)).map(|r| r.question.clone()).collect();
    (recs, excl)
}

// Independent checker over the raw corpus.
fn check_qa_pairs(recs: &[QARecord], excl: &BTreeSet<String>, out: &QaPairs) {
    let mut cats_of_answer: HashMap<&str, HashSet<&str>> = HashMap::new();
    let mut cats_of_question: HashMap<&str, HashSet<&str>> = HashMap::new();
    let mut true_answers: HashMap<&str, HashSet<&str>> = HashMap::new();
    for r in recs {
        cats_of_answer.entry(&r.answer).or_default().insert(&r.category);
        cats_of_question.entry(&r.question).or_default().insert(&r.category);
        true_answers.entry(&r.question).or_default().insert(&r.answer);
    }
    let pos = out.pairs.iter().filter(|p| p.label == 1).count();
    let neg = out.pairs.iter().filter(|p| p.label == 0).count();
    assert_eq!(pos, neg);
    for pair in out.pairs.chunks(2) {
        let (p, n) = (&pair[0], &pair[1]);
        assert_eq!((p.label, n.label), (1, 0));
        assert_eq!(p.q1, n.q1);
        assert!(!excl.contains(&p.q1));
        assert_ne!(n.q2, p.q2, "negative repeats the true answer");
        let shared = cats_of_question[p.q1.as_str()].intersection(&cats_of_answer[n.q2.as_str()]).count();
        assert!(shared > 0, "negative answer from another category");
    }
    let emitted = out.pairs.len() / 2;
    assert_eq!(emitted + out.skipped.total(), recs.len());
    assert_eq!(out.skipped.excluded, recs.iter().filter(|r| excl.contains(&r.question)).count());
}

#[test]
fn qa_pair_invariants_on_random_corpora() {
    for seed in 0..100 {
        let (recs, excl) = random_corpus(seed);
        let out = build_qa_intermediate_pairs(&recs, &excl, seed);
        check_qa_pairs(&recs, &excl, &out);
        assert_eq!(out, build_qa_intermediate_pairs(&recs, &excl, seed));
    }
}

#[test]
fn dedup_matches_hash_set_oracle() {
    let mut rng = seeded_rng(4);
    let mut recs: Vec<QARecord> = (0..990).map(|i| qa(&format!("q{i}"), &format!("a{}", i % 7), "c")).collect();
    for _ in 0..10 {
        let r = recs[rng.gen_range(0..990)].clone();
        let at = rng.gen_range(0..recs.len());
        recs.insert(at, r);
    }
    let oracle: HashSet<(String, String)> = recs.iter().map(|r| (r.question.clone(), r.answer.clone())).collect();
    let (kept, dropped) = dedup_qa(recs);
    assert_eq!(kept.len(), 990);
    assert_eq!(kept.len(), oracle.len());
    assert_eq!(dropped, 10);
}

fn balanced(n: usize) -> Vec<PairRecord> {
    (0..n).map(|i| PairRecord::new(format!("a{i}"), format!("b{i}"), (i % 2) as u8, PairSource::Synthetic)).collect()
}

fn key(p: &PairRecord) -> (String, String) {
    (p.q1.clone(), p.q2.clone())
}

fn check_split(s: &DatasetSplit) {
    let tr: HashSet<_> = s.train.iter().map(key).collect();
    let va: HashSet<_> = s.validation.iter().map(key).collect();
    let te: HashSet<_> = s.test.iter().map(key).collect();
    assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
    let ones = s.test.iter().filter(|p| p.label == 1).count();
    assert_eq!(ones * 2, s.test.len());
}

#[test]
fn five_splits_share_the_test_set() {
    let splits = make_splits(&balanced(1000), 5, [0.7, 0.15, 0.15], 42).unwrap();
    assert_eq!(splits.len(), 5);
    for s in &splits {
        check_split(s);
        assert_eq!(s.test, splits[0].test);
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (700, 150, 150));
    }
    assert_ne!(splits[0].train, splits[1].train);
    assert_eq!(make_splits(&balanced(1000), 1, [0.7, 0.15, 0.15], 42).unwrap().len(), 1);
}

#[test]
fn split_errors() {
    assert_eq!(make_splits(&balanced(10), 0, [0.7, 0.15, 0.15], 0), Err(DatasetError::ZeroSplits));
    assert!(matches!(make_splits(&balanced(10), 1, [0.7, 0.2, 0.2], 0), Err(DatasetError::BadFractions(_))));
    let skewed: Vec<PairRecord> = balanced(100).into_iter().filter(|p| p.label == 1 || p.q1 == "a0").collect();
    assert!(matches!(make_splits(&skewed, 1, [0.5, 0.0, 0.5], 0), Err(DatasetError::CannotBalance { .. })));
}

#[test]
fn duplicates_never_straddle_partitions() {
    let mut pairs = balanced(200);
    pairs.extend(balanced(60));
    for s in make_splits(&pairs, 3, [0.6, 0.2, 0.2], 5).unwrap() {
        check_split(&s);
        assert_eq!(s.train.len() + s.validation.len() + s.test.len(), 200);
    }
}

#[test]
fn split_properties_on_random_configurations() {
    let mut rng = seeded_rng(77);
    for _ in 0..100 {
        let n = rng.gen_range(20..400);
        let pairs: Vec<PairRecord> = (0..n)
            .map(|_| {
                let a = rng.gen_range(0..n);
                PairRecord::new(format!("x{a}"), format!("y{}", rng.gen_range(0..5)), rng.gen_range(0..2), PairSource::Qq)
            })
            .collect();
        let test = rng.gen_range(0.05..0.3);
        let val = rng.gen_range(0.0..(1.0 - test));
        let k = rng.gen_range(1..6);
        match make_splits(&pairs, k, [1.0 - test - val, val, test], rng.gen()) {
            Ok(splits) => {
                assert_eq!(splits.len(), k);
                for s in &splits {
                    check_split(s);
                    assert_eq!(s.test, splits[0].test);
                }
            }
            Err(DatasetError::CannotBalance { .. }) => {}
            Err(e) => panic!("{e}"),
        }
    }
}

#[test]
fn curve_subsets_nest_and_balance() {
    let train = balanced(700);
    let subs = learning_curve_subsets(&train, &[32, 128, 512], 9).unwrap();
    assert_eq!(subs.iter().map(Vec::len).collect::<Vec<_>>(), vec![32, 128, 512]);
    for w in subs.windows(2) {
        assert_eq!(&w[1][..w[0].len()], &w[0][..]);
    }
    let full = learning_curve_subsets(&train, &[700], 9).unwrap().remove(0);
    let mut a = full.clone();
    let mut b = train.clone();
    a.sort();
    b.sort();
    assert_eq!(a, b);
    assert_eq!(learning_curve_subsets(&train, &[701], 0), Err(DatasetError::SubsetTooLarge { size: 701, available: 700 }));

    let mut rng = seeded_rng(3);
    for _ in 0..50 {
        let n = rng.gen_range(10..300);
        let pairs: Vec<PairRecord> =
            (0..n).map(|i| PairRecord::new(format!("p{i}"), "q", u8::from(rng.gen_bool(0.5)), PairSource::Synthetic)).collect();
        let minority = pairs.iter().filter(|p| p.label == 1).count().min(pairs.iter().filter(|p| p.label == 0).count());
        let mut sizes: Vec<usize> = (0..3).map(|_| rng.gen_range(0..=n)).collect();
        sizes.sort_unstable();
        let subs = learning_curve_subsets(&pairs, &sizes, rng.gen()).unwrap();
        for (i, s) in subs.iter().enumerate() {
            assert_eq!(s.len(), sizes[i]);
            if i > 0 {
                let prev: HashSet<_> = subs[i - 1].iter().collect();
                assert!(prev.iter().all(|p| s.contains(p)), "not nested");
            }
            if s.len() <= 2 * minority {
                let ones = s.iter().filter(|p| p.label == 1).count() as i64;
                assert!((2 * ones - s.len() as i64).abs() <= 1);
            }
        }
    }
}

#[test]
fn leakage_gate_detects_shared_questions() {
    let fin = vec![PairRecord::new("how to treat a cold", "cold cure", 1, PairSource::Synthetic)];
    let clean = vec![PairRecord::new("how to treat flu", "rest", 1, PairSource::QaPos)];
    assert!(leakage_gate(&fin, &clean).is_ok());
    // an answer equal to a final question is not a leak
    let answer_only = vec![PairRecord::new("other", "cold cure", 1, PairSource::QaPos)];
    assert!(leakage_gate(&fin, &answer_only).is_ok());
    let qq = vec![PairRecord::new("x", "cold cure", 1, PairSource::Qq)];
    assert!(matches!(leakage_gate(&fin, &qq), Err(DatasetError::Leakage { count: 1, .. })));
}

fn toy_spec() -> SyntheticSpec {
    let cluster = |cat: &str, terms: &[&str]| SynonymCluster { category: cat.into(), terms: terms.iter().map(|t| t.to_string()).collect() };
    SyntheticSpec {
        seed: 1,
        in_domain: DomainSpec {
            name: "clinic".into(),
            clusters: vec![
                cluster("throat", &["sore throat", "throat pain"]),
                cluster("throat", &["strep throat", "strep"]),
                cluster("skin", &["rash", "hives"]),
                cluster("skin", &["acne", "pimples"]),
            ],
            critical_pairs: vec![("sore throat".into(), "strep throat".into()), ("rash".into(), "acne".into())],
        },
        out_of_domain: DomainSpec {
            name: "garage".into(),
            clusters: vec![cluster("engine", &["motor", "engine"]), cluster("engine", &["gearbox", "transmission"])],
            critical_pairs: vec![("motor".into(), "gearbox".into())],
        },
        intents: vec![
            IntentSpec {
                name: "treat".into(),
                question_templates: vec!["how do {who} treat {term} ?".into(), "what helps {who} with {term} ?".into()],
                answer_templates: vec!["rest usually helps {term} .".into()],
            },
            IntentSpec {
                name: "cause".into(),
                question_templates: vec!["what causes {term} for {who} ?".into(), "why does {who} get {term} ?".into()],
                answer_templates: vec!["{term} is often caused by stress .".into()],
            },
        ],
        contexts: ["i", "my son", "my wife", "my dad", "we", "a friend"].iter().map(|c| c.to_string()).collect(),
        sizes: SyntheticSizes { qa_records: 40, qq_pairs: 30, final_pairs: 30 },
        critical_fraction: 0.7,
        qa_category_by_intent: false,
    }
}

#[test]
fn synthetic_output_is_balanced_leak_free_and_deterministic() {
    let spec = toy_spec();
    let a = generate_synthetic(&spec).unwrap();
    assert_eq!(a, generate_synthetic(&spec).unwrap());
    assert_eq!(a.final_pairs.len(), 30);
    assert_eq!(a.qq.len(), 30);
    assert_eq!(a.qa.len(), 40);
    for set in [&a.final_pairs, &a.qq] {
        assert_eq!(set.iter().filter(|p| p.label == 1).count() * 2, set.len());
    }
    let final_q: HashSet<&str> = a.final_pairs.iter().flat_map(|p| [p.q1.as_str(), p.q2.as_str()]).collect();
    let qa_q: HashSet<&str> = a.qa.iter().map(|r| r.question.as_str()).collect();
    assert!(final_q.is_disjoint(&qa_q));
    // out-of-domain pairs never mention in-domain content words
    let inside: HashSet<String> = ["sore", "throat", "pain", "strep", "rash", "hives", "acne", "pimples"].iter().map(|s| s.to_string()).collect();
    for p in &a.qq {
        assert!(tokenize(&p.q1).iter().chain(&tokenize(&p.q2)).all(|t| !inside.contains(t)));
    }
    let mut other = spec.clone();
    other.seed = 2;
    assert_ne!(generate_synthetic(&other).unwrap().final_pairs, a.final_pairs);
}

#[test]
fn critical_substitution_structure() {
    let mut spec = toy_spec();
    spec.intents.truncate(1);
    spec.intents[0].question_templates.truncate(1);
    spec.in_domain.critical_pairs.truncate(1);
    spec.critical_fraction = 1.0;
    spec.sizes = SyntheticSizes { qa_records: 6, qq_pairs: 6, final_pairs: 6 };
    let out = generate_synthetic(&spec).unwrap();
    for pair in out.final_pairs.chunks(2) {
        let (pos, neg) = (&pair[0], &pair[1]);
        let (swap_pos, swap_neg) = if pos.q1.contains("sore throat") {
            (pos.q1.replace("sore throat", "throat pain"), pos.q1.replace("sore throat", "strep throat"))
        } else {
            (pos.q1.replace("strep throat", "strep"), pos.q1.replace("strep throat", "sore throat"))
        };
        assert_eq!(pos.q2, swap_pos);
        assert_eq!(neg.q2, swap_neg);
    }
}

#[test]
fn singleton_clusters_give_template_rewrites() {
    let mut spec = toy_spec();
    for c in spec.in_domain.clusters.iter_mut() {
        c.terms.truncate(1);
    }
    spec.in_domain.critical_pairs = vec![("sore throat".into(), "strep throat".into())];
    let out = generate_synthetic(&spec).unwrap();
    let terms = ["sore throat", "strep throat", "rash", "acne"];
    for p in out.final_pairs.iter().filter(|p| p.label == 1) {
        let t = terms.iter().find(|t| p.q1.contains(**t)).unwrap();
        assert!(p.q2.contains(t), "{p:?}");
        assert_ne!(p.q1, p.q2);
    }
}

#[test]
fn spec_validation() {
    let mut s = toy_spec();
    s.out_of_domain.clusters[0].terms.push("rash".into());
    assert!(matches!(s.validate(), Err(DatasetError::InvalidSpec(m)) if m.contains("share tokens")));
    let mut s = toy_spec();
    s.in_domain.critical_pairs.push(("sore throat".into(), "throat pain".into()));
    assert!(matches!(s.validate(), Err(DatasetError::InvalidSpec(m)) if m.contains("within one synonym cluster")));
    let mut s = toy_spec();
    s.in_domain.critical_pairs.push(("sore throat".into(), "unknown".into()));
    assert!(s.validate().is_err());
    let mut s = toy_spec();
    s.sizes.final_pairs = 7;
    assert!(s.validate().is_err());
    let mut s = toy_spec();
    s.intents[0].question_templates.push("no placeholder".into());
    assert!(s.validate().is_err());
    let mut s = toy_spec();
    s.contexts.clear();
    assert!(s.validate().is_err());
    let mut s = toy_spec();
    s.intents[1].answer_templates.push("ask {who} about {term}".into());
    assert!(matches!(s.validate(), Err(DatasetError::InvalidSpec(m)) if m.contains("uses {who}")));
}

#[test]
fn qa_answers_are_one_per_cluster_and_intent() {
    let spec = toy_spec();
    let out = generate_synthetic(&spec).unwrap();
    // the answer's term names the question's cluster; its template the intent
    let mut by_key: HashMap<(usize, usize), HashSet<&str>> = HashMap::new();
    for r in &out.qa {
        let ci = spec.in_domain.clusters.iter().position(|c| c.terms.iter().any(|t| r.question.contains(&format!(" {t} ")))).unwrap();
        let ii = spec
            .intents
            .iter()
            .position(|i| i.question_templates.iter().any(|t| t.split("{who}").next().is_some_and(|head| r.question.starts_with(head.split("{term}").next().unwrap()))))
            .unwrap();
        let cluster = &spec.in_domain.clusters[ci];
        assert!(r.answer.contains(&cluster.terms[ii % cluster.terms.len()]), "{r:?}");
        assert_eq!(r.category, spec.in_domain.clusters[ci].category);
        by_key.entry((ci, ii)).or_default().insert(&r.answer);
    }
    assert!(by_key.values().all(|a| a.len() == 1), "{by_key:?}");
    let questions: HashSet<&str> = out.qa.iter().map(|r| r.question.as_str()).collect();
    assert_eq!(questions.len(), out.qa.len());
}

#[test]
fn qa_category_by_intent_splits_categories() {
    let mut spec = toy_spec();
    spec.qa_category_by_intent = true;
    let out = generate_synthetic(&spec).unwrap();
    let plain = generate_synthetic(&toy_spec()).unwrap();
    for (r, p) in out.qa.iter().zip(&plain.qa) {
        assert_eq!((&r.question, &r.answer), (&p.question, &p.answer));
        let intent = if r.question.starts_with("how do") || r.question.starts_with("what helps") { "treat" } else { "cause" };
        assert_eq!(r.category, format!("{}/{intent}", p.category));
    }
    assert_eq!(out.final_pairs, plain.final_pairs);
}

#[test]
fn vocabulary_size_matches_word_count_on_synthetic_corpus() {
    let mut lines: Vec<String> = Vec::new();
    for seed in 1..=5 {
        let mut spec = toy_spec();
        spec.seed = seed;
        let c = generate_synthetic(&spec).unwrap();
        lines.extend(c.qa.iter().flat_map(|r| [r.question.clone(), r.answer.clone()]));
        lines.extend(c.qq.iter().chain(&c.final_pairs).flat_map(|p| [p.q1.clone(), p.q2.clone()]));
    }
    lines.truncate(1000);
    assert_eq!(lines.len(), 1000);
    for min_count in [1, 2, 5] {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for l in &lines {
            for w in l.split_whitespace() {
                *counts.entry(w).or_default() += 1;
            }
        }
        let expected = counts.values().filter(|&&n| n >= min_count).count() + 4;
        assert_eq!(crate::tokenizer::Vocabulary::build(&lines, min_count).unwrap().size(), expected);
    }
}
