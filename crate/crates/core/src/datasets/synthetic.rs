use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{question_set, DatasetError, PairRecord, PairSource, QARecord};
use crate::tokenizer::tokenize;
use crate::{derive_seed, seeded_rng, SeedRng};

/// Interchangeable terms sharing one answer category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynonymCluster {
    pub category: String,
    pub terms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub clusters: Vec<SynonymCluster>,
    /// Near-miss term pairs: same surface role, different meaning.
    #[serde(default)]
    pub critical_pairs: Vec<(String, String)>,
}

/// A question intent: its phrasings and the answers that fit it.
/// Question templates use `{who}` and `{term}` placeholders, answer
/// templates only `{term}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntentSpec {
    pub name: String,
    pub question_templates: Vec<String>,
    pub answer_templates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSizes {
    pub qa_records: usize,
    pub qq_pairs: usize,
    pub final_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub in_domain: DomainSpec,
    pub out_of_domain: DomainSpec,
    pub intents: Vec<IntentSpec>,
    /// Fillers for `{who}`.
    #[serde(default)]
    pub contexts: Vec<String>,
    pub sizes: SyntheticSizes,
    /// Share of negatives made by critical-term substitution; the rest flip
    /// the intent.
    pub critical_fraction: f64,
    /// QA categories become `category/intent`, so QA negatives keep the
    /// question's intent and differ only in the term.
    #[serde(default)]
    pub qa_category_by_intent: bool,
}

/// In-domain QA records, out-of-domain question pairs and the in-domain
/// final question-pair task.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub qa: Vec<QARecord>,
    pub qq: Vec<PairRecord>,
    pub final_pairs: Vec<PairRecord>,
}

const FINAL_STREAM: u64 = 1;
const QQ_STREAM: u64 = 2;
const QA_STREAM: u64 = 3;
const MAX_ATTEMPTS: usize = 10_000;

fn invalid(msg: String) -> DatasetError {
    DatasetError::InvalidSpec(msg)
}

fn content_tokens(domain: &DomainSpec) -> BTreeSet<String> {
    domain.clusters.iter().flat_map(|c| c.terms.iter().flat_map(|t| tokenize(t))).collect()
}

fn validate_domain(d: &DomainSpec) -> Result<BTreeMap<&str, usize>, DatasetError> {
    if d.clusters.is_empty() {
        return Err(invalid(format!("domain {}: no clusters", d.name)));
    }
    let mut owner = BTreeMap::new();
    for (ci, c) in d.clusters.iter().enumerate() {
        if c.terms.is_empty() || c.category.is_empty() {
            return Err(invalid(format!("domain {}: cluster {ci} needs a category and at least one term", d.name)));
        }
        for t in &c.terms {
            if tokenize(t).is_empty() {
                return Err(invalid(format!("domain {}: empty term", d.name)));
            }
            if owner.insert(t.as_str(), ci).is_some() {
                return Err(invalid(format!("domain {}: term {t:?} appears twice", d.name)));
            }
        }
    }
    for (a, b) in &d.critical_pairs {
        let (Some(&ca), Some(&cb)) = (owner.get(a.as_str()), owner.get(b.as_str())) else {
            return Err(invalid(format!("domain {}: critical pair ({a:?}, {b:?}) uses a term outside every cluster", d.name)));
        };
        if ca == cb {
            return Err(invalid(format!("domain {}: critical pair ({a:?}, {b:?}) lies within one synonym cluster", d.name)));
        }
    }
    Ok(owner)
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        validate_domain(&self.in_domain)?;
        validate_domain(&self.out_of_domain)?;
        let shared: Vec<String> = content_tokens(&self.in_domain).intersection(&content_tokens(&self.out_of_domain)).cloned().collect();
        if !shared.is_empty() {
            return Err(invalid(format!("in-domain and out-of-domain terms share tokens {shared:?}")));
        }
        if self.intents.is_empty() {
            return Err(invalid("no intents".into()));
        }
        let uses_who = |t: &String| t.contains("{who}");
        for i in &self.intents {
            if i.question_templates.is_empty() || i.answer_templates.is_empty() {
                return Err(invalid(format!("intent {}: needs question and answer templates", i.name)));
            }
            if let Some(t) = i.answer_templates.iter().find(|t| uses_who(t)) {
                return Err(invalid(format!("intent {}: answer template {t:?} uses {{who}}", i.name)));
            }
            if let Some(t) = i.question_templates.iter().chain(&i.answer_templates).find(|t| !t.contains("{term}")) {
                return Err(invalid(format!("intent {}: template {t:?} lacks {{term}}", i.name)));
            }
            if self.contexts.is_empty() && i.question_templates.iter().any(uses_who) {
                return Err(invalid(format!("intent {}: uses {{who}} but no contexts are given", i.name)));
            }
        }
        if !(0.0..=1.0).contains(&self.critical_fraction) {
            return Err(invalid("critical_fraction must be in [0, 1]".into()));
        }
        for d in [&self.in_domain, &self.out_of_domain] {
            if d.critical_pairs.is_empty() && self.intents.len() < 2 {
                return Err(invalid(format!("domain {}: negatives need critical pairs or at least two intents", d.name)));
            }
        }
        if self.sizes.final_pairs % 2 != 0 || self.sizes.qq_pairs % 2 != 0 {
            return Err(invalid("final_pairs and qq_pairs must be even".into()));
        }
        Ok(())
    }
}

fn fill(template: &str, who: &str, term: &str) -> String {
    template.replace("{who}", who).replace("{term}", term)
}

/// The one answer of a (cluster, intent): the cluster index picks the
/// template and the intent index picks the term, so every term shows up in
/// some answer. Distinct answers of a category never answer the same
/// question.
fn canonical_answer(intent_index: usize, intent: &IntentSpec, cluster_index: usize, cluster: &SynonymCluster) -> String {
    let term = &cluster.terms[intent_index % cluster.terms.len()];
    fill(&intent.answer_templates[cluster_index % intent.answer_templates.len()], "", term)
}

struct Generator<'a> {
    spec: &'a SyntheticSpec,
    domain: &'a DomainSpec,
    owner: BTreeMap<&'a str, usize>,
}

impl<'a> Generator<'a> {
    fn new(spec: &'a SyntheticSpec, domain: &'a DomainSpec) -> Result<Self, DatasetError> {
        Ok(Self { spec, domain, owner: validate_domain(domain)? })
    }

    fn who(&self, rng: &mut SeedRng) -> &'a str {
        self.spec.contexts.choose(rng).map_or("", String::as_str)
    }

    fn synonym(&self, term: &'a str, rng: &mut SeedRng) -> &'a str {
        let cluster = &self.domain.clusters[self.owner[term]];
        let others: Vec<&String> = cluster.terms.iter().filter(|t| t.as_str() != term).collect();
        others.choose(rng).map_or(term, |t| t.as_str())
    }

    /// One base question with a same-intent rewrite and a near-miss.
    fn base_pair(&self, rng: &mut SeedRng) -> Result<(String, String, String), DatasetError> {
        let intents = &self.spec.intents;
        let critical = !self.domain.critical_pairs.is_empty() && (intents.len() < 2 || rng.gen::<f64>() < self.spec.critical_fraction);
        let (term, partner) = if critical {
            let (a, b) = self.domain.critical_pairs.choose(rng).expect("non-empty");
            if rng.gen::<bool>() {
                (a.as_str(), Some(b.as_str()))
            } else {
                (b.as_str(), Some(a.as_str()))
            }
        } else {
            let c = self.domain.clusters.choose(rng).expect("validated");
            (c.terms.choose(rng).expect("validated").as_str(), None)
        };
        let ii = rng.gen_range(0..intents.len());
        let intent = &intents[ii];
        let who = self.who(rng);
        let t1 = intent.question_templates.choose(rng).expect("validated");
        let base = fill(t1, who, term);

        let syn = self.synonym(term, rng);
        let t2 = if syn == term {
            let others: Vec<&String> = intent.question_templates.iter().filter(|t| fill(t, who, term) != base).collect();
            *others.choose(rng).ok_or_else(|| invalid(format!("intent {}: no way to rewrite {base:?}", intent.name)))?
        } else {
            intent.question_templates.choose(rng).expect("validated")
        };
        let positive = fill(t2, who, syn);

        let negative = match partner {
            Some(p) => fill(intent.question_templates.choose(rng).expect("validated"), who, p),
            None => {
                let jj = (rng.gen_range(1..intents.len()) + ii) % intents.len();
                let flipped = &intents[jj];
                let cluster = &self.domain.clusters[self.owner[term]];
                let t3 = flipped.question_templates.choose(rng).expect("validated");
                fill(t3, who, cluster.terms.choose(rng).expect("validated"))
            }
        };
        Ok((base, positive, negative))
    }

    /// `count / 2` distinct base questions, each emitting a positive then a
    /// negative pair.
    fn pairs(&self, count: usize, source: PairSource, rng: &mut SeedRng) -> Result<Vec<PairRecord>, DatasetError> {
        let mut bases = BTreeSet::new();
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let mut attempts = 0;
            let (base, pos, neg) = loop {
                let (b, p, n) = self.base_pair(rng)?;
                if p != b && n != b && n != p && !bases.contains(&b) {
                    break (b, p, n);
                }
                attempts += 1;
                if attempts > MAX_ATTEMPTS {
                    return Err(invalid(format!("domain {}: cannot draw {} distinct base questions", self.domain.name, count / 2)));
                }
            };
            bases.insert(base.clone());
            out.push(PairRecord::new(base.clone(), pos, 1, source));
            out.push(PairRecord::new(base, neg, 0, source));
        }
        Ok(out)
    }

    /// QA records whose questions avoid `forbidden`; no question repeats.
    fn qa(&self, count: usize, forbidden: &BTreeSet<String>, rng: &mut SeedRng) -> Result<Vec<QARecord>, DatasetError> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let mut attempts = 0;
            let record = loop {
                let ci = rng.gen_range(0..self.domain.clusters.len());
                let cluster = &self.domain.clusters[ci];
                let term = cluster.terms.choose(rng).expect("validated").as_str();
                let ii = rng.gen_range(0..self.spec.intents.len());
                let intent = &self.spec.intents[ii];
                let who = self.who(rng);
                let question = fill(intent.question_templates.choose(rng).expect("validated"), who, term);
                let answer = canonical_answer(ii, intent, ci, cluster);
                if !forbidden.contains(&question) && !seen.contains(&(question.clone(), answer.clone())) {
                    let category = if self.spec.qa_category_by_intent { format!("{}/{}", cluster.category, intent.name) } else { cluster.category.clone() };
                    break QARecord { question, answer, category };
                }
                attempts += 1;
                if attempts > MAX_ATTEMPTS {
                    return Err(invalid(format!("domain {}: cannot draw {count} leakage-free QA records", self.domain.name)));
                }
            };
            seen.insert((record.question.clone(), record.answer.clone()));
            out.push(record);
        }
        Ok(out)
    }
}

/// Builds the three corpora. Final-task positives rewrite a base question
/// within its intent using a synonym (or another template when the term has
/// none); negatives substitute the critical partner term or switch to
/// another intent. QA questions never repeat a final-task question.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus, DatasetError> {
    spec.validate()?;
    let inside = Generator::new(spec, &spec.in_domain)?;
    let outside = Generator::new(spec, &spec.out_of_domain)?;
    let final_pairs = inside.pairs(spec.sizes.final_pairs, PairSource::Synthetic, &mut seeded_rng(derive_seed(spec.seed, FINAL_STREAM)))?;
    let qq = outside.pairs(spec.sizes.qq_pairs, PairSource::Qq, &mut seeded_rng(derive_seed(spec.seed, QQ_STREAM)))?;
    let forbidden = question_set(&final_pairs);
    let qa = inside.qa(spec.sizes.qa_records, &forbidden, &mut seeded_rng(derive_seed(spec.seed, QA_STREAM)))?;
    if let Some(q) = qa.iter().find(|r| forbidden.contains(&r.question)) {
        return Err(DatasetError::Leakage { count: 1, example: q.question.clone() });
    }
    Ok(SyntheticCorpus { qa, qq, final_pairs })
}
