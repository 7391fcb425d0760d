//! Dialog-session ingestion, training-pair extraction, knowledge bases and
//! test sets, plus a seeded synthetic corpus generator.

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogTurn {
    pub role: Role,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub turns: Vec<DialogTurn>,
}

/// One positive (agent query, user query) pair drawn from a single session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionPair {
    pub session_id: String,
    pub agent_query: String,
    pub user_query: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub knowledge_id: String,
    pub question: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub query: String,
    pub gold_ids: BTreeSet<String>,
}

/// How positive pairs are formed inside one multi-turn session.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Each user turn with the closest agent turn before it.
    #[default]
    Nearest,
    /// Every agent turn crossed with every user turn.
    AllCross,
}

pub const DEFAULT_MAX_PAIRS: usize = 8;

/// Trims and collapses internal whitespace runs to single spaces.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push((idx + 1, value));
    }
    Ok(out)
}

/// Writes one JSON object per line, LF-terminated.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| Error::Invalid(e.to_string()))?;
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn load_sessions(path: &Path) -> Result<Vec<Session>> {
    let mut seen = HashSet::new();
    let mut sessions = Vec::new();
    for (line, mut session) in read_jsonl::<Session>(path)? {
        if session.turns.is_empty() {
            return Err(parse_error(path, line, "session has no turns"));
        }
        for turn in &mut session.turns {
            turn.text = normalize_text(&turn.text);
            if turn.text.is_empty() {
                return Err(parse_error(path, line, "turn text is empty"));
            }
        }
        if !seen.insert(session.session_id.clone()) {
            return Err(parse_error(
                path,
                line,
                format!("duplicate session_id `{}`", session.session_id),
            ));
        }
        sessions.push(session);
    }
    Ok(sessions)
}

pub fn load_pairs(path: &Path) -> Result<Vec<SessionPair>> {
    let mut pairs = Vec::new();
    for (line, mut pair) in read_jsonl::<SessionPair>(path)? {
        pair.agent_query = normalize_text(&pair.agent_query);
        pair.user_query = normalize_text(&pair.user_query);
        if pair.agent_query.is_empty() || pair.user_query.is_empty() {
            return Err(parse_error(path, line, "pair has an empty query"));
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn load_knowledge(path: &Path) -> Result<Vec<KnowledgeEntry>> {
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (_, mut entry) in read_jsonl::<KnowledgeEntry>(path)? {
        entry.question = normalize_text(&entry.question);
        if !seen.insert(entry.knowledge_id.clone()) {
            return Err(Error::DuplicateId {
                kind: "knowledge",
                id: entry.knowledge_id,
            });
        }
        entries.push(entry);
    }
    Ok(entries)
}

pub fn load_testset(path: &Path, kb: &[KnowledgeEntry]) -> Result<Vec<TestCase>> {
    let cases: Vec<TestCase> = read_jsonl::<TestCase>(path)?
        .into_iter()
        .map(|(line, mut case)| {
            case.query = normalize_text(&case.query);
            if case.gold_ids.is_empty() {
                return Err(parse_error(path, line, "gold_ids is empty"));
            }
            Ok(case)
        })
        .collect::<Result<_>>()?;
    validate_testset(&cases, kb)?;
    Ok(cases)
}

/// Checks that every gold id of every case exists in the knowledge base.
pub fn validate_testset(cases: &[TestCase], kb: &[KnowledgeEntry]) -> Result<()> {
    let ids: HashSet<&str> = kb.iter().map(|e| e.knowledge_id.as_str()).collect();
    for case in cases {
        if let Some(missing) = case.gold_ids.iter().find(|g| !ids.contains(g.as_str())) {
            return Err(Error::UnknownGoldId(missing.clone()));
        }
    }
    Ok(())
}

/// Merges maximal runs of consecutive same-role turns, joining texts with a space.
pub fn splice_consecutive_turns(session: &Session) -> Session {
    let mut turns: Vec<DialogTurn> = Vec::with_capacity(session.turns.len());
    for turn in &session.turns {
        match turns.last_mut() {
            Some(last) if last.role == turn.role => {
                last.text.push(' ');
                last.text.push_str(&turn.text);
            }
            _ => turns.push(turn.clone()),
        }
    }
    Session {
        session_id: session.session_id.clone(),
        turns,
    }
}

pub fn extract_pairs(session: &Session, max_pairs: usize) -> Vec<SessionPair> {
    extract_pairs_with(session, max_pairs, Pairing::Nearest)
}

pub fn extract_pairs_with(session: &Session, max_pairs: usize, pairing: Pairing) -> Vec<SessionPair> {
    let pair = |agent: &DialogTurn, user: &DialogTurn| SessionPair {
        session_id: session.session_id.clone(),
        agent_query: agent.text.clone(),
        user_query: user.text.clone(),
    };
    let mut pairs = Vec::new();
    match pairing {
        Pairing::Nearest => {
            let mut last_agent: Option<&DialogTurn> = None;
            for turn in &session.turns {
                match turn.role {
                    Role::Agent => last_agent = Some(turn),
                    Role::User => {
                        if let Some(agent) = last_agent {
                            pairs.push(pair(agent, turn));
                        }
                    }
                }
            }
        }
        Pairing::AllCross => {
            let users: Vec<_> = session.turns.iter().filter(|t| t.role == Role::User).collect();
            for agent in session.turns.iter().filter(|t| t.role == Role::Agent) {
                for user in &users {
                    pairs.push(pair(agent, user));
                }
            }
        }
    }
    pairs.truncate(max_pairs);
    pairs
}

/// Splices every session and extracts its pairs, in session order.
pub fn pairs_from_sessions(sessions: &[Session], max_pairs: usize, pairing: Pairing) -> Vec<SessionPair> {
    sessions
        .iter()
        .flat_map(|s| extract_pairs_with(&splice_consecutive_turns(s), max_pairs, pairing))
        .collect()
}

pub const SYNTH_HOLDOUT: usize = 2;
const SYNTH_INTENT_WORDS: usize = 5;
const SYNTH_KEPT_INTENT_WORDS: usize = 4;
const SYNTH_FILLER_POOL: usize = 30;
const SYNTH_FILLERS_PER_SENTENCE: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub sessions: Vec<Session>,
    pub knowledge: Vec<KnowledgeEntry>,
    pub tests: Vec<TestCase>,
}

impl SyntheticCorpus {
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_jsonl(&dir.join("sessions.jsonl"), &self.sessions)?;
        write_jsonl(&dir.join("knowledge.jsonl"), &self.knowledge)?;
        write_jsonl(&dir.join("testset.jsonl"), &self.tests)
    }
}

/// Pronounceable pseudo-word for `index`; `syllables` fixes its length so
/// words of different lengths never collide.
fn synth_word(mut index: usize, syllables: usize) -> String {
    const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let base = CONSONANTS.len() * VOWELS.len();
    let mut word = String::with_capacity(2 * syllables);
    for _ in 0..syllables {
        let digit = index % base;
        index /= base;
        word.push(CONSONANTS[digit / VOWELS.len()] as char);
        word.push(VOWELS[digit % VOWELS.len()] as char);
    }
    word
}

/// Generates a deterministic corpus of `n_intents` intents.
///
/// Every intent owns five content words. A paraphrase keeps four of them and
/// mixes in two filler words from a shared pool, in shuffled order. The first
/// `paraphrases_per_intent - 2` paraphrases feed one session each (agent turn
/// from the next paraphrase, user turn from this one); the last two become
/// held-out test queries. The knowledge base holds one clean canonical
/// question per intent. `noise_rate` replaces each session or test token with
/// a uniformly random vocabulary word.
pub fn generate_synthetic_corpus(
    n_intents: usize,
    paraphrases_per_intent: usize,
    noise_rate: f64,
    seed: u64,
) -> Result<SyntheticCorpus> {
    if n_intents < 2 {
        return Err(Error::Invalid("n_intents must be at least 2".into()));
    }
    if paraphrases_per_intent < SYNTH_HOLDOUT + 1 {
        return Err(Error::Invalid("paraphrases_per_intent must be at least 3".into()));
    }
    if !(0.0..=1.0).contains(&noise_rate) {
        return Err(Error::Invalid("noise_rate must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let intent_words: Vec<Vec<String>> = (0..n_intents)
        .map(|i| {
            (0..SYNTH_INTENT_WORDS)
                .map(|k| synth_word(i * SYNTH_INTENT_WORDS + k, 3))
                .collect()
        })
        .collect();
    let fillers: Vec<String> = (0..SYNTH_FILLER_POOL).map(|k| synth_word(k, 2)).collect();
    let vocabulary: Vec<&str> = intent_words
        .iter()
        .flatten()
        .chain(fillers.iter())
        .map(String::as_str)
        .collect();

    let mut templates: Vec<Vec<Vec<&str>>> = Vec::with_capacity(n_intents);
    for words in &intent_words {
        let mut per_intent = Vec::with_capacity(paraphrases_per_intent);
        for _ in 0..paraphrases_per_intent {
            let dropped = rng.gen_range(0..SYNTH_INTENT_WORDS);
            let mut tokens: Vec<&str> = words
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != dropped)
                .map(|(_, w)| w.as_str())
                .collect();
            debug_assert_eq!(tokens.len(), SYNTH_KEPT_INTENT_WORDS);
            let picked = rand::seq::index::sample(&mut rng, fillers.len(), SYNTH_FILLERS_PER_SENTENCE);
            tokens.extend(picked.iter().map(|k| fillers[k].as_str()));
            tokens.shuffle(&mut rng);
            per_intent.push(tokens);
        }
        templates.push(per_intent);
    }

    let realize = |tokens: &[&str], rng: &mut ChaCha8Rng| -> String {
        tokens
            .iter()
            .map(|&t| {
                if noise_rate > 0.0 && rng.gen_bool(noise_rate) {
                    vocabulary[rng.gen_range(0..vocabulary.len())]
                } else {
                    t
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    };

    let n_train = paraphrases_per_intent - SYNTH_HOLDOUT;
    let mut sessions = Vec::with_capacity(n_intents * n_train);
    let mut knowledge = Vec::with_capacity(n_intents);
    let mut tests = Vec::with_capacity(n_intents * SYNTH_HOLDOUT);
    for (i, per_intent) in templates.iter().enumerate() {
        let knowledge_id = format!("k{i:03}");
        for k in 0..n_train {
            let agent = realize(&per_intent[(k + 1) % n_train], &mut rng);
            let user = realize(&per_intent[k], &mut rng);
            sessions.push(Session {
                session_id: format!("s{i:03}-{k:03}"),
                turns: vec![
                    DialogTurn {
                        role: Role::Agent,
                        text: agent,
                    },
                    DialogTurn {
                        role: Role::User,
                        text: user,
                    },
                ],
            });
        }
        for template in &per_intent[n_train..] {
            tests.push(TestCase {
                query: realize(template, &mut rng),
                gold_ids: BTreeSet::from([knowledge_id.clone()]),
            });
        }
        knowledge.push(KnowledgeEntry {
            knowledge_id,
            question: intent_words[i].join(" "),
        });
    }
    Ok(SyntheticCorpus {
        sessions,
        knowledge,
        tests,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn turn(role: Role, text: &str) -> DialogTurn {
        DialogTurn {
            role,
            text: text.into(),
        }
    }

    fn session(turns: Vec<DialogTurn>) -> Session {
        Session {
            session_id: "s".into(),
            turns,
        }
    }

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_sessions_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "s.jsonl",
            "{\"session_id\":\"a\",\"turns\":[{\"role\":\"agent\",\"text\":\" hi  there \"}]}\n\
             {\"session_id\":\"b\",\"turns\":[{\"role\":\"user\",\"text\":\"x\"},{\"role\":\"agent\",\"text\":\"y\"}]}\n",
        );
        let s = load_sessions(&p).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].session_id, "a");
        assert_eq!(s[0].turns[0].text, "hi there");
        assert_eq!(s[1].turns[1].role, Role::Agent);
    }

    #[test]
    fn empty_session_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "s.jsonl", "");
        assert!(load_sessions(&p).unwrap().is_empty());
    }

    #[test]
    fn unknown_role_cites_line() {
        let dir = tempfile::tempdir().unwrap();
        let ok = "{\"session_id\":\"a\",\"turns\":[{\"role\":\"user\",\"text\":\"x\"}]}";
        let body = format!(
            "{ok}\n{}\n{{\"session_id\":\"c\",\"turns\":[{{\"role\":\"bot\",\"text\":\"x\"}}]}}\n",
            ok.replace("\"a\"", "\"b\"")
        );
        let p = write(&dir, "s.jsonl", &body);
        match load_sessions(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_json_cites_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "s.jsonl", "{\"session_id\":\"a\",\"turns\":[{\"role\":\"user\",\"text\":\"x\"}]}\n{oops\n");
        let err = load_sessions(&p).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn splices_same_role_runs() {
        let s = session(vec![turn(Role::User, "a"), turn(Role::User, "b"), turn(Role::Agent, "c")]);
        let spliced = splice_consecutive_turns(&s);
        assert_eq!(spliced.turns, vec![turn(Role::User, "a b"), turn(Role::Agent, "c")]);

        let alternating = session(vec![turn(Role::User, "a"), turn(Role::Agent, "b"), turn(Role::User, "c")]);
        assert_eq!(splice_consecutive_turns(&alternating), alternating);
        let single = session(vec![turn(Role::Agent, "a")]);
        assert_eq!(splice_consecutive_turns(&single), single);
    }

    #[test]
    fn nearest_pairing() {
        let s = session(vec![
            turn(Role::Agent, "A1"),
            turn(Role::User, "U1"),
            turn(Role::Agent, "A2"),
            turn(Role::User, "U2"),
        ]);
        let pairs = extract_pairs(&s, 8);
        let got: Vec<_> = pairs.iter().map(|p| (p.agent_query.as_str(), p.user_query.as_str())).collect();
        assert_eq!(got, vec![("A1", "U1"), ("A2", "U2")]);
        assert!(pairs.iter().all(|p| p.session_id == "s"));
        assert!(extract_pairs(&session(vec![turn(Role::User, "U1")]), 8).is_empty());
    }

    #[test]
    fn pairing_truncates() {
        let mut turns = vec![turn(Role::Agent, "A")];
        for k in 0..5 {
            turns.push(turn(Role::User, &format!("U{k}")));
            turns.push(turn(Role::Agent, &format!("A{k}")));
        }
        let pairs = extract_pairs(&session(turns), 3);
        assert_eq!(pairs.len(), 3);
        assert_eq!(pairs[2].user_query, "U2");
    }

    #[test]
    fn all_cross_pairing() {
        let s = session(vec![
            turn(Role::User, "U0"),
            turn(Role::Agent, "A1"),
            turn(Role::User, "U1"),
            turn(Role::Agent, "A2"),
        ]);
        let pairs = extract_pairs_with(&s, 10, Pairing::AllCross);
        assert_eq!(pairs.len(), 4);
        assert_eq!((pairs[0].agent_query.as_str(), pairs[0].user_query.as_str()), ("A1", "U0"));
        assert_eq!(extract_pairs_with(&s, 3, Pairing::AllCross).len(), 3);
    }

    #[test]
    fn knowledge_and_testset_validation() {
        let dir = tempfile::tempdir().unwrap();
        let kb_path = write(
            &dir,
            "kb.jsonl",
            "{\"knowledge_id\":\"k1\",\"question\":\"a\"}\n{\"knowledge_id\":\"k2\",\"question\":\"b\"}\n{\"knowledge_id\":\"k3\",\"question\":\"c\"}\n",
        );
        let kb = load_knowledge(&kb_path).unwrap();
        assert_eq!(kb.len(), 3);
        let ts = write(&dir, "t.jsonl", "{\"query\":\"q\",\"gold_ids\":[\"k1\",\"k3\"]}\n");
        assert_eq!(load_testset(&ts, &kb).unwrap().len(), 1);

        let dup = write(&dir, "dup.jsonl", "{\"knowledge_id\":\"k1\",\"question\":\"a\"}\n{\"knowledge_id\":\"k1\",\"question\":\"b\"}\n");
        assert!(matches!(load_knowledge(&dup), Err(Error::DuplicateId { ref id, .. }) if id == "k1"));

        let missing = write(&dir, "m.jsonl", "{\"query\":\"q\",\"gold_ids\":[\"k9\"]}\n");
        let err = load_testset(&missing, &kb).unwrap_err();
        assert!(err.to_string().contains("k9"));
    }

    #[test]
    fn synthetic_counts() {
        let c = generate_synthetic_corpus(20, 10, 0.0, 7).unwrap();
        assert_eq!(c.sessions.len(), 20 * (10 - SYNTH_HOLDOUT));
        assert_eq!(c.knowledge.len(), 20);
        assert_eq!(c.tests.len(), 20 * SYNTH_HOLDOUT);
        assert!(c.tests.iter().all(|t| t.gold_ids.len() == 1));
        validate_testset(&c.tests, &c.knowledge).unwrap();
    }

    #[test]
    fn synthetic_is_deterministic() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        generate_synthetic_corpus(20, 10, 0.1, 7).unwrap().write_to(dir_a.path()).unwrap();
        generate_synthetic_corpus(20, 10, 0.1, 7).unwrap().write_to(dir_b.path()).unwrap();
        for f in ["sessions.jsonl", "knowledge.jsonl", "testset.jsonl"] {
            assert_eq!(
                std::fs::read(dir_a.path().join(f)).unwrap(),
                std::fs::read(dir_b.path().join(f)).unwrap()
            );
        }
        assert_ne!(
            generate_synthetic_corpus(20, 10, 0.1, 8).unwrap(),
            generate_synthetic_corpus(20, 10, 0.1, 7).unwrap()
        );
    }

    #[test]
    fn full_noise_draws_every_token_at_random() {
        // Clean intent-0 sentences never contain intent-1 content words. Under
        // full noise each of the 40 vocabulary words appears at rate 1/40.
        let noisy = generate_synthetic_corpus(2, 50, 1.0, 3).unwrap();
        let foreign: HashSet<&str> = noisy.knowledge[1].question.split(' ').collect();
        let tokens: Vec<&str> = noisy.sessions[..48]
            .iter()
            .flat_map(|s| s.turns.iter())
            .flat_map(|t| t.text.split(' '))
            .collect();
        let hits = tokens.iter().filter(|w| foreign.contains(*w)).count() as f64;
        let expected = tokens.len() as f64 * 5.0 / 40.0;
        assert!((hits - expected).abs() < 4.0 * (expected * 0.875).sqrt(), "{hits} vs {expected}");

        let clean = generate_synthetic_corpus(2, 50, 0.0, 3).unwrap();
        let clean_foreign = clean.sessions[..48]
            .iter()
            .flat_map(|s| s.turns.iter())
            .flat_map(|t| t.text.split(' '))
            .filter(|w| foreign.contains(*w))
            .count();
        assert_eq!(clean_foreign, 0);
    }

    #[test]
    fn synthetic_same_intent_overlap_exceeds_cross_intent() {
        // Reconstruct paraphrases from clean sessions: user turns are templates.
        let c = generate_synthetic_corpus(6, 8, 0.0, 11).unwrap();
        let per_intent = 8 - SYNTH_HOLDOUT;
        let bag = |text: &str| -> HashMap<String, usize> {
            let mut m = HashMap::new();
            for w in text.split(' ') {
                *m.entry(w.to_string()).or_default() += 1;
            }
            m
        };
        let overlap = |a: &HashMap<String, usize>, b: &HashMap<String, usize>| -> usize {
            a.iter().map(|(k, &n)| n.min(b.get(k).copied().unwrap_or(0))).sum()
        };
        let texts: Vec<(usize, HashMap<String, usize>)> = c
            .sessions
            .iter()
            .enumerate()
            .map(|(idx, s)| (idx / per_intent, bag(&s.turns[1].text)))
            .chain(c.tests.iter().enumerate().map(|(idx, t)| (idx / SYNTH_HOLDOUT, bag(&t.query))))
            .collect();
        let mut min_same = usize::MAX;
        let mut max_cross = 0;
        for (i, (ia, a)) in texts.iter().enumerate() {
            for (ib, b) in &texts[i + 1..] {
                let o = overlap(a, b);
                if ia == ib {
                    min_same = min_same.min(o);
                } else {
                    max_cross = max_cross.max(o);
                }
            }
        }
        assert!(min_same > max_cross, "same {min_same} cross {max_cross}");
    }

    #[test]
    fn synthetic_rejects_bad_args() {
        assert!(generate_synthetic_corpus(1, 10, 0.0, 0).is_err());
        assert!(generate_synthetic_corpus(5, 2, 0.0, 0).is_err());
        assert!(generate_synthetic_corpus(5, 5, 1.5, 0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_session() -> impl Strategy<Value = Session> {
            prop::collection::vec((any::<bool>(), "[a-c]{1,3}"), 1..12).prop_map(|turns| Session {
                session_id: "p".into(),
                turns: turns
                    .into_iter()
                    .map(|(agent, text)| DialogTurn {
                        role: if agent { Role::Agent } else { Role::User },
                        text,
                    })
                    .collect(),
            })
        }

        proptest! {
            #[test]
            fn splice_is_idempotent(s in arb_session()) {
                let once = splice_consecutive_turns(&s);
                prop_assert_eq!(splice_consecutive_turns(&once), once);
            }

            #[test]
            fn pair_count_is_bounded(s in arb_session(), max_pairs in 1usize..6) {
                let spliced = splice_consecutive_turns(&s);
                let users = spliced.turns.iter().filter(|t| t.role == Role::User).count();
                let pairs = extract_pairs(&spliced, max_pairs);
                prop_assert!(pairs.len() <= max_pairs.min(users));
                prop_assert!(pairs.iter().all(|p| p.session_id == s.session_id));
            }
        }
    }
}
