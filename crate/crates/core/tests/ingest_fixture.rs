use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use longmem::backends::{ReferenceTokenizer, Tokenizer};
use longmem::chronicle::{validate_episode, SpeakerId};
use longmem::ingest::{annotation_sparsity, compute_stats, final_session_table, load_msc, SessionCounts};
use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn manifest() -> Value {
    serde_json::from_str(&std::fs::read_to_string(fixture("msc_fixture.manifest.json")).unwrap()).unwrap()
}

fn counts(v: &Value) -> SessionCounts {
    SessionCounts {
        episodes: v["episodes"].as_u64().unwrap() as usize,
        utterances: v["utterances"].as_u64().unwrap() as usize,
        summaries: v["summaries"].as_u64().unwrap() as usize,
    }
}

fn table(v: &Value) -> BTreeMap<u32, SessionCounts> {
    v.as_object().unwrap().iter().map(|(k, v)| (k.parse().unwrap(), counts(v))).collect()
}

#[test]
fn stats_match_hand_counted_manifest() {
    let m = manifest();
    let episodes = load_msc(fixture("msc_fixture.jsonl"), "train").unwrap();
    let stats = compute_stats(&episodes, &ReferenceTokenizer).unwrap();
    assert_eq!(stats.episodes as u64, m["episodes"].as_u64().unwrap());
    assert_eq!(stats.per_session, table(&m["per_session"]));
    assert_eq!(stats.totals, counts(&m["totals"]));
    assert_eq!(stats.unique_tokens as u64, m["unique_tokens"].as_u64().unwrap());
    assert_eq!(stats.total_tokens as u64, m["total_tokens"].as_u64().unwrap());

    let (rows, totals) = final_session_table(&episodes);
    assert_eq!(rows, table(&m["final_session"]));
    assert_eq!(totals.utterances, rows.values().map(|r| r.utterances).sum::<usize>());

    let s = annotation_sparsity(&episodes).unwrap();
    assert_eq!(s.annotated_turns as u64, m["annotated_turns"].as_u64().unwrap());
    assert_eq!(s.summary_turns as u64, m["summary_turns"].as_u64().unwrap());
    assert_eq!(s.no_summary_turns as u64, m["no_summary_turns"].as_u64().unwrap());
    assert!((s.summary_fraction + s.no_summary_fraction - 1.0).abs() < 1e-12);
}

/// Recount straight from the raw JSON lines without going through the
/// adapter's episode model.
#[test]
fn stats_match_raw_recount() {
    let raw = std::fs::read_to_string(fixture("msc_fixture.jsonl")).unwrap();
    let mut utterances = 0;
    let mut vocab = BTreeSet::new();
    let mut tokens = 0;
    let mut texts = Vec::new();
    for line in raw.lines().filter(|l| !l.trim().is_empty()) {
        let v: Value = serde_json::from_str(line).unwrap();
        for prev in v["previous_dialogs"].as_array().into_iter().flatten() {
            for u in prev["dialog"].as_array().unwrap() {
                texts.push(u["text"].as_str().unwrap().to_string());
            }
        }
        for u in v["dialog"].as_array().unwrap() {
            texts.push(u["text"].as_str().unwrap().to_string());
        }
    }
    for t in &texts {
        utterances += 1;
        let toks = ReferenceTokenizer.tokenize(t);
        tokens += toks.len();
        vocab.extend(toks.into_iter().map(str::to_string));
    }
    let stats = compute_stats(&load_msc(fixture("msc_fixture.jsonl"), "train").unwrap(), &ReferenceTokenizer).unwrap();
    assert_eq!(stats.totals.utterances, utterances);
    assert_eq!(stats.total_tokens, tokens);
    assert_eq!(stats.unique_tokens, vocab.len());
}

#[test]
fn adapter_preserves_structure_and_unknown_fields() {
    let episodes = load_msc(fixture("msc_fixture.jsonl"), "valid").unwrap();
    for e in &episodes {
        assert!(validate_episode(e).is_valid(), "{}: {:?}", e.id, validate_episode(e));
        for s in &e.sessions {
            for (t, u) in s.utterances.iter().enumerate() {
                let expected = if t % 2 == 0 { SpeakerId::SpeakerA } else { SpeakerId::SpeakerB };
                assert_eq!(u.speaker, expected);
            }
        }
    }
    let fx3 = episodes.iter().find(|e| e.id.starts_with("fx3")).unwrap();
    assert_eq!(fx3.metadata["dataset_tag"], "fixture");
    assert_eq!(fx3.sessions[1].gap_before.unwrap().total_hours(), 72);
    let fx4 = episodes.iter().find(|e| e.id.starts_with("fx4")).unwrap();
    assert_eq!(fx4.hours_between(1, 3), 5 + 48);
}
