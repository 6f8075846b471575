//! Entry points shared by the cargo-fuzz targets and the seed replay test.
//! Each accepts arbitrary bytes and must return without panicking.

use std::collections::BTreeMap;

use crate::checkpoint::{decode_checkpoint, Manifest};
use crate::corpus::multiwoz::parse_multiwoz;
use crate::corpus::synthetic::SyntheticConfig;
use crate::corpus::{read_jsonl, Ontology};
use crate::encoder::tokenizer::tokenize_with_limit;
use crate::tracker::{run_repl, ScriptedPredictor};
use crate::training::TrainConfig;

/// Names of all targets, matching the binaries under `fuzz/fuzz_targets`.
pub const TARGETS: [&str; 9] = [
    "multiwoz_json",
    "corpus_jsonl",
    "ontology_json",
    "checkpoint",
    "train_config",
    "synthetic_config",
    "tokenizer",
    "decode_tags",
    "repl_script",
];

pub fn run(target: &str, data: &[u8]) {
    match target {
        "multiwoz_json" => multiwoz_json(data),
        "corpus_jsonl" => corpus_jsonl(data),
        "ontology_json" => ontology_json(data),
        "checkpoint" => checkpoint(data),
        "train_config" => train_config(data),
        "synthetic_config" => synthetic_config(data),
        "tokenizer" => tokenizer(data),
        "decode_tags" => decode_tags(data),
        "repl_script" => repl_script(data),
        other => panic!("unknown fuzz target {other}"),
    }
}

fn fixed_ontology() -> Ontology {
    Ontology::new(
        ["hotel", "train"].map(String::from),
        ["hotel.area", "hotel.name", "train.day", "train.destination"].map(String::from),
        BTreeMap::from([("hotel".to_string(), vec!["hotel.parking".to_string()])]),
    )
    .expect("valid ontology")
}

pub fn multiwoz_json(data: &[u8]) {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(ingested) = parse_multiwoz(text, None) {
            let _ = ingested.reconstruction_mismatches();
        }
    }
}

pub fn corpus_jsonl(data: &[u8]) {
    if let Ok(corpus) = read_jsonl(data) {
        let ontology = fixed_ontology();
        for d in &corpus {
            if d.validate(&ontology).is_ok() {
                let _ = d.gold_states();
            }
        }
    }
}

pub fn ontology_json(data: &[u8]) {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(o) = Ontology::from_json_str(text) {
            for label in 0..o.num_labels() {
                let _ = o.label_name(label);
            }
        }
    }
}

/// Manifest JSON, a NUL byte, then the weight blob.
pub fn checkpoint(data: &[u8]) {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let (head, rest) = data.split_at(split);
    let blob = rest.get(1..).unwrap_or_default();
    if let Ok(text) = std::str::from_utf8(head) {
        if let Ok(manifest) = Manifest::from_json_str(text) {
            // Refuse shapes that would make model construction allocate
            // far more than the blob could describe.
            if manifest.config.validate().is_ok() && checkpoint_size_plausible(&manifest, blob.len()) {
                let _ = decode_checkpoint(&manifest, blob);
            }
        }
    }
}

fn checkpoint_size_plausible(m: &Manifest, blob_len: usize) -> bool {
    let c = &m.config;
    c.d_model <= 64
        && c.n_layers <= 4
        && c.ffn_dim <= 256
        && c.max_len <= 512
        && c.head_hidden <= 64
        && m.vocab.len() <= 4096
        && m.ontology.num_stype() <= 512
        && m.ontology.domains().len() <= 64
        && m.tensors.len() <= 256
        && blob_len <= 1 << 22
}

pub fn train_config(data: &[u8]) {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = TrainConfig::from_json_str(text);
    }
}

pub fn synthetic_config(data: &[u8]) {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(c) = SyntheticConfig::from_json_str(text) {
            let _ = c.ontology();
        }
    }
}

/// First byte is the length limit; the rest is `system\nuser`.
pub fn tokenizer(data: &[u8]) {
    let Some((&limit, rest)) = data.split_first() else { return };
    let text = String::from_utf8_lossy(rest);
    let (sys, usr) = text.split_once('\n').unwrap_or(("", &text));
    let limit = usize::from(limit).max(3);
    let t = tokenize_with_limit(sys, usr, limit);
    assert!(t.tokens.len() <= limit, "length limit exceeded");
}

/// One label per byte, reduced modulo the label count.
pub fn decode_tags(data: &[u8]) {
    let ontology = fixed_ontology();
    let n = ontology.num_labels();
    let labels: Vec<usize> = data.iter().map(|&b| usize::from(b) % n).collect();
    let positions: Vec<String> = (0..labels.len()).map(|i| format!("w{}", i % 7)).collect();
    let out = crate::corpus::decode_tags(&labels, &positions, &ontology);
    let slots: Vec<_> = out.triplets.iter().map(|t| t.key()).collect();
    let unique: std::collections::BTreeSet<_> = slots.iter().collect();
    assert_eq!(slots.len(), unique.len(), "one value per slot");
}

pub fn repl_script(data: &[u8]) {
    let stub = ScriptedPredictor::default();
    let _ = run_repl(&stub, data, std::io::sink(), false);
}
