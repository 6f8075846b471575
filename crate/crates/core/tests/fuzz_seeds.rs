//! Replays the checked-in fuzz seeds through every entry point, then a few
//! hundred seeded mutations of each, so parser panics surface without a
//! nightly toolchain.

use std::path::{Path, PathBuf};

use emd_core::checkpoint::{decode_checkpoint, Manifest};
use emd_core::fuzzing::{run, TARGETS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MUTATIONS_PER_SEED: usize = 300;
const INTERESTING: &[u8] = b"{}[]\",:0-.e\n\0 9";

fn corpus_dir(target: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target)
}

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = corpus_dir(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn mutate(rng: &mut ChaCha8Rng, data: &[u8]) -> Vec<u8> {
    let mut d = data.to_vec();
    for _ in 0..rng.gen_range(1..=4) {
        match rng.gen_range(0..5) {
            0 if !d.is_empty() => {
                let i = rng.gen_range(0..d.len());
                d[i] ^= 1 << rng.gen_range(0..8);
            }
            1 if !d.is_empty() => {
                let i = rng.gen_range(0..d.len());
                d.truncate(i);
            }
            2 => {
                let i = rng.gen_range(0..=d.len());
                d.insert(i, INTERESTING[rng.gen_range(0..INTERESTING.len())]);
            }
            3 if d.len() > 1 => {
                let i = rng.gen_range(0..d.len());
                let j = rng.gen_range(i..d.len());
                d.drain(i..j.min(i + 8));
            }
            _ if !d.is_empty() => {
                let i = rng.gen_range(0..d.len());
                d[i] = rng.gen();
            }
            _ => d.push(rng.gen()),
        }
    }
    d
}

#[test]
fn every_target_has_seeds() {
    for t in TARGETS {
        assert!(!seeds(t).is_empty(), "no seeds for {t}");
        let bin = Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../../fuzz/fuzz_targets/{t}.rs"));
        assert!(bin.exists(), "missing fuzz target {}", bin.display());
    }
}

#[test]
fn seeds_and_mutations_do_not_panic() {
    for (k, t) in TARGETS.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        for (name, data) in seeds(t) {
            run(t, &data);
            for _ in 0..MUTATIONS_PER_SEED {
                let m = mutate(&mut rng, &data);
                let r = std::panic::catch_unwind(|| run(t, &m));
                assert!(r.is_ok(), "{t} panicked on a mutation of {name}: {:?}", String::from_utf8_lossy(&m));
            }
        }
    }
}

#[test]
fn checkpoint_seed_is_a_loadable_model() {
    let data = std::fs::read(corpus_dir("checkpoint").join("tiny_model.bin")).unwrap();
    let split = data.iter().position(|&b| b == 0).unwrap();
    let manifest = Manifest::from_json_str(std::str::from_utf8(&data[..split]).unwrap()).unwrap();
    let model = decode_checkpoint(&manifest, &data[split + 1..]).unwrap();
    assert_eq!(model.config.d_model, 4);

    let data = std::fs::read(corpus_dir("checkpoint").join("truncated_blob.bin")).unwrap();
    let split = data.iter().position(|&b| b == 0).unwrap();
    let manifest = Manifest::from_json_str(std::str::from_utf8(&data[..split]).unwrap()).unwrap();
    assert!(decode_checkpoint(&manifest, &data[split + 1..]).is_err());
}
