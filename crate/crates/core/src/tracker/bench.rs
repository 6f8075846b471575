//! Forward passes per turn as a function of the number of S-type slots.

use std::collections::BTreeMap;

use serde::Serialize;

use super::{EmdTracker, PassCounts, TrackSession, TurnInference, TurnInput, TurnModel};
use crate::corpus::Ontology;
use crate::encoder::{Model, ModelConfig, Vocab};
use crate::error::Result;
use crate::tensor::Scalar;

/// A per-slot tracker in the style of models that query every
/// domain-slot pair: one encoder and tagger pass per S-type slot.
pub struct PerPairBaseline<'m, F> {
    pub model: &'m Model<F>,
}

impl<F: Scalar> TurnModel for PerPairBaseline<'_, F> {
    fn infer(&self, input: &TurnInput<'_>) -> TurnInference {
        let m = self.model;
        let mut passes = PassCounts::default();
        for q in m.ontology.stype_slots() {
            let sys = format!("{q} {}", input.sys);
            let enc = m.encode(&m.tokenize(&sys, input.usr));
            debug_assert!(enc.h_cls.iter().all(|x| x.is_finite()));
            passes.encoder += 1;
            passes.sstm += 1;
        }
        TurnInference {
            domain: input
                .prev_domain
                .map_or_else(|| m.ontology.domains()[0].clone(), str::to_string),
            passes,
            ..TurnInference::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub s: usize,
    pub emd_passes: f64,
    pub stub_passes: f64,
    pub cscm_passes: f64,
    pub dscm_passes: f64,
}

const N_DOMAINS: usize = 10;
const WORDS: [&str; 12] = [
    "i", "need", "a", "place", "in", "the", "north", "on", "monday", "for", "two", "please",
];

/// An ontology with `s` S-type slots spread over up to ten domains, each
/// domain with one C-type slot.
fn bench_ontology(s: usize) -> Result<Ontology> {
    let n = s.clamp(1, N_DOMAINS);
    let domains: Vec<String> = (0..n).map(|i| format!("bench{i}")).collect();
    let stype: Vec<String> = (0..s).map(|i| format!("bench{}.slot{i:04}", i % n)).collect();
    let ctype: BTreeMap<String, Vec<String>> = domains.iter().map(|d| (d.clone(), vec![format!("{d}.flag")])).collect();
    Ontology::new(domains, stype, ctype)
}

fn bench_turn(i: usize) -> (String, String) {
    let pick = |k: usize| WORDS[(i * 7 + k * 5) % WORDS.len()];
    let sys = (0..6).map(pick).collect::<Vec<_>>().join(" ");
    let usr = (6..14).map(pick).collect::<Vec<_>>().join(" ");
    (sys, usr)
}

/// For every size in `sizes`, builds a freshly initialized model of shape
/// `config` over a generated ontology and tracks `turns` turns with both
/// the full pipeline and the per-pair baseline. Counts are per-turn means.
pub fn bench_itc(config: &ModelConfig, sizes: &[usize], turns: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(sizes.len());
    for &s in sizes {
        let ontology = bench_ontology(s)?;
        let mut tokens = Vocab::build(&ontology, []).tokens().to_vec();
        let mut words: Vec<String> = WORDS.iter().map(|w| w.to_string()).collect();
        words.sort();
        words.dedup();
        words.retain(|w| !tokens.contains(w));
        tokens.extend(words);
        let vocab = Vocab::from_tokens(tokens)?;
        let model: Model<f32> = Model::new(config.clone(), vocab, ontology, seed)?;

        let emd = EmdTracker::new(&model);
        let stub = PerPairBaseline { model: &model };
        let mut a = TrackSession::new("bench");
        let mut b = TrackSession::new("bench");
        for i in 0..turns {
            let (sys, usr) = bench_turn(i);
            a.track_turn(&emd, &sys, &usr);
            b.track_turn(&stub, &sys, &usr);
        }
        let per_turn = |n: usize| if turns == 0 { 0.0 } else { n as f64 / turns as f64 };
        debug_assert_eq!(a.passes.encoder, a.passes.sstm);
        rows.push(BenchRow {
            s,
            emd_passes: per_turn(a.passes.encoder),
            stub_passes: per_turn(b.passes.encoder),
            cscm_passes: per_turn(a.passes.cscm),
            dscm_passes: per_turn(a.passes.dscm),
        });
        log::info!("bench-itc s={s}: {:?}", rows.last());
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("s,emd_passes,stub_passes,cscm_passes,dscm_passes\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.s, r.emd_passes, r.stub_passes, r.cscm_passes, r.dscm_passes
        ));
    }
    out
}
