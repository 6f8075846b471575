use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{TrackSession, TurnModel};
use crate::corpus::Dialogue;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum OsrReference {
    /// Compare against the domain the model predicted for the turn.
    #[default]
    Predicted,
    /// Compare against the gold domain of the turn.
    Gold,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    /// Turns with index below this are "cold", the rest "hot".
    pub cold_threshold: usize,
    pub osr_reference: OsrReference,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            cold_threshold: 6,
            osr_reference: OsrReference::Predicted,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DialogueDetail {
    pub id: String,
    pub multi_domain: bool,
    /// Per turn: predicted cumulative state equals gold.
    pub turn_correct: Vec<bool>,
    pub predicted_domains: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub jga: f64,
    pub jga_single: f64,
    pub jga_multi: f64,
    pub jga_cold: f64,
    pub jga_hot: f64,
    pub domain_accuracy: f64,
    pub osr: f64,
    pub turns: usize,
    pub single_turns: usize,
    pub multi_turns: usize,
    pub cold_turns: usize,
    pub hot_turns: usize,
    pub predicted_slots: usize,
    pub outlier_slots: usize,
    pub truncated_turns: usize,
    pub dialogues: Vec<DialogueDetail>,
}

#[derive(Default)]
struct Tally {
    correct: usize,
    total: usize,
}

impl Tally {
    fn add(&mut self, ok: bool) {
        self.total += 1;
        self.correct += usize::from(ok);
    }

    fn ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

struct DialogueResult {
    detail: DialogueDetail,
    domain_correct: Vec<bool>,
    predicted_slots: usize,
    outlier_slots: usize,
    truncated: usize,
}

fn run_dialogue(d: &Dialogue, model: &dyn TurnModel, options: &EvalOptions) -> DialogueResult {
    let mut session = TrackSession::new(&d.id);
    let gold = d.gold_states();
    let mut detail = DialogueDetail {
        id: d.id.clone(),
        multi_domain: d.is_multi_domain(),
        ..DialogueDetail::default()
    };
    let mut domain_correct = Vec::with_capacity(d.turns.len());
    let (mut predicted_slots, mut outlier_slots) = (0, 0);
    for (turn, gold_state) in d.turns.iter().zip(&gold) {
        let out = session.track_turn(model, &turn.sys_utterance, &turn.user_utterance);
        let reference = match options.osr_reference {
            OsrReference::Predicted => &out.domain,
            OsrReference::Gold => &turn.gold_domain,
        };
        predicted_slots += out.new_triplets.len();
        outlier_slots += out.new_triplets.iter().filter(|t| &t.domain != reference).count();
        domain_correct.push(out.domain == turn.gold_domain);
        detail.turn_correct.push(&session.belief == gold_state);
        detail.predicted_domains.push(out.domain);
    }
    DialogueResult {
        detail,
        domain_correct,
        predicted_slots,
        outlier_slots,
        truncated: session.truncations,
    }
}

/// Tracks every dialogue from an empty state and scores the cumulative
/// predictions. Dialogues run in parallel on the current rayon pool; the
/// totals are summed in corpus order.
pub fn evaluate(corpus: &[Dialogue], model: &dyn TurnModel, options: &EvalOptions) -> EvalReport {
    let results: Vec<DialogueResult> = corpus.par_iter().map(|d| run_dialogue(d, model, options)).collect();

    let mut all = Tally::default();
    let mut single = Tally::default();
    let mut multi = Tally::default();
    let mut cold = Tally::default();
    let mut hot = Tally::default();
    let mut domain = Tally::default();
    let mut report = EvalReport::default();
    for r in results {
        for (i, (&ok, &dom_ok)) in r.detail.turn_correct.iter().zip(&r.domain_correct).enumerate() {
            all.add(ok);
            if r.detail.multi_domain { &mut multi } else { &mut single }.add(ok);
            if i < options.cold_threshold { &mut cold } else { &mut hot }.add(ok);
            domain.add(dom_ok);
        }
        report.predicted_slots += r.predicted_slots;
        report.outlier_slots += r.outlier_slots;
        report.truncated_turns += r.truncated;
        report.dialogues.push(r.detail);
    }
    report.jga = all.ratio();
    report.jga_single = single.ratio();
    report.jga_multi = multi.ratio();
    report.jga_cold = cold.ratio();
    report.jga_hot = hot.ratio();
    report.domain_accuracy = domain.ratio();
    report.osr = if report.predicted_slots == 0 {
        0.0
    } else {
        report.outlier_slots as f64 / report.predicted_slots as f64
    };
    report.turns = all.total;
    report.single_turns = single.total;
    report.multi_turns = multi.total;
    report.cold_turns = cold.total;
    report.hot_turns = hot.total;
    report
}

impl EvalReport {
    /// Only the headline table; `splits` selects the optional rows
    /// (`cold-hot`, `single-multi`).
    pub fn table(&self, splits: &[&str]) -> String {
        let mut rows = vec![("JGA", self.jga, self.turns)];
        if splits.contains(&"single-multi") {
            rows.push(("JGA single", self.jga_single, self.single_turns));
            rows.push(("JGA multi", self.jga_multi, self.multi_turns));
        }
        if splits.contains(&"cold-hot") {
            rows.push(("JGA cold", self.jga_cold, self.cold_turns));
            rows.push(("JGA hot", self.jga_hot, self.hot_turns));
        }
        rows.push(("domain accuracy", self.domain_accuracy, self.turns));
        rows.push(("OSR", self.osr, self.predicted_slots));
        let mut out = format!("{:<16} {:>7} {:>7}\n", "metric", "value", "count");
        for (name, v, n) in rows {
            out.push_str(&format!("{name:<16} {v:>7.3} {n:>7}\n"));
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.table(&["single-multi", "cold-hot"]))
    }
}
